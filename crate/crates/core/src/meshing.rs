//! Marching cubes over the occupancy field and ASCII PLY export.
//!
//! The 256-case triangle table is derived at first use. On every cube
//! face the iso-crossings are joined into segments (diagonally opposite
//! inside corners are kept apart), the segments are chained into closed
//! loops and each loop is fanned into triangles. Because a face's
//! segments depend only on that face's corner signs, neighbouring cubes
//! agree on their shared face and closed level sets give watertight
//! meshes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::field::{FieldError, OccupancyField};
use crate::geometry::Vec3;

pub const ISO_LEVEL: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("marching cubes needs at least 2 samples per axis, got {0}")]
    Resolution(usize),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        (b - a).cross(c - a)
    }

    /// Each undirected edge with the number of triangles using it.
    pub fn edge_use(&self) -> HashMap<(u32, u32), usize> {
        let mut uses = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        uses
    }
}

/// Corner `i` sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`.
const fn corner(i: usize) -> [usize; 3] {
    [i & 1, (i >> 1) & 1, (i >> 2) & 1]
}

/// The twelve cube edges as (lower corner, upper corner, axis).
fn edges() -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(12);
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                out.push((c, c | (1 << axis), axis));
            }
        }
    }
    out
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    edges()
        .iter()
        .position(|&(x, y, _)| x == lo && y == hi)
        .expect("adjacent corners")
}

fn corner_pos(i: usize) -> Vec3 {
    let c = corner(i);
    Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)
}

fn edge_mid(e: usize) -> Vec3 {
    let (a, b, _) = edges()[e];
    (corner_pos(a) + corner_pos(b)) * 0.5
}

/// Face corners in counter-clockwise order seen from outside, and the
/// outward normal.
fn faces() -> Vec<([usize; 4], Vec3)> {
    let mut out = Vec::with_capacity(6);
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for side in 0..2 {
            let at = |ub: usize, uc: usize| (side << a) | (ub << b) | (uc << c);
            let mut ring = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
            let mut n = [0.0; 3];
            n[a] = if side == 1 { 1.0 } else { -1.0 };
            if side == 0 {
                ring.reverse();
            }
            out.push((ring, Vec3::from_array(n)));
        }
    }
    out
}

/// Triangles (as edge indices) for one sign configuration; bit `i` of
/// `case` set means corner `i` is inside.
fn triangulate_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut next: HashMap<usize, usize> = HashMap::new();
    for (ring, n) in faces() {
        let crossing: Vec<usize> = (0..4)
            .filter(|&k| inside(ring[k]) != inside(ring[(k + 1) % 4]))
            .collect();
        let mut segments = Vec::new();
        match crossing.len() {
            0 => {}
            2 => {
                let (k0, k1) = (crossing[0], crossing[1]);
                let anchor = if inside(ring[k0]) { ring[k0] } else { ring[(k0 + 1) % 4] };
                segments.push((k0, k1, anchor));
            }
            4 => {
                for k in 0..4 {
                    if inside(ring[k]) {
                        segments.push(((k + 3) % 4, k, ring[k]));
                    }
                }
            }
            _ => unreachable!("a face has an even number of crossings"),
        }
        for (k0, k1, anchor) in segments {
            let e0 = edge_between(ring[k0], ring[(k0 + 1) % 4]);
            let e1 = edge_between(ring[k1], ring[(k1 + 1) % 4]);
            let (p, q) = (edge_mid(e0), edge_mid(e1));
            let side = (q - p).cross(corner_pos(anchor) - p).dot(n);
            let (from, to) = if side < 0.0 { (e0, e1) } else { (e1, e0) };
            let clash = next.insert(from, to);
            debug_assert!(clash.is_none());
        }
    }
    let mut tris = Vec::new();
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    for s in starts {
        if !next.contains_key(&s) {
            continue;
        }
        let mut lp = vec![s];
        let mut cur = next.remove(&s).expect("present");
        while cur != s {
            lp.push(cur);
            cur = next.remove(&cur).expect("closed loop");
        }
        let n = lp.len();
        let apex = (0..n)
            .find(|&a| (2..n - 1).all(|k| !share_face(lp[a], lp[(a + k) % n])))
            .unwrap_or(0);
        for k in 1..n - 1 {
            let (b, c) = (lp[(apex + k) % n], lp[(apex + k + 1) % n]);
            tris.push([lp[apex] as u8, b as u8, c as u8]);
        }
    }
    tris
}

/// Whether two cube edges lie on a common face.
fn share_face(e0: usize, e1: usize) -> bool {
    let list = edges();
    let faces_of = |e: usize| {
        let (a, _, axis) = list[e];
        (0..3)
            .filter(move |&f| f != axis)
            .map(move |f| (f, (a >> f) & 1))
    };
    faces_of(e0).any(|f| faces_of(e1).any(|g| g == f))
}

fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate_case).collect())
}

/// Extracts the `iso` level set from `res³` lattice samples spanning the
/// field's box. Triangles face toward decreasing occupancy.
pub fn marching_cubes<F: OccupancyField + ?Sized>(
    field: &F,
    res: usize,
    iso: f64,
    with_color: bool,
) -> Result<TriangleMesh, MeshError> {
    if res < 2 {
        return Err(MeshError::Resolution(res));
    }
    let aabb = field.aabb();
    let step = aabb.extent() * (1.0 / (res - 1) as f64);
    let lattice = |i: usize, j: usize, k: usize| {
        aabb.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let slabs: Vec<Vec<f64>> = (0..res)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(res * res);
            for j in 0..res {
                for i in 0..res {
                    out.push(field.occupancy(lattice(i, j, k))?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_, FieldError>>()?;
    let vals = slabs.concat();
    let at = |i: usize, j: usize, k: usize| vals[(k * res + j) * res + i];

    let table = case_table();
    let edge_list = edges();
    let mut mesh = TriangleMesh::default();
    let mut vertex_of: HashMap<(usize, usize, usize, usize), u32> = HashMap::new();
    for k in 0..res - 1 {
        for j in 0..res - 1 {
            for i in 0..res - 1 {
                let mut case = 0;
                let mut v = [0.0; 8];
                for (c, vc) in v.iter_mut().enumerate() {
                    let o = corner(c);
                    *vc = at(i + o[0], j + o[1], k + o[2]);
                    if *vc > iso {
                        case |= 1 << c;
                    }
                }
                if table[case].is_empty() {
                    continue;
                }
                for tri in &table[case] {
                    let ids = tri.map(|e| {
                        let (a, b, axis) = edge_list[e as usize];
                        let oa = corner(a);
                        let key = (i + oa[0], j + oa[1], k + oa[2], axis);
                        *vertex_of.entry(key).or_insert_with(|| {
                            let ob = corner(b);
                            let pa = lattice(key.0, key.1, key.2);
                            let pb = lattice(i + ob[0], j + ob[1], k + ob[2]);
                            let t = (iso - v[a]) / (v[b] - v[a]);
                            mesh.vertices.push(pa + (pb - pa) * t);
                            (mesh.vertices.len() - 1) as u32
                        })
                    });
                    let [p, q, r] = ids.map(|x| mesh.vertices[x as usize]);
                    if (q - p).cross(r - p).norm() * 0.5 > 1e-12 {
                        mesh.triangles.push(ids);
                    }
                }
            }
        }
    }
    if with_color {
        let colors = mesh
            .vertices
            .par_iter()
            .map(|p| Ok(field.query(*p)?.color))
            .collect::<Result<_, FieldError>>()?;
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ply(mesh: &TriangleMesh, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", mesh.vertices.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property double {axis}")?;
    }
    if mesh.colors.is_some() {
        for ch in ["red", "green", "blue"] {
            writeln!(out, "property uchar {ch}")?;
        }
    }
    writeln!(out, "element face {}", mesh.triangles.len())?;
    writeln!(out, "property list uchar int vertex_indices")?;
    writeln!(out, "end_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        write!(out, "{} {} {}", v.x, v.y, v.z)?;
        if let Some(c) = &mesh.colors {
            let [r, g, b] = c[i].map(to_byte);
            write!(out, " {r} {g} {b}")?;
        }
        writeln!(out)?;
    }
    for t in &mesh.triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

pub fn export_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    let io = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_ply(mesh, &mut w).map_err(io)?;
    w.flush().map_err(io)
}
