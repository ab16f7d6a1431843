//! Surface coverage, map entropy, accumulated depth clouds and floater
//! volume.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{FieldError, OccupancyField};
use crate::geometry::{pixel_to_ray, Aabb, GeometryError, Vec3};
use crate::sensor_sim::{SdfScene, ViewCapture};

/// Default registration threshold in meters.
pub const COVERAGE_THRESHOLD: f64 = 0.005;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("ground-truth point set is empty")]
    EmptyGroundTruth,
    #[error("grid resolution must be at least 1")]
    Resolution,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub matched: usize,
    pub total: usize,
    pub coverage: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub bits: f64,
    pub resolution: usize,
}

type CellKey = (i64, i64, i64);

/// Uniform-grid index for exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Vec3>,
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
    lo: CellKey,
    hi: CellKey,
}

impl PointIndex {
    pub fn new(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = key(*p, cell);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            cells.entry(k).or_default().push(i as u32);
        }
        Self {
            points: points.to_vec(),
            cell,
            cells,
            lo,
            hi,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the closest point; lowest index on ties.
    pub fn nearest(&self, q: Vec3) -> Option<(usize, f64)> {
        self.nearest_within(q, f64::INFINITY)
    }

    /// Closest point, if one lies within `max_dist`.
    pub fn nearest_within(&self, q: Vec3, max_dist: f64) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = key(q, self.cell);
        let limit = ((max_dist / self.cell).ceil().min(1e15) as i64).saturating_add(1);
        let reach = [
            (c.0 - self.lo.0).abs().max((self.hi.0 - c.0).abs()),
            (c.1 - self.lo.1).abs().max((self.hi.1 - c.1).abs()),
            (c.2 - self.lo.2).abs().max((self.hi.2 - c.2).abs()),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
        .min(limit);
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..=reach {
            if let Some((_, d)) = best {
                if d < (ring - 1) as f64 * self.cell {
                    break;
                }
            }
            self.visit_ring(c, ring, |i| {
                let d = self.points[i].distance(q);
                let better = match best {
                    None => true,
                    Some((bi, bd)) => d < bd || (d == bd && i < bi),
                };
                if better {
                    best = Some((i, d));
                }
            });
        }
        best.filter(|&(_, d)| d <= max_dist)
    }

    fn visit_ring(&self, c: CellKey, ring: i64, mut f: impl FnMut(usize)) {
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        ids.iter().for_each(|&i| f(i as usize));
                    }
                }
            }
        }
    }
}

fn key(p: Vec3, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Fraction of ground-truth points with a reconstructed point closer than
/// `threshold`.
pub fn surface_coverage(
    recon: &[Vec3],
    gt: &[Vec3],
    threshold: f64,
) -> Result<CoverageReport, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let index = PointIndex::new(recon, threshold.max(1e-4));
    let matched = gt
        .par_iter()
        .filter(|&&g| index.nearest_within(g, threshold).is_some_and(|(_, d)| d < threshold))
        .count();
    Ok(CoverageReport {
        matched,
        total: gt.len(),
        coverage: matched as f64 / gt.len() as f64,
        threshold,
    })
}

/// Binary entropy in bits. Zero at the endpoints.
pub fn entropy_bits(o: f64) -> f64 {
    let h = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    h(o) + h(1.0 - o)
}

/// Occupancy at the `res³` cell centers, x fastest, evaluated slab by slab.
pub fn sample_grid<F: OccupancyField + ?Sized>(field: &F, res: usize) -> Result<Vec<f64>, MetricsError> {
    if res == 0 {
        return Err(MetricsError::Resolution);
    }
    let aabb = field.aabb();
    let step = aabb.extent() * (1.0 / res as f64);
    let slabs: Vec<Vec<f64>> = (0..res)
        .into_par_iter()
        .map(|iz| {
            let mut out = Vec::with_capacity(res * res);
            for iy in 0..res {
                for ix in 0..res {
                    let p = aabb.min
                        + Vec3::new(
                            (ix as f64 + 0.5) * step.x,
                            (iy as f64 + 0.5) * step.y,
                            (iz as f64 + 0.5) * step.z,
                        );
                    out.push(field.occupancy(p)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_, FieldError>>()?;
    Ok(slabs.concat())
}

/// Mean binary entropy over the cell centers of a `res³` grid.
pub fn map_entropy<F: OccupancyField + ?Sized>(field: &F, res: usize) -> Result<EntropyReport, MetricsError> {
    let occ = sample_grid(field, res)?;
    let total: f64 = occ
        .chunks(res * res)
        .map(|slab| slab.iter().map(|&o| entropy_bits(o)).sum::<f64>())
        .sum();
    Ok(EntropyReport {
        bits: total / occ.len() as f64,
        resolution: res,
    })
}

/// Back-projects every valid depth pixel of every capture through its
/// recorded pose and keeps the points inside `aabb`.
pub fn accumulate_recon_points(captures: &[&ViewCapture], aabb: &Aabb) -> Result<Vec<Vec3>, MetricsError> {
    let mut out = Vec::new();
    for cap in captures {
        for (i, d) in cap.depth.iter().enumerate() {
            let Some(d) = d else { continue };
            let (u, v) = cap.intrinsics.pixel_center(i);
            let p = pixel_to_ray(&cap.intrinsics, &cap.pose, u, v)?.at(*d);
            if aabb.contains(p, 0.0) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Fraction of `res³` probe cells that the field calls occupied although
/// they lie more than `margin` outside the true surface.
pub fn floater_volume<F: OccupancyField + ?Sized>(
    field: &F,
    scene: &SdfScene,
    res: usize,
    margin: f64,
) -> Result<f64, MetricsError> {
    let occ = sample_grid(field, res)?;
    let aabb = field.aabb();
    let centers = aabb.cell_centers(res);
    let count = occ
        .iter()
        .zip(centers)
        .filter(|(&o, p)| o > 0.5 && scene.object_sdf(*p) > margin)
        .count();
    Ok(count as f64 / occ.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ConstantField;
    use crate::geometry::{CameraIntrinsics, ViewManifold};
    use crate::sensor_sim::{render_view, SensorConfig, TRACE_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64, spread: f64) -> Vec<Vec3> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(r.gen_range(-spread..spread), r.gen_range(-spread..spread), r.gen_range(-spread..spread)))
            .collect()
    }

    #[test]
    fn coverage_examples() {
        let gt = cloud(300, 1, 0.2);
        assert_eq!(surface_coverage(&gt, &gt, 0.005).unwrap().coverage, 1.0);
        assert_eq!(surface_coverage(&[], &gt, 0.005).unwrap().coverage, 0.0);
        let two = [Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)];
        let r = surface_coverage(&two[..1], &two, 0.005).unwrap();
        assert_eq!((r.matched, r.total, r.coverage), (1, 2, 0.5));
        assert!(surface_coverage(&gt, &[], 0.005).is_err());
    }

    #[test]
    fn nearest_matches_brute_force() {
        let a = cloud(500, 2, 0.2);
        let b = cloud(500, 3, 0.2);
        let index = PointIndex::new(&a, 0.005);
        for q in &b {
            let (bi, bd) = index.nearest(*q).unwrap();
            let (si, sd) = a
                .iter()
                .enumerate()
                .map(|(i, p)| (i, p.distance(*q)))
                .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            assert_eq!((bi, bd), (si, sd));
        }
        for thr in [0.005, 0.01, 0.02, 0.05] {
            let fast = surface_coverage(&a, &b, thr).unwrap().matched;
            let slow = b
                .iter()
                .filter(|q| a.iter().any(|p| p.distance(**q) < thr))
                .count();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn coverage_is_monotone_and_rigid_invariant() {
        let a = cloud(400, 4, 0.1);
        let b = cloud(400, 5, 0.1);
        let mut prev = 0.0;
        for thr in [0.002, 0.005, 0.01, 0.02, 0.04] {
            let c = surface_coverage(&a, &b, thr).unwrap().coverage;
            assert!(c >= prev);
            prev = c;
        }
        let pose = ViewManifold::default().view(0.8, 0.4).pose().unwrap();
        let ta: Vec<Vec3> = a.iter().map(|p| pose.transform_point(*p)).collect();
        let tb: Vec<Vec3> = b.iter().map(|p| pose.transform_point(*p)).collect();
        for thr in [0.005, 0.02] {
            let c0 = surface_coverage(&a, &b, thr).unwrap().coverage;
            let c1 = surface_coverage(&ta, &tb, thr).unwrap().coverage;
            assert!((c0 - c1).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_examples() {
        let aabb = Aabb::cube(0.25);
        let e = map_entropy(&ConstantField::new(0.5, aabb), 16).unwrap();
        assert!((e.bits - 1.0).abs() < 1e-9);
        assert!(map_entropy(&ConstantField::new(1.0 - 1e-9, aabb), 8).unwrap().bits < 1e-7);
        let q = map_entropy(&ConstantField::new(0.25, aabb), 8).unwrap().bits;
        assert!((q - 0.811278).abs() < 1e-6);
        assert!(map_entropy(&ConstantField::new(0.5, aabb), 0).is_err());
    }

    #[test]
    fn entropy_moves_toward_half() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let o: f64 = r.gen_range(0.0..1.0);
            let closer = 0.5 + (o - 0.5) * r.gen_range(0.0..1.0);
            assert!(entropy_bits(closer) >= entropy_bits(o) - 1e-15);
            assert!((0.0..=1.0).contains(&entropy_bits(o)));
        }
    }

    fn sphere_capture(noise: f64) -> (SdfScene, ViewCapture) {
        let scene = SdfScene::builtin("sphere").unwrap();
        let intr = CameraIntrinsics::from_fov(32, 32, 24.0).unwrap();
        let pose = ViewManifold::default().view(0.4, 0.3).pose().unwrap();
        let sensor = SensorConfig {
            noise_sigma: noise,
            ..Default::default()
        };
        let cap = render_view(&scene, &pose, &intr, &sensor, 1).unwrap();
        (scene, cap)
    }

    #[test]
    fn accumulated_points_lie_on_surface() {
        let (scene, cap) = sphere_capture(0.0);
        assert!(accumulate_recon_points(&[], &scene.aabb()).unwrap().is_empty());
        let pts = accumulate_recon_points(&[&cap], &scene.aabb()).unwrap();
        assert!(!pts.is_empty());
        assert!(pts.iter().all(|p| scene.object_sdf(*p).abs() < 3.0 * TRACE_TOL));
        let twice = accumulate_recon_points(&[&cap, &cap], &scene.aabb()).unwrap();
        assert_eq!(twice.len(), 2 * pts.len());
        let (scene, noisy) = sphere_capture(0.001);
        let pts = accumulate_recon_points(&[&noisy], &scene.aabb()).unwrap();
        assert!(pts.iter().all(|p| scene.object_sdf(*p).abs() < 3.0 * (0.001 + TRACE_TOL) * 2.0));
    }

    #[test]
    fn floater_examples() {
        let scene = SdfScene::builtin("sphere").unwrap();
        let aabb = scene.aabb();
        assert_eq!(floater_volume(&ConstantField::new(1e-9, aabb), &scene, 32, 0.02).unwrap(), 0.0);
        let f = floater_volume(&ConstantField::new(1.0 - 1e-9, aabb), &scene, 64, 0.02).unwrap();
        let r: f64 = 0.15 + 0.02;
        let expect = 1.0 - 4.0 / 3.0 * std::f64::consts::PI * r.powi(3) / aabb.volume();
        let cell = 0.5 / 64.0;
        let shell = 4.0 * std::f64::consts::PI * r * r * 2.0 * cell / aabb.volume();
        assert!((f - expect).abs() < shell, "{f} vs {expect}");
        let perfect = crate::field::FnField {
            aabb,
            f: |p: Vec3| if p.norm() < 0.15 { 0.99 } else { 0.01 },
        };
        assert!(floater_volume(&perfect, &scene, 64, 0.02).unwrap() < 0.001);
    }
}
