use std::fs::File;

use airecon::field::FnField;
use airecon::geometry::{Aabb, Vec3};
use airecon::meshing::{export_ply, marching_cubes, TriangleMesh, ISO_LEVEL};
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

fn ball() -> TriangleMesh {
    let field = FnField {
        aabb: Aabb::cube(0.25),
        f: |p: Vec3| 1.0 / (1.0 + ((p.norm() - 0.15) / 0.01).exp()),
    };
    marching_cubes(&field, 24, ISO_LEVEL, true).unwrap()
}

fn read(path: &std::path::Path) -> ply_rs::ply::Ply<DefaultElement> {
    let mut f = File::open(path).unwrap();
    Parser::<DefaultElement>::new().read_ply(&mut f).unwrap()
}

fn double(e: &DefaultElement, key: &str) -> f64 {
    match e.get(key) {
        Some(Property::Double(v)) => *v,
        other => panic!("{key}: {other:?}"),
    }
}

#[test]
fn exported_mesh_parses_with_an_independent_reader() {
    let mesh = ball();
    assert!(!mesh.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ball.ply");
    export_ply(&mesh, &path).unwrap();
    let ply = read(&path);

    let verts = &ply.payload["vertex"];
    let faces = &ply.payload["face"];
    assert_eq!(verts.len(), mesh.vertices.len());
    assert_eq!(faces.len(), mesh.triangles.len());
    for (e, v) in verts.iter().zip(&mesh.vertices) {
        assert_eq!(double(e, "x"), v.x);
        assert_eq!(double(e, "y"), v.y);
        assert_eq!(double(e, "z"), v.z);
        for ch in ["red", "green", "blue"] {
            assert!(matches!(e.get(ch), Some(Property::UChar(_))));
        }
    }
    for (e, t) in faces.iter().zip(&mesh.triangles) {
        match e.get("vertex_indices") {
            Some(Property::ListInt(ix)) => {
                let got: Vec<i64> = ix.iter().map(|&i| i as i64).collect();
                let want: Vec<i64> = t.iter().map(|&i| i as i64).collect();
                assert_eq!(got, want);
            }
            other => panic!("vertex_indices: {other:?}"),
        }
    }
}

#[test]
fn colorless_mesh_has_only_positions() {
    let mut mesh = ball();
    mesh.colors = None;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plain.ply");
    export_ply(&mesh, &path).unwrap();
    let ply = read(&path);
    let vertex = &ply.header.elements["vertex"];
    let names: Vec<&str> = vertex.properties.keys().map(String::as_str).collect();
    assert_eq!(names, ["x", "y", "z"]);
}

#[test]
fn empty_mesh_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ply");
    export_ply(&TriangleMesh::default(), &path).unwrap();
    let ply = read(&path);
    assert!(ply.payload.get("vertex").map_or(true, Vec::is_empty));
    assert!(ply.payload.get("face").map_or(true, Vec::is_empty));
}

#[test]
fn unwritable_path_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("x.ply");
    let err = export_ply(&ball(), &path).unwrap_err();
    assert!(err.to_string().contains("x.ply"), "{err}");
}
