//! Small procedural meshes, mostly for tests and calibration.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::Point3;

use super::Mesh;

fn build(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Mesh {
    Mesh::new(vertices, faces).expect("primitive mesh is valid")
}

/// Regular tetrahedron with unit circumradius, outward-facing.
pub fn tetrahedron() -> Mesh {
    let s = 1.0 / 3f64.sqrt();
    let v = vec![
        Point3::new(s, s, s),
        Point3::new(s, -s, -s),
        Point3::new(-s, s, -s),
        Point3::new(-s, -s, s),
    ];
    build(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
}

/// Axis-aligned unit cube `[0,1]^3`, two triangles per side.
pub fn cube() -> Mesh {
    let mut v = Vec::new();
    for i in 0..8 {
        v.push(Point3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
    }
    let quads = [
        [0, 2, 3, 1], // z = 0
        [4, 5, 7, 6], // z = 1
        [0, 1, 5, 4], // y = 0
        [2, 6, 7, 3], // y = 1
        [0, 4, 6, 2], // x = 0
        [1, 3, 7, 5], // x = 1
    ];
    let mut f = Vec::new();
    for q in quads {
        f.push([q[0], q[1], q[2]]);
        f.push([q[0], q[2], q[3]]);
    }
    build(v, f)
}

fn subdivide_on_sphere(mut v: Vec<Point3<f64>>, mut f: Vec<[usize; 3]>, levels: usize) -> Mesh {
    for _ in 0..levels {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, v: &mut Vec<Point3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let m = nalgebra::center(&v[a], &v[b]);
                v.push(Point3::from(m.coords.normalize()));
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = mid(a, b, &mut v);
            let bc = mid(b, c, &mut v);
            let ca = mid(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    build(v, f)
}

/// Unit icosphere. Level `k` has `10*4^k + 2` vertices.
pub fn icosphere(levels: usize) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let v = raw
        .iter()
        .map(|&(x, y, z)| Point3::from(nalgebra::Vector3::new(x, y, z).normalize()))
        .collect();
    let f = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    subdivide_on_sphere(v, f, levels)
}

/// Unit octasphere; level 1 has 18 vertices, 48 edges, 32 faces.
pub fn octasphere(levels: usize) -> Mesh {
    let v = vec![
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(-1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(0.0, -1.0, 0.0),
        Point3::new(0.0, 0.0, 1.0),
        Point3::new(0.0, 0.0, -1.0),
    ];
    let f = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    subdivide_on_sphere(v, f, levels)
}

/// Planar grid of `nx * ny` quads in the `z = 0` plane, split along one diagonal.
pub fn grid(nx: usize, ny: usize, spacing: f64) -> Mesh {
    let mut v = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            v.push(Point3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut f = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            f.push([a, b, c]);
            f.push([a, c, d]);
        }
    }
    build(v, f)
}

/// Capped cylinder along the z axis from `z = 0` to `z = length`, with
/// `segments` around and `rings` along the side. Caps are single fans with a
/// center vertex.
pub fn capped_tube(segments: usize, rings: usize, radius: f64, length: f64) -> Mesh {
    let mut v = Vec::new();
    for r in 0..=rings {
        let z = length * r as f64 / rings as f64;
        for s in 0..segments {
            let a = 2.0 * PI * s as f64 / segments as f64;
            v.push(Point3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let bottom = v.len();
    v.push(Point3::new(0.0, 0.0, 0.0));
    let top = v.len();
    v.push(Point3::new(0.0, 0.0, length));
    let id = |r: usize, s: usize| r * segments + (s % segments);
    let mut f = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = (id(r, s), id(r, s + 1), id(r + 1, s + 1), id(r + 1, s));
            f.push([a, b, c]);
            f.push([a, c, d]);
        }
    }
    for s in 0..segments {
        f.push([bottom, id(0, s + 1), id(0, s)]);
        f.push([top, id(rings, s), id(rings, s + 1)]);
    }
    build(v, f)
}

/// Torus around the z axis.
pub fn torus(major_segments: usize, minor_segments: usize, major: f64, minor: f64) -> Mesh {
    let mut v = Vec::new();
    for i in 0..major_segments {
        let u = 2.0 * PI * i as f64 / major_segments as f64;
        for j in 0..minor_segments {
            let w = 2.0 * PI * j as f64 / minor_segments as f64;
            let r = major + minor * w.cos();
            v.push(Point3::new(r * u.cos(), r * u.sin(), minor * w.sin()));
        }
    }
    let id = |i: usize, j: usize| (i % major_segments) * minor_segments + (j % minor_segments);
    let mut f = Vec::new();
    for i in 0..major_segments {
        for j in 0..minor_segments {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            f.push([a, b, c]);
            f.push([a, c, d]);
        }
    }
    build(v, f)
}
