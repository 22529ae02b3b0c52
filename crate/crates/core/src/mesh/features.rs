use thiserror::Error;

use super::Mesh;

/// Dense row-major feature matrix with one row per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("edge {0}: endpoint normals cancel and no incident face has a normal")]
    UndefinedNormal(usize),
    #[error("expected {expected} rows, got {got}")]
    RowCount { expected: usize, got: usize },
}

impl EdgeFeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        EdgeFeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "feature buffer size");
        EdgeFeatureMatrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per edge: midpoint (3 channels) and the renormalized mean of the endpoint
/// normals (3 channels).
pub fn edge_features(mesh: &Mesh) -> Result<EdgeFeatureMatrix, FeatureError> {
    let mut out = EdgeFeatureMatrix::zeros(mesh.edge_count(), 6);
    let normals = mesh.normals();
    for (ei, e) in mesh.edges().iter().enumerate() {
        let [a, b] = e.vertices;
        let mid = mesh.edge_midpoint(ei);
        let sum = normals[a] + normals[b];
        let len = sum.norm();
        let n = if len > 1e-12 {
            sum / len
        } else {
            e.faces
                .iter()
                .find_map(|&f| mesh.face_normal(f))
                .ok_or(FeatureError::UndefinedNormal(ei))?
        };
        out.row_mut(ei)
            .copy_from_slice(&[mid.x, mid.y, mid.z, n.x, n.y, n.z]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;
    use nalgebra::{Point3, Vector3};

    #[test]
    fn unit_edge_row() {
        let m = Mesh::with_normals(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
            vec![Vector3::z(); 3],
        )
        .unwrap();
        let f = edge_features(&m).unwrap();
        let e = m.edge_index(0, 1).unwrap();
        assert_eq!(f.row(e), &[0.5, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn tetrahedron_normals_unit() {
        let f = edge_features(&primitives::tetrahedron()).unwrap();
        assert_eq!(f.rows, 6);
        for r in 0..6 {
            let n = Vector3::new(f.get(r, 3), f.get(r, 4), f.get(r, 5));
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cancelling_normals_fall_back_to_face() {
        let m = Mesh::with_normals(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
            vec![Vector3::x(), -Vector3::x(), Vector3::z()],
        )
        .unwrap();
        let f = edge_features(&m).unwrap();
        let e = m.edge_index(0, 1).unwrap();
        assert_eq!(&f.row(e)[3..], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn translation_shifts_coordinates_only() {
        let m = primitives::icosphere(1);
        let t = Vector3::new(0.3, -2.0, 1.5);
        let a = edge_features(&m).unwrap();
        let b = edge_features(&m.translated(&t)).unwrap();
        for r in 0..a.rows {
            for c in 0..3 {
                assert!((b.get(r, c) - a.get(r, c) - t[c]).abs() < 1e-12);
            }
            for c in 3..6 {
                assert_eq!(b.get(r, c), a.get(r, c));
            }
        }
    }
}
