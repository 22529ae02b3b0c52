//! Scan-to-scan correspondence through template locations.

use nalgebra::Point3;
use rayon::prelude::*;

use crate::embedding::{CorrespondenceField, Sampling, TemplateEmbedding, TemplatePoint};
use crate::mesh::Mesh;

/// Maps each point of scan A to the scan B vertex whose template location
/// (in rest-pose template coordinates) is nearest; lowest index on ties.
pub fn transfer_correspondence(a: &[TemplatePoint], b: &[TemplatePoint], template: &Mesh) -> Vec<usize> {
    let pb: Vec<Point3<f64>> = b.iter().map(|t| t.position(template)).collect();
    a.par_iter()
        .map(|t| {
            let p = t.position(template);
            let mut best = (f64::INFINITY, 0);
            for (j, q) in pb.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Distance (cm) between each transferred point and its ground truth.
pub fn transfer_errors(map: &[usize], scan_b: &[Point3<f64>], truth: &[Point3<f64>]) -> Vec<f64> {
    map.iter()
        .zip(truth)
        .map(|(&j, t)| 100.0 * (scan_b[j] - t).norm())
        .collect()
}

/// Mean transfer error in centimeters.
pub fn transfer_error(map: &[usize], scan_b: &[Point3<f64>], truth: &[Point3<f64>]) -> f64 {
    let e = transfer_errors(map, scan_b, truth);
    e.iter().sum::<f64>() / e.len().max(1) as f64
}

/// Template locations from predicted coordinates alone: each scan vertex
/// goes to its nearest template vertex in the embedding.
pub fn raw_template_points(scan: &Mesh, field: &CorrespondenceField, emb: &TemplateEmbedding) -> Vec<TemplatePoint> {
    let field = match field.sampling {
        Sampling::Edge => field.edge_to_vertex(scan),
        Sampling::Vertex => field.clone(),
    };
    (0..field.rows())
        .into_par_iter()
        .map(|v| TemplatePoint::vertex(&emb.template, emb.nn_query(field.row(v))))
        .collect()
}
