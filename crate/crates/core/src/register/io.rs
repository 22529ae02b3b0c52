use std::io::Write;

use std::io::Read;

use super::{OuterLog, Registration};
use crate::embedding::TemplatePoint;
use crate::mesh::Mesh;

/// `scan_vertex,model_vertex,distance_m` per scan vertex.
pub fn write_matches_csv(w: impl Write, reg: &Registration, scan: &Mesh) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scan_vertex", "model_vertex", "distance_m"])?;
    for (i, &t) in reg.matches.iter().enumerate() {
        let d = (scan.vertices()[i] - reg.fitted.vertices()[t]).norm();
        out.write_record([i.to_string(), t.to_string(), format!("{d:.9e}")])?;
    }
    out.flush()?;
    Ok(())
}

/// Convergence log, one row per outer iteration.
pub fn write_log_csv(w: impl Write, log: &[OuterLog]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "lambda_omega", "loss", "data", "inner_iterations"])?;
    for r in log {
        out.write_record([
            r.iteration.to_string(),
            format!("{:.9e}", r.lambda_omega),
            format!("{:.9e}", r.loss),
            format!("{:.9e}", r.data),
            r.inner_iterations.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `face,b0,b1,b2` per point; floats round-trip exactly.
pub fn write_points_csv(w: impl Write, points: &[TemplatePoint]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["face", "b0", "b1", "b2"])?;
    for p in points {
        out.serialize((p.face, p.bary[0], p.bary[1], p.bary[2]))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_points_csv(r: impl Read) -> csv::Result<Vec<TemplatePoint>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize()
        .map(|row| {
            let (face, a, b, c): (usize, f64, f64, f64) = row?;
            Ok(TemplatePoint { face, bary: [a, b, c] })
        })
        .collect()
}
