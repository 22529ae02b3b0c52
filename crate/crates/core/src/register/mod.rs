//! Guided parametric ICP: fit body parameters to a scan with matches that
//! blend spatial and embedding-space proximity, annealed to pure spatial
//! matching.

mod io;
mod transfer;

pub use io::{read_points_csv, write_log_csv, write_matches_csv, write_points_csv};
pub use transfer::{raw_template_points, transfer_correspondence, transfer_error, transfer_errors};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::body::{
    forward, pose_offset, prior_losses, scale_offset, skin_vjp, translation_offset, BodyError, BodyModel, BodyParams,
    PriorConfig,
};
use crate::embedding::{CorrespondenceField, Sampling, TemplateEmbedding, TemplatePoint};
use crate::mesh::{Mesh, TriangleBvh};
use crate::optim::{minimize, BfgsConfig, Termination};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegisterError {
    #[error("model has no vertices")]
    EmptyModel,
    #[error("field has {rows} rows of dim {dim}; expected {expected} rows of dim {emb_dim}")]
    FieldShape {
        rows: usize,
        dim: usize,
        expected: usize,
        emb_dim: usize,
    },
    #[error("non-finite gradient at outer iteration {0}")]
    NonFinite(usize),
    #[error("loss increased over 3 consecutive outer iterations (last {0})")]
    Diverged(usize),
    #[error("inner minimization increased the loss at outer iteration {0}")]
    NonMonotone(usize),
    #[error(transparent)]
    Body(#[from] BodyError),
}

/// Matching weights and the outer-loop schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub lambda_omega: f64,
    pub decay: f64,
    pub outer_iterations: usize,
    /// Trailing outer iterations run with purely spatial matching.
    pub spatial_tail: usize,
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    /// Stop once a spatial-only outer iteration decreases the loss by less.
    pub tolerance: f64,
    pub inner: BfgsConfig,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            lambda_omega: 20.0,
            decay: 0.6,
            outer_iterations: 12,
            spatial_tail: 2,
            lambda_beta: crate::body::LAMBDA_BETA,
            lambda_theta: crate::body::LAMBDA_THETA,
            tolerance: 1e-14,
            inner: BfgsConfig::default(),
        }
    }
}

impl MatchWeights {
    /// `lambda_omega` per outer iteration.
    pub fn schedule(&self) -> Vec<f64> {
        let n = self.outer_iterations;
        (0..n)
            .map(|i| {
                if i + self.spatial_tail >= n {
                    0.0
                } else {
                    self.lambda_omega * self.decay.powi(i as i32)
                }
            })
            .collect()
    }
}

/// Per scan point, the model vertex minimizing
/// `|xi_x - xi_t|^2 + lambda |omega_x - omega_t|^2`, lowest index on ties.
pub fn match_points(
    scan_xi: &[Point3<f64>],
    scan_omega: &[f64],
    model_xi: &[Point3<f64>],
    model_omega: &[f64],
    dim: usize,
    lambda: f64,
) -> Result<Vec<usize>, RegisterError> {
    if model_xi.is_empty() {
        return Err(RegisterError::EmptyModel);
    }
    Ok(scan_xi
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let wx = &scan_omega[i * dim..(i + 1) * dim];
            let mut best = (f64::INFINITY, 0);
            for (t, y) in model_xi.iter().enumerate() {
                let mut d = (x - y).norm_squared();
                if lambda > 0.0 {
                    let wt = &model_omega[t * dim..(t + 1) * dim];
                    d += lambda * wx.iter().zip(wt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                }
                if d < best.0 {
                    best = (d, t);
                }
            }
            best.1
        })
        .collect())
}

/// Normalized per-vertex area weights of the scan (they sum to 1).
pub fn area_weights(scan: &Mesh) -> Vec<f64> {
    let areas = scan.vertex_areas();
    let total: f64 = areas.iter().sum();
    areas.iter().map(|a| a / total).collect()
}

/// Area-weighted mean squared distance from each scan vertex to its matched
/// model vertex, with the gradient with respect to model positions.
pub fn data_loss(
    scan_xi: &[Point3<f64>],
    weights: &[f64],
    matches: &[usize],
    model_xi: &[Point3<f64>],
) -> (f64, Vec<Vector3<f64>>) {
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); model_xi.len()];
    for ((x, &w), &t) in scan_xi.iter().zip(weights).zip(matches) {
        let r = model_xi[t] - x;
        loss += w * r.norm_squared();
        grad[t] += r * (2.0 * w);
    }
    (loss, grad)
}

/// Value and gradient of the ICP objective at fixed matches.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpLoss {
    pub total: f64,
    pub data: f64,
    pub beta: f64,
    pub theta: f64,
    pub gradient: Vec<f64>,
}

/// `data + lambda_beta * l_beta + lambda_theta * l_theta` and its gradient
/// over the flat parameter vector.
#[allow(clippy::too_many_arguments)]
pub fn icp_objective(
    model: &BodyModel,
    prior: &PriorConfig,
    lambda_beta: f64,
    lambda_theta: f64,
    scan_xi: &[Point3<f64>],
    weights: &[f64],
    matches: &[usize],
    params: &BodyParams,
) -> IcpLoss {
    let posed = forward(model, params);
    let (data, grad_y) = data_loss(scan_xi, weights, matches, &posed.vertices);
    let mut gradient = skin_vjp(model, params, &posed, &grad_y);
    let p = prior_losses(params, prior);
    for (i, g) in gradient.iter_mut().enumerate() {
        *g += lambda_beta * p.grad_beta[i] + lambda_theta * p.grad_theta[i];
    }
    IcpLoss {
        total: data + lambda_beta * p.beta + lambda_theta * p.theta,
        data,
        beta: p.beta,
        theta: p.theta,
        gradient,
    }
}

/// Which entries of the flat parameter vector are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeParams {
    All,
    PoseAndTranslation,
    Shape,
}

impl FreeParams {
    fn indices(self, joints: usize) -> Vec<usize> {
        let pose = (0..joints).flat_map(|k| (0..3).map(move |a| pose_offset(k) + a));
        let trans = (0..3).map(|a| translation_offset(joints) + a);
        let shape = (0..joints).flat_map(|k| (0..3).map(move |a| scale_offset(joints, k) + a));
        match self {
            FreeParams::All => pose.chain(trans).chain(shape).collect(),
            FreeParams::PoseAndTranslation => pose.chain(trans).collect(),
            FreeParams::Shape => shape.collect(),
        }
    }
}

/// One inner minimization at fixed matches. Returns the new parameters,
/// the final objective and the inner iteration count.
fn fit_fixed_matches(
    model: &BodyModel,
    prior: &PriorConfig,
    weights: &MatchWeights,
    scans: &[(&[Point3<f64>], &[f64], &[usize])],
    params: &mut [BodyParams],
    free: FreeParams,
    outer: usize,
) -> Result<(f64, usize), RegisterError> {
    let nj = model.tree.joint_count();
    let idx = free.indices(nj);
    // Shape is shared when several scans are optimized together.
    let base: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    let x0: Vec<f64> = idx.iter().map(|&i| base[0][i]).collect();
    let objective = |x: &[f64]| {
        let mut total = 0.0;
        let mut grad = vec![0.0; idx.len()];
        for (s, &(xi, w, m)) in scans.iter().enumerate() {
            let mut full = base[s].clone();
            for (k, &i) in idx.iter().enumerate() {
                full[i] = x[k];
            }
            let p = BodyParams::from_slice(nj, &full).expect("layout");
            if p.validate().is_err() {
                return (f64::INFINITY, vec![0.0; idx.len()]);
            }
            let l = icp_objective(model, prior, weights.lambda_beta, weights.lambda_theta, xi, w, m, &p);
            total += l.total;
            for (k, &i) in idx.iter().enumerate() {
                grad[k] += l.gradient[i];
            }
        }
        (total, grad)
    };
    let r = minimize(objective, &x0, &weights.inner);
    if r.termination == Termination::NonFinite {
        return Err(RegisterError::NonFinite(outer));
    }
    if r.history.windows(2).any(|w| w[1] > w[0]) {
        return Err(RegisterError::NonMonotone(outer));
    }
    for (s, p) in params.iter_mut().enumerate() {
        let mut full = base[s].clone();
        for (k, &i) in idx.iter().enumerate() {
            full[i] = r.x[k];
        }
        *p = BodyParams::from_slice(nj, &full)?;
    }
    Ok((r.f, r.iterations))
}

/// One row of the convergence log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterLog {
    pub iteration: usize,
    pub lambda_omega: f64,
    pub loss: f64,
    pub data: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub params: BodyParams,
    pub fitted: Mesh,
    /// Matched model vertex per scan vertex (final, spatial matching).
    pub matches: Vec<usize>,
    /// Closest point on the fitted surface per scan vertex, expressed on the
    /// template.
    pub template_points: Vec<TemplatePoint>,
    /// Final data term (m^2).
    pub data_error: f64,
    /// Mean scan-to-model and model-to-scan surface distances (m).
    pub scan_to_model: f64,
    pub model_to_scan: f64,
    pub log: Vec<OuterLog>,
}

/// Scan positions with per-vertex predicted coordinates.
#[derive(Debug, Clone)]
pub struct ScanInput {
    pub mesh: Mesh,
    pub field: CorrespondenceField,
}

fn vertex_field(scan: &ScanInput, emb: &TemplateEmbedding) -> Result<Vec<f64>, RegisterError> {
    let field = match scan.field.sampling {
        Sampling::Edge if scan.field.rows() == scan.mesh.edge_count() => scan.field.edge_to_vertex(&scan.mesh),
        _ => scan.field.clone(),
    };
    if field.dim != emb.dim || field.rows() != scan.mesh.vertex_count() || field.sampling != Sampling::Vertex {
        return Err(RegisterError::FieldShape {
            rows: scan.field.rows(),
            dim: scan.field.dim,
            expected: scan.mesh.vertex_count(),
            emb_dim: emb.dim,
        });
    }
    Ok(field.values)
}

/// Initial parameters: priors, with the root translation aligning centroids.
pub fn initial_params(model: &BodyModel, prior: &PriorConfig, scan: &Mesh) -> BodyParams {
    let mut p = prior.mean_params();
    let posed = model.template.with_positions(forward(model, &p).vertices);
    p.translation = scan.area_weighted_centroid() - posed.area_weighted_centroid();
    p
}

fn mean_surface_distance(from: &Mesh, to: &Mesh) -> f64 {
    let bvh = TriangleBvh::new(to);
    let used = from.referenced_vertices();
    let (sum, n) = from
        .vertices()
        .iter()
        .zip(&used)
        .filter(|(_, &u)| u)
        .map(|(p, _)| bvh.closest_point(p).map_or(0.0, |h| h.distance_squared.sqrt()))
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    sum / n.max(1) as f64
}

fn finish(
    model: &BodyModel,
    scan: &Mesh,
    params: BodyParams,
    log: Vec<OuterLog>,
    fitted_positions: Option<Vec<Point3<f64>>>,
) -> Result<Registration, RegisterError> {
    let positions = fitted_positions.unwrap_or_else(|| forward(model, &params).vertices);
    let fitted = model.template.with_positions(positions);
    let empty = vec![0.0; scan.vertex_count()];
    let matches = match_points(scan.vertices(), &empty, fitted.vertices(), &[], 0, 0.0)?;
    let w = area_weights(scan);
    let (data_error, _) = data_loss(scan.vertices(), &w, &matches, fitted.vertices());
    let bvh = TriangleBvh::new(&fitted);
    let template_points = scan
        .vertices()
        .iter()
        .map(|p| {
            let h = bvh.closest_point(p).expect("fitted mesh has faces");
            TemplatePoint {
                face: h.face,
                bary: h.bary,
            }
        })
        .collect();
    Ok(Registration {
        scan_to_model: mean_surface_distance(scan, &fitted),
        model_to_scan: mean_surface_distance(&fitted, scan),
        params,
        fitted,
        matches,
        template_points,
        data_error,
        log,
    })
}

/// Guided ICP from `init`.
pub fn guided_icp(
    scan: &ScanInput,
    model: &BodyModel,
    prior: &PriorConfig,
    emb: &TemplateEmbedding,
    weights: &MatchWeights,
    init: &BodyParams,
) -> Result<Registration, RegisterError> {
    init.validate()?;
    let omega = vertex_field(scan, emb)?;
    let xi = scan.mesh.vertices();
    let w = area_weights(&scan.mesh);
    let mut params = vec![init.clone()];
    let mut log: Vec<OuterLog> = Vec::new();
    let mut increases = 0;
    let schedule = weights.schedule();
    for (i, &lambda) in schedule.iter().enumerate() {
        let posed = forward(model, &params[0]).vertices;
        let matches = match_points(xi, &omega, &posed, &emb.coords, emb.dim, lambda)?;
        let (loss, inner) = fit_fixed_matches(model, prior, weights, &[(xi, &w, &matches)], &mut params, FreeParams::All, i)?;
        let data = icp_objective(model, prior, 0.0, 0.0, xi, &w, &matches, &params[0]).data;
        if let Some(prev) = log.last() {
            increases = if loss > prev.loss { increases + 1 } else { 0 };
            if increases >= 3 {
                return Err(RegisterError::Diverged(i));
            }
        }
        let converged = log.last().is_some_and(|prev| {
            lambda == 0.0 && prev.lambda_omega == 0.0 && prev.loss - loss < weights.tolerance
        });
        log.push(OuterLog {
            iteration: i,
            lambda_omega: lambda,
            loss,
            data,
            inner_iterations: inner,
        });
        if converged {
            break;
        }
    }
    finish(model, &scan.mesh, params.pop().unwrap(), log, None)
}

/// Rounds of alternating pose and shared-shape updates in [`coregister`].
pub const COREGISTER_ROUNDS: usize = 5;

/// Registers several scans of one subject. With `shared_shape`, each scan is
/// first registered independently, then pose (per scan, shape frozen) and a
/// joint shape update (summed objective) alternate.
pub fn coregister(
    scans: &[ScanInput],
    shared_shape: bool,
    model: &BodyModel,
    prior: &PriorConfig,
    emb: &TemplateEmbedding,
    weights: &MatchWeights,
) -> Result<Vec<Registration>, RegisterError> {
    let regs: Vec<Registration> = scans
        .par_iter()
        .map(|s| guided_icp(s, model, prior, emb, weights, &initial_params(model, prior, &s.mesh)))
        .collect::<Result<_, _>>()?;
    if !shared_shape || scans.len() < 2 {
        return Ok(regs);
    }
    let nj = model.tree.joint_count();
    let mut shape = vec![Vector3::zeros(); nj];
    for r in &regs {
        for (s, rs) in shape.iter_mut().zip(&r.params.scale) {
            *s += rs / regs.len() as f64;
        }
    }
    let mut params: Vec<BodyParams> = regs
        .iter()
        .map(|r| BodyParams {
            scale: shape.clone(),
            ..r.params.clone()
        })
        .collect();
    let mut logs: Vec<Vec<OuterLog>> = regs.into_iter().map(|r| r.log).collect();
    let weights_area: Vec<Vec<f64>> = scans.iter().map(|s| area_weights(&s.mesh)).collect();
    for round in 0..COREGISTER_ROUNDS {
        let outer = weights.outer_iterations + round;
        let matches: Vec<Vec<usize>> = scans
            .iter()
            .zip(&params)
            .map(|(s, p)| {
                let posed = forward(model, p).vertices;
                match_points(s.mesh.vertices(), &[], &posed, &[], 0, 0.0)
            })
            .collect::<Result<_, _>>()?;
        let pose_results: Vec<(BodyParams, f64, usize)> = (0..scans.len())
            .into_par_iter()
            .map(|s| {
                let mut p = vec![params[s].clone()];
                let xi = scans[s].mesh.vertices();
                let (loss, it) = fit_fixed_matches(
                    model,
                    prior,
                    weights,
                    &[(xi, &weights_area[s], &matches[s])],
                    &mut p,
                    FreeParams::PoseAndTranslation,
                    outer,
                )?;
                Ok((p.pop().unwrap(), loss, it))
            })
            .collect::<Result<_, RegisterError>>()?;
        for (s, (p, _, _)) in pose_results.iter().enumerate() {
            params[s] = p.clone();
        }
        let joint: Vec<(&[Point3<f64>], &[f64], &[usize])> = (0..scans.len())
            .map(|s| (scans[s].mesh.vertices(), weights_area[s].as_slice(), matches[s].as_slice()))
            .collect();
        fit_fixed_matches(model, prior, weights, &joint, &mut params, FreeParams::Shape, outer)?;
        for (s, (_, _, it)) in pose_results.iter().enumerate() {
            let l = icp_objective(
                model,
                prior,
                weights.lambda_beta,
                weights.lambda_theta,
                scans[s].mesh.vertices(),
                &weights_area[s],
                &matches[s],
                &params[s],
            );
            logs[s].push(OuterLog {
                iteration: outer,
                lambda_omega: 0.0,
                loss: l.total,
                data: l.data,
                inner_iterations: *it,
            });
        }
    }
    params
        .into_iter()
        .zip(logs)
        .zip(scans)
        .map(|((p, log), s)| finish(model, &s.mesh, p, log, None))
        .collect()
}

/// Laplacian-regularized per-vertex offsets applied on top of a fit:
/// minimizes `data + mu |L d|^2` by backtracking gradient descent, with the
/// final spatial matches held fixed.
pub fn nonrigid_refine(
    registration: &Registration,
    scan: &Mesh,
    model: &BodyModel,
    mu: f64,
    steps: usize,
) -> Result<Registration, RegisterError> {
    let base = forward(model, &registration.params).vertices;
    let neighbors = registration.fitted.vertex_neighbors();
    let w = area_weights(scan);
    let matches = &registration.matches;
    let laplacian = |d: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
        d.iter()
            .zip(&neighbors)
            .map(|(dv, nb)| {
                if nb.is_empty() {
                    return Vector3::zeros();
                }
                dv - nb.iter().fold(Vector3::zeros(), |acc, &u| acc + d[u]) / nb.len() as f64
            })
            .collect()
    };
    let eval = |d: &[Vector3<f64>]| -> (f64, Vec<Vector3<f64>>) {
        let moved: Vec<Point3<f64>> = base.iter().zip(d).map(|(p, dv)| p + dv).collect();
        let (data, mut grad) = data_loss(scan.vertices(), &w, matches, &moved);
        let ld = laplacian(d);
        let reg: f64 = ld.iter().map(|v| v.norm_squared()).sum();
        // Gradient of |L d|^2 is 2 L^T L d.
        let mut lt = vec![Vector3::zeros(); d.len()];
        for (v, nb) in neighbors.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            lt[v] += ld[v];
            let share = ld[v] / nb.len() as f64;
            for &u in nb {
                lt[u] -= share;
            }
        }
        for (g, l) in grad.iter_mut().zip(&lt) {
            *g += l * (2.0 * mu);
        }
        (data + mu * reg, grad)
    };
    let mut d = vec![Vector3::zeros(); base.len()];
    let (mut f, mut g) = eval(&d);
    let mut step = 1.0;
    for _ in 0..steps {
        let gg: f64 = g.iter().map(|v| v.norm_squared()).sum();
        if gg == 0.0 {
            break;
        }
        loop {
            let trial: Vec<Vector3<f64>> = d.iter().zip(&g).map(|(x, gx)| x - gx * step).collect();
            let (ft, gt) = eval(&trial);
            if ft <= f - 1e-4 * step * gg {
                d = trial;
                f = ft;
                g = gt;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        if step < 1e-12 {
            break;
        }
    }
    let positions = base.iter().zip(&d).map(|(p, dv)| p + dv).collect();
    finish(model, scan, registration.params.clone(), registration.log.clone(), Some(positions))
}
