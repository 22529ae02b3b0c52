use nalgebra::Vector3;

use super::{pose_offset, scale_offset, BodyParams};

pub const LAMBDA_BETA: f64 = 1e-3;
pub const LAMBDA_THETA: f64 = 1e-4;

/// Shape and pose priors. `theta_star` defaults to the midpoint of each
/// joint's angle range.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub beta_star: Vec<Vector3<f64>>,
    pub theta_star: Vec<Vector3<f64>>,
    pub theta_min: Vec<Vector3<f64>>,
    pub theta_max: Vec<Vector3<f64>>,
    pub lambda_beta: f64,
    pub lambda_theta: f64,
}

impl PriorConfig {
    /// Unit-scale shape prior and midrange pose prior.
    pub fn from_ranges(theta_min: Vec<Vector3<f64>>, theta_max: Vec<Vector3<f64>>) -> Self {
        let theta_star = theta_min
            .iter()
            .zip(&theta_max)
            .map(|(a, b)| (a + b) * 0.5)
            .collect();
        PriorConfig {
            beta_star: vec![Vector3::repeat(1.0); theta_min.len()],
            theta_star,
            theta_min,
            theta_max,
            lambda_beta: LAMBDA_BETA,
            lambda_theta: LAMBDA_THETA,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.theta_star.iter().enumerate().all(|(k, t)| {
            (0..3).all(|a| self.theta_min[k][a] <= t[a] && t[a] <= self.theta_max[k][a])
        })
    }

    /// Parameters at the prior means with zero translation.
    pub fn mean_params(&self) -> BodyParams {
        BodyParams {
            pose: self.theta_star.clone(),
            translation: Vector3::zeros(),
            scale: self.beta_star.clone(),
        }
    }
}

/// Unweighted prior terms and their gradients in the flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorLosses {
    pub beta: f64,
    pub theta: f64,
    pub grad_beta: Vec<f64>,
    pub grad_theta: Vec<f64>,
}

pub fn prior_losses(params: &BodyParams, prior: &PriorConfig) -> PriorLosses {
    let nj = params.pose.len();
    let np = 6 * nj + 3;
    let mut out = PriorLosses {
        beta: 0.0,
        theta: 0.0,
        grad_beta: vec![0.0; np],
        grad_theta: vec![0.0; np],
    };
    for k in 0..nj {
        let db = params.scale[k] - prior.beta_star[k];
        let dt = params.pose[k] - prior.theta_star[k];
        out.beta += db.norm_squared();
        out.theta += dt.norm_squared();
        for a in 0..3 {
            out.grad_beta[scale_offset(nj, k) + a] = 2.0 * db[a];
            out.grad_theta[pose_offset(k) + a] = 2.0 * dt[a];
        }
    }
    out
}
