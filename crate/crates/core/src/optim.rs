//! Dense BFGS with a strong-Wolfe line search (Nocedal & Wright, Alg. 3.5/3.6).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsConfig {
    pub max_iterations: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    MaxIterations,
    /// No step satisfying the Wolfe conditions was found.
    LineSearch,
    /// The objective or gradient became non-finite at an accepted point.
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective after each accepted iterate, starting with the initial value.
    pub history: Vec<f64>,
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Trial {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
    slope: f64,
}

/// Evaluates the objective along `x + alpha p`. Non-finite values count as
/// an Armijo failure so the search retreats into the feasible region.
fn probe<F>(obj: &mut F, x: &DVector<f64>, p: &DVector<f64>, alpha: f64) -> Trial
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let xt = x + p * alpha;
    let (f, g) = obj(xt.as_slice());
    let g = DVector::from_vec(g);
    let slope = g.dot(p);
    Trial {
        alpha,
        f: if f.is_finite() && slope.is_finite() { f } else { f64::INFINITY },
        g,
        slope,
    }
}

fn cubic_min(a: &Trial, b: &Trial) -> Option<f64> {
    if !a.f.is_finite() || !b.f.is_finite() {
        return None;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    t.is_finite().then_some(t)
}

fn line_search<F>(obj: &mut F, x: &DVector<f64>, f0: f64, slope0: f64, p: &DVector<f64>, alpha1: f64, cfg: &BfgsConfig) -> Option<Trial>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let zero = Trial {
        alpha: 0.0,
        f: f0,
        g: DVector::zeros(0),
        slope: slope0,
    };
    let mut prev = zero;
    let mut alpha = alpha1;
    for i in 0..30 {
        let t = probe(obj, x, p, alpha);
        if t.f > f0 + cfg.c1 * alpha * slope0 || (i > 0 && t.f >= prev.f) {
            return zoom(obj, x, f0, slope0, p, prev, t, cfg);
        }
        if t.slope.abs() <= -cfg.c2 * slope0 {
            return Some(t);
        }
        if t.slope >= 0.0 {
            return zoom(obj, x, f0, slope0, p, t, prev, cfg);
        }
        alpha *= 2.0;
        prev = t;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(obj: &mut F, x: &DVector<f64>, f0: f64, slope0: f64, p: &DVector<f64>, mut lo: Trial, mut hi: Trial, cfg: &BfgsConfig) -> Option<Trial>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    for _ in 0..40 {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        let mut alpha = cubic_min(&lo, &hi).unwrap_or(0.5 * (a + b));
        // Keep the trial well inside the bracket.
        if !(alpha > a + 0.1 * width && alpha < b - 0.1 * width) {
            alpha = 0.5 * (a + b);
        }
        if width <= f64::EPSILON * b.max(1.0) {
            break;
        }
        let t = probe(obj, x, p, alpha);
        if t.f > f0 + cfg.c1 * alpha * slope0 || t.f >= lo.f {
            hi = t;
        } else {
            if t.slope.abs() <= -cfg.c2 * slope0 {
                return Some(t);
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    // Fall back to the best sufficient-decrease point found, if any.
    (lo.alpha > 0.0 && lo.f < f0).then_some(lo)
}

/// Minimizes `obj`, which returns the value and gradient at a point. The
/// objective value never increases between accepted iterates.
pub fn minimize<F>(mut obj: F, x0: &[f64], cfg: &BfgsConfig) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (f, g) = obj(x.as_slice());
    let mut f = f;
    let mut g = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut history = vec![f];
    let mut first = true;
    let done = |termination, x: DVector<f64>, f, g: DVector<f64>, iterations, history| BfgsResult {
        x: x.as_slice().to_vec(),
        f,
        gradient: g.as_slice().to_vec(),
        iterations,
        termination,
        history,
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return done(Termination::NonFinite, x, f, g, 0, history);
    }
    for it in 0..cfg.max_iterations {
        if max_abs(&g) < cfg.gradient_tolerance {
            return done(Termination::Gradient, x, f, g, it, history);
        }
        let mut p = -(&h * &g);
        let mut slope = p.dot(&g);
        if slope >= 0.0 {
            // Lost positive definiteness; restart from steepest descent.
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = p.dot(&g);
            first = true;
        }
        let alpha1 = if first { (1.0 / max_abs(&g).max(1e-300)).min(1.0) } else { 1.0 };
        let Some(t) = line_search(&mut obj, &x, f, slope, &p, alpha1, cfg) else {
            return done(Termination::LineSearch, x, f, g, it, history);
        };
        let s = &p * t.alpha;
        let y = &t.g - &g;
        x += &s;
        f = t.f;
        g = t.g;
        history.push(f);
        if g.iter().any(|v| !v.is_finite()) {
            return done(Termination::NonFinite, x, f, g, it + 1, history);
        }
        let sy = s.dot(&y);
        if sy > 1e-300 {
            if first {
                h *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded.
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
    }
    let it = cfg.max_iterations;
    if max_abs(&g) < cfg.gradient_tolerance {
        return done(Termination::Gradient, x, f, g, it, history);
    }
    done(Termination::MaxIterations, x, f, g, it, history)
}
