//! Monotone line-search ascent shared by the regression fit and the E-step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A smooth objective to be maximized.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Returns the value and writes the gradient into `grad`.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Hessian at `x`. Only needed by [`AscentMethod::Newton`]; may be indefinite.
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

/// Search direction used by [`maximize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentMethod {
    /// Newton on `-H`; where `-H` is not positive definite, its eigenvalues are
    /// replaced by their magnitudes (floored) before solving.
    #[default]
    Newton,
    /// Steepest ascent, initial step doubled from the last accepted one.
    Gradient,
}

impl std::str::FromStr for AscentMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "newton" => Ok(Self::Newton),
            "gradient" => Ok(Self::Gradient),
            other => Err(format!("unknown ascent method `{other}` (newton|gradient)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub method: AscentMethod,
    /// Stop once the gradient infinity-norm drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Also stop once an accepted step gains less than `ftol * max(1, |f|)`.
    /// Zero disables the test.
    pub ftol: f64,
    /// Armijo sufficient-increase constant.
    pub armijo: f64,
    /// Step shrink factor per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl AscentOptions {
    pub fn new(method: AscentMethod, tol: f64, max_iters: usize) -> Self {
        Self {
            method,
            tol,
            max_iters,
            ftol: 0.0,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

/// The starting point has a non-finite objective or gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonFiniteStart;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton_direction<O: Objective>(obj: &O, x: &[f64], grad: &[f64]) -> Option<Vec<f64>> {
    let neg_h = -obj.hessian(x);
    let g = DVector::from_column_slice(grad);
    if let Some(chol) = neg_h.clone().cholesky() {
        let p = chol.solve(&g);
        if p.iter().all(|v| v.is_finite()) {
            return Some(p.as_slice().to_vec());
        }
    }
    // Not concave here: invert the curvature magnitudes, floored relative to the largest.
    let eig = neg_h.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(top > 0.0) || !top.is_finite() {
        return None;
    }
    let floor = 1e-10 * top;
    let coords = eig.eigenvectors.transpose() * &g;
    let scaled = DVector::from_iterator(
        coords.len(),
        coords.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| c / l.abs().max(floor)),
    );
    let p = &eig.eigenvectors * scaled;
    p.iter().all(|v| v.is_finite()).then(|| p.as_slice().to_vec())
}

/// Maximizes `obj` from `x0` with Armijo backtracking.
///
/// Every accepted step strictly increases the objective. When no step along
/// the search direction passes the Armijo test the current point is returned.
pub fn maximize<O: Objective>(
    obj: &O,
    x0: Vec<f64>,
    opts: &AscentOptions,
) -> Result<AscentOutcome, NonFiniteStart> {
    let n = obj.dim();
    debug_assert_eq!(x0.len(), n);
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = obj.value_grad(&x, &mut grad);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NonFiniteStart);
    }
    let mut history = vec![value];
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];

    while iterations < opts.max_iters {
        if inf_norm(&grad) < opts.tol {
            break;
        }
        let direction = match opts.method {
            AscentMethod::Newton => newton_direction(obj, &x, &grad).unwrap_or_else(|| grad.clone()),
            AscentMethod::Gradient => grad.clone(),
        };
        let slope: f64 = direction.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if !(slope > 0.0) {
            break;
        }
        let mut t = match opts.method {
            AscentMethod::Newton => 1.0,
            AscentMethod::Gradient => (step * 2.0).min(1e6),
        };
        let mut accepted = false;
        for _ in 0..opts.max_backtracks {
            for ((xt, xi), di) in trial.iter_mut().zip(&x).zip(&direction) {
                *xt = xi + t * di;
            }
            let v = obj.value(&trial);
            if v.is_finite() && v >= value + opts.armijo * t * slope && v > value {
                accepted = true;
                break;
            }
            t *= opts.shrink;
        }
        if !accepted {
            break;
        }
        if opts.method == AscentMethod::Newton && t == 1.0 {
            // Full step accepted: expand while the objective keeps improving.
            let mut best = obj.value(&trial);
            for _ in 0..opts.max_backtracks {
                let t2 = t * 2.0;
                let x2: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + t2 * di).collect();
                let v2 = obj.value(&x2);
                if !(v2.is_finite() && v2 > best && v2 >= value + opts.armijo * t2 * slope) {
                    break;
                }
                best = v2;
                t = t2;
                trial = x2;
            }
        }
        let v = obj.value_grad(&trial, &mut trial_grad);
        if !v.is_finite() || trial_grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        debug_assert!(v >= value);
        let stalled = v - value <= opts.ftol * value.abs().max(1.0);
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        value = v;
        step = t;
        history.push(value);
        iterations += 1;
        if stalled {
            break;
        }
    }
    let grad_inf = inf_norm(&grad);
    Ok(AscentOutcome {
        x,
        value,
        grad_inf,
        iterations,
        converged: grad_inf < opts.tol,
        history,
    })
}
