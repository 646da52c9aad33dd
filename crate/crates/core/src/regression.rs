//! Logistic regression with a Gaussian prior, fit by MAP.
//!
//! Labels are `-1` / `+1`, and the per-example likelihood is `sigmoid(y * beta'x)`.
//! All sums over examples are accumulated in fixed-size chunks whose partial
//! results are combined in chunk order, so the fit is bit-identical for any
//! number of threads.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{maximize, AscentMethod, AscentOptions, Objective};

/// Rows per reduction chunk. Independent of the thread count.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta: Vec<f64>,
}

impl Coefficients {
    pub fn new(beta: Vec<f64>) -> Self {
        Self { beta }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { beta: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn max_abs_diff(&self, other: &Coefficients) -> f64 {
        self.beta
            .iter()
            .zip(&other.beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Isotropic Gaussian prior `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Config(format!("prior variance must be positive, got {variance}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("prior mean".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn zero_mean(dim: usize, variance: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], variance)
    }

    /// `-|beta - mean|^2 / (2 variance)`.
    pub fn log_density(&self, beta: &[f64]) -> f64 {
        -beta
            .iter()
            .zip(&self.mean)
            .map(|(b, m)| (b - m) * (b - m))
            .sum::<f64>()
            / (2.0 * self.variance)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(z)` without overflow or cancellation.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Labeled examples stored row-major.
#[derive(Debug, Clone, Default)]
pub struct Design {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<f64>,
}

impl Design {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_examples<'a>(dim: usize, examples: impl IntoIterator<Item = (&'a [f64], i8)>) -> Result<Self> {
        let mut d = Self::new(dim);
        for (x, y) in examples {
            d.push(x, y)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, x: &[f64], y: i8) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        if y != 1 && y != -1 {
            return Err(Error::Validation(format!("label must be -1 or +1, got {y}")));
        }
        self.rows.extend_from_slice(x);
        self.labels.push(y as f64);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    /// Ordered chunk partials, reduced sequentially.
    fn reduce<T: Send, F, G>(&self, map: F, mut fold: G, init: T) -> T
    where
        F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
        G: FnMut(T, T) -> T,
    {
        let n = self.len();
        let chunks: Vec<_> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| map(c * CHUNK..((c + 1) * CHUNK).min(n)))
            .collect();
        let mut acc = init;
        for part in chunks {
            acc = fold(acc, part);
        }
        acc
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct MapObjective<'a> {
    data: &'a Design,
    prior: &'a GaussianPrior,
}

impl MapObjective<'_> {
    fn likelihood(&self, beta: &[f64]) -> f64 {
        self.data.reduce(
            |r| {
                r.map(|i| log_sigmoid(self.data.label(i) * dot(self.data.row(i), beta)))
                    .sum::<f64>()
            },
            |a, b| a + b,
            0.0,
        )
    }
}

impl Objective for MapObjective<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn value(&self, beta: &[f64]) -> f64 {
        self.likelihood(beta) + self.prior.log_density(beta)
    }

    fn value_grad(&self, beta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.data.dim();
        let (ll, g) = self.data.reduce(
            |r| {
                let mut g = vec![0.0; d];
                let mut ll = 0.0;
                for i in r {
                    let (x, y) = (self.data.row(i), self.data.label(i));
                    let m = y * dot(x, beta);
                    ll += log_sigmoid(m);
                    let w = y * sigmoid(-m);
                    for (gk, xk) in g.iter_mut().zip(x) {
                        *gk += w * xk;
                    }
                }
                (ll, g)
            },
            |(la, mut ga), (lb, gb)| {
                ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                (la + lb, ga)
            },
            (0.0, vec![0.0; d]),
        );
        for (k, out) in grad.iter_mut().enumerate() {
            *out = g[k] - (beta[k] - self.prior.mean[k]) / self.prior.variance;
        }
        ll + self.prior.log_density(beta)
    }

    fn hessian(&self, beta: &[f64]) -> DMatrix<f64> {
        let d = self.data.dim();
        let mut h = self.data.reduce(
            |r| {
                let mut h = DMatrix::zeros(d, d);
                for i in r {
                    let x = self.data.row(i);
                    let p = sigmoid(dot(x, beta));
                    let w = p * (1.0 - p);
                    for a in 0..d {
                        for b in 0..d {
                            h[(a, b)] -= w * x[a] * x[b];
                        }
                    }
                }
                h
            },
            |a, b| a + b,
            DMatrix::zeros(d, d),
        );
        for k in 0..d {
            h[(k, k)] -= 1.0 / self.prior.variance;
        }
        h
    }
}

fn check_dims(data: &Design, beta: &[f64], prior: &GaussianPrior) -> Result<()> {
    for found in [beta.len(), prior.mean.len()] {
        if found != data.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found,
            });
        }
    }
    Ok(())
}

/// `sum ln sigmoid(y beta'x) - |beta - mean|^2 / (2 variance)`.
pub fn log_posterior(data: &Design, beta: &Coefficients, prior: &GaussianPrior) -> Result<f64> {
    check_dims(data, &beta.beta, prior)?;
    Ok(MapObjective { data, prior }.value(&beta.beta))
}

/// Gradient of [`log_posterior`] with respect to `beta`.
pub fn log_posterior_gradient(data: &Design, beta: &Coefficients, prior: &GaussianPrior) -> Result<Vec<f64>> {
    check_dims(data, &beta.beta, prior)?;
    let mut g = vec![0.0; data.dim()];
    MapObjective { data, prior }.value_grad(&beta.beta, &mut g);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub method: AscentMethod,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 500,
            method: AscentMethod::Newton,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub coefficients: Coefficients,
    pub log_posterior: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log posterior after each accepted line-search step.
    pub history: Vec<f64>,
}

/// MAP fit started at the prior mean.
pub fn fit_map(data: &Design, prior: &GaussianPrior, opts: &FitOptions) -> Result<Coefficients> {
    Ok(fit_map_from(data, prior, &Coefficients::new(prior.mean.clone()), opts)?.coefficients)
}

/// MAP fit from an explicit starting point.
pub fn fit_map_from(
    data: &Design,
    prior: &GaussianPrior,
    init: &Coefficients,
    opts: &FitOptions,
) -> Result<FitReport> {
    check_dims(data, &init.beta, prior)?;
    let objective = MapObjective { data, prior };
    let out = maximize(
        &objective,
        init.beta.clone(),
        &AscentOptions::new(opts.method, opts.tol, opts.max_iters),
    )
    .map_err(|_| Error::NonFinite("regression log posterior".into()))?;
    if !out.converged {
        log::debug!(
            "fit_map stopped after {} iterations with |grad|_inf = {:.3e}",
            out.iterations,
            out.grad_inf
        );
    }
    Ok(FitReport {
        coefficients: Coefficients::new(out.x),
        log_posterior: out.value,
        iterations: out.iterations,
        converged: out.converged,
        history: out.history,
    })
}

/// `sigmoid(beta'x)`.
pub fn predict(x: &[f64], beta: &Coefficients) -> Result<f64> {
    if x.len() != beta.dim() {
        return Err(Error::DimensionMismatch {
            expected: beta.dim(),
            found: x.len(),
        });
    }
    Ok(sigmoid(dot(x, &beta.beta)))
}

pub fn logit(x: &[f64], beta: &Coefficients) -> f64 {
    dot(x, &beta.beta)
}

/// Serialized scoring model: coefficients tied to a feature configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub beta: Vec<f64>,
    pub feature_config_hash: String,
}
