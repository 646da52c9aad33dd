//! Hierarchical user-interaction model.
//!
//! Each user carries a chain of latent field vectors rooted at the profile
//! vector `u_p`. In the full model the chain is `u_p -> u_v -> u_a`:
//!
//! ```text
//! u_v ~ N(u_p, sigma_v I)      y_v ~ sigmoid(y_v * beta_v' f(j, u_v))
//! u_a ~ N(u_v, sigma_a I)      y_a ~ sigmoid(y_a * beta_a' f(j, u_a))
//! ```
//!
//! Training is hard EM: the E-step maximizes each user's posterior over the
//! chain with the coefficients fixed, the M-step refits the coefficients by
//! MAP with the latents fixed. Both steps only ever increase the joint log
//! posterior.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Action, Dataset, DayWindow};
use crate::error::{Error, Result};
use crate::features::{FeatureSpace, ScoreCurvature};
use crate::optim::{maximize, AscentMethod, AscentOptions, Objective};
use crate::regression::{fit_map_from, log_sigmoid, sigmoid, Coefficients, Design, FitOptions, GaussianPrior};
use crate::schema::{BlockSchema, FieldVector};

/// Floor for learned variances.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Interaction signal modelled by one layer of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    View,
    Apply,
}

/// Prior mean of a layer: the profile vector or the previous layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parent {
    Profile,
    Previous,
}

/// Which labeled interactions contribute a likelihood term to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Every impression.
    AllImpressions,
    /// Only impressions that were viewed (an apply is conditioned on a view).
    Viewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub signal: Signal,
    pub parent: Parent,
    pub domain: Domain,
}

/// The full profile -> view -> apply chain.
pub const VIEW_APPLY_CHAIN: [LayerSpec; 2] = [
    LayerSpec {
        signal: Signal::View,
        parent: Parent::Profile,
        domain: Domain::AllImpressions,
    },
    LayerSpec {
        signal: Signal::Apply,
        parent: Parent::Previous,
        domain: Domain::AllImpressions,
    },
];

/// Gaussian priors on the coefficients and Inverse-Gamma priors on the variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    pub mu_beta_v: Vec<f64>,
    pub sigma_beta_v: f64,
    pub mu_beta_a: Vec<f64>,
    pub sigma_beta_a: f64,
    pub alpha_sigma_v: f64,
    pub gamma_sigma_v: f64,
    pub alpha_sigma_a: f64,
    pub gamma_sigma_a: f64,
}

impl Hyperpriors {
    /// Zero-mean coefficient priors with the given variance, IG(1, 1) variance priors.
    pub fn standard(dim: usize, coef_variance: f64) -> Self {
        Self {
            mu_beta_v: vec![0.0; dim],
            sigma_beta_v: coef_variance,
            mu_beta_a: vec![0.0; dim],
            sigma_beta_a: coef_variance,
            alpha_sigma_v: 1.0,
            gamma_sigma_v: 1.0,
            alpha_sigma_a: 1.0,
            gamma_sigma_a: 1.0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, mu) in [("mu_beta_v", &self.mu_beta_v), ("mu_beta_a", &self.mu_beta_a)] {
            if mu.len() != dim {
                return Err(Error::Config(format!(
                    "{name} has {} entries, feature dimension is {dim}",
                    mu.len()
                )));
            }
        }
        for (name, v) in [
            ("sigma_beta_v", self.sigma_beta_v),
            ("sigma_beta_a", self.sigma_beta_a),
            ("alpha_sigma_v", self.alpha_sigma_v),
            ("gamma_sigma_v", self.gamma_sigma_v),
            ("alpha_sigma_a", self.alpha_sigma_a),
            ("gamma_sigma_a", self.gamma_sigma_a),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn prior(&self, signal: Signal) -> GaussianPrior {
        match signal {
            Signal::View => GaussianPrior {
                mean: self.mu_beta_v.clone(),
                variance: self.sigma_beta_v,
            },
            Signal::Apply => GaussianPrior {
                mean: self.mu_beta_a.clone(),
                variance: self.sigma_beta_a,
            },
        }
    }

    fn inverse_gamma(&self, signal: Signal) -> (f64, f64) {
        match signal {
            Signal::View => (self.alpha_sigma_v, self.gamma_sigma_v),
            Signal::Apply => (self.alpha_sigma_a, self.gamma_sigma_a),
        }
    }
}

/// Global parameters: view/apply coefficients and chain variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierParams {
    pub beta_v: Coefficients,
    pub beta_a: Coefficients,
    pub sigma_v: f64,
    pub sigma_a: f64,
}

impl HierParams {
    /// Coefficients at their prior means.
    pub fn at_prior(hyper: &Hyperpriors, sigma_v: f64, sigma_a: f64) -> Result<Self> {
        for (name, s) in [("sigma_v", sigma_v), ("sigma_a", sigma_a)] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {s}")));
            }
        }
        Ok(Self {
            beta_v: Coefficients::new(hyper.mu_beta_v.clone()),
            beta_a: Coefficients::new(hyper.mu_beta_a.clone()),
            sigma_v,
            sigma_a,
        })
    }

    pub fn beta(&self, signal: Signal) -> &Coefficients {
        match signal {
            Signal::View => &self.beta_v,
            Signal::Apply => &self.beta_a,
        }
    }

    fn beta_mut(&mut self, signal: Signal) -> &mut Coefficients {
        match signal {
            Signal::View => &mut self.beta_v,
            Signal::Apply => &mut self.beta_a,
        }
    }

    pub fn sigma(&self, signal: Signal) -> f64 {
        match signal {
            Signal::View => self.sigma_v,
            Signal::Apply => self.sigma_a,
        }
    }

    fn sigma_mut(&mut self, signal: Signal) -> &mut f64 {
        match signal {
            Signal::View => &mut self.sigma_v,
            Signal::Apply => &mut self.sigma_a,
        }
    }
}

/// Per-user learned field vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct UserLatents {
    pub user_id: String,
    pub u_v: FieldVector,
    pub u_a: FieldVector,
}

impl UserLatents {
    /// Both layers at the profile vector.
    pub fn at_profile(user_id: &str, profile: &FieldVector) -> Self {
        Self {
            user_id: user_id.to_string(),
            u_v: profile.clone(),
            u_a: profile.clone(),
        }
    }

    fn layer(&self, signal: Signal) -> &FieldVector {
        match signal {
            Signal::View => &self.u_v,
            Signal::Apply => &self.u_a,
        }
    }

    pub fn max_abs_diff(&self, other: &UserLatents) -> f64 {
        self.u_v.max_abs_diff(&other.u_v).max(self.u_a.max_abs_diff(&other.u_a))
    }
}

/// One impressed (or interacted) job with its view and apply labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledInteraction {
    pub job: usize,
    pub y_v: i8,
    pub y_a: i8,
}

impl LabeledInteraction {
    fn label(&self, signal: Signal) -> i8 {
        match signal {
            Signal::View => self.y_v,
            Signal::Apply => self.y_a,
        }
    }

    fn in_domain(&self, domain: Domain) -> bool {
        match domain {
            Domain::AllImpressions => true,
            Domain::Viewed => self.y_v > 0,
        }
    }
}

/// A user's labeled interactions inside one window.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user: usize,
    pub interactions: Vec<LabeledInteraction>,
}

/// Collapses a user's events into one labeled entry per (day, job).
///
/// Impression only: `(-1, -1)`. View: `(+1, -1)`. Apply: `(+1, +1)`, since an
/// apply implies a view.
pub fn label_interactions<'a>(
    dataset: &Dataset,
    events: impl IntoIterator<Item = &'a crate::data::InteractionEvent>,
) -> Vec<LabeledInteraction> {
    let mut by_key: BTreeMap<(i64, usize), (i8, i8)> = BTreeMap::new();
    for e in events {
        let job = dataset.job_offset(&e.job_id).expect("dataset validated job ids");
        let entry = by_key.entry((e.day, job)).or_insert((-1, -1));
        match e.action {
            Action::Impression => {}
            Action::View => entry.0 = 1,
            Action::Apply => *entry = (1, 1),
        }
    }
    by_key
        .into_iter()
        .map(|((_, job), (y_v, y_a))| LabeledInteraction { job, y_v, y_a })
        .collect()
}

/// Histories of every user with at least one event in `window`, in user order.
pub fn user_histories(dataset: &Dataset, window: DayWindow) -> Vec<UserHistory> {
    let mut per_user: BTreeMap<usize, Vec<&crate::data::InteractionEvent>> = BTreeMap::new();
    for e in dataset.events_in(window) {
        let u = dataset.user_offset(&e.user_id).expect("dataset validated user ids");
        per_user.entry(u).or_default().push(e);
    }
    per_user
        .into_iter()
        .map(|(user, events)| UserHistory {
            user,
            interactions: label_interactions(dataset, events),
        })
        .collect()
}

/// Feature space and job vectors shared by every per-user computation.
#[derive(Clone, Copy)]
pub struct ModelContext<'a> {
    pub features: &'a FeatureSpace,
    pub jobs: &'a [FieldVector],
}

impl<'a> ModelContext<'a> {
    pub fn new(features: &'a FeatureSpace, jobs: &'a [FieldVector]) -> Result<Self> {
        features.check_differentiable()?;
        Ok(Self { features, jobs })
    }
}

/// Log posterior of one user's chain as a function of the stacked layer vectors.
struct ChainObjective<'a> {
    ctx: ModelContext<'a>,
    layers: &'a [LayerSpec],
    profile: &'a [f64],
    interactions: &'a [LabeledInteraction],
    betas: Vec<&'a [f64]>,
    sigmas: Vec<f64>,
}

impl<'a> ChainObjective<'a> {
    fn new(
        ctx: ModelContext<'a>,
        layers: &'a [LayerSpec],
        profile: &'a [f64],
        interactions: &'a [LabeledInteraction],
        params: &'a HierParams,
    ) -> Self {
        Self {
            ctx,
            layers,
            profile,
            interactions,
            betas: layers.iter().map(|l| params.beta(l.signal).beta.as_slice()).collect(),
            sigmas: layers.iter().map(|l| params.sigma(l.signal)).collect(),
        }
    }

    fn d(&self) -> usize {
        self.profile.len()
    }

    fn layer<'x>(&self, x: &'x [f64], l: usize) -> &'x [f64] {
        let d = self.d();
        &x[l * d..(l + 1) * d]
    }

    fn parent<'x>(&'x self, x: &'x [f64], l: usize) -> Option<&'x [f64]> {
        match self.layers[l].parent {
            Parent::Profile => None,
            Parent::Previous => Some(self.layer(x, l - 1)),
        }
    }

    fn parent_values<'x>(&'x self, x: &'x [f64], l: usize) -> &'x [f64] {
        self.parent(x, l).unwrap_or(self.profile)
    }

    /// Calls `visit(layer, job, label, score)` for every likelihood term.
    fn for_each_term(&self, x: &[f64], mut visit: impl FnMut(usize, &[f64], f64, f64)) {
        let mut feats = vec![0.0; self.ctx.features.dim()];
        for (l, spec) in self.layers.iter().enumerate() {
            let u = self.layer(x, l);
            let beta = self.betas[l];
            for it in self.interactions.iter().filter(|it| it.in_domain(spec.domain)) {
                let j = self.ctx.jobs[it.job].as_slice();
                self.ctx.features.evaluate_into(u, j, &mut feats);
                let s: f64 = feats.iter().zip(beta).map(|(a, b)| a * b).sum();
                visit(l, j, it.label(spec.signal) as f64, s);
            }
        }
    }

    fn prior_value(&self, x: &[f64]) -> f64 {
        (0..self.layers.len())
            .map(|l| {
                let (u, p) = (self.layer(x, l), self.parent_values(x, l));
                -u.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * self.sigmas[l])
            })
            .sum()
    }
}

impl Objective for ChainObjective<'_> {
    fn dim(&self) -> usize {
        self.layers.len() * self.d()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut ll = 0.0;
        self.for_each_term(x, |_, _, y, s| ll += log_sigmoid(y * s));
        ll + self.prior_value(x)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.d();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0;
        {
            let grad_cell = std::cell::RefCell::new(&mut *grad);
            self.for_each_term(x, |l, j, y, s| {
                ll += log_sigmoid(y * s);
                let w = y * sigmoid(-y * s);
                let mut g = grad_cell.borrow_mut();
                self.ctx
                    .features
                    .add_score_gradient(self.layer(x, l), j, self.betas[l], w, &mut g[l * d..(l + 1) * d]);
            });
        }
        for l in 0..self.layers.len() {
            let inv = 1.0 / self.sigmas[l];
            for i in 0..d {
                let r = x[l * d + i] - self.parent_values(x, l)[i];
                grad[l * d + i] -= r * inv;
                if self.layers[l].parent == Parent::Previous {
                    grad[(l - 1) * d + i] += r * inv;
                }
            }
        }
        ll + self.prior_value(x)
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.d();
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        let mut acc: Vec<ScoreCurvature> = (0..self.layers.len())
            .map(|l| ScoreCurvature::new(self.ctx.features, self.layer(x, l), self.betas[l]))
            .collect();
        self.for_each_term(x, |l, j, y, s| {
            let p = sigmoid(y * s);
            acc[l].add(j, y * (1.0 - p), p * (1.0 - p));
        });
        for (l, a) in acc.into_iter().enumerate() {
            a.finish(&mut h, l * d);
        }
        for l in 0..self.layers.len() {
            let inv = 1.0 / self.sigmas[l];
            for i in 0..d {
                h[(l * d + i, l * d + i)] -= inv;
                if self.layers[l].parent == Parent::Previous {
                    let (a, b) = (l * d + i, (l - 1) * d + i);
                    h[(b, b)] -= inv;
                    h[(a, b)] += inv;
                    h[(b, a)] += inv;
                }
            }
        }
        h
    }
}

fn stack(layers: &[LayerSpec], latents: &UserLatents) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| latents.layer(l.signal).as_slice().iter().copied())
        .collect()
}

/// Expands chain outputs into `(u_v, u_a)`: a missing view layer means
/// `u_v = u_p`, a missing apply layer means `u_a = u_v`.
fn unstack(layers: &[LayerSpec], user_id: &str, profile: &FieldVector, x: &[f64]) -> UserLatents {
    let d = profile.len();
    let mut u_v = None;
    let mut u_a = None;
    for (l, spec) in layers.iter().enumerate() {
        let v = FieldVector::from_raw(x[l * d..(l + 1) * d].to_vec());
        match spec.signal {
            Signal::View => u_v = Some(v),
            Signal::Apply => u_a = Some(v),
        }
    }
    let u_v = u_v.unwrap_or_else(|| profile.clone());
    let u_a = u_a.unwrap_or_else(|| u_v.clone());
    UserLatents {
        user_id: user_id.to_string(),
        u_v,
        u_a,
    }
}

fn check_user_inputs(latents: Option<&UserLatents>, profile: &FieldVector, params: &HierParams, ctx: &ModelContext) -> Result<()> {
    let d = ctx.features.field_dim();
    let mut vectors = vec![profile];
    if let Some(l) = latents {
        vectors.push(&l.u_v);
        vectors.push(&l.u_a);
    }
    for v in vectors {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
        if v.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("user field vector".into()));
        }
    }
    for beta in [&params.beta_v, &params.beta_a] {
        if beta.dim() != ctx.features.dim() {
            return Err(Error::DimensionMismatch {
                expected: ctx.features.dim(),
                found: beta.dim(),
            });
        }
        if beta.beta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("coefficients".into()));
        }
    }
    Ok(())
}

/// Log posterior of one user's chain, additive constants dropped.
pub fn chain_log_posterior(
    layers: &[LayerSpec],
    latents: &UserLatents,
    profile: &FieldVector,
    interactions: &[LabeledInteraction],
    params: &HierParams,
    ctx: ModelContext,
) -> Result<f64> {
    check_user_inputs(Some(latents), profile, params, &ctx)?;
    let obj = ChainObjective::new(ctx, layers, profile.as_slice(), interactions, params);
    Ok(obj.value(&stack(layers, latents)))
}

/// Log posterior of the full view/apply chain for one user.
pub fn user_log_posterior(
    latents: &UserLatents,
    profile: &FieldVector,
    interactions: &[LabeledInteraction],
    params: &HierParams,
    ctx: ModelContext,
) -> Result<f64> {
    chain_log_posterior(&VIEW_APPLY_CHAIN, latents, profile, interactions, params, ctx)
}

/// Gradient of [`user_log_posterior`] as `(d/du_v, d/du_a)`.
pub fn user_log_posterior_gradient(
    latents: &UserLatents,
    profile: &FieldVector,
    interactions: &[LabeledInteraction],
    params: &HierParams,
    ctx: ModelContext,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_user_inputs(Some(latents), profile, params, &ctx)?;
    let obj = ChainObjective::new(ctx, &VIEW_APPLY_CHAIN, profile.as_slice(), interactions, params);
    let mut g = vec![0.0; obj.dim()];
    obj.value_grad(&stack(&VIEW_APPLY_CHAIN, latents), &mut g);
    let d = profile.len();
    let g_a = g.split_off(d);
    Ok((g, g_a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Relative objective gain below which the search stops. Cosine features
    /// are scale free, so a block's posterior supremum can sit at zero norm
    /// where the gradient grows without bound; this ends such searches.
    #[serde(default = "default_ftol")]
    pub ftol: f64,
    #[serde(default)]
    pub method: AscentMethod,
}

impl Default for EStepOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 200,
            ftol: default_ftol(),
            method: AscentMethod::Newton,
        }
    }
}

fn default_ftol() -> f64 {
    1e-12
}

/// MAP latents for one user with the coefficients held fixed.
///
/// Starts from `u_p` on every layer, or from `warm` when given.
#[allow(clippy::too_many_arguments)]
pub fn e_step_user_chain(
    layers: &[LayerSpec],
    user_id: &str,
    profile: &FieldVector,
    interactions: &[LabeledInteraction],
    params: &HierParams,
    ctx: ModelContext,
    opts: &EStepOptions,
    warm: Option<&UserLatents>,
) -> Result<(UserLatents, f64)> {
    check_user_inputs(warm, profile, params, &ctx)?;
    if layers.is_empty() {
        return Ok((UserLatents::at_profile(user_id, profile), 0.0));
    }
    let obj = ChainObjective::new(ctx, layers, profile.as_slice(), interactions, params);
    let x0 = match warm {
        Some(w) => stack(layers, w),
        None => layers
            .iter()
            .flat_map(|_| profile.as_slice().iter().copied())
            .collect(),
    };
    let ascent = AscentOptions {
        ftol: opts.ftol,
        ..AscentOptions::new(opts.method, opts.tol, opts.max_iters)
    };
    let out = maximize(&obj, x0, &ascent).map_err(|_| {
        Error::Divergence {
            user_id: user_id.to_string(),
        }
    })?;
    if !out.value.is_finite() || out.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            user_id: user_id.to_string(),
        });
    }
    Ok((unstack(layers, user_id, profile, &out.x), out.value))
}

/// E-step for the full view/apply chain.
pub fn e_step_user(
    user_id: &str,
    profile: &FieldVector,
    interactions: &[LabeledInteraction],
    params: &HierParams,
    ctx: ModelContext,
    opts: &EStepOptions,
) -> Result<UserLatents> {
    e_step_user_chain(&VIEW_APPLY_CHAIN, user_id, profile, interactions, params, ctx, opts, None).map(|r| r.0)
}

/// Field inference for serving: the E-step with trained coefficients.
///
/// With no interactions the result is the profile vector on every layer, bit for bit.
pub fn infer_user_fields(
    layers: &[LayerSpec],
    user_id: &str,
    profile: &FieldVector,
    recent: &[LabeledInteraction],
    params: &HierParams,
    ctx: ModelContext,
    opts: &EStepOptions,
) -> Result<UserLatents> {
    if recent.is_empty() {
        return Ok(UserLatents::at_profile(user_id, profile));
    }
    e_step_user_chain(layers, user_id, profile, recent, params, ctx, opts, None).map(|r| r.0)
}

/// Refits each layer's coefficients by MAP with the latents fixed.
///
/// `histories[i]` must belong to `latents[i]`. Starts from `current`, so the
/// layer posterior never decreases.
pub fn m_step(
    layers: &[LayerSpec],
    latents: &[UserLatents],
    histories: &[UserHistory],
    hyper: &Hyperpriors,
    current: &HierParams,
    ctx: ModelContext,
    opts: &FitOptions,
) -> Result<HierParams> {
    let mut next = current.clone();
    for spec in layers {
        let design = layer_design(spec, latents, histories, ctx)?;
        let prior = hyper.prior(spec.signal);
        let fit = fit_map_from(&design, &prior, current.beta(spec.signal), opts)?;
        *next.beta_mut(spec.signal) = fit.coefficients;
    }
    Ok(next)
}

fn layer_design(spec: &LayerSpec, latents: &[UserLatents], histories: &[UserHistory], ctx: ModelContext) -> Result<Design> {
    let fdim = ctx.features.dim();
    let rows: Vec<(Vec<f64>, Vec<i8>)> = latents
        .par_iter()
        .zip(histories.par_iter())
        .map(|(lat, hist)| {
            let u = lat.layer(spec.signal).as_slice();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut buf = vec![0.0; fdim];
            for it in hist.interactions.iter().filter(|it| it.in_domain(spec.domain)) {
                ctx.features.evaluate_into(u, ctx.jobs[it.job].as_slice(), &mut buf);
                xs.extend_from_slice(&buf);
                ys.push(it.label(spec.signal));
            }
            (xs, ys)
        })
        .collect();
    let mut design = Design::new(fdim);
    for (xs, ys) in rows {
        for (x, y) in xs.chunks(fdim).zip(ys) {
            design.push(x, y)?;
        }
    }
    Ok(design)
}

fn layer_residual(spec: &LayerSpec, lat: &UserLatents, profile: &FieldVector) -> f64 {
    let parent = match spec.parent {
        Parent::Profile => profile,
        Parent::Previous => &lat.u_v,
    };
    lat.layer(spec.signal).squared_distance(parent)
}

/// Inverse-Gamma posterior mode of each layer variance:
/// `(gamma + S/2) / (alpha + M d / 2 + 1)` with `S` the summed squared residuals.
pub fn update_sigmas(
    layers: &[LayerSpec],
    latents: &[UserLatents],
    profiles: &[&FieldVector],
    hyper: &Hyperpriors,
    current: &HierParams,
) -> HierParams {
    let mut next = current.clone();
    let d = profiles.first().map_or(0, |p| p.len());
    for spec in layers {
        let s: f64 = latents
            .iter()
            .zip(profiles)
            .map(|(lat, p)| layer_residual(spec, lat, p))
            .sum();
        let (alpha, gamma) = hyper.inverse_gamma(spec.signal);
        let count = (latents.len() * d) as f64;
        *next.sigma_mut(spec.signal) = ((gamma + 0.5 * s) / (alpha + 0.5 * count + 1.0)).max(SIGMA_FLOOR);
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_rounds: usize,
    pub tol: f64,
    pub update_sigmas: bool,
    pub e_step: EStepOptions,
    pub fit: FitOptions,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            tol: 1e-4,
            update_sigmas: false,
            e_step: EStepOptions::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    E,
    M,
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub phase: Phase,
    pub log_posterior: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub entries: Vec<TraceEntry>,
    pub rounds: usize,
    pub converged: bool,
}

impl EmTrace {
    /// Largest decrease between consecutive entries (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| w[0].log_posterior - w[1].log_posterior)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub params: HierParams,
    /// Latents of every user with events in the training window, in user order.
    pub latents: Vec<UserLatents>,
    pub trace: EmTrace,
}

impl EmResult {
    pub fn latents_by_id(&self) -> BTreeMap<&str, &UserLatents> {
        self.latents.iter().map(|l| (l.user_id.as_str(), l)).collect()
    }
}

/// Everything EM needs besides the parameters.
pub struct EmProblem<'a> {
    pub layers: &'a [LayerSpec],
    pub dataset: &'a Dataset,
    pub histories: &'a [UserHistory],
    pub hyper: &'a Hyperpriors,
    pub ctx: ModelContext<'a>,
}

impl EmProblem<'_> {
    fn user_objective(&self, h: &UserHistory, lat: &UserLatents, params: &HierParams) -> f64 {
        ChainObjective::new(self.ctx, self.layers, self.dataset.profile(h.user).as_slice(), &h.interactions, params)
            .value(&stack(self.layers, lat))
    }

    /// Sum of user chain posteriors, coefficient priors, and (for the chain's
    /// layers) the variance normalizers and Inverse-Gamma priors.
    pub fn joint_log_posterior(&self, latents: &[UserLatents], params: &HierParams) -> f64 {
        let users: Vec<f64> = self
            .histories
            .par_iter()
            .zip(latents.par_iter())
            .map(|(h, lat)| self.user_objective(h, lat, params))
            .collect();
        let mut total: f64 = users.iter().sum();
        let d = self.ctx.features.field_dim() as f64;
        let m = self.histories.len() as f64;
        for spec in self.layers {
            total += self.hyper.prior(spec.signal).log_density(&params.beta(spec.signal).beta);
            let sigma = params.sigma(spec.signal);
            let (alpha, gamma) = self.hyper.inverse_gamma(spec.signal);
            total += -(0.5 * m * d + alpha + 1.0) * sigma.ln() - gamma / sigma;
        }
        total
    }

    /// Parallel E-step over users, in user order.
    ///
    /// [`EStart::Previous`] continues from the previous latents, so no user's
    /// posterior decreases. [`EStart::Profile`] re-optimizes from `u_p` and
    /// keeps that result unless it lands below the previous latents'
    /// posterior, in which case the search continues from the previous latents.
    pub fn e_step(
        &self,
        previous: &[UserLatents],
        params: &HierParams,
        opts: &EStepOptions,
        start: EStart,
    ) -> Result<Vec<UserLatents>> {
        self.histories
            .par_iter()
            .zip(previous.par_iter())
            .map(|(h, prev)| {
                let profile = self.dataset.profile(h.user);
                let user_id = &self.dataset.users[h.user].user_id;
                let run = |warm| e_step_user_chain(self.layers, user_id, profile, &h.interactions, params, self.ctx, opts, warm);
                match start {
                    EStart::Previous => run(Some(prev)).map(|r| r.0),
                    EStart::Profile => {
                        let (fresh, value) = run(None)?;
                        if value >= self.user_objective(h, prev, params) - FRESH_START_SLACK {
                            Ok(fresh)
                        } else {
                            run(Some(prev)).map(|r| r.0)
                        }
                    }
                }
            })
            .collect()
    }
}

/// Where an E-step search starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EStart {
    Previous,
    Profile,
}

/// Per-user posterior loss tolerated when keeping a fresh-start E-step result,
/// so a user whose two searches reach the same optimum gets the fresh one.
const FRESH_START_SLACK: f64 = 1e-12;

fn max_latent_change(a: &[UserLatents], b: &[UserLatents]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Hard-EM training of the coefficients and every user's latents.
///
/// Stops when the largest infinity-norm change over `beta_v`, `beta_a`, and
/// all latents in a round falls below `opts.tol`, or after `max_rounds`.
/// Rounds continue each user's search from the previous latents; a closing
/// E-step from `u_p` makes the returned latents consistent with the returned
/// coefficients and with [`infer_user_fields`]. Chains without an apply layer get `beta_a` fit afterwards on
/// the final `u_a`, so every trained model can score applies.
pub fn em_train(problem: &EmProblem, init: HierParams, opts: &EmOptions) -> Result<EmResult> {
    problem.hyper.validate(problem.ctx.features.dim())?;
    let ds = problem.dataset;
    let mut latents: Vec<UserLatents> = problem
        .histories
        .iter()
        .map(|h| UserLatents::at_profile(&ds.users[h.user].user_id, ds.profile(h.user)))
        .collect();
    let mut params = init;
    let mut trace = EmTrace::default();
    let record = |trace: &mut EmTrace, round, phase, latents: &[UserLatents], params: &HierParams| {
        let lp = problem.joint_log_posterior(latents, params);
        log::debug!("em round {round} {phase:?}: joint log posterior {lp:.10}");
        trace.entries.push(TraceEntry {
            round,
            phase,
            log_posterior: lp,
        });
    };
    record(&mut trace, 0, Phase::Init, &latents, &params);

    for round in 1..=opts.max_rounds {
        let next_latents = problem.e_step(&latents, &params, &opts.e_step, EStart::Previous)?;
        record(&mut trace, round, Phase::E, &next_latents, &params);
        let mut next_params = m_step(
            problem.layers,
            &next_latents,
            problem.histories,
            problem.hyper,
            &params,
            problem.ctx,
            &opts.fit,
        )?;
        record(&mut trace, round, Phase::M, &next_latents, &next_params);
        if opts.update_sigmas && !problem.layers.is_empty() {
            let profiles: Vec<&FieldVector> = problem.histories.iter().map(|h| ds.profile(h.user)).collect();
            next_params = update_sigmas(problem.layers, &next_latents, &profiles, problem.hyper, &next_params);
            record(&mut trace, round, Phase::Sigma, &next_latents, &next_params);
        }
        let delta = max_latent_change(&latents, &next_latents)
            .max(params.beta_v.max_abs_diff(&next_params.beta_v))
            .max(params.beta_a.max_abs_diff(&next_params.beta_a));
        latents = next_latents;
        params = next_params;
        trace.rounds = round;
        log::debug!("em round {round}: max change {delta:.3e}");
        if delta < opts.tol {
            trace.converged = true;
            break;
        }
    }
    if trace.rounds > 0 {
        latents = problem.e_step(&latents, &params, &opts.e_step, EStart::Profile)?;
        let last = trace.rounds;
        record(&mut trace, last, Phase::E, &latents, &params);
    }
    if !problem.layers.iter().any(|l| l.signal == Signal::Apply) {
        // No apply layer: serve with an apply regression on the final apply fields.
        let spec = LayerSpec {
            signal: Signal::Apply,
            parent: Parent::Profile,
            domain: Domain::AllImpressions,
        };
        params = m_step(&[spec], &latents, problem.histories, problem.hyper, &params, problem.ctx, &opts.fit)?;
    }
    Ok(EmResult { params, latents, trace })
}

/// `hier_model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierModelFile {
    pub model: String,
    pub beta_v: Vec<f64>,
    pub beta_a: Vec<f64>,
    pub sigma_v: f64,
    pub sigma_a: f64,
    pub hyperpriors: Hyperpriors,
    pub feature_config_hash: String,
    pub schema_hash: String,
}

impl HierModelFile {
    pub fn params(&self) -> HierParams {
        HierParams {
            beta_v: Coefficients::new(self.beta_v.clone()),
            beta_a: Coefficients::new(self.beta_a.clone()),
            sigma_v: self.sigma_v,
            sigma_a: self.sigma_a,
        }
    }

    pub fn check_hashes(&self, schema: &BlockSchema, features: &FeatureSpace) -> Result<()> {
        let schema_hash = schema.hash();
        if self.schema_hash != schema_hash {
            return Err(Error::HashMismatch {
                what: "schema",
                expected: schema_hash,
                found: self.schema_hash.clone(),
            });
        }
        let fhash = features.config().hash();
        if self.feature_config_hash != fhash {
            return Err(Error::HashMismatch {
                what: "feature config",
                expected: fhash,
                found: self.feature_config_hash.clone(),
            });
        }
        Ok(())
    }
}

/// One `latents.jsonl` line.
pub fn latents_to_json(schema: &BlockSchema, lat: &UserLatents) -> serde_json::Value {
    serde_json::json!({
        "user_id": lat.user_id,
        "u_v": schema.vector_to_json(&lat.u_v),
        "u_a": schema.vector_to_json(&lat.u_a),
    })
}

pub fn latents_from_json(schema: &BlockSchema, value: &serde_json::Value) -> Result<UserLatents> {
    let user_id = value
        .get("user_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Validation("latents record without user_id".into()))?;
    let field = |k: &str| {
        value
            .get(k)
            .ok_or_else(|| Error::Validation(format!("latents record without {k}")))
            .and_then(|v| schema.vector_from_json(v))
    };
    Ok(UserLatents {
        user_id: user_id.to_string(),
        u_v: field("u_v")?,
        u_a: field("u_a")?,
    })
}

pub fn latents_to_jsonl(schema: &BlockSchema, latents: &[UserLatents]) -> String {
    let mut out = String::new();
    for l in latents {
        out.push_str(&latents_to_json(schema, l).to_string());
        out.push('\n');
    }
    out
}

pub fn latents_from_jsonl(schema: &BlockSchema, text: &str, path: &std::path::Path) -> Result<Vec<UserLatents>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            latents_from_json(schema, &v)
        })
        .collect()
}
