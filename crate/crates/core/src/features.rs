//! User–job feature function and its derivatives with respect to the user vector.
//!
//! Feature order is fixed: configured similarity descriptors, then the raw
//! user blocks (optional), then the raw job blocks (optional), then a bias
//! of 1.0 (optional, always last).

use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{BlockSchema, FieldVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub user_block: String,
    pub job_block: String,
    pub kind: SimilarityKind,
}

impl FeatureDescriptor {
    pub fn cosine(user_block: &str, job_block: &str) -> Self {
        Self {
            user_block: user_block.into(),
            job_block: job_block.into(),
            kind: SimilarityKind::Cosine,
        }
    }

    pub fn jaccard(user_block: &str, job_block: &str) -> Self {
        Self {
            user_block: user_block.into(),
            job_block: job_block.into(),
            kind: SimilarityKind::Jaccard,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub descriptors: Vec<FeatureDescriptor>,
    #[serde(default)]
    pub include_user_raw: bool,
    #[serde(default)]
    pub include_job_raw: bool,
    #[serde(default = "default_true")]
    pub include_bias: bool,
}

impl FeatureConfig {
    /// One cosine per block (user block against the same-named job block) plus bias.
    pub fn cosine_per_block(schema: &BlockSchema) -> Self {
        Self {
            descriptors: schema
                .block_names()
                .map(|b| FeatureDescriptor::cosine(b, b))
                .collect(),
            include_user_raw: false,
            include_job_raw: false,
            include_bias: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("features: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("feature config serializes")
    }

    pub fn hash(&self) -> String {
        crate::hash::digest_str(&self.to_json())
    }
}

/// Dense feature vector `x` in canonical feature order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(cosine_unchecked(a, b))
}

fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Jaccard index of the supports (non-zero coordinates); 0 when both are empty.
pub fn jaccard(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(jaccard_unchecked(a, b))
}

fn jaccard_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (sx, sy) = (*x != 0.0, *y != 0.0);
        inter += (sx && sy) as usize;
        union += (sx || sy) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone)]
struct Resolved {
    user: Range<usize>,
    job: Range<usize>,
    kind: SimilarityKind,
}

/// A [`FeatureConfig`] resolved against a schema.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    config: FeatureConfig,
    resolved: Vec<Resolved>,
    user_dim: usize,
    dim: usize,
    names: Vec<String>,
}

impl FeatureSpace {
    pub fn new(config: &FeatureConfig, schema: &BlockSchema) -> Result<Self> {
        if config.descriptors.is_empty() {
            return Err(Error::Config("feature config needs at least one descriptor".into()));
        }
        let lookup = |name: &str| {
            schema
                .block_index(name)
                .ok_or_else(|| Error::Config(format!("feature references unknown block `{name}`")))
        };
        let mut resolved = Vec::with_capacity(config.descriptors.len());
        let mut names = Vec::new();
        for d in &config.descriptors {
            let user = schema.block_range(lookup(&d.user_block)?);
            let job = schema.block_range(lookup(&d.job_block)?);
            if user.len() != job.len() {
                return Err(Error::Config(format!(
                    "blocks `{}` and `{}` have different vocabulary sizes",
                    d.user_block, d.job_block
                )));
            }
            let kind = match d.kind {
                SimilarityKind::Cosine => "cosine",
                SimilarityKind::Jaccard => "jaccard",
            };
            names.push(format!("{kind}({},{})", d.user_block, d.job_block));
            resolved.push(Resolved {
                user,
                job,
                kind: d.kind,
            });
        }
        let mut raw_names = |prefix: &str| {
            for b in 0..schema.num_blocks() {
                for t in schema.vocabulary(b) {
                    names.push(format!("{prefix}:{}:{t}", schema.block_name(b)));
                }
            }
        };
        if config.include_user_raw {
            raw_names("user");
        }
        if config.include_job_raw {
            raw_names("job");
        }
        if config.include_bias {
            names.push("bias".into());
        }
        Ok(Self {
            config: config.clone(),
            resolved,
            user_dim: schema.dim(),
            dim: names.len(),
            names,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Number of features `d_f`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Dimension of the user (and job) field vectors.
    pub fn field_dim(&self) -> usize {
        self.user_dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.config.include_bias.then(|| self.dim - 1)
    }

    fn user_raw_offset(&self) -> Option<usize> {
        self.config.include_user_raw.then_some(self.resolved.len())
    }

    /// Whether gradients with respect to the user vector exist.
    pub fn check_differentiable(&self) -> Result<()> {
        match self.config.descriptors.iter().find(|d| d.kind == SimilarityKind::Jaccard) {
            Some(d) => Err(Error::UnsupportedGradient(format!(
                "jaccard({},{})",
                d.user_block, d.job_block
            ))),
            None => Ok(()),
        }
    }

    /// Writes `f(j, u)` into `out` (length `dim`).
    pub fn evaluate_into(&self, u: &[f64], j: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut k = 0;
        for r in &self.resolved {
            let (a, b) = (&u[r.user.clone()], &j[r.job.clone()]);
            out[k] = match r.kind {
                SimilarityKind::Cosine => cosine_unchecked(a, b),
                SimilarityKind::Jaccard => jaccard_unchecked(a, b),
            };
            k += 1;
        }
        if self.config.include_user_raw {
            out[k..k + u.len()].copy_from_slice(u);
            k += u.len();
        }
        if self.config.include_job_raw {
            out[k..k + j.len()].copy_from_slice(j);
            k += j.len();
        }
        if self.config.include_bias {
            out[k] = 1.0;
        }
    }

    pub fn evaluate(&self, u: &[f64], j: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(u, j, &mut out);
        out
    }

    pub fn feature_vector(&self, u: &FieldVector, j: &FieldVector) -> Result<FeatureVector> {
        if u.len() != self.user_dim {
            return Err(Error::DimensionMismatch {
                expected: self.user_dim,
                found: u.len(),
            });
        }
        if j.len() != self.user_dim {
            return Err(Error::DimensionMismatch {
                expected: self.user_dim,
                found: j.len(),
            });
        }
        Ok(FeatureVector(self.evaluate(u.as_slice(), j.as_slice())))
    }

    /// `d_f x d` Jacobian of the features with respect to the user vector.
    pub fn jacobian_wrt_user(&self, u: &FieldVector, j: &FieldVector) -> Result<DMatrix<f64>> {
        self.check_differentiable()?;
        let (u, j) = (u.as_slice(), j.as_slice());
        let mut jac = DMatrix::zeros(self.dim, self.user_dim);
        let mut row = vec![0.0; self.user_dim];
        for (k, r) in self.resolved.iter().enumerate() {
            row.iter_mut().for_each(|x| *x = 0.0);
            cosine_grad(&u[r.user.clone()], &j[r.job.clone()], 1.0, &mut row[r.user.clone()]);
            for (c, v) in row.iter().enumerate() {
                jac[(k, c)] = *v;
            }
        }
        if let Some(off) = self.user_raw_offset() {
            for c in 0..self.user_dim {
                jac[(off + c, c)] = 1.0;
            }
        }
        Ok(jac)
    }

    /// Adds `scale * d(beta . f)/du` into `grad`.
    pub(crate) fn add_score_gradient(&self, u: &[f64], j: &[f64], beta: &[f64], scale: f64, grad: &mut [f64]) {
        for (k, r) in self.resolved.iter().enumerate() {
            if beta[k] != 0.0 {
                cosine_grad(&u[r.user.clone()], &j[r.job.clone()], scale * beta[k], &mut grad[r.user.clone()]);
            }
        }
        if let Some(off) = self.user_raw_offset() {
            for (g, b) in grad.iter_mut().zip(&beta[off..off + self.user_dim]) {
                *g += scale * b;
            }
        }
    }

    #[cfg(test)]
    /// Adds `scale * d^2(beta . f)/du^2` into the square sub-block of `hess`
    /// starting at (`offset`, `offset`). Raw blocks are linear and contribute nothing.
    pub(crate) fn add_score_hessian(
        &self,
        u: &[f64],
        j: &[f64],
        beta: &[f64],
        scale: f64,
        hess: &mut DMatrix<f64>,
        offset: usize,
    ) {
        for (k, r) in self.resolved.iter().enumerate() {
            if beta[k] != 0.0 {
                cosine_hessian(
                    &u[r.user.clone()],
                    &j[r.job.clone()],
                    scale * beta[k],
                    hess,
                    offset + r.user.start,
                );
            }
        }
    }
}

/// Accumulates `sum_k (h_k * d^2 s_k/du^2 - w_k * g_k g_k')` with
/// `s_k = beta . f(u, j_k)` and `g_k = ds_k/du` at a fixed `u`.
///
/// Each cosine gradient is `beta_r (q_kr - c_kr p_r) / |u_r|`: a sparse job
/// part plus a multiple of the fixed unit vector `p_r`. Outer products are
/// kept in that basis and expanded once in [`ScoreCurvature::finish`].
pub(crate) struct ScoreCurvature<'a> {
    space: &'a FeatureSpace,
    beta: &'a [f64],
    unit: Vec<Vec<f64>>,
    /// `1/|u_r|`, zero for an all-zero block.
    inv_norm: Vec<f64>,
    alpha: Vec<f64>,
    z: Vec<Vec<f64>>,
    /// Sparse-sparse, sparse-basis and basis-basis parts of `sum w g g'`.
    ss: DMatrix<f64>,
    sb: DMatrix<f64>,
    bb: DMatrix<f64>,
    idx: Vec<usize>,
    val: Vec<f64>,
    t: Vec<f64>,
}

impl<'a> ScoreCurvature<'a> {
    pub(crate) fn new(space: &'a FeatureSpace, u: &[f64], beta: &'a [f64]) -> Self {
        let mut unit = Vec::with_capacity(space.resolved.len());
        let mut inv_norm = Vec::with_capacity(space.resolved.len());
        for r in &space.resolved {
            let a = &u[r.user.clone()];
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            unit.push(a.iter().map(|x| x * inv).collect::<Vec<_>>());
            inv_norm.push(inv);
        }
        let cols = space.resolved.len() + usize::from(space.config.include_user_raw);
        let d = space.user_dim;
        Self {
            space,
            beta,
            z: space.resolved.iter().map(|r| vec![0.0; r.user.len()]).collect(),
            alpha: vec![0.0; space.resolved.len()],
            unit,
            inv_norm,
            ss: DMatrix::zeros(d, d),
            sb: DMatrix::zeros(d, cols),
            bb: DMatrix::zeros(cols, cols),
            idx: Vec::new(),
            val: Vec::new(),
            t: vec![0.0; cols],
        }
    }

    /// Adds one term with curvature weight `h` and outer-product weight `w`.
    pub(crate) fn add(&mut self, j: &[f64], h: f64, w: f64) {
        self.idx.clear();
        self.val.clear();
        for (k, r) in self.space.resolved.iter().enumerate() {
            self.t[k] = 0.0;
            if self.beta[k] == 0.0 || self.inv_norm[k] == 0.0 {
                continue;
            }
            let b = &j[r.job.clone()];
            let nb2: f64 = b.iter().map(|y| y * y).sum();
            if nb2 == 0.0 {
                continue;
            }
            let inv_nb = 1.0 / nb2.sqrt();
            let a = self.beta[k] * self.inv_norm[k];
            let mut c = 0.0;
            for (i, y) in b.iter().enumerate().filter(|(_, y)| **y != 0.0) {
                let q = y * inv_nb;
                c += self.unit[k][i] * q;
                self.z[k][i] += h * q;
                self.idx.push(r.user.start + i);
                self.val.push(a * q);
            }
            self.alpha[k] += h * c;
            self.t[k] = -a * c;
        }
        if self.space.config.include_user_raw {
            let last = self.t.len() - 1;
            self.t[last] = 1.0;
        }
        for (x, &ia) in self.idx.iter().enumerate() {
            let wa = w * self.val[x];
            for (&ib, vb) in self.idx.iter().zip(&self.val) {
                self.ss[(ia, ib)] += wa * vb;
            }
            for (col, tc) in self.t.iter().enumerate() {
                self.sb[(ia, col)] += wa * tc;
            }
        }
        for (r, tr) in self.t.iter().enumerate() {
            if *tr != 0.0 {
                for (col, tc) in self.t.iter().enumerate() {
                    self.bb[(r, col)] += w * tr * tc;
                }
            }
        }
    }

    /// Adds the accumulated matrix into the square sub-block of `hess` at (`offset`, `offset`).
    pub(crate) fn finish(self, hess: &mut DMatrix<f64>, offset: usize) {
        let d = self.space.user_dim;
        let mut basis = DMatrix::zeros(d, self.t.len());
        for (k, r) in self.space.resolved.iter().enumerate() {
            for (i, p) in self.unit[k].iter().enumerate() {
                basis[(r.user.start + i, k)] = *p;
            }
        }
        if let Some(off) = self.space.user_raw_offset() {
            let last = self.t.len() - 1;
            for c in 0..d {
                basis[(c, last)] = self.beta[off + c];
            }
        }
        let cross = &self.sb * basis.transpose();
        let outer = &self.ss + &cross + cross.transpose() + &basis * &self.bb * basis.transpose();
        let mut block = hess.view_mut((offset, offset), (d, d));
        block -= outer;
        for (k, r) in self.space.resolved.iter().enumerate() {
            let s = self.beta[k] * self.inv_norm[k] * self.inv_norm[k];
            if s == 0.0 {
                continue;
            }
            let (p, z, alpha) = (&self.unit[k], &self.z[k], self.alpha[k]);
            for a in 0..p.len() {
                for b in 0..p.len() {
                    let mut v = 3.0 * alpha * p[a] * p[b] - p[a] * z[b] - z[a] * p[b];
                    if a == b {
                        v -= alpha;
                    }
                    block[(r.user.start + a, r.user.start + b)] += s * v;
                }
            }
        }
    }
}

/// Adds `scale * d cos(a, b) / da` into `out`.
fn cosine_grad(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return;
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let c = dot / (na * nb);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (y / (na * nb) - c * x / na2);
    }
}

#[cfg(test)]
/// Adds `scale * d^2 cos(a, b) / da^2` at (`at`, `at`) in `hess`.
///
/// With `p = a/|a|`, `q = b/|b|`, `c = p.q`:
/// `H = (3c p p' - p q' - q p' - c I) / |a|^2`.
fn cosine_hessian(a: &[f64], b: &[f64], scale: f64, hess: &mut DMatrix<f64>, at: usize) {
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return;
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let n = a.len();
    let p: Vec<f64> = a.iter().map(|x| x / na).collect();
    let q: Vec<f64> = b.iter().map(|y| y / nb).collect();
    let c: f64 = p.iter().zip(&q).map(|(x, y)| x * y).sum();
    let s = scale / na2;
    for r in 0..n {
        for col in 0..n {
            let mut h = 3.0 * c * p[r] * p[col] - p[r] * q[col] - q[r] * p[col];
            if r == col {
                h -= c;
            }
            hess[(at + r, at + col)] += s * h;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::BlockDef;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn schema() -> BlockSchema {
        BlockSchema::new(vec![
            BlockDef {
                name: "title".into(),
                vocabulary: vec!["a".into(), "b".into(), "c".into()],
            },
            BlockDef {
                name: "skills".into(),
                vocabulary: vec!["x".into(), "y".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[1.0, 1.0, 0.0], &[2.0, 0.5, 0.0]).unwrap(), 1.0);
        assert!((jaccard(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(jaccard(&[1.0], &[]).is_err());
    }

    #[test]
    fn feature_vector_layout() {
        let s = schema();
        let cfg = FeatureConfig {
            descriptors: vec![FeatureDescriptor::cosine("title", "title")],
            include_user_raw: false,
            include_job_raw: false,
            include_bias: true,
        };
        let fs = FeatureSpace::new(&cfg, &s).unwrap();
        let u = FieldVector::new(&s, vec![0.6, 0.8, 0.0, 1.0, 0.0]).unwrap();
        let x = fs.feature_vector(&u, &u).unwrap();
        assert!((x.0[0] - 1.0).abs() < 1e-15);
        assert_eq!(x.0[1], 1.0);
        assert_eq!(fs.names(), &["cosine(title,title)".to_string(), "bias".to_string()]);

        let zero = FieldVector::zeros(&s);
        assert_eq!(fs.feature_vector(&zero, &u).unwrap().0[0], 0.0);
    }

    #[test]
    fn two_descriptors_by_hand() {
        let s = schema();
        let cfg = FeatureConfig {
            descriptors: vec![
                FeatureDescriptor::cosine("title", "title"),
                FeatureDescriptor::jaccard("skills", "skills"),
            ],
            include_user_raw: true,
            include_job_raw: false,
            include_bias: true,
        };
        let fs = FeatureSpace::new(&cfg, &s).unwrap();
        let u = FieldVector::new(&s, vec![1.0, 2.0, 0.0, 1.0, 0.0]).unwrap();
        let j = FieldVector::new(&s, vec![2.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let x = fs.feature_vector(&u, &j).unwrap().0;
        // title: (2 + 2) / (sqrt5 sqrt5) = 0.8; skills supports {x} vs {x, y} = 1/2
        assert_eq!(x.len(), 2 + 5 + 1);
        assert!((x[0] - 0.8).abs() < 1e-15);
        assert_eq!(x[1], 0.5);
        assert_eq!(&x[2..7], u.as_slice());
        assert_eq!(x[7], 1.0);
        assert_eq!(fs.bias_index(), Some(7));
    }

    #[test]
    fn missing_block_is_config_error() {
        let cfg = FeatureConfig {
            descriptors: vec![FeatureDescriptor::cosine("title", "nope")],
            include_user_raw: false,
            include_job_raw: false,
            include_bias: true,
        };
        assert!(matches!(FeatureSpace::new(&cfg, &schema()), Err(Error::Config(_))));
        let mismatched = FeatureConfig {
            descriptors: vec![FeatureDescriptor::cosine("title", "skills")],
            ..cfg
        };
        assert!(FeatureSpace::new(&mismatched, &schema()).is_err());
    }

    #[test]
    fn jacobian_at_maximum_and_zero() {
        let s = schema();
        let fs = FeatureSpace::new(&FeatureConfig::cosine_per_block(&s), &s).unwrap();
        let u = FieldVector::new(&s, vec![0.6, 0.8, 0.0, 0.0, 1.0]).unwrap();
        let jac = fs.jacobian_wrt_user(&u, &u).unwrap();
        assert!(jac.iter().all(|v| v.abs() < 1e-15));

        let zero = FieldVector::zeros(&s);
        let jac = fs.jacobian_wrt_user(&zero, &u).unwrap();
        assert!(jac.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn jaccard_has_no_gradient() {
        let s = schema();
        let cfg = FeatureConfig {
            descriptors: vec![FeatureDescriptor::jaccard("title", "title")],
            include_user_raw: false,
            include_job_raw: false,
            include_bias: false,
        };
        let fs = FeatureSpace::new(&cfg, &s).unwrap();
        let u = FieldVector::zeros(&s);
        assert!(matches!(
            fs.jacobian_wrt_user(&u, &u),
            Err(Error::UnsupportedGradient(_))
        ));
    }

    fn raw_space() -> (BlockSchema, FeatureSpace) {
        let s = schema();
        let cfg = FeatureConfig {
            descriptors: vec![
                FeatureDescriptor::cosine("title", "title"),
                FeatureDescriptor::cosine("skills", "skills"),
            ],
            include_user_raw: true,
            include_job_raw: true,
            include_bias: true,
        };
        let fs = FeatureSpace::new(&cfg, &s).unwrap();
        (s, fs)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (s, fs) = raw_space();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let u: Vec<f64> = (0..s.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let j: Vec<f64> = (0..s.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (uf, jf) = (FieldVector::from_raw(u.clone()), FieldVector::from_raw(j.clone()));
            let jac = fs.jacobian_wrt_user(&uf, &jf).unwrap();
            for c in 0..s.dim() {
                let (mut up, mut dn) = (u.clone(), u.clone());
                up[c] += h;
                dn[c] -= h;
                let (fp, fm) = (fs.evaluate(&up, &j), fs.evaluate(&dn, &j));
                for r in 0..fs.dim() {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!(rel_err(jac[(r, c)], fd) < 1e-5, "row {r} col {c}: {} vs {fd}", jac[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn score_hessian_matches_finite_differences() {
        let (s, fs) = raw_space();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let h = 1e-5;
        for _ in 0..50 {
            let u: Vec<f64> = (0..s.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let j: Vec<f64> = (0..s.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let beta: Vec<f64> = (0..fs.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut hess = DMatrix::zeros(s.dim(), s.dim());
            fs.add_score_hessian(&u, &j, &beta, 1.0, &mut hess, 0);
            let grad_at = |x: &[f64]| {
                let mut g = vec![0.0; s.dim()];
                fs.add_score_gradient(x, &j, &beta, 1.0, &mut g);
                g
            };
            for c in 0..s.dim() {
                let (mut up, mut dn) = (u.clone(), u.clone());
                up[c] += h;
                dn[c] -= h;
                let (gp, gm) = (grad_at(&up), grad_at(&dn));
                for r in 0..s.dim() {
                    let fd = (gp[r] - gm[r]) / (2.0 * h);
                    assert!(rel_err(hess[(r, c)], fd) < 1e-5, "({r},{c}): {} vs {fd}", hess[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn curvature_accumulator_matches_dense_sum() {
        let (s, fs) = raw_space();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for trial in 0..30 {
            let mut u: Vec<f64> = (0..s.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            if trial % 5 == 0 {
                u[0..3].iter_mut().for_each(|x| *x = 0.0);
            }
            let beta: Vec<f64> = (0..fs.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut acc = ScoreCurvature::new(&fs, &u, &beta);
            let mut dense = DMatrix::zeros(s.dim() + 2, s.dim() + 2);
            for _ in 0..7 {
                let j: Vec<f64> = (0..s.dim())
                    .map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 0.0 })
                    .collect();
                let (h, w) = (rng.random_range(-1.0..1.0), rng.random_range(0.0..0.25));
                acc.add(&j, h, w);
                fs.add_score_hessian(&u, &j, &beta, h, &mut dense, 1);
                let mut g = vec![0.0; s.dim()];
                fs.add_score_gradient(&u, &j, &beta, 1.0, &mut g);
                for a in 0..s.dim() {
                    for b in 0..s.dim() {
                        dense[(1 + a, 1 + b)] -= w * g[a] * g[b];
                    }
                }
            }
            let mut got = DMatrix::zeros(s.dim() + 2, s.dim() + 2);
            acc.finish(&mut got, 1);
            assert!((&got - &dense).abs().max() < 1e-10, "trial {trial}");
        }
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            alpha in 0.01f64..100.0,
        ) {
            let c = cosine(&a, &b).unwrap();
            prop_assert!((c - cosine(&b, &a).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            prop_assert!((c - cosine(&scaled, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn similarities_are_bounded_for_nonnegative_inputs(
            a in proptest::collection::vec(0.0f64..5.0, 5),
            b in proptest::collection::vec(0.0f64..5.0, 5),
        ) {
            let c = cosine(&a, &b).unwrap();
            let jc = jaccard(&a, &b).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
            prop_assert!((0.0..=1.0).contains(&jc));
        }
    }
}
