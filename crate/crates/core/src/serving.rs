//! Candidate retrieval and ranking for a single user request.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureSpace;
use crate::models::{InteractionModel, ModelRegistry};
use crate::regression::{sigmoid, Coefficients};
use crate::schema::{BlockSchema, FieldVector};
use crate::store::{FieldSource, ModelStore, UserFieldsStore};

/// `(block, term) -> job offsets`, each postings list ascending.
#[derive(Debug, Clone, Default)]
pub struct InvertedIndex {
    postings: Vec<Vec<Vec<usize>>>,
    num_jobs: usize,
}

impl InvertedIndex {
    /// Posts every job under each term with positive weight.
    pub fn build(schema: &BlockSchema, jobs: &[FieldVector]) -> Self {
        let mut postings: Vec<Vec<Vec<usize>>> = (0..schema.num_blocks())
            .map(|b| vec![Vec::new(); schema.vocabulary(b).len()])
            .collect();
        for (offset, job) in jobs.iter().enumerate() {
            for (b, block) in postings.iter_mut().enumerate() {
                for (t, w) in job.block(schema, b).iter().enumerate() {
                    if *w > 0.0 {
                        block[t].push(offset);
                    }
                }
            }
        }
        Self {
            postings,
            num_jobs: jobs.len(),
        }
    }

    pub fn postings(&self, block: usize, term: usize) -> &[usize] {
        &self.postings[block][term]
    }

    pub fn num_jobs(&self) -> usize {
        self.num_jobs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieveOptions {
    pub terms_per_block: usize,
    pub max_candidates: usize,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            terms_per_block: 5,
            max_candidates: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub job: usize,
    pub matches: usize,
}

/// The `(block, term)` pairs queried for `fields`: per block, the
/// `terms_per_block` largest positive weights, ties to the lower term index.
pub fn query_terms(schema: &BlockSchema, fields: &FieldVector, terms_per_block: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in 0..schema.num_blocks() {
        let mut terms: Vec<(usize, f64)> = fields
            .block(schema, b)
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, w)| *w > 0.0)
            .collect();
        terms.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        out.extend(terms.into_iter().take(terms_per_block).map(|(t, _)| (b, t)));
    }
    out
}

/// OR-matches the query over the index; ordered by match count desc, then job offset.
pub fn retrieve(index: &InvertedIndex, schema: &BlockSchema, fields: &FieldVector, opts: &RetrieveOptions) -> Vec<Candidate> {
    let mut counts = vec![0usize; index.num_jobs()];
    for (b, t) in query_terms(schema, fields, opts.terms_per_block) {
        for &job in index.postings(b, t) {
            counts[job] += 1;
        }
    }
    let mut out: Vec<Candidate> = counts
        .into_iter()
        .enumerate()
        .filter(|(_, m)| *m > 0)
        .map(|(job, matches)| Candidate { job, matches })
        .collect();
    out.sort_by(|a, b| b.matches.cmp(&a.matches).then(a.job.cmp(&b.job)));
    out.truncate(opts.max_candidates);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub value: f64,
    pub coefficient: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub job_id: String,
    pub rank: usize,
    pub score: f64,
    pub logit: f64,
    /// One entry per feature, bias included; contributions sum to `logit`.
    pub explanation: Vec<Contribution>,
}

/// Scores candidates with `beta` on `f(job, fields)` and returns the top `k`,
/// ordered by score desc then job offset.
pub fn score_and_rank(
    dataset: &Dataset,
    features: &FeatureSpace,
    candidates: &[Candidate],
    fields: &FieldVector,
    beta: &Coefficients,
    k: usize,
) -> Result<Vec<Recommendation>> {
    if beta.dim() != features.dim() {
        return Err(Error::DimensionMismatch {
            expected: features.dim(),
            found: beta.dim(),
        });
    }
    if fields.len() != features.field_dim() {
        return Err(Error::DimensionMismatch {
            expected: features.field_dim(),
            found: fields.len(),
        });
    }
    let mut scored: Vec<(usize, Vec<f64>, f64)> = candidates
        .iter()
        .map(|c| {
            let x = features.evaluate(fields.as_slice(), dataset.job_vector(c.job).as_slice());
            let logit: f64 = x.iter().zip(&beta.beta).map(|(a, b)| a * b).sum();
            (c.job, x, logit)
        })
        .collect();
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (job, x, logit))| Recommendation {
            job_id: dataset.jobs[job].job_id.clone(),
            rank: i + 1,
            score: sigmoid(logit),
            logit,
            explanation: features
                .names()
                .iter()
                .zip(&x)
                .zip(&beta.beta)
                .map(|((name, v), c)| Contribution {
                    feature: name.clone(),
                    value: *v,
                    coefficient: *c,
                    contribution: v * c,
                })
                .collect(),
        })
        .collect())
}

/// Everything needed to answer requests; immutable once built.
pub struct Recommender<'a> {
    pub dataset: &'a Dataset,
    pub features: &'a FeatureSpace,
    pub index: &'a InvertedIndex,
    pub registry: &'a ModelRegistry,
    pub models: &'a ModelStore,
    /// Learned fields; `None` means every user falls back to the profile.
    pub fields: Option<&'a UserFieldsStore>,
    pub retrieve: RetrieveOptions,
    /// Serve profile-only results for users without learned fields.
    /// When off, such users are an error.
    pub fallback_profile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub user_id: String,
    /// Model that actually scored the request.
    pub served_by: String,
    pub source: FieldSource,
    pub recommendations: Vec<Recommendation>,
}

impl Recommender<'_> {
    /// Resolves the fields and the serving model for a user.
    fn resolve(&self, user: usize, model: Arc<dyn InteractionModel>) -> Result<(FieldVector, Arc<dyn InteractionModel>, FieldSource)> {
        let profile = self.dataset.profile(user);
        let user_id = &self.dataset.users[user].user_id;
        if model.layers().is_empty() {
            return Ok((profile.clone(), model, FieldSource::ProfileFallback));
        }
        if let Some(store) = self.fields {
            if store.model() != model.name() {
                return Err(Error::HashMismatch {
                    what: "fields store model",
                    expected: model.name().to_string(),
                    found: store.model().to_string(),
                });
            }
        }
        match self.fields.and_then(|s| s.get(user_id)) {
            Some(f) => Ok((f.u_a.clone(), model, FieldSource::Learned)),
            None if self.fallback_profile => {
                let fallback = self.registry.get(model.fallback_model())?;
                Ok((profile.clone(), fallback, FieldSource::ProfileFallback))
            }
            None => Err(Error::UserNotFound(format!("{user_id} (no learned fields)"))),
        }
    }

    pub fn recommend(&self, user_id: &str, model_name: &str, k: usize) -> Result<RecommendResponse> {
        let user = self
            .dataset
            .user_offset(user_id)
            .ok_or_else(|| Error::UserNotFound(user_id.to_string()))?;
        let model = self.registry.get(model_name)?;
        let (fields, served, source) = self.resolve(user, model)?;
        let trained = self.models.load(served.name(), &self.dataset.schema, self.features)?;
        let beta = Coefficients::new(trained.beta_a);
        let candidates = retrieve(self.index, &self.dataset.schema, &fields, &self.retrieve);
        let recommendations = score_and_rank(self.dataset, self.features, &candidates, &fields, &beta, k)?;
        Ok(RecommendResponse {
            user_id: user_id.to_string(),
            served_by: served.name().to_string(),
            source,
            recommendations,
        })
    }
}
