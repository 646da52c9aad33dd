use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Action, Dataset, InteractionEvent, JobPosting, UserProfile};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureSpace};
use crate::hier::{HierParams, UserLatents};
use crate::regression::{sigmoid, Coefficients};
use crate::rng::substream;
use crate::schema::{BlockDef, BlockSchema, FieldVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub vocabulary_size: usize,
    /// Distinct terms drawn for each user profile.
    pub user_terms: usize,
    /// Distinct terms drawn for each job.
    pub job_terms: usize,
}

/// Parameters of the generative process. Features are one cosine per block
/// plus a bias, so `beta_v` and `beta_a` have `blocks.len() + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub num_users: usize,
    pub num_jobs: usize,
    pub days: i64,
    pub blocks: Vec<BlockSpec>,
    pub beta_v: Vec<f64>,
    pub beta_a: Vec<f64>,
    pub sigma_v: f64,
    pub sigma_a: f64,
    /// Share of users who never show up.
    pub inactive_fraction: f64,
    /// Active users visit on each day with a rate drawn uniformly from this range.
    pub visit_rate: [f64; 2],
    pub impressions_per_day: usize,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        let block = |name: &str, user_terms, job_terms| BlockSpec {
            name: name.into(),
            vocabulary_size: 10,
            user_terms,
            job_terms,
        };
        Self {
            num_users: 2000,
            num_jobs: 1000,
            days: 30,
            blocks: vec![block("title", 1, 1), block("skills", 3, 3)],
            beta_v: vec![2.0, 2.0, -1.0],
            beta_a: vec![3.0, 3.0, -1.0],
            sigma_v: 0.5,
            sigma_a: 0.5,
            inactive_fraction: 0.1,
            visit_rate: [0.2, 0.8],
            impressions_per_day: 10,
            seed: 17,
        }
    }
}

impl SimSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("simulation spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("simulation spec: {m}")));
        if self.blocks.is_empty() {
            return bad("no blocks".into());
        }
        for b in &self.blocks {
            if b.vocabulary_size == 0 || b.user_terms > b.vocabulary_size || b.job_terms > b.vocabulary_size {
                return bad(format!("block `{}` term counts exceed its vocabulary", b.name));
            }
        }
        let fdim = self.blocks.len() + 1;
        if self.beta_v.len() != fdim || self.beta_a.len() != fdim {
            return bad(format!("beta_v and beta_a need {fdim} entries"));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_a >= 0.0) {
            return bad("variances must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.inactive_fraction) {
            return bad("inactive_fraction outside [0, 1]".into());
        }
        let [lo, hi] = self.visit_rate;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("visit_rate must satisfy 0 <= lo <= hi <= 1".into());
        }
        if self.impressions_per_day > self.num_jobs {
            return bad("more impressions per day than jobs".into());
        }
        if self.days <= 0 {
            return bad("days must be positive".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<BlockSchema> {
        BlockSchema::new(
            self.blocks
                .iter()
                .map(|b| BlockDef {
                    name: b.name.clone(),
                    vocabulary: (0..b.vocabulary_size).map(|i| format!("{}_{i:02}", b.name)).collect(),
                })
                .collect(),
        )
    }
}

/// The parameters and latents the data was drawn from.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub params: HierParams,
    /// In user order.
    pub latents: Vec<UserLatents>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub features: FeatureConfig,
    pub truth: GroundTruth,
}

fn draw_terms(rng: &mut impl Rng, schema: &BlockSchema, counts: impl Iterator<Item = usize>) -> Vec<Vec<String>> {
    counts
        .enumerate()
        .map(|(b, n)| {
            let vocab = schema.vocabulary(b);
            let mut picked = sample(rng, vocab.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| vocab[i].clone()).collect()
        })
        .collect()
}

fn perturb(rng: &mut impl Rng, base: &FieldVector, variance: f64) -> FieldVector {
    let sd = variance.sqrt();
    let values = base
        .as_slice()
        .iter()
        .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    FieldVector::from_raw(values)
}

/// Draws profiles, jobs, latents along the profile -> view -> apply chain,
/// and daily impression lists with view and apply outcomes. An apply is only
/// drawn for viewed jobs. Sequential and seeded, so the output depends on the
/// spec alone.
pub fn simulate_dataset(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let schema = spec.schema()?;
    let features = FeatureConfig::cosine_per_block(&schema);
    let space = FeatureSpace::new(&features, &schema)?;

    let mut rng = substream(spec.seed, "simulate/profiles");
    let users: Vec<UserProfile> = (0..spec.num_users)
        .map(|i| UserProfile {
            user_id: format!("u{i:05}"),
            terms: draw_terms(&mut rng, &schema, spec.blocks.iter().map(|b| b.user_terms)),
        })
        .collect();
    let mut rng = substream(spec.seed, "simulate/jobs");
    let jobs: Vec<JobPosting> = (0..spec.num_jobs)
        .map(|i| JobPosting {
            job_id: format!("j{i:05}"),
            terms: draw_terms(&mut rng, &schema, spec.blocks.iter().map(|b| b.job_terms)),
        })
        .collect();
    let skeleton = Dataset::new(schema.clone(), users, jobs, Vec::new())?;

    let mut rng = substream(spec.seed, "simulate/latents");
    let latents: Vec<UserLatents> = skeleton
        .users
        .iter()
        .enumerate()
        .map(|(m, u)| {
            let u_v = perturb(&mut rng, skeleton.profile(m), spec.sigma_v);
            let u_a = perturb(&mut rng, &u_v, spec.sigma_a);
            UserLatents {
                user_id: u.user_id.clone(),
                u_v,
                u_a,
            }
        })
        .collect();

    let beta_v = Coefficients::new(spec.beta_v.clone());
    let beta_a = Coefficients::new(spec.beta_a.clone());
    let score = |u: &FieldVector, j: usize, beta: &Coefficients| {
        let x = space.evaluate(u.as_slice(), skeleton.job_vector(j).as_slice());
        sigmoid(x.iter().zip(&beta.beta).map(|(a, b)| a * b).sum())
    };
    let mut rng = substream(spec.seed, "simulate/events");
    let mut events = Vec::new();
    let [lo, hi] = spec.visit_rate;
    for (m, lat) in latents.iter().enumerate() {
        let inactive = rng.random_bool(spec.inactive_fraction);
        let rate = lo + (hi - lo) * rng.random::<f64>();
        if inactive {
            continue;
        }
        let user_id = &skeleton.users[m].user_id;
        for day in 0..spec.days {
            if !rng.random_bool(rate) {
                continue;
            }
            let shown = sample(&mut rng, spec.num_jobs, spec.impressions_per_day).into_vec();
            for (k, job) in shown.into_iter().enumerate() {
                let event = |action| InteractionEvent {
                    user_id: user_id.clone(),
                    job_id: skeleton.jobs[job].job_id.clone(),
                    action,
                    position: k as u32 + 1,
                    day,
                };
                events.push(event(Action::Impression));
                if rng.random::<f64>() < score(&lat.u_v, job, &beta_v) {
                    events.push(event(Action::View));
                    if rng.random::<f64>() < score(&lat.u_a, job, &beta_a) {
                        events.push(event(Action::Apply));
                    }
                }
            }
        }
    }
    let Dataset { users, jobs, .. } = skeleton;
    let dataset = Dataset::new(schema, users, jobs, events)?;
    Ok(Simulation {
        dataset,
        features,
        truth: GroundTruth {
            params: HierParams {
                beta_v,
                beta_a,
                sigma_v: spec.sigma_v,
                sigma_a: spec.sigma_a,
            },
            latents,
        },
    })
}
