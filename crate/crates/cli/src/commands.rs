use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hierrec::data::{events_to_jsonl, jobs_to_jsonl, users_to_jsonl, Dataset, DayWindow};
use hierrec::eval::{run_model_comparison, segment_users, simulate_dataset, ComparisonConfig, SimSpec};
use hierrec::features::{FeatureConfig, FeatureSpace};
use hierrec::hier::{
    em_train, infer_user_fields, latents_from_jsonl, latents_to_jsonl, user_histories, EmProblem, HierModelFile,
    HierParams, Hyperpriors, ModelContext, UserLatents,
};
use hierrec::models::{InteractionModel, ModelRegistry};
use hierrec::serving::{InvertedIndex, RetrieveOptions, Recommender};
use hierrec::store::{write_atomic, ModelStore, UserFieldsStore};
use hierrec::{Error, Result};
use rayon::prelude::*;

use crate::config::RunConfig;

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// The dataset plus its resolved feature space.
struct Inputs {
    dataset: Dataset,
    features: FeatureSpace,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let dataset = Dataset::load_dir(&cfg.data_dir)?;
    let default_path = cfg.data_dir.join("features.json");
    let config = match &cfg.features {
        Some(p) => FeatureConfig::load(p)?,
        None if default_path.exists() => FeatureConfig::load(&default_path)?,
        None => FeatureConfig::cosine_per_block(&dataset.schema),
    };
    let features = FeatureSpace::new(&config, &dataset.schema)?;
    Ok(Inputs { dataset, features })
}

fn model_store(cfg: &RunConfig) -> ModelStore {
    ModelStore::new(&cfg.store_dir.join("model_store"))
}

fn fields_store_path(cfg: &RunConfig, model: &str) -> PathBuf {
    cfg.store_dir.join(model).join("user_fields_store.jsonl")
}

fn model_dir(cfg: &RunConfig, model: &str) -> PathBuf {
    cfg.out_dir.join(model)
}

/// First day after the recent window.
fn as_of(cfg: &RunConfig, dataset: &Dataset) -> i64 {
    cfg.as_of
        .unwrap_or_else(|| dataset.events.iter().map(|e| e.day + 1).max().unwrap_or(0))
}

fn recent_window(cfg: &RunConfig, dataset: &Dataset) -> DayWindow {
    let end = as_of(cfg, dataset);
    DayWindow::new(end - cfg.window_days, end)
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let path = cfg
        .spec
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs --spec <path>".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read simulation spec {}: {e}", path.display())))?;
    let mut spec = SimSpec::from_json(&text)?;
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    let sim = simulate_dataset(&spec)?;
    let ds = &sim.dataset;
    let dir = &cfg.data_dir;
    write(&dir.join("schema.json"), &ds.schema.to_json())?;
    write(&dir.join("features.json"), &to_json(&sim.features))?;
    write(&dir.join("users.jsonl"), &users_to_jsonl(&ds.users, &ds.schema))?;
    write(&dir.join("jobs.jsonl"), &jobs_to_jsonl(&ds.jobs, &ds.schema))?;
    write(&dir.join("events.jsonl"), &events_to_jsonl(&ds.events))?;
    write(&dir.join("truth_params.json"), &to_json(&sim.truth.params))?;
    write(&dir.join("truth_latents.jsonl"), &latents_to_jsonl(&ds.schema, &sim.truth.latents))?;
    log::info!(
        "simulated {} users, {} jobs, {} events into {}",
        ds.users.len(),
        ds.jobs.len(),
        ds.events.len(),
        dir.display()
    );
    Ok(())
}

fn hyperpriors(cfg: &RunConfig, features: &FeatureSpace) -> Hyperpriors {
    Hyperpriors::standard(features.dim(), cfg.prior_variance)
}

fn train_one(cfg: &RunConfig, inputs: &Inputs, model: &dyn InteractionModel) -> Result<()> {
    let Inputs { dataset, features } = inputs;
    let window = DayWindow::new(cfg.train_start.unwrap_or(i64::MIN), cfg.train_end.unwrap_or(i64::MAX));
    let histories = user_histories(dataset, window);
    let hyper = hyperpriors(cfg, features);
    let problem = EmProblem {
        layers: model.layers(),
        dataset,
        histories: &histories,
        hyper: &hyper,
        ctx: ModelContext::new(features, dataset.job_vectors())?,
    };
    let init = HierParams::at_prior(&hyper, cfg.sigma_v, cfg.sigma_a)?;
    let result = em_train(&problem, init, &cfg.em_options())?;
    log::info!(
        "{}: {} users, {} rounds, converged: {}",
        model.name(),
        histories.len(),
        result.trace.rounds,
        result.trace.converged
    );
    let file = HierModelFile {
        model: model.name().to_string(),
        beta_v: result.params.beta_v.beta.clone(),
        beta_a: result.params.beta_a.beta.clone(),
        sigma_v: result.params.sigma_v,
        sigma_a: result.params.sigma_a,
        hyperpriors: hyper,
        feature_config_hash: features.config().hash(),
        schema_hash: dataset.schema.hash(),
    };
    let dir = model_dir(cfg, model.name());
    write(&dir.join("hier_model.json"), &to_json(&file))?;
    write(&dir.join("latents.jsonl"), &latents_to_jsonl(&dataset.schema, &result.latents))?;
    write(&dir.join("trace.json"), &to_json(&result.trace))?;
    let store = model_store(cfg);
    fs::create_dir_all(&cfg.store_dir).map_err(|e| Error::io(&cfg.store_dir, e))?;
    store.save(&file)
}

/// Trains the selected model and, if different, the model serving its fallback.
pub fn train(cfg: &RunConfig, registry: &ModelRegistry) -> Result<()> {
    let model = registry.get(&cfg.model)?;
    let inputs = load_inputs(cfg)?;
    train_one(cfg, &inputs, model.as_ref())?;
    if model.fallback_model() != model.name() {
        train_one(cfg, &inputs, registry.get(model.fallback_model())?.as_ref())?;
    }
    Ok(())
}

fn inferred_path(cfg: &RunConfig, model: &str) -> PathBuf {
    model_dir(cfg, model).join("inferred_latents.jsonl")
}

/// Field inference for every user with events in the recent window.
pub fn infer(cfg: &RunConfig, registry: &ModelRegistry) -> Result<()> {
    let model = registry.get(&cfg.model)?;
    let Inputs { dataset, features } = load_inputs(cfg)?;
    let trained = model_store(cfg).load(model.name(), &dataset.schema, &features)?;
    let params = trained.params();
    let window = recent_window(cfg, &dataset);
    let histories = user_histories(&dataset, window);
    let ctx = ModelContext::new(&features, dataset.job_vectors())?;
    let latents: Vec<UserLatents> = if model.layers().is_empty() {
        log::warn!("{} has no learned layers; nothing to infer", model.name());
        Vec::new()
    } else {
        histories
            .par_iter()
            .map(|h| {
                infer_user_fields(
                    model.layers(),
                    &dataset.users[h.user].user_id,
                    dataset.profile(h.user),
                    &h.interactions,
                    &params,
                    ctx,
                    &cfg.e_step,
                )
            })
            .collect::<Result<_>>()?
    };
    log::info!(
        "{}: inferred fields for {} users over days [{}, {})",
        model.name(),
        latents.len(),
        window.start,
        window.end
    );
    write(&inferred_path(cfg, model.name()), &latents_to_jsonl(&dataset.schema, &latents))
}

pub fn push(cfg: &RunConfig, registry: &ModelRegistry) -> Result<()> {
    let model = registry.get(&cfg.model)?;
    let Inputs { dataset, features } = load_inputs(cfg)?;
    let path = inferred_path(cfg, model.name());
    let batch = latents_from_jsonl(&dataset.schema, &read(&path)?, &path)?;
    let store_path = fields_store_path(cfg, model.name());
    if let Some(dir) = store_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut store = UserFieldsStore::open(&store_path, model.name(), &dataset.schema, &features)?;
    let written = store.push(&batch, as_of(cfg, &dataset))?;
    log::info!("pushed {written} records to {}", store_path.display());
    Ok(())
}

pub fn recommend(cfg: &RunConfig, registry: &ModelRegistry) -> Result<()> {
    let user = cfg
        .user
        .as_deref()
        .ok_or_else(|| Error::Config("recommend needs --user <id>".into()))?;
    let model = registry.get(&cfg.model)?;
    let Inputs { dataset, features } = load_inputs(cfg)?;
    let index = InvertedIndex::build(&dataset.schema, dataset.job_vectors());
    let models = model_store(cfg);
    let store_path = fields_store_path(cfg, model.name());
    let fields = if model.layers().is_empty() {
        None
    } else {
        Some(UserFieldsStore::open(&store_path, model.name(), &dataset.schema, &features)?)
    };
    let recommender = Recommender {
        dataset: &dataset,
        features: &features,
        index: &index,
        registry,
        models: &models,
        fields: fields.as_ref(),
        retrieve: RetrieveOptions::default(),
        fallback_profile: cfg.fallback_profile,
    };
    let response = recommender.recommend(user, model.name(), cfg.k)?;
    let out = cfg
        .output
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("recommendations").join(format!("{user}.{}.json", model.name())));
    log::info!(
        "{} recommendations for {user} served by {} into {}",
        response.recommendations.len(),
        response.served_by,
        out.display()
    );
    write(&out, &to_json(&response))
}

pub fn evaluate(cfg: &RunConfig, registry: &ModelRegistry) -> Result<()> {
    let Inputs { dataset, features } = load_inputs(cfg)?;
    let models: Vec<Arc<dyn InteractionModel>> =
        cfg.models.iter().map(|m| registry.get(m)).collect::<Result<_>>()?;
    let comparison = ComparisonConfig {
        windows: cfg.windows,
        hyper: hyperpriors(cfg, &features),
        sigma_v: cfg.sigma_v,
        sigma_a: cfg.sigma_a,
        em: cfg.em_options(),
        labels: cfg.label_options(),
    };
    let (report, _) = run_model_comparison(&dataset, &features, &models, &comparison)?;
    write(&cfg.out_dir.join("comparison.json"), &report.to_json())
}

pub fn segments(cfg: &RunConfig) -> Result<()> {
    let dataset = Dataset::load_dir(&cfg.data_dir)?;
    let window = recent_window(cfg, &dataset);
    let seg = segment_users(dataset.users.iter().map(|u| u.user_id.as_str()), &dataset.events, window);
    let named: BTreeMap<&str, &str> = seg.iter().map(|(u, s)| (u.as_str(), s.name())).collect();
    write(&cfg.out_dir.join("segments.json"), &to_json(&named))
}
