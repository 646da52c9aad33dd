use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auc::roc_auc;
use super::labels::{build_labels, LabelOptions, LabeledPair};
use super::segments::{segment_users, SegmentId};
use crate::data::{Dataset, DayWindow};
use crate::error::{Error, Result};
use crate::features::FeatureSpace;
use crate::hier::{
    em_train, infer_user_fields, user_histories, EmOptions, EmProblem, EmResult, HierParams, Hyperpriors, ModelContext,
    Signal,
};
use crate::models::InteractionModel;
use crate::regression::{fit_map_from, logit, Coefficients, Design};
use crate::schema::FieldVector;

/// Four consecutive windows: learn fields, fit the scoring regression, infer
/// fields for the test period, and score recommendations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalWindows {
    pub train_field: DayWindow,
    pub train_reg: DayWindow,
    pub test_field: DayWindow,
    pub test_rec: DayWindow,
}

impl Default for EvalWindows {
    fn default() -> Self {
        Self {
            train_field: DayWindow::new(0, 9),
            train_reg: DayWindow::new(9, 15),
            test_field: DayWindow::new(15, 25),
            test_rec: DayWindow::new(25, 30),
        }
    }
}

impl EvalWindows {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.train_field, self.train_reg, self.test_field, self.test_rec];
        if ws.iter().any(DayWindow::is_empty) {
            return Err(Error::Config("evaluation windows must be non-empty".into()));
        }
        if ws.windows(2).any(|w| w[0].end > w[1].start) {
            return Err(Error::Config("evaluation windows must be ordered and disjoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub windows: EvalWindows,
    pub hyper: Hyperpriors,
    pub sigma_v: f64,
    pub sigma_a: f64,
    pub em: EmOptions,
    pub labels: LabelOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    /// `None` when the test labels lack a positive or a negative.
    pub overall_auc: Option<f64>,
    pub segments: BTreeMap<String, Option<f64>>,
}

/// `comparison.json`: model name to report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComparisonReport {
    pub models: BTreeMap<String, ModelReport>,
}

impl ComparisonReport {
    pub fn auc(&self, model: &str) -> Option<f64> {
        self.models.get(model).and_then(|r| r.overall_auc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("comparison report: {e}")))
    }
}

/// Everything produced for one model along the way.
#[derive(Debug, Clone)]
pub struct ModelEvaluation {
    pub model: String,
    pub em: EmResult,
    /// Apply regression fit on the regression window.
    pub scoring: Coefficients,
    pub report: ModelReport,
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedAuc) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Learned apply fields per user offset; `None` falls back to the profile.
fn fields_for<'a>(dataset: &'a Dataset, learned: &'a [Option<FieldVector>], user: usize) -> &'a FieldVector {
    learned[user].as_ref().unwrap_or_else(|| dataset.profile(user))
}

fn pair_features(
    dataset: &Dataset,
    features: &FeatureSpace,
    learned: &[Option<FieldVector>],
    pairs: &[LabeledPair],
) -> Vec<(Vec<f64>, i8)> {
    pairs
        .par_iter()
        .map(|p| {
            let u = dataset.user_offset(&p.user_id).expect("labels come from dataset events");
            let j = dataset.job_offset(&p.job_id).expect("labels come from dataset events");
            let x = features.evaluate(fields_for(dataset, learned, u).as_slice(), dataset.job_vector(j).as_slice());
            (x, p.y)
        })
        .collect()
}

fn evaluate_model(
    dataset: &Dataset,
    features: &FeatureSpace,
    model: &dyn InteractionModel,
    cfg: &ComparisonConfig,
    reg_labels: &[LabeledPair],
    test_labels: &[LabeledPair],
    segments: &BTreeMap<String, SegmentId>,
) -> Result<ModelEvaluation> {
    let ctx = ModelContext::new(features, dataset.job_vectors())?;
    let w = &cfg.windows;

    let histories = user_histories(dataset, w.train_field);
    let problem = EmProblem {
        layers: model.layers(),
        dataset,
        histories: &histories,
        hyper: &cfg.hyper,
        ctx,
    };
    let init = HierParams::at_prior(&cfg.hyper, cfg.sigma_v, cfg.sigma_a)?;
    let em = em_train(&problem, init, &cfg.em)?;
    log::info!(
        "{}: EM finished after {} rounds (converged: {})",
        model.name(),
        em.trace.rounds,
        em.trace.converged
    );

    let mut train_fields: Vec<Option<FieldVector>> = vec![None; dataset.users.len()];
    for (h, lat) in histories.iter().zip(&em.latents) {
        train_fields[h.user] = Some(lat.u_a.clone());
    }
    let rows = pair_features(dataset, features, &train_fields, reg_labels);
    let mut design = Design::new(features.dim());
    for (x, y) in &rows {
        design.push(x, *y)?;
    }
    let prior = cfg.hyper.prior(Signal::Apply);
    let scoring = fit_map_from(&design, &prior, &Coefficients::new(prior.mean.clone()), &cfg.em.fit)?.coefficients;

    let test_histories = user_histories(dataset, w.test_field);
    let inferred: Vec<(usize, FieldVector)> = test_histories
        .par_iter()
        .map(|h| {
            let user = &dataset.users[h.user];
            infer_user_fields(
                model.layers(),
                &user.user_id,
                dataset.profile(h.user),
                &h.interactions,
                &em.params,
                ctx,
                &cfg.em.e_step,
            )
            .map(|lat| (h.user, lat.u_a))
        })
        .collect::<Result<_>>()?;
    let mut test_fields: Vec<Option<FieldVector>> = vec![None; dataset.users.len()];
    for (user, u_a) in inferred {
        test_fields[user] = Some(u_a);
    }
    let rows = pair_features(dataset, features, &test_fields, test_labels);
    let scores: Vec<f64> = rows.iter().map(|(x, _)| logit(x, &scoring)).collect();
    let labels: Vec<i8> = rows.iter().map(|(_, y)| *y).collect();

    let overall_auc = undefined_to_none(roc_auc(&scores, &labels))?;
    let mut per_segment = BTreeMap::new();
    for seg in SegmentId::ALL {
        let (s, l): (Vec<f64>, Vec<i8>) = test_labels
            .iter()
            .zip(scores.iter().zip(&labels))
            .filter(|(p, _)| segments.get(&p.user_id) == Some(&seg))
            .map(|(_, (s, l))| (*s, *l))
            .unzip();
        per_segment.insert(seg.name().to_string(), undefined_to_none(roc_auc(&s, &l))?);
    }
    Ok(ModelEvaluation {
        model: model.name().to_string(),
        em,
        scoring,
        report: ModelReport {
            overall_auc,
            segments: per_segment,
        },
    })
}

/// Trains and scores each model on the same label sets.
///
/// Per model: EM on the field window; an apply regression on the regression
/// window's labels over the learned apply fields; field inference on the test
/// field window with the EM coefficients; AUC of the recommendation window's
/// labels, overall and per segment. Users without events in a field window
/// fall back to their profile.
pub fn run_model_comparison(
    dataset: &Dataset,
    features: &FeatureSpace,
    models: &[Arc<dyn InteractionModel>],
    cfg: &ComparisonConfig,
) -> Result<(ComparisonReport, Vec<ModelEvaluation>)> {
    cfg.windows.validate()?;
    cfg.hyper.validate(features.dim())?;
    let w = &cfg.windows;
    let in_window = |win: DayWindow| -> Vec<_> { dataset.events_in(win).cloned().collect() };
    let reg_labels = build_labels(&in_window(w.train_reg), &cfg.labels);
    let test_labels = build_labels(&in_window(w.test_rec), &cfg.labels);
    let segments = segment_users(dataset.users.iter().map(|u| u.user_id.as_str()), &dataset.events, w.test_field);

    let mut report = ComparisonReport::default();
    let mut details = Vec::new();
    for model in models {
        let eval = evaluate_model(dataset, features, model.as_ref(), cfg, &reg_labels, &test_labels, &segments)?;
        log::info!("{}: overall AUC {:?}", eval.model, eval.report.overall_auc);
        report.models.insert(eval.model.clone(), eval.report.clone());
        details.push(eval);
    }
    Ok((report, details))
}
