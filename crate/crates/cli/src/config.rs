use std::path::{Path, PathBuf};

use hierrec::eval::{EvalWindows, LabelOptions};
use hierrec::hier::{EStepOptions, EmOptions};
use hierrec::models::{APPLY, BASELINE, VIEW, VIEW_APPLY};
use hierrec::regression::FitOptions;
use hierrec::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Settings shared by every subcommand. Loaded from an optional JSON file,
/// then patched by `--key value` flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Holds `schema.json`, `users.jsonl`, `jobs.jsonl`, `events.jsonl`.
    pub data_dir: PathBuf,
    /// Trained models, latents, traces, reports.
    pub out_dir: PathBuf,
    /// Model store and user fields stores.
    pub store_dir: PathBuf,
    /// Simulation spec for `simulate`.
    pub spec: Option<PathBuf>,
    /// Feature config; defaults to `<data_dir>/features.json`, then one cosine per block.
    pub features: Option<PathBuf>,
    pub model: String,
    /// Models compared by `evaluate`.
    pub models: Vec<String>,
    pub prior_variance: f64,
    pub sigma_v: f64,
    pub sigma_a: f64,
    pub update_sigmas: bool,
    pub max_rounds: usize,
    pub tol: f64,
    pub e_step: EStepOptions,
    pub fit: FitOptions,
    /// Days of recent events used by `infer` and `segments`.
    pub window_days: i64,
    /// First day after the recent window; defaults to the day after the last event.
    pub as_of: Option<i64>,
    /// Training window for `train`, all events when unset.
    pub train_start: Option<i64>,
    pub train_end: Option<i64>,
    pub windows: EvalWindows,
    pub seed: Option<u64>,
    pub negatives_per_positive: usize,
    pub threads: usize,
    pub user: Option<String>,
    pub k: usize,
    pub fallback_profile: bool,
    /// Where `recommend` writes its response.
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmOptions::default();
        Self {
            data_dir: "data".into(),
            out_dir: "out".into(),
            store_dir: "store".into(),
            spec: None,
            features: None,
            model: VIEW_APPLY.into(),
            models: [BASELINE, VIEW, APPLY, VIEW_APPLY].map(String::from).to_vec(),
            prior_variance: 1.0,
            sigma_v: 0.5,
            sigma_a: 0.5,
            update_sigmas: em.update_sigmas,
            max_rounds: em.max_rounds,
            tol: em.tol,
            e_step: em.e_step,
            fit: em.fit,
            window_days: 10,
            as_of: None,
            train_start: None,
            train_end: None,
            windows: EvalWindows::default(),
            seed: None,
            negatives_per_positive: LabelOptions::default().random_negatives_per_positive,
            threads: 1,
            user: None,
            k: 10,
            fallback_profile: true,
            output: None,
        }
    }
}

impl RunConfig {
    /// Reads `file` (if any) over the defaults and applies `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            let Value::Object(patch) = patch else {
                return Err(Error::Config(format!("config {} is not a JSON object", path.display())));
            };
            for (k, v) in patch {
                set_path(&mut value, &k, v)?;
            }
        }
        for (k, v) in overrides {
            set_path(&mut value, k, v.clone())?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.prior_variance > 0.0) {
            return bad("prior_variance must be positive");
        }
        if !(self.sigma_v > 0.0 && self.sigma_a > 0.0) {
            return bad("sigma_v and sigma_a must be positive");
        }
        if self.window_days <= 0 {
            return bad("window_days must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        self.windows.validate()
    }

    pub fn em_options(&self) -> EmOptions {
        EmOptions {
            max_rounds: self.max_rounds,
            tol: self.tol,
            update_sigmas: self.update_sigmas,
            e_step: self.e_step,
            fit: self.fit,
        }
    }

    pub fn label_options(&self) -> LabelOptions {
        LabelOptions {
            random_negatives_per_positive: self.negatives_per_positive,
            seed: self.seed.unwrap_or(0),
        }
    }
}

/// Sets a dotted key such as `windows.test_field`. Dashes in key
/// segments count as underscores.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<String> = key.split('.').map(|p| p.replace('-', "_")).collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!("`{key}`: `{}` is not an object", parts[..i].join("."))));
        };
        if !map.contains_key(part) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            map.insert(part.clone(), value);
            return Ok(());
        }
        node = map.get_mut(part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}

/// Turns `--key value` words into override pairs. Values are read as JSON
/// and fall back to plain strings; a flag without a value means `true`.
pub fn parse_overrides(words: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let Some(key) = words[i].strip_prefix("--") else {
            return Err(Error::Config(format!("expected `--key`, found `{}`", words[i])));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), literal(v)));
            i += 1;
            continue;
        }
        match words.get(i + 1) {
            Some(v) if !v.starts_with("--") => {
                out.push((key.to_string(), literal(v)));
                i += 2;
            }
            _ => {
                out.push((key.to_string(), Value::Bool(true)));
                i += 1;
            }
        }
    }
    Ok(out)
}

fn literal(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_patch_defaults() {
        let o = parse_overrides(&words("--threads 4 --fallback-profile false --model M-view --windows.test_rec [25,31]")).unwrap();
        let cfg = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(cfg.threads, 4);
        assert!(!cfg.fallback_profile);
        assert_eq!(cfg.model, "M-view");
        assert_eq!(cfg.windows.test_rec.end, 31);
    }

    #[test]
    fn bare_flag_is_true_and_unknown_keys_fail() {
        let o = parse_overrides(&words("--update-sigmas")).unwrap();
        assert!(RunConfig::resolve(None, &o).unwrap().update_sigmas);
        let o = parse_overrides(&words("--no-such-key 3")).unwrap();
        assert!(matches!(RunConfig::resolve(None, &o), Err(Error::Config(_))));
    }

    #[test]
    fn numeric_strings_stay_numbers_and_ids_stay_strings() {
        let o = parse_overrides(&words("--user u00001 --seed 9")).unwrap();
        let cfg = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(cfg.user.as_deref(), Some("u00001"));
        assert_eq!(cfg.seed, Some(9));
    }
}
