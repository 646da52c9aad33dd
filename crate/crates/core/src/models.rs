//! The model variants compared in evaluation, as named strategies.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hier::{Domain, LayerSpec, Parent, Signal, VIEW_APPLY_CHAIN};

pub const BASELINE: &str = "M-baseline";
pub const VIEW: &str = "M-view";
pub const APPLY: &str = "M-apply";
pub const VIEW_APPLY: &str = "M-viewApply";

/// A user-interaction model, defined by the latent layers it learns.
pub trait InteractionModel: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Layers learned on top of the profile vector, root first.
    fn layers(&self) -> &'static [LayerSpec];

    /// Model served for users whose fields fell back to the profile.
    fn fallback_model(&self) -> &'static str {
        BASELINE
    }
}

/// Profile fields only.
#[derive(Debug, Clone, Copy, Default)]
pub struct Baseline;

impl InteractionModel for Baseline {
    fn name(&self) -> &'static str {
        BASELINE
    }
    fn description(&self) -> &'static str {
        "profile-based fields, no learned layers"
    }
    fn layers(&self) -> &'static [LayerSpec] {
        &[]
    }
}

/// View layer only; the apply fields equal the view fields.
#[derive(Debug, Clone, Copy, Default)]
pub struct ViewOnly;

const VIEW_CHAIN: [LayerSpec; 1] = [LayerSpec {
    signal: Signal::View,
    parent: Parent::Profile,
    domain: Domain::AllImpressions,
}];

impl InteractionModel for ViewOnly {
    fn name(&self) -> &'static str {
        VIEW
    }
    fn description(&self) -> &'static str {
        "view layer on the profile"
    }
    fn layers(&self) -> &'static [LayerSpec] {
        &VIEW_CHAIN
    }
}

/// Apply layer chained directly on the profile.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApplyOnly;

const APPLY_CHAIN: [LayerSpec; 1] = [LayerSpec {
    signal: Signal::Apply,
    parent: Parent::Profile,
    domain: Domain::AllImpressions,
}];

impl InteractionModel for ApplyOnly {
    fn name(&self) -> &'static str {
        APPLY
    }
    fn description(&self) -> &'static str {
        "apply layer on the profile"
    }
    fn layers(&self) -> &'static [LayerSpec] {
        &APPLY_CHAIN
    }
}

/// Profile -> view -> apply.
#[derive(Debug, Clone, Copy, Default)]
pub struct ViewApply;

impl InteractionModel for ViewApply {
    fn name(&self) -> &'static str {
        VIEW_APPLY
    }
    fn description(&self) -> &'static str {
        "view layer on the profile, apply layer on the view layer"
    }
    fn layers(&self) -> &'static [LayerSpec] {
        &VIEW_APPLY_CHAIN
    }
}

/// Models by name.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<&'static str, Arc<dyn InteractionModel>>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The four built-in models.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Baseline));
        r.register(Arc::new(ViewOnly));
        r.register(Arc::new(ApplyOnly));
        r.register(Arc::new(ViewApply));
        r
    }

    /// Adds or replaces a model under its name.
    pub fn register(&mut self, model: Arc<dyn InteractionModel>) {
        self.models.insert(model.name(), model);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn InteractionModel>> {
        self.models.get(name).cloned().ok_or_else(|| {
            Error::UnknownModel(format!("{name} (known: {})", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.models.keys().copied().collect()
    }

    /// Models in comparison order: baseline, view, apply, view+apply, then any others by name.
    pub fn comparison_order(&self) -> Vec<Arc<dyn InteractionModel>> {
        let mut out: Vec<_> = [BASELINE, VIEW, APPLY, VIEW_APPLY]
            .iter()
            .filter_map(|n| self.models.get(n).cloned())
            .collect();
        for (name, m) in &self.models {
            if ![BASELINE, VIEW, APPLY, VIEW_APPLY].contains(name) {
                out.push(m.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_registered() {
        let r = ModelRegistry::with_defaults();
        assert_eq!(r.comparison_order().iter().map(|m| m.name()).collect::<Vec<_>>(), [BASELINE, VIEW, APPLY, VIEW_APPLY]);
        assert_eq!(r.get(VIEW_APPLY).unwrap().layers().len(), 2);
        assert!(r.get(BASELINE).unwrap().layers().is_empty());
        assert!(matches!(r.get("M-other"), Err(Error::UnknownModel(_))));
    }
}
