use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Action, InteractionEvent};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Provenance {
    ApplyPositive,
    PositionNegative,
    RandomNegative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub user_id: String,
    pub job_id: String,
    pub day: i64,
    pub y: i8,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelOptions {
    pub random_negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            random_negatives_per_positive: 5,
            seed: 0,
        }
    }
}

#[derive(Default)]
struct UserDay<'a> {
    /// Impressed jobs with their smallest position.
    shown: BTreeMap<&'a str, u32>,
    interacted: BTreeSet<&'a str>,
    applied: BTreeSet<&'a str>,
    /// Positions carried by view and apply events.
    positions: Vec<u32>,
}

/// Apply-prediction examples for every `(user, day)` with a view or apply.
///
/// Applies are positives. Non-applied jobs impressed above the deepest
/// interacted position are position negatives. Each day with `p` positives
/// also draws up to `p * random_negatives_per_positive` random negatives,
/// without replacement, from the jobs anyone applied to that day, excluding
/// every job this user applied to and jobs already labeled for the day.
/// Output is sorted by user, day, then provenance and job.
pub fn build_labels(events: &[InteractionEvent], opts: &LabelOptions) -> Vec<LabeledPair> {
    let mut days: BTreeMap<(&str, i64), UserDay> = BTreeMap::new();
    let mut applied_on: BTreeMap<i64, BTreeSet<&str>> = BTreeMap::new();
    let mut applied_by: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in events {
        let d = days.entry((e.user_id.as_str(), e.day)).or_default();
        match e.action {
            Action::Impression => {
                let p = d.shown.entry(e.job_id.as_str()).or_insert(e.position);
                *p = (*p).min(e.position);
            }
            Action::View | Action::Apply => {
                d.interacted.insert(&e.job_id);
                if e.position > 0 {
                    d.positions.push(e.position);
                }
                if e.action == Action::Apply {
                    d.applied.insert(&e.job_id);
                    applied_on.entry(e.day).or_default().insert(&e.job_id);
                    applied_by.entry(&e.user_id).or_default().insert(&e.job_id);
                }
            }
        }
    }

    let mut rng = substream(opts.seed, "labels/random-negatives");
    let mut out = Vec::new();
    for ((user, day), d) in &days {
        if d.interacted.is_empty() {
            continue;
        }
        // Interactions without a recorded position take their impression's.
        let deepest = d
            .positions
            .iter()
            .copied()
            .chain(d.interacted.iter().filter_map(|j| d.shown.get(j).copied()))
            .max()
            .unwrap_or(0);
        let pair = |job: &str, y, provenance| LabeledPair {
            user_id: user.to_string(),
            job_id: job.to_string(),
            day: *day,
            y,
            provenance,
        };
        let mut labeled: BTreeSet<&str> = BTreeSet::new();
        for job in &d.applied {
            out.push(pair(job, 1, Provenance::ApplyPositive));
            labeled.insert(job);
        }
        for (job, pos) in &d.shown {
            if *pos < deepest && !d.applied.contains(job) {
                out.push(pair(job, -1, Provenance::PositionNegative));
                labeled.insert(job);
            }
        }
        let wanted = d.applied.len() * opts.random_negatives_per_positive;
        if wanted == 0 {
            continue;
        }
        let own = &applied_by[user];
        let pool: Vec<&str> = applied_on[day]
            .iter()
            .copied()
            .filter(|j| !own.contains(j) && !labeled.contains(j))
            .collect();
        let mut drawn: Vec<&str> = pool.choose_multiple(&mut rng, wanted.min(pool.len())).copied().collect();
        drawn.sort_unstable();
        for job in drawn {
            out.push(pair(job, -1, Provenance::RandomNegative));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, job: &str, action: Action, position: u32, day: i64) -> InteractionEvent {
        InteractionEvent {
            user_id: user.into(),
            job_id: job.into(),
            action,
            position,
            day,
        }
    }

    #[test]
    fn apply_at_position_three() {
        let mut events: Vec<_> = (1..=5).map(|p| ev("u", &format!("j{p}"), Action::Impression, p, 0)).collect();
        events.push(ev("u", "j3", Action::View, 3, 0));
        events.push(ev("u", "j3", Action::Apply, 3, 0));
        let labels = build_labels(&events, &LabelOptions::default());
        let got: Vec<(&str, Provenance)> = labels.iter().map(|l| (l.job_id.as_str(), l.provenance)).collect();
        assert_eq!(
            got,
            [
                ("j3", Provenance::ApplyPositive),
                ("j1", Provenance::PositionNegative),
                ("j2", Provenance::PositionNegative),
            ]
        );
    }

    #[test]
    fn impression_only_days_contribute_nothing() {
        let events = vec![ev("u", "j1", Action::Impression, 1, 0), ev("u", "j2", Action::Impression, 2, 0)];
        assert!(build_labels(&events, &LabelOptions::default()).is_empty());
    }

    #[test]
    fn random_negatives_come_from_the_days_applied_jobs() {
        let mut events = vec![ev("u", "a", Action::Apply, 1, 3), ev("u", "b", Action::Apply, 0, 7)];
        for (i, j) in ["x", "y", "z", "b"].iter().enumerate() {
            events.push(ev(&format!("o{i}"), j, Action::Apply, 1, 3));
        }
        for seed in 0..50 {
            let labels = build_labels(
                &events,
                &LabelOptions {
                    random_negatives_per_positive: 2,
                    seed,
                },
            );
            let negs: Vec<_> = labels
                .iter()
                .filter(|l| l.user_id == "u" && l.provenance == Provenance::RandomNegative)
                .collect();
            assert_eq!(negs.len(), 2);
            for n in negs {
                assert_eq!(n.day, 3);
                assert!(["x", "y", "z"].contains(&n.job_id.as_str()));
            }
        }
    }
}
