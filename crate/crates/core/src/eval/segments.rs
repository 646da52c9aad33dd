use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Action, DayWindow, InteractionEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentId {
    HighAppHighApv,
    HighAppLowApv,
    ZeroAppHighView,
    ZeroAppLowView,
    ZeroAppZeroView,
}

impl SegmentId {
    pub const ALL: [SegmentId; 5] = [
        SegmentId::HighAppHighApv,
        SegmentId::HighAppLowApv,
        SegmentId::ZeroAppHighView,
        SegmentId::ZeroAppLowView,
        SegmentId::ZeroAppZeroView,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SegmentId::HighAppHighApv => "high_app_high_apv",
            SegmentId::HighAppLowApv => "high_app_low_apv",
            SegmentId::ZeroAppHighView => "zero_app_high_view",
            SegmentId::ZeroAppLowView => "zero_app_low_view",
            SegmentId::ZeroAppZeroView => "zero_app_zero_view",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivityCounts {
    pub impressions: u64,
    pub views: u64,
    pub applies: u64,
}

/// 75th-percentile cut of a non-empty sample: the value at zero-based rank
/// `floor(0.75 n)` in ascending order.
fn p75(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (0.75 * values.len() as f64).floor() as usize;
    values[rank.min(values.len() - 1)]
}

/// Assigns every user in `users` exactly one segment from their events in `window`.
///
/// Zero-apply users with views split on view count, appliers split on
/// applies per view (infinite with zero views). A user is high when at or
/// above the group's 75th-percentile cut.
pub fn segment_users<'a>(
    users: impl IntoIterator<Item = &'a str>,
    events: &[InteractionEvent],
    window: DayWindow,
) -> BTreeMap<String, SegmentId> {
    let mut counts: BTreeMap<String, ActivityCounts> =
        users.into_iter().map(|u| (u.to_string(), ActivityCounts::default())).collect();
    for e in events.iter().filter(|e| window.contains(e.day)) {
        let c = counts.entry(e.user_id.clone()).or_default();
        match e.action {
            Action::Impression => c.impressions += 1,
            Action::View => c.views += 1,
            Action::Apply => c.applies += 1,
        }
    }
    let apv = |c: &ActivityCounts| {
        if c.views == 0 {
            f64::INFINITY
        } else {
            c.applies as f64 / c.views as f64
        }
    };
    let mut viewer_stats: Vec<f64> = counts
        .values()
        .filter(|c| c.applies == 0 && c.views > 0)
        .map(|c| c.views as f64)
        .collect();
    let mut applier_stats: Vec<f64> = counts.values().filter(|c| c.applies > 0).map(apv).collect();
    let view_cut = (!viewer_stats.is_empty()).then(|| p75(&mut viewer_stats));
    let apv_cut = (!applier_stats.is_empty()).then(|| p75(&mut applier_stats));
    let high = |v: f64, cut: Option<f64>| cut.is_some_and(|c| v >= c);

    counts
        .into_iter()
        .map(|(user, c)| {
            let seg = if c.applies > 0 {
                if high(apv(&c), apv_cut) {
                    SegmentId::HighAppHighApv
                } else {
                    SegmentId::HighAppLowApv
                }
            } else if c.views > 0 {
                if high(c.views as f64, view_cut) {
                    SegmentId::ZeroAppHighView
                } else {
                    SegmentId::ZeroAppLowView
                }
            } else {
                SegmentId::ZeroAppZeroView
            };
            (user, seg)
        })
        .collect()
}
