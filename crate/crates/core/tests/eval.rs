use std::collections::{BTreeMap, BTreeSet};

use hierrec::data::{events_to_jsonl, Action, DayWindow, Dataset};
use hierrec::eval::{
    build_labels, roc_auc, roc_auc_brute_force, run_model_comparison, segment_users, simulate_dataset, ComparisonConfig,
    ComparisonReport, EvalWindows, LabelOptions, Provenance, SegmentId, SimSpec,
};
use hierrec::features::FeatureSpace;
use hierrec::hier::{EmOptions, Hyperpriors};
use hierrec::models::ModelRegistry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> SimSpec {
    SimSpec {
        num_users: 80,
        num_jobs: 60,
        days: 10,
        seed,
        ..SimSpec::default()
    }
}

#[test]
fn auc_matches_pair_enumeration_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..=1000);
        let levels = rng.random_range(1..=(n / 5).max(1));
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<i8> = (0..n).map(|_| if rng.random_bool(0.3) { 1 } else { -1 }).collect();
        if !labels.contains(&1) || !labels.contains(&-1) {
            continue;
        }
        let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        assert!(n - distinct.len() >= n / 5, "at least 20% tied scores");
        assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc_brute_force(&scores, &labels).unwrap());
        checked += 1;
    }
    assert_eq!(roc_auc(&[0.8, 0.8, 0.3, 0.1], &[1, -1, 1, -1]).unwrap(), 0.625);
}

#[test]
fn labels_respect_positions_and_own_applies() {
    let sim = simulate_dataset(&small_spec(31)).unwrap();
    let events = &sim.dataset.events;
    let mut applied: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut shown: BTreeMap<(&str, i64, &str), u32> = BTreeMap::new();
    let mut deepest: BTreeMap<(&str, i64), u32> = BTreeMap::new();
    for e in events {
        match e.action {
            Action::Impression => {
                let p = shown.entry((&e.user_id, e.day, &e.job_id)).or_insert(e.position);
                *p = (*p).min(e.position);
            }
            Action::View | Action::Apply => {
                let d = deepest.entry((&e.user_id, e.day)).or_insert(0);
                *d = (*d).max(e.position);
                if e.action == Action::Apply {
                    applied.entry(&e.user_id).or_default().insert(&e.job_id);
                }
            }
        }
    }
    let mut random_negatives = 0;
    for seed in 0..1000 {
        let labels = build_labels(events, &LabelOptions { random_negatives_per_positive: 5, seed });
        for p in &labels {
            let own = applied.get(p.user_id.as_str());
            match p.provenance {
                Provenance::ApplyPositive => assert_eq!(p.y, 1),
                Provenance::PositionNegative => {
                    assert_eq!(p.y, -1);
                    let pos = shown[&(p.user_id.as_str(), p.day, p.job_id.as_str())];
                    assert!(pos < deepest[&(p.user_id.as_str(), p.day)]);
                }
                Provenance::RandomNegative => {
                    assert_eq!(p.y, -1);
                    assert!(!own.is_some_and(|s| s.contains(p.job_id.as_str())));
                    random_negatives += 1;
                }
            }
        }
    }
    assert!(random_negatives > 0);
}

#[test]
fn segments_partition_users() {
    let sim = simulate_dataset(&small_spec(32)).unwrap();
    let ds = &sim.dataset;
    for window in [DayWindow::new(0, 3), DayWindow::new(3, 10), DayWindow::new(50, 60)] {
        let seg = segment_users(ds.users.iter().map(|u| u.user_id.as_str()), &ds.events, window);
        assert_eq!(seg.len(), ds.users.len());
        assert!(ds.users.iter().all(|u| seg.contains_key(&u.user_id)));
        let active: BTreeSet<&str> = ds.events_in(window).map(|e| e.user_id.as_str()).collect();
        for (u, s) in &seg {
            if !active.contains(u.as_str()) {
                assert_eq!(*s, SegmentId::ZeroAppZeroView);
            }
        }
    }
}

#[test]
fn simulation_is_identical_across_runs_and_threads() {
    let spec = small_spec(33);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| events_to_jsonl(&simulate_dataset(&spec).unwrap().dataset.events))
    };
    let one = run(1);
    assert_eq!(one, run(1));
    assert_eq!(one, run(4));
    assert_ne!(one, events_to_jsonl(&simulate_dataset(&small_spec(34)).unwrap().dataset.events));
}

fn config(fs: &FeatureSpace, sigma: f64) -> ComparisonConfig {
    ComparisonConfig {
        windows: EvalWindows {
            train_field: DayWindow::new(0, 4),
            train_reg: DayWindow::new(4, 6),
            test_field: DayWindow::new(6, 9),
            test_rec: DayWindow::new(9, 12),
        },
        hyper: Hyperpriors::standard(fs.dim(), 1.0),
        sigma_v: sigma,
        sigma_a: sigma,
        em: EmOptions {
            max_rounds: 10,
            ..EmOptions::default()
        },
        labels: LabelOptions::default(),
    }
}

#[test]
fn without_field_window_events_all_models_agree() {
    let spec = SimSpec {
        days: 12,
        ..small_spec(35)
    };
    let sim = simulate_dataset(&spec).unwrap();
    let fs = FeatureSpace::new(&sim.features, &sim.dataset.schema).unwrap();
    let cfg = config(&fs, 0.5);
    let keep = |d: i64| cfg.windows.train_reg.contains(d) || cfg.windows.test_rec.contains(d);
    let ds = &sim.dataset;
    let events = ds.events.iter().filter(|e| keep(e.day)).cloned().collect();
    let stripped = Dataset::new(ds.schema.clone(), ds.users.clone(), ds.jobs.clone(), events).unwrap();
    let models = ModelRegistry::with_defaults().comparison_order();
    let (report, _) = run_model_comparison(&stripped, &fs, &models, &cfg).unwrap();
    let base = report.models["M-baseline"].clone();
    assert!(base.overall_auc.is_some());
    for m in ["M-view", "M-apply", "M-viewApply"] {
        assert_eq!(report.models[m], base, "{m}");
    }
    assert_eq!(ComparisonReport::from_json(&report.to_json()).unwrap(), report);
}

#[test]
fn degenerate_hierarchy_gives_no_advantage() {
    let spec = SimSpec {
        num_users: 400,
        num_jobs: 200,
        days: 12,
        sigma_v: 1e-8,
        sigma_a: 1e-8,
        seed: 36,
        ..SimSpec::default()
    };
    let sim = simulate_dataset(&spec).unwrap();
    for (lat, user) in sim.truth.latents.iter().zip(0..) {
        let up = sim.dataset.profile(user);
        assert!(lat.u_v.max_abs_diff(up) < 1e-3 && lat.u_a.max_abs_diff(up) < 1e-3);
    }
    let fs = FeatureSpace::new(&sim.features, &sim.dataset.schema).unwrap();
    let models = ModelRegistry::with_defaults().comparison_order();
    let (report, _) = run_model_comparison(&sim.dataset, &fs, &models, &config(&fs, 1e-8)).unwrap();
    let base = report.auc("M-baseline").unwrap();
    for m in ["M-view", "M-apply", "M-viewApply"] {
        let gap = report.auc(m).unwrap() - base;
        assert!(gap < 0.01, "{m}: {gap}");
    }
}
