#![allow(dead_code)]

use hierrec::data::{Action, InteractionEvent, JobPosting, UserProfile};
use hierrec::features::{FeatureConfig, FeatureDescriptor, FeatureSpace};
use hierrec::schema::{BlockDef, BlockSchema};

pub fn schema(blocks: &[(&str, &[&str])]) -> BlockSchema {
    BlockSchema::new(
        blocks
            .iter()
            .map(|(name, vocab)| BlockDef {
                name: name.to_string(),
                vocabulary: vocab.iter().map(|t| t.to_string()).collect(),
            })
            .collect(),
    )
    .unwrap()
}

/// One cosine per block, optional raw user block, bias last.
pub fn space(schema: &BlockSchema, user_raw: bool) -> FeatureSpace {
    let cfg = FeatureConfig {
        descriptors: schema.block_names().map(|b| FeatureDescriptor::cosine(b, b)).collect(),
        include_user_raw: user_raw,
        include_job_raw: false,
        include_bias: true,
    };
    FeatureSpace::new(&cfg, schema).unwrap()
}

pub fn terms(blocks: &[&[&str]]) -> Vec<Vec<String>> {
    blocks.iter().map(|b| b.iter().map(|t| t.to_string()).collect()).collect()
}

pub fn user(id: &str, blocks: &[&[&str]]) -> UserProfile {
    UserProfile {
        user_id: id.into(),
        terms: terms(blocks),
    }
}

pub fn job(id: &str, blocks: &[&[&str]]) -> JobPosting {
    JobPosting {
        job_id: id.into(),
        terms: terms(blocks),
    }
}

pub fn event(user: &str, job: &str, action: Action, position: u32, day: i64) -> InteractionEvent {
    InteractionEvent {
        user_id: user.into(),
        job_id: job.into(),
        action,
        position,
        day,
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Maximizer of `f` over `[lo, hi]^2`: a 1e-2 grid, then a 1e-3 grid
/// over the neighbourhood of the best coarse point.
pub fn grid_argmax_2d(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let scan = |x0: f64, x1: f64, y0: f64, y1: f64, step: f64| {
        let nx = ((x1 - x0) / step).round() as i64;
        let ny = ((y1 - y0) / step).round() as i64;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=nx {
            let x = x0 + i as f64 * step;
            for k in 0..=ny {
                let y = y0 + k as f64 * step;
                let v = f(x, y);
                if v > best.0 {
                    best = (v, x, y);
                }
            }
        }
        (best.1, best.2)
    };
    let (cx, cy) = scan(lo, hi, lo, hi, 1e-2);
    scan(cx - 0.02, cx + 0.02, cy - 0.02, cy + 0.02, 1e-3)
}
