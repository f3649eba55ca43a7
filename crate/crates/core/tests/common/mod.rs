#![allow(dead_code)]

use vimag_core::backend::{AdapterParams, Backbone};
use vimag_core::scoring::{ScoreFlags, Scorer};
use vimag_core::toy::random_features;
use vimag_core::training::{batch_loss, gradients, TrainConfig};
use vimag_core::types::{ImageRef, QAPair, SourceTag, VQAInstance};

pub const FD_STEP: f64 = 1e-5;

/// Three candidates over random patches; gold index varies with `seed`.
pub fn instance(seed: u64, d_v: usize) -> VQAInstance {
    let qa = QAPair::new(
        format!("g{seed}"),
        "why is the man smiling?",
        vec!["he won".into(), "it rains today".into(), "a dog barks".into()],
        (seed % 3) as usize,
        SourceTag::Synthetic,
    )
    .unwrap();
    let features = random_features(3, d_v, seed);
    VQAInstance::with_image(qa, ImageRef { id: format!("i{seed}"), features: Some(features), embedding: None })
}

/// Margin exceeding every score gap by 1, so all hinges are active and the
/// loss is smooth around `p`.
pub fn smooth_margin(b: &Backbone, p: &AdapterParams, batch: &[VQAInstance]) -> f64 {
    let mut gap: f64 = 0.0;
    for inst in batch {
        let s = Scorer::new(b, p, None).score(inst, ScoreFlags::default()).unwrap();
        let y = inst.qa.gold_index;
        for v in [&s.s_lm, &s.s_itm, &s.s_joint] {
            for x in v.iter() {
                gap = gap.max(v[y] - x);
            }
        }
    }
    gap + 1.0
}

pub struct FdReport {
    pub worst_rel: f64,
    pub checked: usize,
    pub coords: usize,
}

/// Central differences over every adapter coordinate. Coordinates where
/// both gradients are below 1e-8 are skipped.
pub fn fd_check(b: &Backbone, p: &AdapterParams, batch: &[VQAInstance], cfg: &TrainConfig) -> FdReport {
    let g = gradients(batch, b, None, p, cfg).unwrap().flatten();
    let base = p.flatten();
    let mut q = p.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..base.len() {
        let mut x = base.clone();
        x[k] += FD_STEP;
        q.set_flat(&x).unwrap();
        let plus = batch_loss(batch, b, None, &q, cfg).unwrap().total;
        x[k] -= 2.0 * FD_STEP;
        q.set_flat(&x).unwrap();
        let minus = batch_loss(batch, b, None, &q, cfg).unwrap().total;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let scale = g[k].abs().max(numeric.abs());
        if scale > 1e-8 {
            worst = worst.max((g[k] - numeric).abs() / scale);
            checked += 1;
        }
    }
    FdReport { worst_rel: worst, checked, coords: base.len() }
}
