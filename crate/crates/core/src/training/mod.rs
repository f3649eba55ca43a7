//! Adapter training with margin ranking losses.
//!
//! The objective is the sum of the enabled ranking losses on the LM, ITM,
//! and joint scores, averaged over the batch. The LM loss reaches only the
//! LM adapter, the ITM loss only the ITM adapter and the projection, and the
//! joint loss reaches both (or neither under `JointRouting::None`). Frozen
//! backbone weights never receive gradient.

mod loss;

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use loss::{
    batch_loss, gradients, loss_and_gradients, ranking_loss, ranking_loss_grad, InstanceLoss, LossReport,
};

use crate::backend::{AdapterParams, Backbone, FeatureProvider};
use crate::error::{Error, Result};
use crate::inference::{ensemble_predict, score_instances};
use crate::io;
use crate::rng;
use crate::scoring::{ScoreFlags, Scorer};
use crate::types::VQAInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Objectives {
    pub lm: bool,
    pub itm: bool,
    pub joint: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Objectives { lm: true, itm: true, joint: true }
    }
}

impl Objectives {
    pub const NONE: Objectives = Objectives { lm: false, itm: false, joint: false };

    pub fn any(&self) -> bool {
        self.lm || self.itm || self.joint
    }

    /// Scores that must be computed to evaluate the enabled losses.
    pub fn score_flags(&self) -> ScoreFlags {
        ScoreFlags { use_lm: self.lm || self.joint, use_itm: self.itm || self.joint }
    }

    /// Parses a comma list such as `lm,itm` (`all` enables everything).
    pub fn parse(list: &str) -> Result<Self> {
        let mut o = Objectives::NONE;
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "lm" => o.lm = true,
                "itm" => o.itm = true,
                "joint" => o.joint = true,
                "all" => o = Objectives::default(),
                other => return Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
            }
        }
        Ok(o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointRouting {
    #[default]
    Both,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub objectives: Objectives,
    pub seed: u64,
    pub momentum: f64,
    pub joint_routing: JointRouting,
    /// Ensemble weight used for dev accuracy when both scores are available.
    pub dev_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 1.0,
            learning_rate: 1e-5,
            batch_size: 32,
            epochs: 2,
            objectives: Objectives::default(),
            seed: 0,
            momentum: 0.0,
            joint_routing: JointRouting::Both,
            dev_lambda: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.dev_lambda) {
            return bad(format!("dev λ must lie in [0, 1], got {}", self.dev_lambda));
        }
        if !self.objectives.any() {
            return Err(Error::NoObjective);
        }
        Ok(())
    }

    /// λ for dev accuracy: the configured weight, or the endpoint matching
    /// the only score the objectives compute.
    pub fn effective_dev_lambda(&self) -> f64 {
        let f = self.objectives.score_flags();
        match (f.use_lm, f.use_itm) {
            (true, false) => 0.0,
            (false, true) => 1.0,
            _ => self.dev_lambda,
        }
    }
}

/// Gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<AdapterParams>,
}

impl Optimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Optimizer { learning_rate, momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut AdapterParams, grad: &AdapterParams) {
        if self.momentum == 0.0 {
            params.axpy(-self.learning_rate, grad);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| AdapterParams::zeros(grad.shape));
        v.scale(self.momentum);
        v.add_assign(grad);
        params.axpy(-self.learning_rate, v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_lm: f64,
    pub l_itm: f64,
    pub l_joint: f64,
    pub total: f64,
    pub dev_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    pub metrics: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

pub fn dev_accuracy(
    dev: &[VQAInstance],
    backbone: &Backbone,
    features: Option<&FeatureProvider>,
    params: &AdapterParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let scorer = Scorer::new(backbone, params, features);
    let scored = score_instances(dev, &scorer, cfg.objectives.score_flags(), None)?;
    let lambda = cfg.effective_dev_lambda();
    let mut correct = 0;
    for s in &scored {
        correct += usize::from(ensemble_predict(&s.scores, lambda)?.predicted_index == s.gold);
    }
    Ok(correct as f64 / scored.len() as f64)
}

/// Trains `init` on `data` and returns the parameters of the epoch with the
/// best dev accuracy (earliest on ties; the last epoch when `dev` is empty).
///
/// Batches are drawn from a seeded per-epoch shuffle, so two runs with the
/// same inputs and seed produce bitwise-identical parameters.
pub fn train(
    data: &[VQAInstance],
    dev: &[VQAInstance],
    backbone: &Backbone,
    features: Option<&FeatureProvider>,
    init: AdapterParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    init.check_shape(&backbone.adapter_shape())?;
    let mut params = init;
    let mut best: Option<(usize, Option<f64>, AdapterParams)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut opt = Optimizer::new(cfg.learning_rate, cfg.momentum);
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut r = rng::seeded(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut r);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<VQAInstance> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (report, grad) = loss_and_gradients(&batch, backbone, features, &params, cfg)?;
            if !report.total.is_finite() || !grad.is_finite() {
                return Err(Error::NumericalFailure { step });
            }
            opt.step(&mut params, &grad);
            if !params.is_finite() {
                return Err(Error::NumericalFailure { step });
            }
            let w = batch.len() as f64;
            for (s, x) in sums.iter_mut().zip([report.l_lm, report.l_itm, report.l_joint, report.total]) {
                *s += w * x;
            }
            debug!("step {step}: loss {:.6}", report.total);
        }
        let n = data.len() as f64;
        let dev_acc = if dev.is_empty() { None } else { Some(dev_accuracy(dev, backbone, features, &params, cfg)?) };
        let m = EpochMetrics {
            epoch,
            l_lm: sums[0] / n,
            l_itm: sums[1] / n,
            l_joint: sums[2] / n,
            total: sums[3] / n,
            dev_acc,
        };
        info!("epoch {epoch}: loss {:.6} dev_acc {:?}", m.total, m.dev_acc);
        metrics.push(m);
        let better = match &best {
            None => true,
            Some((_, prev, _)) => match (dev_acc, prev) {
                (Some(a), Some(b)) => a > *b,
                _ => true,
            },
        };
        if better {
            best = Some((epoch, dev_acc, params.clone()));
        }
    }
    let (best_epoch, params) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, params),
    };
    Ok(TrainOutcome { params, metrics, best_epoch, steps: step })
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    io::write_jsonl(path, metrics)
}
