use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{JointRouting, TrainConfig};
use crate::backend::{AdapterParams, Backbone, FeatureProvider};
use crate::error::{Error, Result};
use crate::scoring::{itm_backward, itm_forward, lm_backward, lm_forward, resolve_features, Routing};
use crate::types::{joint, VQAInstance};

/// Margin ranking loss: `(1/n)·Σ_{i≠y} max(0, η − S_y + S_i)`.
pub fn ranking_loss(scores: &[f64], y: usize, margin: f64) -> Result<f64> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::TooFewCandidates(n));
    }
    if y >= n {
        return Err(Error::GoldOutOfRange { gold: y, n });
    }
    let sum: f64 = (0..n).filter(|&i| i != y).map(|i| (margin - scores[y] + scores[i]).max(0.0)).sum();
    Ok(sum / n as f64)
}

/// Subgradient of `ranking_loss` with respect to the scores; 0 at the kink.
pub fn ranking_loss_grad(scores: &[f64], y: usize, margin: f64) -> Vec<f64> {
    let n = scores.len();
    let w = 1.0 / n as f64;
    let mut g = vec![0.0; n];
    for i in (0..n).filter(|&i| i != y) {
        if margin - scores[y] + scores[i] > 0.0 {
            g[i] += w;
            g[y] -= w;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLoss {
    pub id: String,
    pub l_lm: f64,
    pub l_itm: f64,
    pub l_joint: f64,
    pub total: f64,
}

/// Batch-mean losses; disabled components are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_lm: f64,
    pub l_itm: f64,
    pub l_joint: f64,
    pub total: f64,
    pub per_instance: Vec<InstanceLoss>,
}

impl LossReport {
    fn from_instances(per_instance: Vec<InstanceLoss>) -> Self {
        let n = per_instance.len() as f64;
        let mean = |f: fn(&InstanceLoss) -> f64| per_instance.iter().map(f).sum::<f64>() / n;
        LossReport {
            l_lm: mean(|x| x.l_lm),
            l_itm: mean(|x| x.l_itm),
            l_joint: mean(|x| x.l_joint),
            total: mean(|x| x.total),
            per_instance,
        }
    }
}

fn instance_loss(
    inst: &VQAInstance,
    backbone: &Backbone,
    features: Option<&FeatureProvider>,
    params: &AdapterParams,
    cfg: &TrainConfig,
    grad_scale: Option<f64>,
) -> Result<(InstanceLoss, Option<AdapterParams>)> {
    let obj = cfg.objectives;
    let flags = obj.score_flags();
    let y = inst.qa.gold_index;
    let n = inst.qa.candidates.len();
    if n < 2 {
        return Err(Error::TooFewCandidates(n));
    }
    let routing = Routing::default();
    let keep = grad_scale.is_some();
    let v = if flags.use_itm { Some(resolve_features(inst, features)?) } else { None };
    let tokens = crate::scoring::Scorer::new(backbone, params, features).candidate_tokens(inst)?;
    let lm = if flags.use_lm {
        tokens.iter().map(|t| lm_forward(backbone, t, routing.lm, params, keep)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let itm = match &v {
        Some(v) => {
            tokens.iter().map(|t| itm_forward(backbone, t, v, routing.itm, params, keep)).collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    let s_lm: Vec<f64> = lm.iter().map(|e| e.score).collect();
    let s_itm: Vec<f64> = itm.iter().map(|e| e.score).collect();
    let s_joint: Vec<f64> = s_lm.iter().zip(&s_itm).map(|(a, b)| joint(*a, *b)).collect();
    let eta = cfg.margin;
    let l_lm = if obj.lm { ranking_loss(&s_lm, y, eta)? } else { 0.0 };
    let l_itm = if obj.itm { ranking_loss(&s_itm, y, eta)? } else { 0.0 };
    let l_joint = if obj.joint { ranking_loss(&s_joint, y, eta)? } else { 0.0 };
    let loss = InstanceLoss { id: inst.qa.id.clone(), l_lm, l_itm, l_joint, total: l_lm + l_itm + l_joint };
    let Some(scale) = grad_scale else {
        return Ok((loss, None));
    };
    let mut c_lm = vec![0.0; n];
    let mut c_itm = vec![0.0; n];
    if obj.lm {
        c_lm = ranking_loss_grad(&s_lm, y, eta);
    }
    if obj.itm {
        c_itm = ranking_loss_grad(&s_itm, y, eta);
    }
    if obj.joint && cfg.joint_routing == JointRouting::Both {
        for (i, g) in ranking_loss_grad(&s_joint, y, eta).into_iter().enumerate() {
            c_lm[i] += 0.5 * g;
            c_itm[i] += 0.5 * g;
        }
    }
    let mut grad = AdapterParams::zeros(params.shape);
    for (i, e) in lm.iter().enumerate() {
        lm_backward(backbone, e, scale * c_lm[i], routing.lm, params, &mut grad);
    }
    if let Some(v) = &v {
        for (i, e) in itm.iter().enumerate() {
            itm_backward(backbone, e, v, scale * c_itm[i], routing.itm, params, &mut grad);
        }
    }
    Ok((loss, Some(grad)))
}

fn check_batch(batch: &[VQAInstance], cfg: &TrainConfig) -> Result<()> {
    if !cfg.objectives.any() {
        return Err(Error::NoObjective);
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Mean over the batch of the enabled ranking losses on `s_lm`, `s_itm`,
/// and `s_joint`.
pub fn batch_loss(
    batch: &[VQAInstance],
    backbone: &Backbone,
    features: Option<&FeatureProvider>,
    params: &AdapterParams,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    check_batch(batch, cfg)?;
    let per = batch
        .par_iter()
        .map(|inst| instance_loss(inst, backbone, features, params, cfg, None).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::from_instances(per))
}

/// Loss report and `∂L/∂θ` over adapter parameters only.
///
/// Instances are processed in parallel; their gradients are summed
/// sequentially in batch order so the result does not depend on scheduling.
pub fn loss_and_gradients(
    batch: &[VQAInstance],
    backbone: &Backbone,
    features: Option<&FeatureProvider>,
    params: &AdapterParams,
    cfg: &TrainConfig,
) -> Result<(LossReport, AdapterParams)> {
    check_batch(batch, cfg)?;
    params.check_shape(&backbone.adapter_shape())?;
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|inst| instance_loss(inst, backbone, features, params, cfg, Some(scale)))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = AdapterParams::zeros(params.shape);
    let mut per = Vec::with_capacity(parts.len());
    for (l, g) in parts {
        grad.add_assign(&g.expect("gradient requested"));
        per.push(l);
    }
    Ok((LossReport::from_instances(per), grad))
}

pub fn gradients(
    batch: &[VQAInstance],
    backbone: &Backbone,
    features: Option<&FeatureProvider>,
    params: &AdapterParams,
    cfg: &TrainConfig,
) -> Result<AdapterParams> {
    Ok(loss_and_gradients(batch, backbone, features, params, cfg)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(ranking_loss(&[5.0, 1.0], 0, 1.0).unwrap(), 0.0);
        assert!((ranking_loss(&[0.0, 0.0, 0.0], 0, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(ranking_loss(&[1.0], 0, 1.0), Err(Error::TooFewCandidates(1))));
        assert!(ranking_loss(&[1.0, 2.0], 2, 1.0).is_err());
    }

    #[test]
    fn subgradient_is_zero_at_kink() {
        assert_eq!(ranking_loss_grad(&[1.0, 0.0], 0, 1.0), vec![0.0, 0.0]);
        assert_eq!(ranking_loss_grad(&[0.5, 0.0, 0.2], 0, 1.0), vec![-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn subgradient_matches_difference_quotient() {
        let s = [0.3, -0.1, 0.7, 0.2];
        let g = ranking_loss_grad(&s, 1, 0.8);
        for i in 0..4 {
            let h = 1e-6;
            let mut a = s;
            let mut b = s;
            a[i] += h;
            b[i] -= h;
            let fd = (ranking_loss(&a, 1, 0.8).unwrap() - ranking_loss(&b, 1, 0.8).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
