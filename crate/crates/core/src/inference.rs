//! Ensemble prediction over candidate scores.
//!
//! Each score vector is turned into a candidate distribution by softmax and
//! the text and image distributions are mixed:
//! `P = (1 − λ)·softmax(S_text) + λ·softmax(S_itm)`.
//! Argmax ties resolve to the lowest index everywhere.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::scoring::{ScoreFlags, Scorer};
use crate::types::{argmax, ScoreSet, VQAInstance};

/// Which score plays the text role in the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextScore {
    #[default]
    Lm,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub lambda: f64,
    pub overrides: BTreeMap<String, f64>,
    pub text_score: TextScore,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { lambda: 0.5, overrides: BTreeMap::new(), text_score: TextScore::Lm }
    }
}

impl EnsembleConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        EnsembleConfig { lambda, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        self.overrides.values().try_for_each(|&l| check_lambda(l))
    }

    pub fn lambda_for(&self, task: Option<&str>) -> f64 {
        task.and_then(|t| self.overrides.get(t)).copied().unwrap_or(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("ensemble weight {lambda} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted_index: usize,
    pub p_lm: Option<Vec<f64>>,
    pub p_itm: Option<Vec<f64>>,
}

pub fn candidate_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::TooFewCandidates(scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate scores"));
    }
    Ok(softmax(scores))
}

fn text_scores(s: &ScoreSet, which: TextScore) -> Option<&[f64]> {
    match which {
        TextScore::Lm => s.has_lm.then_some(s.s_lm.as_slice()),
        TextScore::Joint => s.has_joint().then_some(s.s_joint.as_slice()),
    }
}

pub fn ensemble_predict_with(s: &ScoreSet, lambda: f64, which: TextScore) -> Result<Prediction> {
    check_lambda(lambda)?;
    let p_lm = text_scores(s, which).map(candidate_softmax).transpose()?;
    let p_itm = if s.has_itm { Some(candidate_softmax(&s.s_itm)?) } else { None };
    let probs = match (&p_lm, &p_itm) {
        (Some(a), _) if lambda == 0.0 => a.clone(),
        (_, Some(b)) if lambda == 1.0 => b.clone(),
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect(),
        _ => {
            return Err(Error::InvalidConfig(format!(
                "ensemble weight {lambda} needs both text and image scores"
            )))
        }
    };
    let predicted_index = argmax(&probs);
    Ok(Prediction { probs, predicted_index, p_lm, p_itm })
}

pub fn ensemble_predict(s: &ScoreSet, lambda: f64) -> Result<Prediction> {
    ensemble_predict_with(s, lambda, TextScore::Lm)
}

pub fn ensemble_probs(s: &ScoreSet, lambda: f64) -> Result<Vec<f64>> {
    Ok(ensemble_predict(s, lambda)?.probs)
}

/// A scored instance ready for evaluation; scores are computed once and
/// reused for every λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub gold: usize,
    pub scores: ScoreSet,
}

/// Scores every instance once, in parallel, preserving input order.
pub fn score_instances(
    instances: &[VQAInstance],
    scorer: &Scorer<'_>,
    flags: ScoreFlags,
    task: Option<&str>,
) -> Result<Vec<ScoredInstance>> {
    instances
        .par_iter()
        .map(|inst| {
            Ok(ScoredInstance {
                id: inst.qa.id.clone(),
                task: task.map(str::to_string),
                gold: inst.qa.gold_index,
                scores: scorer.score(inst, flags)?,
            })
        })
        .collect()
}

/// `{0.00, 0.05, …, 1.00}`
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub accuracy: f64,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub best_lambda: f64,
    pub best_accuracy: f64,
    pub curve: Vec<SweepPoint>,
}

fn count_correct(dev: &[ScoredInstance], lambda: f64, which: TextScore) -> Result<usize> {
    let hits = dev
        .par_iter()
        .map(|d| ensemble_predict_with(&d.scores, lambda, which).map(|p| usize::from(p.predicted_index == d.gold)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.into_iter().sum())
}

/// Accuracy at each grid point; the best λ is the smallest one reaching the
/// maximum accuracy.
pub fn sweep_lambda_with(dev: &[ScoredInstance], grid: &[f64], which: TextScore) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty λ grid".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let correct = count_correct(dev, lambda, which)?;
        curve.push(SweepPoint { lambda, accuracy: correct as f64 / dev.len() as f64, correct });
    }
    let mut best = &curve[0];
    for p in &curve[1..] {
        if p.correct > best.correct || (p.correct == best.correct && p.lambda < best.lambda) {
            best = p;
        }
    }
    Ok(Sweep { best_lambda: best.lambda, best_accuracy: best.accuracy, curve })
}

pub fn sweep_lambda(dev: &[ScoredInstance], grid: &[f64]) -> Result<Sweep> {
    sweep_lambda_with(dev, grid, TextScore::Lm)
}

/// One line of the prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub gold: usize,
    pub pred_lm: Option<usize>,
    pub pred_itm: Option<usize>,
    pub pred_ensemble: usize,
    pub lambda: f64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_task: BTreeMap<String, TaskAccuracy>,
    #[serde(skip)]
    pub log: Vec<PredictionRecord>,
}

pub fn evaluate(scored: &[ScoredInstance], cfg: &EnsembleConfig) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    cfg.validate()?;
    let log = scored
        .par_iter()
        .map(|s| {
            let lambda = cfg.lambda_for(s.task.as_deref());
            let p = ensemble_predict_with(&s.scores, lambda, cfg.text_score)?;
            Ok(PredictionRecord {
                id: s.id.clone(),
                task: s.task.clone(),
                gold: s.gold,
                pred_lm: p.p_lm.as_deref().map(argmax),
                pred_itm: p.p_itm.as_deref().map(argmax),
                pred_ensemble: p.predicted_index,
                lambda,
                probs: p.probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_task: BTreeMap<String, TaskAccuracy> = BTreeMap::new();
    let mut correct = 0;
    for r in &log {
        let hit = usize::from(r.pred_ensemble == r.gold);
        correct += hit;
        if let Some(t) = &r.task {
            let e = per_task.entry(t.clone()).or_insert(TaskAccuracy { correct: 0, total: 0, accuracy: 0.0 });
            e.correct += hit;
            e.total += 1;
        }
    }
    for e in per_task.values_mut() {
        e.accuracy = e.correct as f64 / e.total as f64;
    }
    Ok(EvalReport { accuracy: correct as f64 / log.len() as f64, correct, total: log.len(), per_task, log })
}
