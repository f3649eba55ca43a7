//! Seeded synthetic workloads for tests, demos, and the CLI `--toy` paths.
//!
//! The separable task hides the answer in the image only: every instance
//! shares one uninformative question, the gold concept's prototype is
//! planted among noise patches, and the gold position is uniform.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{AdapterParams, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{self, Rng};
use crate::types::{ImageRef, QAPair, SourceTag, Split, VQAInstance, VisualFeatureSet};

pub const CONCEPTS: [&str; 8] = ["apple", "boat", "candle", "dog", "guitar", "kite", "lamp", "tree"];
pub const TOY_QUESTION: &str = "what is shown?";

/// A backbone small enough for exhaustive finite-difference checks.
pub fn tiny_config(mode: Mode, seed: u64) -> EncoderConfig {
    EncoderConfig {
        mode,
        layers: 2,
        hidden_dim: 16,
        heads: 2,
        vocab_size: 64,
        max_len: 16,
        seed,
        reduction: 4,
        visual_dim: 8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub instances: usize,
    pub train: usize,
    pub candidates: usize,
    pub patches: usize,
    pub visual_dim: usize,
    /// Std of the noise added to the planted prototype.
    pub signal_noise: f64,
    /// Question shared by every instance.
    pub question: String,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            instances: 200,
            train: 120,
            candidates: 4,
            patches: 3,
            visual_dim: 32,
            signal_noise: 0.1,
            question: TOY_QUESTION.to_string(),
            seed: 7,
        }
    }
}

fn gaussian(r: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(r)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = crate::types::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Unit prototype per concept.
pub fn prototypes(d_v: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed, 0x70_70);
    CONCEPTS.iter().map(|_| unit(gaussian(&mut r, d_v))).collect()
}

/// Train and dev splits of the separable task.
pub fn separable_task(cfg: &ToyTaskConfig) -> Result<(Vec<VQAInstance>, Vec<VQAInstance>)> {
    if cfg.candidates < 2 || cfg.candidates > CONCEPTS.len() || cfg.patches == 0 || cfg.train > cfg.instances {
        return Err(Error::InvalidConfig(format!("unusable toy task {cfg:?}")));
    }
    let protos = prototypes(cfg.visual_dim, cfg.seed);
    let mut r = rng::seeded(cfg.seed, 0x7a5c);
    let mut train = Vec::with_capacity(cfg.train);
    let mut dev = Vec::with_capacity(cfg.instances - cfg.train);
    for i in 0..cfg.instances {
        let picked = sample(&mut r, CONCEPTS.len(), cfg.candidates).into_vec();
        let gold = r.random_range(0..cfg.candidates);
        let concept = picked[gold];
        let slot = r.random_range(0..cfg.patches);
        let mut rows = Vec::with_capacity(cfg.patches);
        for p in 0..cfg.patches {
            if p == slot {
                rows.push(protos[concept].iter().map(|x| x + cfg.signal_noise * r.sample::<f64, _>(StandardNormal)).collect());
            } else {
                rows.push(unit(gaussian(&mut r, cfg.visual_dim)));
            }
        }
        let qa = QAPair::new(
            format!("toy-{i:04}"),
            cfg.question.as_str(),
            picked.iter().map(|&c| CONCEPTS[c].to_string()).collect(),
            gold,
            SourceTag::Synthetic,
        )?;
        let features = VisualFeatureSet::from_rows(cfg.visual_dim, &rows)?;
        let mut inst = VQAInstance::with_image(
            qa,
            ImageRef { id: format!("toy-img-{i:04}"), features: Some(features), embedding: None },
        );
        if i < cfg.train {
            inst.split = Some(Split::Train);
            train.push(inst);
        } else {
            inst.split = Some(Split::Dev);
            dev.push(inst);
        }
    }
    Ok((train, dev))
}

/// Fills every adapter and projection entry with `N(0, std²)`, including the
/// zero-initialized up-projections.
pub fn randomize(params: &mut AdapterParams, std: f64, seed: u64) {
    let mut r = rng::seeded(seed, 0xfd);
    let flat: Vec<f64> = (0..params.flatten().len()).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
    params.set_flat(&flat).expect("length taken from params");
}

/// Random patch matrix with `p` rows.
pub fn random_features(p: usize, d_v: usize, seed: u64) -> VisualFeatureSet {
    let mut r = rng::seeded(seed, 0xfe);
    let m = Mat::randn(p, d_v, 1.0, &mut r);
    VisualFeatureSet::new(d_v, m.data).expect("finite gaussian rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Tokenizer;

    #[test]
    fn concepts_have_distinct_tokens() {
        for vocab in [64, 256] {
            let t = Tokenizer::new(vocab);
            let mut ids: Vec<u32> = CONCEPTS.iter().map(|c| t.token_id(c)).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), CONCEPTS.len(), "vocab {vocab}");
        }
    }

    #[test]
    fn task_shape_and_determinism() {
        let cfg = ToyTaskConfig::default();
        let (a, b) = separable_task(&cfg).unwrap();
        assert_eq!((a.len(), b.len()), (120, 80));
        let (c, _) = separable_task(&cfg).unwrap();
        assert_eq!(a, c);
        let golds: Vec<usize> = a.iter().map(|x| x.qa.gold_index).collect();
        assert!((0..4).all(|g| golds.contains(&g)));
    }
}
