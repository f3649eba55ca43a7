//! Post-hoc analyses: image-text relevance, how often the image flips a
//! prediction, and attention-guided patch masking.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::PredictionRecord;
use crate::scoring::ContextualizedVisual;
use crate::types::{cosine_similarity, EmbeddingVector, VisualFeatureSet};

/// Patches erased by default on large patch grids.
pub const DEFAULT_MASK: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    pub mean: f64,
    pub per_pair: Vec<f64>,
}

/// `100·max(0, cos)` per pair and its mean.
pub fn relevance(pairs: &[(EmbeddingVector, EmbeddingVector)]) -> Result<Relevance> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let per_pair = pairs
        .par_iter()
        .map(|(t, i)| Ok(100.0 * cosine_similarity(t, i)?.max(0.0)))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(Relevance { mean, per_pair })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impact {
    pub helpful: usize,
    pub harmful: usize,
    pub both_correct: usize,
    pub both_wrong: usize,
    pub total: usize,
    /// Percentages of `total`.
    pub helpful_pct: f64,
    pub harmful_pct: f64,
}

/// Counts instances where the ensemble fixes (helpful) or breaks (harmful)
/// the LM-only prediction.
pub fn imagination_impact(log: &[PredictionRecord]) -> Result<Impact> {
    if log.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut c = [0usize; 4];
    for r in log {
        let lm = r.pred_lm.ok_or_else(|| Error::MissingField { field: "pred_lm", record: r.id.clone() })?;
        let lm_ok = lm == r.gold;
        let ens_ok = r.pred_ensemble == r.gold;
        c[match (lm_ok, ens_ok) {
            (false, true) => 0,
            (true, false) => 1,
            (true, true) => 2,
            (false, false) => 3,
        }] += 1;
    }
    let pct = |k: usize| 100.0 * k as f64 / log.len() as f64;
    Ok(Impact {
        helpful: c[0],
        harmful: c[1],
        both_correct: c[2],
        both_wrong: c[3],
        total: log.len(),
        helpful_pct: pct(c[0]),
        harmful_pct: pct(c[1]),
    })
}

impl fmt::Display for Impact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instances      {}", self.total)?;
        writeln!(f, "helpful        {:>6.2}%  ({})", self.helpful_pct, self.helpful)?;
        writeln!(f, "harmful        {:>6.2}%  ({})", self.harmful_pct, self.harmful)?;
        writeln!(f, "both correct   {}", self.both_correct)?;
        write!(f, "both wrong     {}", self.both_wrong)
    }
}

/// Patch indices by ascending attention; equal weights keep index order.
pub fn rank_patches(cv: &ContextualizedVisual) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cv.attention.len()).collect();
    idx.sort_by(|&a, &b| cv.attention[a].total_cmp(&cv.attention[b]));
    idx
}

/// 100 patches on grids larger than 100, otherwise half of them.
pub fn default_mask_count(p: usize) -> usize {
    if p > DEFAULT_MASK {
        DEFAULT_MASK
    } else {
        p / 2
    }
}

/// Zeroes the `k` lowest-attention rows of `v`.
pub fn mask_lowest(v: &VisualFeatureSet, cv: &ContextualizedVisual, k: usize) -> Result<VisualFeatureSet> {
    let p = v.num_patches();
    if cv.attention.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: cv.attention.len() });
    }
    if k > p {
        return Err(Error::InvalidConfig(format!("cannot mask {k} of {p} patches")));
    }
    let d = v.d_v();
    let mut data = v.as_slice().to_vec();
    for &i in &rank_patches(cv)[..k] {
        data[i * d..(i + 1) * d].fill(0.0);
    }
    VisualFeatureSet::new(d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec())
    }

    fn cv(w: &[f64]) -> ContextualizedVisual {
        ContextualizedVisual { attention: w.to_vec(), context: vec![] }
    }

    #[test]
    fn relevance_examples() {
        assert!((relevance(&[(ev(&[1.0, 2.0]), ev(&[1.0, 2.0]))]).unwrap().mean - 100.0).abs() < 1e-12);
        assert_eq!(relevance(&[(ev(&[1.0, 0.0]), ev(&[0.0, 1.0]))]).unwrap().mean, 0.0);
        assert_eq!(relevance(&[(ev(&[1.0, 0.0]), ev(&[-1.0, 0.0]))]).unwrap().mean, 0.0);
        let s = |c: f64| (ev(&[1.0, 0.0]), ev(&[c, (1.0 - c * c).sqrt()]));
        let r = relevance(&[s(0.3), s(0.5)]).unwrap();
        assert!((r.mean - 40.0).abs() < 1e-12);
        assert!(relevance(&[]).is_err());
        assert!(relevance(&[(ev(&[1.0]), ev(&[1.0, 0.0]))]).is_err());
    }

    fn rec(gold: usize, lm: Option<usize>, ens: usize) -> PredictionRecord {
        PredictionRecord {
            id: "r".into(),
            task: None,
            gold,
            pred_lm: lm,
            pred_itm: None,
            pred_ensemble: ens,
            lambda: 0.5,
            probs: vec![],
        }
    }

    #[test]
    fn impact_counts() {
        let same: Vec<_> = (0..10).map(|i| rec(0, Some(i % 2), i % 2)).collect();
        let i = imagination_impact(&same).unwrap();
        assert_eq!((i.helpful_pct, i.harmful_pct), (0.0, 0.0));
        let mut flip = same.clone();
        flip[1] = rec(0, Some(1), 0);
        let i = imagination_impact(&flip).unwrap();
        assert_eq!((i.helpful_pct, i.harmful_pct), (10.0, 0.0));
        assert_eq!(i.helpful + i.harmful + i.both_correct + i.both_wrong, i.total);
        assert!(matches!(imagination_impact(&[rec(0, None, 0)]), Err(Error::MissingField { field: "pred_lm", .. })));
    }

    #[test]
    fn ranking_and_masking() {
        assert_eq!(rank_patches(&cv(&[0.25; 4])), vec![0, 1, 2, 3]);
        assert_eq!(rank_patches(&cv(&[0.1, 0.7, 0.2])), vec![0, 2, 1]);
        let v = VisualFeatureSet::new(2, (1..=8).map(f64::from).collect()).unwrap();
        let w = cv(&[0.4, 0.1, 0.3, 0.2]);
        let m = mask_lowest(&v, &w, 2).unwrap();
        assert_eq!(m.as_slice(), [1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0]);
        assert_eq!(mask_lowest(&v, &w, 0).unwrap(), v);
        assert!(mask_lowest(&v, &w, 4).unwrap().as_slice().iter().all(|&x| x == 0.0));
        assert!(mask_lowest(&v, &w, 5).is_err());
        assert_eq!((default_mask_count(576), default_mask_count(100), default_mask_count(7)), (100, 50, 3));
    }
}
