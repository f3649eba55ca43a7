//! Domain records shared by every stage of the pipeline, plus the two
//! primitive operations everything else leans on: text normalization and
//! cosine similarity.
//!
//! All records serialize to JSON with the field names used here; datasets
//! are stored one [`VQAInstance`] per line.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a QA pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    AbsAT,
    VCR,
    Sherlock,
    Eval,
    Synthetic,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceTag::AbsAT => "AbsAT",
            SourceTag::VCR => "VCR",
            SourceTag::Sherlock => "Sherlock",
            SourceTag::Eval => "Eval",
            SourceTag::Synthetic => "Synthetic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
    pub source_tag: SourceTag,
}

impl QAPair {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        candidates: Vec<String>,
        gold_index: usize,
        source_tag: SourceTag,
    ) -> Result<Self> {
        let qa = QAPair {
            id: id.into(),
            question: question.into(),
            candidates,
            gold_index,
            source_tag,
        };
        qa.validate()?;
        Ok(qa)
    }

    /// Checks candidate count, gold range and pairwise distinctness after
    /// [`normalize_text`].
    pub fn validate(&self) -> Result<()> {
        let n = self.candidates.len();
        if n < 2 {
            return Err(Error::TooFewCandidates(n));
        }
        if self.gold_index >= n {
            return Err(Error::GoldOutOfRange { gold: self.gold_index, n });
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for c in &self.candidates {
            if !seen.insert(normalize_text(c)) {
                return Err(Error::DuplicateCandidates(c.clone()));
            }
        }
        Ok(())
    }

    pub fn gold(&self) -> &str {
        &self.candidates[self.gold_index]
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }
}

/// A QA pair with its (optional) imagined or real image and caption.
///
/// When a caption is attached, `qa.question` holds the effective question
/// (`caption ⊕ separator ⊕ question`) and `original_question` keeps the
/// question as it was before prefixing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQAInstance {
    pub qa: QAPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl VQAInstance {
    pub fn text_only(qa: QAPair) -> Self {
        VQAInstance { qa, image: None, caption: None, original_question: None, split: None }
    }

    pub fn with_image(qa: QAPair, image: ImageRef) -> Self {
        VQAInstance { image: Some(image), ..Self::text_only(qa) }
    }

    pub fn effective_question(&self) -> &str {
        &self.qa.question
    }

    /// The question before any caption prefix.
    pub fn raw_question(&self) -> &str {
        self.original_question.as_deref().unwrap_or(&self.qa.question)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<VisualFeatureSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

impl ImageRef {
    pub fn id_only(id: impl Into<String>) -> Self {
        ImageRef { id: id.into(), features: None, embedding: None }
    }
}

/// `P` patch vectors of dimension `d_v`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatures", into = "RawFeatures")]
pub struct VisualFeatureSet {
    d_v: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawFeatures {
    patches: Vec<Vec<f64>>,
    d_v: usize,
}

impl TryFrom<RawFeatures> for VisualFeatureSet {
    type Error = Error;
    fn try_from(raw: RawFeatures) -> Result<Self> {
        VisualFeatureSet::from_rows(raw.d_v, &raw.patches)
    }
}

impl From<VisualFeatureSet> for RawFeatures {
    fn from(v: VisualFeatureSet) -> Self {
        RawFeatures { patches: v.rows().map(<[f64]>::to_vec).collect(), d_v: v.d_v }
    }
}

impl VisualFeatureSet {
    pub fn new(d_v: usize, data: Vec<f64>) -> Result<Self> {
        if d_v == 0 {
            return Err(Error::ShapeMismatch("d_v must be positive".into()));
        }
        if data.is_empty() || data.len() % d_v != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form P >= 1 rows of width {d_v}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("visual features"));
        }
        Ok(VisualFeatureSet { d_v, data })
    }

    pub fn from_rows(d_v: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != d_v) {
            return Err(Error::DimensionMismatch { expected: d_v, got: bad.len() });
        }
        Self::new(d_v, rows.concat())
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn num_patches(&self) -> usize {
        self.data.len() / self.d_v
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d_v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// Scales to unit norm; errors on a zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(EmbeddingVector::new(self.values.iter().map(|x| x / n).collect()))
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: EmbeddingVector,
}

/// Per-candidate goodness scores; higher is better.
///
/// Disabled components are stored as zeros and flagged absent; the joint
/// score is only defined (and only non-zero) when both parts are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub s_lm: Vec<f64>,
    pub s_itm: Vec<f64>,
    pub s_joint: Vec<f64>,
    pub has_lm: bool,
    pub has_itm: bool,
}

impl ScoreSet {
    pub fn from_parts(s_lm: Option<Vec<f64>>, s_itm: Option<Vec<f64>>) -> Result<Self> {
        let n = match (&s_lm, &s_itm) {
            (Some(a), Some(b)) if a.len() != b.len() => {
                return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() })
            }
            (Some(a), _) => a.len(),
            (None, Some(b)) => b.len(),
            (None, None) => return Err(Error::NoObjective),
        };
        let has_lm = s_lm.is_some();
        let has_itm = s_itm.is_some();
        let s_lm = s_lm.unwrap_or_else(|| vec![0.0; n]);
        let s_itm = s_itm.unwrap_or_else(|| vec![0.0; n]);
        let s_joint = if has_lm && has_itm {
            s_lm.iter().zip(&s_itm).map(|(&a, &b)| joint(a, b)).collect()
        } else {
            vec![0.0; n]
        };
        Ok(ScoreSet { s_lm, s_itm, s_joint, has_lm, has_itm })
    }

    pub fn n(&self) -> usize {
        self.s_lm.len()
    }

    pub fn has_joint(&self) -> bool {
        self.has_lm && self.has_itm
    }
}

/// Mean of text and image goodness.
pub fn joint(s_lm: f64, s_itm: f64) -> f64 {
    0.5 * (s_lm + s_itm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Lowercases, trims, and collapses internal whitespace runs to one space.
pub fn normalize_text(t: &str) -> String {
    t.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(&a.values, &b.values)
}

/// Cosine similarity over raw slices, clamped to [-1, 1].
pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
