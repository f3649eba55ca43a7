//! Supplying an image for a question.
//!
//! Generation is external: a manifest maps question ids to images whose
//! features were produced offline. Retrieval picks the most similar image
//! from an embedding index, optionally after expanding the question with
//! related concept phrases.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::FeatureProvider;
use crate::error::{Error, Result};
use crate::forge::TextEmbeddings;
use crate::io;
use crate::types::{dot, norm, normalize_text, EmbeddingRecord, EmbeddingVector, ImageRef, VQAInstance};

/// Expansion phrases averaged into a concept-aware query.
pub const MAX_EXPANSIONS: usize = 3;

/// Exact cosine index over image embeddings. Rows are stored as given;
/// norms are kept alongside.
#[derive(Debug, Clone)]
pub struct ImageIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
    built_from: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub row: usize,
    pub similarity: f64,
}

impl ImageIndex {
    pub fn build(records: &[EmbeddingRecord], built_from: impl Into<String>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDataset)?;
        let dim = first.vector.dim();
        let mut seen = HashSet::new();
        let mut data = Vec::with_capacity(records.len() * dim);
        let mut norms = Vec::with_capacity(records.len());
        for r in records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.vector.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.vector.dim() });
            }
            if !r.vector.is_finite() {
                return Err(Error::NonFinite("index row"));
            }
            let n = r.vector.norm();
            if n == 0.0 {
                return Err(Error::ZeroNorm);
            }
            data.extend_from_slice(&r.vector.values);
            norms.push(n);
        }
        Ok(ImageIndex {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            dim,
            data,
            norms,
            built_from: built_from.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn built_from(&self) -> &str {
        &self.built_from
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn similarities(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        let qn = norm(q);
        if qn == 0.0 {
            return Err(Error::ZeroNorm);
        }
        if !qn.is_finite() {
            return Err(Error::NonFinite("query embedding"));
        }
        Ok((0..self.len()).map(|i| dot(q, self.row(i)) / (qn * self.norms[i])).collect())
    }

    /// Top `min(k, N)` rows by cosine, descending; equal similarities go to
    /// the lower row.
    pub fn retrieve(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidConfig("retrieval needs k ≥ 1".into()));
        }
        let sims = self.similarities(&query.values)?;
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        order.truncate(k);
        Ok(order.into_iter().map(|i| Hit { id: self.ids[i].clone(), row: i, similarity: sims[i] }).collect())
    }

    /// Hash of ids and row bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Embedding binary plus id sidecar.
    pub fn save(&self, bin: &Path) -> Result<()> {
        let records: Vec<EmbeddingRecord> = (0..self.len())
            .map(|i| EmbeddingRecord { id: self.ids[i].clone(), vector: EmbeddingVector::new(self.row(i).to_vec()) })
            .collect();
        io::save_records(bin, &io::sidecar_path(bin), &records)
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let records = io::load_records(bin, &io::sidecar_path(bin))?;
        Self::build(&records, bin.display().to_string())
    }
}

/// Term → related concept phrases. Terms match whole-word runs of the
/// normalized question.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptExpander {
    map: BTreeMap<String, Vec<String>>,
}

impl ConceptExpander {
    pub fn insert(&mut self, term: &str, phrase: impl Into<String>) {
        let phrases = self.map.entry(normalize_text(term)).or_default();
        let p = phrase.into();
        if !phrases.contains(&p) {
            phrases.push(p);
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `term<TAB>phrase[<TAB>phrase…]` lines; repeated terms append.
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = ConceptExpander::default();
        for row in io::parse_tsv(text) {
            if row.len() < 2 {
                return Err(Error::Format { what: "concept line", detail: row.join("\t") });
            }
            for p in &row[1..] {
                e.insert(&row[0], p.trim());
            }
        }
        Ok(e)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Phrases for every term found in `question`, ordered by where the term
    /// starts, then by file order; duplicates removed.
    pub fn expansions(&self, question: &str) -> Vec<&str> {
        let norm_q = normalize_text(question);
        let words: Vec<&str> =
            norm_q.split(|c: char| !c.is_alphanumeric() && c != '\'').filter(|w| !w.is_empty()).collect();
        let mut out: Vec<&str> = Vec::new();
        for start in 0..words.len() {
            for (term, phrases) in &self.map {
                let tw: Vec<&str> = term.split_whitespace().collect();
                if !tw.is_empty() && words[start..].starts_with(&tw) {
                    for p in phrases {
                        if !out.contains(&p.as_str()) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Unit-norm mean of the question embedding and up to three expansion
/// embeddings.
pub fn expand_query(question: &str, expander: &ConceptExpander, embed: &TextEmbeddings) -> Result<EmbeddingVector> {
    let q = embed.get(question)?;
    let mut sum = q.values.clone();
    for p in expander.expansions(question).into_iter().take(MAX_EXPANSIONS) {
        let v = embed.get(p)?;
        if v.dim() != sum.len() {
            return Err(Error::DimensionMismatch { expected: sum.len(), got: v.dim() });
        }
        for (s, x) in sum.iter_mut().zip(&v.values) {
            *s += x;
        }
    }
    EmbeddingVector::new(sum).normalized()
}

/// Question id → image id for externally generated images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationManifest {
    map: HashMap<String, String>,
}

impl GenerationManifest {
    pub fn insert(&mut self, question_id: impl Into<String>, image_id: impl Into<String>) {
        self.map.insert(question_id.into(), image_id.into());
    }

    pub fn get(&self, question_id: &str) -> Result<&str> {
        self.map
            .get(question_id)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingEntry { kind: "generation manifest", key: question_id.to_string() })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `question_id<TAB>image_id` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = GenerationManifest::default();
        for row in io::parse_tsv(text) {
            match row.as_slice() {
                [q, i] => m.insert(q.trim(), i.trim()),
                _ => return Err(Error::Format { what: "manifest line", detail: row.join("\t") }),
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Generate,
    Retrieve,
    ConceptRetrieve,
    /// Keep the image already attached to the instance.
    Attached,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate" => Ok(Strategy::Generate),
            "retrieve" => Ok(Strategy::Retrieve),
            "concept_retrieve" | "concept-retrieve" => Ok(Strategy::ConceptRetrieve),
            "attached" => Ok(Strategy::Attached),
            other => Err(Error::InvalidConfig(format!("unknown imagination strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Default)]
pub struct ImagineProviders<'a> {
    pub manifest: Option<&'a GenerationManifest>,
    pub features: Option<&'a FeatureProvider>,
    pub index: Option<&'a ImageIndex>,
    pub embeddings: Option<&'a TextEmbeddings>,
    pub expander: Option<&'a ConceptExpander>,
}

fn need<'a, T>(x: Option<&'a T>, strategy: &'static str) -> Result<&'a T> {
    x.ok_or(Error::UnconfiguredStrategy(strategy))
}

fn retrieved(index: &ImageIndex, query: &EmbeddingVector, features: Option<&FeatureProvider>) -> Result<ImageRef> {
    let hit = index.retrieve(query, 1)?.remove(0);
    let features = match features {
        Some(f) => Some(f.get(&hit.id)?.clone()),
        None => None,
    };
    Ok(ImageRef { id: hit.id, features, embedding: Some(EmbeddingVector::new(index.row(hit.row).to_vec())) })
}

/// Image for one question. Retrieval never consults the manifest.
pub fn imagine(question_id: &str, question: &str, strategy: Strategy, p: &ImagineProviders<'_>) -> Result<ImageRef> {
    match strategy {
        Strategy::Generate => {
            let manifest = need(p.manifest, "generate")?;
            let features = need(p.features, "generate")?;
            let image_id = manifest.get(question_id)?;
            Ok(ImageRef { id: image_id.to_string(), features: Some(features.get(image_id)?.clone()), embedding: None })
        }
        Strategy::Retrieve => {
            let index = need(p.index, "retrieve")?;
            let embed = need(p.embeddings, "retrieve")?;
            retrieved(index, embed.get(question)?, p.features)
        }
        Strategy::ConceptRetrieve => {
            let index = need(p.index, "concept_retrieve")?;
            let embed = need(p.embeddings, "concept_retrieve")?;
            let expander = need(p.expander, "concept_retrieve")?;
            retrieved(index, &expand_query(question, expander, embed)?, p.features)
        }
        Strategy::Attached => Err(Error::UnconfiguredStrategy("attached")),
    }
}

/// Attaches an image to every instance, keyed by the question before any
/// caption prefix. `Attached` checks that an image is already present.
pub fn imagine_instances(
    instances: &[VQAInstance],
    strategy: Strategy,
    p: &ImagineProviders<'_>,
) -> Result<Vec<VQAInstance>> {
    instances
        .par_iter()
        .map(|inst| {
            let mut out = inst.clone();
            match strategy {
                Strategy::Attached => {
                    if inst.image.is_none() {
                        return Err(Error::MissingEntry { kind: "image", key: inst.qa.id.clone() });
                    }
                }
                _ => out.image = Some(imagine(&inst.qa.id, inst.raw_question(), strategy, p)?),
            }
            Ok(out)
        })
        .collect()
}
