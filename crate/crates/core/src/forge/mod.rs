//! Synthetic visual QA construction.
//!
//! Three record kinds feed the pipeline:
//!
//! * knowledge triples, templated into questions whose gold answer is the
//!   tail and whose distractors are other tails;
//! * VCR-style records that already carry a question, answers, and a label;
//! * Sherlock-style `(clue, inference, image)` records, turned into a
//!   question about the clue with other inferences as distractors.
//!
//! Stage order: template → standardize names → dedupe → distractors →
//! captions → plausibility filter. Every random choice draws from an RNG
//! seeded by `(seed, source, record index)`, so the output does not depend
//! on scheduling.

mod providers;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use providers::{Captions, PlausibilityScores, TextEmbeddings};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{self, Rng};
use crate::types::{
    cosine_similarity, normalize_text, EmbeddingVector, ImageRef, KnowledgeTriple, QAPair, SourceTag, Split,
    VQAInstance,
};

/// Band widening step on each side.
pub const BAND_STEP: f64 = 0.05;

/// Relation symbol → question template; `{head}` is replaced by the triple
/// head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateTable {
    map: BTreeMap<String, String>,
}

impl Default for TemplateTable {
    /// `xWant` is the attested wording; the other entries are editable
    /// placeholders in the same style.
    fn default() -> Self {
        let entries = [
            ("xWant", "{head}. As a result, PersonX wanted to"),
            ("xNeed", "{head}. Before that, PersonX needed to"),
            ("xIntent", "{head}. PersonX did this because PersonX wanted to"),
            ("xEffect", "{head}. As a result, PersonX"),
            ("xReact", "{head}. As a result, PersonX felt"),
            ("xAttr", "{head}. PersonX is seen as"),
            ("oWant", "{head}. As a result, others wanted to"),
            ("oEffect", "{head}. As a result, others"),
            ("oReact", "{head}. As a result, others felt"),
        ];
        TemplateTable { map: entries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl TemplateTable {
    pub fn empty() -> Self {
        TemplateTable { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, relation: impl Into<String>, template: impl Into<String>) {
        self.map.insert(relation.into(), template.into());
    }

    pub fn get(&self, relation: &str) -> Result<&str> {
        self.map.get(relation).map(String::as_str).ok_or_else(|| Error::MissingTemplate(relation.to_string()))
    }

    pub fn render(&self, head: &str, relation: &str) -> Result<String> {
        Ok(self.get(relation)?.replace("{head}", head.trim()))
    }

    /// `relation<TAB>template` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = TemplateTable::empty();
        for row in io::parse_tsv(text) {
            match row.as_slice() {
                [rel, tpl] => t.insert(rel.trim(), tpl.as_str()),
                _ => return Err(Error::Format { what: "template line", detail: row.join("\t") }),
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    #[default]
    Global,
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub band_low: f64,
    pub band_high: f64,
    pub plausibility_threshold: f64,
    pub n_distractors: usize,
    pub seed: u64,
    pub caption_separator: String,
    pub sherlock_prefix: String,
    pub sherlock_pool: PoolScope,
    /// Sources whose questions get a caption prefix when captions are given.
    pub caption_sources: Vec<SourceTag>,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            band_low: 0.4,
            band_high: 0.7,
            plausibility_threshold: 0.5,
            n_distractors: 2,
            seed: 0,
            caption_separator: ". ".into(),
            sherlock_prefix: "What can be inferred? ".into(),
            sherlock_pool: PoolScope::Global,
            caption_sources: vec![SourceTag::VCR],
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.band_low && self.band_low < self.band_high && self.band_high <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "similarity band [{}, {}] must satisfy 0 ≤ low < high ≤ 1",
                self.band_low, self.band_high
            )));
        }
        if !(0.0..=1.0).contains(&self.plausibility_threshold) {
            return Err(Error::InvalidConfig(format!(
                "plausibility threshold {} outside [0, 1]",
                self.plausibility_threshold
            )));
        }
        if self.n_distractors == 0 {
            return Err(Error::InvalidConfig("need at least one distractor".into()));
        }
        Ok(())
    }

    /// Band after `k` widening steps, clamped to `[0, 1]`.
    pub fn band(&self, k: usize) -> (f64, f64) {
        let w = k as f64 * BAND_STEP;
        let snap = |x: f64| (x * 1e12).round() / 1e12;
        (snap(self.band_low - w).max(0.0), snap(self.band_high + w).min(1.0))
    }
}

/// Replaces each `Person[A-Z]` placeholder standing as a whole word by
/// `Person`.
pub fn standardize_names(q: &str) -> String {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let chars: Vec<char> = q.chars().collect();
    let mut out = String::with_capacity(q.len());
    let mut i = 0;
    while i < chars.len() {
        let at_boundary = i == 0 || !is_word(chars[i - 1]);
        if at_boundary
            && chars[i..].starts_with(&['P', 'e', 'r', 's', 'o', 'n'])
            && chars.get(i + 6).is_some_and(|c| c.is_ascii_uppercase())
            && chars.get(i + 7).is_none_or(|&c| !is_word(c))
        {
            out.push_str("Person");
            i += 7;
            continue;
        }
        out.push(chars[i]);
        i += 1;
    }
    out
}

fn dedupe_by<T>(items: Vec<T>, key: impl Fn(&T) -> String) -> Vec<T> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|x| seen.insert(key(x))).collect()
}

/// Keeps the first pair per normalized question, in input order.
pub fn dedupe(pairs: Vec<QAPair>) -> Vec<QAPair> {
    dedupe_by(pairs, |p| normalize_text(&p.question))
}

/// Candidate distractors with their sentence embeddings, unique by
/// normalized text, in first-seen order.
#[derive(Debug, Clone)]
pub struct DistractorPool {
    items: Vec<(String, EmbeddingVector)>,
}

impl DistractorPool {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, embed: &TextEmbeddings) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut items = Vec::new();
        for t in texts {
            if seen.insert(normalize_text(t)) {
                items.push((t.to_string(), embed.get(t)?.clone()));
            }
        }
        Ok(DistractorPool { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Draws `cfg.n_distractors` items whose similarity to `gold` lies in the
    /// band, widening it when too few qualify.
    pub fn sample(&self, gold: &str, embed: &TextEmbeddings, cfg: &ForgeConfig, rng: &mut Rng) -> Result<DistractorDraw> {
        let g = embed.get(gold)?;
        let gold_key = normalize_text(gold);
        let mut sims = Vec::with_capacity(self.items.len());
        for (text, v) in &self.items {
            if normalize_text(text) != gold_key {
                sims.push((text.as_str(), cosine_similarity(g, v)?));
            }
        }
        let need = cfg.n_distractors;
        let mut k = 0;
        loop {
            let (low, high) = cfg.band(k);
            let eligible: Vec<usize> = (0..sims.len()).filter(|&i| low <= sims[i].1 && sims[i].1 <= high).collect();
            if eligible.len() >= need {
                let mut chosen: Vec<usize> = sample(rng, eligible.len(), need).into_iter().map(|j| eligible[j]).collect();
                chosen.sort_unstable();
                return Ok(DistractorDraw {
                    texts: chosen.iter().map(|&i| sims[i].0.to_string()).collect(),
                    similarities: chosen.iter().map(|&i| sims[i].1).collect(),
                    band: (low, high),
                    widenings: k,
                });
            }
            if low <= 0.0 && high >= 1.0 {
                return Err(Error::PoolExhausted { gold: gold.to_string(), eligible: eligible.len(), needed: need });
            }
            k += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistractorDraw {
    pub texts: Vec<String>,
    pub similarities: Vec<f64>,
    /// Final band the draw was taken from.
    pub band: (f64, f64),
    pub widenings: usize,
}

pub fn sample_distractors(
    gold: &str,
    pool: &[String],
    embed: &TextEmbeddings,
    cfg: &ForgeConfig,
    rng: &mut Rng,
) -> Result<DistractorDraw> {
    DistractorPool::build(pool.iter().map(String::as_str), embed)?.sample(gold, embed, cfg, rng)
}

/// Inserts `gold` among `distractors` at a uniformly drawn position.
fn assemble(
    id: String,
    question: String,
    gold: &str,
    distractors: Vec<String>,
    tag: SourceTag,
    rng: &mut Rng,
) -> Result<QAPair> {
    let gold_index = rng.random_range(0..=distractors.len());
    let mut candidates = distractors;
    candidates.insert(gold_index, gold.to_string());
    QAPair::new(id, question, candidates, gold_index, tag)
}

/// Templates a triple into a QA pair whose gold answer is the tail.
pub fn triple_to_qa(
    id: &str,
    triple: &KnowledgeTriple,
    templates: &TemplateTable,
    pool: &DistractorPool,
    embed: &TextEmbeddings,
    cfg: &ForgeConfig,
    rng: &mut Rng,
) -> Result<(QAPair, DistractorDraw)> {
    let question = templates.render(&triple.head, &triple.relation)?;
    let draw = pool.sample(&triple.tail, embed, cfg, rng)?;
    let qa = assemble(id.to_string(), question, &triple.tail, draw.texts.clone(), SourceTag::AbsAT, rng)?;
    Ok((qa, draw))
}

/// Prefixes the image caption to the question and records the original.
/// An empty caption marks the instance as captioned without changing the
/// question.
pub fn attach_caption(inst: &VQAInstance, captions: &Captions, cfg: &ForgeConfig) -> Result<VQAInstance> {
    if inst.original_question.is_some() {
        return Err(Error::CaptionAlreadyAttached(inst.qa.id.clone()));
    }
    let image = inst.image.as_ref().ok_or_else(|| Error::MissingEntry { kind: "image", key: inst.qa.id.clone() })?;
    let caption = captions.get(&image.id)?.trim();
    let mut out = inst.clone();
    out.original_question = Some(inst.qa.question.clone());
    out.caption = Some(caption.to_string());
    if !caption.is_empty() {
        out.qa.question = format!("{caption}{}{}", cfg.caption_separator, inst.qa.question);
    }
    Ok(out)
}

/// Splits into `(kept, removed)` by the plausibility of the raw question
/// with its gold answer; a score equal to the threshold is kept.
pub fn filter_plausible(
    instances: Vec<VQAInstance>,
    prov: &PlausibilityScores,
    cfg: &ForgeConfig,
) -> Result<(Vec<VQAInstance>, Vec<VQAInstance>)> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for inst in instances {
        if prov.get(inst.raw_question(), inst.qa.gold())? >= cfg.plausibility_threshold {
            kept.push(inst);
        } else {
            removed.push(inst);
        }
    }
    Ok((kept, removed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcrRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub label: usize,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SherlockRecord {
    pub id: String,
    pub clue: String,
    pub inference: String,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default)]
pub struct ForgeSources {
    pub triples: Vec<TripleRecord>,
    pub vcr: Vec<VcrRecord>,
    pub sherlock: Vec<SherlockRecord>,
}

impl ForgeSources {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty() && self.vcr.is_empty() && self.sherlock.is_empty()
    }
}

#[derive(Clone, Copy)]
pub struct ForgeProviders<'a> {
    pub templates: &'a TemplateTable,
    pub embeddings: Option<&'a TextEmbeddings>,
    /// Enables plausibility filtering when present.
    pub plausibility: Option<&'a PlausibilityScores>,
    /// Enables caption prefixing when present.
    pub captions: Option<&'a Captions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub label: String,
    pub train: usize,
    pub dev: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: Vec<StatsRow>,
    pub duplicates_removed: usize,
    pub qa_pre_filter: usize,
    pub implausible_removed: usize,
    /// Draws that needed a widened band, and the total number of steps.
    pub widened_draws: usize,
    pub widening_steps: usize,
}

impl StatsReport {
    fn rows_for(instances: &[VQAInstance]) -> Vec<StatsRow> {
        let sources = [
            (SourceTag::AbsAT, "Images generated from AbsAT", "QA pairs from AbsAT"),
            (SourceTag::VCR, "Images from VCR", "QA pairs from VCR"),
            (SourceTag::Sherlock, "Images from Sherlock", "QA pairs from Sherlock"),
        ];
        let mut rows = Vec::new();
        let mut img_tot = [0usize; 2];
        let mut qa_tot = [0usize; 2];
        for (tag, img_label, qa_label) in sources {
            let mut images = [HashSet::new(), HashSet::new()];
            let mut qa = [0usize; 2];
            for inst in instances.iter().filter(|i| i.qa.source_tag == tag) {
                let s = usize::from(inst.split == Some(Split::Dev));
                qa[s] += 1;
                if let Some(img) = &inst.image {
                    images[s].insert(img.id.as_str());
                }
            }
            let img = [images[0].len(), images[1].len()];
            for s in 0..2 {
                img_tot[s] += img[s];
                qa_tot[s] += qa[s];
            }
            rows.push(StatsRow { label: img_label.into(), train: img[0], dev: img[1], total: img[0] + img[1] });
            rows.push(StatsRow { label: qa_label.into(), train: qa[0], dev: qa[1], total: qa[0] + qa[1] });
        }
        rows.push(StatsRow { label: "Total Images".into(), train: img_tot[0], dev: img_tot[1], total: img_tot[0] + img_tot[1] });
        rows.push(StatsRow { label: "Total QA pairs".into(), train: qa_tot[0], dev: qa_tot[1], total: qa_tot[0] + qa_tot[1] });
        rows
    }

    pub fn row(&self, label: &str) -> Option<&StatsRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn total_qa(&self) -> usize {
        self.row("Total QA pairs").map_or(0, |r| r.total)
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<30} {:>10} {:>10} {:>10}", "", "Train", "Dev", "Total")?;
        for r in &self.rows {
            writeln!(f, "{:<30} {:>10} {:>10} {:>10}", format!("# {}", r.label), r.train, r.dev, r.total)?;
        }
        writeln!(f, "duplicates removed: {}", self.duplicates_removed)?;
        writeln!(f, "QA pairs before filtering: {}", self.qa_pre_filter)?;
        writeln!(f, "implausible removed: {}", self.implausible_removed)?;
        write!(f, "widened distractor draws: {} ({} steps)", self.widened_draws, self.widening_steps)
    }
}

#[derive(Debug, Clone)]
pub struct ForgeOutput {
    pub instances: Vec<VQAInstance>,
    pub removed: Vec<VQAInstance>,
    /// Distractor draw of every mined instance, kept or removed, by id.
    pub draws: BTreeMap<String, DistractorDraw>,
    pub stats: StatsReport,
}

const STREAM_TRIPLE: u64 = 1 << 40;
const STREAM_SHERLOCK: u64 = 2 << 40;

fn record_rng(seed: u64, stream: u64, index: usize) -> Rng {
    rng::seeded(seed, stream | index as u64)
}

fn require_embeddings<'a>(p: &ForgeProviders<'a>) -> Result<&'a TextEmbeddings> {
    p.embeddings.ok_or_else(|| Error::InvalidConfig("sentence embeddings are required for distractor mining".into()))
}

struct Templated {
    id: String,
    question: String,
    tail: String,
    split: Split,
    image_id: String,
}

/// Runs the full pipeline. AbsAT instances come first, then VCR, then
/// Sherlock, each in input order.
pub fn build_dataset(sources: &ForgeSources, providers: &ForgeProviders<'_>, cfg: &ForgeConfig) -> Result<ForgeOutput> {
    cfg.validate()?;
    let mut instances = Vec::new();
    let mut draws = BTreeMap::new();
    let mut duplicates_removed = 0;

    if !sources.triples.is_empty() {
        let templated = sources
            .triples
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let id = t.id.clone().unwrap_or_else(|| format!("absat-{i:06}"));
                let question = providers.templates.render(&t.head, &t.relation)?;
                Ok(Templated {
                    image_id: t.image_id.clone().unwrap_or_else(|| format!("{id}-img")),
                    id,
                    question: standardize_names(&question),
                    tail: t.tail.clone(),
                    split: t.split.unwrap_or(Split::Train),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("template"))?;
        let before = templated.len();
        let templated = dedupe_by(templated, |t| normalize_text(&t.question));
        duplicates_removed = before - templated.len();
        let embed = require_embeddings(providers).map_err(|e| e.in_stage("distractors"))?;
        let pool = DistractorPool::build(sources.triples.iter().map(|t| t.tail.as_str()), embed)
            .map_err(|e| e.in_stage("distractors"))?;
        let made = templated
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut r = record_rng(cfg.seed, STREAM_TRIPLE, i);
                let draw = pool.sample(&t.tail, embed, cfg, &mut r)?;
                let qa = assemble(t.id.clone(), t.question.clone(), &t.tail, draw.texts.clone(), SourceTag::AbsAT, &mut r)?;
                let mut inst = VQAInstance::with_image(qa, ImageRef::id_only(t.image_id.clone()));
                inst.split = Some(t.split);
                Ok((inst, draw))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("distractors"))?;
        for (inst, draw) in made {
            if draws.insert(inst.qa.id.clone(), draw).is_some() {
                return Err(Error::DuplicateId(inst.qa.id).in_stage("distractors"));
            }
            instances.push(inst);
        }
    }

    for r in &sources.vcr {
        let qa = QAPair::new(r.id.clone(), r.question.clone(), r.answers.clone(), r.label, SourceTag::VCR)
            .map_err(|e| e.in_stage("vcr"))?;
        let mut inst = VQAInstance::with_image(qa, ImageRef::id_only(r.image_id.clone()));
        inst.split = Some(r.split.unwrap_or(Split::Train));
        instances.push(inst);
    }

    if !sources.sherlock.is_empty() {
        let embed = require_embeddings(providers).map_err(|e| e.in_stage("distractors"))?;
        let global = match cfg.sherlock_pool {
            PoolScope::Global => Some(
                DistractorPool::build(sources.sherlock.iter().map(|s| s.inference.as_str()), embed)
                    .map_err(|e| e.in_stage("distractors"))?,
            ),
            PoolScope::PerImage => None,
        };
        let made = sources
            .sherlock
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let local;
                let pool = match &global {
                    Some(p) => p,
                    None => {
                        local = DistractorPool::build(
                            sources.sherlock.iter().filter(|o| o.image_id == s.image_id).map(|o| o.inference.as_str()),
                            embed,
                        )?;
                        &local
                    }
                };
                let mut r = record_rng(cfg.seed, STREAM_SHERLOCK, i);
                let draw = pool.sample(&s.inference, embed, cfg, &mut r)?;
                let question = format!("{}{}", cfg.sherlock_prefix, s.clue.trim());
                let qa = assemble(s.id.clone(), question, &s.inference, draw.texts.clone(), SourceTag::Sherlock, &mut r)?;
                let mut inst = VQAInstance::with_image(qa, ImageRef::id_only(s.image_id.clone()));
                inst.split = Some(s.split.unwrap_or(Split::Train));
                Ok((inst, draw))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("distractors"))?;
        for (inst, draw) in made {
            if draws.insert(inst.qa.id.clone(), draw).is_some() {
                return Err(Error::DuplicateId(inst.qa.id).in_stage("distractors"));
            }
            instances.push(inst);
        }
    }

    let mut ids = HashSet::new();
    if let Some(dup) = instances.iter().find(|i| !ids.insert(i.qa.id.as_str())) {
        return Err(Error::DuplicateId(dup.qa.id.clone()).in_stage("assemble"));
    }

    if let Some(captions) = providers.captions {
        for inst in instances.iter_mut().filter(|i| cfg.caption_sources.contains(&i.qa.source_tag)) {
            *inst = attach_caption(inst, captions, cfg).map_err(|e| e.in_stage("captions"))?;
        }
    }

    let qa_pre_filter = instances.len();
    let (instances, removed) = match providers.plausibility {
        Some(p) => filter_plausible(instances, p, cfg).map_err(|e| e.in_stage("filter"))?,
        None => (instances, Vec::new()),
    };

    let stats = StatsReport {
        rows: StatsReport::rows_for(&instances),
        duplicates_removed,
        qa_pre_filter,
        implausible_removed: removed.len(),
        widened_draws: draws.values().filter(|d| d.widenings > 0).count(),
        widening_steps: draws.values().map(|d| d.widenings).sum(),
    };
    if stats.widened_draws > 0 {
        log::info!("{} distractor draws needed a widened band", stats.widened_draws);
    }
    Ok(ForgeOutput { instances, removed, draws, stats })
}
