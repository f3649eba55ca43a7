use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use log::{info, warn};
use vimag_core::analysis;
use vimag_core::backend::{AdapterParams, AdapterRoute, AdapterSection, Backbone, FeatureProvider};
use vimag_core::config::Config;
use vimag_core::forge::{
    build_dataset, Captions, ForgeProviders, ForgeSources, PlausibilityScores, TemplateTable, TextEmbeddings,
};
use vimag_core::imagination::{
    expand_query, imagine_instances, ConceptExpander, GenerationManifest, ImageIndex, ImagineProviders, Strategy,
};
use vimag_core::inference::{default_grid, evaluate, score_instances, sweep_lambda_with, PredictionRecord, TextScore};
use vimag_core::io;
use vimag_core::scoring::{candidate_text, itm_attention, resolve_features, ScoreFlags, Scorer};
use vimag_core::toy::separable_task;
use vimag_core::training::{self, Objectives};
use vimag_core::types::{EmbeddingVector, VQAInstance};
use vimag_core::Error;

/// Patch manifest path for a feature binary: `feats.bin` → `feats.manifest`.
pub fn feature_manifest(bin: &Path) -> PathBuf {
    bin.with_extension("manifest")
}

fn load_features(bin: Option<&PathBuf>) -> anyhow::Result<Option<FeatureProvider>> {
    Ok(match bin {
        Some(b) => Some(FeatureProvider::load(b, &feature_manifest(b))?),
        None => None,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn backbone(cfg: &Config) -> anyhow::Result<Backbone> {
    Ok(Backbone::new(cfg.backend.clone())?)
}

fn load_checkpoint(path: &Path, backbone: &Backbone) -> anyhow::Result<AdapterParams> {
    let params = AdapterParams::load(path)?;
    params.check_shape(&backbone.adapter_shape()).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(params)
}

#[derive(Args, Debug)]
pub struct ForgeArgs {
    /// Knowledge triples, one JSON object per line.
    #[arg(long)]
    pub triples: Option<PathBuf>,
    /// VCR-style records, one JSON object per line.
    #[arg(long)]
    pub vcr: Option<PathBuf>,
    /// Sherlock-style records, one JSON object per line.
    #[arg(long)]
    pub sherlock: Option<PathBuf>,
    /// `relation<TAB>template` lines replacing the built-in table.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Sentence embeddings (binary with text sidecar).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// `question<TAB>answer<TAB>score` lines; enables filtering.
    #[arg(long)]
    pub plausibility: Option<PathBuf>,
    /// `image_id<TAB>caption` lines; enables caption prefixes.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Report statistics without writing the dataset.
    #[arg(long)]
    pub dry_run: bool,
}

fn read_optional<T: serde::de::DeserializeOwned>(p: &Option<PathBuf>) -> vimag_core::Result<Vec<T>> {
    match p {
        Some(p) => io::read_jsonl(p).map_err(|e| e.in_stage("load")),
        None => Ok(Vec::new()),
    }
}

pub fn forge(cfg: &Config, a: &ForgeArgs) -> anyhow::Result<()> {
    let sources = ForgeSources {
        triples: read_optional(&a.triples)?,
        vcr: read_optional(&a.vcr)?,
        sherlock: read_optional(&a.sherlock)?,
    };
    if sources.is_empty() {
        warn!("no input records");
    }
    let templates = match &a.templates {
        Some(p) => TemplateTable::load(p)?,
        None => TemplateTable::default(),
    };
    let embeddings = a.embeddings.as_deref().map(TextEmbeddings::load).transpose()?;
    let plausibility = a.plausibility.as_deref().map(PlausibilityScores::load).transpose()?;
    let captions = a.captions.as_deref().map(Captions::load).transpose()?;
    let providers = ForgeProviders {
        templates: &templates,
        embeddings: embeddings.as_ref(),
        plausibility: plausibility.as_ref(),
        captions: captions.as_ref(),
    };
    let out = build_dataset(&sources, &providers, &cfg.forge)?;
    println!("{}", out.stats);
    if let Some(p) = &a.stats {
        write_json(p, &out.stats)?;
    }
    if a.dry_run {
        return Ok(());
    }
    let path = a.out.as_ref().expect("clap requires --out without --dry-run");
    io::write_jsonl(path, &out.instances)?;
    info!("wrote {} instances to {}", out.instances.len(), path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training instances (JSONL).
    #[arg(long, required_unless_present = "toy")]
    pub train: Option<PathBuf>,
    /// Dev instances used to pick the best epoch.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Train on the configured synthetic task instead of files.
    #[arg(long, conflicts_with_all = ["train", "dev"])]
    pub toy: bool,
    /// Visual features (binary plus `.manifest`).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Starting checkpoint; fresh adapters otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics (JSONL).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Comma list of `lm`, `itm`, `joint`, or `all`.
    #[arg(long)]
    pub objectives: Option<String>,
}

pub fn train(mut cfg: Config, a: &TrainArgs) -> anyhow::Result<()> {
    if let Some(o) = &a.objectives {
        cfg.train.objectives = Objectives::parse(o)?;
    }
    cfg.train.validate()?;
    let bb = backbone(&cfg)?;
    let (data, dev) = if a.toy {
        separable_task(&cfg.toy)?
    } else {
        let data: Vec<VQAInstance> = io::read_jsonl(a.train.as_ref().expect("clap requires --train"))?;
        let dev = match &a.dev {
            Some(p) => io::read_jsonl(p)?,
            None => Vec::new(),
        };
        (data, dev)
    };
    let features = load_features(a.features.as_ref())?;
    let init = match &a.init {
        Some(p) => load_checkpoint(p, &bb)?,
        None => bb.init_adapters(cfg.train.seed),
    };
    let outcome = training::train(&data, &dev, &bb, features.as_ref(), init, &cfg.train)?;
    outcome.params.save(&a.out)?;
    if let Some(p) = &a.metrics {
        training::write_metrics(p, &outcome.metrics)?;
    }
    for m in &outcome.metrics {
        println!(
            "epoch {}  loss {:.6}  (lm {:.6}, itm {:.6}, joint {:.6})  dev {}",
            m.epoch,
            m.total,
            m.l_lm,
            m.l_itm,
            m.l_joint,
            m.dev_acc.map_or("-".to_string(), |d| format!("{d:.4}"))
        );
    }
    println!("best epoch: {}", outcome.best_epoch.map_or("-".into(), |e| e.to_string()));
    println!("checkpoint: {}", a.out.display());
    println!("fingerprint: {}", outcome.params.fingerprint(AdapterSection::All));
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation instances (JSONL).
    #[arg(long, required_unless_present = "toy")]
    pub data: Option<PathBuf>,
    /// Evaluate on the dev split of the configured synthetic task.
    #[arg(long, conflicts_with = "data")]
    pub toy: bool,
    /// Instances for the λ sweep; the evaluation set otherwise.
    #[arg(long, requires = "sweep")]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// `generate`, `retrieve`, `concept_retrieve`, or `attached` (the
    /// default with `--toy`).
    #[arg(long)]
    pub strategy: Option<String>,
    /// `question_id<TAB>image_id` lines for `generate`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Retrieval index for `retrieve` and `concept_retrieve`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Sentence embeddings for retrieval queries.
    #[arg(long)]
    pub text_embeddings: Option<PathBuf>,
    /// `term<TAB>phrase…` lines for `concept_retrieve`.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[arg(long, conflicts_with = "sweep")]
    pub lambda: Option<f64>,
    /// Pick λ on a 21-point grid.
    #[arg(long)]
    pub sweep: bool,
    /// Sweep curve output (JSONL).
    #[arg(long, requires = "sweep")]
    pub curve: Option<PathBuf>,
    /// Prediction log output (JSONL).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Accuracy report output (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Task name for per-task λ overrides and reporting.
    #[arg(long)]
    pub task: Option<String>,
}

fn read_instances(p: &Path) -> anyhow::Result<Vec<VQAInstance>> {
    Ok(io::read_jsonl(p)?)
}

pub fn eval(mut cfg: Config, a: &EvalArgs) -> anyhow::Result<()> {
    if let Some(l) = a.lambda {
        cfg.inference.lambda = l;
    }
    cfg.inference.validate()?;
    let strategy: Strategy = match &a.strategy {
        Some(s) => s.parse()?,
        None if a.toy => Strategy::Attached,
        None => cfg.imagination.strategy,
    };
    let bb = backbone(&cfg)?;
    let params = load_checkpoint(&a.checkpoint, &bb)?;
    let (data, dev) = if a.toy {
        let (_, dev) = separable_task(&cfg.toy)?;
        (dev, None)
    } else {
        let data = read_instances(a.data.as_ref().expect("clap requires --data"))?;
        (data, a.dev.as_deref().map(read_instances).transpose()?)
    };
    let text_only = !a.sweep
        && cfg.inference.lambda == 0.0
        && cfg.inference.overrides.is_empty()
        && cfg.inference.text_score == TextScore::Lm;
    let flags = ScoreFlags { use_lm: true, use_itm: !text_only };

    let features = load_features(a.features.as_ref())?;
    // only the inputs of the chosen strategy are opened
    let retrieval = matches!(strategy, Strategy::Retrieve | Strategy::ConceptRetrieve) && flags.use_itm;
    let wanted = |on: bool, p: &Option<PathBuf>| if on { p.clone() } else { None };
    let manifest =
        wanted(strategy == Strategy::Generate && flags.use_itm, &a.manifest).map(|p| GenerationManifest::load(&p)).transpose()?;
    let index = wanted(retrieval, &a.index).map(|p| ImageIndex::load(&p)).transpose()?;
    let text_embeddings = wanted(retrieval, &a.text_embeddings).map(|p| TextEmbeddings::load(&p)).transpose()?;
    let expander =
        wanted(strategy == Strategy::ConceptRetrieve && flags.use_itm, &a.concepts).map(|p| ConceptExpander::load(&p)).transpose()?;
    let providers = ImagineProviders {
        manifest: manifest.as_ref(),
        features: features.as_ref(),
        index: index.as_ref(),
        embeddings: text_embeddings.as_ref(),
        expander: expander.as_ref(),
    };
    let imagine = |xs: Vec<VQAInstance>| -> anyhow::Result<Vec<VQAInstance>> {
        if !flags.use_itm {
            return Ok(xs);
        }
        Ok(imagine_instances(&xs, strategy, &providers).map_err(|e| e.in_stage("imagination"))?)
    };
    let data = imagine(data)?;
    let scorer = Scorer::new(&bb, &params, features.as_ref());
    let scored = score_instances(&data, &scorer, flags, a.task.as_deref())?;

    if a.sweep {
        let dev_scored = match dev {
            Some(d) => score_instances(&imagine(d)?, &scorer, flags, a.task.as_deref())?,
            None => {
                warn!("no --dev set; sweeping λ on the evaluation set");
                scored.clone()
            }
        };
        let sweep = sweep_lambda_with(&dev_scored, &default_grid(), cfg.inference.text_score)?;
        for p in &sweep.curve {
            println!("λ {:.2}  acc {:.4}", p.lambda, p.accuracy);
        }
        println!("selected λ {:.2} (dev acc {:.4})", sweep.best_lambda, sweep.best_accuracy);
        if let Some(p) = &a.curve {
            io::write_jsonl(p, &sweep.curve)?;
        }
        cfg.inference.lambda = sweep.best_lambda;
        if let Some(t) = &a.task {
            cfg.inference.overrides.insert(t.clone(), sweep.best_lambda);
        }
    }

    let report = evaluate(&scored, &cfg.inference)?;
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    for (task, t) in &report.per_task {
        println!("  {task}: {:.4} ({}/{})", t.accuracy, t.correct, t.total);
    }
    if let Some(p) = &a.log {
        io::write_jsonl(p, &report.log)?;
    }
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct IndexBuildArgs {
    /// Image embeddings (binary with id sidecar).
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn index_build(a: &IndexBuildArgs) -> anyhow::Result<()> {
    let records = io::load_records(&a.embeddings, &io::sidecar_path(&a.embeddings))?;
    let index = ImageIndex::build(&records, a.embeddings.display().to_string())?;
    index.save(&a.out)?;
    println!("images {}  dim {}  fingerprint {}", index.len(), index.dim(), index.fingerprint());
    Ok(())
}

#[derive(Args, Debug)]
pub struct IndexQueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Question text, embedded with `--text-embeddings`.
    #[arg(long, required_unless_present = "vector", requires = "text_embeddings")]
    pub text: Option<String>,
    /// Comma-separated query vector.
    #[arg(long, conflicts_with = "text", value_delimiter = ',')]
    pub vector: Option<Vec<f64>>,
    #[arg(long)]
    pub text_embeddings: Option<PathBuf>,
    /// Expand the question with concept phrases before searching.
    #[arg(long, requires = "text")]
    pub concepts: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

pub fn index_query(a: &IndexQueryArgs) -> anyhow::Result<()> {
    let index = ImageIndex::load(&a.index)?;
    let query = match (&a.vector, &a.text) {
        (Some(v), _) => EmbeddingVector::new(v.clone()),
        (None, Some(text)) => {
            let embed = TextEmbeddings::load(a.text_embeddings.as_ref().expect("clap requires --text-embeddings"))?;
            match &a.concepts {
                Some(c) => expand_query(text, &ConceptExpander::load(c)?, &embed)?,
                None => embed.get(text)?.clone(),
            }
        }
        (None, None) => unreachable!("clap requires --text or --vector"),
    };
    for hit in index.retrieve(&query, a.k)? {
        println!("{}\t{:.6}", hit.id, hit.similarity);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RelevanceArgs {
    /// Text embeddings (binary with sidecar).
    #[arg(long)]
    pub texts: PathBuf,
    /// Image embeddings (binary with sidecar).
    #[arg(long)]
    pub images: PathBuf,
    /// `text<TAB>image_id` lines; rows are paired by position otherwise.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Per-pair scores (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn relevance(a: &RelevanceArgs) -> anyhow::Result<()> {
    let texts = io::load_records(&a.texts, &io::sidecar_path(&a.texts))?;
    let images = io::load_records(&a.images, &io::sidecar_path(&a.images))?;
    let pairs: Vec<(EmbeddingVector, EmbeddingVector)> = match &a.pairs {
        Some(p) => {
            let mut tmap = TextEmbeddings::new(texts.first().map_or(0, |r| r.vector.dim()));
            for r in &texts {
                tmap.insert(&r.id, r.vector.clone())?;
            }
            let imap: std::collections::HashMap<&str, &EmbeddingVector> =
                images.iter().map(|r| (r.id.as_str(), &r.vector)).collect();
            io::read_tsv(p)?
                .into_iter()
                .map(|row| match row.as_slice() {
                    [t, i] => Ok((
                        tmap.get(t)?.clone(),
                        (*imap.get(i.as_str()).ok_or_else(|| Error::UnknownImage(i.clone()))?).clone(),
                    )),
                    _ => Err(Error::Format { what: "pair line", detail: row.join("\t") }),
                })
                .collect::<vimag_core::Result<_>>()?
        }
        None => {
            if texts.len() != images.len() {
                return Err(Error::ShapeMismatch(format!("{} texts for {} images", texts.len(), images.len())).into());
            }
            texts.into_iter().zip(images).map(|(t, i)| (t.vector, i.vector)).collect()
        }
    };
    let r = analysis::relevance(&pairs)?;
    println!("pairs {}  mean relevance {:.4}", r.per_pair.len(), r.mean);
    if let Some(p) = &a.out {
        let rows: Vec<serde_json::Value> =
            r.per_pair.iter().enumerate().map(|(i, s)| serde_json::json!({"pair": i, "relevance": s})).collect();
        io::write_jsonl(p, &rows)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ImpactArgs {
    /// Prediction log written by `eval --log`.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn impact(a: &ImpactArgs) -> anyhow::Result<()> {
    let log: Vec<PredictionRecord> = io::read_jsonl(&a.log)?;
    let i = analysis::imagination_impact(&log)?;
    println!("{i}");
    if let Some(p) = &a.out {
        write_json(p, &i)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Instances whose images are masked; attention uses the gold answer.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Patches to erase per image; grid-size default otherwise.
    #[arg(long)]
    pub k: Option<usize>,
    /// Masked features (binary plus `.manifest`).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn mask(cfg: &Config, a: &MaskArgs) -> anyhow::Result<()> {
    let bb = backbone(cfg)?;
    let params = load_checkpoint(&a.checkpoint, &bb)?;
    let features = load_features(a.features.as_ref())?;
    let data = read_instances(&a.data)?;
    let mut out = FeatureProvider::new(params.projection.cols);
    let mut masked = 0;
    for inst in &data {
        let Some(image) = &inst.image else { continue };
        if out.contains(&image.id) {
            continue;
        }
        let v = resolve_features(inst, features.as_ref())?;
        let text = candidate_text(&inst.qa.question, inst.qa.gold());
        let cv = itm_attention(&bb, &text, &v, AdapterRoute::Itm, &params)?;
        let k = a.k.or(cfg.analysis.mask_k).unwrap_or_else(|| analysis::default_mask_count(v.num_patches()));
        out.insert(image.id.clone(), analysis::mask_lowest(&v, &cv, k)?)?;
        masked += 1;
    }
    out.save(&a.out, &feature_manifest(&a.out))?;
    println!("masked {masked} images into {}", a.out.display());
    Ok(())
}
