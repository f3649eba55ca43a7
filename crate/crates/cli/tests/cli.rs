use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use vimag_core::backend::{AdapterParams, AdapterSection, Backbone, EncoderConfig, Mode};
use vimag_core::inference::PredictionRecord;
use vimag_core::io;
use vimag_core::toy::{separable_task, ToyTaskConfig};
use vimag_core::types::{EmbeddingRecord, EmbeddingVector, VQAInstance};

const TOY_CONFIG: &str = "[backend]\nmode = \"decoder\"\n\n[train]\nlearning_rate = 1e-2\nmomentum = 0.9\n";

fn vimag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vimag")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("toy.toml"), TOY_CONFIG).unwrap();
        Toy { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        s(&self.path("toy.toml")).to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let cfg = self.config();
        let out = self.path(out);
        let mut args = vec!["--config", &cfg, "train", "--toy", "--out", s(&out)];
        args.extend_from_slice(extra);
        vimag(&args)
    }
}

fn write_forge_inputs(dir: &Path) {
    let triples: Vec<serde_json::Value> = (0..6)
        .map(|i| {
            serde_json::json!({
                "id": format!("t{i}"),
                "head": format!("PersonX paints wall {}", i % 5),
                "relation": "xWant",
                "tail": format!("answer {i}"),
            })
        })
        .collect();
    io::write_jsonl(&dir.join("triples.jsonl"), &triples).unwrap();
    let records: Vec<EmbeddingRecord> = (0..6)
        .map(|i| EmbeddingRecord {
            id: format!("answer {i}"),
            vector: EmbeddingVector::new(vec![1.0, 0.2 * i as f64 + 0.3, 0.5]),
        })
        .collect();
    io::save_records(&dir.join("emb.bin"), &dir.join("emb.ids"), &records).unwrap();
}

#[test]
fn forge_writes_dataset_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    write_forge_inputs(dir.path());
    let p = |n: &str| dir.path().join(n);
    let o = vimag(&[
        "forge",
        "--triples",
        s(&p("triples.jsonl")),
        "--embeddings",
        s(&p("emb.bin")),
        "--out",
        s(&p("data.jsonl")),
        "--stats",
        s(&p("stats.json")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data: Vec<VQAInstance> = io::read_jsonl(&p("data.jsonl")).unwrap();
    // one of the six heads repeats
    assert_eq!(data.len(), 5);
    assert!(data.iter().all(|i| i.qa.question.starts_with("Person paints")));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["duplicates_removed"], 1);
    assert!(stdout(&o).contains("Total QA pairs"));
}

#[test]
fn forge_dry_run_and_missing_provider() {
    let dir = tempfile::tempdir().unwrap();
    write_forge_inputs(dir.path());
    let p = |n: &str| dir.path().join(n);
    let o = vimag(&["forge", "--triples", s(&p("triples.jsonl")), "--embeddings", s(&p("emb.bin")), "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("QA pairs from AbsAT"));
    assert!(!p("data.jsonl").exists());
    let missing = p("nope.tsv");
    let o = vimag(&[
        "forge",
        "--triples",
        s(&p("triples.jsonl")),
        "--embeddings",
        s(&p("emb.bin")),
        "--plausibility",
        s(&missing),
        "--dry-run",
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
    let o = vimag(&["forge", "--triples", s(&p("triples.jsonl")), "--dry-run"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("distractors"));
}

#[test]
fn toy_training_is_fast_and_reproducible() {
    let toy = Toy::new();
    let t = Instant::now();
    let o = toy.train("a.bin", &["--metrics", s(&toy.path("m.jsonl"))]);
    assert!(t.elapsed() < Duration::from_secs(60));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(toy.path("m.jsonl")).unwrap().lines().count(), 2);
    let o = toy.train("b.bin", &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(toy.path("a.bin")).unwrap(), std::fs::read(toy.path("b.bin")).unwrap());
    let o = toy.train("c.bin", &["--seed", "9"]);
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(toy.path("a.bin")).unwrap(), std::fs::read(toy.path("c.bin")).unwrap());
}

#[test]
fn lm_objective_leaves_itm_adapter_alone() {
    let toy = Toy::new();
    let o = toy.train("lm.bin", &["--objectives", "lm"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trained = AdapterParams::load(&toy.path("lm.bin")).unwrap();
    let b = Backbone::new(EncoderConfig { mode: Mode::Decoder, ..Default::default() }).unwrap();
    let init = b.init_adapters(0);
    assert_eq!(trained.fingerprint(AdapterSection::Itm), init.fingerprint(AdapterSection::Itm));
    assert_ne!(trained.fingerprint(AdapterSection::Lm), init.fingerprint(AdapterSection::Lm));
}

#[test]
fn eval_sweep_endpoints_and_impact() {
    let toy = Toy::new();
    assert_eq!(code(&toy.train("ck.bin", &[])), 0);
    let cfg = toy.config();
    let ck = toy.path("ck.bin");
    let curve = toy.path("curve.jsonl");
    let log = toy.path("log.jsonl");
    let o = vimag(&["--config", &cfg, "eval", "--toy", "--checkpoint", s(&ck), "--sweep", "--curve", s(&curve), "--log", s(&log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 21);
    assert!(stdout(&o).contains("selected λ"));

    let log0 = toy.path("log0.jsonl");
    let o = vimag(&["--config", &cfg, "eval", "--toy", "--checkpoint", s(&ck), "--lambda", "0", "--log", s(&log0)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records: Vec<PredictionRecord> = io::read_jsonl(&log0).unwrap();
    assert!(records.iter().all(|r| r.pred_itm.is_none() && Some(r.pred_ensemble) == r.pred_lm));
    let o = vimag(&["analyze", "impact", "--log", s(&log0)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("helpful          0.00%"), "{}", stdout(&o));
    assert!(stdout(&o).contains("harmful          0.00%"));
}

#[test]
fn retrieval_never_opens_the_manifest() {
    let toy = Toy::new();
    assert_eq!(code(&toy.train("ck.bin", &[])), 0);
    let (_, dev) = separable_task(&ToyTaskConfig::default()).unwrap();
    let texts: Vec<EmbeddingRecord> = dev
        .iter()
        .map(|i| EmbeddingRecord { id: i.qa.question.clone(), vector: EmbeddingVector::new(vec![1.0, 0.0]) })
        .take(1)
        .collect();
    io::save_records(&toy.path("text.bin"), &toy.path("text.ids"), &texts).unwrap();
    let images: Vec<EmbeddingRecord> = dev
        .iter()
        .enumerate()
        .map(|(k, i)| EmbeddingRecord {
            id: i.image.as_ref().unwrap().id.clone(),
            vector: EmbeddingVector::new(vec![1.0, k as f64 * 0.01]),
        })
        .collect();
    io::save_records(&toy.path("img.bin"), &toy.path("img.ids"), &images).unwrap();
    let cfg = toy.config();
    let o = vimag(&["index", "build", "--embeddings", s(&toy.path("img.bin")), "--out", s(&toy.path("index.bin"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // features for the retrieved image come from a feature store
    let mut store = vimag_core::backend::FeatureProvider::new(32);
    for i in &dev {
        store.insert(i.image.as_ref().unwrap().id.clone(), i.image.as_ref().unwrap().features.clone().unwrap()).unwrap();
    }
    store.save(&toy.path("feats.bin"), &toy.path("feats.manifest")).unwrap();
    let data: Vec<VQAInstance> = dev
        .iter()
        .map(|i| VQAInstance { image: None, ..i.clone() })
        .collect();
    io::write_jsonl(&toy.path("dev.jsonl"), &data).unwrap();
    let o = vimag(&[
        "--config",
        &cfg,
        "eval",
        "--checkpoint",
        s(&toy.path("ck.bin")),
        "--data",
        s(&toy.path("dev.jsonl")),
        "--strategy",
        "retrieve",
        "--index",
        s(&toy.path("index.bin")),
        "--text-embeddings",
        s(&toy.path("text.bin")),
        "--features",
        s(&toy.path("feats.bin")),
        "--manifest",
        s(&toy.path("does-not-exist.tsv")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = vimag(&[
        "--config",
        &cfg,
        "eval",
        "--checkpoint",
        s(&toy.path("ck.bin")),
        "--data",
        s(&toy.path("dev.jsonl")),
        "--strategy",
        "generate",
        "--features",
        s(&toy.path("feats.bin")),
        "--manifest",
        s(&toy.path("does-not-exist.tsv")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn index_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let records: Vec<EmbeddingRecord> = (0..20)
        .map(|i| EmbeddingRecord {
            id: format!("img{i}"),
            vector: EmbeddingVector::new(vec![(i as f64).cos(), (i as f64).sin(), 0.1 * i as f64]),
        })
        .collect();
    io::save_records(&p("e.bin"), &p("e.ids"), &records).unwrap();
    let o = vimag(&["index", "build", "--embeddings", s(&p("e.bin")), "--out", s(&p("idx.bin"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = vimag(&["index", "query", "--index", s(&p("idx.bin")), "--vector", "0.3,0.9,0.5", "--k", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index = vimag_core::imagination::ImageIndex::build(&records, "mem").unwrap();
    let want: Vec<String> = index
        .retrieve(&EmbeddingVector::new(vec![0.3, 0.9, 0.5]), 4)
        .unwrap()
        .iter()
        .map(|h| format!("{}\t{:.6}", h.id, h.similarity))
        .collect();
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>(), want);
}

#[test]
fn relevance_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let rec = |id: &str, v: Vec<f64>| EmbeddingRecord { id: id.into(), vector: EmbeddingVector::new(v) };
    io::save_records(&p("t.bin"), &p("t.ids"), &[rec("a", vec![1.0, 0.0]), rec("b", vec![0.0, 1.0])]).unwrap();
    io::save_records(&p("i.bin"), &p("i.ids"), &[rec("x", vec![2.0, 0.0]), rec("y", vec![1.0, 0.0])]).unwrap();
    let o = vimag(&["analyze", "relevance", "--texts", s(&p("t.bin")), "--images", s(&p("i.bin"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mean relevance 50.0000"), "{}", stdout(&o));
    io::save_records(&p("e.bin"), &p("e.ids"), &[]).unwrap();
    let o = vimag(&["analyze", "relevance", "--texts", s(&p("e.bin")), "--images", s(&p("e.bin"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn mask_zeroes_patches() {
    let toy = Toy::new();
    assert_eq!(code(&toy.train("ck.bin", &[])), 0);
    let (_, dev) = separable_task(&ToyTaskConfig::default()).unwrap();
    io::write_jsonl(&toy.path("dev.jsonl"), &dev[..5]).unwrap();
    let cfg = toy.config();
    let out = toy.path("masked.bin");
    let o = vimag(&[
        "--config",
        &cfg,
        "analyze",
        "mask",
        "--checkpoint",
        s(&toy.path("ck.bin")),
        "--data",
        s(&toy.path("dev.jsonl")),
        "--k",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let store = vimag_core::backend::FeatureProvider::load(&out, &toy.path("masked.manifest")).unwrap();
    for inst in &dev[..5] {
        let v = store.get(&inst.image.as_ref().unwrap().id).unwrap();
        assert_eq!(v.rows().filter(|r| r.iter().all(|&x| x == 0.0)).count(), 2);
    }
}

#[test]
fn exit_codes_for_config_and_numerical_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    let out = dir.path().join("x.bin");
    let o = vimag(&["--config", s(&bad), "train", "--toy", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = vimag(&["train", "--toy", "--out", s(&out), "--objectives", "vision"]);
    assert_eq!(code(&o), 2);
    let hot = dir.path().join("hot.toml");
    std::fs::write(&hot, "[backend]\nmode = \"decoder\"\n[train]\nlearning_rate = 1e308\nmomentum = 0.9\n").unwrap();
    let o = vimag(&["--config", s(&hot), "train", "--toy", "--out", s(&out)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
    let o = vimag(&["eval", "--checkpoint", s(&out)]);
    assert_eq!(code(&o), 2);
}
