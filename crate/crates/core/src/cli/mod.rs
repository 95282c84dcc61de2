//! Operator commands behind the `eacl` binary. Each command is a plain
//! function so it can be driven from tests as well as from `main`.

pub mod config;
pub mod experiment;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, make_samples, save_corpus, synth_corpus, Split, SynthConfig};
use crate::encoder::{Checkpoint, ModelState};
use crate::error::{Error, Result, ResultExt};
use crate::metrics::{anchor_geometry, evaluate, export_embeddings, AnchorGeometry, EvalReport};
use crate::trainer::{predict, TrainConfig};

use config::{config_hash, file_fingerprint, load_config};
use experiment::{prepare, run_ablation, run_experiment, AblationTable, RunSummary};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_INIT: &str = "checkpoint_init.json";
pub const CHECKPOINT_STAGE_ONE: &str = "checkpoint_stage1.json";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TSV: &str = "ablation.tsv";

/// Everything needed to re-run a command, plus what it produced. The
/// creation time is the only field that differs between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub corpus_path: PathBuf,
    pub corpus_fingerprint: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub results: Vec<RunSummary>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Schema(e.to_string()))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Trains with an already-parsed config and writes every artifact to `out`.
pub fn train_with_config(config: &TrainConfig, corpus_path: &Path, out: &Path) -> Result<RunManifest> {
    config.validate().in_module("cli")?;
    let corpus = load_corpus(corpus_path).in_module("corpus")?;
    let fingerprint = file_fingerprint(corpus_path).in_module("cli")?;
    let prepared = prepare(&corpus, config)?;
    log::info!(
        "train: {} train / {} dev / {} test samples, {} classes",
        prepared.train.len(),
        prepared.dev.len(),
        prepared.test.len(),
        prepared.classes
    );
    let outcome = run_experiment(&prepared, config)?;
    let hash = config_hash(config);
    create_dir(out)?;

    let labels = corpus.labels.texts().to_vec();
    let checkpoint = |state: &ModelState| Checkpoint::new(state.clone(), labels.clone(), prepared.features, hash.clone());
    checkpoint(&outcome.init).save(&out.join(CHECKPOINT_INIT))?;
    checkpoint(&outcome.stage_one).save(&out.join(CHECKPOINT_STAGE_ONE))?;
    checkpoint(&outcome.final_state).save(&out.join(CHECKPOINT_FINAL))?;

    let mut log_text = outcome.stage_one_log.to_jsonl()?;
    log_text.push_str(&outcome.stage_two_log.to_jsonl()?);
    write_text(&out.join(TRAIN_LOG), &log_text)?;

    let report = outcome.test_report.as_ref().unwrap_or(&outcome.train_report);
    write_text(&out.join(EVAL_REPORT), &report.to_json()?)?;

    let eval_samples = if prepared.test.is_empty() { &prepared.train } else { &prepared.test };
    let reps = outcome.final_state.represent(eval_samples).in_module("encoder")?;
    let eval_labels: Vec<usize> = eval_samples.iter().map(|s| s.label).collect();
    export_embeddings(&reps, &eval_labels, outcome.final_state.current_anchors(), &out.join(EMBEDDINGS))
        .in_module("metrics")?;

    let manifest = RunManifest {
        command: "train".into(),
        config: config.clone(),
        config_hash: hash,
        corpus_path: corpus_path.to_path_buf(),
        corpus_fingerprint: fingerprint,
        seeds: vec![config.seed],
        artifacts: [CHECKPOINT_INIT, CHECKPOINT_STAGE_ONE, CHECKPOINT_FINAL, TRAIN_LOG, EVAL_REPORT, EMBEDDINGS]
            .map(String::from)
            .to_vec(),
        results: vec![outcome.summary],
        created_unix: now_unix(),
    };
    write_text(&out.join(MANIFEST_FILE), &to_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn cmd_train(config_path: &Path, corpus_path: &Path, out: &Path) -> Result<RunManifest> {
    let config = load_config(config_path).in_module("cli")?;
    train_with_config(&config, corpus_path, out)
}

/// Re-runs a manifest into `out`, refusing if the corpus file has changed.
pub fn cmd_rerun(manifest_path: &Path, out: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(manifest_path).in_module("cli")?;
    let fingerprint = file_fingerprint(&manifest.corpus_path).in_module("cli")?;
    if fingerprint != manifest.corpus_fingerprint {
        return Err(Error::Schema(format!(
            "corpus {} no longer matches the manifest fingerprint",
            manifest.corpus_path.display()
        )))
        .in_module("cli");
    }
    match manifest.command.as_str() {
        "train" => train_with_config(&manifest.config, &manifest.corpus_path, out),
        "ablate" => ablate_with_config(&manifest.config, &manifest.corpus_path, out, &manifest.seeds).map(|r| r.0),
        other => Err(Error::Config(format!("manifest has unknown command {other:?}"))),
    }
}

/// Evaluates a checkpoint on a corpus (or one split of it). Corpus labels
/// are matched to the checkpoint's labels by name.
pub fn cmd_eval(checkpoint_path: &Path, corpus_path: &Path, split: Option<Split>) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint_path).in_module("encoder")?;
    let corpus = load_corpus(corpus_path).in_module("corpus")?;
    let remap = corpus
        .labels
        .texts()
        .iter()
        .map(|t| {
            ckpt.labels.iter().position(|l| l == t).ok_or_else(|| {
                Error::Schema(format!("corpus label {t:?} is not among the checkpoint labels {:?}", ckpt.labels))
            })
        })
        .collect::<Result<Vec<_>>>()
        .in_module("cli")?;
    let convs = corpus
        .conversations
        .iter()
        .filter(|c| split.is_none_or(|s| c.split == Some(s)));
    let mut samples = make_samples(convs, &ckpt.features).in_module("corpus")?;
    if samples.is_empty() {
        let which = split.map_or("corpus".to_string(), |s| format!("{} split", s.name()));
        return Err(Error::Empty(format!("evaluation {which} has no utterances"))).in_module("cli");
    }
    for s in &mut samples {
        s.label = remap[s.label];
    }
    if ckpt.features.dim != ckpt.model.feature_dim() {
        return Err(Error::dimension(
            "corpus features vs checkpoint encoder input",
            ckpt.model.feature_dim(),
            ckpt.features.dim,
        ));
    }
    let pred = predict(&ckpt.model, &samples).in_module("trainer")?;
    let gold: Vec<usize> = samples.iter().map(|s| s.label).collect();
    evaluate(&gold, &pred, ckpt.labels.len()).in_module("metrics")
}

pub fn ablate_with_config(
    config: &TrainConfig,
    corpus_path: &Path,
    out: &Path,
    seeds: &[u64],
) -> Result<(RunManifest, AblationTable)> {
    config.validate().in_module("cli")?;
    let corpus = load_corpus(corpus_path).in_module("corpus")?;
    let fingerprint = file_fingerprint(corpus_path).in_module("cli")?;
    let table: AblationTable = run_ablation(&corpus, config, seeds)?;
    create_dir(out)?;
    write_text(&out.join(ABLATION_JSON), &to_pretty(&table)?)?;
    write_text(&out.join(ABLATION_TSV), &table.to_tsv())?;
    let manifest = RunManifest {
        command: "ablate".into(),
        config: config.clone(),
        config_hash: config_hash(config),
        corpus_path: corpus_path.to_path_buf(),
        corpus_fingerprint: fingerprint,
        seeds: seeds.to_vec(),
        artifacts: vec![ABLATION_JSON.into(), ABLATION_TSV.into()],
        results: table.rows.iter().flat_map(|r| r.runs.iter().cloned()).collect(),
        created_unix: now_unix(),
    };
    write_text(&out.join(MANIFEST_FILE), &to_pretty(&manifest)?)?;
    Ok((manifest, table))
}

pub fn cmd_ablate(config_path: &Path, corpus_path: &Path, out: &Path, seeds: &[u64]) -> Result<AblationTable> {
    let config = load_config(config_path).in_module("cli")?;
    Ok(ablate_with_config(&config, corpus_path, out, seeds)?.1)
}

/// Anchor geometry before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub labels: Vec<String>,
    pub initial: AnchorGeometry,
    pub final_anchors: AnchorGeometry,
    /// Final minus initial minimum pairwise angle, in degrees.
    pub min_angle_delta_deg: f64,
}

/// With an `init` checkpoint, compares its current anchors to the final
/// checkpoint's. Without one, the final checkpoint's stored initial anchors
/// are used.
pub fn cmd_analyze_anchors(init: Option<&Path>, final_path: &Path, out: &Path) -> Result<AnchorReport> {
    let fin = Checkpoint::load(final_path).in_module("encoder")?;
    let initial_anchors = match init {
        Some(p) => {
            let ckpt = Checkpoint::load(p).in_module("encoder")?;
            if ckpt.labels != fin.labels {
                return Err(Error::Schema("checkpoints disagree on labels".into())).in_module("cli");
            }
            ckpt.model.current_anchors().clone()
        }
        None => fin.model.initial_anchors().clone(),
    };
    let initial = anchor_geometry(&initial_anchors).in_module("metrics")?;
    let final_anchors = anchor_geometry(fin.model.current_anchors()).in_module("metrics")?;
    let report = AnchorReport {
        labels: fin.labels.clone(),
        min_angle_delta_deg: final_anchors.min_angle_deg - initial.min_angle_deg,
        initial,
        final_anchors,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &to_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let corpus = synth_corpus(cfg).in_module("corpus")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_corpus(&corpus, out).in_module("corpus")
}
