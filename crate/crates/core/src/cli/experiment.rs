//! End-to-end runs: split, featurize, train both stages, evaluate. Also the
//! ablation grid.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_features, make_samples, Conversation, Corpus, EncodedSample, FeatureConfig, Split};
use crate::diffmath::Matrix;
use crate::encoder::{init_model, ModelState};
use crate::error::{Error, Result, ResultExt};
use crate::losses::ada_loss;
use crate::metrics::{anchor_geometry, evaluate, EvalReport};
use crate::seed;
use crate::trainer::{
    enter_stage_two, predict, train_stage_one, train_stage_two, Ablation, TrainConfig, TrainLog,
};

/// Conversations grouped by split. Tagged corpora use their tags (untagged
/// conversations count as training data); untagged corpora hold out a
/// seeded random `holdout_fraction` of conversations for testing.
pub fn split_conversations<'a>(
    corpus: &'a Corpus,
    config: &TrainConfig,
) -> (Vec<&'a Conversation>, Vec<&'a Conversation>, Vec<&'a Conversation>) {
    let convs = &corpus.conversations;
    if convs.iter().any(|c| c.split.is_some()) {
        let pick = |want: Split| -> Vec<&Conversation> {
            convs
                .iter()
                .filter(|c| c.split.unwrap_or(Split::Train) == want)
                .collect()
        };
        return (pick(Split::Train), pick(Split::Dev), pick(Split::Test));
    }
    let mut idx: Vec<usize> = (0..convs.len()).collect();
    idx.shuffle(&mut seed::rng_for(config.seed, seed::SPLIT));
    let n_test = (config.holdout_fraction * convs.len() as f64).round() as usize;
    let mut test_idx = idx[..n_test].to_vec();
    let mut train_idx = idx[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.into_iter().map(|i| &convs[i]).collect(),
        Vec::new(),
        test_idx.into_iter().map(|i| &convs[i]).collect(),
    )
}

/// Featurized splits plus the label-word features for anchor construction.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: FeatureConfig,
    pub label_features: Matrix,
    pub classes: usize,
    pub train: Vec<EncodedSample>,
    pub dev: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
}

pub fn prepare(corpus: &Corpus, config: &TrainConfig) -> Result<Prepared> {
    config.validate()?;
    if corpus.conversations.is_empty() {
        return Err(Error::Empty("corpus has no conversations".into())).in_module("corpus");
    }
    let features = config.feature_config();
    let (train, dev, test) = split_conversations(corpus, config);
    let build = |convs: Vec<&Conversation>| make_samples(convs, &features);
    Ok(Prepared {
        features,
        label_features: label_features(&corpus.labels, &features).in_module("corpus")?,
        classes: corpus.labels.len(),
        train: build(train).in_module("corpus")?,
        dev: build(dev).in_module("corpus")?,
        test: build(test).in_module("corpus")?,
    })
}

/// Everything a single two-stage run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub init: ModelState,
    pub stage_one: ModelState,
    pub final_state: ModelState,
    pub stage_one_log: TrainLog,
    pub stage_two_log: TrainLog,
    pub train_report: EvalReport,
    pub test_report: Option<EvalReport>,
    pub summary: RunSummary,
}

/// Scalar results of one run, as recorded in manifests and ablation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ablation: Ablation,
    pub seed: u64,
    pub train_weighted_f1: f64,
    pub test_weighted_f1: Option<f64>,
    pub initial_min_angle_deg: f64,
    pub stage_one_min_angle_deg: f64,
    pub final_min_angle_deg: f64,
    /// Training-set adaptation loss with the anchors stage two starts from.
    pub ada_initial: f64,
    /// Training-set adaptation loss with the final anchors.
    pub ada_final: f64,
}

fn report<S: std::borrow::Borrow<EncodedSample>>(state: &ModelState, samples: &[S], classes: usize) -> Result<EvalReport> {
    let pred = predict(state, samples)?;
    let gold: Vec<usize> = samples.iter().map(|s| s.borrow().label).collect();
    evaluate(&gold, &pred, classes)
}

/// Stage one, stage two (per the ablation), then evaluation.
pub fn run_experiment(prepared: &Prepared, config: &TrainConfig) -> Result<RunOutcome> {
    config.validate()?;
    if prepared.train.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    let mut state = init_model(
        prepared.features.dim,
        config.hidden_dim,
        prepared.classes,
        &prepared.label_features,
        config.seed,
    )
    .in_module("encoder")?;
    let init = state.clone();
    let dev = (!prepared.dev.is_empty()).then_some(prepared.dev.as_slice());

    let stage_one_log = train_stage_one(&mut state, &prepared.train, config, dev).in_module("trainer")?;
    let stage_one = state.clone();

    let train_reps = state.represent(&prepared.train).in_module("encoder")?;
    let train_labels: Vec<usize> = prepared.train.iter().map(|s| s.label).collect();
    enter_stage_two(&mut state, config, &train_reps, &train_labels).in_module("trainer")?;
    let ada_initial = ada_loss(&train_reps, state.current_anchors(), &train_labels, config.tau)
        .in_module("losses")?
        .value;
    let stage_two_log = match config.ablation {
        Ablation::NoAdapt | Ablation::CenterAnchors => TrainLog::default(),
        _ => train_stage_two(&mut state, &prepared.train, config, dev).in_module("trainer")?,
    };
    let ada_final = ada_loss(&train_reps, state.current_anchors(), &train_labels, config.tau)
        .in_module("losses")?
        .value;

    let train_report = report(&state, &prepared.train, prepared.classes).in_module("metrics")?;
    let test_report = if prepared.test.is_empty() {
        log::warn!("no held-out split; skipping test evaluation");
        None
    } else {
        Some(report(&state, &prepared.test, prepared.classes).in_module("metrics")?)
    };
    let angle = |m: &ModelState| anchor_geometry(m.current_anchors()).map(|g| g.min_angle_deg);
    let summary = RunSummary {
        ablation: config.ablation,
        seed: config.seed,
        train_weighted_f1: train_report.weighted_f1,
        test_weighted_f1: test_report.as_ref().map(|r| r.weighted_f1),
        initial_min_angle_deg: angle(&init).in_module("metrics")?,
        stage_one_min_angle_deg: angle(&stage_one).in_module("metrics")?,
        final_min_angle_deg: angle(&state).in_module("metrics")?,
        ada_initial,
        ada_final,
    };
    Ok(RunOutcome {
        init,
        stage_one,
        final_state: state,
        stage_one_log,
        stage_two_log,
        train_report,
        test_report,
        summary,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub test_weighted_f1: Vec<f64>,
    /// Per-seed difference to the `none` run of the same seed.
    pub delta: Vec<f64>,
    pub median_f1: f64,
    pub median_delta: f64,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    /// Tab-separated table of weighted-F1 deltas: one row per ablation, one
    /// column per seed, then the median.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("ablation");
        for s in &self.seeds {
            out.push_str(&format!("\tseed_{s}"));
        }
        out.push_str("\tmedian\n");
        for row in &self.rows {
            out.push_str(row.ablation.name());
            for d in &row.delta {
                out.push_str(&format!("\t{d:+.4}"));
            }
            out.push_str(&format!("\t{:+.4}\n", row.median_delta));
        }
        out
    }
}

/// Runs every ablation for every seed. Runs execute in parallel; results are
/// assembled in (ablation, seed) order so the table is deterministic.
pub fn run_ablation(corpus: &Corpus, base: &TrainConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let jobs: Vec<(Ablation, u64)> = Ablation::ALL
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(ablation, seed)| {
            let config = TrainConfig {
                ablation,
                seed,
                ..base.clone()
            };
            let prepared = prepare(corpus, &config)?;
            if prepared.test.is_empty() {
                return Err(Error::Empty("ablation needs a held-out test split".into()));
            }
            Ok(run_experiment(&prepared, &config)?.summary)
        })
        .collect::<Result<_>>()?;

    let f1_of = |s: &RunSummary| s.test_weighted_f1.expect("test split checked");
    let baseline: Vec<f64> = summaries[..seeds.len()].iter().map(f1_of).collect();
    let rows = summaries
        .chunks(seeds.len())
        .map(|runs| {
            let f1: Vec<f64> = runs.iter().map(f1_of).collect();
            let delta: Vec<f64> = f1.iter().zip(&baseline).map(|(a, b)| a - b).collect();
            AblationRow {
                ablation: runs[0].ablation,
                median_f1: median(&f1),
                median_delta: median(&delta),
                test_weighted_f1: f1,
                delta,
                runs: runs.to_vec(),
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn untagged_corpus_gets_seeded_holdout() {
        let mut corpus = synth_corpus(&SynthConfig::new(3, 20, vec![], 0.0, 1)).unwrap();
        corpus.conversations.iter_mut().for_each(|c| c.split = None);
        let config = TrainConfig::default();
        let (train, dev, test) = split_conversations(&corpus, &config);
        assert!(dev.is_empty());
        assert_eq!(train.len() + test.len(), corpus.conversations.len());
        assert_eq!(test.len(), (0.2 * corpus.conversations.len() as f64).round() as usize);
        let (_, _, again) = split_conversations(&corpus, &config);
        assert_eq!(test.iter().map(|c| &c.id).collect::<Vec<_>>(), again.iter().map(|c| &c.id).collect::<Vec<_>>());
    }

    #[test]
    fn tagged_corpus_uses_tags() {
        let corpus = synth_corpus(&SynthConfig {
            test_per_class: 4,
            dev_per_class: 4,
            ..SynthConfig::new(2, 8, vec![], 0.0, 1)
        })
        .unwrap();
        let (train, dev, test) = split_conversations(&corpus, &TrainConfig::default());
        let count = |v: &[&Conversation]| v.iter().map(|c| c.utterances.len()).sum::<usize>();
        assert_eq!((count(&train), count(&dev), count(&test)), (16, 8, 8));
    }
}
