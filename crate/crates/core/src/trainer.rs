//! Two-stage training, nearest-anchor prediction and the ablation switches.
//!
//! Stage one trains encoder, projection and CE head jointly on the
//! anchor-augmented contrastive objective. Stage two freezes all of that and
//! adapts only the anchors. Both stages use plain SGD with a fixed step.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSample, FeatureConfig};
use crate::diffmath::{dot, norm, normalize_rows, Matrix};
use crate::encoder::{ModelGrad, ModelState, Stage};
use crate::error::{Error, Result};
use crate::losses::{ada_loss, stage_one_loss, ContrastiveBatch, LossWeights, StageOneLoss, SupConVariant};
use crate::metrics::{anchor_geometry, evaluate};
use crate::optim::{Optimizer, OptimizerState};
use crate::seed;

/// Component switched off (or replaced) for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No anchor angle loss.
    NoAngle,
    /// No cross-entropy head loss.
    NoCe,
    /// Stage two starts from random anchors.
    NoInherit,
    /// Stage two is skipped.
    NoAdapt,
    /// Stage two is replaced by per-class mean representations.
    CenterAnchors,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoAngle,
        Ablation::NoCe,
        Ablation::NoInherit,
        Ablation::NoAdapt,
        Ablation::CenterAnchors,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAngle => "no_angle",
            Ablation::NoCe => "no_ce",
            Ablation::NoInherit => "no_inherit",
            Ablation::NoAdapt => "no_adapt",
            Ablation::CenterAnchors => "center_anchors",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

fn default_lambda1() -> f64 {
    0.9
}
fn default_lambda2() -> f64 {
    0.01
}
fn default_tau() -> f64 {
    0.1
}
fn default_context_turns() -> usize {
    4
}
fn default_max_tokens() -> usize {
    256
}
fn default_feature_dim() -> usize {
    256
}
fn default_hidden_dim() -> usize {
    32
}
fn default_batch_size() -> usize {
    16
}
fn default_stage1_epochs() -> usize {
    8
}
fn default_stage2_epochs() -> usize {
    5
}
fn default_learning_rate() -> f64 {
    1e-5
}
fn default_seed() -> u64 {
    42
}
fn default_holdout_fraction() -> f64 {
    0.2
}

/// Every training knob. The dimensions, context size and batch size are
/// desk-scale choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_context_turns")]
    pub context_turns: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "default_stage2_epochs")]
    pub stage2_epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Step size for anchor adaptation; falls back to `learning_rate`.
    #[serde(default)]
    pub stage2_learning_rate: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub supcon_variant: SupConVariant,
    #[serde(default)]
    pub ablation: Ablation,
    /// Share of conversations held out for testing when the corpus carries
    /// no split tags.
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            tau: default_tau(),
            context_turns: default_context_turns(),
            max_tokens: default_max_tokens(),
            feature_dim: default_feature_dim(),
            hidden_dim: default_hidden_dim(),
            batch_size: default_batch_size(),
            stage1_epochs: default_stage1_epochs(),
            stage2_epochs: default_stage2_epochs(),
            learning_rate: default_learning_rate(),
            stage2_learning_rate: None,
            seed: default_seed(),
            optimizer: Optimizer::default(),
            supcon_variant: SupConVariant::default(),
            ablation: Ablation::default(),
            holdout_fraction: default_holdout_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
        .validate()?;
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.tau) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !positive(self.learning_rate) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if let Some(lr) = self.stage2_learning_rate {
            if !positive(lr) {
                return Err(Error::Config(format!("stage2_learning_rate must be > 0, got {lr}")));
            }
        }
        if self.feature_dim < 8 {
            return Err(Error::Config(format!("feature_dim must be >= 8, got {}", self.feature_dim)));
        }
        if self.hidden_dim == 0 || self.batch_size == 0 || self.max_tokens == 0 {
            return Err(Error::Config("hidden_dim, batch_size and max_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }

    /// Loss weights after applying the ablation switch.
    pub fn effective_weights(&self) -> LossWeights {
        match self.ablation {
            Ablation::NoAngle => LossWeights {
                lambda1: self.lambda1,
                lambda2: 0.0,
            },
            Ablation::NoCe => LossWeights {
                lambda1: 1.0,
                lambda2: self.lambda2,
            },
            _ => LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
        }
    }

    pub fn stage2_step(&self) -> f64 {
        self.stage2_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            dim: self.feature_dim,
            seed: seed::derive_seed(self.seed, seed::FEATURES),
            context_turns: self.context_turns,
            max_tokens: self.max_tokens,
        }
    }
}

/// One record per epoch per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean of the per-batch training objective (stage one) or the
    /// full-training-set adaptation loss after the epoch (stage two).
    pub loss: f64,
    pub sup: f64,
    pub angle: f64,
    pub ce: f64,
    pub skipped_rows: usize,
    pub min_anchor_angle_deg: f64,
    pub dev_weighted_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Full-training-set adaptation loss before the first stage-two step.
    pub initial_ada_loss: Option<f64>,
    /// Epoch whose parameters were retained by dev selection (0 = before
    /// any training in this stage).
    pub selected_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

fn min_angle(anchors: &Matrix) -> Result<f64> {
    Ok(anchor_geometry(anchors)?.min_angle_deg)
}

fn dev_f1<S: Borrow<EncodedSample>>(state: &ModelState, dev: &[S]) -> Result<f64> {
    let pred = predict(state, dev)?;
    let gold: Vec<usize> = dev.iter().map(|s| s.borrow().label).collect();
    Ok(evaluate(&gold, &pred, state.classes())?.weighted_f1)
}

/// Tracks the best dev score seen so far and the state that produced it.
struct DevSelector<'a> {
    dev: Option<&'a [EncodedSample]>,
    best: Option<(f64, usize, ModelState)>,
}

impl<'a> DevSelector<'a> {
    fn new(dev: Option<&'a [EncodedSample]>) -> Self {
        DevSelector {
            dev: dev.filter(|d| !d.is_empty()),
            best: None,
        }
    }

    fn observe(&mut self, state: &ModelState, epoch: usize) -> Result<Option<f64>> {
        let Some(dev) = self.dev else { return Ok(None) };
        let f1 = dev_f1(state, dev)?;
        if self.best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            self.best = Some((f1, epoch, state.clone()));
        }
        Ok(Some(f1))
    }

    fn finish(self, state: &mut ModelState, log: &mut TrainLog) {
        if let Some((_, epoch, best)) = self.best {
            *state = best;
            log.selected_epoch = Some(epoch);
        }
    }
}

/// Stage-one objective on one batch and its gradient with respect to every
/// trainable parameter. The batch's contrastive rows are the batch
/// representations followed by the current anchors.
pub fn stage_one_gradient<S: Borrow<EncodedSample>>(
    state: &ModelState,
    batch: &[S],
    config: &TrainConfig,
) -> Result<(StageOneLoss, ModelGrad)> {
    let weights = config.effective_weights();
    let s = state.classes();
    let labels: Vec<usize> = batch.iter().map(|x| x.borrow().label).collect();
    let fwd = state.encode_batch(batch)?;
    let anchors = state.forward_anchors()?;
    let vectors = fwd.reps.vstack(&anchors.anchors)?;
    let all_labels: Vec<usize> = labels.iter().copied().chain(0..s).collect();
    let loss = stage_one_loss(
        &ContrastiveBatch::new(&vectors, &all_labels, config.tau),
        config.supcon_variant,
        &fwd.logits,
        &labels,
        weights,
        &anchors.anchors,
    )?;
    let b = batch.len();
    let grad_reps = loss.grad_vectors.slice_rows(0, b);
    let mut grad_anchors = loss.grad_vectors.slice_rows(b, b + s);
    grad_anchors.add_scaled(&loss.grad_anchors, 1.0)?;

    let mut grad = state.zero_grad();
    let grad_logits = (weights.lambda1 < 1.0).then_some(&loss.grad_logits);
    state.backward_batch(&fwd, &grad_reps, grad_logits, &mut grad)?;
    state.backward_anchors(&anchors, &grad_anchors, &mut grad)?;
    Ok((loss, grad))
}

/// Stage one: contrastive + angle + CE training of encoder, projection and
/// head. The frozen anchor hidden states are never touched.
pub fn train_stage_one(
    state: &mut ModelState,
    samples: &[EncodedSample],
    config: &TrainConfig,
    dev: Option<&[EncodedSample]>,
) -> Result<TrainLog> {
    config.validate()?;
    if state.stage() != Stage::One {
        return Err(Error::Stage("train_stage_one on a stage-two model".into()));
    }
    let mut log = TrainLog::default();
    if config.stage1_epochs == 0 {
        return Ok(log);
    }
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut rng = seed::rng_for(config.seed, seed::SHUFFLE_STAGE_ONE);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut selector = DevSelector::new(dev);
    selector.observe(state, 0)?;
    let mut optimizer = OptimizerState::new(config.optimizer, state.zero_grad().to_flat().len());

    for epoch in 1..=config.stage1_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut skipped_rows = 0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, mut grad) = stage_one_gradient(state, &batch, config)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite stage-one loss in epoch {epoch}")));
            }
            let step = optimizer.direction(&grad.to_flat())?;
            grad.set_flat(&step)?;
            state.apply_gradient(&grad, config.learning_rate)?;

            sums[0] += loss.total;
            sums[1] += loss.sup;
            sums[2] += loss.angle;
            sums[3] += loss.ce;
            skipped_rows += loss.skipped_rows;
            batches += 1;
        }
        if skipped_rows > 0 {
            log::debug!("stage one epoch {epoch}: {skipped_rows} contrastive rows without positives");
        }
        let n = batches as f64;
        let dev_weighted_f1 = selector.observe(state, epoch)?;
        log.records.push(EpochRecord {
            stage: Stage::One,
            epoch,
            loss: sums[0] / n,
            sup: sums[1] / n,
            angle: sums[2] / n,
            ce: sums[3] / n,
            skipped_rows,
            min_anchor_angle_deg: min_angle(state.current_anchors())?,
            dev_weighted_f1,
        });
    }
    selector.finish(state, &mut log);
    Ok(log)
}

/// Per-class mean of representation rows; classes without rows get `None`.
pub fn class_centers(reps: &Matrix, labels: &[usize], classes: usize) -> Result<Vec<Option<Vec<f64>>>> {
    if reps.rows() != labels.len() {
        return Err(Error::dimension("center labels", reps.rows(), labels.len()));
    }
    let mut sums = vec![vec![0.0; reps.cols()]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in reps.iter_rows().zip(labels) {
        if y >= classes {
            return Err(Error::Index {
                context: "class ids".into(),
                index: y,
                len: classes,
            });
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(sum, n)| (n > 0).then(|| sum.into_iter().map(|x| x / n as f64).collect()))
        .collect())
}

/// Freezes the encoder side and turns the anchors into free parameters,
/// initialized according to the ablation setting.
pub fn enter_stage_two(
    state: &mut ModelState,
    config: &TrainConfig,
    train_reps: &Matrix,
    train_labels: &[usize],
) -> Result<()> {
    if state.stage() != Stage::One {
        return Err(Error::Stage("model is already in stage two".into()));
    }
    let inherited = state.current_anchors().clone();
    let anchors = match config.ablation {
        Ablation::None | Ablation::NoAngle | Ablation::NoCe | Ablation::NoAdapt => inherited,
        Ablation::NoInherit => {
            let mut rng = seed::rng_for(config.seed, seed::REINIT_ANCHORS);
            let bound = 1.0 / (state.hidden_dim() as f64).sqrt();
            Matrix::uniform(inherited.rows(), inherited.cols(), bound, &mut rng)
        }
        Ablation::CenterAnchors => {
            let mut anchors = inherited;
            for (c, center) in class_centers(train_reps, train_labels, state.classes())?
                .into_iter()
                .enumerate()
            {
                if let Some(center) = center {
                    anchors.row_mut(c).copy_from_slice(&center);
                }
            }
            anchors
        }
    };
    state.begin_stage_two(anchors)
}

/// Stage two: SGD on the anchors only, with representations computed once
/// by the frozen encoder and projection.
pub fn train_stage_two(
    state: &mut ModelState,
    samples: &[EncodedSample],
    config: &TrainConfig,
    dev: Option<&[EncodedSample]>,
) -> Result<TrainLog> {
    config.validate()?;
    if state.stage() != Stage::Two {
        return Err(Error::Stage("train_stage_two before entering stage two".into()));
    }
    if matches!(config.ablation, Ablation::NoAdapt | Ablation::CenterAnchors) {
        return Err(Error::Stage(format!(
            "anchor adaptation is disabled under ablation {}",
            config.ablation
        )));
    }
    let mut log = TrainLog::default();
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let reps = state.represent(samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    log.initial_ada_loss = Some(ada_loss(&reps, state.current_anchors(), &labels, config.tau)?.value);
    if config.stage2_epochs == 0 {
        return Ok(log);
    }

    let step = config.stage2_step();
    let mut rng = seed::rng_for(config.seed, seed::SHUFFLE_STAGE_TWO);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut selector = DevSelector::new(dev);
    selector.observe(state, 0)?;
    let mut anchors = state.current_anchors().clone();
    let mut optimizer = OptimizerState::new(config.optimizer, anchors.as_slice().len());
    for epoch in 1..=config.stage2_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Matrix::zeros(chunk.len(), reps.cols());
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(reps.row(i));
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = ada_loss(&batch, &anchors, &batch_labels, config.tau)?;
            let direction = optimizer.direction(loss.grad.as_slice())?;
            anchors.add_scaled(&Matrix::from_vec(anchors.rows(), anchors.cols(), direction)?, -step)?;
            if !anchors.is_finite() {
                return Err(Error::Numeric(format!("non-finite anchors in stage-two epoch {epoch}")));
            }
        }
        state.set_anchors(anchors.clone())?;
        let full = ada_loss(&reps, &anchors, &labels, config.tau)?.value;
        let dev_weighted_f1 = selector.observe(state, epoch)?;
        log.records.push(EpochRecord {
            stage: Stage::Two,
            epoch,
            loss: full,
            sup: 0.0,
            angle: 0.0,
            ce: 0.0,
            skipped_rows: 0,
            min_anchor_angle_deg: min_angle(&anchors)?,
            dev_weighted_f1,
        });
    }
    selector.finish(state, &mut log);
    Ok(log)
}

/// Index of the anchor with the highest cosine similarity to each row;
/// ties go to the lowest class id. A zero representation scores 0 against
/// every anchor and so predicts class 0.
pub fn nearest_anchor(reps: &Matrix, anchors: &Matrix) -> Result<Vec<usize>> {
    if reps.cols() != anchors.cols() {
        return Err(Error::dimension("representation width", anchors.cols(), reps.cols()));
    }
    let (unit_anchors, _) = normalize_rows(anchors)?;
    Ok(reps
        .iter_rows()
        .map(|r| {
            let n = norm(r);
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, a) in unit_anchors.iter_rows().enumerate() {
                let sim = if n > 0.0 { dot(r, a) / n } else { 0.0 };
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Nearest-anchor prediction with the model's current anchors.
pub fn predict<S: Borrow<EncodedSample>>(state: &ModelState, samples: &[S]) -> Result<Vec<usize>> {
    let reps = state.represent(samples)?;
    nearest_anchor(&reps, state.current_anchors())
}
