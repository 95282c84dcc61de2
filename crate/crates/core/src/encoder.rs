//! Desk-scale encoder, contrastive projection, CE head and emotion anchors.
//!
//! The anchor hidden states are computed once, from the label-word features
//! and the freshly initialized encoder, and never change afterwards. During
//! stage one the anchors are a function of the projection; during stage two
//! they are free parameters and everything else is frozen.

use std::borrow::Borrow;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSample, FeatureConfig};
use crate::diffmath::{Activation, Matrix, MlpCache, MlpGrad, MlpParams};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    encoder: MlpParams,
    proj_cl: MlpParams,
    head_ce: MlpParams,
    anchor_hidden: Matrix,
    anchors: Matrix,
    /// Anchors as projected right after initialization, kept for analysis.
    initial_anchors: Matrix,
    stage: Stage,
}

/// Gradients for every stage-one trainable block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder: MlpGrad,
    pub proj_cl: MlpGrad,
    pub head_ce: MlpGrad,
}

impl ModelGrad {
    /// Encoder, projection and head parameters in that order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.encoder.to_flat();
        out.extend(self.proj_cl.to_flat());
        out.extend(self.head_ce.to_flat());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let (e, p) = (self.encoder.param_count(), self.proj_cl.param_count());
        let expected = e + p + self.head_ce.param_count();
        if flat.len() != expected {
            return Err(Error::dimension("flat model gradient", expected, flat.len()));
        }
        self.encoder.set_flat(&flat[..e])?;
        self.proj_cl.set_flat(&flat[e..e + p])?;
        self.head_ce.set_flat(&flat[e + p..])
    }
}

/// Forward pass over a batch with everything needed for backward.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub hidden: Matrix,
    pub reps: Matrix,
    pub logits: Matrix,
    encoder_caches: Vec<MlpCache>,
    proj_caches: Vec<MlpCache>,
    head_caches: Vec<MlpCache>,
}

/// Projected anchors with the caches of the projection.
#[derive(Debug, Clone)]
pub struct AnchorForward {
    pub anchors: Matrix,
    caches: Vec<MlpCache>,
}

fn features_matrix<S: Borrow<EncodedSample>>(samples: &[S], dim: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(samples.len(), dim);
    for (i, s) in samples.iter().enumerate() {
        let s = s.borrow();
        if s.features.len() != dim {
            return Err(Error::dimension(
                format!("features of sample {i} ({}#{})", s.conversation_id, s.turn_index),
                dim,
                s.features.len(),
            ));
        }
        m.row_mut(i).copy_from_slice(&s.features);
    }
    Ok(m)
}

/// Builds a fresh stage-one model. `label_features` holds one featurized
/// label word per row.
pub fn init_model(
    feature_dim: usize,
    hidden_dim: usize,
    classes: usize,
    label_features: &Matrix,
    seed: u64,
) -> Result<ModelState> {
    if label_features.shape() != (classes, feature_dim) {
        return Err(Error::dimension(
            "label feature matrix",
            classes * feature_dim,
            label_features.rows() * label_features.cols(),
        ));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let mut rng = seed::rng_for(seed, seed::INIT);
    let encoder = MlpParams::init_uniform(&[feature_dim, hidden_dim, hidden_dim], Activation::Tanh, &mut rng)?;
    let proj_cl = MlpParams::init_uniform(&[hidden_dim, hidden_dim, hidden_dim], Activation::Tanh, &mut rng)?;
    let head_ce = MlpParams::init_uniform(&[hidden_dim, classes], Activation::Tanh, &mut rng)?;
    let anchor_hidden = encoder.apply_rows(label_features)?;
    let anchors = proj_cl.apply_rows(&anchor_hidden)?;
    Ok(ModelState {
        encoder,
        proj_cl,
        head_ce,
        anchor_hidden,
        initial_anchors: anchors.clone(),
        anchors,
        stage: Stage::One,
    })
}

impl ModelState {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.anchor_hidden.rows()
    }

    pub fn encoder(&self) -> &MlpParams {
        &self.encoder
    }

    pub fn proj_cl(&self) -> &MlpParams {
        &self.proj_cl
    }

    pub fn head_ce(&self) -> &MlpParams {
        &self.head_ce
    }

    pub fn anchor_hidden(&self) -> &Matrix {
        &self.anchor_hidden
    }

    pub fn initial_anchors(&self) -> &Matrix {
        &self.initial_anchors
    }

    /// Stage one: projection of the frozen anchor hidden states under the
    /// current projection. Stage two: the free anchor parameters.
    pub fn current_anchors(&self) -> &Matrix {
        &self.anchors
    }

    fn require_stage(&self, stage: Stage, what: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Stage(format!(
                "{what} requires stage {stage:?}, model is in stage {:?}",
                self.stage
            )));
        }
        Ok(())
    }

    fn check_same_shape(current: &MlpParams, new: &MlpParams, what: &str) -> Result<()> {
        let dims = |m: &MlpParams| -> Vec<(usize, usize)> {
            m.layers.iter().map(|l| l.weight.shape()).collect()
        };
        if dims(current) != dims(new) || current.activation != new.activation {
            return Err(Error::dimension(what, current.param_count(), new.param_count()));
        }
        Ok(())
    }

    pub fn set_encoder(&mut self, params: MlpParams) -> Result<()> {
        self.require_stage(Stage::One, "updating the encoder")?;
        Self::check_same_shape(&self.encoder, &params, "encoder parameters")?;
        self.encoder = params;
        Ok(())
    }

    pub fn set_proj_cl(&mut self, params: MlpParams) -> Result<()> {
        self.require_stage(Stage::One, "updating the projection")?;
        Self::check_same_shape(&self.proj_cl, &params, "projection parameters")?;
        self.proj_cl = params;
        self.refresh_anchors()
    }

    pub fn set_head_ce(&mut self, params: MlpParams) -> Result<()> {
        self.require_stage(Stage::One, "updating the classification head")?;
        Self::check_same_shape(&self.head_ce, &params, "head parameters")?;
        self.head_ce = params;
        Ok(())
    }

    /// Replaces the free anchors. Stage two only.
    pub fn set_anchors(&mut self, anchors: Matrix) -> Result<()> {
        self.require_stage(Stage::Two, "setting free anchors")?;
        if anchors.shape() != self.anchors.shape() {
            return Err(Error::dimension(
                "anchor matrix",
                self.anchors.rows() * self.anchors.cols(),
                anchors.rows() * anchors.cols(),
            ));
        }
        self.anchors = anchors;
        Ok(())
    }

    fn refresh_anchors(&mut self) -> Result<()> {
        self.anchors = self.proj_cl.apply_rows(&self.anchor_hidden)?;
        Ok(())
    }

    /// SGD step on all stage-one blocks: `θ -= lr * g`.
    pub(crate) fn apply_gradient(&mut self, grad: &ModelGrad, learning_rate: f64) -> Result<()> {
        self.require_stage(Stage::One, "stage-one update")?;
        self.encoder.add_scaled(&grad.encoder, -learning_rate)?;
        self.proj_cl.add_scaled(&grad.proj_cl, -learning_rate)?;
        self.head_ce.add_scaled(&grad.head_ce, -learning_rate)?;
        if !(self.encoder.is_finite() && self.proj_cl.is_finite() && self.head_ce.is_finite()) {
            return Err(Error::Numeric("non-finite parameters after update".into()));
        }
        self.refresh_anchors()
    }

    /// Switches to stage two with the given starting anchors.
    pub(crate) fn begin_stage_two(&mut self, anchors: Matrix) -> Result<()> {
        self.require_stage(Stage::One, "entering stage two")?;
        if anchors.shape() != self.anchors.shape() {
            return Err(Error::dimension(
                "stage-two anchors",
                self.anchors.rows() * self.anchors.cols(),
                anchors.rows() * anchors.cols(),
            ));
        }
        self.stage = Stage::Two;
        self.anchors = anchors;
        Ok(())
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            encoder: self.encoder.zeros_like(),
            proj_cl: self.proj_cl.zeros_like(),
            head_ce: self.head_ce.zeros_like(),
        }
    }

    /// Checks that all blocks chain `f → d → d` and `d → s`.
    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim();
        let s = self.classes();
        if self.proj_cl.input_dim() != d || self.proj_cl.output_dim() != d {
            return Err(Error::dimension("projection width", d, self.proj_cl.output_dim()));
        }
        if self.head_ce.input_dim() != d {
            return Err(Error::dimension("head input", d, self.head_ce.input_dim()));
        }
        if self.head_ce.output_dim() != s {
            return Err(Error::dimension("head output", s, self.head_ce.output_dim()));
        }
        for (m, what) in [
            (&self.anchor_hidden, "anchor hidden states"),
            (&self.anchors, "anchors"),
            (&self.initial_anchors, "initial anchors"),
        ] {
            if m.shape() != (s, d) {
                return Err(Error::dimension(what, s * d, m.rows() * m.cols()));
            }
        }
        Ok(())
    }

    /// Stage-one forward over a batch, retaining caches for backward.
    pub fn encode_batch<S: Borrow<EncodedSample>>(&self, samples: &[S]) -> Result<BatchForward> {
        self.require_stage(Stage::One, "encode_batch")?;
        let x = features_matrix(samples, self.feature_dim())?;
        let d = self.hidden_dim();
        let mut hidden = Matrix::zeros(samples.len(), d);
        let mut reps = Matrix::zeros(samples.len(), d);
        let mut logits = Matrix::zeros(samples.len(), self.classes());
        let mut encoder_caches = Vec::with_capacity(samples.len());
        let mut proj_caches = Vec::with_capacity(samples.len());
        let mut head_caches = Vec::with_capacity(samples.len());
        for (i, xi) in x.iter_rows().enumerate() {
            let (h, ec) = self.encoder.forward(xi)?;
            let (r, pc) = self.proj_cl.forward(&h)?;
            let (l, hc) = self.head_ce.forward(&h)?;
            hidden.row_mut(i).copy_from_slice(&h);
            reps.row_mut(i).copy_from_slice(&r);
            logits.row_mut(i).copy_from_slice(&l);
            encoder_caches.push(ec);
            proj_caches.push(pc);
            head_caches.push(hc);
        }
        Ok(BatchForward {
            hidden,
            reps,
            logits,
            encoder_caches,
            proj_caches,
            head_caches,
        })
    }

    /// Anchor projection with caches, for routing anchor gradients into the
    /// projection.
    pub fn forward_anchors(&self) -> Result<AnchorForward> {
        self.require_stage(Stage::One, "forward_anchors")?;
        let mut anchors = Matrix::zeros(self.classes(), self.hidden_dim());
        let mut caches = Vec::with_capacity(self.classes());
        for (i, h) in self.anchor_hidden.iter_rows().enumerate() {
            let (a, c) = self.proj_cl.forward(h)?;
            anchors.row_mut(i).copy_from_slice(&a);
            caches.push(c);
        }
        Ok(AnchorForward { anchors, caches })
    }

    /// Accumulates gradients from `d loss / d reps` and optionally
    /// `d loss / d logits` into `grad`.
    pub fn backward_batch(
        &self,
        fwd: &BatchForward,
        grad_reps: &Matrix,
        grad_logits: Option<&Matrix>,
        grad: &mut ModelGrad,
    ) -> Result<()> {
        if grad_reps.shape() != fwd.reps.shape() {
            return Err(Error::dimension(
                "representation gradient rows",
                fwd.reps.rows(),
                grad_reps.rows(),
            ));
        }
        if let Some(gl) = grad_logits {
            if gl.shape() != fwd.logits.shape() {
                return Err(Error::dimension("logit gradient rows", fwd.logits.rows(), gl.rows()));
            }
        }
        for i in 0..fwd.reps.rows() {
            let mut grad_hidden = self
                .proj_cl
                .backward_into(&fwd.proj_caches[i], grad_reps.row(i), &mut grad.proj_cl)?;
            if let Some(gl) = grad_logits {
                let from_head =
                    self.head_ce
                        .backward_into(&fwd.head_caches[i], gl.row(i), &mut grad.head_ce)?;
                for (a, b) in grad_hidden.iter_mut().zip(&from_head) {
                    *a += b;
                }
            }
            self.encoder
                .backward_into(&fwd.encoder_caches[i], &grad_hidden, &mut grad.encoder)?;
        }
        Ok(())
    }

    /// Routes `d loss / d anchors` into the projection only; the anchor
    /// hidden states are frozen.
    pub fn backward_anchors(
        &self,
        fwd: &AnchorForward,
        grad_anchors: &Matrix,
        grad: &mut ModelGrad,
    ) -> Result<()> {
        if grad_anchors.shape() != fwd.anchors.shape() {
            return Err(Error::dimension("anchor gradient rows", fwd.anchors.rows(), grad_anchors.rows()));
        }
        for (i, cache) in fwd.caches.iter().enumerate() {
            self.proj_cl
                .backward_into(cache, grad_anchors.row(i), &mut grad.proj_cl)?;
        }
        Ok(())
    }

    /// Representations with the current encoder and projection, usable in
    /// either stage.
    pub fn represent<S: Borrow<EncodedSample>>(&self, samples: &[S]) -> Result<Matrix> {
        let x = features_matrix(samples, self.feature_dim())?;
        let hidden = self.encoder.apply_rows(&x)?;
        self.proj_cl.apply_rows(&hidden)
    }

    /// CE head logits, computed from the hidden state (not the projection).
    pub fn ce_logits<S: Borrow<EncodedSample>>(&self, samples: &[S]) -> Result<Matrix> {
        let x = features_matrix(samples, self.feature_dim())?;
        let hidden = self.encoder.apply_rows(&x)?;
        self.head_ce.apply_rows(&hidden)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model container: JSON with every parameter array, the stage tag,
/// the featurization settings and the hash of the producing configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub labels: Vec<String>,
    pub features: FeatureConfig,
    pub model: ModelState,
}

impl Checkpoint {
    pub fn new(model: ModelState, labels: Vec<String>, features: FeatureConfig, config_hash: String) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            stage: model.stage(),
            config_hash,
            labels,
            features,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        ckpt.check()?;
        Ok(ckpt)
    }

    fn check(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        if self.stage != self.model.stage() {
            return Err(Error::Schema("checkpoint stage tag disagrees with model".into()));
        }
        if self.labels.len() != self.model.classes() {
            return Err(Error::dimension("checkpoint labels", self.model.classes(), self.labels.len()));
        }
        if self.features.dim != self.model.feature_dim() {
            return Err(Error::dimension("checkpoint feature dim", self.model.feature_dim(), self.features.dim));
        }
        self.model.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Schema(e.to_string()))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        ckpt.check()?;
        Ok(ckpt)
    }
}
