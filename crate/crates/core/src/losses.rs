//! Training objectives with analytic gradients.
//!
//! All similarity-based losses work on unit-normalized rows and map their
//! gradients back through the normalization, so every loss here is
//! invariant to rescaling individual rows.

use serde::{Deserialize, Serialize};

use crate::diffmath::{arccos_safe, backprop_normalize, dot, log_sum_exp, normalize_rows, softmax, Matrix};
use crate::error::{Error, Result};

/// Scalar loss with the gradient with respect to its (single) matrix input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub grad: Matrix,
}

/// Rows of `𝒱`: utterance representations followed by one anchor per class.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub vectors: &'a Matrix,
    pub labels: &'a [usize],
    pub temperature: f64,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(vectors: &'a Matrix, labels: &'a [usize], temperature: f64) -> Self {
        ContrastiveBatch {
            vectors,
            labels,
            temperature,
        }
    }
}

/// Which form of the supervised contrastive term to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupConVariant {
    /// `-log( Σ_{p∈P(i)} e^{c_ip} / (|P(i)| Σ_{j} e^{c_ij}) )`, where the
    /// denominator runs over every row including `i` itself.
    #[default]
    Literal,
    /// `-(1/|P(i)|) Σ_{p∈P(i)} log( e^{c_ip} / Σ_{j≠i} e^{c_ij} )`.
    Conventional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupConOutput {
    pub loss: LossBundle,
    /// Rows that had no positive partner and contributed nothing.
    pub skipped_rows: usize,
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Scatter `dL/dS` for `S = U Uᵀ` (or `U Wᵀ`) back onto the unit rows.
fn scatter_similarity_grad(unit_a: &Matrix, unit_b: &Matrix, g: &Matrix, grad_a: &mut Matrix, grad_b: &mut Matrix) {
    for i in 0..unit_a.rows() {
        for j in 0..unit_b.rows() {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            for (o, &v) in grad_a.row_mut(i).iter_mut().zip(unit_b.row(j)) {
                *o += gij * v;
            }
            for (o, &v) in grad_b.row_mut(j).iter_mut().zip(unit_a.row(i)) {
                *o += gij * v;
            }
        }
    }
}

/// Anchor-augmented supervised contrastive loss, summed over every row of
/// the batch (utterances and anchors alike).
pub fn sup_loss(batch: &ContrastiveBatch<'_>, variant: SupConVariant) -> Result<SupConOutput> {
    check_temperature(batch.temperature)?;
    let v = batch.vectors;
    let n = v.rows();
    if batch.labels.len() != n {
        return Err(Error::dimension("contrastive labels", n, batch.labels.len()));
    }
    let tau = batch.temperature;
    let (unit, norms) = normalize_rows(v)?;

    let mut logits = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            logits.set(i, j, dot(unit.row(i), unit.row(j)) / tau);
        }
    }

    let mut value = 0.0;
    let mut skipped_rows = 0;
    // d loss / d cosine(i, j)
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
            .collect();
        if positives.is_empty() {
            skipped_rows += 1;
            continue;
        }
        let row = logits.row(i);
        let pos_logits: Vec<f64> = positives.iter().map(|&j| row[j]).collect();
        match variant {
            SupConVariant::Literal => {
                let lse_all = log_sum_exp(row);
                let lse_pos = log_sum_exp(&pos_logits);
                value += lse_all - lse_pos + (positives.len() as f64).ln();
                let q = softmax(row);
                let p = softmax(&pos_logits);
                for j in 0..n {
                    g.set(i, j, q[j] / tau);
                }
                for (&j, pj) in positives.iter().zip(p) {
                    g.set(i, j, g.get(i, j) - pj / tau);
                }
            }
            SupConVariant::Conventional => {
                let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| row[j]).collect();
                let lse_others = log_sum_exp(&others);
                let inv_p = 1.0 / positives.len() as f64;
                value += pos_logits.iter().map(|&c| lse_others - c).sum::<f64>() * inv_p;
                let q = softmax(&others);
                for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
                    g.set(i, j, q[k] / tau);
                }
                for &j in &positives {
                    g.set(i, j, g.get(i, j) - inv_p / tau);
                }
            }
        }
    }
    if skipped_rows == n {
        return Err(Error::Empty("no row of the contrastive batch has a positive".into()));
    }

    let mut grad_unit_a = Matrix::zeros(n, v.cols());
    let mut grad_unit_b = Matrix::zeros(n, v.cols());
    scatter_similarity_grad(&unit, &unit, &g, &mut grad_unit_a, &mut grad_unit_b);
    grad_unit_a.add_scaled(&grad_unit_b, 1.0)?;
    Ok(SupConOutput {
        loss: LossBundle {
            value,
            grad: backprop_normalize(&unit, &norms, &grad_unit_a),
        },
        skipped_rows,
    })
}

/// Mean softmax cross-entropy; the gradient is with respect to the logits.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<LossBundle> {
    let (b, s) = logits.shape();
    if b == 0 {
        return Err(Error::Empty("cross-entropy over an empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::dimension("cross-entropy labels", b, labels.len()));
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(b, s);
    for (i, &y) in labels.iter().enumerate() {
        if y >= s {
            return Err(Error::Index {
                context: "cross-entropy classes".into(),
                index: y,
                len: s,
            });
        }
        let row = logits.row(i);
        value += log_sum_exp(row) - row[y];
        let p = softmax(row);
        for (g, pj) in grad.row_mut(i).iter_mut().zip(p) {
            *g = pj / b as f64;
        }
        grad.set(i, y, grad.get(i, y) - 1.0 / b as f64);
    }
    Ok(LossBundle {
        value: value / b as f64,
        grad,
    })
}

/// Minus the mean, over anchors, of each anchor's smallest angle to any
/// other anchor. Ties in the minimum go to the lowest index and the
/// (sub)gradient flows through that single pair.
pub fn angle_loss(anchors: &Matrix) -> Result<LossBundle> {
    let s = anchors.rows();
    if s < 2 {
        return Err(Error::Config(format!("angle loss needs at least 2 anchors, got {s}")));
    }
    let (unit, norms) = normalize_rows(anchors)?;
    let mut value = 0.0;
    let mut g = Matrix::zeros(s, s);
    for i in 0..s {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in (0..s).filter(|&j| j != i) {
            let (angle, slope) = arccos_safe(dot(unit.row(i), unit.row(j)))?;
            if best.is_none_or(|(_, a, _)| angle < a) {
                best = Some((j, angle, slope));
            }
        }
        let (j, angle, slope) = best.expect("s >= 2");
        value -= angle / s as f64;
        g.set(i, j, g.get(i, j) - slope / s as f64);
    }
    let mut grad_a = Matrix::zeros(s, anchors.cols());
    let mut grad_b = Matrix::zeros(s, anchors.cols());
    scatter_similarity_grad(&unit, &unit, &g, &mut grad_a, &mut grad_b);
    grad_a.add_scaled(&grad_b, 1.0)?;
    Ok(LossBundle {
        value,
        grad: backprop_normalize(&unit, &norms, &grad_a),
    })
}

/// Mixing weights of the stage-one objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::Config(format!("lambda1 must be in [0, 1], got {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        Ok(())
    }
}

/// `λ₁ (L_sup + λ₂ L_Ag) + (1 − λ₁) L_CE` with its gradients split by input.
///
/// Terms with zero weight are not evaluated; their component value is
/// reported as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneLoss {
    pub total: f64,
    pub sup: f64,
    pub angle: f64,
    pub ce: f64,
    pub skipped_rows: usize,
    /// Weighted gradient with respect to the contrastive rows.
    pub grad_vectors: Matrix,
    /// Weighted gradient with respect to the anchors passed separately.
    pub grad_anchors: Matrix,
    /// Weighted gradient with respect to the CE logits.
    pub grad_logits: Matrix,
}

pub fn stage_one_loss(
    batch: &ContrastiveBatch<'_>,
    variant: SupConVariant,
    logits: &Matrix,
    logit_labels: &[usize],
    weights: LossWeights,
    anchors: &Matrix,
) -> Result<StageOneLoss> {
    weights.validate()?;
    let LossWeights { lambda1, lambda2 } = weights;

    let mut out = StageOneLoss {
        total: 0.0,
        sup: 0.0,
        angle: 0.0,
        ce: 0.0,
        skipped_rows: 0,
        grad_vectors: Matrix::zeros(batch.vectors.rows(), batch.vectors.cols()),
        grad_anchors: Matrix::zeros(anchors.rows(), anchors.cols()),
        grad_logits: Matrix::zeros(logits.rows(), logits.cols()),
    };
    if lambda1 > 0.0 {
        let sup = sup_loss(batch, variant)?;
        out.sup = sup.loss.value;
        out.skipped_rows = sup.skipped_rows;
        out.grad_vectors = sup.loss.grad;
        out.grad_vectors.scale(lambda1);
        out.total += lambda1 * out.sup;
        if lambda2 > 0.0 {
            let ang = angle_loss(anchors)?;
            out.angle = ang.value;
            out.grad_anchors = ang.grad;
            out.grad_anchors.scale(lambda1 * lambda2);
            out.total += lambda1 * lambda2 * out.angle;
        }
    }
    if lambda1 < 1.0 {
        let ce = ce_loss(logits, logit_labels)?;
        out.ce = ce.value;
        out.grad_logits = ce.grad;
        out.grad_logits.scale(1.0 - lambda1);
        out.total += (1.0 - lambda1) * out.ce;
    }
    Ok(out)
}

/// Anchor-adaptation loss: mean cross-entropy over temperature-scaled
/// cosine similarities between representations and anchors. The gradient
/// is with respect to the anchors only.
pub fn ada_loss(reps: &Matrix, anchors: &Matrix, labels: &[usize], temperature: f64) -> Result<LossBundle> {
    check_temperature(temperature)?;
    let b = reps.rows();
    let s = anchors.rows();
    if b == 0 {
        return Err(Error::Empty("adaptation loss over an empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::dimension("adaptation labels", b, labels.len()));
    }
    if reps.cols() != anchors.cols() {
        return Err(Error::dimension("representation width", anchors.cols(), reps.cols()));
    }
    let (unit_r, _) = normalize_rows(reps)?;
    let (unit_a, norms_a) = normalize_rows(anchors)?;
    let mut value = 0.0;
    let mut g = Matrix::zeros(b, s);
    for (i, &y) in labels.iter().enumerate() {
        if y >= s {
            return Err(Error::Index {
                context: "adaptation classes".into(),
                index: y,
                len: s,
            });
        }
        let logits: Vec<f64> = unit_a
            .iter_rows()
            .map(|a| dot(unit_r.row(i), a) / temperature)
            .collect();
        value += log_sum_exp(&logits) - logits[y];
        for (j, p) in softmax(&logits).into_iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            g.set(i, j, (p - target) / (b as f64 * temperature));
        }
    }
    let mut grad_unit_r = Matrix::zeros(b, reps.cols());
    let mut grad_unit_a = Matrix::zeros(s, anchors.cols());
    scatter_similarity_grad(&unit_r, &unit_a, &g, &mut grad_unit_r, &mut grad_unit_a);
    Ok(LossBundle {
        value: value / b as f64,
        grad: backprop_normalize(&unit_a, &norms_a, &grad_unit_a),
    })
}
