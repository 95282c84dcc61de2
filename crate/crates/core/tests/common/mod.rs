//! Brute-force reference implementations and random instance generators
//! shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use eacl::diffmath::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A contrastive batch shaped like stage one: `b` utterance rows with
/// random labels followed by `s` anchor rows labelled `0..s`.
pub struct RandomBatch {
    pub b: usize,
    pub s: usize,
    pub vectors: Matrix,
    pub labels: Vec<usize>,
    pub tau: f64,
}

pub fn random_batch(rng: &mut ChaCha8Rng) -> RandomBatch {
    let b = rng.gen_range(1..=8);
    let s = rng.gen_range(2..=6);
    let d = rng.gen_range(2..=16);
    let vectors = random_matrix(rng, b + s, d);
    let labels = (0..b).map(|_| rng.gen_range(0..s)).chain(0..s).collect();
    let tau = [0.05, 0.07, 0.1, 0.15, 0.2, 0.5][rng.gen_range(0..6)];
    RandomBatch {
        b,
        s,
        vectors,
        labels,
        tau,
    }
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for k in 0..u.len() {
        uv += u[k] * v[k];
        uu += u[k] * u[k];
        vv += v[k] * v[k];
    }
    uv / (uu.sqrt() * vv.sqrt())
}

/// Row-by-row evaluation of
/// `sum_i -log( sum_{p in P(i)} e^{c_ip} / (|P(i)| sum_{all a} e^{c_ia}) )`
/// where the inner denominator includes `a = i`. Rows without positives
/// are skipped. Returns (value, skipped rows).
pub fn sup_literal_oracle(v: &Matrix, labels: &[usize], tau: f64) -> (f64, usize) {
    let n = v.rows();
    let mut total = 0.0;
    let mut skipped = 0;
    for i in 0..n {
        let mut num = 0.0;
        let mut count = 0.0;
        let mut den = 0.0;
        for a in 0..n {
            let e = (cos(v.row(i), v.row(a)) / tau).exp();
            den += e;
            if a != i && labels[a] == labels[i] {
                num += e;
                count += 1.0;
            }
        }
        if count == 0.0 {
            skipped += 1;
            continue;
        }
        total -= (num / (count * den)).ln();
    }
    (total, skipped)
}

/// Standard supervised-contrastive form: the denominator excludes the
/// anchor row itself and the log is averaged over positives.
pub fn sup_conventional_oracle(v: &Matrix, labels: &[usize], tau: f64) -> (f64, usize) {
    let n = v.rows();
    let mut total = 0.0;
    let mut skipped = 0;
    for i in 0..n {
        let mut den = 0.0;
        for a in 0..n {
            if a != i {
                den += (cos(v.row(i), v.row(a)) / tau).exp();
            }
        }
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let mut row = 0.0;
        for &p in &positives {
            row -= ((cos(v.row(i), v.row(p)) / tau).exp() / den).ln();
        }
        total += row / positives.len() as f64;
    }
    (total, skipped)
}

pub fn ce_oracle(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z: f64 = logits.row(i).iter().map(|x| x.exp()).sum();
        total -= (logits.get(i, y).exp() / z).ln();
    }
    total / labels.len() as f64
}

pub fn angle_oracle(anchors: &Matrix) -> f64 {
    let s = anchors.rows();
    let mut total = 0.0;
    for i in 0..s {
        let mut smallest = f64::INFINITY;
        for j in 0..s {
            if j != i {
                smallest = smallest.min(cos(anchors.row(i), anchors.row(j)).clamp(-1.0, 1.0).acos());
            }
        }
        total += smallest;
    }
    -total / s as f64
}

pub fn ada_oracle(reps: &Matrix, anchors: &Matrix, labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut z = 0.0;
        for j in 0..anchors.rows() {
            z += (cos(reps.row(i), anchors.row(j)) / tau).exp();
        }
        total -= ((cos(reps.row(i), anchors.row(y)) / tau).exp() / z).ln();
    }
    total / labels.len() as f64
}

/// Per-class precision, recall and F1 straight from the definitions, plus
/// the support-weighted F1.
pub struct NaiveReport {
    pub f1: Vec<f64>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<f64>>,
}

pub fn naive_report(gold: &[usize], pred: &[usize], s: usize) -> NaiveReport {
    let mut f1 = vec![0.0; s];
    let mut support = vec![0usize; s];
    let mut confusion = vec![vec![0.0; s]; s];
    for c in 0..s {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for k in 0..gold.len() {
            match (gold[k] == c, pred[k] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        support[c] = tp + fn_;
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        f1[c] = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    for k in 0..gold.len() {
        confusion[gold[k]][pred[k]] += 1.0;
    }
    for (c, row) in confusion.iter_mut().enumerate() {
        if support[c] > 0 {
            row.iter_mut().for_each(|x| *x /= support[c] as f64);
        }
    }
    let n = gold.len() as f64;
    let weighted_f1 = (0..s).map(|c| f1[c] * support[c] as f64).sum::<f64>() / n;
    let macro_f1 = f1.iter().sum::<f64>() / s as f64;
    let accuracy = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / n;
    NaiveReport {
        f1,
        weighted_f1,
        macro_f1,
        accuracy,
        confusion,
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
