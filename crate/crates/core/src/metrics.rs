//! Classification metrics, anchor geometry, and embedding export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::{arccos_safe, dot, normalize_rows, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighted_f1: f64,
    /// Unweighted mean of the per-class F1 scores.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub support: Vec<usize>,
    /// Row `i`, column `j`: share of class-`i` items predicted as `j`.
    pub confusion: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(gold: &[usize], pred: &[usize], classes: usize) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    if gold.len() != pred.len() {
        return Err(Error::dimension("predictions", gold.len(), pred.len()));
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        for label in [g, p] {
            if label >= classes {
                return Err(Error::Index {
                    context: "class ids".into(),
                    index: label,
                    len: classes,
                });
            }
        }
        counts[g][p] += 1;
    }

    let support: Vec<usize> = counts.iter().map(|row| row.iter().sum()).collect();
    let predicted: Vec<usize> = (0..classes)
        .map(|c| counts.iter().map(|row| row[c]).sum())
        .collect();
    let precision: Vec<f64> = (0..classes).map(|c| ratio(counts[c][c], predicted[c])).collect();
    let recall: Vec<f64> = (0..classes).map(|c| ratio(counts[c][c], support[c])).collect();
    let per_class_f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();

    let total = gold.len() as f64;
    let weighted_f1 = per_class_f1
        .iter()
        .zip(&support)
        .map(|(f, &n)| f * n as f64)
        .sum::<f64>()
        / total;
    let macro_f1 = per_class_f1.iter().sum::<f64>() / classes as f64;
    let accuracy = (0..classes).map(|c| counts[c][c]).sum::<usize>() as f64 / total;
    let confusion = counts
        .iter()
        .zip(&support)
        .map(|(row, &n)| row.iter().map(|&x| ratio(x, n)).collect())
        .collect();

    Ok(EvalReport {
        weighted_f1,
        macro_f1,
        accuracy,
        per_class_f1,
        precision,
        recall,
        support,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGeometry {
    pub cosine: Vec<Vec<f64>>,
    pub angle_deg: Vec<Vec<f64>>,
    pub min_angle_deg: f64,
    pub min_pair: (usize, usize),
}

/// Pairwise cosines and angles (degrees) between anchor rows.
pub fn anchor_geometry(anchors: &Matrix) -> Result<AnchorGeometry> {
    let s = anchors.rows();
    if s < 2 {
        return Err(Error::Config(format!("anchor geometry needs at least 2 anchors, got {s}")));
    }
    let (unit, _) = normalize_rows(anchors)?;
    let mut cosine = vec![vec![0.0; s]; s];
    let mut angle_deg = vec![vec![0.0; s]; s];
    let mut min_angle_deg = f64::INFINITY;
    let mut min_pair = (0, 1);
    for i in 0..s {
        cosine[i][i] = 1.0;
        for j in (i + 1)..s {
            let c = dot(unit.row(i), unit.row(j)).clamp(-1.0, 1.0);
            let a = arccos_safe(c)?.0.to_degrees();
            cosine[i][j] = c;
            cosine[j][i] = c;
            angle_deg[i][j] = a;
            angle_deg[j][i] = a;
            if a < min_angle_deg {
                min_angle_deg = a;
                min_pair = (i, j);
            }
        }
    }
    Ok(AnchorGeometry {
        cosine,
        angle_deg,
        min_angle_deg,
        min_pair,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingRole {
    Utterance,
    Anchor,
}

impl EmbeddingRole {
    fn as_str(self) -> &'static str {
        match self {
            EmbeddingRole::Utterance => "utterance",
            EmbeddingRole::Anchor => "anchor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub role: EmbeddingRole,
    pub class_id: usize,
    pub values: Vec<f64>,
}

/// Writes utterance representations followed by anchors.
///
/// Format: a header `dim=<d> classes=<s>`, then one comma-separated row per
/// item: `role,class_id,v_1,...,v_d` with 9 significant digits.
pub fn write_embeddings<W: Write>(reps: &Matrix, labels: &[usize], anchors: &Matrix, mut w: W) -> Result<()> {
    if reps.rows() != labels.len() {
        return Err(Error::dimension("embedding labels", reps.rows(), labels.len()));
    }
    if reps.rows() > 0 && reps.cols() != anchors.cols() {
        return Err(Error::dimension("embedding width", anchors.cols(), reps.cols()));
    }
    let io = |e| Error::io("<embeddings>", e);
    writeln!(w, "dim={} classes={}", anchors.cols(), anchors.rows()).map_err(io)?;
    let rows = reps
        .iter_rows()
        .zip(labels.iter().copied())
        .map(|(r, c)| (EmbeddingRole::Utterance, c, r))
        .chain(anchors.iter_rows().enumerate().map(|(c, a)| (EmbeddingRole::Anchor, c, a)));
    for (role, class, values) in rows {
        write!(w, "{},{}", role.as_str(), class).map_err(io)?;
        for v in values {
            write!(w, ",{v:.8e}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn export_embeddings(reps: &Matrix, labels: &[usize], anchors: &Matrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(reps, labels, anchors, BufWriter::new(file))
}

pub fn load_embeddings(path: &Path) -> Result<(usize, usize, Vec<EmbeddingRow>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file))
}

/// Parses the embedding export back into `(dim, classes, rows)`.
pub fn read_embeddings<R: BufRead>(reader: R) -> Result<(usize, usize, Vec<EmbeddingRow>)> {
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(Error::Empty("embedding file has no header".into())),
    };
    let mut dim = None;
    let mut classes = None;
    for part in header.split_whitespace() {
        match part.split_once('=') {
            Some(("dim", v)) => dim = v.parse().ok(),
            Some(("classes", v)) => classes = v.parse().ok(),
            _ => return Err(parse_err(1, format!("unexpected header field {part:?}"))),
        }
    }
    let (dim, classes) = dim
        .zip(classes)
        .ok_or_else(|| parse_err(1, "header must be `dim=<d> classes=<s>`".into()))?;
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(line_no, format!("expected {} fields, found {}", dim + 2, fields.len())));
        }
        let role = match fields[0] {
            "utterance" => EmbeddingRole::Utterance,
            "anchor" => EmbeddingRole::Anchor,
            other => return Err(parse_err(line_no, format!("unknown role {other:?}"))),
        };
        let class_id = fields[1]
            .parse()
            .map_err(|e| parse_err(line_no, format!("class id: {e}")))?;
        let values = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(line_no, format!("value: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            role,
            class_id,
            values,
        });
    }
    Ok((dim, classes, rows))
}
