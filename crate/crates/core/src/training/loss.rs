//! Batch losses over an `[n_images × n_queries]` score matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use bindlab_tensor::{Graph, Tensor, Var};

use super::labels::LabelMatrix;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    SigmoidBce,
    Nce,
}

impl LossKind {
    pub const ALL: [LossKind; 2] = [LossKind::SigmoidBce, LossKind::Nce];

    pub fn short_name(self) -> &'static str {
        match self {
            LossKind::SigmoidBce => "bce",
            LossKind::Nce => "nce",
        }
    }

    pub fn record(self, g: &mut Graph, scores: Var, labels: &LabelMatrix, scale: f64) -> Result<Var> {
        match self {
            LossKind::SigmoidBce => sigmoid_bce_loss(g, scores, labels, scale),
            LossKind::Nce => nce_loss(g, scores, labels, scale),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for LossKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" | "sigmoid_bce" => Ok(LossKind::SigmoidBce),
            "nce" => Ok(LossKind::Nce),
            other => Err(CoreError::Config(format!("unknown loss `{other}`"))),
        }
    }
}

fn check_shape(g: &Graph, scores: Var, labels: &LabelMatrix) -> Result<(usize, usize)> {
    match g.shape(scores) {
        [r, c] if *r == labels.rows && *c == labels.cols => Ok((*r, *c)),
        other => Err(CoreError::Contract(format!(
            "scores have shape {other:?}, labels are {}×{}",
            labels.rows, labels.cols
        ))),
    }
}

/// Mean over entries of the binary cross-entropy of `sigmoid(s·score)`
/// against the label, computed as `softplus(z) − y·z` with `z = s·score`.
pub fn sigmoid_bce_loss(g: &mut Graph, scores: Var, labels: &LabelMatrix, scale: f64) -> Result<Var> {
    let (r, c) = check_shape(g, scores, labels)?;
    let z = g.scale(scores, scale);
    let sp = g.softplus(z);
    let y = Tensor::from_vec(vec![r, c], labels.as_f64())?;
    let yz = g.mul_const(z, &y)?;
    let per = g.sub(sp, yz)?;
    Ok(g.mean(per))
}

/// Symmetric multi-positive InfoNCE: for each image, `−log` of the softmax
/// mass over queries that falls on its positives, averaged; the same over
/// the columns; the two averages are halved and summed.
pub fn nce_loss(g: &mut Graph, scores: Var, labels: &LabelMatrix, scale: f64) -> Result<Var> {
    check_shape(g, scores, labels)?;
    if let Some(r) = (0..labels.rows).find(|&i| !labels.row_has_positive(i)) {
        return Err(CoreError::Contract(format!("image row {r} has no positive query")));
    }
    if let Some(c) = (0..labels.cols).find(|&j| !labels.col_has_positive(j)) {
        return Err(CoreError::Contract(format!("query column {c} has no positive image")));
    }
    let z = g.scale(scores, scale);
    let mut halves = Vec::with_capacity(2);
    for axis in [1, 0] {
        let all = g.logsumexp(z, axis, None)?;
        let pos = g.logsumexp(z, axis, Some(&labels.values))?;
        let nll = g.sub(all, pos)?;
        halves.push(g.mean(nll));
    }
    let total = g.add(halves[0], halves[1])?;
    Ok(g.scale(total, 0.5))
}
