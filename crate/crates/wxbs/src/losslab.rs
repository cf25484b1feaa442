//! Reference kernels for hard-negative descriptor losses.
//!
//! A batch holds `n` matching descriptor pairs `(a_i, b_i)`, exactly one
//! pair per identity. The hardest non-matching descriptor is mined per
//! pair from the pairwise distance matrix, forming triplets that feed the
//! loss kernels. Gradients are analytic, with mining held fixed during
//! differentiation, and are checked against central finite differences in
//! the tests.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("anchors and positives must have equal counts and dimensions")]
    ShapeMismatch,
    #[error("batch must contain at least 2 pairs for mining, got {0}")]
    TooSmall(usize),
    #[error("descriptor row {0} is not unit-normalized (|norm - 1| = {1:.3e})")]
    NotUnit(usize, f64),
    #[error("descriptor entries must be finite")]
    NonFinite,
}

/// How descriptor distances are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    /// `sqrt(max(0, 2 - 2 <a, b>))`, the Euclidean distance of unit vectors.
    UnitDot,
    /// Plain Euclidean distance; used for raw planar points.
    Euclidean,
}

/// A batch of matching descriptor pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    anchors: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    metric: Metric,
}

impl Batch {
    /// Batch of unit-normalized descriptors; rows are validated to unit
    /// norm within 1e-6.
    pub fn unit(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>) -> Result<Self, LossError> {
        let b = Self::validated(anchors, positives, Metric::UnitDot)?;
        for (i, row) in b.anchors.iter().chain(b.positives.iter()).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(LossError::NotUnit(i, (norm - 1.0).abs()));
            }
        }
        Ok(b)
    }

    /// Batch of raw points with plain Euclidean distances (toy mode skips
    /// unit normalization).
    pub fn planar(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>) -> Result<Self, LossError> {
        Self::validated(anchors, positives, Metric::Euclidean)
    }

    fn validated(
        anchors: Vec<Vec<f64>>,
        positives: Vec<Vec<f64>>,
        metric: Metric,
    ) -> Result<Self, LossError> {
        if anchors.len() != positives.len() || anchors.is_empty() {
            return Err(LossError::ShapeMismatch);
        }
        if anchors.len() < 2 {
            return Err(LossError::TooSmall(anchors.len()));
        }
        let dim = anchors[0].len();
        if dim == 0
            || anchors.iter().any(|r| r.len() != dim)
            || positives.iter().any(|r| r.len() != dim)
        {
            return Err(LossError::ShapeMismatch);
        }
        if anchors
            .iter()
            .chain(positives.iter())
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(LossError::NonFinite);
        }
        Ok(Self {
            anchors,
            positives,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn positives(&self) -> &[Vec<f64>] {
        &self.positives
    }

    fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.metric {
            Metric::UnitDot => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (2.0 - 2.0 * dot).max(0.0).sqrt()
            }
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// d(dist)/d(a) and d(dist)/d(b) for the batch metric, with a zero
    /// subgradient at coincident points.
    fn dist_grad(&self, a: &[f64], b: &[f64], d: f64) -> (Vec<f64>, Vec<f64>) {
        let dim = a.len();
        if d < 1e-12 {
            return (vec![0.0; dim], vec![0.0; dim]);
        }
        match self.metric {
            Metric::UnitDot => (
                b.iter().map(|&v| -v / d).collect(),
                a.iter().map(|&v| -v / d).collect(),
            ),
            Metric::Euclidean => (
                a.iter().zip(b).map(|(x, y)| (x - y) / d).collect(),
                a.iter().zip(b).map(|(x, y)| (y - x) / d).collect(),
            ),
        }
    }
}

/// `D[(i, j)] = d(a_i, b_j)`.
pub fn distance_matrix(batch: &Batch) -> DMatrix<f64> {
    let n = batch.len();
    DMatrix::from_fn(n, n, |i, j| {
        batch.dist(&batch.anchors[i], &batch.positives[j])
    })
}

/// Which side of the distance matrix the hardest negative came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSide {
    /// `b_j` with `j = argmin_{j != i} d(a_i, b_j)`.
    Row,
    /// `a_k` with `k = argmin_{k != i} d(a_k, b_i)`.
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardNegative {
    /// Index of the hardest negative descriptor (j or k above).
    pub index: usize,
    pub side: NegativeSide,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Per-pair hardest negatives mined from a distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet(pub Vec<HardNegative>);

/// Mines the closest non-matching descriptor per pair: the minimum over
/// row `i` and column `i` of `D` (diagonal excluded), ties broken toward
/// the row.
pub fn hardest_in_batch(d: &DMatrix<f64>) -> Result<TripletSet, LossError> {
    let n = d.nrows();
    if n < 2 || d.ncols() != n {
        return Err(LossError::TooSmall(n));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut j_min = usize::MAX;
        let mut row_min = f64::INFINITY;
        for j in 0..n {
            if j != i && d[(i, j)] < row_min {
                row_min = d[(i, j)];
                j_min = j;
            }
        }
        let mut k_min = usize::MAX;
        let mut col_min = f64::INFINITY;
        for k in 0..n {
            if k != i && d[(k, i)] < col_min {
                col_min = d[(k, i)];
                k_min = k;
            }
        }
        let (index, side, d_neg) = if row_min <= col_min {
            (j_min, NegativeSide::Row, row_min)
        } else {
            (k_min, NegativeSide::Column, col_min)
        };
        out.push(HardNegative {
            index,
            side,
            d_pos: d[(i, i)],
            d_neg,
        });
    }
    Ok(TripletSet(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    TripletMargin,
    /// Same value as [`LossKind::TripletMargin`]; the gradient treats the
    /// hardest-negative descriptor as constant.
    HardNegC,
    Contrastive,
    Softmin,
    PosDist,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "triplet_margin" => Some(Self::TripletMargin),
            "hardnegc" => Some(Self::HardNegC),
            "contrastive" => Some(Self::Contrastive),
            "softmin" => Some(Self::Softmin),
            "posdist" => Some(Self::PosDist),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TripletMargin => "triplet_margin",
            Self::HardNegC => "hardnegc",
            Self::Contrastive => "contrastive",
            Self::Softmin => "softmin",
            Self::PosDist => "posdist",
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn per_pair_loss(kind: LossKind, d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    match kind {
        LossKind::TripletMargin | LossKind::HardNegC => (margin + d_pos - d_neg).max(0.0),
        LossKind::Contrastive => d_pos + (margin - d_neg).max(0.0),
        LossKind::Softmin => softplus(d_pos - d_neg),
        LossKind::PosDist => d_pos,
    }
}

/// d(loss)/d(d_pos) and d(loss)/d(d_neg) for one pair.
fn per_pair_loss_grad(kind: LossKind, d_pos: f64, d_neg: f64, margin: f64) -> (f64, f64) {
    match kind {
        LossKind::TripletMargin | LossKind::HardNegC => {
            if margin + d_pos - d_neg > 0.0 {
                (1.0, -1.0)
            } else {
                (0.0, 0.0)
            }
        }
        LossKind::Contrastive => {
            let gneg = if margin - d_neg > 0.0 { -1.0 } else { 0.0 };
            (1.0, gneg)
        }
        LossKind::Softmin => {
            let s = sigmoid(d_pos - d_neg);
            (s, -s)
        }
        LossKind::PosDist => (1.0, 0.0),
    }
}

/// Batch loss: mean of the per-pair losses over hardest-in-batch triplets.
pub fn loss(batch: &Batch, kind: LossKind, margin: f64) -> Result<f64, LossError> {
    let d = distance_matrix(batch);
    let triplets = hardest_in_batch(&d)?;
    Ok(loss_from_triplets(&triplets, kind, margin))
}

fn loss_from_triplets(triplets: &TripletSet, kind: LossKind, margin: f64) -> f64 {
    let n = triplets.0.len() as f64;
    triplets
        .0
        .iter()
        .map(|t| per_pair_loss(kind, t.d_pos, t.d_neg, margin))
        .sum::<f64>()
        / n
}

/// Per-descriptor analytic gradients `(d loss / d anchors, d loss / d
/// positives)`. Mining is treated as constant. For
/// [`LossKind::HardNegC`], contributions flowing into the hardest-negative
/// descriptor are zeroed (`dL/dN := 0`); the anchor side of the negative
/// distance still receives gradient.
pub fn loss_gradient(
    batch: &Batch,
    kind: LossKind,
    margin: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), LossError> {
    let d = distance_matrix(batch);
    let triplets = hardest_in_batch(&d)?;
    let n = batch.len();
    let dim = batch.anchors[0].len();
    let scale = 1.0 / n as f64;
    let mut grad_a = vec![vec![0.0; dim]; n];
    let mut grad_b = vec![vec![0.0; dim]; n];

    for (i, t) in triplets.0.iter().enumerate() {
        let (g_pos, g_neg) = per_pair_loss_grad(kind, t.d_pos, t.d_neg, margin);

        if g_pos != 0.0 {
            let (da, db) = batch.dist_grad(&batch.anchors[i], &batch.positives[i], t.d_pos);
            for k in 0..dim {
                grad_a[i][k] += scale * g_pos * da[k];
                grad_b[i][k] += scale * g_pos * db[k];
            }
        }
        if g_neg != 0.0 {
            match t.side {
                NegativeSide::Row => {
                    // d_neg = d(a_i, b_j)
                    let j = t.index;
                    let (da, db) =
                        batch.dist_grad(&batch.anchors[i], &batch.positives[j], t.d_neg);
                    for k in 0..dim {
                        grad_a[i][k] += scale * g_neg * da[k];
                        if kind != LossKind::HardNegC {
                            grad_b[j][k] += scale * g_neg * db[k];
                        }
                    }
                }
                NegativeSide::Column => {
                    // d_neg = d(a_k, b_i)
                    let kidx = t.index;
                    let (da, db) =
                        batch.dist_grad(&batch.anchors[kidx], &batch.positives[i], t.d_neg);
                    for k in 0..dim {
                        if kind != LossKind::HardNegC {
                            grad_a[kidx][k] += scale * g_neg * da[k];
                        }
                        grad_b[i][k] += scale * g_neg * db[k];
                    }
                }
            }
        }
    }
    Ok((grad_a, grad_b))
}

/// Adam hyperparameters of the toy optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One iterate of the toy optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub anchors: Vec<[f64; 2]>,
    pub positives: Vec<[f64; 2]>,
    pub loss: f64,
}

/// Minimizes the chosen loss over raw 2-D points with Adam, returning all
/// iterates (`steps + 1` states including the initial one). Distances are
/// plain Euclidean; points are not normalized. Triplets are re-mined every
/// step and held fixed within a step.
pub fn toy_optimize(
    anchors: Vec<[f64; 2]>,
    positives: Vec<[f64; 2]>,
    kind: LossKind,
    margin: f64,
    steps: usize,
    adam: &AdamParams,
) -> Result<Vec<ToyState>, LossError> {
    let mut a: Vec<Vec<f64>> = anchors.iter().map(|p| p.to_vec()).collect();
    let mut b: Vec<Vec<f64>> = positives.iter().map(|p| p.to_vec()).collect();
    let n = a.len();
    let dims = 2 * n * 2;
    let mut m = vec![0.0; dims];
    let mut v = vec![0.0; dims];

    let snapshot = |a: &[Vec<f64>], b: &[Vec<f64>], loss: f64| ToyState {
        anchors: a.iter().map(|p| [p[0], p[1]]).collect(),
        positives: b.iter().map(|p| [p[0], p[1]]).collect(),
        loss,
    };

    let batch = Batch::planar(a.clone(), b.clone())?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(snapshot(&a, &b, loss(&batch, kind, margin)?));

    for step in 1..=steps {
        let batch = Batch::planar(a.clone(), b.clone())?;
        let (ga, gb) = loss_gradient(&batch, kind, margin)?;
        let flat_grad: Vec<f64> = ga
            .iter()
            .flatten()
            .chain(gb.iter().flatten())
            .copied()
            .collect();
        let t = step as f64;
        let bias1 = 1.0 - adam.beta1.powf(t);
        let bias2 = 1.0 - adam.beta2.powf(t);
        for (idx, g) in flat_grad.iter().enumerate() {
            m[idx] = adam.beta1 * m[idx] + (1.0 - adam.beta1) * g;
            v[idx] = adam.beta2 * v[idx] + (1.0 - adam.beta2) * g * g;
            let update = adam.lr * (m[idx] / bias1) / ((v[idx] / bias2).sqrt() + adam.eps);
            let (pair, coord) = (idx / 2 % n, idx % 2);
            if idx < 2 * n {
                a[pair][coord] -= update;
            } else {
                b[pair][coord] -= update;
            }
        }
        let batch = Batch::planar(a.clone(), b.clone())?;
        states.push(snapshot(&a, &b, loss(&batch, kind, margin)?));
    }
    Ok(states)
}

/// Mean positive-pair distance of a toy state.
pub fn mean_positive_distance(state: &ToyState) -> f64 {
    let n = state.anchors.len() as f64;
    state
        .anchors
        .iter()
        .zip(&state.positives)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n
}
