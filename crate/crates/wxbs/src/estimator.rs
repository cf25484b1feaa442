//! Two-view geometric model estimation.
//!
//! Minimal solvers (4-point homography DLT, 7- and 8-point fundamental),
//! residual functions, LO-RANSAC with dominant-plane degeneracy handling
//! and automatic model selection, and the local-affine-frame consistency
//! check that validates whole frames rather than bare centers.

use crate::affine::LocalAffineFrame;
use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample as rand_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("no model with more than minimal support was found")]
    NoConsensus,
    #[error("residual kind {residual:?} is not defined for a {model:?} model")]
    ResidualMismatch {
        residual: ResidualKind,
        model: ModelKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Homography,
    Fundamental,
}

impl ModelKind {
    pub fn minimal_sample(&self) -> usize {
        match self {
            ModelKind::Homography => 4,
            ModelKind::Fundamental => 7,
        }
    }
}

/// Model request for [`loransac`]: a fixed kind or automatic selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRequest {
    Homography,
    Fundamental,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    SymmetricEpipolar,
    Sampson,
    SymmetricTransfer,
}

/// A point correspondence `u` (image 1) to `v` (image 2) in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub u: Vector2<f64>,
    pub v: Vector2<f64>,
}

impl PointPair {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            u: Vector2::new(x1, y1),
            v: Vector2::new(x2, y2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewModel {
    pub kind: ModelKind,
    pub m: Matrix3<f64>,
    pub inliers: Vec<usize>,
    pub score: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier threshold in pixels.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iter: usize,
    pub lo_enabled: bool,
    pub seed: u64,
    /// Fraction of fundamental inliers on a single homography that
    /// triggers degeneracy handling.
    pub degeneracy_plane_fraction: f64,
    /// Fraction of fundamental inliers consistent with a homography at
    /// which auto mode prefers the homography.
    pub auto_homography_fraction: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 2.0,
            confidence: 0.999,
            max_iter: 2000,
            lo_enabled: true,
            seed: 0,
            degeneracy_plane_fraction: 0.6,
            auto_homography_fraction: 0.9,
        }
    }
}

/// Similarity that moves the centroid to the origin and the mean distance
/// to sqrt(2).
fn hartley_normalization(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Matrix3<f64> {
    let mut n = 0usize;
    let mut mean = Vector2::zeros();
    for p in points.clone() {
        mean += p;
        n += 1;
    }
    let mean = mean / n as f64;
    let mut dist = 0.0;
    for p in points {
        dist += (p - mean).norm();
    }
    dist /= n as f64;
    let scale = if dist > 1e-12 { 2f64.sqrt() / dist } else { 1.0 };
    Matrix3::new(
        scale,
        0.0,
        -scale * mean.x,
        0.0,
        scale,
        -scale * mean.y,
        0.0,
        0.0,
        1.0,
    )
}

fn apply_h(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = t * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Frobenius normalization with the largest-magnitude entry positive.
fn normalize_matrix(m: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    let mut out = m / norm;
    let mut largest = 0.0f64;
    for v in out.iter() {
        if v.abs() > largest.abs() {
            largest = *v;
        }
    }
    if largest < 0.0 {
        out = -out;
    }
    out
}

fn collinear(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> bool {
    let ab = b - a;
    let ac = c - a;
    let area = ab.x * ac.y - ab.y * ac.x;
    let scale = ab.norm().max(ac.norm()).max(1e-12);
    area.abs() < 1e-8 * scale * scale
}

/// Least-squares homography via the normalized DLT. Exact on noise-free
/// minimal input; minimal samples with any 3 collinear points are
/// rejected.
pub fn homography_dlt(corrs: &[PointPair]) -> Result<Matrix3<f64>, EstimatorError> {
    let n = corrs.len();
    if n < 4 {
        return Err(EstimatorError::InsufficientCorrespondences { needed: 4, got: n });
    }
    if n == 4 {
        for skip in 0..4 {
            let pts: Vec<&PointPair> = corrs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, p)| p)
                .collect();
            if collinear(&pts[0].u, &pts[1].u, &pts[2].u)
                || collinear(&pts[0].v, &pts[1].v, &pts[2].v)
            {
                return Err(EstimatorError::Degenerate("collinear minimal sample"));
            }
        }
    }

    let t1 = hartley_normalization(corrs.iter().map(|c| c.u).clone());
    let t2 = hartley_normalization(corrs.iter().map(|c| c.v).clone());

    let mut design = DMatrix::zeros(2 * n, 9);
    for (i, c) in corrs.iter().enumerate() {
        let u = apply_h(&t1, &c.u);
        let v = apply_h(&t2, &c.v);
        let (x, y) = (u.x, u.y);
        let (xp, yp) = (v.x, v.y);
        let r0 = 2 * i;
        design[(r0, 0)] = -x;
        design[(r0, 1)] = -y;
        design[(r0, 2)] = -1.0;
        design[(r0, 6)] = x * xp;
        design[(r0, 7)] = y * xp;
        design[(r0, 8)] = xp;
        let r1 = r0 + 1;
        design[(r1, 3)] = -x;
        design[(r1, 4)] = -y;
        design[(r1, 5)] = -1.0;
        design[(r1, 6)] = x * yp;
        design[(r1, 7)] = y * yp;
        design[(r1, 8)] = yp;
    }
    let h_norm = smallest_right_singular(design)?;
    let h = t2
        .try_inverse()
        .ok_or(EstimatorError::Degenerate("singular normalization"))?
        * h_norm
        * t1;
    if h.determinant().abs() < 1e-12 {
        return Err(EstimatorError::Degenerate("rank-deficient homography"));
    }
    Ok(normalize_matrix(&h))
}

/// Pads the design to at least 9 rows so the thin SVD exposes the full
/// right singular basis, null space included.
fn pad_design(design: DMatrix<f64>) -> DMatrix<f64> {
    if design.nrows() >= 9 {
        design
    } else {
        design.resize_vertically(9, 0.0)
    }
}

fn smallest_right_singular(design: DMatrix<f64>) -> Result<Matrix3<f64>, EstimatorError> {
    let svd = pad_design(design).svd(false, true);
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or(EstimatorError::Degenerate("SVD failed"))?;
    let row = v_t.nrows() - 1;
    let f = v_t.row(row);
    Ok(Matrix3::new(
        f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8],
    ))
}

/// Kernel (last two right singular vectors) of the epipolar design matrix.
fn fundamental_design_kernel(
    corrs: &[PointPair],
    t1: &Matrix3<f64>,
    t2: &Matrix3<f64>,
) -> Result<(Matrix3<f64>, Matrix3<f64>), EstimatorError> {
    let n = corrs.len();
    let mut design = DMatrix::zeros(n, 9);
    for (i, c) in corrs.iter().enumerate() {
        let u = apply_h(t1, &c.u);
        let v = apply_h(t2, &c.v);
        let (x, y) = (u.x, u.y);
        let (xp, yp) = (v.x, v.y);
        design[(i, 0)] = xp * x;
        design[(i, 1)] = xp * y;
        design[(i, 2)] = xp;
        design[(i, 3)] = yp * x;
        design[(i, 4)] = yp * y;
        design[(i, 5)] = yp;
        design[(i, 6)] = x;
        design[(i, 7)] = y;
        design[(i, 8)] = 1.0;
    }
    let svd = pad_design(design).svd(false, true);
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or(EstimatorError::Degenerate("SVD failed"))?;
    let to_mat = |row: usize| {
        let f = v_t.row(row);
        Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8])
    };
    Ok((to_mat(v_t.nrows() - 1), to_mat(v_t.nrows() - 2)))
}

fn enforce_rank2(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let s = svd.singular_values;
    u * Matrix3::new(s[0], 0.0, 0.0, 0.0, s[1], 0.0, 0.0, 0.0, 0.0) * v_t
}

fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    // Transposed cofactor matrix.
    Matrix3::new(
        c(1, 1, 2, 2),
        -c(0, 1, 2, 2),
        c(0, 1, 1, 2),
        -c(1, 0, 2, 2),
        c(0, 0, 2, 2),
        -c(0, 0, 1, 2),
        c(1, 0, 2, 1),
        -c(0, 0, 2, 1),
        c(0, 0, 1, 1),
    )
}

/// Newton-polishes a root of `det(a*F1 + (1-a)*F2)` on the exact
/// determinant; `d det / da = tr(adj(M) * (F1 - F2))`.
fn polish_det_root(mut alpha: f64, f1: &Matrix3<f64>, f2: &Matrix3<f64>) -> f64 {
    let df = f1 - f2;
    for _ in 0..10 {
        let m = f1 * alpha + f2 * (1.0 - alpha);
        let g = m.determinant();
        let gp = (adjugate(&m) * df).trace();
        if gp.abs() < 1e-300 {
            break;
        }
        let step = g / gp;
        alpha -= step;
        if step.abs() <= 1e-15 * (1.0 + alpha.abs()) {
            break;
        }
    }
    alpha
}

/// Real roots of `c3 x^3 + c2 x^2 + c1 x + c0`, Newton-polished.
fn cubic_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let eval = |x: f64| ((c3 * x + c2) * x + c1) * x + c0;
    let deriv = |x: f64| (3.0 * c3 * x + 2.0 * c2) * x + c1;
    let scale = c3.abs().max(c2.abs()).max(c1.abs()).max(c0.abs());
    if scale == 0.0 {
        return vec![];
    }
    let mut roots = if c3.abs() < 1e-12 * scale {
        // Quadratic (or linear) fallback.
        if c2.abs() < 1e-12 * scale {
            if c1.abs() < 1e-12 * scale {
                vec![]
            } else {
                vec![-c0 / c1]
            }
        } else {
            let disc = c1 * c1 - 4.0 * c2 * c0;
            if disc < 0.0 {
                vec![]
            } else {
                let sq = disc.sqrt();
                vec![(-c1 + sq) / (2.0 * c2), (-c1 - sq) / (2.0 * c2)]
            }
        }
    } else {
        // Depressed cubic t^3 + p t + q with x = t - b/3.
        let b = c2 / c3;
        let c = c1 / c3;
        let d = c0 / c3;
        let p = c - b * b / 3.0;
        let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
        let shift = -b / 3.0;
        let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);
        if disc > 0.0 {
            let sq = disc.sqrt();
            let u = (-q / 2.0 + sq).cbrt();
            let v = (-q / 2.0 - sq).cbrt();
            vec![u + v + shift]
        } else if p.abs() < 1e-14 {
            vec![shift]
        } else {
            // Three real roots, trigonometric form.
            let r = (-p / 3.0).sqrt();
            let arg = (3.0 * q / (2.0 * p * r)).clamp(-1.0, 1.0);
            let theta = arg.acos() / 3.0;
            (0..3)
                .map(|k| {
                    2.0 * r * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift
                })
                .collect()
        }
    };
    for root in &mut roots {
        for _ in 0..3 {
            let d = deriv(*root);
            if d.abs() > 1e-300 {
                *root -= eval(*root) / d;
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    roots
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FundamentalAlgo {
    SevenPoint,
    EightPoint,
}

/// Fundamental matrix estimation. The 7-point solver returns 1 to 3
/// rank-2 solutions; the 8-point solver returns a single matrix with the
/// smallest singular value truncated. Hartley normalization throughout.
pub fn fundamental_solve(
    corrs: &[PointPair],
    algo: FundamentalAlgo,
) -> Result<Vec<Matrix3<f64>>, EstimatorError> {
    let needed = match algo {
        FundamentalAlgo::SevenPoint => 7,
        FundamentalAlgo::EightPoint => 8,
    };
    if corrs.len() < needed || (algo == FundamentalAlgo::SevenPoint && corrs.len() != 7) {
        return Err(EstimatorError::InsufficientCorrespondences {
            needed,
            got: corrs.len(),
        });
    }
    let t1 = hartley_normalization(corrs.iter().map(|c| c.u).clone());
    let t2 = hartley_normalization(corrs.iter().map(|c| c.v).clone());
    let (f1, f2) = fundamental_design_kernel(corrs, &t1, &t2)?;

    // Rank enforcement must happen in the normalized frame; truncating the
    // denormalized matrix perturbs the epipolar constraint at pixel scale.
    let denormalize = |f_rank2: &Matrix3<f64>| {
        let denorm = t2.transpose() * f_rank2 * t1;
        normalize_matrix(&denorm)
    };

    match algo {
        FundamentalAlgo::EightPoint => Ok(vec![denormalize(&enforce_rank2(&f1))]),
        FundamentalAlgo::SevenPoint => {
            // det(a*F1 + (1-a)*F2) is cubic in a; recover coefficients by
            // interpolation at 4 nodes.
            let det_at = |a: f64| (f1 * a + f2 * (1.0 - a)).determinant();
            let (d0, d1, d2, dm1) = (det_at(0.0), det_at(1.0), det_at(2.0), det_at(-1.0));
            // c0 = d(0); fit remaining three coefficients.
            let c0 = d0;
            // d(1) = c3 + c2 + c1 + c0
            // d(2) = 8 c3 + 4 c2 + 2 c1 + c0
            // d(-1) = -c3 + c2 - c1 + c0
            let r1 = d1 - c0;
            let r2 = d2 - c0;
            let rm1 = dm1 - c0;
            let c2 = (r1 + rm1) / 2.0;
            // Remaining 2x2 system:
            // r1 - c2 = c3 + c1; r2 - 4 c2 = 8 c3 + 2 c1.
            let s1 = r1 - c2;
            let s2 = r2 - 4.0 * c2;
            let c3 = (s2 - 2.0 * s1) / 6.0;
            let c1 = s1 - c3;
            let mut out = Vec::new();
            for alpha in cubic_roots(c3, c2, c1, c0) {
                let alpha = polish_det_root(alpha, &f1, &f2);
                let f = f1 * alpha + f2 * (1.0 - alpha);
                if f.norm() < 1e-12 {
                    continue;
                }
                out.push(denormalize(&enforce_rank2(&normalize_matrix(&f))));
            }
            if out.is_empty() {
                return Err(EstimatorError::Degenerate("no real cubic root"));
            }
            Ok(out)
        }
    }
}

/// Residual of a correspondence under a model.
///
/// `SymmetricEpipolar` follows the printed two-sided epipolar expression
/// and is in squared pixels, as is `Sampson`; `SymmetricTransfer` is the
/// average of the forward and backward transfer distances in pixels.
pub fn residual(
    model: &TwoViewModel,
    corr: &PointPair,
    kind: ResidualKind,
) -> Result<f64, EstimatorError> {
    match (kind, model.kind) {
        (ResidualKind::SymmetricEpipolar, ModelKind::Fundamental) => {
            Ok(symmetric_epipolar(&model.m, &corr.u, &corr.v))
        }
        (ResidualKind::Sampson, ModelKind::Fundamental) => {
            let f = &model.m;
            let u3 = Vector3::new(corr.u.x, corr.u.y, 1.0);
            let v3 = Vector3::new(corr.v.x, corr.v.y, 1.0);
            let fu = f * u3;
            let ftv = f.transpose() * v3;
            let c = v3.dot(&fu);
            let denom = fu.x * fu.x + fu.y * fu.y + ftv.x * ftv.x + ftv.y * ftv.y;
            if denom <= 0.0 {
                return Ok(f64::INFINITY);
            }
            Ok(c * c / denom)
        }
        (ResidualKind::SymmetricTransfer, ModelKind::Homography) => {
            let h_inv = model
                .m
                .try_inverse()
                .ok_or(EstimatorError::Degenerate("singular homography"))?;
            Ok(symmetric_transfer(&model.m, &h_inv, &corr.u, &corr.v))
        }
        _ => Err(EstimatorError::ResidualMismatch {
            residual: kind,
            model: model.kind,
        }),
    }
}

/// `(v' F u)^2 * (1 / ((Fu)_1^2 + (Fu)_2^2) + 1 / ((F'v)_1^2 + (F'v)_2^2))`.
pub fn symmetric_epipolar(f: &Matrix3<f64>, u: &Vector2<f64>, v: &Vector2<f64>) -> f64 {
    let u3 = Vector3::new(u.x, u.y, 1.0);
    let v3 = Vector3::new(v.x, v.y, 1.0);
    let fu = f * u3;
    let ftv = f.transpose() * v3;
    let c = v3.dot(&fu);
    let n1 = fu.x * fu.x + fu.y * fu.y;
    let n2 = ftv.x * ftv.x + ftv.y * ftv.y;
    if n1 <= 0.0 || n2 <= 0.0 {
        return f64::INFINITY;
    }
    c * c * (1.0 / n1 + 1.0 / n2)
}

fn symmetric_transfer(
    h: &Matrix3<f64>,
    h_inv: &Matrix3<f64>,
    u: &Vector2<f64>,
    v: &Vector2<f64>,
) -> f64 {
    let fwd = (apply_h(h, u) - v).norm();
    let bwd = (apply_h(h_inv, v) - u).norm();
    (fwd + bwd) / 2.0
}

/// Inlier predicate at a pixel threshold: transfer error for homographies,
/// the squared-pixel symmetric epipolar error against `threshold^2` for
/// fundamental matrices.
fn is_inlier(kind: ModelKind, m: &Matrix3<f64>, m_inv: &Matrix3<f64>, c: &PointPair, thr: f64) -> bool {
    match kind {
        ModelKind::Homography => symmetric_transfer(m, m_inv, &c.u, &c.v) <= thr,
        ModelKind::Fundamental => symmetric_epipolar(m, &c.u, &c.v) <= thr * thr,
    }
}

fn collect_inliers(kind: ModelKind, m: &Matrix3<f64>, corrs: &[PointPair], thr: f64) -> Vec<usize> {
    let m_inv = match kind {
        ModelKind::Homography => match m.try_inverse() {
            Some(inv) => inv,
            None => return Vec::new(),
        },
        ModelKind::Fundamental => Matrix3::identity(),
    };
    corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| is_inlier(kind, m, &m_inv, c, thr))
        .map(|(i, _)| i)
        .collect()
}

fn fit_all(kind: ModelKind, corrs: &[PointPair], idx: &[usize]) -> Option<Matrix3<f64>> {
    let subset: Vec<PointPair> = idx.iter().map(|&i| corrs[i]).collect();
    match kind {
        ModelKind::Homography => homography_dlt(&subset).ok(),
        ModelKind::Fundamental => fundamental_solve(&subset, FundamentalAlgo::EightPoint)
            .ok()
            .and_then(|v| v.into_iter().next()),
    }
}

/// Threshold-annealed local optimization: least-squares refits on the
/// inlier set while shrinking the threshold from 2x to 1x over 3 rounds.
fn local_optimize(
    kind: ModelKind,
    corrs: &[PointPair],
    m: &Matrix3<f64>,
    thr: f64,
) -> Option<Matrix3<f64>> {
    let mut current = *m;
    for round in 0..3 {
        let t = thr * (2.0 - round as f64 * 0.5);
        let inliers = collect_inliers(kind, &current, corrs, t);
        if inliers.len() < kind.minimal_sample() + 1 {
            return None;
        }
        current = fit_all(kind, corrs, &inliers)?;
    }
    Some(current)
}

fn adaptive_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    if inlier_ratio <= 0.0 {
        return usize::MAX;
    }
    let p_good = inlier_ratio.powi(sample_size as i32);
    if p_good >= 1.0 {
        return 1;
    }
    let denom = (1.0 - p_good).ln();
    if denom >= 0.0 {
        return usize::MAX;
    }
    ((1.0 - confidence).ln() / denom).ceil().max(1.0) as usize
}

struct SearchState {
    best_m: Option<Matrix3<f64>>,
    best_count: usize,
    kind: ModelKind,
    thr: f64,
    lo_enabled: bool,
}

impl SearchState {
    fn consider(&mut self, corrs: &[PointPair], m: &Matrix3<f64>) {
        let count = collect_inliers(self.kind, m, corrs, self.thr).len();
        let mut improved = false;
        if count > self.best_count {
            self.best_count = count;
            self.best_m = Some(*m);
            improved = true;
        }
        if improved && self.lo_enabled {
            if let Some(refined) = local_optimize(self.kind, corrs, m, self.thr) {
                let refined_count = collect_inliers(self.kind, &refined, corrs, self.thr).len();
                if refined_count > self.best_count {
                    self.best_count = refined_count;
                    self.best_m = Some(refined);
                }
            }
        }
    }
}

fn solve_minimal(kind: ModelKind, sample: &[PointPair]) -> Vec<Matrix3<f64>> {
    match kind {
        ModelKind::Homography => homography_dlt(sample).map(|h| vec![h]).unwrap_or_default(),
        ModelKind::Fundamental => {
            fundamental_solve(sample, FundamentalAlgo::SevenPoint).unwrap_or_default()
        }
    }
}

fn ransac_fixed_kind(
    corrs: &[PointPair],
    kind: ModelKind,
    params: &RansacParams,
    rng: &mut ChaCha8Rng,
) -> Result<TwoViewModel, EstimatorError> {
    let m_size = kind.minimal_sample();
    if corrs.len() < m_size {
        return Err(EstimatorError::InsufficientCorrespondences {
            needed: m_size,
            got: corrs.len(),
        });
    }
    let thr = params.inlier_threshold;
    let mut state = SearchState {
        best_m: None,
        best_count: 0,
        kind,
        thr,
        lo_enabled: params.lo_enabled,
    };

    let mut iter = 0usize;
    let mut needed = params.max_iter;
    while iter < needed {
        let idx = rand_sample(rng, corrs.len(), m_size);
        let sample: Vec<PointPair> = idx.iter().map(|i| corrs[i]).collect();
        for m in solve_minimal(kind, &sample) {
            state.consider(corrs, &m);
        }
        iter += 1;
        let ratio = state.best_count as f64 / corrs.len() as f64;
        needed = params
            .max_iter
            .min(adaptive_iterations(ratio, m_size, params.confidence));
    }

    // Dominant-plane handling: if most fundamental inliers lie on one
    // homography, re-sample with off-plane correspondences enforced.
    if kind == ModelKind::Fundamental && state.best_m.is_some() {
        let f_inliers = collect_inliers(kind, &state.best_m.unwrap(), corrs, thr);
        if f_inliers.len() >= 4 {
            if let Some(h) = fit_plane_on(corrs, &f_inliers, params, rng) {
                let h_consistent: Vec<usize> = {
                    let h_inv = h.try_inverse();
                    match h_inv {
                        Some(h_inv) => f_inliers
                            .iter()
                            .copied()
                            .filter(|&i| {
                                is_inlier(ModelKind::Homography, &h, &h_inv, &corrs[i], thr)
                            })
                            .collect(),
                        None => Vec::new(),
                    }
                };
                let fraction = h_consistent.len() as f64 / f_inliers.len() as f64;
                if fraction >= params.degeneracy_plane_fraction {
                    let on_plane: std::collections::HashSet<usize> =
                        h_consistent.iter().copied().collect();
                    let off_plane: Vec<usize> = (0..corrs.len())
                        .filter(|i| !on_plane.contains(i))
                        .collect();
                    if off_plane.len() >= 3 {
                        let extra = (params.max_iter / 2).clamp(50, 200);
                        for _ in 0..extra {
                            let offs = rand_sample(rng, off_plane.len(), 3.min(off_plane.len()));
                            let rest = rand_sample(rng, corrs.len(), m_size);
                            let mut chosen: Vec<usize> =
                                offs.iter().map(|i| off_plane[i]).collect();
                            for r in rest.iter() {
                                if chosen.len() >= m_size {
                                    break;
                                }
                                if !chosen.contains(&r) {
                                    chosen.push(r);
                                }
                            }
                            if chosen.len() < m_size {
                                continue;
                            }
                            let sample: Vec<PointPair> =
                                chosen.iter().map(|&i| corrs[i]).collect();
                            for m in solve_minimal(kind, &sample) {
                                state.consider(corrs, &m);
                            }
                        }
                    }
                }
            }
        }
    }

    let best = state.best_m.ok_or(EstimatorError::NoConsensus)?;
    let inliers = collect_inliers(kind, &best, corrs, thr);
    if inliers.len() <= m_size {
        return Err(EstimatorError::NoConsensus);
    }
    let score = inliers.len();
    Ok(TwoViewModel {
        kind,
        m: normalize_matrix(&best),
        inliers,
        score,
    })
}

/// Small inner RANSAC fitting a homography to a subset of indices.
fn fit_plane_on(
    corrs: &[PointPair],
    idx: &[usize],
    params: &RansacParams,
    rng: &mut ChaCha8Rng,
) -> Option<Matrix3<f64>> {
    if idx.len() < 4 {
        return None;
    }
    let subset: Vec<PointPair> = idx.iter().map(|&i| corrs[i]).collect();
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    for _ in 0..100 {
        let pick = rand_sample(rng, subset.len(), 4);
        let sample: Vec<PointPair> = pick.iter().map(|i| subset[i]).collect();
        if let Ok(h) = homography_dlt(&sample) {
            let count =
                collect_inliers(ModelKind::Homography, &h, &subset, params.inlier_threshold).len();
            if best.as_ref().map_or(true, |(c, _)| count > *c) {
                best = Some((count, h));
            }
        }
    }
    best.map(|(_, h)| h)
}

/// LO-RANSAC. Hypothesize-verify with adaptive iteration count, local
/// optimization on new bests, dominant-plane escape for fundamental
/// matrices, and automatic model selection: auto mode returns a
/// homography when at least `auto_homography_fraction` of the fundamental
/// inliers are homography-consistent. Deterministic for a fixed seed.
pub fn loransac(
    corrs: &[PointPair],
    request: ModelRequest,
    params: &RansacParams,
) -> Result<TwoViewModel, EstimatorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    match request {
        ModelRequest::Homography => ransac_fixed_kind(corrs, ModelKind::Homography, params, &mut rng),
        ModelRequest::Fundamental => {
            ransac_fixed_kind(corrs, ModelKind::Fundamental, params, &mut rng)
        }
        ModelRequest::Auto => {
            let f_model = ransac_fixed_kind(corrs, ModelKind::Fundamental, params, &mut rng)?;
            let h = fit_plane_on(corrs, &f_model.inliers, params, &mut rng);
            let h_fraction = h
                .and_then(|h| {
                    h.try_inverse().map(|h_inv| {
                        f_model
                            .inliers
                            .iter()
                            .filter(|&&i| {
                                is_inlier(
                                    ModelKind::Homography,
                                    &h,
                                    &h_inv,
                                    &corrs[i],
                                    params.inlier_threshold,
                                )
                            })
                            .count() as f64
                            / f_model.inliers.len() as f64
                    })
                })
                .unwrap_or(0.0);
            if h_fraction >= params.auto_homography_fraction {
                ransac_fixed_kind(corrs, ModelKind::Homography, params, &mut rng)
                    .or(Ok(f_model))
            } else {
                Ok(f_model)
            }
        }
    }
}

/// The extreme points of a frame's measurement ellipse: the images of the
/// unit circle's major- and minor-axis points under `A`.
fn ellipse_extremes(laf: &LocalAffineFrame) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let d = crate::affine::decompose_affine(&laf.a).ok()?;
    let (s, c) = d.psi.sin_cos();
    let major = Vector2::new(c, s) * (d.lambda * d.t);
    let minor = Vector2::new(-s, c) * d.lambda;
    Some((major, minor))
}

/// Local-affine-frame consistency check. For every correspondence the
/// frame centers and the closest and furthest ellipse points must satisfy
/// the model residual at `threshold`; indices of the survivors are
/// returned. The extreme points carry a sign ambiguity, so the better of
/// the two pairings is used.
pub fn laf_check(
    model: &TwoViewModel,
    laf_pairs: &[(LocalAffineFrame, LocalAffineFrame)],
    threshold: f64,
) -> Vec<usize> {
    let m_inv = match model.kind {
        ModelKind::Homography => match model.m.try_inverse() {
            Some(inv) => inv,
            None => return Vec::new(),
        },
        ModelKind::Fundamental => Matrix3::identity(),
    };
    let point_ok = |pa: Vector2<f64>, pb: Vector2<f64>| {
        is_inlier(
            model.kind,
            &model.m,
            &m_inv,
            &PointPair {
                u: pa,
                v: pb,
            },
            threshold,
        )
    };

    let mut passing = Vec::new();
    'pairs: for (i, (la, lb)) in laf_pairs.iter().enumerate() {
        let ca = Vector2::new(la.x, la.y);
        let cb = Vector2::new(lb.x, lb.y);
        if !point_ok(ca, cb) {
            continue;
        }
        let (ea, eb) = match (ellipse_extremes(la), ellipse_extremes(lb)) {
            (Some(a), Some(b)) => (a, b),
            _ => continue,
        };
        for (da, db) in [(ea.0, eb.0), (ea.1, eb.1)] {
            let ok = point_ok(ca + da, cb + db) && point_ok(ca - da, cb - db);
            let ok_flipped = point_ok(ca + da, cb - db) && point_ok(ca - da, cb + db);
            if !(ok || ok_flipped) {
                continue 'pairs;
            }
        }
        passing.push(i);
    }
    passing
}
