//! Evaluation metrics and ground-truth protocols: recall curves, pose
//! error and mean average accuracy, co-visibility, repeatability and
//! matching score, turntable ground-truth geometry and per-pair verdicts.

use crate::affine::LocalAffineFrame;
use crate::estimator::{residual, ModelKind, PointPair, ResidualKind, TwoViewModel};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth correspondence set is empty")]
    EmptyGroundTruth,
    #[error("no ground-truth model available for this pair")]
    MissingModel,
    #[error("error list is empty")]
    EmptyErrors,
    #[error("step {step} does not divide the maximum threshold {max}")]
    BadStep { step: f64, max: f64 },
    #[error("rotation matrix is not orthonormal")]
    BadRotation,
    #[error("translation vector is numerically zero")]
    ZeroTranslation,
    #[error("matrix is not rank 2 (relative smallest singular value {0:.3e})")]
    NotRank2(f64),
    #[error("turntable angle must be nonzero")]
    ZeroBaseline,
    #[error("all pose candidates fail the positive-depth check")]
    CheiralityFailed,
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
}

/// Manually annotated ground-truth correspondences for an image pair,
/// optionally with the pair's reference model.
#[derive(Debug, Clone)]
pub struct GtCorrespondenceSet {
    pub pairs: Vec<PointPair>,
    pub model: Option<TwoViewModel>,
    pub scene: String,
    pub category: String,
}

/// Error of one annotated correspondence under a model: symmetric
/// epipolar distance for fundamental matrices, symmetric reprojection
/// error for homographies.
pub fn gt_error(model: &TwoViewModel, pair: &PointPair) -> f64 {
    let kind = match model.kind {
        ModelKind::Fundamental => ResidualKind::SymmetricEpipolar,
        ModelKind::Homography => ResidualKind::SymmetricTransfer,
    };
    residual(model, pair, kind).unwrap_or(f64::INFINITY)
}

/// Recall over ground-truth correspondences as a function of the error
/// threshold: `r(theta) = |{e < theta}| / |C|`.
pub fn recall_curve(
    gt: &GtCorrespondenceSet,
    model: &TwoViewModel,
    thetas: &[f64],
) -> Result<Vec<f64>, EvalError> {
    if gt.pairs.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let errors: Vec<f64> = gt.pairs.iter().map(|p| gt_error(model, p)).collect();
    Ok(thetas
        .iter()
        .map(|&theta| {
            errors.iter().filter(|&&e| e < theta).count() as f64 / errors.len() as f64
        })
        .collect())
}

/// Mean of per-pair recall curves, the overall recall of a category.
pub fn category_recall(per_pair: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
    if per_pair.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let len = per_pair[0].len();
    let mut out = vec![0.0; len];
    for curve in per_pair {
        for (acc, v) in out.iter_mut().zip(curve) {
            *acc += v;
        }
    }
    for v in &mut out {
        *v /= per_pair.len() as f64;
    }
    Ok(out)
}

fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// Relative pose error in degrees: the maximum of the rotation-difference
/// angle and the angle between translation directions.
pub fn pose_error(
    r_est: &Matrix3<f64>,
    t_est: &Vector3<f64>,
    r_gt: &Matrix3<f64>,
    t_gt: &Vector3<f64>,
) -> Result<f64, EvalError> {
    for r in [r_est, r_gt] {
        if ((r * r.transpose()) - Matrix3::identity()).norm() > 1e-6 {
            return Err(EvalError::BadRotation);
        }
    }
    if t_est.norm() < 1e-12 || t_gt.norm() < 1e-12 {
        return Err(EvalError::ZeroTranslation);
    }
    let rot_err = rotation_angle_deg(&(r_est.transpose() * r_gt));
    let cos_t = (t_est.dot(t_gt) / (t_est.norm() * t_gt.norm())).clamp(-1.0, 1.0);
    let trans_err = cos_t.acos().to_degrees();
    Ok(rot_err.max(trans_err))
}

/// Mean average accuracy: the pose-accuracy curve integrated over the
/// thresholds `{step, 2*step, ..., max_thr}` with inclusive comparisons.
/// Failed estimates enter as infinity.
pub fn maa(errors: &[f64], max_thr: f64, step: f64) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyErrors);
    }
    let steps = max_thr / step;
    if step <= 0.0 || (steps - steps.round()).abs() > 1e-9 {
        return Err(EvalError::BadStep { step, max: max_thr });
    }
    let n_thresholds = steps.round() as usize;
    let mut acc = 0.0;
    for k in 1..=n_thresholds {
        let t = step * k as f64;
        acc += errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64;
    }
    Ok(acc / n_thresholds as f64)
}

/// Linear triangulation of a normalized-coordinate correspondence with
/// `P1 = [I|0]`, `P2 = [R|t]`; returns the point in camera-1 coordinates.
fn triangulate(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> Vector3<f64> {
    let mut a = nalgebra::Matrix4::zeros();
    // P1 rows: (1 0 0 0), (0 1 0 0), (0 0 1 0).
    a.set_row(0, &nalgebra::RowVector4::new(-1.0, 0.0, x1.x, 0.0));
    a.set_row(1, &nalgebra::RowVector4::new(0.0, -1.0, x1.y, 0.0));
    let p2 = |row: usize| nalgebra::RowVector4::new(r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]);
    a.set_row(2, &(p2(2) * x2.x - p2(0)));
    a.set_row(3, &(p2(2) * x2.y - p2(1)));
    let svd = a.svd(false, true);
    let v = svd.v_t.unwrap();
    let h = v.row(3);
    Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3])
}

/// Recovers the relative pose from a fundamental matrix via the essential
/// matrix `E = K2^T F K1`; the four-fold (R, t) ambiguity is resolved by
/// the positive-depth (cheirality) vote over the inlier correspondences.
/// The returned translation is unit length.
pub fn pose_from_fundamental(
    f: &Matrix3<f64>,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
    corrs: &[PointPair],
) -> Result<(Matrix3<f64>, Vector3<f64>), EvalError> {
    let sv = f.svd(false, false).singular_values;
    if sv[2] / sv[0] > 1e-6 {
        return Err(EvalError::NotRank2(sv[2] / sv[0]));
    }
    if corrs.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let e = k2.transpose() * f * k1;
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();

    let k1_inv = k1.try_inverse().ok_or(EvalError::BadRotation)?;
    let k2_inv = k2.try_inverse().ok_or(EvalError::BadRotation)?;
    let normalized: Vec<(Vector2<f64>, Vector2<f64>)> = corrs
        .iter()
        .map(|c| {
            let a = k1_inv * Vector3::new(c.u.x, c.u.y, 1.0);
            let b = k2_inv * Vector3::new(c.v.x, c.v.y, 1.0);
            (
                Vector2::new(a.x / a.z, a.y / a.z),
                Vector2::new(b.x / b.z, b.y / b.z),
            )
        })
        .collect();

    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for r in [r1, r2] {
        for t in [t, -t] {
            let mut votes = 0usize;
            for (x1, x2) in &normalized {
                let p = triangulate(&r, &t, x1, x2);
                let depth1 = p.z;
                let depth2 = (r * p + t).z;
                if depth1 > 0.0 && depth2 > 0.0 {
                    votes += 1;
                }
            }
            if best.as_ref().map_or(true, |(b, _, _)| votes > *b) {
                best = Some((votes, r, t));
            }
        }
    }
    match best {
        Some((votes, r, t)) if votes > 0 => Ok((r, t.normalize())),
        _ => Err(EvalError::CheiralityFailed),
    }
}

/// Co-visibility of a pair: per image, the area of the shared-keypoint
/// bounding box over the image area; the pair value is the minimum of the
/// two. An empty shared set scores 0.
pub fn covisibility(
    kpts1: &[Vector2<f64>],
    kpts2: &[Vector2<f64>],
    dims1: (usize, usize),
    dims2: (usize, usize),
) -> f64 {
    let ratio = |pts: &[Vector2<f64>], dims: (usize, usize)| -> f64 {
        if pts.is_empty() {
            return 0.0;
        }
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_y = min_y.min(p.y);
            max_y = max_y.max(p.y);
        }
        let area = (max_x - min_x) * (max_y - min_y);
        (area / (dims.0 as f64 * dims.1 as f64)).clamp(0.0, 1.0)
    };
    ratio(kpts1, dims1).min(ratio(kpts2, dims2))
}

/// Repeatability and matching score at a pixel threshold.
///
/// Keypoints of image 1 are mapped by the ground-truth correspondence
/// function (`None` marks points leaving image 2). Repeatability counts
/// mapped keypoints with a detection within `pixel_thr`, paired greedily
/// one-to-one by distance, over the smaller of the projectable and
/// detected counts. The matching score additionally requires the pair to
/// appear in `matches`.
pub fn repeatability_and_ms(
    lafs1: &[LocalAffineFrame],
    lafs2: &[LocalAffineFrame],
    gt_map: impl Fn(Vector2<f64>) -> Option<Vector2<f64>>,
    pixel_thr: f64,
    matches: &[(usize, usize)],
) -> (f64, f64) {
    let projected: Vec<(usize, Vector2<f64>)> = lafs1
        .iter()
        .enumerate()
        .filter_map(|(i, l)| gt_map(Vector2::new(l.x, l.y)).map(|p| (i, p)))
        .collect();
    let denom = projected.len().min(lafs2.len());
    if denom == 0 {
        return (0.0, 0.0);
    }

    // All candidate pairs within the threshold, closest first.
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for &(i, p) in &projected {
        for (j, l2) in lafs2.iter().enumerate() {
            let d = (l2.x - p.x).hypot(l2.y - p.y);
            if d <= pixel_thr {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let greedy_count = |restrict: Option<&std::collections::HashSet<(usize, usize)>>| -> usize {
        let mut used1 = vec![false; lafs1.len()];
        let mut used2 = vec![false; lafs2.len()];
        let mut count = 0;
        for &(_, i, j) in &cands {
            if used1[i] || used2[j] {
                continue;
            }
            if let Some(set) = restrict {
                if !set.contains(&(i, j)) {
                    continue;
                }
            }
            used1[i] = true;
            used2[j] = true;
            count += 1;
        }
        count
    };

    let repeatability = greedy_count(None) as f64 / denom as f64;
    let match_set: std::collections::HashSet<(usize, usize)> = matches.iter().copied().collect();
    let matching_score = greedy_count(Some(&match_set)) as f64 / denom as f64;
    (repeatability, matching_score)
}

/// Camera intrinsics recovered from EXIF-style metadata: focal length,
/// focal-plane resolution and sensor pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub fr_x: f64,
    pub fr_y: f64,
    /// Sensor width in pixels (m).
    pub width_px: f64,
    /// Sensor height in pixels (n).
    pub height_px: f64,
}

impl CameraIntrinsics {
    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.width_px * self.focal / self.fr_x,
            0.0,
            self.width_px / 2.0,
            0.0,
            self.height_px * self.focal / self.fr_y,
            self.height_px / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Turntable rotation about the vertical axis by `phi` degrees.
pub fn turntable_rotation(phi_deg: f64) -> Matrix3<f64> {
    let (s, c) = phi_deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Virtual translation of the turntable camera at object distance `r`.
pub fn turntable_translation(phi_deg: f64, r: f64) -> Vector3<f64> {
    let (s, c) = phi_deg.to_radians().sin_cos();
    Vector3::new(s, 0.0, 1.0 - c) * r
}

/// Ground-truth fundamental matrix of a turntable pair:
/// `F = K^-T R K^T [K R^T t]_x`, normalized and rank 2 by construction.
/// The corresponding cameras are `P1 = K [I|0]` and `P2 = K [R|t]`.
pub fn turntable_gt_f(
    k: &CameraIntrinsics,
    phi_deg: f64,
    r: f64,
) -> Result<Matrix3<f64>, EvalError> {
    if phi_deg.to_radians().sin().abs() < 1e-12 && (1.0 - phi_deg.to_radians().cos()) < 1e-12 {
        return Err(EvalError::ZeroBaseline);
    }
    let km = k.k_matrix();
    let rot = turntable_rotation(phi_deg);
    let t = turntable_translation(phi_deg, r);
    let w = km * rot.transpose() * t;
    let w_cross = Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
    let f = km.try_inverse().ok_or(EvalError::BadRotation)?.transpose() * rot * km.transpose() * w_cross;
    let norm = f.norm();
    if norm < 1e-300 {
        return Err(EvalError::ZeroBaseline);
    }
    let mut f = f / norm;
    let mut largest = 0.0f64;
    for v in f.iter() {
        if v.abs() > largest.abs() {
            largest = *v;
        }
    }
    if largest < 0.0 {
        f = -f;
    }
    Ok(f)
}

/// Match-quality verdicts of one image pair against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairVerdicts {
    /// Correspondences with ground-truth error below the correctness radius.
    pub correct_inliers: usize,
    /// At least 10 correct output correspondences.
    pub solved: bool,
    /// Median ground-truth error.
    pub median_error: f64,
    /// Median error at most 6 px.
    pub median_ok: bool,
}

pub const DEFAULT_CORRECTNESS_RADIUS: f64 = 3.0;
/// The strict single-pixel variant of the correctness radius.
pub const STRICT_CORRECTNESS_RADIUS: f64 = 1.0;
const SOLVED_MIN_CORRECT: usize = 10;
const MEDIAN_ERROR_LIMIT: f64 = 6.0;

/// Scores output correspondences against the ground-truth model:
/// correct-inlier count at `radius`, the solved flag (at least 10
/// correct) and the median-error flag (at most 6 px).
pub fn pair_verdicts(
    corrs: &[PointPair],
    gt: &GtCorrespondenceSet,
    radius: f64,
) -> Result<PairVerdicts, EvalError> {
    let model = gt.model.as_ref().ok_or(EvalError::MissingModel)?;
    let mut errors: Vec<f64> = corrs.iter().map(|c| gt_error(model, c)).collect();
    let correct = errors.iter().filter(|&&e| e < radius).count();
    let median = if errors.is_empty() {
        f64::INFINITY
    } else {
        errors.sort_by(f64::total_cmp);
        let mid = errors.len() / 2;
        if errors.len() % 2 == 1 {
            errors[mid]
        } else {
            (errors[mid - 1] + errors[mid]) / 2.0
        }
    };
    Ok(PairVerdicts {
        correct_inliers: correct,
        solved: correct >= SOLVED_MIN_CORRECT,
        median_error: median,
        median_ok: median <= MEDIAN_ERROR_LIMIT,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::DetectorTag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h_model(m: Matrix3<f64>) -> TwoViewModel {
        TwoViewModel {
            kind: ModelKind::Homography,
            m,
            inliers: vec![],
            score: 0,
        }
    }

    #[test]
    fn recall_is_one_for_ground_truth_model() {
        let gt = GtCorrespondenceSet {
            pairs: (0..10)
                .map(|i| PointPair::new(i as f64, 2.0 * i as f64, i as f64, 2.0 * i as f64))
                .collect(),
            model: None,
            scene: String::new(),
            category: String::new(),
        };
        let model = h_model(Matrix3::identity());
        let curve = recall_curve(&gt, &model, &[0.5, 1.0, 5.0]).unwrap();
        assert_eq!(curve, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn recall_counts_thresholds() {
        // Errors {1, 3, 5} against theta = 4 -> 2/3.
        let gt = GtCorrespondenceSet {
            pairs: vec![
                PointPair::new(0.0, 0.0, 1.0, 0.0),
                PointPair::new(0.0, 0.0, 3.0, 0.0),
                PointPair::new(0.0, 0.0, 5.0, 0.0),
            ],
            model: None,
            scene: String::new(),
            category: String::new(),
        };
        let model = h_model(Matrix3::identity());
        let curve = recall_curve(&gt, &model, &[4.0]).unwrap();
        assert!((curve[0] - 2.0 / 3.0).abs() < 1e-9);
        // Monotone in theta.
        let curve = recall_curve(&gt, &model, &[0.5, 1.5, 4.0, 100.0]).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(curve[3], 1.0);

        assert!(recall_curve(
            &GtCorrespondenceSet {
                pairs: vec![],
                model: None,
                scene: String::new(),
                category: String::new()
            },
            &model,
            &[1.0]
        )
        .is_err());
    }

    #[test]
    fn category_recall_averages() {
        let avg = category_recall(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(avg, vec![0.5, 1.0]);
    }

    #[test]
    fn pose_error_cases() {
        let id = Matrix3::identity();
        let t = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(pose_error(&id, &t, &id, &t).unwrap(), 0.0);

        let rz5 = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 5f64.to_radians())
            .into_inner();
        let err = pose_error(&rz5, &t, &id, &t).unwrap();
        assert!((err - 5.0).abs() < 1e-9);

        // Rotation error 3, translation error 7 -> max is 7.
        let rz3 = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 3f64.to_radians())
            .into_inner();
        let t7 = Vector3::new(7f64.to_radians().cos(), 7f64.to_radians().sin(), 0.0);
        let err = pose_error(&rz3, &t7, &id, &t).unwrap();
        assert!((err - 7.0).abs() < 1e-9);

        assert!(pose_error(&id, &Vector3::zeros(), &id, &t).is_err());
    }

    #[test]
    fn maa_values() {
        assert_eq!(maa(&[0.0, 0.0, 0.0], 10.0, 1.0).unwrap(), 1.0);
        assert_eq!(maa(&[11.0, 50.0], 10.0, 1.0).unwrap(), 0.0);
        let v = maa(&[1.0, 5.0, 20.0], 10.0, 1.0).unwrap();
        assert!((v - 16.0 / 30.0).abs() < 1e-12, "got {v}");
        // Permutation invariant, monotone in max threshold.
        let w = maa(&[20.0, 1.0, 5.0], 10.0, 1.0).unwrap();
        assert_eq!(v, w);
        let bigger = maa(&[1.0, 5.0, 20.0], 20.0, 1.0).unwrap();
        assert!(bigger >= v);
        // Failures as infinity.
        let with_fail = maa(&[1.0, f64::INFINITY], 10.0, 1.0).unwrap();
        assert!((with_fail - 0.5).abs() < 1e-12);
        assert!(maa(&[], 10.0, 1.0).is_err());
        assert!(maa(&[1.0], 10.0, 3.0).is_err());
    }

    fn project(k: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>, p: &Vector3<f64>) -> Vector2<f64> {
        let q = k * (r * p + t);
        Vector2::new(q.x / q.z, q.y / q.z)
    }

    #[test]
    fn pose_recovery_from_synthetic_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Matrix3::new(700.0, 0.0, 320.0, 0.0, 700.0, 240.0, 0.0, 0.0, 1.0);
        let r_gt = nalgebra::Rotation3::from_euler_angles(0.05, -0.3, 0.02).into_inner();
        let t_gt = Vector3::new(0.8, 0.1, 0.2);
        let id = Matrix3::identity();
        let corrs: Vec<PointPair> = (0..60)
            .map(|_| {
                let p = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(5.0..12.0),
                );
                let u = project(&k, &id, &Vector3::zeros(), &p);
                let v = project(&k, &r_gt, &t_gt, &p);
                PointPair { u, v }
            })
            .collect();
        let t_cross = Matrix3::new(
            0.0, -t_gt.z, t_gt.y, t_gt.z, 0.0, -t_gt.x, -t_gt.y, t_gt.x, 0.0,
        );
        let f = k.try_inverse().unwrap().transpose() * t_cross * r_gt * k.try_inverse().unwrap();
        let (r, t) = pose_from_fundamental(&f, &k, &k, &corrs).unwrap();
        let err = pose_error(&r, &t, &r_gt, &t_gt.normalize()).unwrap();
        assert!(err <= 1e-4, "pose error {err} deg");
    }

    #[test]
    fn pure_lateral_translation_direction() {
        let k = Matrix3::identity();
        let t_gt = Vector3::new(1.0, 0.0, 0.0);
        let id = Matrix3::identity();
        let mut corrs = Vec::new();
        for i in 0..20 {
            let p = Vector3::new(
                (i % 5) as f64 * 0.2 - 0.4,
                (i / 5) as f64 * 0.2 - 0.3,
                3.0 + 0.3 * i as f64,
            );
            corrs.push(PointPair {
                u: project(&k, &id, &Vector3::zeros(), &p),
                v: project(&k, &id, &t_gt, &p),
            });
        }
        let t_cross = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let f = t_cross; // identity K, identity R
        let (r, t) = pose_from_fundamental(&f, &k, &k, &corrs).unwrap();
        assert!((r - id).norm() < 1e-9);
        assert!((t - t_gt).norm() < 1e-9, "t = {t:?}");

        // A full-rank matrix is rejected.
        assert!(matches!(
            pose_from_fundamental(&Matrix3::identity(), &k, &k, &corrs),
            Err(EvalError::NotRank2(_))
        ));
    }

    #[test]
    fn covisibility_cases() {
        let full1: Vec<Vector2<f64>> = vec![Vector2::new(0.0, 0.0), Vector2::new(100.0, 50.0)];
        let full2 = full1.clone();
        assert!((covisibility(&full1, &full2, (100, 50), (100, 50)) - 1.0).abs() < 1e-12);

        let half2: Vec<Vector2<f64>> = vec![Vector2::new(0.0, 0.0), Vector2::new(50.0, 50.0)];
        let v = covisibility(&full1, &half2, (100, 50), (100, 50));
        assert!((v - 0.5).abs() < 1e-12);

        assert_eq!(covisibility(&[], &full2, (100, 50), (100, 50)), 0.0);
    }

    #[test]
    fn repeatability_cases() {
        let lafs: Vec<LocalAffineFrame> = (0..10)
            .map(|i| {
                LocalAffineFrame::circular(
                    10.0 * i as f64 + 5.0,
                    20.0,
                    2.0,
                    1.0,
                    DetectorTag::Hessian,
                )
            })
            .collect();
        let identity = |p: Vector2<f64>| Some(p);
        let (rep, _) = repeatability_and_ms(&lafs, &lafs, identity, 3.0, &[]);
        assert_eq!(rep, 1.0);

        let far: Vec<LocalAffineFrame> = lafs
            .iter()
            .map(|l| LocalAffineFrame {
                y: l.y + 50.0,
                ..l.clone()
            })
            .collect();
        let (rep, ms) = repeatability_and_ms(&lafs, &far, identity, 3.0, &[]);
        assert_eq!((rep, ms), (0.0, 0.0));

        // Half the keypoints are shifted out of tolerance; hand count 5.
        let half: Vec<LocalAffineFrame> = lafs
            .iter()
            .enumerate()
            .map(|(i, l)| LocalAffineFrame {
                x: l.x + if i % 2 == 0 { 0.5 } else { 30.0 },
                ..l.clone()
            })
            .collect();
        let matches: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let (rep, ms) = repeatability_and_ms(&lafs, &half, identity, 3.0, &matches);
        assert!((rep - 0.5).abs() < 1e-12);
        assert!((ms - 0.5).abs() < 1e-12);
        // Without descriptor matches the matching score drops to zero.
        let (_, ms0) = repeatability_and_ms(&lafs, &half, identity, 3.0, &[]);
        assert_eq!(ms0, 0.0);
    }

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            focal: 7.0,
            fr_x: 1600.0,
            fr_y: 1200.0,
            width_px: 640.0,
            height_px: 480.0,
        }
    }

    #[test]
    fn turntable_f_zero_angle_errors() {
        assert!(matches!(
            turntable_gt_f(&test_intrinsics(), 0.0, 1.0),
            Err(EvalError::ZeroBaseline)
        ));
    }

    #[test]
    fn turntable_f_satisfies_projections() {
        let intr = test_intrinsics();
        let phi = 30.0;
        let r_dist = 5.0;
        let f = turntable_gt_f(&intr, phi, r_dist).unwrap();
        let k = intr.k_matrix();
        let rot = turntable_rotation(phi);
        let t = turntable_translation(phi, r_dist);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(4.0..8.0),
            );
            let u = project(&k, &Matrix3::identity(), &Vector3::zeros(), &p);
            let v = project(&k, &rot, &t, &p);
            let u3 = Vector3::new(u.x, u.y, 1.0);
            let v3 = Vector3::new(v.x, v.y, 1.0);
            let c = v3.dot(&(f * u3));
            assert!(c.abs() <= 1e-8, "epipolar constraint {c:.3e}");
        }
        let smallest = f.svd(false, false).singular_values[2];
        assert!(smallest <= 1e-10);
    }

    #[test]
    fn turntable_angle_recovered_through_pose() {
        let intr = test_intrinsics();
        let phi = 25.0;
        let r_dist = 5.0;
        let f = turntable_gt_f(&intr, phi, r_dist).unwrap();
        let k = intr.k_matrix();
        let rot = turntable_rotation(phi);
        let t = turntable_translation(phi, r_dist);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let corrs: Vec<PointPair> = (0..40)
            .map(|_| {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(4.0..8.0),
                );
                PointPair {
                    u: project(&k, &Matrix3::identity(), &Vector3::zeros(), &p),
                    v: project(&k, &rot, &t, &p),
                }
            })
            .collect();
        let (r_est, t_est) = pose_from_fundamental(&f, &k, &k, &corrs).unwrap();
        let err = pose_error(&r_est, &t_est, &rot, &t.normalize()).unwrap();
        assert!(err <= 1e-3, "turntable pose error {err} deg");
        let angle = rotation_angle_deg(&r_est);
        assert!((angle - phi).abs() <= 1e-3, "angle {angle} vs {phi}");
    }

    #[test]
    fn verdict_rules() {
        let gt = GtCorrespondenceSet {
            pairs: vec![PointPair::new(0.0, 0.0, 0.0, 0.0)],
            model: Some(h_model(Matrix3::identity())),
            scene: String::new(),
            category: String::new(),
        };
        let perfect: Vec<PointPair> = (0..50)
            .map(|i| PointPair::new(i as f64, 0.0, i as f64, 0.0))
            .collect();
        let v = pair_verdicts(&perfect, &gt, DEFAULT_CORRECTNESS_RADIUS).unwrap();
        assert!(v.solved && v.median_ok);
        assert_eq!(v.correct_inliers, 50);

        // Nine correct out of nine: below the solved threshold.
        let nine: Vec<PointPair> = (0..9)
            .map(|i| PointPair::new(i as f64, 0.0, i as f64, 0.0))
            .collect();
        let v = pair_verdicts(&nine, &gt, DEFAULT_CORRECTNESS_RADIUS).unwrap();
        assert_eq!(v.correct_inliers, 9);
        assert!(!v.solved);

        // Median error 6.5 px: flag false.
        let off: Vec<PointPair> = (0..3)
            .map(|i| PointPair::new(i as f64, 0.0, i as f64 + 6.5, 0.0))
            .collect();
        let v = pair_verdicts(&off, &gt, DEFAULT_CORRECTNESS_RADIUS).unwrap();
        assert!(!v.median_ok);
        assert!((v.median_error - 6.5).abs() < 1e-9);
    }

    #[test]
    fn covisibility_symmetric() {
        let a: Vec<Vector2<f64>> = vec![Vector2::new(5.0, 5.0), Vector2::new(60.0, 40.0)];
        let b: Vec<Vector2<f64>> = vec![Vector2::new(0.0, 0.0), Vector2::new(30.0, 20.0)];
        let v1 = covisibility(&a, &b, (100, 50), (80, 60));
        let v2 = covisibility(&b, &a, (80, 60), (100, 50));
        assert!((v1 - v2).abs() < 1e-12);
    }
}
