//! Affine shape adaptation (Baumberg iteration) and gradient orientation.

use crate::affine::LocalAffineFrame;
use crate::image::Image;
use crate::patch::{extract_patch, Patch};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Patch side used to measure the second-moment matrix.
const SMM_PATCH_SIDE: usize = 19;
/// Measurement-region magnification for the second-moment patch.
const SMM_MAG: f64 = 3.0;

const ORIENTATION_BINS: usize = 36;
const ORIENTATION_PEAK_RATIO: f64 = 0.8;
const MAX_ORIENTATIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaumbergParams {
    pub max_iter: usize,
    /// Tolerance on `1 - lambda_min / lambda_max` of the second-moment matrix.
    pub convergence_eps: f64,
    /// Frames stretched beyond this axis ratio are rejected.
    pub max_elongation: f64,
}

impl Default for BaumbergParams {
    fn default() -> Self {
        Self {
            max_iter: 16,
            convergence_eps: 0.05,
            max_elongation: 6.0,
        }
    }
}

/// Why a frame was dropped during shape adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ShapeRejection {
    #[error("shape elongation {0:.2} exceeds the limit")]
    TooElongated(f64),
    #[error("measurement region touches the image boundary")]
    OutOfBounds,
    #[error("shape did not converge")]
    NotConverged,
}

/// Iteratively estimates the local affine shape from the second-moment
/// matrix of gradients, keeping `det(A') = 1`. Accepted frames keep their
/// scale and gain the adapted anisotropic shape.
pub fn baumberg_adapt(
    img: &Image,
    laf: &LocalAffineFrame,
    params: &BaumbergParams,
) -> Result<LocalAffineFrame, ShapeRejection> {
    let sigma = laf.scale();
    // Current shape, normalized to unit determinant.
    let mut shape = laf.a / sigma;

    for _ in 0..params.max_iter {
        let full = shape * sigma;
        if region_out_of_bounds(img, laf.x, laf.y, &full) {
            return Err(ShapeRejection::OutOfBounds);
        }
        let sample = LocalAffineFrame {
            a: full,
            ..laf.clone()
        };
        let patch = extract_patch(img, &sample, SMM_PATCH_SIDE, SMM_MAG * 1.0)
            .map_err(|_| ShapeRejection::NotConverged)?;
        let smm = second_moment_matrix(&patch);

        let (eig_max, eig_min, evec_max) = symmetric_eigen(&smm);
        if eig_max <= 1e-20 {
            // No gradient signal in the region; nothing to adapt to.
            return Err(ShapeRejection::NotConverged);
        }
        if 1.0 - eig_min / eig_max <= params.convergence_eps {
            let a = shape * sigma;
            let out = LocalAffineFrame { a, ..laf.clone() };
            return Ok(out);
        }

        // Whitening transform M^(-1/2), then determinant renormalization.
        let inv_sqrt = inv_sqrt_from_eigen(eig_max, eig_min.max(1e-20 * eig_max), &evec_max);
        shape *= inv_sqrt;
        let det = shape.determinant();
        if det <= 0.0 || !det.is_finite() {
            return Err(ShapeRejection::NotConverged);
        }
        shape /= det.sqrt();

        let elongation = match crate::affine::decompose_affine(&shape) {
            Ok(d) => d.t,
            Err(_) => return Err(ShapeRejection::NotConverged),
        };
        if elongation > params.max_elongation {
            return Err(ShapeRejection::TooElongated(elongation));
        }
    }
    Err(ShapeRejection::NotConverged)
}

fn region_out_of_bounds(img: &Image, x: f64, y: f64, a: &Matrix2<f64>) -> bool {
    // Bounding box of the sampled square grid mag * A * [-1, 1]^2.
    let ex = SMM_MAG * (a[(0, 0)].abs() + a[(0, 1)].abs());
    let ey = SMM_MAG * (a[(1, 0)].abs() + a[(1, 1)].abs());
    x - ex < 0.0
        || y - ey < 0.0
        || x + ex > (img.width() - 1) as f64
        || y + ey > (img.height() - 1) as f64
}

/// Gaussian-weighted second-moment matrix of patch gradients.
fn second_moment_matrix(patch: &Patch) -> Matrix2<f64> {
    let side = patch.side();
    let center = (side as f64 - 1.0) / 2.0;
    let sigma_w = side as f64 / 3.0;
    let denom = 2.0 * sigma_w * sigma_w;
    let mut m = Matrix2::zeros();
    for y in 1..side - 1 {
        for x in 1..side - 1 {
            let gx = (patch.get(x + 1, y) - patch.get(x - 1, y)) as f64 / 2.0;
            let gy = (patch.get(x, y + 1) - patch.get(x, y - 1)) as f64 / 2.0;
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let w = (-(dx * dx + dy * dy) / denom).exp();
            m[(0, 0)] += w * gx * gx;
            m[(0, 1)] += w * gx * gy;
            m[(1, 1)] += w * gy * gy;
        }
    }
    m[(1, 0)] = m[(0, 1)];
    m
}

/// Eigen-decomposition of a symmetric 2x2 matrix:
/// (largest eigenvalue, smallest eigenvalue, eigenvector of the largest).
fn symmetric_eigen(m: &Matrix2<f64>) -> (f64, f64, (f64, f64)) {
    let a = m[(0, 0)];
    let b = m[(0, 1)];
    let c = m[(1, 1)];
    let half_tr = (a + c) / 2.0;
    let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let l1 = half_tr + disc;
    let l2 = half_tr - disc;
    let evec = if b.abs() > 1e-300 {
        let v = (l1 - c, b);
        let n = v.0.hypot(v.1);
        (v.0 / n, v.1 / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    (l1, l2.max(0.0), evec)
}

fn inv_sqrt_from_eigen(l1: f64, l2: f64, evec1: &(f64, f64)) -> Matrix2<f64> {
    let (ex, ey) = *evec1;
    let e1 = nalgebra::Vector2::new(ex, ey);
    let e2 = nalgebra::Vector2::new(-ey, ex);
    // Normalize so the strongest direction stays fixed and only the weak
    // direction is stretched.
    let s1 = 1.0;
    let s2 = (l1 / l2).sqrt();
    e1 * e1.transpose() * s1 + e2 * e2.transpose() * s2
}

/// Dominant gradient orientations of a patch: all histogram peaks within
/// 80% of the strongest, at most four, refined by parabolic interpolation.
/// A gradient-free patch yields `[0]`.
///
/// The patch side must be at least 9.
pub fn dominant_orientation(patch: &Patch) -> Vec<f64> {
    assert!(patch.side() >= 9, "orientation patch side must be >= 9");
    let side = patch.side();
    let center = (side as f64 - 1.0) / 2.0;
    let sigma_w = side as f64 / 6.0;
    let denom = 2.0 * sigma_w * sigma_w;
    let bin_width = 2.0 * std::f64::consts::PI / ORIENTATION_BINS as f64;

    let mut hist = [0.0f64; ORIENTATION_BINS];
    let mut total = 0.0;
    for y in 1..side - 1 {
        for x in 1..side - 1 {
            let gx = (patch.get(x + 1, y) - patch.get(x - 1, y)) as f64 / 2.0;
            let gy = (patch.get(x, y + 1) - patch.get(x, y - 1)) as f64 / 2.0;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let w = mag * (-(dx * dx + dy * dy) / denom).exp();
            let theta = gy.atan2(gx).rem_euclid(2.0 * std::f64::consts::PI);
            // Nearest-center binning: bin i covers theta near i * bin_width.
            let bin = (theta / bin_width).round() as usize % ORIENTATION_BINS;
            hist[bin] += w;
            total += w;
        }
    }
    if total == 0.0 {
        return vec![0.0];
    }

    // Circular smoothing, three passes of [1 1 1] / 3.
    for _ in 0..3 {
        let prev = hist;
        for i in 0..ORIENTATION_BINS {
            let l = prev[(i + ORIENTATION_BINS - 1) % ORIENTATION_BINS];
            let r = prev[(i + 1) % ORIENTATION_BINS];
            hist[i] = (l + prev[i] + r) / 3.0;
        }
    }

    let max = hist.iter().cloned().fold(f64::MIN, f64::max);
    if max <= 0.0 {
        return vec![0.0];
    }
    let mut peaks: Vec<(f64, f64)> = Vec::new(); // (height, angle)
    for i in 0..ORIENTATION_BINS {
        let l = hist[(i + ORIENTATION_BINS - 1) % ORIENTATION_BINS];
        let r = hist[(i + 1) % ORIENTATION_BINS];
        if hist[i] > l && hist[i] > r && hist[i] >= ORIENTATION_PEAK_RATIO * max {
            let denom = l - 2.0 * hist[i] + r;
            let offset = if denom.abs() > 1e-12 {
                (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            let angle = ((i as f64 + offset) * bin_width).rem_euclid(2.0 * std::f64::consts::PI);
            peaks.push((hist[i], angle));
        }
    }
    if peaks.is_empty() {
        // Uniform histogram; fall back to the strongest bin.
        let best = hist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        return vec![(best as f64 * bin_width).rem_euclid(2.0 * std::f64::consts::PI)];
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(MAX_ORIENTATIONS);
    peaks.into_iter().map(|(_, a)| a).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::DetectorTag;

    /// Anisotropic Gaussian blob with covariance W * diag(s^2) * W^T.
    fn warped_blob(n: usize, sx: f64, sy: f64, theta: f64) -> Image {
        let c = (n as f64 - 1.0) / 2.0;
        let (sin, cos) = theta.sin_cos();
        let mut data = vec![0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let q = u * u / (sx * sx) + v * v / (sy * sy);
                data[y * n + x] = (-q / 2.0).exp() as f32;
            }
        }
        Image::new(n, n, data).unwrap()
    }

    #[test]
    fn isotropic_blob_stays_isotropic() {
        let s = 6.0;
        let img = warped_blob(96, s, s, 0.0);
        let laf = LocalAffineFrame::circular(47.5, 47.5, s, 1.0, DetectorTag::Hessian);
        let params = BaumbergParams {
            max_iter: 3,
            ..BaumbergParams::default()
        };
        let adapted = baumberg_adapt(&img, &laf, &params).expect("should converge fast");
        let d = crate::affine::decompose_affine(&adapted.a).unwrap();
        assert!(d.t <= 1.05, "elongation {} should stay near 1", d.t);
        assert!((adapted.a.determinant() / (s * s) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn anisotropic_blob_recovers_elongation() {
        let (sx, sy) = (8.0, 4.0);
        let img = warped_blob(128, sx, sy, 0.0);
        let laf =
            LocalAffineFrame::circular(63.5, 63.5, (sx * sy).sqrt(), 1.0, DetectorTag::Hessian);
        let adapted = baumberg_adapt(&img, &laf, &BaumbergParams::default()).expect("converges");
        let d = crate::affine::decompose_affine(&adapted.a).unwrap();
        assert!(
            (d.t - 2.0).abs() <= 0.2,
            "expected elongation 2 +- 10%, got {}",
            d.t
        );
        // det(A') = 1 is preserved: det(A) = scale^2.
        let det = adapted.a.determinant();
        assert!((det / (sx * sy) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn extreme_blob_rejected_as_elongated() {
        let img = warped_blob(160, 16.0, 2.0, 0.0);
        let laf = LocalAffineFrame::circular(79.5, 79.5, 5.6, 1.0, DetectorTag::Hessian);
        match baumberg_adapt(&img, &laf, &BaumbergParams::default()) {
            Err(ShapeRejection::TooElongated(e)) => assert!(e > 6.0),
            other => panic!("expected elongation rejection, got {other:?}"),
        }
    }

    #[test]
    fn boundary_region_rejected() {
        let img = warped_blob(64, 6.0, 6.0, 0.0);
        let laf = LocalAffineFrame::circular(3.0, 31.0, 6.0, 1.0, DetectorTag::Hessian);
        assert!(matches!(
            baumberg_adapt(&img, &laf, &BaumbergParams::default()),
            Err(ShapeRejection::OutOfBounds)
        ));
    }

    #[test]
    fn covariance_with_known_warp() {
        // Blob warped by a rotated anisotropic stretch; the adapted shape
        // must agree with the warp's shape component within 10%.
        let theta = 0.6;
        let (sx, sy) = (9.0, 4.5);
        let img = warped_blob(160, sx, sy, theta);
        let laf =
            LocalAffineFrame::circular(79.5, 79.5, (sx * sy).sqrt(), 1.0, DetectorTag::Hessian);
        let adapted = baumberg_adapt(&img, &laf, &BaumbergParams::default()).expect("converges");
        let d = crate::affine::decompose_affine(&adapted.a).unwrap();
        assert!((d.t - sx / sy).abs() <= 0.1 * (sx / sy), "tilt {}", d.t);
        // The long axis of A * unit-circle must align with the blob's
        // long axis: phi rotates that axis onto x before the stretch.
        let long_axis = std::f64::consts::PI - d.phi;
        let diff = (long_axis - theta).abs().rem_euclid(std::f64::consts::PI);
        let diff = diff.min(std::f64::consts::PI - diff);
        assert!(diff < 0.1, "axis misaligned by {diff} rad");
    }

    #[test]
    fn ramp_patch_orientation() {
        let side = 21;
        let mut data = vec![0f32; side * side];
        for y in 0..side {
            for x in 0..side {
                data[y * side + x] = x as f32 / side as f32;
            }
        }
        let p = Patch::new(side, data).unwrap();
        let angles = dominant_orientation(&p);
        assert_eq!(angles.len(), 1);
        let err = angles[0].min(2.0 * std::f64::consts::PI - angles[0]);
        assert!(
            err <= 10f64.to_radians(),
            "ramp orientation {} not near 0",
            angles[0]
        );
    }

    #[test]
    fn rotated_ramp_shifts_by_quarter_turn() {
        let side = 21;
        let mut horiz = vec![0f32; side * side];
        let mut vert = vec![0f32; side * side];
        for y in 0..side {
            for x in 0..side {
                horiz[y * side + x] = x as f32 / side as f32;
                vert[y * side + x] = y as f32 / side as f32;
            }
        }
        let a0 = dominant_orientation(&Patch::new(side, horiz).unwrap())[0];
        let a90 = dominant_orientation(&Patch::new(side, vert).unwrap())[0];
        let delta = (a90 - a0).rem_euclid(2.0 * std::f64::consts::PI);
        assert!(
            (delta - std::f64::consts::FRAC_PI_2).abs() <= 10f64.to_radians(),
            "expected 90 degree shift, got {delta}"
        );
    }

    #[test]
    fn constant_patch_orientation_is_zero() {
        let p = Patch::new(11, vec![0.5; 121]).unwrap();
        assert_eq!(dominant_orientation(&p), vec![0.0]);
    }

    #[test]
    fn orientation_count_and_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let side = 15;
            let data: Vec<f32> = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = Patch::new(side, data).unwrap();
            let angles = dominant_orientation(&p);
            assert!(!angles.is_empty() && angles.len() <= 4);
            assert!(angles
                .iter()
                .all(|&a| (0.0..2.0 * std::f64::consts::PI).contains(&a)));
        }
    }
}
