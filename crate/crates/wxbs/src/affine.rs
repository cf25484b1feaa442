//! Local affine frames and the scale/tilt/longitude decomposition.
//!
//! A frame's 2x2 matrix `A` maps the unit circle to the measurement
//! ellipse. Any such matrix with positive determinant factors as
//!
//! ```text
//! A = lambda * R(psi) * diag(t, 1) * R(phi)
//! ```
//!
//! where `lambda` is the smaller singular value, `t >= 1` the ratio of the
//! singular values (the absolute tilt), `phi in [0, pi)` the longitude and
//! `psi in [0, 2*pi)` the residual camera roll. `det(A) = lambda^2 * t`.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AffineError {
    #[error("affine matrix must have positive determinant, got {0}")]
    NonPositiveDeterminant(f64),
    #[error("affine matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not a unit-determinant lower-triangular shape (det = {det}, upper-right = {upper_right})")]
    NotUnitShape { det: f64, upper_right: f64 },
    #[error("detector response must be finite")]
    NonFiniteResponse,
}

/// Detector that produced a frame; descriptors from different detectors
/// are matched in separate pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorTag {
    Hessian,
    Dog,
    /// Frames loaded from files or built by hand.
    External,
}

impl DetectorTag {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorTag::Hessian => "hessian",
            DetectorTag::Dog => "dog",
            DetectorTag::External => "external",
        }
    }
}

/// Keypoint center plus the 2x2 matrix of its measurement ellipse, in
/// original-image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAffineFrame {
    pub x: f64,
    pub y: f64,
    pub a: Matrix2<f64>,
    pub response: f64,
    /// Index of the synthesized view the frame was detected in.
    pub view_id: u32,
    pub detector: DetectorTag,
}

impl LocalAffineFrame {
    pub fn new(
        x: f64,
        y: f64,
        a: Matrix2<f64>,
        response: f64,
        view_id: u32,
        detector: DetectorTag,
    ) -> Result<Self, AffineError> {
        if !a.iter().all(|v| v.is_finite()) {
            return Err(AffineError::NonFinite);
        }
        let det = a.determinant();
        if det <= 0.0 {
            return Err(AffineError::NonPositiveDeterminant(det));
        }
        if !response.is_finite() {
            return Err(AffineError::NonFiniteResponse);
        }
        Ok(Self {
            x,
            y,
            a,
            response,
            view_id,
            detector,
        })
    }

    /// Circular frame of the given scale, zero orientation.
    pub fn circular(x: f64, y: f64, sigma: f64, response: f64, detector: DetectorTag) -> Self {
        Self {
            x,
            y,
            a: Matrix2::new(sigma, 0.0, 0.0, sigma),
            response,
            view_id: 0,
            detector,
        }
    }

    /// Isotropic scale of the frame, `sqrt(det A)` when the shape part has
    /// unit determinant.
    pub fn scale(&self) -> f64 {
        self.a.determinant().sqrt()
    }
}

/// `A = lambda * R(psi) * diag(t, 1) * R(phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineDecomposition {
    /// Isotropic scale, the smaller singular value. Positive.
    pub lambda: f64,
    /// Camera roll in `[0, 2*pi)`.
    pub psi: f64,
    /// Absolute tilt, ratio of singular values. At least 1.
    pub t: f64,
    /// Longitude in `[0, pi)`.
    pub phi: f64,
}

fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Decomposes a positive-determinant 2x2 matrix into scale, roll, tilt and
/// longitude via a closed-form SVD.
pub fn decompose_affine(a: &Matrix2<f64>) -> Result<AffineDecomposition, AffineError> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(AffineError::NonFinite);
    }
    let det = a.determinant();
    if det <= 0.0 {
        return Err(AffineError::NonPositiveDeterminant(det));
    }

    // Closed-form 2x2 SVD: A = R(gamma) * diag(sx, sy) * R(beta).
    let (a11, a12, a21, a22) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let e = (a11 + a22) / 2.0;
    let f = (a11 - a22) / 2.0;
    let g = (a21 + a12) / 2.0;
    let h = (a21 - a12) / 2.0;
    let q = e.hypot(h);
    let r = f.hypot(g);
    let sx = q + r;
    let sy = q - r; // positive because det = sx * sy > 0
    let angle_sum = h.atan2(e); // gamma + beta
    let angle_diff = g.atan2(f); // gamma - beta
    let mut psi = (angle_sum + angle_diff) / 2.0;
    let mut phi = (angle_sum - angle_diff) / 2.0;

    // Fold phi into [0, pi); each pi shift is absorbed by psi since
    // diag(t,1) * R(phi + pi) = R(pi) * diag(t,1) * R(phi).
    while phi < 0.0 {
        phi += std::f64::consts::PI;
        psi -= std::f64::consts::PI;
    }
    while phi >= std::f64::consts::PI {
        phi -= std::f64::consts::PI;
        psi += std::f64::consts::PI;
    }
    psi = psi.rem_euclid(2.0 * std::f64::consts::PI);

    Ok(AffineDecomposition {
        lambda: sy,
        psi,
        t: sx / sy,
        phi,
    })
}

/// Rebuilds the matrix `lambda * R(psi) * diag(t, 1) * R(phi)`.
pub fn compose_affine(d: &AffineDecomposition) -> Matrix2<f64> {
    rotation(d.psi) * Matrix2::new(d.t, 0.0, 0.0, 1.0) * rotation(d.phi) * d.lambda
}

/// Residual of a unit-determinant lower-triangular shape matrix:
/// `A'' = A' - I`. [`shape_from_residual`] inverts it.
pub fn residual_shape(a_prime: &Matrix2<f64>) -> Result<Matrix2<f64>, AffineError> {
    let det = a_prime.determinant();
    if (det - 1.0).abs() > 1e-6 || a_prime[(0, 1)].abs() > 1e-9 {
        return Err(AffineError::NotUnitShape {
            det,
            upper_right: a_prime[(0, 1)],
        });
    }
    Ok(a_prime - Matrix2::identity())
}

/// Adds the identity back to a residual shape.
pub fn shape_from_residual(residual: &Matrix2<f64>) -> Matrix2<f64> {
    residual + Matrix2::identity()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn roundtrip_error(a: &Matrix2<f64>) -> f64 {
        let d = decompose_affine(a).unwrap();
        let back = compose_affine(&d);
        (back - a).norm() / a.norm()
    }

    #[test]
    fn identity_decomposes_trivially() {
        let d = decompose_affine(&Matrix2::identity()).unwrap();
        assert_relative_eq!(d.lambda, 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.t, 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.psi, 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.phi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pure_tilt_decomposes_to_singular_values() {
        let d = decompose_affine(&Matrix2::new(2.0, 0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(d.lambda, 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.t, 2.0, epsilon = 1e-12);
        assert_relative_eq!(d.psi, 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.phi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_trivial_cases() {
        let id = compose_affine(&AffineDecomposition {
            lambda: 1.0,
            psi: 0.0,
            t: 1.0,
            phi: 0.0,
        });
        assert!((id - Matrix2::identity()).norm() < 1e-12);
        let tilt = compose_affine(&AffineDecomposition {
            lambda: 1.0,
            psi: 0.0,
            t: 2.0,
            phi: 0.0,
        });
        assert!((tilt - Matrix2::new(2.0, 0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn thousand_random_matrices_roundtrip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut count = 0;
        while count < 1000 {
            let m = Matrix2::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            if m.determinant() <= 1e-3 {
                continue;
            }
            assert!(
                roundtrip_error(&m) <= 1e-9,
                "roundtrip failed for {m:?}: {}",
                roundtrip_error(&m)
            );
            count += 1;
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(decompose_affine(&Matrix2::new(1.0, 0.0, 0.0, -1.0)).is_err());
        assert!(decompose_affine(&Matrix2::new(f64::NAN, 0.0, 0.0, 1.0)).is_err());
        assert!(decompose_affine(&Matrix2::zeros()).is_err());
    }

    #[test]
    fn residual_shape_subtracts_identity() {
        let a = Matrix2::new(1.25, 0.0, 0.3, 0.8);
        let r = residual_shape(&a).unwrap();
        assert!((r - Matrix2::new(0.25, 0.0, 0.3, -0.2)).norm() < 1e-12);
        assert!((shape_from_residual(&r) - a).norm() < 1e-12);
        assert!(residual_shape(&Matrix2::identity()).unwrap().norm() < 1e-12);
    }

    #[test]
    fn residual_shape_rejects_non_unit_det() {
        assert!(residual_shape(&Matrix2::new(2.0, 0.0, 0.0, 1.0)).is_err());
        assert!(residual_shape(&Matrix2::new(1.0, 0.5, 0.0, 1.0)).is_err());
    }

    #[test]
    fn laf_validation() {
        let ok = LocalAffineFrame::new(
            0.0,
            0.0,
            Matrix2::identity(),
            1.0,
            0,
            DetectorTag::Hessian,
        );
        assert!(ok.is_ok());
        let bad = LocalAffineFrame::new(
            0.0,
            0.0,
            Matrix2::new(1.0, 0.0, 0.0, -1.0),
            1.0,
            0,
            DetectorTag::Hessian,
        );
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_random(
            a11 in -3.0f64..3.0, a12 in -3.0f64..3.0,
            a21 in -3.0f64..3.0, a22 in -3.0f64..3.0,
        ) {
            let m = Matrix2::new(a11, a12, a21, a22);
            prop_assume!(m.determinant() > 1e-3);
            prop_assert!(roundtrip_error(&m) <= 1e-9);
        }

        #[test]
        fn decompose_is_scale_equivariant(
            a11 in -3.0f64..3.0, a12 in -3.0f64..3.0,
            a21 in -3.0f64..3.0, a22 in -3.0f64..3.0,
            s in 0.1f64..10.0,
        ) {
            let m = Matrix2::new(a11, a12, a21, a22);
            prop_assume!(m.determinant() > 1e-3);
            let d = decompose_affine(&m).unwrap();
            let ds = decompose_affine(&(m * s)).unwrap();
            prop_assert!((ds.lambda - s * d.lambda).abs() <= 1e-9 * s * d.lambda.max(1.0));
            prop_assert!((ds.t - d.t).abs() <= 1e-9 * d.t);
            // Angles are scale-invariant up to the phi/psi pi-wrap pairing.
            let angdist = |x: f64| {
                let r = x.abs().rem_euclid(std::f64::consts::PI);
                r.min(std::f64::consts::PI - r)
            };
            prop_assert!(angdist(ds.phi - d.phi) <= 1e-9);
            prop_assert!(angdist(ds.psi - d.psi) <= 1e-9);
        }

        #[test]
        fn residual_roundtrip(a21 in -2.0f64..2.0, a11 in 0.2f64..3.0) {
            let a22 = 1.0 / a11;
            let a = Matrix2::new(a11, 0.0, a21, a22);
            let r = residual_shape(&a).unwrap();
            prop_assert!((shape_from_residual(&r) - a).norm() < 1e-12);
        }
    }
}
