//! Square patches sampled from measurement regions.

use crate::affine::LocalAffineFrame;
use crate::image::Image;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("patch side must be at least {min}, got {side}")]
    SideTooSmall { side: usize, min: usize },
    #[error("frame matrix is numerically degenerate (condition number {0:.3e})")]
    DegenerateFrame(f64),
    #[error("patch data length {len} does not match side {side}")]
    DataMismatch { side: usize, len: usize },
}

/// Square patch of row-major intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeMode {
    /// Zero mean, unit standard deviation.
    ZeroMeanUnitStd,
    /// Mean 0.5, variance 0.2.
    MeanHalfVar02,
}

impl Patch {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self, PatchError> {
        if side == 0 {
            return Err(PatchError::SideTooSmall { side, min: 1 });
        }
        if data.len() != side * side {
            return Err(PatchError::DataMismatch {
                side,
                len: data.len(),
            });
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.side + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }
}

/// Samples a square patch around a frame's measurement region.
///
/// Grid point `(col, row)` samples the image at
/// `center + (2 * mag / side) * A * u`, where `u` is the offset of the
/// grid point from the patch center. With `A = I` and `mag = side / 2`
/// this reduces to a plain bilinear crop. Out-of-image samples replicate
/// the border.
pub fn extract_patch(
    img: &Image,
    laf: &LocalAffineFrame,
    side: usize,
    mag: f64,
) -> Result<Patch, PatchError> {
    if side < 3 {
        return Err(PatchError::SideTooSmall { side, min: 3 });
    }
    let cond = condition_number(&laf.a);
    if !cond.is_finite() || cond > 1e6 {
        return Err(PatchError::DegenerateFrame(cond));
    }

    let step = 2.0 * mag / side as f64;
    let half = (side as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(side * side);
    for row in 0..side {
        let v = (row as f64 - half) * step;
        for col in 0..side {
            let u = (col as f64 - half) * step;
            let dx = laf.a[(0, 0)] * u + laf.a[(0, 1)] * v;
            let dy = laf.a[(1, 0)] * u + laf.a[(1, 1)] * v;
            data.push(img.sample_bilinear(laf.x + dx, laf.y + dy));
        }
    }
    Ok(Patch { side, data })
}

fn condition_number(a: &nalgebra::Matrix2<f64>) -> f64 {
    match crate::affine::decompose_affine(a) {
        Ok(d) => d.t,
        Err(_) => f64::INFINITY,
    }
}

/// Normalizes patch statistics: zero-mean/unit-std or mean 0.5/var 0.2.
/// A standard-deviation guard of 1e-8 keeps constant patches finite.
pub fn photometric_normalize(p: &Patch, mode: NormalizeMode) -> Patch {
    let mean = p.mean();
    let std = p.std() + 1e-8;
    let (target_mean, target_std) = match mode {
        NormalizeMode::ZeroMeanUnitStd => (0.0, 1.0),
        NormalizeMode::MeanHalfVar02 => (0.5, 0.2_f64.sqrt()),
    };
    let data = p
        .data
        .iter()
        .map(|&v| (target_mean + (v as f64 - mean) / std * target_std) as f32)
        .collect();
    Patch {
        side: p.side,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::DetectorTag;
    use nalgebra::Matrix2;

    fn gradient_image(w: usize, h: usize) -> Image {
        let data = (0..w * h)
            .map(|i| {
                let x = i % w;
                let y = i / w;
                (x as f32 + y as f32 * 0.5) / (w + h) as f32
            })
            .collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let img = Image::constant(32, 32, 0.7);
        let laf = LocalAffineFrame::circular(16.0, 16.0, 3.0, 1.0, DetectorTag::Hessian);
        let p = extract_patch(&img, &laf, 11, 9.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn identity_frame_equals_bilinear_crop() {
        let img = gradient_image(40, 40);
        let side = 9;
        let laf = LocalAffineFrame::circular(20.0, 20.0, 1.0, 1.0, DetectorTag::Hessian);
        let p = extract_patch(&img, &laf, side, side as f64 / 2.0).unwrap();
        let half = (side as f64 - 1.0) / 2.0;
        for row in 0..side {
            for col in 0..side {
                let expected =
                    img.sample_bilinear(20.0 + col as f64 - half, 20.0 + row as f64 - half);
                assert!(
                    (p.get(col, row) - expected).abs() <= 1e-6,
                    "mismatch at ({col},{row})"
                );
            }
        }
    }

    #[test]
    fn frame_outside_image_replicates_border() {
        let img = gradient_image(20, 20);
        let corner = img.get(19, 19);
        let laf = LocalAffineFrame::circular(500.0, 500.0, 2.0, 1.0, DetectorTag::Hessian);
        let p = extract_patch(&img, &laf, 7, 6.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - corner).abs() < 1e-6));
    }

    #[test]
    fn degenerate_frame_rejected() {
        let img = gradient_image(20, 20);
        let laf = LocalAffineFrame {
            x: 10.0,
            y: 10.0,
            a: Matrix2::new(1e5, 0.0, 0.0, 1e-5),
            response: 1.0,
            view_id: 0,
            detector: DetectorTag::Hessian,
        };
        assert!(matches!(
            extract_patch(&img, &laf, 7, 6.0),
            Err(PatchError::DegenerateFrame(_))
        ));
    }

    #[test]
    fn normalize_constant_patch_is_all_zero() {
        let p = Patch::new(3, vec![0.25; 9]).unwrap();
        let n = photometric_normalize(&p, NormalizeMode::ZeroMeanUnitStd);
        assert!(n.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn normalize_two_level_patch() {
        let p = Patch::new(2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let n = photometric_normalize(&p, NormalizeMode::ZeroMeanUnitStd);
        for (&v, &e) in n.data().iter().zip(&[-1.0_f32, 1.0, -1.0, 1.0]) {
            assert!((v - e).abs() < 1e-5);
        }
        let n = photometric_normalize(&p, NormalizeMode::MeanHalfVar02);
        let lo = 0.5 - 0.2_f32.sqrt();
        let hi = 0.5 + 0.2_f32.sqrt();
        for (&v, &e) in n.data().iter().zip(&[lo, hi, lo, hi]) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_is_idempotent_in_zero_mean_mode() {
        let p = Patch::new(3, vec![0.1, 0.4, 0.9, 0.3, 0.2, 0.8, 0.5, 0.6, 0.7]).unwrap();
        let once = photometric_normalize(&p, NormalizeMode::ZeroMeanUnitStd);
        let twice = photometric_normalize(&once, NormalizeMode::ZeroMeanUnitStd);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
