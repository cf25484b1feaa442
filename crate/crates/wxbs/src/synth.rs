//! Affine view synthesis: scale, in-plane rotation and anti-aliased tilt.
//!
//! A synthesized view samples the view sphere at (scale S, tilt t,
//! longitude phi). Synthesis runs in four stages: Gaussian-guarded
//! downscaling, rotation by phi with canvas expansion, anisotropic
//! anti-alias blur, and a horizontal shrink by t. The composed 3x3 affine
//! `A_view` maps original pixel coordinates to view coordinates exactly;
//! detected frames are reprojected back through its inverse.

use crate::affine::LocalAffineFrame;
use crate::descriptor::DescriptorKind;
use crate::image::{Image, ImageError};
use crate::pyramid::{gaussian_blur, DetectorKind, DetectorParams};
use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Anti-alias blur unit; exposed in [`SynthViewSpec::sigma_base`].
pub const DEFAULT_SIGMA_BASE: f64 = 0.8;
const MIN_OUTPUT: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthesized view would be smaller than {min} px ({width}x{height})")]
    OutputTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("view transform is singular")]
    SingularTransform,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Parameters of one synthesized view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthViewSpec {
    /// Downsampling factor, at most 1.
    pub scale: f64,
    /// Absolute tilt, at least 1.
    pub tilt: f64,
    /// Longitude in degrees, canonically in [0, 180).
    pub phi_deg: f64,
    /// Anti-alias blur unit.
    pub sigma_base: f64,
}

impl SynthViewSpec {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            tilt: 1.0,
            phi_deg: 0.0,
            sigma_base: DEFAULT_SIGMA_BASE,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.tilt == 1.0 && self.phi_deg == 0.0
    }

    /// The linear part `S * diag(1/t, 1) * R(phi)` of the view transform
    /// (translation depends on the image and canvas sizes).
    pub fn linear_part(&self) -> Matrix2<f64> {
        let phi = self.phi_deg.to_radians();
        let (s, c) = phi.sin_cos();
        Matrix2::new(1.0 / self.tilt, 0.0, 0.0, 1.0) * Matrix2::new(c, -s, s, c) * self.scale
    }
}

/// One iteration of the escalation ladder: which detector/descriptor to
/// run and which views to synthesize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub step_id: u32,
    pub detector: DetectorKind,
    pub descriptor: DescriptorKind,
    /// Scale set {S}, entries in (0, 1].
    pub scales: Vec<f64>,
    /// Tilt set {t}, entries >= 1.
    pub tilts: Vec<f64>,
    /// Longitude sampling step at tilt 1, degrees in (0, 360].
    pub delta_phi_base: f64,
    #[serde(default)]
    pub detector_params: DetectorParams,
    /// Run Baumberg affine adaptation on detections.
    #[serde(default)]
    pub adapt_shape: bool,
    #[serde(default = "default_sigma_base")]
    pub sigma_base: f64,
}

fn default_sigma_base() -> f64 {
    DEFAULT_SIGMA_BASE
}

/// Generates the Cartesian view set of a step: scales x tilts, with
/// longitudes `{0, dphi, 2*dphi, ...}` inside `[0, 180)` where
/// `dphi = delta_phi_base / t`. Tilt 1 contributes only `phi = 0`.
pub fn gen_views(cfg: &StepConfig) -> Vec<SynthViewSpec> {
    let mut views = Vec::new();
    let mut seen: Vec<(f64, f64, f64)> = Vec::new();
    for &scale in &cfg.scales {
        for &tilt in &cfg.tilts {
            let phis: Vec<f64> = if tilt <= 1.0 {
                vec![0.0]
            } else {
                let dphi = cfg.delta_phi_base / tilt;
                let mut phis = Vec::new();
                let mut phi = 0.0;
                while phi < 180.0 - 1e-9 {
                    phis.push(phi);
                    phi += dphi;
                }
                phis
            };
            for phi in phis {
                if seen
                    .iter()
                    .any(|&(s, t, p)| s == scale && t == tilt && p == phi)
                {
                    continue;
                }
                seen.push((scale, tilt, phi));
                views.push(SynthViewSpec {
                    scale,
                    tilt,
                    phi_deg: phi,
                    sigma_base: cfg.sigma_base,
                });
            }
        }
    }
    views
}

fn resample(img: &Image, inverse: &Matrix3<f64>, width: usize, height: usize) -> Image {
    let mut out = Image::from_raw(width, height, vec![0.0; width * height]);
    for y in 0..height {
        for x in 0..width {
            let p = inverse * Vector3::new(x as f64, y as f64, 1.0);
            out.set(x, y, img.sample_bilinear(p.x, p.y));
        }
    }
    out
}

/// Synthesizes a view. Returns the warped image and the exact affine map
/// from original to view pixel coordinates. The blur and warp stages are
/// skipped entirely for the identity spec.
pub fn synth_view(img: &Image, spec: &SynthViewSpec) -> Result<(Image, Matrix3<f64>), SynthError> {
    if spec.is_identity() {
        return Ok((img.clone(), Matrix3::identity()));
    }

    let mut current = img.clone();
    let mut a_view = Matrix3::identity();

    // Stage 1: scale synthesis with a Gaussian guard against aliasing.
    if spec.scale < 1.0 {
        let s = spec.scale;
        let guard = spec.sigma_base * (1.0 / s - 1.0);
        let blurred = gaussian_blur(&current, guard);
        let w = ((current.width() as f64) * s).round().max(1.0) as usize;
        let h = ((current.height() as f64) * s).round().max(1.0) as usize;
        let stage = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
        let inv = Matrix3::new(1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0, 0.0, 0.0, 1.0);
        current = resample(&blurred, &inv, w, h);
        a_view = stage * a_view;
    }

    // Stage 2: in-plane rotation about the image center, canvas expanded
    // to the rotated bounding box with border replication.
    if spec.phi_deg != 0.0 {
        let phi = spec.phi_deg.to_radians();
        let (sin, cos) = phi.sin_cos();
        let w = current.width() as f64;
        let h = current.height() as f64;
        let cx = (w - 1.0) / 2.0;
        let cy = (h - 1.0) / 2.0;
        // Rotated corner extents.
        let half_w = (w * cos.abs() + h * sin.abs()) / 2.0;
        let half_h = (w * sin.abs() + h * cos.abs()) / 2.0;
        let new_w = (2.0 * half_w).round().max(1.0) as usize;
        let new_h = (2.0 * half_h).round().max(1.0) as usize;
        let ncx = (new_w as f64 - 1.0) / 2.0;
        let ncy = (new_h as f64 - 1.0) / 2.0;
        let stage = Matrix3::new(
            cos,
            -sin,
            ncx - cos * cx + sin * cy,
            sin,
            cos,
            ncy - sin * cx - cos * cy,
            0.0,
            0.0,
            1.0,
        );
        let inv = stage.try_inverse().ok_or(SynthError::SingularTransform)?;
        current = resample(&current, &inv, new_w, new_h);
        a_view = stage * a_view;
    }

    // Stages 3 and 4: anisotropic anti-alias blur, then the tilt itself.
    if spec.tilt > 1.0 {
        let t = spec.tilt;
        current = anisotropic_blur(&current, t * spec.sigma_base, spec.sigma_base);
        let w = ((current.width() as f64) / t).round().max(1.0) as usize;
        let h = current.height();
        let stage = Matrix3::new(1.0 / t, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let inv = Matrix3::new(t, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        current = resample(&current, &inv, w, h);
        a_view = stage * a_view;
    }

    if current.width().min(current.height()) < MIN_OUTPUT {
        return Err(SynthError::OutputTooSmall {
            width: current.width(),
            height: current.height(),
            min: MIN_OUTPUT,
        });
    }
    Ok((current, a_view))
}

/// Separable Gaussian with different horizontal and vertical sigmas.
fn anisotropic_blur(img: &Image, sigma_x: f64, sigma_y: f64) -> Image {
    let blur_1d = |img: &Image, sigma: f64, horizontal: bool| -> Image {
        if sigma <= 0.0 {
            return img.clone();
        }
        let radius = (4.0 * sigma).ceil().max(1.0) as i64;
        let denom = 2.0 * sigma * sigma;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for i in -radius..=radius {
            kernel.push((-(i * i) as f64 / denom).exp());
        }
        let sum: f64 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.into_iter().map(|v| (v / sum) as f32).collect();
        let (w, h) = (img.width(), img.height());
        let mut out = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    let o = k as i64 - radius;
                    acc += kv
                        * if horizontal {
                            img.get_clamped(x as i64 + o, y as i64)
                        } else {
                            img.get_clamped(x as i64, y as i64 + o)
                        };
                }
                out[y * w + x] = acc;
            }
        }
        Image::from_raw(w, h, out)
    };
    blur_1d(&blur_1d(img, sigma_x, true), sigma_y, false)
}

/// Reprojects frames detected in a synthesized view back to the original
/// image: centers through `A_view^-1`, shapes left-composed with its
/// linear part. The view id is recorded on every frame.
pub fn backproject_lafs(
    lafs: Vec<LocalAffineFrame>,
    a_view: &Matrix3<f64>,
    view_id: u32,
) -> Result<Vec<LocalAffineFrame>, SynthError> {
    let inv = a_view.try_inverse().ok_or(SynthError::SingularTransform)?;
    let linear = Matrix2::new(inv[(0, 0)], inv[(0, 1)], inv[(1, 0)], inv[(1, 1)]);
    Ok(lafs
        .into_iter()
        .map(|laf| {
            let p = inv * Vector3::new(laf.x, laf.y, 1.0);
            LocalAffineFrame {
                x: p.x,
                y: p.y,
                a: linear * laf.a,
                view_id,
                ..laf
            }
        })
        .collect())
}
