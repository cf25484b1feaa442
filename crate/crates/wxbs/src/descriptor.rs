//! Patch descriptors: SIFT, RootSIFT, half-SIFT and normalized pixels.

use crate::patch::{photometric_normalize, NormalizeMode, Patch};
use serde::{Deserialize, Serialize};

const SPATIAL_CELLS: usize = 4;
const FULL_ORI_BINS: usize = 8;
const HALF_ORI_BINS: usize = 4;
const CLIP_THRESHOLD: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Sift,
    RootSift,
    HalfSift,
    Pixels,
}

impl DescriptorKind {
    /// Patch side the pipeline samples for this descriptor.
    pub fn patch_side(&self) -> usize {
        match self {
            DescriptorKind::Pixels => 41,
            _ => 32,
        }
    }

    /// Descriptor length for a given patch side.
    pub fn dim(&self, patch_side: usize) -> usize {
        match self {
            DescriptorKind::Sift | DescriptorKind::RootSift => {
                SPATIAL_CELLS * SPATIAL_CELLS * FULL_ORI_BINS
            }
            DescriptorKind::HalfSift => SPATIAL_CELLS * SPATIAL_CELLS * HALF_ORI_BINS,
            DescriptorKind::Pixels => patch_side * patch_side,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DescriptorKind::Sift => "sift",
            DescriptorKind::RootSift => "rootsift",
            DescriptorKind::HalfSift => "halfsift",
            DescriptorKind::Pixels => "pixels",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sift" => Some(DescriptorKind::Sift),
            "rootsift" => Some(DescriptorKind::RootSift),
            "halfsift" => Some(DescriptorKind::HalfSift),
            "pixels" => Some(DescriptorKind::Pixels),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub kind: DescriptorKind,
    /// False when the zero-descriptor guard fired (e.g. constant patch).
    pub normalized: bool,
}

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Describes a square patch. Gradient-based kinds require side >= 16.
pub fn describe(patch: &Patch, kind: DescriptorKind) -> Descriptor {
    match kind {
        DescriptorKind::Sift => gradient_histogram(patch, FULL_ORI_BINS, false, kind),
        DescriptorKind::HalfSift => gradient_histogram(patch, HALF_ORI_BINS, true, kind),
        DescriptorKind::RootSift => {
            let sift = gradient_histogram(patch, FULL_ORI_BINS, false, DescriptorKind::Sift);
            let values = rootsift_from(&sift.values);
            Descriptor {
                normalized: sift.normalized,
                values,
                kind,
            }
        }
        DescriptorKind::Pixels => pixels_descriptor(patch),
    }
}

/// RootSIFT map: L1-normalize, element-wise square root, L2-normalize.
pub fn rootsift_from(values: &[f32]) -> Vec<f32> {
    let l1: f32 = values.iter().map(|v| v.abs()).sum();
    if l1 <= 0.0 {
        return values.to_vec();
    }
    let mut out: Vec<f32> = values.iter().map(|v| (v.max(0.0) / l1).sqrt()).collect();
    let l2: f32 = out.iter().map(|v| v * v).sum::<f32>().sqrt();
    if l2 > 0.0 {
        for v in &mut out {
            *v /= l2;
        }
    }
    out
}

fn gradient_histogram(
    patch: &Patch,
    ori_bins: usize,
    fold: bool,
    kind: DescriptorKind,
) -> Descriptor {
    let side = patch.side();
    assert!(side >= 16, "gradient descriptors require patch side >= 16");
    let dim = SPATIAL_CELLS * SPATIAL_CELLS * ori_bins;
    let mut hist = vec![0f64; dim];
    let sigma_w = side as f64 / 2.0;
    let denom = 2.0 * sigma_w * sigma_w;
    let center = (side as f64 - 1.0) / 2.0;
    let ori_range = if fold {
        std::f64::consts::PI
    } else {
        2.0 * std::f64::consts::PI
    };
    let ori_width = ori_range / ori_bins as f64;

    let mut any = false;
    for y in 1..side - 1 {
        for x in 1..side - 1 {
            let gx = (patch.get(x + 1, y) - patch.get(x - 1, y)) as f64 / 2.0;
            let gy = (patch.get(x, y + 1) - patch.get(x, y - 1)) as f64 / 2.0;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            any = true;
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let w = mag * (-(dx * dx + dy * dy) / denom).exp();
            let theta = gy.atan2(gx).rem_euclid(2.0 * std::f64::consts::PI) % ori_range;

            // Trilinear soft assignment over (cell_x, cell_y, orientation).
            let cx = (x as f64 + 0.5) / side as f64 * SPATIAL_CELLS as f64 - 0.5;
            let cy = (y as f64 + 0.5) / side as f64 * SPATIAL_CELLS as f64 - 0.5;
            let ob = theta / ori_width - 0.5;
            let (cx0, fx) = split_floor(cx);
            let (cy0, fy) = split_floor(cy);
            let (ob0, fo) = split_floor(ob);
            for (ix, wx) in [(cx0, 1.0 - fx), (cx0 + 1, fx)] {
                if ix < 0 || ix >= SPATIAL_CELLS as i64 {
                    continue;
                }
                for (iy, wy) in [(cy0, 1.0 - fy), (cy0 + 1, fy)] {
                    if iy < 0 || iy >= SPATIAL_CELLS as i64 {
                        continue;
                    }
                    for (io, wo) in [(ob0, 1.0 - fo), (ob0 + 1, fo)] {
                        let io = io.rem_euclid(ori_bins as i64) as usize;
                        let idx =
                            (iy as usize * SPATIAL_CELLS + ix as usize) * ori_bins + io;
                        hist[idx] += w * wx * wy * wo;
                    }
                }
            }
        }
    }

    if !any {
        return Descriptor {
            values: vec![0.0; dim],
            kind,
            normalized: false,
        };
    }

    l2_normalize(&mut hist);
    for v in &mut hist {
        *v = v.min(CLIP_THRESHOLD as f64);
    }
    l2_normalize(&mut hist);
    Descriptor {
        values: hist.into_iter().map(|v| v as f32).collect(),
        kind,
        normalized: true,
    }
}

fn split_floor(v: f64) -> (i64, f64) {
    let f = v.floor();
    (f as i64, v - f)
}

fn l2_normalize(values: &mut [f64]) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in values {
            *v /= norm;
        }
    }
}

fn pixels_descriptor(patch: &Patch) -> Descriptor {
    let zero_mean = photometric_normalize(patch, NormalizeMode::ZeroMeanUnitStd);
    let mut values: Vec<f64> = zero_mean.data().iter().map(|&v| v as f64).collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let normalized = norm > 1e-6;
    if normalized {
        for v in &mut values {
            *v /= norm;
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Descriptor {
        values: values.into_iter().map(|v| v as f32).collect(),
        kind: DescriptorKind::Pixels,
        normalized,
    }
}
