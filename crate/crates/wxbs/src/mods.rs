//! The iterative matcher-on-demand loop.
//!
//! Steps escalate from a cheap no-synthesis detector to dense tilt/
//! longitude view synthesis with affine adaptation. Features accumulate
//! across steps in persistent per-image lists; each iteration matches the
//! full lists with FGINN, prunes duplicates, verifies with LO-RANSAC and
//! the LAF-check, and stops as soon as enough verified correspondences
//! survive.

use crate::affine::LocalAffineFrame;
use crate::descriptor::{describe, DescriptorKind};
use crate::estimator::{laf_check, loransac, ModelRequest, PointPair, RansacParams, TwoViewModel};
use crate::image::Image;
use crate::matcher::{
    duplicate_filter, match_features, Correspondence, FeatureSet, MatcherParams,
};
use crate::patch::{extract_patch, photometric_normalize, NormalizeMode};
use crate::pyramid::{build_scale_space, detect, DetectorKind, DetectorParams};
use crate::shape::{baumberg_adapt, dominant_orientation, BaumbergParams};
use crate::synth::{backproject_lafs, gen_views, synth_view, StepConfig, DEFAULT_SIGMA_BASE};
use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Measurement-region magnification for descriptor patches; matches the
/// 41x41-at-sigma-3*sqrt(3) normalization convention.
const PATCH_MAG: f64 = 5.196152422706632;
/// Patch side for orientation histograms.
const ORIENTATION_PATCH_SIDE: usize = 21;
/// Radius for cross-step feature duplicate suppression, pixels.
const CROSS_STEP_DUPLICATE_RADIUS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ModsError {
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Match(#[from] crate::matcher::MatchError),
    #[error("configuration has no steps")]
    NoSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModsConfig {
    pub steps: Vec<StepConfig>,
    /// Minimum verified inliers to declare success.
    pub theta_m: usize,
    /// Maximum number of steps to run.
    pub s_max: usize,
    pub matcher: MatcherParams,
    pub ransac: RansacParams,
    pub model: ModelRequest,
    /// Correspondence duplicate-filter radius, pixels.
    pub duplicate_radius: f64,
}

impl Default for ModsConfig {
    fn default() -> Self {
        let steps = default_ladder();
        let s_max = steps.len();
        Self {
            steps,
            theta_m: 15,
            s_max,
            matcher: MatcherParams::default(),
            ransac: RansacParams::default(),
            model: ModelRequest::Homography,
            duplicate_radius: 10.0,
        }
    }
}

/// Per-step record of feature counts, matches and timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step_id: u32,
    pub views: (usize, usize),
    pub new_features: (usize, usize),
    pub total_features: (usize, usize),
    pub tentative: usize,
    pub after_duplicates: usize,
    pub verified_inliers: usize,
    pub millis: u128,
}

/// A verified correspondence with its frames in both images.
#[derive(Debug, Clone)]
pub struct MatchRecord {
    pub laf_a: LocalAffineFrame,
    pub laf_b: LocalAffineFrame,
    pub correspondence: Correspondence,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    /// The verified model; on failure the best sub-threshold model found.
    pub model: Option<TwoViewModel>,
    /// Inlier correspondences after the LAF-check.
    pub correspondences: Vec<MatchRecord>,
    pub steps_used: usize,
    pub per_step: Vec<StepStats>,
    /// True iff the verified inlier count reached `theta_m`.
    pub success: bool,
}

/// The default escalation ladder. Binary-feature and MSER steps of the
/// original configuration are substituted by Hessian and DoG equivalents
/// with the same escalation shape.
pub fn default_ladder() -> Vec<StepConfig> {
    let hessian = DetectorParams {
        threshold: 2e-4,
        r_min: 600,
        ..DetectorParams::default()
    };
    let dog = DetectorParams {
        threshold: 6e-3,
        r_min: 600,
        ..DetectorParams::default()
    };
    let mk = |step_id: u32,
              detector: DetectorKind,
              params: DetectorParams,
              scales: Vec<f64>,
              tilts: Vec<f64>,
              delta_phi_base: f64,
              adapt_shape: bool| StepConfig {
        step_id,
        detector,
        descriptor: DescriptorKind::RootSift,
        scales,
        tilts,
        delta_phi_base,
        detector_params: params,
        adapt_shape,
        sigma_base: DEFAULT_SIGMA_BASE,
    };
    vec![
        // Fast single-view pass with a raised threshold.
        mk(
            1,
            DetectorKind::Hessian,
            DetectorParams {
                threshold: 1e-3,
                ..hessian
            },
            vec![1.0],
            vec![1.0],
            360.0,
            false,
        ),
        mk(
            2,
            DetectorKind::Hessian,
            hessian,
            vec![1.0],
            vec![1.0, 5.0, 9.0],
            360.0,
            false,
        ),
        mk(
            3,
            DetectorKind::Dog,
            dog,
            vec![1.0, 0.25, 0.125],
            vec![1.0],
            360.0,
            false,
        ),
        mk(
            4,
            DetectorKind::Dog,
            dog,
            vec![1.0],
            vec![1.0, 3.0, 6.0, 9.0],
            360.0,
            false,
        ),
        mk(
            5,
            DetectorKind::Hessian,
            hessian,
            vec![1.0],
            vec![1.0, 2.0, 4.0, 6.0, 8.0],
            360.0,
            true,
        ),
        mk(
            6,
            DetectorKind::Hessian,
            hessian,
            vec![1.0],
            vec![1.0, 2.0, 4.0, 6.0, 8.0],
            120.0,
            true,
        ),
        mk(
            7,
            DetectorKind::Hessian,
            hessian,
            vec![1.0],
            vec![1.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            60.0,
            true,
        ),
    ]
}

fn rotation2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Detects, adapts, orients and describes features on all synthesized
/// views of one step, reprojected to original-image coordinates. Views
/// that fall below the minimum synthesis size are skipped.
fn extract_step_features(
    img: &Image,
    step: &StepConfig,
    view_id_base: u32,
) -> (Vec<(LocalAffineFrame, crate::descriptor::Descriptor)>, usize) {
    let views = gen_views(step);
    let n_views = views.len();
    let baumberg_params = BaumbergParams::default();
    let side = step.descriptor.patch_side();

    let per_view: Vec<Vec<(LocalAffineFrame, crate::descriptor::Descriptor)>> = views
        .par_iter()
        .enumerate()
        .map(|(view_idx, spec)| {
            let (view_img, a_view) = match synth_view(img, spec) {
                Ok(v) => v,
                Err(_) => return Vec::new(),
            };
            let ss = match build_scale_space(&view_img, &step.detector_params) {
                Ok(ss) => ss,
                Err(_) => return Vec::new(),
            };
            let detections = detect(&ss, step.detector, &step.detector_params);

            let mut lafs = Vec::new();
            let mut descriptors = Vec::new();
            for laf in detections {
                let shaped = if step.adapt_shape {
                    match baumberg_adapt(&view_img, &laf, &baumberg_params) {
                        Ok(adapted) => adapted,
                        Err(_) => continue,
                    }
                } else {
                    laf
                };
                let ori_patch =
                    match extract_patch(&view_img, &shaped, ORIENTATION_PATCH_SIDE, PATCH_MAG) {
                        Ok(p) => p,
                        Err(_) => continue,
                    };
                for theta in dominant_orientation(&ori_patch) {
                    let oriented = LocalAffineFrame {
                        a: shaped.a * rotation2(theta),
                        ..shaped.clone()
                    };
                    let patch = match extract_patch(&view_img, &oriented, side, PATCH_MAG) {
                        Ok(p) => p,
                        Err(_) => continue,
                    };
                    let patch = photometric_normalize(&patch, NormalizeMode::MeanHalfVar02);
                    let desc = describe(&patch, step.descriptor);
                    if !desc.normalized {
                        continue;
                    }
                    lafs.push(oriented.clone());
                    descriptors.push(desc);
                }
            }
            let view_id = view_id_base + view_idx as u32;
            match backproject_lafs(lafs, &a_view, view_id) {
                Ok(back) => back.into_iter().zip(descriptors).collect(),
                Err(_) => Vec::new(),
            }
        })
        .collect();

    (per_view.into_iter().flatten().collect(), n_views)
}

/// Appends new features to the global set, dropping any whose center lies
/// within the cross-step duplicate radius of an existing same-detector
/// feature.
fn merge_features(
    global: &mut FeatureSet,
    new: Vec<(LocalAffineFrame, crate::descriptor::Descriptor)>,
) -> usize {
    let mut added = 0;
    let cell = CROSS_STEP_DUPLICATE_RADIUS;
    let key = |x: f64, y: f64| ((x / cell).floor() as i64, (y / cell).floor() as i64);
    let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
    for (i, laf) in global.lafs.iter().enumerate() {
        grid.entry(key(laf.x, laf.y)).or_default().push(i);
    }
    'next: for (laf, desc) in new {
        let (kx, ky) = key(laf.x, laf.y);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = grid.get(&(kx + dx, ky + dy)) {
                    for &i in bucket {
                        let other = &global.lafs[i];
                        if other.detector == laf.detector
                            && (other.x - laf.x).hypot(other.y - laf.y)
                                <= CROSS_STEP_DUPLICATE_RADIUS
                        {
                            continue 'next;
                        }
                    }
                }
            }
        }
        grid.entry((kx, ky)).or_default().push(global.lafs.len());
        global.lafs.push(laf);
        global.descriptors.push(desc);
        added += 1;
    }
    added
}

/// Runs the iterative matching loop until `theta_m` verified inliers are
/// found or the ladder is exhausted. Feature lists persist across steps;
/// matching at step k sees everything steps 1..k produced.
pub fn run_mods(img1: &Image, img2: &Image, cfg: &ModsConfig) -> Result<MatchResult, ModsError> {
    if cfg.steps.is_empty() {
        return Err(ModsError::NoSteps);
    }
    let mut features1 = FeatureSet::default();
    let mut features2 = FeatureSet::default();
    let mut per_step: Vec<StepStats> = Vec::new();
    let mut best: Option<(TwoViewModel, Vec<MatchRecord>)> = None;
    let mut view_base = 0u32;

    let n_steps = cfg.steps.len().min(cfg.s_max);
    for (step_idx, step) in cfg.steps[..n_steps].iter().enumerate() {
        let started = std::time::Instant::now();

        let ((new1, views1), (new2, views2)) = rayon::join(
            || extract_step_features(img1, step, view_base),
            || extract_step_features(img2, step, view_base),
        );
        view_base += views1.max(views2) as u32;
        let added1 = merge_features(&mut features1, new1);
        let added2 = merge_features(&mut features2, new2);

        let mut stats = StepStats {
            step_id: step.step_id,
            views: (views1, views2),
            new_features: (added1, added2),
            total_features: (features1.len(), features2.len()),
            tentative: 0,
            after_duplicates: 0,
            verified_inliers: 0,
            millis: 0,
        };

        if features1.len() >= 1 && features2.len() >= 2 {
            let tentative = match_features(&features1, &features2, &cfg.matcher)?;
            stats.tentative = tentative.len();
            let filtered = duplicate_filter(
                tentative,
                &features1.lafs,
                &features2.lafs,
                cfg.duplicate_radius,
            );
            stats.after_duplicates = filtered.len();

            let pairs: Vec<PointPair> = filtered
                .iter()
                .map(|c| {
                    let a = &features1.lafs[c.idx_a];
                    let b = &features2.lafs[c.idx_b];
                    PointPair::new(a.x, a.y, b.x, b.y)
                })
                .collect();

            let ransac_params = RansacParams {
                seed: cfg.ransac.seed.wrapping_add(step_idx as u64),
                ..cfg.ransac
            };
            if let Ok(model) = loransac(&pairs, cfg.model, &ransac_params) {
                let inlier_pairs: Vec<(LocalAffineFrame, LocalAffineFrame)> = model
                    .inliers
                    .iter()
                    .map(|&i| {
                        (
                            features1.lafs[filtered[i].idx_a].clone(),
                            features2.lafs[filtered[i].idx_b].clone(),
                        )
                    })
                    .collect();
                let surviving = laf_check(&model, &inlier_pairs, ransac_params.inlier_threshold);
                stats.verified_inliers = surviving.len();

                let records: Vec<MatchRecord> = surviving
                    .iter()
                    .map(|&k| {
                        let corr_idx = model.inliers[k];
                        MatchRecord {
                            laf_a: features1.lafs[filtered[corr_idx].idx_a].clone(),
                            laf_b: features2.lafs[filtered[corr_idx].idx_b].clone(),
                            correspondence: filtered[corr_idx],
                        }
                    })
                    .collect();

                let verified_model = TwoViewModel {
                    inliers: surviving.iter().map(|&k| model.inliers[k]).collect(),
                    score: records.len(),
                    ..model
                };
                let better = best
                    .as_ref()
                    .map_or(true, |(_, recs)| records.len() > recs.len());
                if better {
                    best = Some((verified_model, records));
                }
            }
        }

        stats.millis = started.elapsed().as_millis();
        per_step.push(stats);

        if best
            .as_ref()
            .is_some_and(|(_, recs)| recs.len() >= cfg.theta_m)
        {
            break;
        }
    }

    let steps_used = per_step.len();
    let (model, correspondences, success) = match best {
        Some((model, records)) => {
            let success = records.len() >= cfg.theta_m;
            (Some(model), records, success)
        }
        None => (None, Vec::new(), false),
    };
    Ok(MatchResult {
        model,
        correspondences,
        steps_used,
        per_step,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random blob field, a stand-in for a textured photograph.
    pub(crate) fn textured_image(w: usize, h: usize, seed: u64, n_blobs: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
            .map(|_| {
                (
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                    rng.random_range(2.0..9.0),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        let mut data = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.15;
                for &(cx, cy, s, amp) in &blobs {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let r2 = dx * dx + dy * dy;
                    if r2 < 25.0 * s * s {
                        v += amp * (-r2 / (2.0 * s * s)).exp();
                    }
                }
                data[y * w + x] = (v.min(1.0)) as f32;
            }
        }
        Image::new(w, h, data).unwrap()
    }

    fn small_config() -> ModsConfig {
        let mut cfg = ModsConfig::default();
        cfg.steps.truncate(2);
        cfg.s_max = 2;
        cfg
    }

    #[test]
    fn identical_images_terminate_at_step_one() {
        let img = textured_image(200, 160, 5, 60);
        let cfg = small_config();
        let result = run_mods(&img, &img, &cfg).unwrap();
        assert!(result.success, "self-match must succeed");
        assert_eq!(result.steps_used, 1, "must stop after the first step");
        assert!(result.correspondences.len() >= cfg.theta_m);
        let model = result.model.unwrap();
        // H maps the corners onto themselves within a pixel.
        let h = model.m / model.m[(2, 2)];
        for corner in [(0.0, 0.0), (199.0, 0.0), (0.0, 159.0), (199.0, 159.0)] {
            let p = h * nalgebra::Vector3::new(corner.0, corner.1, 1.0);
            let err = ((p.x / p.z - corner.0).powi(2) + (p.y / p.z - corner.1).powi(2)).sqrt();
            assert!(err <= 1.0, "corner {corner:?} moved by {err}px");
        }
    }

    #[test]
    fn noise_pair_exhausts_steps_and_fails() {
        let a = textured_image(160, 128, 100, 50);
        let b = textured_image(160, 128, 200, 50);
        let mut cfg = small_config();
        cfg.theta_m = 15;
        let result = run_mods(&a, &b, &cfg).unwrap();
        assert!(!result.success);
        assert_eq!(result.steps_used, 2, "all steps must run");
        assert!(result.correspondences.len() < cfg.theta_m);
    }

    #[test]
    fn feature_lists_grow_monotonically() {
        let img1 = textured_image(200, 160, 7, 60);
        let img2 = textured_image(200, 160, 8, 60);
        let mut cfg = small_config();
        cfg.theta_m = 10_000; // force all steps
        let result = run_mods(&img1, &img2, &cfg).unwrap();
        let mut prev = (0, 0);
        for s in &result.per_step {
            assert!(s.total_features.0 >= prev.0 && s.total_features.1 >= prev.1);
            prev = s.total_features;
        }
    }

    #[test]
    fn empty_ladder_is_an_error() {
        let img = textured_image(64, 64, 1, 10);
        let cfg = ModsConfig {
            steps: vec![],
            ..ModsConfig::default()
        };
        assert!(matches!(run_mods(&img, &img, &cfg), Err(ModsError::NoSteps)));
    }
}
