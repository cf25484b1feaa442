//! Gaussian scale space and similarity-covariant keypoint detection.

use crate::affine::{DetectorTag, LocalAffineFrame};
use crate::image::{Image, ImageError};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Assumed blur of the input image.
const INITIAL_SIGMA: f64 = 0.5;
/// Octaves stop once the next level would fall below this size.
const MIN_DIMENSION: usize = 16;
/// Detections closer to the level border are dropped.
const BORDER_MARGIN: usize = 5;
/// Edge-like rejection ratio, trace^2 / det < (r + 1)^2 / r.
const EDGE_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Hessian,
    Dog,
}

impl DetectorKind {
    pub fn tag(&self) -> DetectorTag {
        match self {
            DetectorKind::Hessian => DetectorTag::Hessian,
            DetectorKind::Dog => DetectorTag::Dog,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Response magnitude threshold.
    pub threshold: f64,
    /// Minimum number of features to keep when the threshold is too strict.
    pub r_min: usize,
    pub levels_per_octave: usize,
    pub sigma_base: f64,
    /// Keep edge-like responses (trace/det test disabled).
    pub edge_like_allowed: bool,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            threshold: 1e-4,
            r_min: 500,
            levels_per_octave: 3,
            sigma_base: 1.6,
            edge_like_allowed: false,
        }
    }
}

/// One blurred level of an octave.
#[derive(Debug, Clone)]
pub struct Level {
    pub image: Image,
    /// Blur in the octave's own pixel units.
    pub sigma: f64,
    /// Absolute blur in original-image pixels.
    pub sigma_abs: f64,
}

#[derive(Debug, Clone)]
pub struct Octave {
    pub levels: Vec<Level>,
    /// Pixel size relative to the original image (1, 2, 4, ...).
    pub downsample: f64,
}

#[derive(Debug, Clone)]
pub struct ScaleSpace {
    pub octaves: Vec<Octave>,
    pub levels_per_octave: usize,
    pub sigma_base: f64,
}

/// Separable Gaussian blur with border replication.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / denom).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|v| (v / sum) as f32).collect();

    let (w, h) = (img.width(), img.height());
    // Horizontal pass.
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = x as i64 + k as i64 - radius;
                acc += kv * img.get_clamped(sx, y as i64);
            }
            tmp[y * w + x] = acc;
        }
    }
    let tmp = Image::from_raw(w, h, tmp);
    // Vertical pass.
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = y as i64 + k as i64 - radius;
                acc += kv * tmp.get_clamped(x as i64, sy);
            }
            out[y * w + x] = acc;
        }
    }
    Image::from_raw(w, h, out)
}

fn downsample_by_two(img: &Image) -> Image {
    let w = img.width().div_ceil(2);
    let h = img.height().div_ceil(2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(img.get(x * 2, y * 2));
        }
    }
    Image::from_raw(w, h, data)
}

/// Builds the Gaussian pyramid. Each octave holds `levels_per_octave + 3`
/// levels with blur `sigma_base * 2^(s / levels_per_octave)`; octaves are
/// downsampled 2x until the smaller dimension falls under 16 px.
pub fn build_scale_space(img: &Image, params: &DetectorParams) -> Result<ScaleSpace, ImageError> {
    if img.width().min(img.height()) < MIN_DIMENSION {
        return Err(ImageError::TooSmall {
            width: img.width(),
            height: img.height(),
            min: MIN_DIMENSION,
        });
    }
    let s = params.levels_per_octave.max(3);
    let sigma_base = params.sigma_base;
    let n_levels = s + 3;

    let mut octaves = Vec::new();
    let initial_extra = (sigma_base * sigma_base - INITIAL_SIGMA * INITIAL_SIGMA)
        .max(0.0)
        .sqrt();
    let mut base = gaussian_blur(img, initial_extra);
    let mut downsample = 1.0;

    loop {
        let mut levels = Vec::with_capacity(n_levels);
        levels.push(Level {
            image: base.clone(),
            sigma: sigma_base,
            sigma_abs: sigma_base * downsample,
        });
        for lvl in 1..n_levels {
            let sigma_prev = sigma_base * 2f64.powf((lvl - 1) as f64 / s as f64);
            let sigma_cur = sigma_base * 2f64.powf(lvl as f64 / s as f64);
            let delta = (sigma_cur * sigma_cur - sigma_prev * sigma_prev).sqrt();
            let image = gaussian_blur(&levels[lvl - 1].image, delta);
            levels.push(Level {
                image,
                sigma: sigma_cur,
                sigma_abs: sigma_cur * downsample,
            });
        }
        // The level with blur 2*sigma_base seeds the next octave.
        let seed = levels[s].image.clone();
        octaves.push(Octave { levels, downsample });

        let next = downsample_by_two(&seed);
        if next.width().min(next.height()) < MIN_DIMENSION {
            break;
        }
        base = next;
        downsample *= 2.0;
    }

    Ok(ScaleSpace {
        octaves,
        levels_per_octave: s,
        sigma_base,
    })
}

/// Detection response stack for one octave: one response image per level
/// with its scale in octave pixel units.
struct ResponseStack {
    responses: Vec<Vec<f32>>,
    sigmas: Vec<f64>,
    width: usize,
    height: usize,
}

fn hessian_responses(octave: &Octave) -> ResponseStack {
    let w = octave.levels[0].image.width();
    let h = octave.levels[0].image.height();
    let mut responses = Vec::with_capacity(octave.levels.len());
    let mut sigmas = Vec::with_capacity(octave.levels.len());
    for level in &octave.levels {
        let img = &level.image;
        let norm = (level.sigma * level.sigma * level.sigma * level.sigma) as f32;
        let mut resp = vec![0f32; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w - 1 {
                let ixx = img.get(x + 1, y) - 2.0 * img.get(x, y) + img.get(x - 1, y);
                let iyy = img.get(x, y + 1) - 2.0 * img.get(x, y) + img.get(x, y - 1);
                let ixy = (img.get(x + 1, y + 1) + img.get(x - 1, y - 1)
                    - img.get(x + 1, y - 1)
                    - img.get(x - 1, y + 1))
                    / 4.0;
                resp[y * w + x] = norm * (ixx * iyy - ixy * ixy);
            }
        }
        responses.push(resp);
        sigmas.push(level.sigma);
    }
    ResponseStack {
        responses,
        sigmas,
        width: w,
        height: h,
    }
}

fn dog_responses(octave: &Octave) -> ResponseStack {
    let w = octave.levels[0].image.width();
    let h = octave.levels[0].image.height();
    let mut responses = Vec::with_capacity(octave.levels.len() - 1);
    let mut sigmas = Vec::with_capacity(octave.levels.len() - 1);
    for pair in octave.levels.windows(2) {
        let (lo, hi) = (&pair[0].image, &pair[1].image);
        let resp = hi
            .data()
            .iter()
            .zip(lo.data())
            .map(|(a, b)| a - b)
            .collect();
        responses.push(resp);
        sigmas.push(pair[0].sigma);
    }
    ResponseStack {
        responses,
        sigmas,
        width: w,
        height: h,
    }
}

impl ResponseStack {
    #[inline]
    fn at(&self, s: usize, x: usize, y: usize) -> f32 {
        self.responses[s][y * self.width + x]
    }

    fn is_extremum(&self, s: usize, x: usize, y: usize) -> bool {
        let v = self.at(s, x, y);
        let mut is_max = true;
        let mut is_min = true;
        for ds in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if ds == 0 && dy == 0 && dx == 0 {
                        continue;
                    }
                    let n = self.at(
                        (s as i64 + ds) as usize,
                        (x as i64 + dx) as usize,
                        (y as i64 + dy) as usize,
                    );
                    if v <= n {
                        is_max = false;
                    }
                    if v >= n {
                        is_min = false;
                    }
                    if !is_max && !is_min {
                        return false;
                    }
                }
            }
        }
        is_max || is_min
    }

    /// Gradient and Hessian of the response in (x, y, s) at a sample.
    fn local_quadratic(&self, s: usize, x: usize, y: usize) -> (Vector3<f64>, Matrix3<f64>) {
        let v = self.at(s, x, y) as f64;
        let dx = (self.at(s, x + 1, y) as f64 - self.at(s, x - 1, y) as f64) / 2.0;
        let dy = (self.at(s, x, y + 1) as f64 - self.at(s, x, y - 1) as f64) / 2.0;
        let ds = (self.at(s + 1, x, y) as f64 - self.at(s - 1, x, y) as f64) / 2.0;
        let dxx = self.at(s, x + 1, y) as f64 - 2.0 * v + self.at(s, x - 1, y) as f64;
        let dyy = self.at(s, x, y + 1) as f64 - 2.0 * v + self.at(s, x, y - 1) as f64;
        let dss = self.at(s + 1, x, y) as f64 - 2.0 * v + self.at(s - 1, x, y) as f64;
        let dxy = (self.at(s, x + 1, y + 1) as f64 + self.at(s, x - 1, y - 1) as f64
            - self.at(s, x + 1, y - 1) as f64
            - self.at(s, x - 1, y + 1) as f64)
            / 4.0;
        let dxs = (self.at(s + 1, x + 1, y) as f64 + self.at(s - 1, x - 1, y) as f64
            - self.at(s + 1, x - 1, y) as f64
            - self.at(s - 1, x + 1, y) as f64)
            / 4.0;
        let dys = (self.at(s + 1, x, y + 1) as f64 + self.at(s - 1, x, y - 1) as f64
            - self.at(s + 1, x, y - 1) as f64
            - self.at(s - 1, x, y + 1) as f64)
            / 4.0;
        (
            Vector3::new(dx, dy, ds),
            Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss),
        )
    }

    fn edge_like(&self, s: usize, x: usize, y: usize) -> bool {
        let v = self.at(s, x, y) as f64;
        let dxx = self.at(s, x + 1, y) as f64 - 2.0 * v + self.at(s, x - 1, y) as f64;
        let dyy = self.at(s, x, y + 1) as f64 - 2.0 * v + self.at(s, x, y - 1) as f64;
        let dxy = (self.at(s, x + 1, y + 1) as f64 + self.at(s, x - 1, y - 1) as f64
            - self.at(s, x + 1, y - 1) as f64
            - self.at(s, x - 1, y + 1) as f64)
            / 4.0;
        let tr = dxx + dyy;
        let det = dxx * dyy - dxy * dxy;
        if det <= 0.0 {
            return true;
        }
        tr * tr / det >= (EDGE_RATIO + 1.0) * (EDGE_RATIO + 1.0) / EDGE_RATIO
    }
}

/// Detects scale-space extrema of the chosen response, refines them to
/// sub-pixel/sub-scale accuracy and applies adaptive thresholding. Output
/// frames are circular (`A = sigma * I`) in original-image coordinates,
/// sorted by descending response magnitude.
pub fn detect(
    ss: &ScaleSpace,
    kind: DetectorKind,
    params: &DetectorParams,
) -> Vec<LocalAffineFrame> {
    let mut features = Vec::new();
    for octave in &ss.octaves {
        let stack = match kind {
            DetectorKind::Hessian => hessian_responses(octave),
            DetectorKind::Dog => dog_responses(octave),
        };
        if stack.width <= 2 * BORDER_MARGIN || stack.height <= 2 * BORDER_MARGIN {
            continue;
        }
        let s_count = stack.responses.len();
        for s in 1..s_count - 1 {
            for y in BORDER_MARGIN..stack.height - BORDER_MARGIN {
                for x in BORDER_MARGIN..stack.width - BORDER_MARGIN {
                    if !stack.is_extremum(s, x, y) {
                        continue;
                    }
                    // Saddle points of the Hessian response are not blobs.
                    if kind == DetectorKind::Hessian && stack.at(s, x, y) <= 0.0 {
                        continue;
                    }
                    if let Some(feat) = refine_and_build(&stack, octave, kind, params, s, x, y) {
                        features.push(feat);
                    }
                }
            }
        }
    }

    features.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    adaptive_threshold(features, params.threshold, params.r_min)
}

fn refine_and_build(
    stack: &ResponseStack,
    octave: &Octave,
    kind: DetectorKind,
    params: &DetectorParams,
    mut s: usize,
    mut x: usize,
    mut y: usize,
) -> Option<LocalAffineFrame> {
    let s_count = stack.responses.len();
    let mut offset = Vector3::zeros();
    let mut converged = false;
    for _ in 0..3 {
        let (g, h) = stack.local_quadratic(s, x, y);
        offset = h.lu().solve(&(-g))?;
        if offset.x.abs() <= 0.5 && offset.y.abs() <= 0.5 && offset.z.abs() <= 0.5 {
            converged = true;
            break;
        }
        // Step towards the predicted extremum and retry.
        let nx = (x as i64 + offset.x.round() as i64).clamp(
            BORDER_MARGIN as i64,
            stack.width as i64 - 1 - BORDER_MARGIN as i64,
        );
        let ny = (y as i64 + offset.y.round() as i64).clamp(
            BORDER_MARGIN as i64,
            stack.height as i64 - 1 - BORDER_MARGIN as i64,
        );
        let ns = (s as i64 + offset.z.round() as i64).clamp(1, s_count as i64 - 2);
        if nx as usize == x && ny as usize == y && ns as usize == s {
            break;
        }
        x = nx as usize;
        y = ny as usize;
        s = ns as usize;
    }
    if !converged {
        return None;
    }
    if !params.edge_like_allowed && stack.edge_like(s, x, y) {
        return None;
    }

    let (g, _) = stack.local_quadratic(s, x, y);
    let refined_response = stack.at(s, x, y) as f64 + 0.5 * g.dot(&offset);
    let s_levels = octave.levels.len() - 3;
    let sigma_octave = stack.sigmas[s] * 2f64.powf(offset.z / s_levels as f64);
    let sigma_abs = sigma_octave * octave.downsample;
    let px = (x as f64 + offset.x) * octave.downsample;
    let py = (y as f64 + offset.y) * octave.downsample;

    LocalAffineFrame::new(
        px,
        py,
        nalgebra::Matrix2::new(sigma_abs, 0.0, 0.0, sigma_abs),
        refined_response.abs(),
        0,
        kind.tag(),
    )
    .ok()
}

/// Keeps all features with response at least `theta` when there are at
/// least `r_min` of them; otherwise keeps the strongest `r_min` (or all).
/// Input must be sorted by descending response magnitude.
pub fn adaptive_threshold(
    features: Vec<LocalAffineFrame>,
    theta: f64,
    r_min: usize,
) -> Vec<LocalAffineFrame> {
    let above = features.iter().take_while(|f| f.response >= theta).count();
    let keep = if above >= r_min {
        above
    } else {
        r_min.min(features.len())
    };
    let mut features = features;
    features.truncate(keep);
    features
}
