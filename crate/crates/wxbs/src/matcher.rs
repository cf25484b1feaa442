//! Tentative correspondence generation.
//!
//! Matching is SNN- or FGINN-based: the standard test compares the nearest
//! descriptor against the second nearest, while FGINN compares against the
//! nearest *geometrically inconsistent* neighbor: the closest descriptor
//! whose keypoint center lies at least `fginn_radius` pixels from the
//! first nearest neighbor. Re-detections of the same feature in multiple
//! synthesized views then no longer annihilate each other's ratio test.

use crate::affine::{DetectorTag, LocalAffineFrame};
use crate::descriptor::Descriptor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("base set is empty")]
    EmptyBase,
    #[error("k = {k} exceeds base size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("SNN matching needs at least 2 base features, got {0}")]
    BaseTooSmall(usize),
    #[error("feature set has {lafs} frames but {descriptors} descriptors")]
    SetMismatch { lafs: usize, descriptors: usize },
}

/// A tentative match between feature `idx_a` in image 1 and `idx_b` in
/// image 2. `ratio` is the filtering ratio that admitted it; 0 means the
/// match had no competitor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub idx_a: usize,
    pub idx_b: usize,
    pub distance: f64,
    pub ratio: f64,
    /// Near-identical correspondences absorbed by this one during
    /// duplicate filtering.
    pub duplicates_removed: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    Unidirectional,
    /// Intersection of forward and backward matches (mutual NN).
    Both,
    /// Union, merging duplicate pairs keeping the smaller ratio.
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherParams {
    pub ratio_threshold: f64,
    pub fginn_radius: f64,
    pub strategy: MatchStrategy,
}

impl Default for MatcherParams {
    fn default() -> Self {
        Self {
            ratio_threshold: 0.8,
            fginn_radius: 10.0,
            strategy: MatchStrategy::Unidirectional,
        }
    }
}

/// Frames plus their descriptors; `detector` tags partition the set into
/// separately matched pools.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub lafs: Vec<LocalAffineFrame>,
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.lafs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lafs.is_empty()
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        if self.lafs.len() != self.descriptors.len() {
            return Err(MatchError::SetMismatch {
                lafs: self.lafs.len(),
                descriptors: self.descriptors.len(),
            });
        }
        Ok(())
    }
}

/// Exact k-nearest neighbors by Euclidean descriptor distance, ties broken
/// by lower index.
pub fn nn_search(
    query: &[Descriptor],
    base: &[Descriptor],
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>, MatchError> {
    if base.is_empty() {
        return Err(MatchError::EmptyBase);
    }
    if k > base.len() {
        return Err(MatchError::KTooLarge { k, n: base.len() });
    }
    Ok(query
        .par_iter()
        .map(|q| {
            let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
            for (j, b) in base.iter().enumerate() {
                let d = q.distance(b);
                // Strict comparison keeps the lower index on ties.
                let pos = best.partition_point(|&(_, bd)| bd <= d);
                if pos < k {
                    best.insert(pos, (j, d));
                    best.truncate(k);
                }
            }
            best
        })
        .collect())
}

/// Second-nearest-neighbor ratio matching: a match is kept iff
/// `d1 / d2 <= r`.
pub fn snn_match(
    a: &FeatureSet,
    b: &FeatureSet,
    ratio_threshold: f64,
) -> Result<Vec<Correspondence>, MatchError> {
    a.validate()?;
    b.validate()?;
    if b.len() < 2 {
        return Err(MatchError::BaseTooSmall(b.len()));
    }
    let matches: Vec<Option<Correspondence>> = a
        .descriptors
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut d1 = f64::INFINITY;
            let mut d2 = f64::INFINITY;
            let mut j1 = 0usize;
            for (j, cand) in b.descriptors.iter().enumerate() {
                let d = q.distance(cand);
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                    j1 = j;
                } else if d < d2 {
                    d2 = d;
                }
            }
            let ratio = competitor_ratio(d1, d2);
            (ratio <= ratio_threshold).then_some(Correspondence {
                idx_a: i,
                idx_b: j1,
                distance: d1,
                ratio,
                duplicates_removed: 0,
            })
        })
        .collect();
    Ok(matches.into_iter().flatten().collect())
}

fn competitor_ratio(d1: f64, d2: f64) -> f64 {
    if d2 > 0.0 {
        d1 / d2
    } else if d1 == 0.0 {
        // Identical duplicates: fully ambiguous.
        1.0
    } else {
        f64::INFINITY
    }
}

/// First-to-first-geometrically-inconsistent matching. The ratio
/// denominator is the distance to the nearest neighbor whose center lies
/// at least `radius` pixels from the first nearest neighbor's center; a
/// match without such a competitor is kept with ratio 0.
pub fn fginn_match(
    a: &FeatureSet,
    b: &FeatureSet,
    ratio_threshold: f64,
    radius: f64,
) -> Result<Vec<Correspondence>, MatchError> {
    a.validate()?;
    b.validate()?;
    if b.len() < 2 {
        return Err(MatchError::BaseTooSmall(b.len()));
    }
    let matches: Vec<Option<Correspondence>> = a
        .descriptors
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let dists: Vec<f64> = b.descriptors.iter().map(|cand| q.distance(cand)).collect();
            let mut j1 = 0usize;
            let mut d1 = f64::INFINITY;
            for (j, &d) in dists.iter().enumerate() {
                if d < d1 {
                    d1 = d;
                    j1 = j;
                }
            }
            let (cx, cy) = (b.lafs[j1].x, b.lafs[j1].y);
            let mut d_inconsistent = f64::INFINITY;
            let mut found = false;
            for (j, &d) in dists.iter().enumerate() {
                if j == j1 {
                    continue;
                }
                let dist_px = (b.lafs[j].x - cx).hypot(b.lafs[j].y - cy);
                if dist_px >= radius && d < d_inconsistent {
                    d_inconsistent = d;
                    found = true;
                }
            }
            let ratio = if found {
                competitor_ratio(d1, d_inconsistent)
            } else {
                0.0
            };
            (ratio <= ratio_threshold).then_some(Correspondence {
                idx_a: i,
                idx_b: j1,
                distance: d1,
                ratio,
                duplicates_removed: 0,
            })
        })
        .collect();
    Ok(matches.into_iter().flatten().collect())
}

/// Combines forward (`m_ab`) and backward (`m_ba`) match lists. Backward
/// correspondences index image 2 first; they are flipped before merging.
pub fn combine(
    m_ab: &[Correspondence],
    m_ba: &[Correspondence],
    strategy: MatchStrategy,
) -> Vec<Correspondence> {
    match strategy {
        MatchStrategy::Unidirectional => m_ab.to_vec(),
        MatchStrategy::Both => {
            let backward: std::collections::HashSet<(usize, usize)> =
                m_ba.iter().map(|c| (c.idx_b, c.idx_a)).collect();
            m_ab.iter()
                .filter(|c| backward.contains(&(c.idx_a, c.idx_b)))
                .cloned()
                .collect()
        }
        MatchStrategy::Either => {
            let mut out: Vec<Correspondence> = m_ab.to_vec();
            let mut seen: std::collections::HashMap<(usize, usize), usize> = out
                .iter()
                .enumerate()
                .map(|(pos, c)| ((c.idx_a, c.idx_b), pos))
                .collect();
            for c in m_ba {
                let flipped = Correspondence {
                    idx_a: c.idx_b,
                    idx_b: c.idx_a,
                    ..*c
                };
                match seen.get(&(flipped.idx_a, flipped.idx_b)) {
                    Some(&pos) => {
                        if flipped.ratio < out[pos].ratio {
                            out[pos].ratio = flipped.ratio;
                            out[pos].distance = flipped.distance;
                        }
                    }
                    None => {
                        seen.insert((flipped.idx_a, flipped.idx_b), out.len());
                        out.push(flipped);
                    }
                }
            }
            out
        }
    }
}

/// Removes duplicate correspondences whose endpoints lie within `radius`
/// pixels in both images. Clusters are grown greedily in ascending-ratio
/// order; only the lowest-ratio member of each cluster survives, with the
/// number of absorbed duplicates recorded on it.
pub fn duplicate_filter(
    corrs: Vec<Correspondence>,
    lafs_a: &[LocalAffineFrame],
    lafs_b: &[LocalAffineFrame],
    radius: f64,
) -> Vec<Correspondence> {
    let mut order: Vec<usize> = (0..corrs.len()).collect();
    order.sort_by(|&p, &q| {
        let a = &corrs[p];
        let b = &corrs[q];
        a.ratio
            .total_cmp(&b.ratio)
            .then(a.distance.total_cmp(&b.distance))
            .then(a.idx_a.cmp(&b.idx_a))
            .then(a.idx_b.cmp(&b.idx_b))
    });

    let mut consumed = vec![false; corrs.len()];
    let mut survivors = Vec::new();
    for &p in &order {
        if consumed[p] {
            continue;
        }
        consumed[p] = true;
        let mut keeper = corrs[p];
        let (ax, ay) = (lafs_a[keeper.idx_a].x, lafs_a[keeper.idx_a].y);
        let (bx, by) = (lafs_b[keeper.idx_b].x, lafs_b[keeper.idx_b].y);
        for &q in &order {
            if consumed[q] {
                continue;
            }
            let c = &corrs[q];
            let da = (lafs_a[c.idx_a].x - ax).hypot(lafs_a[c.idx_a].y - ay);
            let db = (lafs_b[c.idx_b].x - bx).hypot(lafs_b[c.idx_b].y - by);
            if da <= radius && db <= radius {
                consumed[q] = true;
                keeper.duplicates_removed += 1 + c.duplicates_removed;
            }
        }
        survivors.push(keeper);
    }
    survivors
}

/// FGINN matching per detector pool: descriptors from different detectors
/// live in separate search structures; the per-pool results are
/// concatenated with indices into the full sets.
pub fn fginn_match_pooled(
    a: &FeatureSet,
    b: &FeatureSet,
    ratio_threshold: f64,
    radius: f64,
) -> Result<Vec<Correspondence>, MatchError> {
    a.validate()?;
    b.validate()?;
    let mut out = Vec::new();
    for tag in [DetectorTag::Hessian, DetectorTag::Dog, DetectorTag::External] {
        let ia: Vec<usize> = (0..a.len()).filter(|&i| a.lafs[i].detector == tag).collect();
        let ib: Vec<usize> = (0..b.len()).filter(|&i| b.lafs[i].detector == tag).collect();
        if ia.is_empty() || ib.len() < 2 {
            continue;
        }
        let sub_a = FeatureSet {
            lafs: ia.iter().map(|&i| a.lafs[i].clone()).collect(),
            descriptors: ia.iter().map(|&i| a.descriptors[i].clone()).collect(),
        };
        let sub_b = FeatureSet {
            lafs: ib.iter().map(|&i| b.lafs[i].clone()).collect(),
            descriptors: ib.iter().map(|&i| b.descriptors[i].clone()).collect(),
        };
        let matches = fginn_match(&sub_a, &sub_b, ratio_threshold, radius)?;
        out.extend(matches.into_iter().map(|c| Correspondence {
            idx_a: ia[c.idx_a],
            idx_b: ib[c.idx_b],
            ..c
        }));
    }
    Ok(out)
}

/// Full tentative-correspondence generation: pooled FGINN in the requested
/// direction(s) combined by the configured strategy.
pub fn match_features(
    a: &FeatureSet,
    b: &FeatureSet,
    params: &MatcherParams,
) -> Result<Vec<Correspondence>, MatchError> {
    let forward = fginn_match_pooled(a, b, params.ratio_threshold, params.fginn_radius)?;
    if params.strategy == MatchStrategy::Unidirectional {
        return Ok(forward);
    }
    let backward = fginn_match_pooled(b, a, params.ratio_threshold, params.fginn_radius)?;
    Ok(combine(&forward, &backward, params.strategy))
}
