//! Wide multiple baseline stereo matching.
//!
//! The crate implements a complete two-view matching stack built around
//! iterative on-demand affine view synthesis:
//!
//! 1. **`image` / `affine` / `patch`**: grayscale rasters, local affine
//!    frames and their scale/tilt/longitude decomposition, patch sampling
//!    and photometric normalization.
//! 2. **`pyramid`**: Gaussian scale space, Hessian and DoG keypoint
//!    detection with adaptive response thresholding.
//! 3. **`shape`**: Baumberg affine adaptation and dominant gradient
//!    orientation estimation.
//! 4. **`descriptor`**: SIFT, RootSIFT, half-SIFT and normalized-pixel
//!    patch descriptors.
//! 5. **`matcher`**: nearest-neighbor search, SNN ratio and FGINN
//!    tentative correspondence generation, duplicate filtering.
//! 6. **`synth`**: anti-aliased scale/rotation/tilt view synthesis and
//!    step-configuration generation.
//! 7. **`estimator`**: homography and fundamental minimal solvers,
//!    LO-RANSAC with degeneracy handling and the local-affine-frame check.
//! 8. **`mods`**: the iterative matcher that escalates through view
//!    synthesis configurations until enough verified matches are found.
//! 9. **`losslab`**: reference kernels for hard-negative descriptor
//!    losses (triplet margin, hard-negative-constant, contrastive,
//!    softmin) with analytic gradients and a 2-D toy Adam optimizer.
//! 10. **`evalkit`**: recall curves, pose error and mean average
//!     accuracy, co-visibility, repeatability and turntable ground truth.

pub mod affine;
pub mod descriptor;
pub mod estimator;
pub mod evalkit;
pub mod image;
pub mod losslab;
pub mod matcher;
pub mod mods;
pub mod patch;
pub mod pyramid;
pub mod shape;
pub mod synth;

pub use affine::{
    compose_affine, decompose_affine, residual_shape, shape_from_residual, AffineDecomposition,
    AffineError, DetectorTag, LocalAffineFrame,
};
pub use image::{to_grayscale, Image, ImageError};
pub use patch::{extract_patch, photometric_normalize, NormalizeMode, Patch, PatchError};
