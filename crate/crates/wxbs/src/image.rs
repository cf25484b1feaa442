//! Grayscale raster images, the matching substrate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {width}x{height} do not match data length {len}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("channel rasters have mismatched sizes")]
    ChannelMismatch,
    #[error("image contains a non-finite intensity at index {0}")]
    NonFinite(usize),
    #[error("image of {width}x{height} is smaller than the minimum of {min} px")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
}

/// Grayscale image with row-major `f32` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, validating length and clamping intensities to `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::DimensionMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(idx));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from already-validated intensities without clamping.
    ///
    /// Used internally where values are known to be finite; out-of-range
    /// values may appear transiently during filtering.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel value with border replication for out-of-bounds indices.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f32 {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.get(xc, yc)
    }

    /// Bilinear sample at a continuous position, border-replicated.
    ///
    /// Integer coordinates address pixel centers.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let x0 = x0 as i64;
        let y0 = y0 as i64;
        let v00 = self.get_clamped(x0, y0);
        let v10 = self.get_clamped(x0 + 1, y0);
        let v01 = self.get_clamped(x0, y0 + 1);
        let v11 = self.get_clamped(x0 + 1, y0 + 1);
        let top = v00 + (v10 - v00) * fx;
        let bot = v01 + (v11 - v01) * fx;
        top + (bot - top) * fy
    }
}

/// Converts a 3-channel raster to grayscale by channel averaging.
pub fn to_grayscale(
    r: &[f32],
    g: &[f32],
    b: &[f32],
    width: usize,
    height: usize,
) -> Result<Image, ImageError> {
    if r.len() != g.len() || g.len() != b.len() || r.len() != width * height {
        return Err(ImageError::ChannelMismatch);
    }
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| (r + g + b) / 3.0)
        .collect();
    Image::new(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_is_channel_mean() {
        let img = to_grayscale(&[0.3], &[0.6], &[0.9], 1, 1).unwrap();
        assert!((img.get(0, 0) - 0.6).abs() < 1e-7);
    }

    #[test]
    fn grayscale_identity_on_equal_channels() {
        let v = [0.42_f32, 0.17];
        let img = to_grayscale(&v, &v, &v, 2, 1).unwrap();
        for (a, b) in img.data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn grayscale_matches_per_pixel_oracle() {
        let r = [0.1, 0.9, 0.33, 0.0];
        let g = [0.5, 0.2, 0.66, 1.0];
        let b = [0.9, 0.4, 0.99, 0.5];
        let img = to_grayscale(&r, &g, &b, 2, 2).unwrap();
        for i in 0..4 {
            let expected = (r[i] + g[i] + b[i]) / 3.0;
            assert!((img.data()[i] - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn grayscale_rejects_mismatched_channels() {
        assert!(to_grayscale(&[0.0, 0.0], &[0.0], &[0.0], 1, 1).is_err());
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn bilinear_interpolates_and_replicates_border() {
        let img = Image::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((img.sample_bilinear(0.5, 0.0) - 0.5).abs() < 1e-6);
        assert!((img.sample_bilinear(-5.0, 0.0) - 0.0).abs() < 1e-6);
        assert!((img.sample_bilinear(7.0, 3.0) - 1.0).abs() < 1e-6);
    }
}
