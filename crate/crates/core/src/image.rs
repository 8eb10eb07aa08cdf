//! 8-bit grayscale images and the two preprocessing steps applied before encoding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("image"));
        }
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch {
                what: "image pixels",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Intensities scaled to `[0, 1]` as a `[1, height, width]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("non-empty image")
    }
}

/// Resamples one axis. Shrinking averages the covered input span (box filter);
/// growing interpolates linearly between pixel centres, clamped at the borders.
fn resample_axis(src: &[f64], out_len: usize) -> Vec<f64> {
    let n = src.len();
    if out_len == n {
        return src.to_vec();
    }
    let scale = n as f64 / out_len as f64;
    if out_len < n {
        (0..out_len)
            .map(|i| {
                let lo = i as f64 * scale;
                let hi = lo + scale;
                let mut acc = 0.0;
                let mut j = math::floor(lo) as usize;
                while (j as f64) < hi && j < n {
                    let overlap = (hi.min(j as f64 + 1.0)) - lo.max(j as f64);
                    if overlap > 0.0 {
                        acc += overlap * src[j];
                    }
                    j += 1;
                }
                acc / scale
            })
            .collect()
    } else {
        (0..out_len)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let j = math::floor(pos) as usize;
                let t = pos - j as f64;
                if j + 1 < n {
                    src[j] * (1.0 - t) + src[j + 1] * t
                } else {
                    src[j]
                }
            })
            .collect()
    }
}

/// Separable resize of a real-valued `width x height` grid, rows first.
pub fn resize_values(values: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(out_w * height);
    for y in 0..height {
        rows.extend(resample_axis(&values[y * width..(y + 1) * width], out_w));
    }
    let mut out = vec![0.0; out_w * out_h];
    let mut col = vec![0.0; height];
    for x in 0..out_w {
        for y in 0..height {
            col[y] = rows[y * out_w + x];
        }
        for (y, v) in resample_axis(&col, out_h).into_iter().enumerate() {
            out[y * out_w + x] = v;
        }
    }
    out
}

/// Resizes with area averaging when shrinking and bilinear interpolation when
/// growing. Values are rounded half away from zero once, at the end.
pub fn resize(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(invalid("resize: target extents must be positive"));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let out = resize_values(&src, img.width, img.height, out_w, out_h);
    GrayImage::new(out_w, out_h, out.into_iter().map(math::to_u8).collect())
}

/// Classical CDF histogram equalization.
///
/// `out(v) = round(255 * (cdf(v) - cdf_min) / (N - cdf_min))`. A constant
/// image has `N == cdf_min` and is returned unchanged.
pub fn hist_equalize(img: &GrayImage) -> GrayImage {
    let mut hist = [0usize; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let n = img.pixels.len();
    let mut cdf = [0usize; 256];
    let mut run = 0;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        run += h;
        *c = run;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return img.clone();
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for (v, l) in lut.iter_mut().enumerate() {
        if hist[v] > 0 {
            *l = math::to_u8(255.0 * (cdf[v] - cdf_min) as f64 / denom);
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect(),
    }
}

/// Resize to a square `size x size`, then equalize.
pub fn preprocess(img: &GrayImage, size: usize) -> Result<GrayImage> {
    Ok(hist_equalize(&resize(img, size, size)?))
}
