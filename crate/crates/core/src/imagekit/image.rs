use crate::error::{Error, Result};

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    /// Builds an image, validating dimensions and the intensity range.
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidImage(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image, clamping every intensity into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Applies `f` to every pixel; results are clamped into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| {
                let v = f(p);
                if v.is_nan() {
                    0.0
                } else {
                    v.clamp(0.0, 1.0)
                }
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn mean_abs_diff(&self, other: &GrayImage) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.pixels.len() as f64)
    }

    /// Pixel-wise `(1 - w) * self + w * other`.
    pub fn blend(&self, other: &GrayImage, w: f32) -> Result<GrayImage> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| ((1.0 - w) * a + w * b).clamp(0.0, 1.0))
            .collect();
        Ok(GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        })
    }

    /// 5x5 binomial blur with replicated borders.
    pub fn binomial_blur(&self) -> GrayImage {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            let row = &self.pixels[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in K.iter().enumerate() {
                    let sx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                    acc += kv * row[sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in K.iter().enumerate() {
                    let sy = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                out[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
        GrayImage {
            width: w,
            height: h,
            pixels: out,
        }
    }

    /// Halves each dimension (rounding up, minimum 1) by averaging 2x2 blocks.
    pub fn downsample2(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let ow = w.div_ceil(2).max(1);
        let oh = h.div_ceil(2).max(1);
        let mut out = Vec::with_capacity(ow * oh);
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let sx = 2 * x + dx;
                        let sy = 2 * y + dy;
                        if sx < w && sy < h {
                            acc += self.pixels[sy * w + sx];
                            n += 1.0;
                        }
                    }
                }
                out.push(acc / n);
            }
        }
        GrayImage {
            width: ow,
            height: oh,
            pixels: out,
        }
    }

    /// Sets every pixel within `fraction` of any border to zero.
    pub fn zero_border(&self, fraction: f64) -> GrayImage {
        let bx = (fraction * self.width as f64).round() as usize;
        let by = (fraction * self.height as f64).round() as usize;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if x < bx || y < by || x + bx >= self.width || y + by >= self.height {
                    out.pixels[y * self.width + x] = 0.0;
                }
            }
        }
        out
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions_and_range() {
        assert!(GrayImage::new(0, 3, vec![]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::new(1, 1, vec![f32::NAN]).is_err());
        assert!(GrayImage::new(1, 1, vec![1.0]).is_ok());
    }

    #[test]
    fn blur_keeps_constants() {
        let img = GrayImage::filled(7, 5, 0.25).unwrap();
        let b = img.binomial_blur();
        assert!(b.pixels().iter().all(|&p| (p - 0.25).abs() < 1e-6));
    }

    #[test]
    fn zero_border_clears_frame() {
        let img = GrayImage::filled(10, 10, 1.0).unwrap().zero_border(0.2);
        for y in 0..10 {
            for x in 0..10 {
                let inside = (2..8).contains(&x) && (2..8).contains(&y);
                assert_eq!(img.get(x, y), if inside { 1.0 } else { 0.0 });
            }
        }
    }
}
