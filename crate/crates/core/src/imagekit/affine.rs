use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{Error, Result};

/// Below this |det(A)| a transform is treated as singular.
pub const MIN_ABS_DET: f64 = 1e-8;

/// 2x3 affine transform acting about the image center.
///
/// A point `p` of the source maps to `A (p - c_in) + c_out + (tx * W, ty * H)`
/// where `c` is the center of the respective image and `W`, `H` are the output
/// dimensions, so translations are fractions of the axis size (0.5 shifts by
/// half the width).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        a11: 1.0,
        a12: 0.0,
        a21: 0.0,
        a22: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64, tx: f64, ty: f64) -> Result<Self> {
        Self::from_array([a11, a12, a21, a22, tx, ty])
    }

    /// Parameters in `(a11, a12, a21, a22, tx, ty)` order.
    pub fn from_array(p: [f64; 6]) -> Result<Self> {
        if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite affine parameter {bad}"
            )));
        }
        Ok(Self {
            a11: p[0],
            a12: p[1],
            a21: p[2],
            a22: p[3],
            tx: p[4],
            ty: p[5],
        })
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a11, self.a12, self.a21, self.a22, self.tx, self.ty]
    }

    /// Rotation (degrees, counter-clockwise in image coordinates with y down)
    /// combined with isotropic scaling and a fractional translation.
    pub fn from_similarity(rotation_deg: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        Self {
            a11: scale * c,
            a12: -scale * s,
            a21: scale * s,
            a22: scale * c,
            tx,
            ty,
        }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Largest absolute parameter difference.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Forward-maps a source pixel coordinate for images of size `w` x `h`.
    pub fn apply(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = center(w, h);
        let (u, v) = (x - cx, y - cy);
        (
            self.a11 * u + self.a12 * v + cx + self.tx * w as f64,
            self.a21 * u + self.a22 * v + cy + self.ty * h as f64,
        )
    }

    /// The transform equivalent to applying `self` and then `next`, for
    /// images of size `w` x `h`.
    pub fn then(&self, next: &AffineTransform, w: usize, h: usize) -> AffineTransform {
        let (wf, hf) = (w as f64, h as f64);
        let (t1x, t1y) = (self.tx * wf, self.ty * hf);
        AffineTransform {
            a11: next.a11 * self.a11 + next.a12 * self.a21,
            a12: next.a11 * self.a12 + next.a12 * self.a22,
            a21: next.a21 * self.a11 + next.a22 * self.a21,
            a22: next.a21 * self.a12 + next.a22 * self.a22,
            tx: (next.a11 * t1x + next.a12 * t1y) / wf + next.tx,
            ty: (next.a21 * t1x + next.a22 * t1y) / hf + next.ty,
        }
    }

    /// Mean distance in pixels between where `self` and `other` send the four
    /// image corners.
    pub fn corner_error(&self, other: &AffineTransform, w: usize, h: usize) -> f64 {
        let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
        [(0.0, 0.0), (xm, 0.0), (0.0, ym), (xm, ym)]
            .iter()
            .map(|&(x, y)| {
                let (ax, ay) = self.apply(x, y, w, h);
                let (bx, by) = other.apply(x, y, w, h);
                (ax - bx).hypot(ay - by)
            })
            .sum::<f64>()
            / 4.0
    }

    /// Output-to-source pixel map used by inverse-mapping warps.
    pub fn inverse_map(
        &self,
        in_w: usize,
        in_h: usize,
        out_w: usize,
        out_h: usize,
    ) -> Result<PixelMap> {
        let det = self.det();
        if !det.is_finite() || det.abs() < MIN_ABS_DET {
            return Err(Error::SingularTransform(det));
        }
        let m = [
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        ];
        let (cix, ciy) = center(in_w, in_h);
        let (cox, coy) = center(out_w, out_h);
        let ux = cox + self.tx * out_w as f64;
        let uy = coy + self.ty * out_h as f64;
        Ok(PixelMap {
            m,
            offset: [
                cix - (m[0] * ux + m[1] * uy),
                ciy - (m[2] * ux + m[3] * uy),
            ],
        })
    }
}

fn center(w: usize, h: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Affine map from output pixel coordinates to source coordinates.
#[derive(Clone, Copy, Debug)]
pub struct PixelMap {
    m: [f64; 4],
    offset: [f64; 2],
}

impl PixelMap {
    #[inline]
    pub fn source(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0] * x + self.m[1] * y + self.offset[0],
            self.m[2] * x + self.m[3] * y + self.offset[1],
        )
    }
}

/// Bilinear sample at a fractional position; neighbors outside the raster
/// contribute zero.
#[inline]
pub fn sample_bilinear(img: &GrayImage, sx: f64, sy: f64) -> f32 {
    let w = img.width() as isize;
    let h = img.height() as isize;
    let x0f = sx.floor();
    let y0f = sy.floor();
    if x0f < -1.0 || y0f < -1.0 || x0f >= w as f64 || y0f >= h as f64 {
        return 0.0;
    }
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let fx = (sx - x0f) as f32;
    let fy = (sy - y0f) as f32;
    let px = img.pixels();
    let at = |x: isize, y: isize| -> f32 {
        if x >= 0 && y >= 0 && x < w && y < h {
            px[(y * w + x) as usize]
        } else {
            0.0
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return at(x0, y0);
    }
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Inverse-mapping warp: output pixel `q` takes the bilinear sample of `img`
/// at `T^-1 q`, zero outside the source.
pub fn warp_affine(
    img: &GrayImage,
    t: &AffineTransform,
    out_w: usize,
    out_h: usize,
) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidConfig(format!(
            "output size {out_w}x{out_h}"
        )));
    }
    let map = t.inverse_map(img.width(), img.height(), out_w, out_h)?;
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = map.source(x as f64, y as f64);
            pixels.push(sample_bilinear(img, sx, sy).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(out_w, out_h, pixels)
}

/// Bilinear resize with pixel-center alignment and clamped borders.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidConfig(format!(
            "output size {out_w}x{out_h}"
        )));
    }
    if out_w == img.width() && out_h == img.height() {
        return Ok(img.clone());
    }
    let (iw, ih) = (img.width(), img.height());
    let sx_scale = iw as f64 / out_w as f64;
    let sy_scale = ih as f64 / out_h as f64;
    let px = img.pixels();
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (ih - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(ih - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (iw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(iw - 1);
            let fx = (sx - x0 as f64) as f32;
            let top = px[y0 * iw + x0] * (1.0 - fx) + px[y0 * iw + x1] * fx;
            let bottom = px[y1 * iw + x0] * (1.0 - fx) + px[y1 * iw + x1] * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(out_w, out_h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        let px = (0..w * h)
            .map(|i| (i % w) as f32 / w as f32 * 0.5 + (i / w) as f32 / h as f32 * 0.5)
            .collect();
        GrayImage::new(w, h, px).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = ramp(13, 7);
        let out = warp_affine(&img, &AffineTransform::IDENTITY, 13, 7).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn translation_is_a_fraction_of_width() {
        // single bright column at x = 10 moves to x = 60 under tx = 0.5
        let mut px = vec![0.0f32; 100 * 4];
        for y in 0..4 {
            px[y * 100 + 10] = 1.0;
        }
        let img = GrayImage::new(100, 4, px).unwrap();
        let t = AffineTransform::new(1.0, 0.0, 0.0, 1.0, 0.5, 0.0).unwrap();
        let out = warp_affine(&img, &t, 100, 4).unwrap();
        for y in 0..4 {
            for x in 0..100 {
                assert_eq!(out.get(x, y), if x == 60 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quarter_turn_matches_per_pixel_oracle() {
        let img = GrayImage::new(
            3,
            3,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        )
        .unwrap();
        let t = AffineTransform::new(0.0, 1.0, -1.0, 0.0, 0.0, 0.0).unwrap();
        let out = warp_affine(&img, &t, 3, 3).unwrap();
        // source (x, y) centered at 1 goes to (y', -x') recentered
        let mut expected = [0.0f32; 9];
        for y in 0..3i32 {
            for x in 0..3i32 {
                let (u, v) = (x - 1, y - 1);
                let (nx, ny) = (v + 1, -u + 1);
                expected[(ny * 3 + nx) as usize] = img.get(x as usize, y as usize);
            }
        }
        assert_eq!(out.pixels(), &expected);
    }

    #[test]
    fn singular_transform_is_rejected() {
        let img = ramp(4, 4);
        let t = AffineTransform::new(1.0, 2.0, 0.5, 1.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            warp_affine(&img, &t, 4, 4),
            Err(Error::SingularTransform(_))
        ));
    }

    #[test]
    fn composition_matches_sequential_warps() {
        let w = 64;
        let px = (0..w * w)
            .map(|i| {
                let (x, y) = ((i % w) as f32 - 32.0, (i / w) as f32 - 32.0);
                (-(x * x + y * y) / 300.0).exp()
            })
            .collect();
        let img = GrayImage::new(w, w, px).unwrap();
        let t1 = AffineTransform::from_similarity(8.0, 1.05, 0.03, -0.02);
        let t2 = AffineTransform::from_similarity(-5.0, 0.95, -0.04, 0.05);
        let seq = warp_affine(&warp_affine(&img, &t1, w, w).unwrap(), &t2, w, w).unwrap();
        let direct = warp_affine(&img, &t1.then(&t2, w, w), w, w).unwrap();
        assert!(seq.mean_abs_diff(&direct).unwrap() <= 0.02);
    }

    #[test]
    fn resize_identity_constant_and_monotone() {
        let img = ramp(64, 64);
        assert_eq!(resize_bilinear(&img, 64, 64).unwrap(), img);
        let c = GrayImage::filled(9, 5, 0.3).unwrap();
        let r = resize_bilinear(&c, 17, 3).unwrap();
        assert!(r.pixels().iter().all(|&p| (p - 0.3).abs() < 1e-6));
        let two = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        let up = resize_bilinear(&two, 4, 1).unwrap();
        assert_eq!(up.pixels(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(up.pixels().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn corner_error_of_pure_shift() {
        let a = AffineTransform::IDENTITY;
        let b = AffineTransform::new(1.0, 0.0, 0.0, 1.0, 0.1, 0.0).unwrap();
        assert!((a.corner_error(&b, 128, 128) - 12.8).abs() < 1e-9);
    }
}
