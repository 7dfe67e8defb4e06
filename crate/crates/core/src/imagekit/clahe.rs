use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheConfig {
    /// Tiles along x and y.
    pub tile_grid: (usize, usize),
    /// Clip height as a multiple of the uniform bin height.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            tile_grid: (8, 8),
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_grid.0 == 0 || self.tile_grid.1 == 0 {
            return Err(Error::InvalidConfig("CLAHE tile grid must be >= 1".into()));
        }
        if !(self.clip_limit >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "CLAHE clip limit {} < 1",
                self.clip_limit
            )));
        }
        if self.bins < 2 {
            return Err(Error::InvalidConfig("CLAHE needs at least 2 bins".into()));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn bin_of(v: f32, bins: usize) -> usize {
    ((v * bins as f32) as usize).min(bins - 1)
}

/// Maps one tile's histogram to an intensity lookup table.
///
/// Counts above the clip height are removed and spread evenly over all bins,
/// then each bin maps to the inclusive normalized CDF. A tile with a single
/// occupied bin keeps intensities at their bin level so flat regions neither
/// brighten nor darken.
fn tile_lut(hist: &[f64], total: f64, clip_limit: f64) -> Vec<f32> {
    let bins = hist.len();
    let occupied = hist.iter().filter(|&&c| c > 0.0).count();
    if occupied <= 1 {
        return (0..bins).map(|b| b as f32 / (bins - 1) as f32).collect();
    }
    let limit = (clip_limit * total / bins as f64).max(1.0);
    let excess: f64 = hist.iter().map(|&c| (c - limit).max(0.0)).sum();
    let share = excess / bins as f64;
    let mut cdf = 0.0;
    hist.iter()
        .map(|&c| {
            cdf += c.min(limit) + share;
            (cdf / total).clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization with bilinear blending
/// between the lookup tables of the four nearest tile centers.
pub fn clahe(img: &GrayImage, cfg: &ClaheConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    let (gx, gy) = cfg.tile_grid;
    if gx > w || gy > h {
        return Err(Error::TileLargerThanImage {
            grid_x: gx,
            grid_y: gy,
            width: w,
            height: h,
        });
    }
    let bins = cfg.bins;
    let px = img.pixels();
    let bin_idx: Vec<usize> = px.iter().map(|&p| bin_of(p, bins)).collect();

    let x_edges: Vec<usize> = (0..=gx).map(|i| i * w / gx).collect();
    let y_edges: Vec<usize> = (0..=gy).map(|j| j * h / gy).collect();

    let mut luts = Vec::with_capacity(gx * gy);
    for ty in 0..gy {
        for tx in 0..gx {
            let mut hist = vec![0.0f64; bins];
            for y in y_edges[ty]..y_edges[ty + 1] {
                for x in x_edges[tx]..x_edges[tx + 1] {
                    hist[bin_idx[y * w + x]] += 1.0;
                }
            }
            let total = ((x_edges[tx + 1] - x_edges[tx]) * (y_edges[ty + 1] - y_edges[ty])) as f64;
            luts.push(tile_lut(&hist, total, cfg.clip_limit));
        }
    }

    // tile-center interpolation coordinates along one axis
    let axis = |pos: usize, len: usize, tiles: usize| -> (usize, usize, f32) {
        let f = (pos as f64 + 0.5) * tiles as f64 / len as f64 - 0.5;
        let f = f.clamp(0.0, (tiles - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(tiles - 1);
        (i0, i1, (f - i0 as f64) as f32)
    };

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ty0, ty1, wy) = axis(y, h, gy);
        for x in 0..w {
            let (tx0, tx1, wx) = axis(x, w, gx);
            let b = bin_idx[y * w + x];
            let l = |tx: usize, ty: usize| luts[ty * gx + tx][b];
            let top = l(tx0, ty0) * (1.0 - wx) + l(tx1, ty0) * wx;
            let bottom = l(tx0, ty1) * (1.0 - wx) + l(tx1, ty1) * wx;
            out.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(w, h, out)
}
