//! Histogram mutual information.

use crate::error::{Error, Result};
use crate::imagekit::bin_of;
use crate::imagekit::{sample_bilinear, AffineTransform, GrayImage};

pub const DEFAULT_BINS: usize = 32;

/// Hard-binned joint intensity histogram, `counts[i * bins + j]` for fixed
/// bin `i` and moving bin `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<u64>,
    samples: u64,
}

impl JointHistogram {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidConfig(format!("{bins} bins; need at least 2")));
        }
        Ok(Self {
            bins,
            counts: vec![0; bins * bins],
            samples: 0,
        })
    }

    /// Histogram over all pixels, or over the given row-major pixel indices.
    pub fn from_images(
        fixed: &GrayImage,
        moving: &GrayImage,
        bins: usize,
        samples: Option<&[usize]>,
    ) -> Result<Self> {
        check_dims(fixed, moving)?;
        let mut h = Self::new(bins)?;
        let (f, m) = (fixed.pixels(), moving.pixels());
        match samples {
            Some(idx) => {
                for &i in idx {
                    h.add(bin_of(f[i], bins), bin_of(m[i], bins));
                }
            }
            None => {
                for (&a, &b) in f.iter().zip(m) {
                    h.add(bin_of(a, bins), bin_of(b, bins));
                }
            }
        }
        Ok(h)
    }

    #[inline]
    pub fn add(&mut self, fixed_bin: usize, moving_bin: usize) {
        self.counts[fixed_bin * self.bins + moving_bin] += 1;
        self.samples += 1;
    }

    pub fn clear(&mut self) {
        self.counts.fill(0);
        self.samples = 0;
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn count(&self, fixed_bin: usize, moving_bin: usize) -> u64 {
        self.counts[fixed_bin * self.bins + moving_bin]
    }

    pub fn fixed_marginal(&self) -> Vec<u64> {
        self.counts.chunks(self.bins).map(|r| r.iter().sum()).collect()
    }

    pub fn moving_marginal(&self) -> Vec<u64> {
        let mut m = vec![0; self.bins];
        for row in self.counts.chunks(self.bins) {
            for (a, &c) in m.iter_mut().zip(row) {
                *a += c;
            }
        }
        m
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy(&self.counts, self.samples)
    }

    pub fn fixed_entropy(&self) -> f64 {
        entropy(&self.fixed_marginal(), self.samples)
    }

    pub fn moving_entropy(&self) -> f64 {
        entropy(&self.moving_marginal(), self.samples)
    }

    /// `H(fixed) + H(moving) - H(fixed, moving)` in nats, clamped at zero.
    /// Zero for an empty histogram.
    pub fn mutual_information(&self) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        let mi = self.fixed_entropy() + self.moving_entropy() - self.joint_entropy();
        mi.max(0.0)
    }
}

/// Shannon entropy (nats) of a count vector. Nonzero counts are summed in
/// sorted order, so any permutation of the same counts (a transposed joint
/// histogram, or a diagonal one versus its marginal) gives a bitwise-equal
/// result.
pub fn entropy(counts: &[u64], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut nz: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    nz.sort_unstable();
    let n = total as f64;
    nz.iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Marginal entropy of one image's intensities.
pub fn image_entropy(img: &GrayImage, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!("{bins} bins; need at least 2")));
    }
    let mut counts = vec![0u64; bins];
    for &v in img.pixels() {
        counts[bin_of(v, bins)] += 1;
    }
    Ok(entropy(&counts, img.pixels().len() as u64))
}

/// Mutual information between two equally sized images, over all pixels or
/// over the given row-major pixel indices.
pub fn mutual_information(
    fixed: &GrayImage,
    moving: &GrayImage,
    bins: usize,
    samples: Option<&[usize]>,
) -> Result<f64> {
    Ok(JointHistogram::from_images(fixed, moving, bins, samples)?.mutual_information())
}

fn check_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

/// MI between a fixed image and a moving image seen through an affine
/// transform, evaluated without materializing the warped image. Equals
/// `mutual_information(fixed, warp_affine(moving, t, ..), ..)` exactly.
pub struct MiEvaluator<'a> {
    fixed_bins: Vec<u16>,
    width: usize,
    height: usize,
    moving: &'a GrayImage,
    hist: JointHistogram,
}

impl<'a> MiEvaluator<'a> {
    pub fn new(fixed: &GrayImage, moving: &'a GrayImage, bins: usize) -> Result<Self> {
        let hist = JointHistogram::new(bins)?;
        Ok(Self {
            fixed_bins: fixed.pixels().iter().map(|&v| bin_of(v, bins) as u16).collect(),
            width: fixed.width(),
            height: fixed.height(),
            moving,
            hist,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.fixed_bins.len()
    }

    /// MI at `t` over `samples` (row-major indices into the fixed grid), or
    /// over every pixel. Singular transforms error.
    pub fn evaluate(&mut self, t: &AffineTransform, samples: Option<&[usize]>) -> Result<f64> {
        let map = t.inverse_map(
            self.moving.width(),
            self.moving.height(),
            self.width,
            self.height,
        )?;
        let bins = self.hist.bins();
        self.hist.clear();
        let w = self.width;
        let add = |i: usize, hist: &mut JointHistogram| {
            let (sx, sy) = map.source((i % w) as f64, (i / w) as f64);
            let v = sample_bilinear(self.moving, sx, sy).clamp(0.0, 1.0);
            hist.add(self.fixed_bins[i] as usize, bin_of(v, bins));
        };
        match samples {
            Some(idx) => idx.iter().for_each(|&i| add(i, &mut self.hist)),
            None => (0..self.fixed_bins.len()).for_each(|i| add(i, &mut self.hist)),
        }
        Ok(self.hist.mutual_information())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagekit::warp_affine;

    fn img(w: usize, h: usize, px: &[f32]) -> GrayImage {
        GrayImage::new(w, h, px.to_vec()).unwrap()
    }

    #[test]
    fn independent_two_by_two_is_zero() {
        let f = img(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let m = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let h = JointHistogram::from_images(&f, &m, 2, None).unwrap();
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(h.count(i, j), 1);
        }
        assert!(h.mutual_information().abs() < 1e-15);
    }

    #[test]
    fn identical_two_by_two_is_ln2() {
        let a = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let mi = mutual_information(&a, &a, 2, None).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let a = img(2, 2, &[0.0; 4]);
        let b = img(1, 4, &[0.0; 4]);
        assert!(matches!(
            mutual_information(&a, &b, 32, None),
            Err(Error::DimensionMismatch(..))
        ));
        assert!(JointHistogram::new(1).is_err());
    }

    #[test]
    fn constant_image_carries_no_information() {
        let a = img(3, 1, &[0.1, 0.5, 0.9]);
        let c = img(3, 1, &[0.4; 3]);
        assert_eq!(mutual_information(&a, &c, 32, None).unwrap(), 0.0);
        assert_eq!(mutual_information(&c, &a, 32, None).unwrap(), 0.0);
    }

    #[test]
    fn sampled_histogram_counts_only_samples() {
        let a = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let h = JointHistogram::from_images(&a, &a, 2, Some(&[0, 1, 1])).unwrap();
        assert_eq!(h.samples(), 3);
        assert_eq!((h.count(0, 0), h.count(1, 1)), (1, 2));
    }

    #[test]
    fn evaluator_matches_explicit_warp() {
        let px: Vec<f32> = (0..24 * 20).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let f = img(24, 20, &px);
        let m = f.map(|v| (v * 0.7 + 0.1).min(1.0));
        let t = AffineTransform::from_similarity(7.0, 1.05, 0.03, -0.02);
        let warped = warp_affine(&m, &t, 24, 20).unwrap();
        let mut ev = MiEvaluator::new(&f, &m, 32).unwrap();
        assert_eq!(
            ev.evaluate(&t, None).unwrap(),
            mutual_information(&f, &warped, 32, None).unwrap()
        );
        let idx = [3, 40, 41, 100, 477];
        assert_eq!(
            ev.evaluate(&t, Some(&idx)).unwrap(),
            mutual_information(&f, &warped, 32, Some(&idx)).unwrap()
        );
    }
}
