//! Coarse-to-fine MI maximization over the six affine parameters.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::mi::{MiEvaluator, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::identify::RankingResult;
use crate::imagekit::{AffineTransform, GrayImage, MIN_ABS_DET};
use crate::rng::{derive_seed, rng_for, Rng};

/// Finite-difference half-width for every parameter (linear terms and
/// translation fractions alike).
pub const FD_DELTA: f64 = 0.01;
/// Coarsest pyramid images are kept at least this many pixels wide.
pub const MIN_LEVEL_SIZE: usize = 8;
pub const MAX_RESOLUTIONS: usize = 7;
pub const MAX_ITERATIONS: usize = 3000;
pub const ITERATION_STEP: usize = 200;

/// Ascent step length at iteration `k` of a level.
pub fn step_size(k: usize) -> f64 {
    0.1 / (1.0 + k as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidKind {
    /// Blur, then halve, at each coarser level.
    Recursive,
    /// Halve without blurring.
    Shrinking,
    /// Blur at full resolution, never halve.
    Smoothing,
}

impl PyramidKind {
    pub const ALL: [PyramidKind; 3] = [
        PyramidKind::Recursive,
        PyramidKind::Shrinking,
        PyramidKind::Smoothing,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PyramidKind::Recursive => "recursive",
            PyramidKind::Shrinking => "shrinking",
            PyramidKind::Smoothing => "smoothing",
        }
    }
}

impl fmt::Display for PyramidKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PyramidKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown pyramid kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub num_resolutions: usize,
    /// Iterations per level.
    pub max_iterations: usize,
    pub samples_per_iteration: usize,
    /// Draw each iteration's samples from a random half-size window.
    pub random_sample_region: bool,
    pub kind: PyramidKind,
    pub bins: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            num_resolutions: 3,
            max_iterations: 1000,
            samples_per_iteration: 10_000,
            random_sample_region: false,
            kind: PyramidKind::Recursive,
            bins: DEFAULT_BINS,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_RESOLUTIONS).contains(&self.num_resolutions) {
            return Err(Error::InvalidConfig(format!(
                "num_resolutions {} outside 1..={MAX_RESOLUTIONS}",
                self.num_resolutions
            )));
        }
        if !(1..=MAX_ITERATIONS).contains(&self.max_iterations) {
            return Err(Error::InvalidConfig(format!(
                "max_iterations {} outside 1..={MAX_ITERATIONS}",
                self.max_iterations
            )));
        }
        if self.samples_per_iteration == 0 {
            return Err(Error::InvalidConfig("samples_per_iteration is 0".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidConfig(format!("{} bins", self.bins)));
        }
        Ok(())
    }
}

/// Images for each level, coarsest first.
pub fn build_pyramid(img: &GrayImage, levels: usize, kind: PyramidKind) -> Vec<GrayImage> {
    let max_halvings = {
        let mut n = 0;
        let mut s = img.width().min(img.height());
        while s.div_ceil(2) >= MIN_LEVEL_SIZE {
            s = s.div_ceil(2);
            n += 1;
        }
        n
    };
    (0..levels)
        .map(|l| {
            let shrink = levels - 1 - l;
            let mut out = img.clone();
            for k in 0..shrink {
                let halve = kind != PyramidKind::Smoothing && k < max_halvings;
                if kind != PyramidKind::Shrinking {
                    out = out.binomial_blur();
                }
                if halve {
                    out = out.downsample2();
                }
            }
            out
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps the moving image onto the fixed image's grid.
    pub transform: AffineTransform,
    /// Full-resolution MI at `transform`, every pixel sampled.
    pub final_mi: f64,
    /// Best-so-far MI of each level's iterations, coarsest level first.
    pub trace: Vec<Vec<f64>>,
    pub seconds: f64,
}

fn sample_indices(
    rng: &mut Rng,
    w: usize,
    h: usize,
    count: usize,
    random_region: bool,
    out: &mut Vec<usize>,
) -> bool {
    out.clear();
    let (x0, y0, rw, rh) = if random_region {
        let (rw, rh) = (w.div_ceil(2), h.div_ceil(2));
        (
            rng.random_range(0..=w - rw),
            rng.random_range(0..=h - rh),
            rw,
            rh,
        )
    } else {
        (0, 0, w, h)
    };
    if count >= rw * rh {
        if !random_region {
            return false;
        }
        for y in y0..y0 + rh {
            out.extend((x0..x0 + rw).map(|x| y * w + x));
        }
    } else {
        for _ in 0..count {
            let (x, y) = (rng.random_range(x0..x0 + rw), rng.random_range(y0..y0 + rh));
            out.push(y * w + x);
        }
    }
    true
}

pub(crate) fn mi_or_zero(ev: &mut MiEvaluator<'_>, p: [f64; 6], samples: Option<&[usize]>) -> f64 {
    // a probe that lands on a singular transform is as bad as no overlap
    ev.evaluate(&AffineTransform::from_array(p).unwrap_or(AffineTransform::IDENTITY), samples)
        .ok()
        .filter(|_| det(&p).abs() >= MIN_ABS_DET)
        .unwrap_or(0.0)
}

fn det(p: &[f64; 6]) -> f64 {
    p[0] * p[3] - p[1] * p[2]
}

/// Maximizes MI(fixed, moving warped by T) over T.
///
/// Each level runs `max_iterations` steps of stochastic central-difference
/// ascent along the normalized gradient, warm-started from the previous
/// level. The returned transform is whichever of the identity and the best
/// transform of each level scores the highest full-resolution MI, so the
/// result never scores below the identity.
pub fn register_affine(
    fixed: &GrayImage,
    moving: &GrayImage,
    cfg: &PyramidConfig,
    seed: u64,
) -> Result<RegistrationResult> {
    register_affine_from(fixed, moving, cfg, seed, AffineTransform::IDENTITY)
}

/// [`register_affine`] starting from `initial` instead of the identity (the
/// identity is still a final candidate).
pub fn register_affine_from(
    fixed: &GrayImage,
    moving: &GrayImage,
    cfg: &PyramidConfig,
    seed: u64,
    initial: AffineTransform,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let start = Instant::now();
    let fixed_levels = build_pyramid(fixed, cfg.num_resolutions, cfg.kind);
    let moving_levels = build_pyramid(moving, cfg.num_resolutions, cfg.kind);
    let mut rng = Rng::seed_from_u64(seed);
    let mut p = initial.to_array();
    let mut candidates = vec![AffineTransform::IDENTITY, initial];
    let mut trace = Vec::with_capacity(cfg.num_resolutions);
    let mut samples = Vec::new();

    for (f, m) in fixed_levels.iter().zip(&moving_levels) {
        let mut ev = MiEvaluator::new(f, m, cfg.bins)?;
        let mut best = (mi_or_zero(&mut ev, p, None), p);
        let mut level_trace = Vec::with_capacity(cfg.max_iterations);
        for k in 0..cfg.max_iterations {
            let sampled = sample_indices(
                &mut rng,
                f.width(),
                f.height(),
                cfg.samples_per_iteration,
                cfg.random_sample_region,
                &mut samples,
            );
            let idx = sampled.then_some(samples.as_slice());
            let mut grad = [0.0; 6];
            for (j, g) in grad.iter_mut().enumerate() {
                let (mut hi, mut lo) = (p, p);
                hi[j] += FD_DELTA;
                lo[j] -= FD_DELTA;
                *g = (mi_or_zero(&mut ev, hi, idx) - mi_or_zero(&mut ev, lo, idx)) / (2.0 * FD_DELTA);
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > 0.0 {
                let step = step_size(k) / norm;
                let mut cand = p;
                for (c, g) in cand.iter_mut().zip(&grad) {
                    *c += step * g;
                }
                // rejected steps leave the parameters where they were
                if det(&cand).abs() >= MIN_ABS_DET && cand.iter().all(|v| v.is_finite()) {
                    p = cand;
                }
            }
            let mi = mi_or_zero(&mut ev, p, None);
            if mi > best.0 {
                best = (mi, p);
            }
            level_trace.push(best.0);
        }
        p = best.1;
        candidates.push(AffineTransform::from_array(p)?);
        trace.push(level_trace);
    }

    let mut ev = MiEvaluator::new(fixed, moving, cfg.bins)?;
    let mut winner = (f64::NEG_INFINITY, AffineTransform::IDENTITY);
    for t in candidates {
        let mi = ev.evaluate(&t, None)?;
        if mi > winner.0 {
            winner = (mi, t);
        }
    }
    Ok(RegistrationResult {
        transform: winner.1,
        final_mi: winner.0,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One point of the hyperparameter search space. The two estimation flags
/// have no counterpart in this optimizer; they are sampled and logged only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub pyramid: PyramidConfig,
    pub automatic_parameter_estimation: bool,
    pub automatic_scales_estimation: bool,
}

/// Draws a configuration from the search grids; samples and bins come from
/// `base`.
pub fn sample_search_config(rng: &mut Rng, base: &PyramidConfig) -> SearchConfig {
    let pyramid = PyramidConfig {
        num_resolutions: rng.random_range(1..=MAX_RESOLUTIONS),
        max_iterations: ITERATION_STEP * rng.random_range(1..=MAX_ITERATIONS / ITERATION_STEP),
        random_sample_region: rng.random(),
        kind: PyramidKind::ALL[rng.random_range(0..PyramidKind::ALL.len())],
        ..*base
    };
    SearchConfig {
        pyramid,
        automatic_parameter_estimation: rng.random(),
        automatic_scales_estimation: rng.random(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: SearchConfig,
    pub final_mi: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: RegistrationResult,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

impl SearchOutcome {
    /// One JSON object per line.
    pub fn trial_log(&self) -> String {
        self.trials
            .iter()
            .map(|t| serde_json::to_string(t).expect("trial serializes") + "\n")
            .collect()
    }
}

const SEARCH_CONFIG_STREAM: u64 = 0x5EA2C;
const SEARCH_TRIAL_STREAM: u64 = 0x72_1A10;

/// Random hyperparameter search with the default sampling settings.
pub fn random_search(
    fixed: &GrayImage,
    moving: &GrayImage,
    trials: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    random_search_with(fixed, moving, trials, seed, &PyramidConfig::default())
}

/// Runs [`register_affine`] for `trials` sampled configurations and keeps the
/// highest final MI (earliest trial on ties). Configuration `k` and its
/// registration seed depend only on `(seed, k)`, so a longer search extends
/// a shorter one.
pub fn random_search_with(
    fixed: &GrayImage,
    moving: &GrayImage,
    trials: usize,
    seed: u64,
    base: &PyramidConfig,
) -> Result<SearchOutcome> {
    if trials == 0 {
        return Err(Error::InvalidConfig("at least one trial is required".into()));
    }
    let mut cfg_rng = rng_for(seed, SEARCH_CONFIG_STREAM);
    let mut best: Option<(usize, RegistrationResult)> = None;
    let mut log = Vec::with_capacity(trials);
    for trial in 0..trials {
        let config = sample_search_config(&mut cfg_rng, base);
        let result = register_affine(
            fixed,
            moving,
            &config.pyramid,
            derive_seed(seed, SEARCH_TRIAL_STREAM + trial as u64),
        )?;
        log.push(TrialRecord {
            trial,
            config,
            final_mi: result.final_mi,
            seconds: result.seconds,
        });
        if best.as_ref().is_none_or(|(_, b)| result.final_mi > b.final_mi) {
            best = Some((trial, result));
        }
    }
    let (best_trial, best) = best.expect("trials >= 1");
    Ok(SearchOutcome {
        best,
        best_trial,
        trials: log,
    })
}

/// Ranking of atlas plates for one slice by registered MI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiIdentification {
    /// Scores are negated MI so the shared ascending order puts the best
    /// match first.
    pub ranking: RankingResult,
    /// Final MI per plate, in plate order.
    pub mi: Vec<f64>,
    pub seconds: f64,
}

const MI_PLATE_STREAM: u64 = 0x1D_0000;

/// Registers every plate (moving) to the slice (fixed) and ranks plates by
/// descending final MI, lower index first on ties.
pub fn identify_by_mi(
    query_id: &str,
    slice: &GrayImage,
    plates: &[GrayImage],
    cfg: &PyramidConfig,
    seed: u64,
    ground_truth: Option<usize>,
) -> Result<MiIdentification> {
    if plates.is_empty() {
        return Err(Error::IndexEmpty);
    }
    let start = Instant::now();
    let mi = plates
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(register_affine(slice, p, cfg, derive_seed(seed, MI_PLATE_STREAM + i as u64))?.final_mi)
        })
        .collect::<Result<Vec<f64>>>()?;
    let keys: Vec<f64> = mi.iter().map(|v| -v).collect();
    Ok(MiIdentification {
        ranking: RankingResult::from_scores(query_id, &keys, ground_truth)?,
        mi,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_sizes() {
        let img = GrayImage::filled(128, 96, 0.5).unwrap();
        let sizes: Vec<_> = build_pyramid(&img, 3, PyramidKind::Recursive)
            .iter()
            .map(|i| (i.width(), i.height()))
            .collect();
        assert_eq!(sizes, vec![(32, 24), (64, 48), (128, 96)]);
        let smooth = build_pyramid(&img, 3, PyramidKind::Smoothing);
        assert!(smooth.iter().all(|i| i.width() == 128));
        // halving stops before the short side drops below the floor
        let deep = build_pyramid(&img, 7, PyramidKind::Shrinking);
        assert_eq!((deep[0].width(), deep[0].height()), (16, 12));
        assert!(deep[0].height() >= MIN_LEVEL_SIZE);
    }

    #[test]
    fn config_ranges() {
        let ok = PyramidConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            PyramidConfig { num_resolutions: 0, ..ok },
            PyramidConfig { num_resolutions: 8, ..ok },
            PyramidConfig { max_iterations: 3001, ..ok },
            PyramidConfig { bins: 1, ..ok },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn sampled_configs_respect_grids() {
        let mut rng = rng_for(9, 0);
        for _ in 0..500 {
            let c = sample_search_config(&mut rng, &PyramidConfig::default()).pyramid;
            assert!((1..=7).contains(&c.num_resolutions));
            assert_eq!(c.max_iterations % 200, 0);
            assert!((200..=3000).contains(&c.max_iterations));
            assert!(c.validate().is_ok());
        }
    }

    #[test]
    fn step_schedule() {
        assert_eq!(step_size(0), 0.1);
        assert_eq!(step_size(100), 0.05);
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in PyramidKind::ALL {
            assert_eq!(k.to_string().parse::<PyramidKind>().unwrap(), k);
        }
        assert!("gaussian".parse::<PyramidKind>().is_err());
    }
}
