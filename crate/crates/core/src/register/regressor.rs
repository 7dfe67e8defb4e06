//! CNN that predicts the affine transform aligning a moving image to a fixed
//! one, trained to maximize their mutual information.

use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::mi::{MiEvaluator, DEFAULT_BINS};
use super::pyramid::{mi_or_zero, FD_DELTA};
use crate::error::{Error, Result};
use crate::imagekit::{resize_bilinear, warp_affine, AffineTransform, GrayImage};
use crate::rng::{derive_seed, Rng};
use crate::tensornet::{default_regression_net, AdamState, Network, NetworkSpec, Tensor};

pub const REGRESSOR_INPUT_SIZE: usize = 128;
const IDENTITY_BIAS: [f32; 6] = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];

pub fn regressor_spec() -> Result<NetworkSpec> {
    default_regression_net(REGRESSOR_INPUT_SIZE)
}

/// He-initialized regressor whose last layer has zero weights and the
/// identity as bias, so every input initially maps to the identity.
pub fn init_regressor(seed: u64) -> Result<Network> {
    let mut net = Network::init(regressor_spec()?, seed)?;
    let params = net.params_mut();
    let n = params.len();
    params[n - 2].data_mut().fill(0.0);
    params[n - 1].data_mut().copy_from_slice(&IDENTITY_BIAS);
    Ok(net)
}

fn check_regressor(net: &Network) -> Result<()> {
    let expected = regressor_spec()?;
    if net.spec() != &expected {
        return Err(Error::ArchitectureMismatch);
    }
    Ok(())
}

fn to_input_size(img: &GrayImage) -> Result<GrayImage> {
    resize_bilinear(img, REGRESSOR_INPUT_SIZE, REGRESSOR_INPUT_SIZE)
}

/// Stacks `(moving, fixed)` pairs, already at the input size, into
/// `[B, 2, S, S]`.
fn pair_tensor(pairs: &[(&GrayImage, &GrayImage)]) -> Result<Tensor> {
    let s = REGRESSOR_INPUT_SIZE;
    let mut data = Vec::with_capacity(pairs.len() * 2 * s * s);
    for (m, f) in pairs {
        data.extend_from_slice(m.pixels());
        data.extend_from_slice(f.pixels());
    }
    Tensor::new(vec![pairs.len(), 2, s, s], data)
}

fn output_params(out: &Tensor, b: usize) -> [f64; 6] {
    let row = out.row(b);
    std::array::from_fn(|j| row[j] as f64)
}

/// Transform that warps `moving` onto `fixed`, from one forward pass. Both
/// images are resized to the network input size; translations are fractions
/// of the image size, so the transform applies at any resolution.
pub fn predict_affine(net: &Network, moving: &GrayImage, fixed: &GrayImage) -> Result<AffineTransform> {
    check_regressor(net)?;
    let (m, f) = (to_input_size(moving)?, to_input_size(fixed)?);
    let out = net.infer(&pair_tensor(&[(&m, &f)])?)?;
    AffineTransform::from_array(output_params(&out, 0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub pretrain_iterations: usize,
    pub finetune_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bins: usize,
    pub seed: u64,
    /// Ranges of the synthetic transforms used for pre-training.
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_translation: f64,
    /// Largest border fraction zeroed on the synthetic fixed image.
    pub max_crop: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            pretrain_iterations: 3000,
            finetune_iterations: 100,
            batch_size: 4,
            learning_rate: 1e-4,
            bins: DEFAULT_BINS,
            seed: 0,
            max_rotation_deg: 15.0,
            scale: (0.9, 1.1),
            max_translation: 0.1,
            max_crop: 0.1,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bins < 2 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "regressor needs batch_size >= 1, bins >= 2 and a positive learning rate".into(),
            ));
        }
        Ok(())
    }

    /// Draws a pre-training transform.
    pub fn random_transform(&self, rng: &mut Rng) -> AffineTransform {
        let r = self.max_rotation_deg;
        let t = self.max_translation;
        AffineTransform::from_similarity(
            rng.random_range(-r..=r),
            rng.random_range(self.scale.0..=self.scale.1),
            rng.random_range(-t..=t),
            rng.random_range(-t..=t),
        )
    }
}

/// A training example at the network input size.
#[derive(Clone, Debug)]
pub struct RegistrationPair {
    pub moving: GrayImage,
    pub fixed: GrayImage,
}

impl RegistrationPair {
    pub fn new(moving: &GrayImage, fixed: &GrayImage) -> Result<Self> {
        Ok(Self {
            moving: to_input_size(moving)?,
            fixed: to_input_size(fixed)?,
        })
    }

    /// MI between `fixed` and `moving` warped by `t`.
    pub fn mi(&self, t: &AffineTransform, bins: usize) -> Result<f64> {
        let moved = warp_affine(&self.moving, t, self.fixed.width(), self.fixed.height())?;
        super::mi::mutual_information(&self.fixed, &moved, bins, None)
    }
}

/// One optimization step on a batch; returns the mean MI at the predicted
/// transforms before the update.
fn train_step(
    net: &mut Network,
    adam: &mut AdamState,
    batch: &[RegistrationPair],
    bins: usize,
) -> Result<f64> {
    let refs: Vec<(&GrayImage, &GrayImage)> = batch.iter().map(|p| (&p.moving, &p.fixed)).collect();
    let out = net.forward(&pair_tensor(&refs)?)?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0f32; batch.len() * 6];
    let mut mean_mi = 0.0;
    for (b, pair) in batch.iter().enumerate() {
        let mut ev = MiEvaluator::new(&pair.fixed, &pair.moving, bins)?;
        let p = output_params(&out, b);
        mean_mi += mi_or_zero(&mut ev, p, None) / n;
        for j in 0..6 {
            let (mut hi, mut lo) = (p, p);
            hi[j] += FD_DELTA;
            lo[j] -= FD_DELTA;
            let d_mi = (mi_or_zero(&mut ev, hi, None) - mi_or_zero(&mut ev, lo, None)) / (2.0 * FD_DELTA);
            // loss is -MI averaged over the batch
            grad[b * 6 + j] = (-d_mi / n) as f32;
        }
    }
    let grads = net.backward_params(&Tensor::new(vec![batch.len(), 6], grad)?)?;
    adam.step(net.params_mut(), &grads)?;
    Ok(mean_mi)
}

/// Makes a synthetic pair: `fixed` is the plate under a random transform with
/// a lightly zeroed border, `moving` is the plate itself.
pub fn synthetic_pair(
    plate: &GrayImage,
    cfg: &RegressorConfig,
    rng: &mut Rng,
) -> Result<(RegistrationPair, AffineTransform)> {
    let moving = to_input_size(plate)?;
    let t = cfg.random_transform(rng);
    let crop = if cfg.max_crop > 0.0 { rng.random_range(0.0..=cfg.max_crop) } else { 0.0 };
    let fixed = warp_affine(&moving, &t, moving.width(), moving.height())?.zero_border(crop);
    Ok((RegistrationPair { moving, fixed }, t))
}

#[derive(Debug)]
pub struct RegressorOutcome {
    pub network: Network,
    /// Mean batch MI at each pre-training iteration.
    pub pretrain_mi: Vec<f64>,
    /// Mean MI over the fine-tuning pairs before and after each fine-tuning
    /// iteration; entry 0 is the pre-trained state.
    pub finetune_mi: Vec<f64>,
    /// Fine-tuning iteration whose parameters were kept (0 = none).
    pub finetune_best: usize,
    pub seconds: f64,
}

const PRETRAIN_STREAM: u64 = 0xB7_0001;

/// Stage 1: trains on random transforms of the plates.
pub fn pretrain_regressor(net: &mut Network, plates: &[GrayImage], cfg: &RegressorConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_regressor(net)?;
    if plates.is_empty() {
        return Err(Error::IndexEmpty);
    }
    let mut adam = AdamState::new(net.params(), cfg.learning_rate);
    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, PRETRAIN_STREAM));
    let mut log = Vec::with_capacity(cfg.pretrain_iterations);
    for _ in 0..cfg.pretrain_iterations {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let plate = &plates[rng.random_range(0..plates.len())];
                Ok(synthetic_pair(plate, cfg, &mut rng)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        log.push(train_step(net, &mut adam, &batch, cfg.bins)?);
    }
    Ok(log)
}

fn mean_pair_mi(net: &Network, pairs: &[RegistrationPair], bins: usize) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let t = predict_affine(net, &p.moving, &p.fixed)?;
        total += p.mi(&t, bins)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Stage 2: trains on real pairs without extra transforms, keeping whichever
/// parameters (including the starting ones) give the highest mean MI on
/// those pairs. Returns the MI history and the kept iteration.
pub fn finetune_regressor(
    net: &mut Network,
    pairs: &[RegistrationPair],
    cfg: &RegressorConfig,
) -> Result<(Vec<f64>, usize)> {
    cfg.validate()?;
    check_regressor(net)?;
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning needs at least one pair".into()));
    }
    let mut adam = AdamState::new(net.params(), cfg.learning_rate);
    let mut history = vec![mean_pair_mi(net, pairs, cfg.bins)?];
    let mut best = (history[0], 0, net.params().to_vec());
    for it in 1..=cfg.finetune_iterations {
        for chunk in pairs.chunks(cfg.batch_size) {
            train_step(net, &mut adam, chunk, cfg.bins)?;
        }
        let mi = mean_pair_mi(net, pairs, cfg.bins)?;
        history.push(mi);
        if mi > best.0 {
            best = (mi, it, net.params().to_vec());
        }
    }
    net.params_mut().clone_from_slice(&best.2);
    Ok((history, best.1))
}

/// Both stages from a fresh identity-initialized regressor. `pairs` are
/// `(moving plate, fixed slice)` images at any size.
pub fn train_regressor(
    plates: &[GrayImage],
    pairs: &[(GrayImage, GrayImage)],
    cfg: &RegressorConfig,
) -> Result<RegressorOutcome> {
    let start = Instant::now();
    let mut net = init_regressor(derive_seed(cfg.seed, 0))?;
    let pretrain_mi = pretrain_regressor(&mut net, plates, cfg)?;
    let (finetune_mi, finetune_best) = if pairs.is_empty() || cfg.finetune_iterations == 0 {
        (Vec::new(), 0)
    } else {
        let pairs = pairs
            .iter()
            .map(|(m, f)| RegistrationPair::new(m, f))
            .collect::<Result<Vec<_>>>()?;
        finetune_regressor(&mut net, &pairs, cfg)?
    };
    Ok(RegressorOutcome {
        network: net,
        pretrain_mi,
        finetune_mi,
        finetune_best,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(seed: usize) -> GrayImage {
        let px = (0..128 * 128)
            .map(|i| (((i % 128) * 3 + (i / 128) * 5 + seed * 7) % 17) as f32 / 16.0)
            .collect();
        GrayImage::new(128, 128, px).unwrap()
    }

    #[test]
    fn fresh_regressor_predicts_identity() {
        let net = init_regressor(3).unwrap();
        for s in 0..3 {
            let t = predict_affine(&net, &pattern(s), &pattern(s + 1)).unwrap();
            assert!(t.is_identity(), "{t:?}");
        }
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let net = Network::init(crate::tensornet::default_embed_net(128, 64).unwrap(), 0).unwrap();
        assert!(matches!(
            predict_affine(&net, &pattern(0), &pattern(0)),
            Err(Error::ArchitectureMismatch)
        ));
    }

    #[test]
    fn prediction_is_deterministic() {
        let mut net = init_regressor(5).unwrap();
        // perturb the head so the output depends on the input
        let n = net.params().len();
        for (i, v) in net.params_mut()[n - 2].data_mut().iter_mut().enumerate() {
            *v = ((i % 13) as f32 - 6.0) * 1e-3;
        }
        let (a, b) = (pattern(1), pattern(2));
        assert_eq!(predict_affine(&net, &a, &b).unwrap(), predict_affine(&net, &a, &b).unwrap());
    }
}
