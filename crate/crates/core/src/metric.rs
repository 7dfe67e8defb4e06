//! Contrastive and triplet losses with analytic gradients, triplet
//! classification and online in-batch mining, and a pair sampler for
//! contrastive training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensornet::Tensor;

/// Hinge margin `m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub margin: f64,
}

impl MarginConfig {
    pub const CONTRASTIVE_DEFAULT: MarginConfig = MarginConfig { margin: 1.0 };
    pub const TRIPLET_DEFAULT: MarginConfig = MarginConfig { margin: 0.5 };

    pub fn new(margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("margin {margin} must be > 0")));
        }
        Ok(Self { margin })
    }
}

pub fn euclidean_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// `d(a, b)` and its gradient with respect to `a` (the gradient for `b` is the
/// negation). At `d = 0` the gradient is taken as zero.
fn distance_and_grad(a: &[f32], b: &[f32]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d == 0.0 {
        return (0.0, vec![0.0; diff.len()]);
    }
    (d, diff.into_iter().map(|v| v / d).collect())
}

/// Row-aligned embedding pairs with a positive/negative flag per row.
#[derive(Clone, Debug)]
pub struct PairBatch {
    fixed: Tensor,
    moving: Tensor,
    positive: Vec<bool>,
}

impl PairBatch {
    pub fn new(fixed: Tensor, moving: Tensor, positive: Vec<bool>) -> Result<Self> {
        if fixed.shape().len() != 2 || fixed.shape() != moving.shape() {
            return Err(Error::ShapeMismatch(format!(
                "pair embeddings {:?} vs {:?}",
                fixed.shape(),
                moving.shape()
            )));
        }
        if positive.len() != fixed.shape()[0] {
            return Err(Error::LengthMismatch(positive.len(), fixed.shape()[0]));
        }
        Ok(Self {
            fixed,
            moving,
            positive,
        })
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    /// Mean over active pairs.
    pub loss: f64,
    pub grad_fixed: Tensor,
    pub grad_moving: Tensor,
}

/// Positive pairs cost `d^2 / 2`; negative pairs cost `max(0, m - d)^2 / 2`.
/// The batch loss and gradients are averaged over active pairs (those with a
/// nonzero cost); a batch with none has zero loss.
pub fn contrastive_loss(pairs: &PairBatch, margin: &MarginConfig) -> ContrastiveOutput {
    let n = pairs.len();
    let mut grad_f = Tensor::zeros_like(&pairs.fixed);
    let mut grad_m = Tensor::zeros_like(&pairs.moving);
    let dim = if n == 0 { 0 } else { pairs.fixed.shape()[1] };
    // (row, cost, dL/dd, unit vector)
    let mut active = Vec::with_capacity(n);
    for i in 0..n {
        let (d, unit) = distance_and_grad(pairs.fixed.row(i), pairs.moving.row(i));
        let (cost, dl_dd) = if pairs.positive[i] {
            (0.5 * d * d, d)
        } else if d < margin.margin {
            let gap = margin.margin - d;
            (0.5 * gap * gap, -gap)
        } else {
            (0.0, 0.0)
        };
        if cost > 0.0 {
            active.push((i, cost, dl_dd, unit));
        }
    }
    if active.is_empty() {
        return ContrastiveOutput {
            loss: 0.0,
            grad_fixed: grad_f,
            grad_moving: grad_m,
        };
    }
    let scale = 1.0 / active.len() as f64;
    let mut total = 0.0;
    for (i, cost, dl_dd, unit) in active {
        total += cost;
        let gf = &mut grad_f.data_mut()[i * dim..(i + 1) * dim];
        for (g, u) in gf.iter_mut().zip(&unit) {
            *g = (scale * dl_dd * u) as f32;
        }
        let gm = &mut grad_m.data_mut()[i * dim..(i + 1) * dim];
        for (g, u) in gm.iter_mut().zip(&unit) {
            *g = (-scale * dl_dd * u) as f32;
        }
    }
    ContrastiveOutput {
        loss: total * scale,
        grad_fixed: grad_f,
        grad_moving: grad_m,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLossOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// `max(d(a, p) - d(a, n) + m, 0)` with its gradients.
pub fn triplet_loss(
    anchor: &[f32],
    positive: &[f32],
    negative: &[f32],
    margin: &MarginConfig,
) -> Result<TripletLossOutput> {
    if anchor.len() != positive.len() {
        return Err(Error::LengthMismatch(anchor.len(), positive.len()));
    }
    if anchor.len() != negative.len() {
        return Err(Error::LengthMismatch(anchor.len(), negative.len()));
    }
    let (d_ap, u_ap) = distance_and_grad(anchor, positive);
    let (d_an, u_an) = distance_and_grad(anchor, negative);
    let raw = d_ap - d_an + margin.margin;
    let dim = anchor.len();
    if raw <= 0.0 {
        return Ok(TripletLossOutput {
            loss: 0.0,
            grad_anchor: vec![0.0; dim],
            grad_positive: vec![0.0; dim],
            grad_negative: vec![0.0; dim],
        });
    }
    Ok(TripletLossOutput {
        loss: raw,
        grad_anchor: u_ap.iter().zip(&u_an).map(|(p, n)| p - n).collect(),
        grad_positive: u_ap.iter().map(|p| -p).collect(),
        grad_negative: u_an,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletKind {
    Easy,
    SemiHard,
    Hard,
}

/// Hard: the negative is closer than the positive. Semi-hard: it is not, but
/// the hinge is still active. Easy: zero loss.
pub fn classify_triplet(d_ap: f64, d_an: f64, margin: &MarginConfig) -> TripletKind {
    if d_an < d_ap {
        TripletKind::Hard
    } else if d_an < d_ap + margin.margin {
        TripletKind::SemiHard
    } else {
        TripletKind::Easy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    SemiHard,
    Hard,
    /// Every triplet with a positive loss.
    All,
}

impl MiningMode {
    pub fn accepts(&self, kind: TripletKind) -> bool {
        match self {
            MiningMode::SemiHard => kind == TripletKind::SemiHard,
            MiningMode::Hard => kind == TripletKind::Hard,
            MiningMode::All => kind != TripletKind::Easy,
        }
    }
}

impl fmt::Display for MiningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiningMode::SemiHard => "semi_hard",
            MiningMode::Hard => "hard",
            MiningMode::All => "all",
        })
    }
}

impl FromStr for MiningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi_hard" | "semi-hard" => Ok(MiningMode::SemiHard),
            "hard" => Ok(MiningMode::Hard),
            "all" => Ok(MiningMode::All),
            _ => Err(Error::InvalidConfig(format!("unknown mining mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Mined triplets, lexicographically ordered by `(anchor, positive, negative)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Enumerates every valid `(a, p, n)` in the batch and keeps those whose
/// classification matches `mode`.
pub fn mine_triplets(
    embeddings: &Tensor,
    labels: &[usize],
    mode: MiningMode,
    margin: &MarginConfig,
) -> Result<TripletSet> {
    if embeddings.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "embeddings must be [B, L], got {:?}",
            embeddings.shape()
        )));
    }
    let b = embeddings.shape()[0];
    if labels.len() != b {
        return Err(Error::LengthMismatch(labels.len(), b));
    }
    let mut dist = vec![0.0f64; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let d = euclidean_distance(embeddings.row(i), embeddings.row(j))?;
            dist[i * b + j] = d;
            dist[j * b + i] = d;
        }
    }
    let mut triplets = Vec::new();
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                if mode.accepts(classify_triplet(dist[a * b + p], dist[a * b + n], margin)) {
                    triplets.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: n,
                    });
                }
            }
        }
    }
    if triplets.is_empty() {
        return Err(Error::NoValidTriplets);
    }
    Ok(TripletSet { triplets })
}

/// Mean triplet loss over `set` and its gradient with respect to every
/// embedding row.
pub fn batch_triplet_loss(
    embeddings: &Tensor,
    set: &TripletSet,
    margin: &MarginConfig,
) -> Result<(f64, Tensor)> {
    let mut grad = vec![0.0f64; embeddings.len()];
    let dim = embeddings.shape()[1];
    if set.is_empty() {
        return Ok((0.0, Tensor::zeros_like(embeddings)));
    }
    let mut total = 0.0;
    for t in &set.triplets {
        let out = triplet_loss(
            embeddings.row(t.anchor),
            embeddings.row(t.positive),
            embeddings.row(t.negative),
            margin,
        )?;
        total += out.loss;
        for (row, g) in [
            (t.anchor, &out.grad_anchor),
            (t.positive, &out.grad_positive),
            (t.negative, &out.grad_negative),
        ] {
            for (dst, v) in grad[row * dim..(row + 1) * dim].iter_mut().zip(g) {
                *dst += v;
            }
        }
    }
    let scale = 1.0 / set.len() as f64;
    let grad = grad.into_iter().map(|v| (v * scale) as f32).collect();
    Ok((total * scale, Tensor::new(embeddings.shape().to_vec(), grad)?))
}

/// One (slice, plate) pairing drawn by [`PairSampler`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    /// Index into the slice list handed to the sampler.
    pub slice: usize,
    pub plate: usize,
    pub positive: bool,
}

/// Endless, seed-deterministic stream alternating positive pairs (slice, its
/// ground-truth plate) and negative pairs (slice, a uniformly drawn other
/// plate). Each pair draws its slice uniformly.
pub struct PairSampler {
    ground_truth: Vec<usize>,
    num_plates: usize,
    rng: Rng,
    next_positive: bool,
}

impl PairSampler {
    pub fn new(ground_truth: Vec<usize>, num_plates: usize, seed: u64) -> Result<Self> {
        if num_plates < 2 {
            return Err(Error::InvalidConfig("pair sampling needs at least 2 plates".into()));
        }
        if ground_truth.is_empty() {
            return Err(Error::InvalidConfig("no slices to sample pairs from".into()));
        }
        if let Some(&bad) = ground_truth.iter().find(|&&g| g >= num_plates) {
            return Err(Error::InvalidConfig(format!("plate {bad} >= {num_plates}")));
        }
        Ok(Self {
            ground_truth,
            num_plates,
            rng: Rng::seed_from_u64(seed),
            next_positive: true,
        })
    }
}

impl Iterator for PairSampler {
    type Item = PairSample;

    fn next(&mut self) -> Option<PairSample> {
        let slice = self.rng.random_range(0..self.ground_truth.len());
        let gt = self.ground_truth[slice];
        let positive = self.next_positive;
        self.next_positive = !positive;
        let plate = if positive {
            gt
        } else {
            loop {
                let p = self.rng.random_range(0..self.num_plates);
                if p != gt {
                    break p;
                }
            }
        };
        Some(PairSample {
            slice,
            plate,
            positive,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t2(rows: &[&[f32]]) -> Tensor {
        let dim = rows[0].len();
        Tensor::new(vec![rows.len(), dim], rows.concat()).unwrap()
    }

    #[test]
    fn distances() {
        assert_eq!(euclidean_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(
            euclidean_distance(&[0.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn contrastive_hand_cases() {
        let m = MarginConfig::CONTRASTIVE_DEFAULT;
        let zero = PairBatch::new(t2(&[&[0.3, 0.1]]), t2(&[&[0.3, 0.1]]), vec![true]).unwrap();
        let out = contrastive_loss(&zero, &m);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_fixed.data().iter().all(|&g| g == 0.0));

        let neg = PairBatch::new(t2(&[&[0.0, 0.0]]), t2(&[&[0.4, 0.0]]), vec![false]).unwrap();
        assert_relative_eq!(
            contrastive_loss(&neg, &m).loss,
            0.18,
            max_relative = 1e-6
        );

        let far = PairBatch::new(t2(&[&[0.0, 0.0]]), t2(&[&[1.0, 0.5]]), vec![false]).unwrap();
        let out = contrastive_loss(&far, &m);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_fixed.data().iter().chain(out.grad_moving.data()).all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_hand_cases() {
        let m = MarginConfig::new(0.5).unwrap();
        let a = [0.0f32, 0.0];
        let eq = triplet_loss(&a, &[0.3, 0.0], &[0.0, 0.3], &m).unwrap();
        assert_relative_eq!(eq.loss, 0.5, max_relative = 1e-12);
        let out = triplet_loss(&a, &[0.3, 0.0], &[0.1, 0.0], &m).unwrap();
        assert_relative_eq!(out.loss, 0.7, max_relative = 1e-6);
        let easy = triplet_loss(&a, &[0.1, 0.0], &[0.0, 0.9], &m).unwrap();
        assert_eq!(easy.loss, 0.0);
        assert!(easy.grad_anchor.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn classification_examples() {
        assert_eq!(
            classify_triplet(0.3, 0.35, &MarginConfig::new(0.2).unwrap()),
            TripletKind::SemiHard
        );
        assert_eq!(
            classify_triplet(0.3, 0.2, &MarginConfig::TRIPLET_DEFAULT),
            TripletKind::Hard
        );
        assert_eq!(
            classify_triplet(0.3, 0.9, &MarginConfig::new(0.5).unwrap()),
            TripletKind::Easy
        );
    }

    #[test]
    fn all_hard_batch_mines_eight() {
        // classes on opposite diagonals of a square: every negative is an
        // edge away, every positive a diagonal away
        let emb = t2(&[&[0.0, 0.0], &[10.0, 10.0], &[10.0, 0.0], &[0.0, 10.0]]);
        let set = mine_triplets(&emb, &[0, 0, 1, 1], MiningMode::Hard, &MarginConfig::TRIPLET_DEFAULT)
            .unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.triplets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mining_failures() {
        let emb = t2(&[&[0.0], &[1.0], &[2.0]]);
        assert!(matches!(
            mine_triplets(&emb, &[4, 4, 4], MiningMode::All, &MarginConfig::TRIPLET_DEFAULT),
            Err(Error::NoValidTriplets)
        ));
        let easy = t2(&[&[0.0], &[0.1], &[5.0], &[5.1]]);
        assert!(matches!(
            mine_triplets(&easy, &[0, 0, 1, 1], MiningMode::SemiHard, &MarginConfig::TRIPLET_DEFAULT),
            Err(Error::NoValidTriplets)
        ));
    }

    #[test]
    fn pair_sampler_alternates_and_rejects_truth() {
        let gt = vec![0, 3, 5, 5, 9];
        let pairs: Vec<_> = PairSampler::new(gt.clone(), 10, 4).unwrap().take(200).collect();
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.positive, i % 2 == 0);
            if p.positive {
                assert_eq!(p.plate, gt[p.slice]);
            } else {
                assert_ne!(p.plate, gt[p.slice]);
            }
        }
        let again: Vec<_> = PairSampler::new(gt, 10, 4).unwrap().take(200).collect();
        assert_eq!(pairs, again);
    }
}
