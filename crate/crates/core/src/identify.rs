//! Plate embedding index, nearest-plate ranking, MAE / TOP-n evaluation, and
//! the metric-learning training loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imagekit::{clahe, resize_bilinear, ClaheConfig, GrayImage};
use crate::metric::{
    batch_triplet_loss, contrastive_loss, euclidean_distance, mine_triplets, MarginConfig,
    MiningMode, PairBatch, PairSampler,
};
use crate::rng::{derive_seed, Rng};
use crate::imagekit::load_pgm;
use crate::synthatlas::{synthesize_slice, AugmentationRanges, DatasetManifest, Split};
use crate::tensornet::{default_embed_net, AdamState, Network, Tensor};

/// TOP-n cut-offs reported by [`EvalReport`].
pub const TOP_N: [usize; 4] = [1, 3, 5, 10];

/// How raw images become network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub input_size: usize,
    pub clahe: Option<ClaheConfig>,
}

impl Preprocess {
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        let img = match &self.clahe {
            Some(cfg) => clahe(img, cfg)?,
            None => img.clone(),
        };
        resize_bilinear(&img, self.input_size, self.input_size)
    }
}

/// Stacks equally sized single-channel images into `[B, 1, H, W]`.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::DimensionMismatch(w, h, img.width(), img.height()));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Embedding network plus its preprocessing: the shared map applied to both
/// slices and plates.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub net: Network,
    pub preprocess: Preprocess,
}

const EMBED_CHUNK: usize = 16;

impl Embedder {
    pub fn new(net: Network, clahe: Option<ClaheConfig>) -> Self {
        let preprocess = Preprocess {
            input_size: net.spec().input_size,
            clahe,
        };
        Self { net, preprocess }
    }

    pub fn embed(&self, images: &[GrayImage]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let prepped = chunk
                .iter()
                .map(|i| self.preprocess.apply(i))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&GrayImage> = prepped.iter().collect();
            let emb = self.net.infer(&images_to_tensor(&refs)?)?;
            out.extend((0..chunk.len()).map(|i| emb.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn embed_one(&self, image: &GrayImage) -> Result<Vec<f32>> {
        Ok(self.embed(std::slice::from_ref(image))?.remove(0))
    }

    /// Short hex digest of the parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.net.params() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Embeddings of every plate, in plate order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    embeddings: Vec<Vec<f32>>,
    dim: usize,
    checkpoint_id: String,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn embedding(&self, plate: usize) -> &[f32] {
        &self.embeddings[plate]
    }
}

pub fn build_index(plates: &[GrayImage], embedder: &Embedder) -> Result<EmbeddingIndex> {
    if plates.is_empty() {
        return Err(Error::IndexEmpty);
    }
    let embeddings = embedder.embed(plates)?;
    Ok(EmbeddingIndex {
        dim: embeddings[0].len(),
        embeddings,
        checkpoint_id: embedder.fingerprint(),
    })
}

/// All plates ordered by ascending score (lower index first on ties).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: String,
    pub ranked: Vec<usize>,
    /// Sort key of each entry of `ranked`, nondecreasing.
    pub scores: Vec<f64>,
    /// 0-based position of the ground-truth plate in `ranked`.
    pub ground_truth_rank: Option<usize>,
}

impl RankingResult {
    /// Ranks plates by `scores[plate]` ascending.
    pub fn from_scores(
        query_id: impl Into<String>,
        scores: &[f64],
        ground_truth: Option<usize>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::IndexEmpty);
        }
        if let Some(gt) = ground_truth {
            if gt >= scores.len() {
                return Err(Error::InvalidConfig(format!(
                    "ground truth {gt} outside {} plates",
                    scores.len()
                )));
            }
        }
        let mut ranked: Vec<usize> = (0..scores.len()).collect();
        ranked.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let ground_truth_rank = ground_truth.map(|gt| {
            ranked
                .iter()
                .position(|&p| p == gt)
                .expect("ranking is a permutation")
        });
        Ok(Self {
            query_id: query_id.into(),
            scores: ranked.iter().map(|&p| scores[p]).collect(),
            ranked,
            ground_truth_rank,
        })
    }
}

pub fn rank_plates(
    index: &EmbeddingIndex,
    embedder: &Embedder,
    query_id: &str,
    slice: &GrayImage,
    ground_truth: Option<usize>,
) -> Result<RankingResult> {
    if index.is_empty() {
        return Err(Error::IndexEmpty);
    }
    let h = embedder.embed_one(slice)?;
    rank_embedding(index, query_id, &h, ground_truth)
}

pub fn rank_embedding(
    index: &EmbeddingIndex,
    query_id: &str,
    embedding: &[f32],
    ground_truth: Option<usize>,
) -> Result<RankingResult> {
    let d = index
        .embeddings
        .iter()
        .map(|e| euclidean_distance(embedding, e))
        .collect::<Result<Vec<_>>>()?;
    RankingResult::from_scores(query_id, &d, ground_truth)
}

/// Mean ground-truth rank, TOP-n hit rates and total inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub top10: f64,
    pub inference_seconds: f64,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], inference_seconds: f64) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let n = ranks.len();
        let hit = |k: usize| ranks.iter().filter(|&&y| y < k).count() as f64 / n as f64;
        Ok(Self {
            n,
            mae: ranks.iter().sum::<usize>() as f64 / n as f64,
            top1: hit(TOP_N[0]),
            top3: hit(TOP_N[1]),
            top5: hit(TOP_N[2]),
            top10: hit(TOP_N[3]),
            inference_seconds,
        })
    }

    pub fn from_rankings(rankings: &[RankingResult], inference_seconds: f64) -> Result<Self> {
        let ranks = rankings
            .iter()
            .map(|r| {
                r.ground_truth_rank.ok_or_else(|| {
                    Error::InvalidConfig(format!("query {} has no ground truth", r.query_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_ranks(&ranks, inference_seconds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// A query slice with its id and ground-truth plate.
#[derive(Clone, Debug)]
pub struct LabeledSlice {
    pub id: String,
    pub image: GrayImage,
    pub plate: usize,
}

impl LabeledSlice {
    /// Synthesizes the entries of one split in memory from an atlas.
    pub fn synthesize_split(
        manifest: &DatasetManifest,
        atlas: &[GrayImage],
        split: Split,
    ) -> Result<Vec<Self>> {
        manifest
            .split(split)
            .map(|e| {
                Ok(Self {
                    id: e.path.clone(),
                    image: synthesize_slice(atlas, e.plate, &e.augmentation, e.seed)?,
                    plate: e.plate,
                })
            })
            .collect()
    }

    /// Reads the entries of one split from a dataset directory.
    pub fn load_split(
        manifest: &DatasetManifest,
        root: impl AsRef<std::path::Path>,
        split: Split,
    ) -> Result<Vec<Self>> {
        let root = root.as_ref();
        manifest
            .split(split)
            .map(|e| {
                Ok(Self {
                    id: e.path.clone(),
                    image: load_pgm(root.join(&e.path))?,
                    plate: e.plate,
                })
            })
            .collect()
    }
}

/// Reads every plate listed by a manifest.
pub fn load_atlas(manifest: &DatasetManifest, root: impl AsRef<std::path::Path>) -> Result<Vec<GrayImage>> {
    let root = root.as_ref();
    (0..manifest.atlas.num_plates)
        .map(|i| load_pgm(root.join(manifest.plate_path(i))))
        .collect()
}

/// Embeds and ranks every query. The reported time covers both steps for all
/// queries.
pub fn evaluate(
    queries: &[LabeledSlice],
    index: &EmbeddingIndex,
    embedder: &Embedder,
) -> Result<(EvalReport, Vec<RankingResult>)> {
    if queries.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let start = Instant::now();
    let rankings = queries
        .iter()
        .map(|q| rank_plates(index, embedder, &q.id, &q.image, Some(q.plate)))
        .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((EvalReport::from_rankings(&rankings, seconds)?, rankings))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    Triplet,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(LossKind::Contrastive),
            "triplet" => Ok(LossKind::Triplet),
            _ => Err(Error::InvalidConfig(format!("unknown loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Ignored for contrastive training.
    pub mining: MiningMode,
    pub batch_size: usize,
    /// Defaults to 1.0 (contrastive) or 0.5 (triplet) when unset.
    pub margin: Option<f64>,
    pub max_iterations: usize,
    pub patience: usize,
    pub validate_every: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub input_size: usize,
    pub embed_dim: usize,
    /// On-the-fly augmentation of training slices and plates.
    pub augmentation: AugmentationRanges,
    pub clahe: Option<ClaheConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Triplet,
            mining: MiningMode::SemiHard,
            batch_size: 16,
            margin: None,
            max_iterations: 10_000,
            patience: 2_000,
            validate_every: 250,
            learning_rate: 1e-4,
            seed: 0,
            input_size: 128,
            embed_dim: 64,
            augmentation: AugmentationRanges::default(),
            clahe: None,
        }
    }
}

impl TrainConfig {
    pub fn margin(&self) -> Result<MarginConfig> {
        match (self.margin, self.loss) {
            (Some(m), _) => MarginConfig::new(m),
            (None, LossKind::Contrastive) => Ok(MarginConfig::CONTRASTIVE_DEFAULT),
            (None, LossKind::Triplet) => Ok(MarginConfig::TRIPLET_DEFAULT),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.margin()?;
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch size {} must be even and >= 4",
                self.batch_size
            )));
        }
        if self.validate_every == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "iteration counts must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Atlas plus labeled training and validation slices.
pub struct TrainingData<'a> {
    pub atlas: &'a [GrayImage],
    pub train: &'a [LabeledSlice],
    pub validation: &'a [LabeledSlice],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation checkpoint.
    pub network: Network,
    pub best_iteration: usize,
    pub best_val_mae: f64,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    /// `iteration,loss,val1_mae` rows; the MAE column is empty between
    /// validations.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val1_mae\n");
        for r in &self.log {
            match r.val_mae {
                Some(m) => out.push_str(&format!("{},{},{}\n", r.iteration, r.loss, m)),
                None => out.push_str(&format!("{},{},\n", r.iteration, r.loss)),
            }
        }
        out
    }
}

const MAX_RESAMPLES: usize = 100;

/// Applies a random slice-style augmentation to an arbitrary image (no
/// neighbor blending).
fn augment_image(img: &GrayImage, ranges: &AugmentationRanges, rng: &mut Rng) -> Result<GrayImage> {
    let mut aug = ranges.sample(rng);
    aug.neighbor_blend = 0.0;
    let seed: u64 = rng.random();
    synthesize_slice(std::slice::from_ref(img), 0, &aug, seed)
}

fn validation_mae(
    data: &TrainingData<'_>,
    embedder: &Embedder,
) -> Result<f64> {
    let index = build_index(data.atlas, embedder)?;
    let (report, _) = evaluate(data.validation, &index, embedder)?;
    Ok(report.mae)
}

/// Trains the embedding network and returns the parameters with the lowest
/// validation MAE.
///
/// Triplet batches hold `B / 2` distinct plates, each represented by an
/// augmented training slice and by its plate (clean or re-augmented), so every
/// class has exactly two members. Contrastive batches hold `B / 2` pairs from
/// a [`PairSampler`]. Validation runs every `validate_every` iterations and
/// after the last one; training stops once `patience` iterations pass without
/// a new best.
pub fn train_identifier(data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::InvalidConfig(
            "training and validation sets must be nonempty".into(),
        ));
    }
    if data.atlas.len() < 2 {
        return Err(Error::InvalidConfig("atlas needs at least 2 plates".into()));
    }
    let margin = cfg.margin()?;
    let spec = default_embed_net(cfg.input_size, cfg.embed_dim)?;
    let net = Network::init(spec, derive_seed(cfg.seed, 1))?;
    let mut embedder = Embedder::new(net, cfg.clahe);
    let mut adam = AdamState::new(embedder.net.params(), cfg.learning_rate);
    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut pairs = PairSampler::new(
        data.train.iter().map(|s| s.plate).collect(),
        data.atlas.len(),
        derive_seed(cfg.seed, 3),
    )?;
    let classes_per_batch = cfg.batch_size / 2;

    let mut best_params = embedder.net.params().to_vec();
    let mut best_mae = f64::INFINITY;
    let mut best_iteration = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut iterations_run = 0;

    for iteration in 0..cfg.max_iterations {
        let mut failures = 0;
        let (loss, grad) = loop {
            let step = match cfg.loss {
                LossKind::Triplet => {
                    triplet_step(data, cfg, &margin, classes_per_batch, &mut embedder, &mut rng)
                }
                LossKind::Contrastive => {
                    contrastive_step(data, cfg, &margin, &mut pairs, &mut embedder, &mut rng)
                }
            };
            match step {
                Err(Error::NoValidTriplets) => {
                    failures += 1;
                    if failures >= MAX_RESAMPLES {
                        return Err(Error::NoValidTriplets);
                    }
                }
                other => break other?,
            }
        };
        let grads = embedder.net.backward_params(&grad)?;
        adam.step(embedder.net.params_mut(), &grads)?;
        iterations_run = iteration + 1;

        let last = iteration + 1 == cfg.max_iterations;
        let val_mae = if (iteration + 1) % cfg.validate_every == 0 || last {
            let mae = validation_mae(data, &embedder)?;
            if mae < best_mae {
                best_mae = mae;
                best_iteration = iteration + 1;
                best_params = embedder.net.params().to_vec();
            }
            Some(mae)
        } else {
            None
        };
        log.push(TrainLogRow {
            iteration,
            loss,
            val_mae,
        });
        if val_mae.is_some() && iteration + 1 - best_iteration > cfg.patience {
            stopped_early = !last;
            break;
        }
    }
    let network = Network::from_params(embedder.net.spec().clone(), best_params)?;
    Ok(TrainOutcome {
        network,
        best_iteration,
        best_val_mae: best_mae,
        iterations_run,
        stopped_early,
        log,
    })
}

fn plate_view(
    data: &TrainingData<'_>,
    plate: usize,
    ranges: &AugmentationRanges,
    rng: &mut Rng,
) -> Result<GrayImage> {
    if rng.random::<f64>() < 0.5 {
        return Ok(data.atlas[plate].clone());
    }
    let mut aug = ranges.sample(rng);
    // the plate side never mixes in a neighbor: it must stay a clean label
    aug.neighbor_blend = 0.0;
    let seed: u64 = rng.random();
    synthesize_slice(data.atlas, plate, &aug, seed)
}

fn forward_batch(embedder: &mut Embedder, images: &[GrayImage]) -> Result<Tensor> {
    let prepped = images
        .iter()
        .map(|i| embedder.preprocess.apply(i))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&GrayImage> = prepped.iter().collect();
    embedder.net.forward(&images_to_tensor(&refs)?)
}

fn triplet_step(
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    margin: &MarginConfig,
    classes: usize,
    embedder: &mut Embedder,
    rng: &mut Rng,
) -> Result<(f64, Tensor)> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<&LabeledSlice> = Vec::with_capacity(classes);
    for i in order {
        let s = &data.train[i];
        if chosen.iter().all(|c| c.plate != s.plate) {
            chosen.push(s);
            if chosen.len() == classes {
                break;
            }
        }
    }
    let mut images = Vec::with_capacity(2 * chosen.len());
    let mut labels = Vec::with_capacity(2 * chosen.len());
    for s in &chosen {
        images.push(augment_image(&s.image, &cfg.augmentation, rng)?);
        labels.push(s.plate);
        images.push(plate_view(data, s.plate, &cfg.augmentation, rng)?);
        labels.push(s.plate);
    }
    let emb = forward_batch(embedder, &images)?;
    let set = mine_triplets(&emb, &labels, cfg.mining, margin)?;
    batch_triplet_loss(&emb, &set, margin)
}

fn contrastive_step(
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    margin: &MarginConfig,
    pairs: &mut PairSampler,
    embedder: &mut Embedder,
    rng: &mut Rng,
) -> Result<(f64, Tensor)> {
    let n = cfg.batch_size / 2;
    let mut images = Vec::with_capacity(2 * n);
    let mut positive = Vec::with_capacity(n);
    for pair in pairs.by_ref().take(n) {
        images.push(augment_image(&data.train[pair.slice].image, &cfg.augmentation, rng)?);
        images.push(plate_view(data, pair.plate, &cfg.augmentation, rng)?);
        positive.push(pair.positive);
    }
    let emb = forward_batch(embedder, &images)?;
    let dim = emb.shape()[1];
    let (mut hf, mut hm) = (Vec::with_capacity(n * dim), Vec::with_capacity(n * dim));
    for i in 0..n {
        hf.extend_from_slice(emb.row(2 * i));
        hm.extend_from_slice(emb.row(2 * i + 1));
    }
    let batch = PairBatch::new(
        Tensor::new(vec![n, dim], hf)?,
        Tensor::new(vec![n, dim], hm)?,
        positive,
    )?;
    let out = contrastive_loss(&batch, margin);
    let mut grad = vec![0.0f32; emb.len()];
    for i in 0..n {
        grad[2 * i * dim..(2 * i + 1) * dim].copy_from_slice(out.grad_fixed.row(i));
        grad[(2 * i + 1) * dim..(2 * i + 2) * dim].copy_from_slice(out.grad_moving.row(i));
    }
    Ok((out.loss, Tensor::new(emb.shape().to_vec(), grad)?))
}
