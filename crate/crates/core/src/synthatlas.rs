//! Deterministic synthetic atlas and partial-slice generator.
//!
//! Plates are rendered from a seeded "anatomy": an elliptical section outline
//! whose radii and lobes drift with plate position, plus internal structures
//! that move, grow and fade in and out along the plate axis. Nearby plates are
//! therefore similar and similarity decays with index distance. Slices are
//! derived from plates by neighbor blending, an affine warp, border cropping
//! and pepper noise.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagekit::{save_pgm, warp_affine, AffineTransform, GrayImage};
use crate::rng::{derive_seed, rng_for, Rng};

pub const MANIFEST_MAGIC: &str = "#atlas-match-manifest v1";

const ANATOMY_STREAM: u64 = 0xA7A5;
const GRAIN_STREAM: u64 = 0x6A41_0000;
const SLICE_STREAM: u64 = 0x511C_0000;
const PLATE_PICK_STREAM: u64 = 0x91C0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasSpec {
    pub num_plates: usize,
    pub image_size: usize,
    pub seed: u64,
    /// How far the anatomy travels across the whole atlas; larger values make
    /// neighboring plates more distinct.
    pub morph_rate: f64,
}

impl Default for AtlasSpec {
    fn default() -> Self {
        Self {
            num_plates: 132,
            image_size: 128,
            seed: 0,
            morph_rate: 1.0,
        }
    }
}

impl AtlasSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_plates < 2 {
            return Err(Error::InvalidConfig("atlas needs at least 2 plates".into()));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidConfig(format!(
                "image size {} < 32",
                self.image_size
            )));
        }
        if !(self.morph_rate > 0.0 && self.morph_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "morph rate {} must be positive",
                self.morph_rate
            )));
        }
        Ok(())
    }
}

struct Structure {
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    growth: f64,
    aspect: f64,
    amplitude: f64,
    peak: f64,
    width: f64,
}

struct Anatomy {
    rx: (f64, f64),
    ry: (f64, f64),
    lobes: Vec<(f64, f64, f64)>,
    base: (f64, f64),
    structures: Vec<Structure>,
    texture: Vec<(f64, f64, f64, f64)>,
}

impl Anatomy {
    fn sample(seed: u64) -> Self {
        let mut rng = rng_for(seed, ANATOMY_STREAM);
        let rx0 = rng.random_range(0.62..0.72);
        let ry0 = rng.random_range(0.74..0.84);
        let lobes = (2..=5)
            .map(|k| {
                (
                    k as f64,
                    rng.random_range(-0.06..0.06),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let structures = (0..14)
            .map(|_| {
                let sign = if rng.random::<f64>() < 0.6 { 1.0 } else { -1.0 };
                Structure {
                    x0: rng.random_range(-0.45..0.45),
                    y0: rng.random_range(-0.55..0.55),
                    vx: rng.random_range(-0.35..0.35),
                    vy: rng.random_range(-0.35..0.35),
                    radius: rng.random_range(0.07..0.2),
                    growth: rng.random_range(-0.06..0.08),
                    aspect: rng.random_range(0.6..1.6),
                    amplitude: sign * rng.random_range(0.25..0.5),
                    peak: rng.random_range(-0.1..1.1),
                    width: rng.random_range(0.18..0.45),
                }
            })
            .collect();
        let texture = (0..4)
            .map(|_| {
                (
                    rng.random_range(4.0..11.0),
                    rng.random_range(4.0..11.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.01..0.025),
                )
            })
            .collect();
        Self {
            rx: (rx0, rng.random_range(-0.15..0.15)),
            ry: (ry0, rng.random_range(-0.2..0.1)),
            lobes,
            base: (rng.random_range(0.35..0.45), rng.random_range(-0.1..0.1)),
            structures,
            texture,
        }
    }

    /// Intensity at normalized coordinates `(x, y)` in `[-1, 1]` for plate
    /// position `u` along the morph trajectory.
    fn render(&self, x: f64, y: f64, u: f64) -> f64 {
        let rx = self.rx.0 + self.rx.1 * u;
        let ry = self.ry.0 + self.ry.1 * u;
        let theta = y.atan2(x);
        let lobe: f64 = self
            .lobes
            .iter()
            .map(|&(k, amp, phase)| amp * (0.5 + u) * (k * theta + phase + 0.8 * u).cos())
            .sum();
        let r = ((x / rx).powi(2) + (y / ry).powi(2)).sqrt();
        // soft tissue mask
        let tissue = 1.0 / (1.0 + ((r - (1.0 + lobe)) * 40.0).exp());
        if tissue < 1e-4 {
            return 0.0;
        }
        let mut v = self.base.0 + self.base.1 * u;
        for s in &self.structures {
            let presence = (-((u - s.peak) / s.width).powi(2)).exp();
            if presence < 1e-3 {
                continue;
            }
            let cx = s.x0 + s.vx * u;
            let cy = s.y0 + s.vy * u;
            let rad = (s.radius + s.growth * u).max(0.03);
            let d2 = ((x - cx) / (rad * s.aspect)).powi(2) + ((y - cy) / (rad / s.aspect)).powi(2);
            // flat-topped blob with a soft rim
            let blob = 1.0 / (1.0 + ((d2.sqrt() - 1.0) * 8.0).exp());
            v += s.amplitude * presence * blob;
        }
        for &(fx, fy, phase, amp) in &self.texture {
            v += amp * (fx * x + phase).sin() * (fy * y - phase).cos();
        }
        (v.clamp(0.02, 1.0)) * tissue
    }
}

/// Renders the ordered plate list. Pure function of `spec`.
pub fn generate_atlas(spec: &AtlasSpec) -> Result<Vec<GrayImage>> {
    spec.validate()?;
    let anatomy = Anatomy::sample(spec.seed);
    let n = spec.image_size;
    let half = (n as f64 - 1.0) / 2.0;
    (0..spec.num_plates)
        .map(|i| {
            let u = spec.morph_rate * i as f64 / (spec.num_plates - 1) as f64;
            let mut grain = rng_for(spec.seed, GRAIN_STREAM + i as u64);
            let mut px = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let xn = (x as f64 - half) / half;
                    let yn = (y as f64 - half) / half;
                    let v = anatomy.render(xn, yn, u);
                    let g = if v > 0.0 {
                        grain.random_range(-0.015..0.015)
                    } else {
                        0.0
                    };
                    px.push((v + g).clamp(0.0, 1.0) as f32);
                }
            }
            GrayImage::new(n, n, px)
        })
        .collect()
}

/// Augmentation applied to a plate to simulate an acquired partial slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceAugmentation {
    pub affine: AffineTransform,
    /// Fraction of each border zeroed, in `[0, 0.3]`.
    pub crop_fraction: f64,
    /// Fraction of pixels set to zero, in `[0, 0.05]`.
    pub pepper_density: f64,
    /// Weight of the adjacent plate, in `[0, 0.5]`.
    pub neighbor_blend: f64,
}

impl Default for SliceAugmentation {
    fn default() -> Self {
        Self {
            affine: AffineTransform::IDENTITY,
            crop_fraction: 0.0,
            pepper_density: 0.0,
            neighbor_blend: 0.0,
        }
    }
}

const RANGE_EPS: f64 = 1e-9;

impl SliceAugmentation {
    pub fn validate(&self) -> Result<()> {
        let a = &self.affine;
        let det = a.det();
        let scale = det.abs().sqrt();
        let rotation = a.a21.atan2(a.a11).to_degrees().abs();
        let checks = [
            (det > 0.0, "affine must preserve orientation"),
            (
                (0.85 - RANGE_EPS..=1.15 + RANGE_EPS).contains(&scale),
                "affine scale outside [0.85, 1.15]",
            ),
            (rotation <= 15.0 + RANGE_EPS, "rotation beyond 15 degrees"),
            (
                a.tx.abs() <= 0.1 + RANGE_EPS && a.ty.abs() <= 0.1 + RANGE_EPS,
                "translation beyond 0.1",
            ),
            (
                (0.0..=0.3).contains(&self.crop_fraction),
                "crop fraction outside [0, 0.3]",
            ),
            (
                (0.0..=0.05).contains(&self.pepper_density),
                "pepper density outside [0, 0.05]",
            ),
            (
                (0.0..=0.5).contains(&self.neighbor_blend),
                "neighbor blend outside [0, 0.5]",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).into())),
            None => Ok(()),
        }
    }

    /// `key=value` pairs joined by `;` as stored in the manifest.
    pub fn to_record(&self) -> String {
        let a = &self.affine;
        format!(
            "a11={};a12={};a21={};a22={};tx={};ty={};crop={};pepper={};blend={}",
            a.a11,
            a.a12,
            a.a21,
            a.a22,
            a.tx,
            a.ty,
            self.crop_fraction,
            self.pepper_density,
            self.neighbor_blend
        )
    }
}

/// Upper bounds for randomly drawn augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRanges {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_translation: f64,
    pub max_crop: f64,
    pub max_pepper: f64,
    pub max_blend: f64,
}

impl Default for AugmentationRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale: (0.85, 1.15),
            max_translation: 0.1,
            max_crop: 0.3,
            max_pepper: 0.05,
            max_blend: 0.5,
        }
    }
}

impl AugmentationRanges {
    /// Ranges with every component disabled.
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale: (1.0, 1.0),
            max_translation: 0.0,
            max_crop: 0.0,
            max_pepper: 0.0,
            max_blend: 0.0,
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> SliceAugmentation {
        let mut uniform = |lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let rot = uniform(-self.max_rotation_deg, self.max_rotation_deg);
        let scale = uniform(self.scale.0, self.scale.1);
        let tx = uniform(-self.max_translation, self.max_translation);
        let ty = uniform(-self.max_translation, self.max_translation);
        SliceAugmentation {
            affine: AffineTransform::from_similarity(rot, scale, tx, ty),
            crop_fraction: uniform(0.0, self.max_crop),
            pepper_density: uniform(0.0, self.max_pepper),
            neighbor_blend: uniform(0.0, self.max_blend),
        }
    }
}

/// Builds one slice from plate `plate_idx`.
///
/// Random draws, in order, from `ChaCha8Rng::seed_from_u64(seed)`: one `f64`
/// choosing the blend neighbor (below 0.5 picks the previous plate), then one
/// `f64` per output pixel in row-major order; a pixel is peppered when its
/// draw is below `pepper_density`.
pub fn synthesize_slice(
    atlas: &[GrayImage],
    plate_idx: usize,
    aug: &SliceAugmentation,
    seed: u64,
) -> Result<GrayImage> {
    let plate = atlas.get(plate_idx).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "plate {plate_idx} outside atlas of {}",
            atlas.len()
        ))
    })?;
    aug.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let go_back = rng.random::<f64>() < 0.5;
    let mut img = plate.clone();
    if aug.neighbor_blend > 0.0 && atlas.len() > 1 {
        let neighbor = match (go_back, plate_idx) {
            (true, 0) => 1,
            (true, i) => i - 1,
            (false, i) if i + 1 == atlas.len() => i - 1,
            (false, i) => i + 1,
        };
        img = img.blend(&atlas[neighbor], aug.neighbor_blend as f32)?;
    }
    if !aug.affine.is_identity() {
        img = warp_affine(&img, &aug.affine, img.width(), img.height())?;
    }
    if aug.crop_fraction > 0.0 {
        img = img.zero_border(aug.crop_fraction);
    }
    let density = aug.pepper_density;
    for p in img.pixels_mut() {
        if rng.random::<f64>() < density {
            *p = 0.0;
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val1,
    Val2,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val1, Split::Val2, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val1 => "val1",
            Split::Val2 => "val2",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub plate: usize,
    pub split: Split,
    pub augmentation: SliceAugmentation,
    pub seed: u64,
}

/// Dataset index; serialized as a tab-separated text file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub atlas: AtlasSpec,
    /// Directory of plate images relative to the manifest.
    pub atlas_dir: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn plate_path(&self, idx: usize) -> String {
        format!("{}/plate_{idx:03}.pgm", self.atlas_dir)
    }

    pub fn to_tsv(&self) -> String {
        let a = &self.atlas;
        let mut out = format!(
            "{MANIFEST_MAGIC}\tplates={}\tsize={}\tseed={}\tmorph_rate={}\tatlas={}\n",
            a.num_plates, a.image_size, a.seed, a.morph_rate, self.atlas_dir
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{};seed={}\n",
                e.path,
                e.plate,
                e.split,
                e.augmentation.to_record(),
                e.seed
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::MalformedManifest {
            line: 1,
            reason: "empty file".into(),
        })?;
        if !header.starts_with(MANIFEST_MAGIC) {
            return Err(Error::MalformedManifest {
                line: 1,
                reason: format!("header must start with {MANIFEST_MAGIC:?}"),
            });
        }
        let bad = |line: usize, reason: String| Error::MalformedManifest {
            line: line + 1,
            reason,
        };
        let mut atlas = AtlasSpec::default();
        let mut atlas_dir = "atlas".to_string();
        for field in header[MANIFEST_MAGIC.len()..].split('\t').filter(|f| !f.is_empty()) {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| bad(0, format!("header field {field:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(0, format!("{k}: {e}")));
            match k {
                "plates" => atlas.num_plates = num(v)? as usize,
                "size" => atlas.image_size = num(v)? as usize,
                "seed" => atlas.seed = v.parse().map_err(|e| bad(0, format!("seed: {e}")))?,
                "morph_rate" => atlas.morph_rate = num(v)?,
                "atlas" => atlas_dir = v.to_string(),
                _ => {}
            }
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(n, format!("expected 4 columns, found {}", cols.len())));
            }
            let plate: usize = cols[1]
                .parse()
                .map_err(|e| bad(n, format!("plate index: {e}")))?;
            if plate >= atlas.num_plates {
                return Err(bad(n, format!("plate {plate} >= {}", atlas.num_plates)));
            }
            let split: Split = cols[2].parse().map_err(|e: Error| bad(n, e.to_string()))?;
            let mut p = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
            let mut aug = SliceAugmentation::default();
            let mut seed = 0u64;
            for kv in cols[3].split(';').filter(|s| !s.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(n, format!("augmentation field {kv:?}")))?;
                if k == "seed" {
                    seed = v.parse().map_err(|e| bad(n, format!("seed: {e}")))?;
                    continue;
                }
                let x: f64 = v.parse().map_err(|e| bad(n, format!("{k}: {e}")))?;
                match k {
                    "a11" => p[0] = x,
                    "a12" => p[1] = x,
                    "a21" => p[2] = x,
                    "a22" => p[3] = x,
                    "tx" => p[4] = x,
                    "ty" => p[5] = x,
                    "crop" => aug.crop_fraction = x,
                    "pepper" => aug.pepper_density = x,
                    "blend" => aug.neighbor_blend = x,
                    _ => {}
                }
            }
            aug.affine = AffineTransform::from_array(p).map_err(|e| bad(n, e.to_string()))?;
            entries.push(ManifestEntry {
                path: cols[0].to_string(),
                plate,
                split,
                augmentation: aug,
                seed,
            });
        }
        Ok(Self {
            atlas,
            atlas_dir,
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Entry counts per split, in `train, val1, val2, test` order.
pub type SplitCounts = [usize; 4];

/// Plans the dataset without touching the filesystem. Plates for each split
/// are stratified over the atlas (one jittered draw per equal-width stratum)
/// so every split covers the whole plate range.
pub fn plan_dataset(
    spec: &AtlasSpec,
    counts: SplitCounts,
    ranges: &AugmentationRanges,
    seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut entries = Vec::new();
    for (split, &n) in Split::ALL.iter().zip(counts.iter()) {
        let mut rng = rng_for(seed, PLATE_PICK_STREAM + *split as u64);
        for k in 0..n {
            let u: f64 = rng.random();
            let plate = (((k as f64 + u) * spec.num_plates as f64 / n as f64) as usize)
                .min(spec.num_plates - 1);
            let slice_seed = derive_seed(seed, SLICE_STREAM + entries.len() as u64);
            let mut aug_rng = rng_for(slice_seed, 1);
            entries.push(ManifestEntry {
                path: format!("slices/{split}_{k:03}.pgm"),
                plate,
                split: *split,
                augmentation: ranges.sample(&mut aug_rng),
                seed: slice_seed,
            });
        }
    }
    Ok(DatasetManifest {
        atlas: *spec,
        atlas_dir: "atlas".into(),
        entries,
    })
}

/// Generates the atlas and all slices, writing PGM files and `manifest.tsv`
/// under `out_dir`.
pub fn build_dataset(
    spec: &AtlasSpec,
    counts: SplitCounts,
    ranges: &AugmentationRanges,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    let manifest = plan_dataset(spec, counts, ranges, seed)?;
    let atlas = generate_atlas(spec)?;
    for dir in [out.join(&manifest.atlas_dir), out.join("slices")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, plate) in atlas.iter().enumerate() {
        save_pgm(plate, out.join(manifest.plate_path(i)))?;
    }
    for e in &manifest.entries {
        let img = synthesize_slice(&atlas, e.plate, &e.augmentation, e.seed)?;
        save_pgm(&img, out.join(&e.path))?;
    }
    let path = out.join("manifest.tsv");
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
