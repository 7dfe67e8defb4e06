//! Python bindings: images, affine transforms, mutual information,
//! registration, the synthetic atlas, embeddings and evaluation metrics.

use std::path::PathBuf;

use atlas_match::identify::{build_index, rank_embedding, EmbeddingIndex, Embedder as CoreEmbedder, EvalReport};
use atlas_match::imagekit::{clahe, load_pgm, save_pgm, warp_affine};
use atlas_match::register::{self, PyramidConfig, PyramidKind};
use atlas_match::synthatlas::{generate_atlas, AtlasSpec};
use atlas_match::tensornet::load_checkpoint;
use atlas_match::{AffineTransform, ClaheConfig, Error, GrayImage};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::IoFailure { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Grayscale image with intensities in [0, 1], row-major.
#[pyclass(name = "Image", module = "atlas_match_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: GrayImage,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f32>) -> PyResult<Self> {
        GrayImage::new(width, height, pixels).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, value: f32) -> PyResult<Self> {
        GrayImage::filled(width, height, value).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_pgm(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_pgm(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn pixels(&self) -> Vec<f32> {
        self.inner.pixels().to_vec()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<f32> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("({x}, {y}) outside the image")));
        }
        Ok(self.inner.get(x, y))
    }

    /// Inverse-mapped bilinear warp with zero padding.
    #[pyo3(signature = (transform, width=None, height=None))]
    fn warp(&self, transform: &PyAffine, width: Option<usize>, height: Option<usize>) -> PyResult<Self> {
        let w = width.unwrap_or(self.inner.width());
        let h = height.unwrap_or(self.inner.height());
        warp_affine(&self.inner, &transform.inner, w, h).map(|inner| Self { inner }).map_err(to_py)
    }

    #[pyo3(signature = (tiles=8, clip_limit=2.0, bins=256))]
    fn clahe(&self, tiles: usize, clip_limit: f64, bins: usize) -> PyResult<Self> {
        let cfg = ClaheConfig {
            tile_grid: (tiles, tiles),
            clip_limit,
            bins,
        };
        clahe(&self.inner, &cfg).map(|inner| Self { inner }).map_err(to_py)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// 2x2 linear part plus a translation given as a fraction of the image size,
/// acting about the image center.
#[pyclass(name = "Affine", module = "atlas_match_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyAffine {
    inner: AffineTransform,
}

#[pymethods]
impl PyAffine {
    #[new]
    #[pyo3(signature = (a11=1.0, a12=0.0, a21=0.0, a22=1.0, tx=0.0, ty=0.0))]
    fn new(a11: f64, a12: f64, a21: f64, a22: f64, tx: f64, ty: f64) -> PyResult<Self> {
        AffineTransform::new(a11, a12, a21, a22, tx, ty)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (rotation_deg=0.0, scale=1.0, tx=0.0, ty=0.0))]
    fn similarity(rotation_deg: f64, scale: f64, tx: f64, ty: f64) -> Self {
        Self {
            inner: AffineTransform::from_similarity(rotation_deg, scale, tx, ty),
        }
    }

    fn params(&self) -> [f64; 6] {
        self.inner.to_array()
    }

    fn det(&self) -> f64 {
        self.inner.det()
    }

    fn is_identity(&self) -> bool {
        self.inner.is_identity()
    }

    /// Mean distance in pixels between the corner images under both maps.
    fn corner_error(&self, other: &PyAffine, width: usize, height: usize) -> f64 {
        self.inner.corner_error(&other.inner, width, height)
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d, tx, ty] = self.inner.to_array();
        format!("Affine([[{a}, {b}, {tx}], [{c}, {d}, {ty}]])")
    }
}

#[pyfunction]
#[pyo3(signature = (fixed, moving, bins=32))]
fn mutual_information(fixed: &PyImage, moving: &PyImage, bins: usize) -> PyResult<f64> {
    register::mutual_information(&fixed.inner, &moving.inner, bins, None).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (image, bins=32))]
fn image_entropy(image: &PyImage, bins: usize) -> PyResult<f64> {
    register::image_entropy(&image.inner, bins).map_err(to_py)
}

fn pyramid(resolutions: usize, iterations: usize, kind: &str, bins: usize) -> PyResult<PyramidConfig> {
    Ok(PyramidConfig {
        num_resolutions: resolutions,
        max_iterations: iterations,
        kind: kind.parse::<PyramidKind>().map_err(to_py)?,
        bins,
        ..Default::default()
    })
}

/// Returns `(transform, final_mi)` mapping `moving` onto `fixed`.
#[pyfunction]
#[pyo3(signature = (fixed, moving, resolutions=3, iterations=1000, kind="recursive", bins=32, seed=0))]
#[allow(clippy::too_many_arguments)]
fn register_affine(
    py: Python<'_>,
    fixed: &PyImage,
    moving: &PyImage,
    resolutions: usize,
    iterations: usize,
    kind: &str,
    bins: usize,
    seed: u64,
) -> PyResult<(PyAffine, f64)> {
    let cfg = pyramid(resolutions, iterations, kind, bins)?;
    let (f, m) = (fixed.inner.clone(), moving.inner.clone());
    let r = py
        .detach(move || register::register_affine(&f, &m, &cfg, seed))
        .map_err(to_py)?;
    Ok((PyAffine { inner: r.transform }, r.final_mi))
}

#[pyfunction]
#[pyo3(signature = (num_plates, size=128, seed=0, morph_rate=1.0))]
fn generate_plates(num_plates: usize, size: usize, seed: u64, morph_rate: f64) -> PyResult<Vec<PyImage>> {
    let spec = AtlasSpec {
        num_plates,
        image_size: size,
        seed,
        morph_rate,
    };
    Ok(generate_atlas(&spec)
        .map_err(to_py)?
        .into_iter()
        .map(|inner| PyImage { inner })
        .collect())
}

/// MAE and TOP-n accuracies for 0-based ground-truth ranks.
#[pyfunction]
fn evaluate_ranks<'py>(py: Python<'py>, ranks: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let r = EvalReport::from_ranks(&ranks, 0.0).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("n", r.n)?;
    d.set_item("mae", r.mae)?;
    d.set_item("top1", r.top1)?;
    d.set_item("top3", r.top3)?;
    d.set_item("top5", r.top5)?;
    d.set_item("top10", r.top10)?;
    Ok(d)
}

/// Trained embedding network plus an index over atlas plates.
#[pyclass(name = "Identifier", module = "atlas_match_py", frozen, skip_from_py_object)]
pub struct PyIdentifier {
    embedder: CoreEmbedder,
    index: EmbeddingIndex,
}

#[pymethods]
impl PyIdentifier {
    #[new]
    fn new(checkpoint: PathBuf, plates: Vec<PyRef<'_, PyImage>>) -> PyResult<Self> {
        let net = load_checkpoint(checkpoint, None)
            .and_then(|c| c.into_network())
            .map_err(to_py)?;
        let embedder = CoreEmbedder::new(net, None);
        let images: Vec<GrayImage> = plates.iter().map(|p| p.inner.clone()).collect();
        let index = build_index(&images, &embedder).map_err(to_py)?;
        Ok(Self { embedder, index })
    }

    #[getter]
    fn checkpoint_id(&self) -> &str {
        self.index.checkpoint_id()
    }

    fn embed(&self, image: &PyImage) -> PyResult<Vec<f32>> {
        self.embedder.embed_one(&image.inner).map_err(to_py)
    }

    /// Plate indices nearest first, with their distances.
    fn rank(&self, image: &PyImage) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let h = self.embedder.embed_one(&image.inner).map_err(to_py)?;
        let r = rank_embedding(&self.index, "query", &h, None).map_err(to_py)?;
        Ok((r.ranked, r.scores))
    }
}

#[pymodule]
pub fn atlas_match_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyAffine>()?;
    m.add_class::<PyIdentifier>()?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(image_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(register_affine, m)?)?;
    m.add_function(wrap_pyfunction!(generate_plates, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_ranks, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
