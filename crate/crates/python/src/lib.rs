//! Python bindings. Images are passed as nested lists of floats in `[0, 1]`,
//! row-major.

use anyhow::{bail, Result};
use pyo3::prelude::*;

use tilevote::aggregate::{self, Reduction, TileScores, TileVote, VoteMethod};
use tilevote::datasets::{generate_image, SynthConfig};
use tilevote::knn::EmbeddingIndex;
use tilevote::model::{batch_from_inputs, prepare_input, ModelConfig, Network};
use tilevote::saliency::{cam_for_tile, CamMethod};
use tilevote::tiling::{self, decode_tile_id, encode_tile_id};
use tilevote::{GrayImage, GridSpec};

type Rows = Vec<Vec<f32>>;

fn to_image(rows: Rows) -> Result<GrayImage> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        bail!("image rows differ in length");
    }
    Ok(GrayImage::new(h, w, rows.into_iter().flatten().collect())?)
}

fn to_rows(img: &GrayImage) -> Rows {
    (0..img.height()).map(|y| img.row(y).to_vec()).collect()
}

fn scores(raw: Vec<[f64; 4]>) -> Result<Vec<TileScores>> {
    raw.into_iter()
        .map(|s| {
            let s = TileScores(s);
            s.validate()?;
            Ok(s)
        })
        .collect()
}

/// `(row, col, x0, y0, width, height)` for every tile, row-major.
#[pyfunction]
fn compute_grid(height: usize, width: usize, rows: usize, cols: usize) -> Result<Vec<(usize, usize, usize, usize, usize, usize)>> {
    Ok(tiling::compute_grid(height, width, GridSpec::new(rows, cols)?)?
        .into_iter()
        .map(|r| (r.row_index, r.col_index, r.x0, r.y0, r.width, r.height))
        .collect())
}

/// Tiles of an image as `(tile_id, pixels)` pairs.
#[pyfunction]
#[pyo3(signature = (image, rows, cols, source_id = "image"))]
fn tile_image(image: Rows, rows: usize, cols: usize, source_id: &str) -> Result<Vec<(String, Rows)>> {
    let img = to_image(image)?;
    Ok(tiling::tile_image(&img, GridSpec::new(rows, cols)?, source_id, 0)?
        .into_iter()
        .map(|(rec, px)| (rec.tile_id, to_rows(&px)))
        .collect())
}

#[pyfunction]
fn tile_id(source_id: &str, row: usize, col: usize) -> String {
    encode_tile_id(source_id, row, col)
}

#[pyfunction]
fn parse_tile_id(tile_id: &str) -> Result<(String, usize, usize)> {
    Ok(decode_tile_id(tile_id)?)
}

#[pyfunction]
fn resize_bilinear(image: Rows, height: usize, width: usize) -> Result<Rows> {
    Ok(to_rows(&tiling::resize_bilinear(&to_image(image)?, height, width)?))
}

/// Plurality vote over tile labels; ties go to the larger summed score.
#[pyfunction]
fn majority_vote(labels: Vec<usize>, tile_scores: Vec<[f64; 4]>) -> Result<usize> {
    if labels.len() != tile_scores.len() {
        bail!("{} labels for {} score vectors", labels.len(), tile_scores.len());
    }
    let votes: Vec<TileVote> = labels
        .into_iter()
        .zip(scores(tile_scores)?)
        .map(|(label, scores)| TileVote { label, scores })
        .collect();
    Ok(aggregate::majority_vote("py", &votes)?.predicted)
}

#[pyfunction]
#[pyo3(signature = (tile_scores, reduction = "sum"))]
fn probability_vote(tile_scores: Vec<[f64; 4]>, reduction: &str) -> Result<usize> {
    let r = match reduction {
        "sum" => Reduction::Sum,
        "mean" => Reduction::Mean,
        other => bail!("reduction must be sum or mean, got {other:?}"),
    };
    Ok(aggregate::probability_vote("py", &scores(tile_scores)?, r)?.predicted)
}

/// Accuracy and macro precision/recall/F1 as a dict, plus the confusion matrix.
#[pyfunction]
fn compute_metrics(py: Python<'_>, predicted: Vec<usize>, truth: Vec<usize>) -> Result<Py<PyAny>> {
    let m = aggregate::compute_metrics(&predicted, &truth)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("macro_precision", m.macro_precision)?;
    d.set_item("macro_recall", m.macro_recall)?;
    d.set_item("macro_f1", m.macro_f1)?;
    d.set_item("confusion", m.confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
#[pyo3(signature = (p_tile, tiles, images, method = "majority", seed = 0))]
fn simulate_vote_accuracy(p_tile: f64, tiles: usize, images: usize, method: &str, seed: u64) -> Result<f64> {
    let m = match method {
        "majority" => VoteMethod::Majority,
        "probability" => VoteMethod::Probability,
        other => bail!("method must be majority or probability, got {other:?}"),
    };
    Ok(aggregate::simulate_vote_accuracy(p_tile, tiles, images, m, seed)?)
}

/// One image from the synthetic generator with default class textures.
#[pyfunction]
#[pyo3(signature = (class_id, index, height = 600, width = 800, seed = 0))]
fn synthetic_image(class_id: usize, index: usize, height: usize, width: usize, seed: u64) -> Result<Rows> {
    if class_id >= tilevote::NUM_CLASSES {
        bail!("class {class_id} out of range");
    }
    let cfg = SynthConfig {
        height,
        width,
        seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    Ok(to_rows(&generate_image(&cfg, class_id, index)))
}

/// Exact kNN classifier over stored embeddings.
#[pyclass(name = "KnnIndex", frozen)]
struct PyKnnIndex(EmbeddingIndex);

#[pymethods]
impl PyKnnIndex {
    #[new]
    #[pyo3(signature = (embeddings, labels, k = 5))]
    fn new(embeddings: Vec<Vec<f32>>, labels: Vec<usize>, k: usize) -> Result<Self> {
        let dim = embeddings.first().map_or(0, Vec::len);
        if embeddings.iter().any(|e| e.len() != dim) {
            bail!("embeddings differ in length");
        }
        let n = embeddings.len();
        let arr = ndarray::Array2::from_shape_vec((n, dim), embeddings.into_iter().flatten().collect())?;
        Ok(Self(EmbeddingIndex::build(arr.view(), &labels, k)?))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `(label, scores, [(index, distance, label), ...])`
    fn classify(&self, query: Vec<f32>) -> Result<(usize, [f64; 4], Vec<(usize, f64, usize)>)> {
        let p = self.0.classify(&query)?;
        let nbrs = p.neighbors.iter().map(|n| (n.index, n.distance, n.label)).collect();
        Ok((p.label, p.scores.0, nbrs))
    }
}

/// Residual CNN tile classifier.
#[pyclass(name = "Model")]
struct PyModel(Network<f32>);

fn cam_method(name: &str) -> Result<CamMethod> {
    match name {
        "gradcam" => Ok(CamMethod::GradCam),
        "scorecam" => Ok(CamMethod::ScoreCam),
        other => bail!("method must be gradcam or scorecam, got {other:?}"),
    }
}

#[pymethods]
impl PyModel {
    /// Freshly initialised network. `widths` lists the residual stage widths.
    #[new]
    #[pyo3(signature = (input_size = 224, widths = vec![16, 32, 64], stem_kernel = 7, stem_stride = 4, blocks_per_stage = 2, embedding_size = 128, seed = 0))]
    fn new(
        input_size: usize,
        widths: Vec<usize>,
        stem_kernel: usize,
        stem_stride: usize,
        blocks_per_stage: usize,
        embedding_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            input_size,
            stem_kernel,
            stem_stride,
            widths,
            blocks_per_stage,
            embedding_dim: embedding_size,
            num_classes: tilevote::NUM_CLASSES,
        };
        Ok(Self(Network::new(cfg, seed)?))
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> Result<Self> {
        Ok(Self(Network::load_checkpoint(&path, None)?.0))
    }

    fn save(&self, path: std::path::PathBuf) -> Result<()> {
        Ok(self.0.save_checkpoint(&path, &Default::default())?)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.config().input_size
    }

    /// Class probabilities and the embedding of one tile.
    fn predict(&self, tile: Rows) -> Result<(Vec<f32>, Vec<f32>)> {
        let img = to_image(tile)?;
        let size = self.0.config().input_size;
        let x = prepare_input(&img, size, self.0.norm)?;
        let tape = self.0.infer(&batch_from_inputs::<f32>(&[&x], size)?)?;
        Ok((tape.probabilities().row(0).to_vec(), tape.embedding.row(0).to_vec()))
    }

    /// Normalised saliency map at the model input resolution.
    #[pyo3(signature = (tile, class_id, method = "gradcam"))]
    fn saliency(&self, tile: Rows, class_id: usize, method: &str) -> Result<Vec<Vec<f64>>> {
        let map = cam_for_tile(&self.0, &to_image(tile)?, "py", class_id, cam_method(method)?)?;
        Ok(map.upsampled.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

#[pymodule]
#[pyo3(name = "tilevote")]
fn tilevote_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", tilevote::VERSION)?;
    m.add("CLASS_NAMES", tilevote::CLASS_NAMES.to_vec())?;
    m.add_function(wrap_pyfunction!(compute_grid, m)?)?;
    m.add_function(wrap_pyfunction!(tile_image, m)?)?;
    m.add_function(wrap_pyfunction!(tile_id, m)?)?;
    m.add_function(wrap_pyfunction!(parse_tile_id, m)?)?;
    m.add_function(wrap_pyfunction!(resize_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(probability_vote, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_vote_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_image, m)?)?;
    m.add_class::<PyKnnIndex>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
