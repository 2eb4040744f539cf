//! Exact k-nearest-neighbour classification in embedding space.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::aggregate::TileScores;
use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Neighbour count used throughout the pipeline.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row of the training embedding.
    pub index: usize,
    /// Euclidean distance to the query.
    pub distance: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    pub label: usize,
    pub scores: TileScores,
    /// Nearest first.
    pub neighbors: Vec<Neighbor>,
}

/// Immutable brute-force index over training embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    embeddings: Array2<f32>,
    labels: Vec<usize>,
    k: usize,
}

impl EmbeddingIndex {
    pub fn build(embeddings: ArrayView2<f32>, labels: &[usize], k: usize) -> Result<Self> {
        let n = embeddings.nrows();
        if n != labels.len() {
            return Err(Error::Data(format!("{n} embeddings but {} labels", labels.len())));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if n < k {
            return Err(Error::Size(format!("{n} embeddings cannot support k = {k}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding value".into()));
        }
        Ok(Self {
            embeddings: embeddings.to_owned(),
            labels: labels.to_vec(),
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn classify(&self, query: &[f32]) -> Result<KnnPrediction> {
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim()
            )));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite query".into()));
        }
        let mut dist: Vec<(f64, usize)> = self
            .embeddings
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let d2: f64 = row
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                (d2, i)
            })
            .collect();
        let by_distance_then_index =
            |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, by_distance_then_index);
            dist.truncate(self.k);
        }
        dist.sort_by(by_distance_then_index);
        let neighbors: Vec<Neighbor> = dist
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
                label: self.labels[index],
            })
            .collect();

        let mut counts = [0usize; NUM_CLASSES];
        let mut dist_sum = [0.0f64; NUM_CLASSES];
        for nb in &neighbors {
            counts[nb.label] += 1;
            dist_sum[nb.label] += nb.distance;
        }
        let label = (0..NUM_CLASSES)
            .min_by(|&a, &b| {
                counts[b]
                    .cmp(&counts[a])
                    .then(dist_sum[a].partial_cmp(&dist_sum[b]).unwrap_or(Ordering::Equal))
                    .then(a.cmp(&b))
            })
            .expect("at least one class");
        let k = self.k as f64;
        let scores = TileScores(counts.map(|c| c as f64 / k));
        Ok(KnnPrediction {
            label,
            scores,
            neighbors,
        })
    }
}

/// Writes an embedding dump: header `tile_id,e0..e{d-1},label`, one row per tile.
pub fn write_embeddings(path: &Path, ids: &[String], embeddings: ArrayView2<f32>, labels: &[usize]) -> Result<()> {
    if ids.len() != embeddings.nrows() || ids.len() != labels.len() {
        return Err(Error::Data("embedding dump inputs differ in length".into()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let dim = embeddings.ncols();
    let header: Vec<String> = std::iter::once("tile_id".to_string())
        .chain((0..dim).map(|i| format!("e{i}")))
        .chain(std::iter::once("label".to_string()))
        .collect();
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for ((id, row), label) in ids.iter().zip(embeddings.rows()).zip(labels) {
        write!(w, "{id}").map_err(io)?;
        for v in row {
            // `{:?}` prints the shortest representation that round-trips.
            write!(w, ",{v:?}").map_err(io)?;
        }
        writeln!(w, ",{label}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub type EmbeddingDump = (Vec<String>, Array2<f32>, Vec<usize>);

pub fn read_embeddings(path: &Path) -> Result<EmbeddingDump> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let dim = rdr.headers().map_err(|e| Error::csv(path, e))?.len().saturating_sub(2);
    let (mut ids, mut data, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != dim + 2 {
            return Err(Error::Data(format!("{}: ragged embedding row", path.display())));
        }
        ids.push(rec[0].to_string());
        for v in rec.iter().skip(1).take(dim) {
            data.push(v.parse::<f32>().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        }
        labels.push(
            rec[dim + 1]
                .parse()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
        );
    }
    let n = ids.len();
    let arr = Array2::from_shape_vec((n, dim), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((ids, arr, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn size_boundaries() {
        let e = Array2::<f32>::zeros((5, 3));
        assert!(EmbeddingIndex::build(e.view(), &[0, 1, 2, 3, 0], 5).is_ok());
        let e4 = Array2::<f32>::zeros((4, 3));
        assert!(matches!(
            EmbeddingIndex::build(e4.view(), &[0, 1, 2, 3], 5),
            Err(Error::Size(_))
        ));
        let mut bad = Array2::<f32>::zeros((5, 3));
        bad[[2, 1]] = f32::NAN;
        assert!(matches!(
            EmbeddingIndex::build(bad.view(), &[0; 5], 5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn frequency_scores() {
        // Five points on a line; query at the origin sees all of them.
        let e = array![[1.0f32], [2.0], [3.0], [4.0], [5.0], [50.0]];
        let idx = EmbeddingIndex::build(e.view(), &[0, 0, 1, 2, 0, 3], 5).unwrap();
        let p = idx.classify(&[0.0]).unwrap();
        assert_eq!(p.label, 0);
        assert_eq!(p.scores.0, [0.6, 0.2, 0.2, 0.0]);
        let order: Vec<usize> = p.neighbors.iter().map(|n| n.index).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn exact_match_is_first_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Array2::from_shape_simple_fn((20, 8), || rng.random_range(-1.0f32..1.0));
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let idx = EmbeddingIndex::build(e.view(), &labels, 1).unwrap();
        let q: Vec<f32> = e.row(13).to_vec();
        let p = idx.classify(&q).unwrap();
        assert_eq!(p.neighbors[0].index, 13);
        assert_eq!(p.neighbors[0].distance, 0.0);
        assert_eq!(p.label, labels[13]);
    }

    #[test]
    fn label_ties_prefer_closer_class_then_lower_id() {
        // Two neighbours each of class 2 and 1 plus one of class 3.
        let e = array![[1.0f32], [-1.5], [2.0], [-2.0], [3.0]];
        let idx = EmbeddingIndex::build(e.view(), &[2, 1, 2, 1, 3], 5).unwrap();
        // class 2 distances 1+2 = 3, class 1 distances 1.5+2 = 3.5
        assert_eq!(idx.classify(&[0.0]).unwrap().label, 2);
        let sym = array![[1.0f32], [-1.0], [2.0], [-2.0], [3.0]];
        let idx = EmbeddingIndex::build(sym.view(), &[2, 1, 2, 1, 3], 5).unwrap();
        assert_eq!(idx.classify(&[0.0]).unwrap().label, 1);
    }

    #[test]
    fn equal_distances_break_on_training_index() {
        let e = array![[1.0f32], [-1.0], [1.0], [-1.0], [1.0], [-1.0]];
        let idx = EmbeddingIndex::build(e.view(), &[0, 1, 2, 3, 0, 1], 3).unwrap();
        let p = idx.classify(&[0.0]).unwrap();
        let order: Vec<usize> = p.neighbors.iter().map(|n| n.index).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn embedding_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let e = array![[0.1f32, -2.5e-7, 3.0], [1.0 / 3.0, 0.0, -1.0]];
        let ids = vec!["a_r00c00".to_string(), "b_r01c02".to_string()];
        write_embeddings(&path, &ids, e.view(), &[3, 0]).unwrap();
        let (ids2, e2, l2) = read_embeddings(&path).unwrap();
        assert_eq!(ids2, ids);
        assert_eq!(e2, e);
        assert_eq!(l2, vec![3, 0]);
    }
}
