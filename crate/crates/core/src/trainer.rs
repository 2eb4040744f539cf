//! Supervised training loop with epoch-end validation, early stopping on
//! validation loss and accuracy, and best-checkpoint retention.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_by_source, TilePrediction, TileScores, TileVote, VoteMethod};
use crate::datasets::{FoldAssignment, TileSet};
use crate::error::{Error, Result};
use crate::model::{batch_from_inputs, cross_entropy, CheckpointMeta, InputNorm, Mode, Network, ParamStore, Grads};
use crate::NUM_CLASSES;

/// What drives the validation accuracy used for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValGranularity {
    #[default]
    Tile,
    /// Probability-vote accuracy over validation images.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement in either validation metric before stopping.
    pub early_stopping: usize,
    pub seed: u64,
    pub val_granularity: ValGranularity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 200,
            early_stopping: 20,
            seed: 0,
            val_granularity: ValGranularity::Tile,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.momentum >= 0.0 && self.momentum < 1.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate, momentum or weight decay out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub checkpoint_saved: bool,
    pub wall_time_s: f64,
}

/// Decision taken after one epoch's validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochDecision {
    pub loss_improved: bool,
    pub accuracy_improved: bool,
    /// Either metric improved, so a checkpoint is written.
    pub save: bool,
    /// This epoch's checkpoint becomes the returned best.
    pub new_best: bool,
    pub stop: bool,
}

/// Early stopping plus best-checkpoint selection.
///
/// Improvement is strict (delta 0). Training stops once neither validation
/// loss nor validation accuracy has improved for `patience` consecutive
/// epochs (a patience of 0 behaves like 1). Among saved checkpoints the best
/// has the highest accuracy, then the lowest loss, then the earliest epoch.
#[derive(Debug, Clone)]
pub struct StoppingProtocol {
    patience: usize,
    best_loss: f64,
    best_accuracy: f64,
    stale: usize,
    best: Option<(usize, f64, f64)>,
}

impl StoppingProtocol {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_accuracy: f64::NEG_INFINITY,
            stale: 0,
            best: None,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64, val_accuracy: f64) -> EpochDecision {
        let loss_improved = val_loss < self.best_loss;
        let accuracy_improved = val_accuracy > self.best_accuracy;
        if loss_improved {
            self.best_loss = val_loss;
        }
        if accuracy_improved {
            self.best_accuracy = val_accuracy;
        }
        let save = loss_improved || accuracy_improved;
        self.stale = if save { 0 } else { self.stale + 1 };
        let new_best = save
            && match self.best {
                None => true,
                Some((_, acc, loss)) => val_accuracy > acc || (val_accuracy == acc && val_loss < loss),
            };
        if new_best {
            self.best = Some((epoch, val_accuracy, val_loss));
        }
        EpochDecision {
            loss_improved,
            accuracy_improved,
            save,
            new_best,
            stop: self.stale >= self.patience.max(1),
        }
    }

    /// `(epoch, accuracy, loss)` of the current best checkpoint.
    pub fn best(&self) -> Option<(usize, f64, f64)> {
        self.best
    }
}

/// Replays a validation metric sequence `(loss, accuracy)` per epoch through
/// the protocol. Returns the epoch training stops at (1-based) and the best
/// epoch.
pub fn replay_protocol(metrics: &[(f64, f64)], patience: usize, max_epochs: usize) -> (usize, Option<usize>) {
    let mut p = StoppingProtocol::new(patience);
    let mut last = 0;
    for (i, &(loss, acc)) in metrics.iter().take(max_epochs).enumerate() {
        last = i + 1;
        if p.observe(last, loss, acc).stop {
            break;
        }
    }
    (last, p.best().map(|b| b.0))
}

/// SGD with momentum and decoupled-from-norms L2 weight decay:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Self {
            velocity: store.zeros_like().values,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>, cfg: &TrainConfig) {
        let (lr, mu, wd) = (cfg.learning_rate as f32, cfg.momentum as f32, cfg.weight_decay as f32);
        for ((p, g), v) in store.entries_mut().iter_mut().zip(&grads.values).zip(&mut self.velocity) {
            if !p.kind.trainable() {
                continue;
            }
            let decay = if p.kind.decayed() { wd } else { 0.0 };
            ndarray::Zip::from(&mut p.value).and(g).and(v).for_each(|w, &g, v| {
                *v = mu * *v + g + decay * *w;
                *w -= lr * *v;
            });
        }
    }
}

/// Softmax probabilities and embeddings for every tile, in eval mode.
pub fn infer_tiles(net: &Network<f32>, set: &TileSet) -> Result<(Array2<f32>, Array2<f32>)> {
    const BATCH: usize = 32;
    let cfg = net.config();
    let mut probs = Array2::zeros((set.len(), cfg.num_classes));
    let mut emb = Array2::zeros((set.len(), cfg.embedding_dim));
    for start in (0..set.len()).step_by(BATCH) {
        let end = (start + BATCH).min(set.len());
        let x = normalized_batch(net.norm, set, &(start..end).collect::<Vec<_>>())?;
        let tape = net.infer(&x)?;
        probs.slice_mut(ndarray::s![start..end, ..]).assign(&tape.probabilities());
        emb.slice_mut(ndarray::s![start..end, ..]).assign(&tape.embedding);
    }
    Ok((probs, emb))
}

fn normalized_batch(norm: InputNorm, set: &TileSet, idx: &[usize]) -> Result<ndarray::Array4<f32>> {
    let refs: Vec<&[f32]> = idx.iter().map(|&i| set.inputs[i].as_slice()).collect();
    let mut x = batch_from_inputs::<f32>(&refs, set.input_size)?;
    let (m, s) = (norm.mean as f32, norm.std as f32);
    x.mapv_inplace(|v| (v - m) / s);
    Ok(x)
}

pub fn probs_to_scores(probs: &Array2<f32>) -> Vec<TileScores> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut s = [0.0f64; NUM_CLASSES];
            for (d, &p) in s.iter_mut().zip(r.iter()) {
                *d = p as f64;
            }
            let z: f64 = s.iter().sum();
            TileScores(s.map(|v| v / z))
        })
        .collect()
}

/// Mean cross-entropy and accuracy on a tile set.
pub fn validate(net: &Network<f32>, set: &TileSet, granularity: ValGranularity) -> Result<(f64, f64)> {
    let (probs, _) = infer_tiles(net, set)?;
    let labels = set.labels();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let scores = probs_to_scores(&probs);
    for (s, &y) in scores.iter().zip(&labels) {
        loss -= s.0[y].max(1e-12).ln();
        correct += (s.argmax() == y) as usize;
    }
    let n = set.len() as f64;
    let accuracy = match granularity {
        ValGranularity::Tile => correct as f64 / n,
        ValGranularity::Image => {
            let tiles: Vec<TilePrediction> = set
                .records
                .iter()
                .zip(&scores)
                .map(|(r, s)| TilePrediction {
                    source_id: r.source_id.clone(),
                    true_class: r.label,
                    vote: TileVote { label: s.argmax(), scores: *s },
                })
                .collect();
            let images = aggregate_by_source(&tiles, VoteMethod::Probability)?;
            images.iter().filter(|(p, t)| p.predicted == *t).count() as f64 / images.len() as f64
        }
    };
    Ok((loss / n, accuracy))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Network<f32>,
    pub best_meta: CheckpointMeta,
    pub logs: Vec<EpochLog>,
}

/// Trains `net` and returns the best checkpoint by validation accuracy.
///
/// The input normalisation is fitted on the training tiles. When
/// `checkpoint_path` is set, a checkpoint is written there every time either
/// validation metric improves; on return the file holds the best weights.
pub fn train(
    mut net: Network<f32>,
    train_set: &TileSet,
    val_set: &TileSet,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if let Some(&bad) = train_set.labels().iter().chain(&val_set.labels()).find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Data(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    net.norm = train_set.fit_norm();
    let mut opt = Sgd::new(net.params());
    let mut protocol = StoppingProtocol::new(cfg.early_stopping);
    let mut logs = Vec::new();
    let mut best: Option<(Network<f32>, CheckpointMeta)> = None;
    let mut last_written = 0;
    let labels = train_set.labels();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 * 0x9E37_79B9));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // A single-sample batch has no batch statistics to normalise with.
            if batch.len() < 2 && train_set.len() >= 2 {
                continue;
            }
            let x = normalized_batch(net.norm, train_set, batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let tape = net.forward(&x, Mode::Train)?;
            let (loss, dlogits) = cross_entropy(&tape.logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite training loss {loss}"),
                });
            }
            let (grads, _) = net.backward(&tape, &dlogits)?;
            opt.step(net.params_mut(), &grads, cfg);
            net.update_running_stats(&tape.bn_stats);
            loss_sum += loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let (val_loss, val_accuracy) = validate(&net, val_set, cfg.val_granularity)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("non-finite validation loss {val_loss}"),
            });
        }
        let decision = protocol.observe(epoch, val_loss, val_accuracy);
        let meta = CheckpointMeta {
            epoch,
            val_accuracy,
            val_loss,
            grid: None,
            seed: Some(cfg.seed),
            tool_version: crate::VERSION.to_string(),
        };
        if decision.save {
            if let Some(path) = checkpoint_path {
                net.save_checkpoint(path, &meta)?;
                last_written = epoch;
            }
        }
        if decision.new_best {
            best = Some((net.clone(), meta));
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            checkpoint_saved: decision.save,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if decision.stop {
            break;
        }
    }
    let (best, best_meta) = best.expect("the first epoch always improves");
    if let Some(path) = checkpoint_path {
        if last_written != best_meta.epoch {
            best.save_checkpoint(path, &best_meta)?;
        }
    }
    Ok(TrainOutcome { best, best_meta, logs })
}

pub fn write_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = crate::datasets::csv_writer(path)?;
    for l in logs {
        w.serialize(l).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub tile_accuracy: f64,
    /// Probability-vote accuracy over the held-out fold's images.
    pub image_accuracy: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldMetrics>,
    pub mean_tile_accuracy: f64,
    pub std_tile_accuracy: f64,
    pub mean_image_accuracy: f64,
    pub std_image_accuracy: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// k-fold cross-validation over the training tiles. Each fold trains a fresh
/// model from `make_net` on the other folds and validates on its own images.
pub fn run_cv<M>(
    train_tiles: &TileSet,
    folds: &FoldAssignment,
    cfg: &TrainConfig,
    mut make_net: M,
    checkpoint_dir: Option<&Path>,
) -> Result<CvReport>
where
    M: FnMut(usize) -> Result<Network<f32>>,
{
    let sources = train_tiles.source_ids();
    let assigned: BTreeSet<&str> = folds.fold_of.keys().map(|s| s.as_str()).collect();
    if sources != assigned {
        return Err(Error::Fold("fold assignment does not cover exactly the training tiles' sources".into()));
    }
    let mut rows = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let (train_ids, held_ids) = folds.partition(fold);
        let tr = train_tiles.filter_sources(&train_ids);
        let va = train_tiles.filter_sources(&held_ids);
        let ckpt: Option<PathBuf> = checkpoint_dir.map(|d| d.join(format!("fold{fold}.bin")));
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(fold as u64),
            ..cfg.clone()
        };
        let out = train(make_net(fold)?, &tr, &va, &fold_cfg, ckpt.as_deref())?;
        let (_, tile_accuracy) = validate(&out.best, &va, ValGranularity::Tile)?;
        let (_, image_accuracy) = validate(&out.best, &va, ValGranularity::Image)?;
        rows.push(FoldMetrics {
            fold,
            tile_accuracy,
            image_accuracy,
            epochs: out.logs.len(),
        });
    }
    Ok(summarize_cv(rows))
}

pub fn summarize_cv(folds: Vec<FoldMetrics>) -> CvReport {
    let (mt, st) = mean_std(&folds.iter().map(|f| f.tile_accuracy).collect::<Vec<_>>());
    let (mi, si) = mean_std(&folds.iter().map(|f| f.image_accuracy).collect::<Vec<_>>());
    CvReport {
        folds,
        mean_tile_accuracy: mt,
        std_tile_accuracy: st,
        mean_image_accuracy: mi,
        std_image_accuracy: si,
    }
}
