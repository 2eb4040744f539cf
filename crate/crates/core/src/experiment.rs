//! End-to-end pipelines: synthesis, splitting, tiling, training, evaluation,
//! cross-validation, saliency and the grid sweep. Each `cmd_*` function backs
//! one subcommand of the command-line tool.
//!
//! Output layout under the configured `out` directory:
//!
//! ```text
//! splits.csv, folds.csv, config.txt
//! grid_{RxC}/tiles/{split}/{class}/{tile_id}.png (+ manifest.csv per split)
//! grid_{RxC}/model/{checkpoint.bin, train_log.csv, train_embeddings.csv}
//! grid_{RxC}/eval_{fc|knn}/{tile_predictions,image_predictions,metrics,confusion}.csv
//! grid_{RxC}/cv/{cv.csv, fold*.bin}
//! grid_{RxC}/cam/{gradcam,scorecam}/{tile_id}_c{class}.png, cam/stats.csv
//! sweep/{sweep.csv, sweep.svg}
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::{aggregate_by_source, compute_metrics, ImagePrediction, MetricsReport, TilePrediction, TileVote, VoteMethod};
use crate::config::{derive_seed, Aggregation, Evaluator, ExperimentConfig, SeedPurpose};
use crate::datasets::{
    csv_writer, generate_synthetic, image_path, make_folds, read_tile_manifest, scan_dataset, stratified_split,
    tile_png_path, write_dataset, write_tile_manifest, ClassQuota, FoldAssignment, ManifestEntry, Split,
    SplitManifest, TileSet,
};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::knn::{read_embeddings, write_embeddings, EmbeddingIndex};
use crate::model::{CheckpointMeta, Network};
use crate::saliency::{cam_for_tile, save_overlay, write_stats_csv, CamMethod, MapStats};
use crate::tiling::{tile_image, GridSpec};
use crate::trainer::{infer_tiles, probs_to_scores, run_cv, train, write_epoch_logs, CvReport, TrainOutcome};
use crate::CLASS_NAMES;

pub fn splits_path(out: &Path) -> PathBuf {
    out.join("splits.csv")
}

pub fn folds_path(out: &Path) -> PathBuf {
    out.join("folds.csv")
}

pub fn grid_dir(out: &Path, grid: GridSpec) -> PathBuf {
    out.join(format!("grid_{grid}"))
}

pub fn tiles_dir(out: &Path, grid: GridSpec) -> PathBuf {
    grid_dir(out, grid).join("tiles")
}

pub fn model_dir(out: &Path, grid: GridSpec) -> PathBuf {
    grid_dir(out, grid).join("model")
}

pub fn checkpoint_path(out: &Path, grid: GridSpec) -> PathBuf {
    model_dir(out, grid).join("checkpoint.bin")
}

pub fn embeddings_path(out: &Path, grid: GridSpec) -> PathBuf {
    model_dir(out, grid).join("train_embeddings.csv")
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Fresh network with the initialisation seed derived from the master seed.
pub fn network_for(cfg: &ExperimentConfig) -> Result<Network<f32>> {
    Network::new(cfg.model.clone(), derive_seed(cfg.seed, SeedPurpose::Init))
}

#[derive(Debug, Clone)]
pub struct ImageEval {
    pub predictions: Vec<(ImagePrediction, usize)>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub tiles: Vec<TilePrediction>,
    pub tile_metrics: MetricsReport,
    pub majority: Option<ImageEval>,
    pub probability: Option<ImageEval>,
}

fn image_eval(tiles: &[TilePrediction], method: VoteMethod) -> Result<ImageEval> {
    let predictions = aggregate_by_source(tiles, method)?;
    let (p, t): (Vec<usize>, Vec<usize>) = predictions.iter().map(|(p, t)| (p.predicted, *t)).unzip();
    Ok(ImageEval {
        metrics: compute_metrics(&p, &t)?,
        predictions,
    })
}

/// Tile metrics plus the image-level votes selected by `vote`.
pub fn summarize(tiles: Vec<TilePrediction>, vote: Aggregation) -> Result<EvalSummary> {
    let (p, t): (Vec<usize>, Vec<usize>) = tiles.iter().map(|x| (x.vote.label, x.true_class)).unzip();
    let tile_metrics = compute_metrics(&p, &t)?;
    let want = |m: VoteMethod| vote.method() == Some(m);
    Ok(EvalSummary {
        majority: if want(VoteMethod::Majority) { Some(image_eval(&tiles, VoteMethod::Majority)?) } else { None },
        probability: if want(VoteMethod::Probability) { Some(image_eval(&tiles, VoteMethod::Probability)?) } else { None },
        tiles,
        tile_metrics,
    })
}

/// Tile metrics together with both voting schemes.
pub fn summarize_all(tiles: Vec<TilePrediction>) -> Result<EvalSummary> {
    let mut s = summarize(tiles, Aggregation::Majority)?;
    s.probability = Some(image_eval(&s.tiles, VoteMethod::Probability)?);
    Ok(s)
}

fn tile_predictions(set: &TileSet, votes: Vec<TileVote>) -> Vec<TilePrediction> {
    set.records
        .iter()
        .zip(votes)
        .map(|(r, vote)| TilePrediction {
            source_id: r.source_id.clone(),
            true_class: r.label,
            vote,
        })
        .collect()
}

/// Softmax-head predictions for every tile of `set`.
pub fn fc_predictions(net: &Network<f32>, set: &TileSet) -> Result<Vec<TilePrediction>> {
    let (probs, _) = infer_tiles(net, set)?;
    let votes = probs_to_scores(&probs)
        .into_iter()
        .map(|s| TileVote { label: s.argmax(), scores: s })
        .collect();
    Ok(tile_predictions(set, votes))
}

/// kNN predictions for `set`, whose embeddings are the rows of `embeddings`.
pub fn knn_predictions(index: &EmbeddingIndex, embeddings: ArrayView2<f32>, set: &TileSet) -> Result<Vec<TilePrediction>> {
    let rows: Vec<_> = embeddings.rows().into_iter().map(|r| r.to_vec()).collect();
    let votes = rows
        .par_iter()
        .map(|q| index.classify(q).map(|p| TileVote { label: p.label, scores: p.scores }))
        .collect::<Result<Vec<_>>>()?;
    Ok(tile_predictions(set, votes))
}

/// Both evaluators on the test tiles of a trained model, with the kNN index
/// built from the training tiles.
pub fn evaluate_both(net: &Network<f32>, train_set: &TileSet, test_set: &TileSet, k: usize) -> Result<(EvalSummary, EvalSummary)> {
    let (_, train_emb) = infer_tiles(net, train_set)?;
    let index = EmbeddingIndex::build(train_emb.view(), &train_set.labels(), k)?;
    let (probs, test_emb) = infer_tiles(net, test_set)?;
    let fc_votes = probs_to_scores(&probs)
        .into_iter()
        .map(|s| TileVote { label: s.argmax(), scores: s })
        .collect();
    let fc = summarize_all(tile_predictions(test_set, fc_votes))?;
    let knn = summarize_all(knn_predictions(&index, test_emb.view(), test_set)?)?;
    Ok((fc, knn))
}

/// One row of the grid sweep: test accuracies per evaluator and vote.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub grid: String,
    #[serde(rename = "FC-Acc")]
    pub fc_acc: f64,
    #[serde(rename = "FC-Maj")]
    pub fc_maj: f64,
    #[serde(rename = "FC-Prob")]
    pub fc_prob: f64,
    #[serde(rename = "kNN-Acc")]
    pub knn_acc: f64,
    #[serde(rename = "kNN-Maj")]
    pub knn_maj: f64,
    #[serde(rename = "kNN-Prob")]
    pub knn_prob: f64,
}

impl SweepRow {
    pub fn from_summaries(grid: GridSpec, fc: &EvalSummary, knn: &EvalSummary) -> Self {
        let acc = |e: &Option<ImageEval>| e.as_ref().map_or(f64::NAN, |e| e.metrics.accuracy);
        SweepRow {
            grid: grid.to_string(),
            fc_acc: fc.tile_metrics.accuracy,
            fc_maj: acc(&fc.majority),
            fc_prob: acc(&fc.probability),
            knn_acc: knn.tile_metrics.accuracy,
            knn_maj: acc(&knn.majority),
            knn_prob: acc(&knn.probability),
        }
    }

    pub fn series(&self) -> [(&'static str, f64); 6] {
        [
            ("FC-Acc", self.fc_acc),
            ("FC-Maj", self.fc_maj),
            ("FC-Prob", self.fc_prob),
            ("kNN-Acc", self.knn_acc),
            ("kNN-Maj", self.knn_maj),
            ("kNN-Prob", self.knn_prob),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub row: SweepRow,
    pub fc: EvalSummary,
    pub knn: EvalSummary,
    pub training: TrainOutcome,
}

/// Tiles the splits of `manifest` at `grid`, trains a fresh model and scores
/// the test split with both evaluators. `load` fetches a source image.
pub fn run_grid<L>(cfg: &ExperimentConfig, manifest: &SplitManifest, grid: GridSpec, load: L) -> Result<GridOutcome>
where
    L: Fn(&ManifestEntry) -> Result<GrayImage> + Sync,
{
    let size = cfg.model.input_size;
    let train_set = TileSet::from_manifest(manifest, Split::Train, grid, size, &load)?;
    let val_set = TileSet::from_manifest(manifest, Split::Val, grid, size, &load)?;
    let test_set = TileSet::from_manifest(manifest, Split::Test, grid, size, &load)?;
    let training = train(network_for(cfg)?, &train_set, &val_set, &cfg.train_config(), None)?;
    let (fc, knn) = evaluate_both(&training.best, &train_set, &test_set, cfg.knn_k)?;
    Ok(GridOutcome {
        row: SweepRow::from_summaries(grid, &fc, &knn),
        fc,
        knn,
        training,
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Static line chart of accuracy against grid, one polyline per series.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 130.0;
    const T: f64 = 20.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let pw = W - L - R;
    let ph = H - T - B;
    let x = |i: usize| L + if rows.len() > 1 { pw * i as f64 / (rows.len() - 1) as f64 } else { pw / 2.0 };
    let y = |v: f64| T + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{L}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            L + pw,
            y(v),
            y(v),
            L - 6.0,
            y(v) + 4.0
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(i),
            T + ph + 18.0,
            r.grid
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">grid</text>"#, L + pw / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">test accuracy</text>"#,
        T + ph / 2.0,
        T + ph / 2.0
    );
    for (si, color) in COLORS.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.series()[si].1.is_finite())
            .map(|(i, r)| format!("{:.1},{:.1}", x(i), y(r.series()[si].1)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = T + 14.0 * si as f64 + 8.0;
        let name = rows.first().map_or("", |r| r.series()[si].0);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            W - R + 10.0,
            W - R + 30.0,
            W - R + 36.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<usize> {
    let images = generate_synthetic(&cfg.synth_config())?;
    write_dataset(&cfg.data_root, &images)?;
    cfg.write_resolved(&cfg.data_root)?;
    Ok(images.len())
}

pub fn cmd_split(cfg: &ExperimentConfig) -> Result<(SplitManifest, FoldAssignment)> {
    let ids = scan_dataset(&cfg.data_root)?;
    let quotas: Vec<ClassQuota> = ids
        .iter()
        .map(|c| ClassQuota::remainder_train(c.len(), cfg.val_per_class, cfg.test_per_class))
        .collect();
    let manifest = stratified_split(&ids, &quotas, derive_seed(cfg.seed, SeedPurpose::Split))?;
    let folds = make_folds(&manifest, cfg.folds, derive_seed(cfg.seed, SeedPurpose::Folds))?;
    manifest.write_csv(&splits_path(&cfg.out))?;
    folds.write_csv(&folds_path(&cfg.out))?;
    cfg.write_resolved(&cfg.out)?;
    Ok((manifest, folds))
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    SplitManifest::read_csv(&splits_path(&cfg.out))
}

fn load_source(root: &Path) -> impl Fn(&ManifestEntry) -> Result<GrayImage> + Sync + '_ {
    move |e| GrayImage::load_png(&image_path(root, e.class, &e.source_id))
}

/// Tiles every split into `grid_{RxC}/tiles`. Returns tile counts per split.
pub fn cmd_tile(cfg: &ExperimentConfig) -> Result<[usize; 3]> {
    let manifest = load_manifest(cfg)?;
    let root = tiles_dir(&cfg.out, cfg.grid);
    let load = load_source(&cfg.data_root);
    let mut counts = [0; 3];
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let entries: Vec<&ManifestEntry> = manifest.in_split(split).collect();
        let records = entries
            .par_iter()
            .map(|e| {
                let img = load(e)?;
                tile_image(&img, cfg.grid, &e.source_id, e.class)?
                    .into_iter()
                    .map(|(rec, px)| {
                        px.save_png(&tile_png_path(&root, split, &rec))?;
                        Ok(rec)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect::<Vec<_>>();
        write_tile_manifest(&root, split, &records)?;
        counts[si] = records.len();
    }
    cfg.write_resolved(&grid_dir(&cfg.out, cfg.grid))?;
    Ok(counts)
}

fn tile_set(cfg: &ExperimentConfig, split: Split) -> Result<TileSet> {
    TileSet::from_tile_dir(&tiles_dir(&cfg.out, cfg.grid), split, cfg.model.input_size)
}

/// Trains on the tiled train split, early-stopping on the val split. Writes
/// the best checkpoint, the epoch log and the training embeddings.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let train_set = tile_set(cfg, Split::Train)?;
    let val_set = tile_set(cfg, Split::Val)?;
    let dir = model_dir(&cfg.out, cfg.grid);
    let ckpt = checkpoint_path(&cfg.out, cfg.grid);
    let mut outcome = train(network_for(cfg)?, &train_set, &val_set, &cfg.train_config(), Some(&ckpt))?;
    outcome.best_meta.grid = Some(cfg.grid.to_string());
    outcome.best_meta.seed = Some(cfg.seed);
    outcome.best.save_checkpoint(&ckpt, &outcome.best_meta)?;
    write_epoch_logs(&dir.join("train_log.csv"), &outcome.logs)?;
    let (_, emb) = infer_tiles(&outcome.best, &train_set)?;
    let ids: Vec<String> = train_set.records.iter().map(|r| r.tile_id.clone()).collect();
    write_embeddings(&embeddings_path(&cfg.out, cfg.grid), &ids, emb.view(), &train_set.labels())?;
    cfg.write_resolved(&dir)?;
    Ok(outcome)
}

pub fn load_trained(cfg: &ExperimentConfig) -> Result<(Network<f32>, CheckpointMeta)> {
    Network::load_checkpoint(&checkpoint_path(&cfg.out, cfg.grid), Some(&cfg.model))
}

/// Scores the test split with the configured evaluator and vote. Only test
/// tiles, the checkpoint and the training-embedding dump are read.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let ckpt = checkpoint_path(&cfg.out, cfg.grid);
    require(&ckpt)?;
    if cfg.evaluator == Evaluator::Knn {
        require(&embeddings_path(&cfg.out, cfg.grid))?;
    }
    let (net, _) = load_trained(cfg)?;
    let test_set = tile_set(cfg, Split::Test)?;
    let tiles = match cfg.evaluator {
        Evaluator::Fc => fc_predictions(&net, &test_set)?,
        Evaluator::Knn => {
            let (_, train_emb, labels) = read_embeddings(&embeddings_path(&cfg.out, cfg.grid))?;
            let index = EmbeddingIndex::build(train_emb.view(), &labels, cfg.knn_k)?;
            let (_, emb) = infer_tiles(&net, &test_set)?;
            knn_predictions(&index, emb.view(), &test_set)?
        }
    };
    let summary = summarize(tiles, cfg.vote)?;
    let dir = grid_dir(&cfg.out, cfg.grid).join(format!("eval_{}", cfg.evaluator.as_str()));
    write_eval(&dir, &test_set, &summary)?;
    cfg.write_resolved(&dir)?;
    Ok(summary)
}

fn write_eval(dir: &Path, set: &TileSet, s: &EvalSummary) -> Result<()> {
    let path = dir.join("tile_predictions.csv");
    let mut w = csv_writer(&path)?;
    let err = |e| Error::csv(&path, e);
    w.write_record(["tile_id", "source_id", "true_class", "predicted", "s0", "s1", "s2", "s3"]).map_err(err)?;
    for (rec, p) in set.records.iter().zip(&s.tiles) {
        let mut row = vec![
            rec.tile_id.clone(),
            rec.source_id.clone(),
            CLASS_NAMES[p.true_class].to_string(),
            CLASS_NAMES[p.vote.label].to_string(),
        ];
        row.extend(p.vote.scores.0.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let levels: Vec<(&str, &MetricsReport)> = std::iter::once(("tile", &s.tile_metrics))
        .chain(s.majority.as_ref().map(|e| ("majority", &e.metrics)))
        .chain(s.probability.as_ref().map(|e| ("probability", &e.metrics)))
        .collect();

    let path = dir.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    let err = |e| Error::csv(&path, e);
    w.write_record(["level", "accuracy", "macro_precision", "macro_recall", "macro_f1"]).map_err(err)?;
    for (level, m) in &levels {
        w.write_record([
            level.to_string(),
            m.accuracy.to_string(),
            m.macro_precision.to_string(),
            m.macro_recall.to_string(),
            m.macro_f1.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("confusion.csv");
    let mut w = csv_writer(&path)?;
    let err = |e| Error::csv(&path, e);
    let mut header = vec!["level".to_string(), "true_class".to_string()];
    header.extend(CLASS_NAMES.iter().map(|c| c.to_string()));
    w.write_record(&header).map_err(err)?;
    for (level, m) in &levels {
        for (t, row) in m.confusion.iter().enumerate() {
            let mut rec = vec![level.to_string(), CLASS_NAMES[t].to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let images: Vec<&(ImagePrediction, usize)> = s
        .majority
        .iter()
        .chain(&s.probability)
        .flat_map(|e| &e.predictions)
        .collect();
    if !images.is_empty() {
        let path = dir.join("image_predictions.csv");
        let mut w = csv_writer(&path)?;
        let err = |e| Error::csv(&path, e);
        w.write_record(["source_id", "method", "true_class", "predicted", "tile_count", "v0", "v1", "v2", "v3"])
            .map_err(err)?;
        for (p, t) in images {
            let mut rec = vec![
                p.source_id.clone(),
                p.method.as_str().to_string(),
                CLASS_NAMES[*t].to_string(),
                CLASS_NAMES[p.predicted].to_string(),
                p.tile_count.to_string(),
            ];
            rec.extend(p.scores.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// k-fold cross-validation on the tiled training split.
pub fn cmd_cv(cfg: &ExperimentConfig) -> Result<CvReport> {
    let folds = FoldAssignment::read_csv(&folds_path(&cfg.out))?;
    let train_set = tile_set(cfg, Split::Train)?;
    let dir = grid_dir(&cfg.out, cfg.grid).join("cv");
    let report = run_cv(&train_set, &folds, &cfg.train_config(), |_| network_for(cfg), Some(&dir))?;
    write_cv_csv(&dir.join("cv.csv"), &report)?;
    cfg.write_resolved(&dir)?;
    Ok(report)
}

pub fn write_cv_csv(path: &Path, r: &CvReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["fold", "tile_accuracy", "image_accuracy", "epochs", "tile_accuracy_std", "image_accuracy_std"])
        .map_err(err)?;
    for f in &r.folds {
        w.write_record([
            f.fold.to_string(),
            f.tile_accuracy.to_string(),
            f.image_accuracy.to_string(),
            f.epochs.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(err)?;
    }
    w.write_record([
        "summary".to_string(),
        r.mean_tile_accuracy.to_string(),
        r.mean_image_accuracy.to_string(),
        String::new(),
        r.std_tile_accuracy.to_string(),
        r.std_image_accuracy.to_string(),
    ])
    .map_err(err)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Grad-CAM and Score-CAM overlays for the first `limit` test tiles. The
/// target is `class` when given, otherwise the model's predicted class.
pub fn cmd_cam(cfg: &ExperimentConfig, limit: usize, class: Option<usize>) -> Result<Vec<MapStats>> {
    require(&checkpoint_path(&cfg.out, cfg.grid))?;
    let (net, _) = load_trained(cfg)?;
    let root = tiles_dir(&cfg.out, cfg.grid);
    let dir = grid_dir(&cfg.out, cfg.grid);
    let mut stats = Vec::new();
    for rec in read_tile_manifest(&root, Split::Test)?.into_iter().take(limit) {
        let tile = GrayImage::load_png(&tile_png_path(&root, Split::Test, &rec))?;
        let target = match class {
            Some(c) => c,
            None => {
                let set = TileSet::from_tiles(vec![(rec.clone(), tile.clone())], cfg.model.input_size)?;
                fc_predictions(&net, &set)?[0].vote.label
            }
        };
        for method in [CamMethod::GradCam, CamMethod::ScoreCam] {
            let map = cam_for_tile(&net, &tile, &rec.tile_id, target, method)?;
            save_overlay(&dir, &tile, &map)?;
            stats.push(MapStats::of(&map));
        }
    }
    write_stats_csv(&dir.join("cam").join("stats.csv"), &stats)?;
    cfg.write_resolved(&dir.join("cam"))?;
    Ok(stats)
}

/// Trains and evaluates one model per grid, from source images on disk.
pub fn cmd_sweep(cfg: &ExperimentConfig, grids: &[GridSpec]) -> Result<Vec<SweepRow>> {
    let manifest = load_manifest(cfg)?;
    let load = load_source(&cfg.data_root);
    let mut rows = Vec::with_capacity(grids.len());
    for &grid in grids {
        let run_cfg = ExperimentConfig { grid, ..cfg.clone() };
        rows.push(run_grid(&run_cfg, &manifest, grid, &load)?.row);
    }
    let dir = cfg.out.join("sweep");
    write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    let svg = dir.join("sweep.svg");
    std::fs::write(&svg, sweep_svg(&rows)).map_err(|e| Error::io(&svg, e))?;
    cfg.write_resolved(&dir)?;
    Ok(rows)
}
