use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tilevote::config::ExperimentConfig;
use tilevote::experiment::{cmd_cam, cmd_cv, cmd_eval, cmd_split, cmd_sweep, cmd_synth, cmd_tile, cmd_train};
use tilevote::{class_id, GridSpec, Result};

#[derive(Parser)]
#[command(name = "tilevote", version, about = "Tile-based image classification with vote aggregation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Tiling grid, e.g. 6x7.
    #[arg(long, global = true)]
    grid: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// fc or knn.
    #[arg(long, global = true)]
    evaluator: Option<String>,
    /// majority, probability or none.
    #[arg(long, global = true)]
    vote: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root holding {class}/{image}.png.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the data root.
    Synth,
    /// Stratified train/val/test split and CV folds.
    Split,
    /// Tile every split at the configured grid.
    Tile,
    /// Train with early stopping and keep the best checkpoint.
    Train,
    /// Score the test split.
    Eval,
    /// Cross-validation on the training split.
    Cv,
    /// Grad-CAM and Score-CAM overlays for test tiles.
    Cam {
        #[arg(long, default_value_t = 8)]
        limit: usize,
        /// Target class name or ID; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
    },
    /// Train and evaluate at every grid of the sweep.
    Sweep {
        /// Comma-separated grids; defaults to the full sweep set.
        #[arg(long, value_delimiter = ',')]
        grids: Option<Vec<String>>,
    },
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let overrides = [
        ("grid", c.grid.clone()),
        ("seed", c.seed.map(|s| s.to_string())),
        ("evaluator", c.evaluator.clone()),
        ("vote", c.vote.clone()),
        ("out", c.out.as_ref().map(|p| p.display().to_string())),
        ("data_root", c.data.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_class(s: &str) -> Result<usize> {
    class_id(s).or_else(|| s.parse().ok().filter(|&c| c < tilevote::NUM_CLASSES)).ok_or_else(|| {
        tilevote::Error::InvalidArgument(format!("unknown class {s:?}"))
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Synth => {
            let n = cmd_synth(&cfg)?;
            println!("wrote {n} images to {}", cfg.data_root.display());
        }
        Command::Split => {
            let (m, f) = cmd_split(&cfg)?;
            println!(
                "split {} images, {} folds -> {}",
                m.entries().len(),
                f.k,
                cfg.out.display()
            );
        }
        Command::Tile => {
            let [tr, va, te] = cmd_tile(&cfg)?;
            println!("grid {}: {tr} train, {va} val, {te} test tiles", cfg.grid);
        }
        Command::Train => {
            let o = cmd_train(&cfg)?;
            println!(
                "trained {} epochs; best epoch {} val_acc {:.4} val_loss {:.4}",
                o.logs.len(),
                o.best_meta.epoch,
                o.best_meta.val_accuracy,
                o.best_meta.val_loss
            );
        }
        Command::Eval => {
            let s = cmd_eval(&cfg)?;
            println!("tile accuracy {:.4}", s.tile_metrics.accuracy);
            for (name, e) in [("majority", &s.majority), ("probability", &s.probability)] {
                if let Some(e) = e {
                    println!("{name} image accuracy {:.4} macro_f1 {:.4}", e.metrics.accuracy, e.metrics.macro_f1);
                }
            }
        }
        Command::Cv => {
            let r = cmd_cv(&cfg)?;
            for f in &r.folds {
                println!("fold {} tile {:.4} image {:.4}", f.fold, f.tile_accuracy, f.image_accuracy);
            }
            println!(
                "mean tile {:.4} ± {:.4}, image {:.4} ± {:.4}",
                r.mean_tile_accuracy, r.std_tile_accuracy, r.mean_image_accuracy, r.std_image_accuracy
            );
        }
        Command::Cam { limit, class } => {
            let class = class.as_deref().map(parse_class).transpose()?;
            let stats = cmd_cam(&cfg, limit, class)?;
            println!("wrote {} saliency maps", stats.len());
        }
        Command::Sweep { grids } => {
            let grids: Vec<GridSpec> = match grids {
                Some(g) => g
                    .iter()
                    .map(|s| s.parse().map_err(|_| tilevote::Error::Config(format!("invalid grid {s:?}"))))
                    .collect::<Result<_>>()?,
                None => GridSpec::sweep_set().to_vec(),
            };
            println!("grid,FC-Acc,FC-Maj,FC-Prob,kNN-Acc,kNN-Maj,kNN-Prob");
            for r in cmd_sweep(&cfg, &grids)? {
                println!(
                    "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    r.grid, r.fc_acc, r.fc_maj, r.fc_prob, r.knn_acc, r.knn_maj, r.knn_prob
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
