use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cpe_core::geometry::{extend_box_with, parse_boxes, BoxRecord, Direction, ImageDims};
use cpe_core::harness::gradcheck::{dcpe_gradcheck, total_loss_gradcheck};
use cpe_core::harness::train::write_curve;
use cpe_core::harness::{
    evaluate, generate_dataset, parse_grid, read_dataset, run_grid, thread_pool, train, write_ablation_csv,
    write_dataset, write_metrics_csv, TrainConfig,
};
use cpe_core::model::CpeModel;
use cpe_core::tensor::{read_checkpoint, write_checkpoint};

#[derive(Parser)]
#[command(name = "cpe", version, about = "Contrastive proposal extension toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory or on scenes generated from the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write the per-iteration loss curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write per-class metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Print the boxes of a file extended in one direction.
    Extend {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long = "image-dims")]
        image_dims: ImageDims,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        dir: Direction,
        /// Use plain w/t and h/t lengths.
        #[arg(long)]
        no_ratio: bool,
    },
    /// Train and evaluate every run of a grid file.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients on toy models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the scenes described by a config to a dataset directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    match cli.command {
        Command::Train {
            config,
            out,
            dataset,
            curve,
        } => {
            let cfg = load_config(&config)?;
            let scenes = match dataset {
                Some(dir) => {
                    let (classes, scenes) = read_dataset(&dir).with_context(|| format!("reading {}", dir.display()))?;
                    if classes != cfg.model.classes {
                        bail!("dataset has {classes} classes, config {}", cfg.model.classes);
                    }
                    scenes
                }
                None => generate_dataset(cfg.data_seed, cfg.scenes, &cfg.scene)?,
            };
            let result = pool.install(|| train(&cfg, &scenes))?;
            let mut w = BufWriter::new(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            write_checkpoint(&mut w, &cfg.to_text(), &result.model.store)?;
            w.flush()?;
            if let Some(path) = curve {
                let mut w = BufWriter::new(fs::File::create(&path)?);
                write_curve(&mut w, &result.curve)?;
                w.flush()?;
            }
            if let (Some(first), Some(last)) = (result.curve.first(), result.curve.last()) {
                eprintln!(
                    "trained {} iterations: loss {:.4} -> {:.4}",
                    result.curve.len(),
                    first.losses.total,
                    last.losses.total
                );
            }
        }
        Command::Eval { ckpt, dataset, metrics } => {
            let mut r = BufReader::new(fs::File::open(&ckpt).with_context(|| format!("opening {}", ckpt.display()))?);
            let ck = read_checkpoint(&mut r)?;
            let cfg = TrainConfig::parse(&ck.metadata).context("checkpoint metadata")?;
            let mut model = CpeModel::new(cfg.model.clone(), cfg.seed)?;
            model.store.load_from(&ck.params)?;
            let (classes, scenes) = read_dataset(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
            if classes != cfg.model.classes {
                bail!("dataset has {classes} classes, checkpoint {}", cfg.model.classes);
            }
            let m = pool.install(|| evaluate(&model, &scenes, cfg.nms_iou))?;
            let mut w = BufWriter::new(fs::File::create(&metrics)?);
            write_metrics_csv(&mut w, &m)?;
            w.flush()?;
            eprintln!(
                "mAP {:.2}  CorLoc {:.2}  top IoU {:.4}",
                m.map, m.mean_corloc, m.mean_top_iou
            );
        }
        Command::Extend {
            boxes,
            image_dims,
            t,
            dir,
            no_ratio,
        } => {
            let text = fs::read_to_string(&boxes).with_context(|| format!("reading {}", boxes.display()))?;
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for rec in parse_boxes(&text)? {
                let ext = extend_box_with(&rec.bbox, dir, &image_dims, t, !no_ratio)?;
                writeln!(out, "{}", BoxRecord { bbox: ext, ..rec })?;
            }
        }
        Command::Ablate { grid, out } => {
            let text = fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let g = parse_grid(&text)?;
            let rows = pool.install(|| run_grid(&g))?;
            match out {
                Some(path) => {
                    let mut w = BufWriter::new(fs::File::create(&path)?);
                    write_ablation_csv(&mut w, &rows)?;
                    w.flush()?;
                }
                None => write_ablation_csv(&mut io::stdout().lock(), &rows)?,
            }
        }
        Command::Gradcheck { seed } => {
            let a = dcpe_gradcheck(seed)?;
            let b = total_loss_gradcheck(seed)?;
            println!(
                "dcpe       max_rel_error {:.3e} over {} entries",
                a.max_rel_error, a.checked
            );
            println!(
                "total_loss max_rel_error {:.3e} over {} entries",
                b.max_rel_error, b.checked
            );
            if a.max_rel_error >= 1e-4 || b.max_rel_error >= 1e-4 {
                bail!("gradient check failed");
            }
        }
        Command::Generate { config, out } => {
            let cfg = load_config(&config)?;
            let scenes = generate_dataset(cfg.data_seed, cfg.scenes, &cfg.scene)?;
            write_dataset(&out, &scenes, cfg.scene.classes)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
