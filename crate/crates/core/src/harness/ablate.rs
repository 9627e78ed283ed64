//! Configuration sweeps.
//!
//! Grid files hold base `key = value` lines, then a `[runs]` line, then one
//! run per line: a label followed by `key=value` overrides. The base key
//! `repeats` sets how many seeds each run is averaged over; repeat `r` adds
//! `r` to both `seed` and `data_seed`.

use std::io::Write;

use crate::error::{CpeError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::eval::{evaluate, Metrics};
use crate::harness::scene::generate_dataset;
use crate::harness::train::train;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub label: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub repeats: usize,
    pub runs: Vec<AblationRun>,
}

pub fn parse_grid(text: &str) -> Result<AblationGrid> {
    let mut base = TrainConfig::default();
    let mut repeats = 1usize;
    let mut in_runs = false;
    let mut runs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let err = |msg: String| CpeError::Parse { line: i + 1, msg };
        if line.is_empty() {
            continue;
        }
        if line == "[runs]" {
            if in_runs {
                return Err(err("duplicate [runs] section".into()));
            }
            base.validate().map_err(|e| err(e.to_string()))?;
            in_runs = true;
            continue;
        }
        if !in_runs {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "repeats" {
                repeats = v.parse().map_err(|_| err(format!("repeats: bad value {v:?}")))?;
                if repeats == 0 {
                    return Err(err("repeats must be positive".into()));
                }
            } else {
                base.set(k, v).map_err(|e| err(e.to_string()))?;
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let label = parts.next().expect("non-empty line").to_string();
        if label.contains('=') || label.contains(',') {
            return Err(err(format!("run needs a label before its overrides, got {label:?}")));
        }
        let mut config = base.clone();
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {kv:?}")))?;
            config.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        config.validate().map_err(|e| err(e.to_string()))?;
        runs.push(AblationRun { label, config });
    }
    Ok(AblationGrid { repeats, runs })
}

/// Outcome of training and evaluating one configuration on its own
/// generated scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: Metrics,
}

pub fn run_config(cfg: &TrainConfig) -> Result<RunOutcome> {
    let scenes = generate_dataset(cfg.data_seed, cfg.scenes, &cfg.scene)?;
    let trained = train(cfg, &scenes)?;
    let metrics = evaluate(&trained.model, &scenes, cfg.nms_iou)?;
    Ok(RunOutcome { metrics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub repeats: usize,
    pub map: f64,
    pub corloc: f64,
    pub top_iou: f64,
    /// Per-repeat mean top-detection IoU.
    pub top_iou_runs: Vec<f64>,
}

pub fn run_grid(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    grid.runs
        .iter()
        .map(|run| {
            let mut outs = Vec::with_capacity(grid.repeats);
            for r in 0..grid.repeats {
                let mut cfg = run.config.clone();
                cfg.seed = cfg.seed.wrapping_add(r as u64);
                cfg.data_seed = cfg.data_seed.wrapping_add(r as u64);
                outs.push(run_config(&cfg)?.metrics);
            }
            let n = outs.len() as f64;
            Ok(AblationRow {
                label: run.label.clone(),
                repeats: grid.repeats,
                map: outs.iter().map(|m| m.map).sum::<f64>() / n,
                corloc: outs.iter().map(|m| m.mean_corloc).sum::<f64>() / n,
                top_iou: outs.iter().map(|m| m.mean_top_iou).sum::<f64>() / n,
                top_iou_runs: outs.iter().map(|m| m.mean_top_iou).collect(),
            })
        })
        .collect()
}

/// `label,repeats,map,corloc,top_iou`; an empty grid writes the header only.
pub fn write_ablation_csv(w: &mut impl Write, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "label,repeats,map,corloc,top_iou")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6}",
            r.label, r.repeats, r.map, r.corloc, r.top_iou
        )?;
    }
    Ok(())
}
