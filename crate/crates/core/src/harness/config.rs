//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{CpeError, Result};
use crate::geometry::Direction;
use crate::harness::scene::SceneSpec;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Iteration at which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_at: usize,
    pub lr_drop_factor: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub nms_iou: f64,
    pub model: ModelConfig,
    /// Seed of the generated training scenes.
    pub data_seed: u64,
    pub scenes: usize,
    pub scene: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            seed: 0,
            lr: 5e-4,
            momentum: 0.9,
            weight_decay: 0.9,
            iterations: 500,
            lr_drop_at: 350,
            lr_drop_factor: 0.1,
            grad_clip: 0.0,
            nms_iou: 0.3,
            model: ModelConfig {
                classes: scene.classes,
                channels: scene.channels(),
                ..ModelConfig::default()
            },
            data_seed: 0,
            scenes: 20,
            scene,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| CpeError::InvalidInput(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(CpeError::InvalidInput(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// `none`, `all`, or a comma list of direction names.
pub fn parse_directions(v: &str) -> Result<Vec<Direction>> {
    match v.trim() {
        "none" | "" => Ok(Vec::new()),
        "all" => Ok(Direction::ALL.to_vec()),
        list => {
            let mut out: Vec<Direction> = Vec::new();
            for part in list.split(',') {
                let d: Direction = part.trim().parse()?;
                if !out.contains(&d) {
                    out.push(d);
                }
            }
            out.sort_by_key(|d| d.index());
            Ok(out)
        }
    }
}

fn format_directions(dirs: &[Direction]) -> String {
    if dirs.is_empty() {
        "none".into()
    } else {
        dirs.iter().map(|d| d.name()).collect::<Vec<_>>().join(",")
    }
}

impl TrainConfig {
    /// Sets one field from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.scene;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "lr_drop_at" => self.lr_drop_at = parse_num(key, v)?,
            "lr_drop_factor" => self.lr_drop_factor = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "nms_iou" => self.nms_iou = parse_num(key, v)?,
            "t" => m.t = parse_num(key, v)?,
            "alpha" => m.alpha = parse_num(key, v)?,
            "k" => m.branches = parse_num(key, v)?,
            "tau" => m.tau = parse_num(key, v)?,
            "eps" => m.eps = parse_num(key, v)?,
            "pool_step_len" => m.pool.step_len = parse_num(key, v)?,
            "pool_initial_steps" => m.pool.initial_steps = parse_num(key, v)?,
            "pool_extra_steps" => m.pool.extra_steps = parse_num(key, v)?,
            "hidden" => m.hidden = parse_num(key, v)?,
            "mil_hidden" => m.mil_hidden = parse_num(key, v)?,
            "feature_grid" => m.feature_grid = parse_num(key, v)?,
            "directions" => m.directions = parse_directions(v)?,
            "ratio_scaling" => m.ratio_scaling = parse_bool(key, v)?,
            "attention" => m.attention = parse_bool(key, v)?,
            "decoder" => m.decoder = parse_bool(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "scenes" => self.scenes = parse_num(key, v)?,
            "classes" => {
                s.classes = parse_num(key, v)?;
                m.classes = s.classes;
                m.channels = s.channels();
            }
            "image_width" => s.image_width = parse_num(key, v)?,
            "image_height" => s.image_height = parse_num(key, v)?,
            "spatial_scale" => s.spatial_scale = parse_num(key, v)?,
            "objects_min" => s.objects_min = parse_num(key, v)?,
            "objects_max" => s.objects_max = parse_num(key, v)?,
            "object_min_size" => s.object_min_size = parse_num(key, v)?,
            "object_max_size" => s.object_max_size = parse_num(key, v)?,
            "distractors" => s.distractors = parse_num(key, v)?,
            "noise" => s.noise = parse_num(key, v)?,
            "near_gt" => s.near_gt = parse_num(key, v)?,
            "part_boxes" => s.part_boxes = parse_num(key, v)?,
            "partial_boxes" => s.partial_boxes = parse_num(key, v)?,
            "loose_boxes" => s.loose_boxes = parse_num(key, v)?,
            "background_boxes" => s.background_boxes = parse_num(key, v)?,
            "decoys" => s.decoys = parse_num(key, v)?,
            "signal" => s.signal = parse_num(key, v)?,
            _ => return Err(CpeError::InvalidInput(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CpeError::InvalidParameter(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad(format!("lr_drop_factor must lie in (0,1], got {}", self.lr_drop_factor));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms_iou must lie in (0,1], got {}", self.nms_iou));
        }
        if self.model.classes != self.scene.classes || self.model.channels != self.scene.channels() {
            return bad("model and scene class counts disagree".into());
        }
        self.model.validate()?;
        self.scene.validate()
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines to `self` without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CpeError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| CpeError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Every field as `key = value` lines; [`TrainConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.scene;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("iterations", self.iterations.to_string());
        kv("lr_drop_at", self.lr_drop_at.to_string());
        kv("lr_drop_factor", self.lr_drop_factor.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("nms_iou", self.nms_iou.to_string());
        kv("t", m.t.to_string());
        kv("alpha", m.alpha.to_string());
        kv("k", m.branches.to_string());
        kv("tau", m.tau.to_string());
        kv("eps", m.eps.to_string());
        kv("pool_step_len", m.pool.step_len.to_string());
        kv("pool_initial_steps", m.pool.initial_steps.to_string());
        kv("pool_extra_steps", m.pool.extra_steps.to_string());
        kv("hidden", m.hidden.to_string());
        kv("mil_hidden", m.mil_hidden.to_string());
        kv("feature_grid", m.feature_grid.to_string());
        kv("directions", format_directions(&m.directions));
        kv("ratio_scaling", m.ratio_scaling.to_string());
        kv("attention", m.attention.to_string());
        kv("decoder", m.decoder.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("scenes", self.scenes.to_string());
        kv("classes", s.classes.to_string());
        kv("image_width", s.image_width.to_string());
        kv("image_height", s.image_height.to_string());
        kv("spatial_scale", s.spatial_scale.to_string());
        kv("objects_min", s.objects_min.to_string());
        kv("objects_max", s.objects_max.to_string());
        kv("object_min_size", s.object_min_size.to_string());
        kv("object_max_size", s.object_max_size.to_string());
        kv("distractors", s.distractors.to_string());
        kv("noise", s.noise.to_string());
        kv("near_gt", s.near_gt.to_string());
        kv("part_boxes", s.part_boxes.to_string());
        kv("partial_boxes", s.partial_boxes.to_string());
        kv("loose_boxes", s.loose_boxes.to_string());
        kv("background_boxes", s.background_boxes.to_string());
        kv("decoys", s.decoys.to_string());
        kv("signal", s.signal.to_string());
        out
    }
}
