//! Finite-difference checks of the two main differentiable paths on small
//! toy inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{dcpe_forward, DcpeDims, DcpeOptions, DcpeParams};
use crate::error::Result;
use crate::features::{FeatureMap, PoolSpec};
use crate::geometry::{BBox, Direction};
use crate::mil::ImageLabel;
use crate::model::{CpeModel, ModelConfig, Sample};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape, Tensor};

pub const GRADCHECK_EPS: f64 = 1e-5;

fn toy_feature_map(rng: &mut ChaCha8Rng, channels: usize, side: usize) -> Result<FeatureMap> {
    let data = (0..channels * side * side)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    FeatureMap::new(Tensor::new(vec![channels, side, side], data)?, 1.0)
}

fn toy_boxes(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Result<Vec<BBox>> {
    (0..n)
        .map(|_| {
            let w = rng.random_range(2.5..side / 2.0);
            let h = rng.random_range(2.5..side / 2.0);
            BBox::new(
                rng.random_range(1.0..side - w - 1.0),
                rng.random_range(1.0..side - h - 1.0),
                w,
                h,
            )
        })
        .collect()
}

fn toy_pool() -> PoolSpec {
    PoolSpec {
        step_len: 3,
        initial_steps: 3,
        extra_steps: 2,
    }
}

/// One directional module over three proposals: sum of semantic scores of
/// both encodings plus the two decoder losses.
pub fn dcpe_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 2;
    let fm = toy_feature_map(&mut rng, 1, 12)?;
    let boxes = toy_boxes(&mut rng, 3, 12.0)?;
    let cfg = ModelConfig {
        classes,
        channels: 1,
        hidden: 3,
        mil_hidden: 4,
        pool: toy_pool(),
        directions: vec![Direction::L2R],
        ..ModelConfig::default()
    };
    let model = CpeModel::new(cfg, seed)?;
    let scene = model.prepare(&Sample {
        features: fm,
        proposals: boxes,
    })?;
    let mut store = ParamStore::new();
    let dims = DcpeDims {
        step_len: 3,
        hidden: 3,
        classes,
    };
    let params = DcpeParams::register(&mut store, Direction::L2R, dims, &mut rng)?;
    let y = ImageLabel::new(vec![1.0, 0.0])?;
    let steps = &scene.steps[0].1;
    grad_check(store.tensors(), GRADCHECK_EPS, |tape: &mut Tape, vars| {
        let head = params.bind(tape, vars)?;
        let out = dcpe_forward(tape, &head, steps, Some(&y), DcpeOptions::default())?;
        let a = tape.sum(out.s_initial)?;
        let b = tape.sum(out.s_extended)?;
        let (l1, l2) = out.loss.expect("decoder enabled");
        tape.add_n(&[a, b, l1, l2])
    })
}

/// The full total loss of a 3-proposal, 2-class, 2-direction model, with
/// pseudo-labels and contrast ranges held at their values at the base point.
pub fn total_loss_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fm = toy_feature_map(&mut rng, 2, 12)?;
    let boxes = toy_boxes(&mut rng, 3, 12.0)?;
    let cfg = ModelConfig {
        classes: 2,
        channels: 2,
        hidden: 3,
        mil_hidden: 4,
        pool: toy_pool(),
        branches: 2,
        directions: vec![Direction::R2L, Direction::T2B],
        ..ModelConfig::default()
    };
    let model = CpeModel::new(cfg, seed)?;
    let scene = model.prepare(&Sample {
        features: fm,
        proposals: boxes,
    })?;
    let y = ImageLabel::new(vec![0.0, 1.0])?;
    let frozen = {
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        model.forward(&mut tape, &vars, &scene, Some(&y), None)?.stats
    };
    grad_check(model.store.tensors(), GRADCHECK_EPS, |tape, vars| {
        let out = model.forward(tape, vars, &scene, Some(&y), Some(&frozen))?;
        Ok(out.losses.expect("labels given").total)
    })
}
