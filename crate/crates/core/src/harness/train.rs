//! SGD with momentum and weight decay over prepared scenes, one image per
//! iteration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CpeError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::scene::SyntheticScene;
use crate::mil::ImageLabel;
use crate::model::{CpeModel, LossValues, PreparedScene};
use crate::tensor::{Tape, Tensor};

/// Loss components of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub scene: usize,
    pub lr: f64,
    pub losses: LossValues,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: CpeModel,
    pub curve: Vec<LossRecord>,
}

/// A scene ready for training: prepared inputs plus its label.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub scene: PreparedScene,
    pub label: ImageLabel,
}

/// Prepares every scene for `model`; scenes without a positive class are
/// rejected.
pub fn prepare_training(model: &CpeModel, scenes: &[SyntheticScene]) -> Result<Vec<TrainItem>> {
    if scenes.is_empty() {
        return Err(CpeError::InvalidInput("empty training set".into()));
    }
    if let Some(s) = scenes.iter().find(|s| !s.label.has_positive()) {
        return Err(CpeError::InvalidInput(format!("scene {} has no positive class", s.id)));
    }
    scenes
        .par_iter()
        .map(|s| {
            Ok(TrainItem {
                scene: model.prepare(&s.sample())?,
                label: s.label.clone(),
            })
        })
        .collect()
}

/// Loss terms and gradients (in store order) at the current parameters.
pub fn loss_and_gradients(model: &CpeModel, item: &TrainItem) -> Result<(LossValues, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape, true);
    let out = model.forward(&mut tape, &vars, &item.scene, Some(&item.label), None)?;
    let losses = model.loss_values(&tape, &out)?.expect("labels given");
    let total = out.losses.as_ref().expect("labels given").total;
    let grads = tape.backward(total)?;
    Ok((losses, vars.iter().map(|&v| grads.get_or_zero(v)).collect()))
}

/// Loss terms without building gradients.
pub fn loss_values(model: &CpeModel, item: &TrainItem) -> Result<LossValues> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape, false);
    let out = model.forward(&mut tape, &vars, &item.scene, Some(&item.label), None)?;
    Ok(model.loss_values(&tape, &out)?.expect("labels given"))
}

/// Mean total loss over `items` (computed in parallel, summed in order).
pub fn mean_total_loss(model: &CpeModel, items: &[TrainItem]) -> Result<f64> {
    let totals: Vec<f64> = items
        .par_iter()
        .map(|it| loss_values(model, it).map(|l| l.total))
        .collect::<Result<_>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

pub fn train(cfg: &TrainConfig, scenes: &[SyntheticScene]) -> Result<TrainResult> {
    cfg.validate()?;
    let model = CpeModel::new(cfg.model.clone(), cfg.seed)?;
    let items = prepare_training(&model, scenes)?;
    train_prepared(cfg, model, &items)
}

/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`; the learning rate is multiplied by
/// `lr_drop_factor` from iteration `lr_drop_at` on. Scenes are visited in a
/// fresh seeded permutation every epoch.
pub fn train_prepared(cfg: &TrainConfig, mut model: CpeModel, items: &[TrainItem]) -> Result<TrainResult> {
    if items.is_empty() {
        return Err(CpeError::InvalidInput("empty training set".into()));
    }
    let frozen = model.frozen_params();
    let trainable: Vec<bool> = model.store.ids().map(|id| !frozen.contains(&id)).collect();
    let mut velocity: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E_ED0F_0DE5);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..items.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled");
        let lr = if it >= cfg.lr_drop_at {
            cfg.lr * cfg.lr_drop_factor
        } else {
            cfg.lr
        };
        let (losses, mut grads) = loss_and_gradients(&model, &items[idx]).map_err(|e| match e {
            CpeError::NonFinite(what) => CpeError::Divergence {
                iteration: it,
                detail: format!("non-finite value in {what}"),
            },
            other => other,
        })?;
        if !losses.total.is_finite() {
            return Err(CpeError::Divergence {
                iteration: it,
                detail: format!("total loss {} on scene {idx}", losses.total),
            });
        }
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            return Err(CpeError::Divergence {
                iteration: it,
                detail: format!(
                    "non-finite gradient for {}",
                    model.store.name(model.store.ids().nth(bad).expect("index"))
                ),
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .zip(&trainable)
                .filter(|(_, &t)| t)
                .flat_map(|(g, _)| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let k = cfg.grad_clip / norm;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
            }
        }
        for (i, id) in model.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let p = model.store.get_mut(id);
            let v = &mut velocity[i];
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grads[i].data()) {
                *vv = cfg.momentum * *vv + gv + cfg.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        curve.push(LossRecord {
            iteration: it,
            scene: idx,
            lr,
            losses,
        });
    }
    Ok(TrainResult { model, curve })
}

/// Writes `iteration,scene,lr,total,cpe,wsddn,refine_1..K`.
pub fn write_curve(w: &mut impl std::io::Write, curve: &[LossRecord]) -> Result<()> {
    let k = curve.first().map_or(0, |r| r.losses.refine.len());
    let mut header = "iteration,scene,lr,total,cpe,wsddn".to_string();
    for i in 1..=k {
        header.push_str(&format!(",refine_{i}"));
    }
    writeln!(w, "{header}")?;
    for r in curve {
        write!(
            w,
            "{},{},{},{},{},{}",
            r.iteration, r.scene, r.lr, r.losses.total, r.losses.cpe, r.losses.wsddn
        )?;
        for v in &r.losses.refine {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
