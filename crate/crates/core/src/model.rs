//! The full detector: MIL scorer with refinement branches, coupled to one
//! contrastive module per enabled extension direction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrast::{cpe_loss, fuse_directions, normalize_contrast, raw_contrast, FusionConfig, RangeStats};
use crate::encoder::{dcpe_forward, DcpeDims, DcpeOptions, DcpeParams};
use crate::error::{CpeError, Result};
use crate::features::{channel_average, pool_pair, proposal_features, DirectionalSteps, FeatureMap, PoolSpec};
use crate::geometry::{extend_box_with, BBox, Direction};
use crate::mil::{
    fuse_semantics, mil_streams, proposal_and_image_scores, refine_labels, refinement_loss, total_loss, wsddn_loss,
    ImageLabel, MilDims, MilParams, PseudoLabel,
};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Channels of the input feature maps.
    pub channels: usize,
    /// Side of the per-channel pooling grid that forms MIL proposal features.
    pub feature_grid: usize,
    pub mil_hidden: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    pub pool: PoolSpec,
    pub branches: usize,
    pub tau: f64,
    pub t: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Enabled directions, in [`Direction::ALL`] order. Empty disables the
    /// contrastive branch entirely.
    pub directions: Vec<Direction>,
    pub ratio_scaling: bool,
    pub attention: bool,
    pub decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            channels: 5,
            feature_grid: 2,
            mil_hidden: 32,
            hidden: 8,
            pool: PoolSpec::default(),
            branches: 3,
            tau: 0.1,
            t: 4.0,
            alpha: 0.5,
            eps: 1e-9,
            directions: Direction::ALL.to_vec(),
            ratio_scaling: true,
            attention: true,
            decoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CpeError::InvalidParameter(m));
        if self.classes == 0 || self.channels == 0 || self.feature_grid == 0 || self.mil_hidden == 0 || self.hidden == 0
        {
            return bad("classes, channels, feature_grid, mil_hidden and hidden must be positive".into());
        }
        if self.pool.step_len == 0 || self.pool.initial_steps == 0 || self.pool.extra_steps == 0 {
            return bad(format!("pool sizes must be positive, got {:?}", self.pool));
        }
        if self.branches == 0 {
            return bad("at least one refinement branch is required".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0,1), got {}", self.tau));
        }
        if !(self.t > 1.0 && self.t.is_finite()) {
            return bad(format!("t must be > 1, got {}", self.t));
        }
        FusionConfig::new(self.alpha, self.eps)?;
        for (i, d) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(d) {
                return bad(format!("direction {} listed twice", d.name()));
            }
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig::new(self.alpha, self.eps).expect("validated")
    }

    /// Whether the contrastive branch is active at all.
    pub fn uses_contrast(&self) -> bool {
        !self.directions.is_empty()
    }

    fn enabled_directions(&self) -> Vec<Direction> {
        Direction::ALL
            .into_iter()
            .filter(|d| self.directions.contains(d))
            .collect()
    }
}

/// A feature map and its proposals: everything the model reads from an image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FeatureMap,
    pub proposals: Vec<BBox>,
}

/// Model inputs that do not depend on parameters, computed once per scene.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub proposals: Vec<BBox>,
    /// `N×F` MIL proposal features.
    pub features: Tensor,
    /// Oriented step sequences per enabled direction, per proposal.
    pub steps: Vec<(Direction, Vec<DirectionalSteps>)>,
}

/// Values held fixed when a forward pass is re-run at perturbed parameters:
/// the contrast normalisation statistics and the refinement pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStats {
    pub ranges: Vec<RangeStats>,
    pub labels: Vec<Vec<PseudoLabel>>,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub cpe: Var,
    pub wsddn: Var,
    pub refine: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `N×C` basic proposal scores.
    pub x_s: Var,
    /// `1×C` image scores.
    pub sigma: Var,
    /// `N×(C+1)` refinement branch scores.
    pub phi: Vec<Var>,
    /// `N×C` fused contrast.
    pub contrast: Var,
    /// Per-direction `(S^B, S^{B_L}, 𝒩)` in enabled order.
    pub directions: Vec<(Direction, Var, Var, Var)>,
    pub losses: Option<LossTerms>,
    pub stats: FrozenStats,
}

/// Loss values read off a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cpe: f64,
    pub wsddn: f64,
    pub refine: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CpeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub mil: MilParams,
    pub dcpe: Vec<DcpeParams>,
}

impl CpeModel {
    /// Fresh parameters drawn from a `ChaCha8` stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = MilDims {
            features: config.channels * config.feature_grid * config.feature_grid,
            hidden: config.mil_hidden,
            classes: config.classes,
            branches: config.branches,
        };
        let mil = MilParams::register(&mut store, dims, &mut rng)?;
        let ddims = DcpeDims {
            step_len: config.pool.step_len,
            hidden: config.hidden,
            classes: config.classes,
        };
        let dcpe = config
            .enabled_directions()
            .into_iter()
            .map(|d| DcpeParams::register(&mut store, d, ddims, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            store,
            mil,
            dcpe,
        })
    }

    /// Parameters that training must leave untouched: the fusion linears
    /// when the contrastive branch is off.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        if self.config.uses_contrast() {
            Vec::new()
        } else {
            self.mil.fusion_ids().to_vec()
        }
    }

    pub fn prepare(&self, sample: &Sample) -> Result<PreparedScene> {
        let fm = &sample.features;
        if fm.channels() != self.config.channels {
            return Err(CpeError::InvalidInput(format!(
                "feature map has {} channels, model expects {}",
                fm.channels(),
                self.config.channels
            )));
        }
        if sample.proposals.is_empty() {
            return Err(CpeError::InvalidInput("scene has no proposals".into()));
        }
        let features = proposal_features(fm, &sample.proposals, self.config.feature_grid)?;
        let img = fm.image_dims();
        let grid = channel_average(fm);
        let steps = self
            .dcpe
            .iter()
            .map(|p| {
                let dir = p.direction;
                let seqs = sample
                    .proposals
                    .iter()
                    .map(|b| {
                        let ext = extend_box_with(b, dir, &img, self.config.t, self.config.ratio_scaling)?;
                        let pair = pool_pair(&grid, b, &ext, dir, self.config.pool, fm.spatial_scale())?;
                        Ok(DirectionalSteps::from_pair(&pair, dir))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((dir, seqs))
            })
            .collect::<Result<_>>()?;
        Ok(PreparedScene {
            proposals: sample.proposals.clone(),
            features,
            steps,
        })
    }

    /// Records the whole model on `tape` with parameters bound to `vars`
    /// (in store order). Losses are built when `labels` is given; `frozen`
    /// pins the normalisation statistics and pseudo-labels.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        scene: &PreparedScene,
        labels: Option<&ImageLabel>,
        frozen: Option<&FrozenStats>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if vars.len() != self.store.len() {
            return Err(CpeError::InvalidInput(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.store.len()
            )));
        }
        if let Some(y) = labels {
            if y.num_classes() != cfg.classes {
                return Err(CpeError::InvalidInput(format!(
                    "label has {} classes, model {}",
                    y.num_classes(),
                    cfg.classes
                )));
            }
        }
        let n = scene.proposals.len();
        let mil = self.mil.bind(vars);
        let x = tape.constant(scene.features.clone());
        let hidden = mil.embed(tape, x)?;
        let (x_cls, x_dec) = mil_streams(tape, &mil, hidden)?;

        let opts = DcpeOptions {
            attention: cfg.attention,
            decoder: cfg.decoder,
        };
        let mut ranges = Vec::with_capacity(self.dcpe.len());
        let mut directions = Vec::with_capacity(self.dcpe.len());
        let mut dec_losses = Vec::new();
        for (i, (p, (dir, seqs))) in self.dcpe.iter().zip(&scene.steps).enumerate() {
            debug_assert_eq!(p.direction, *dir);
            let head = p.bind(tape, vars)?;
            let out = dcpe_forward(tape, &head, seqs, labels, opts)?;
            let raw = raw_contrast(tape, out.s_initial, out.s_extended)?;
            let fixed = frozen.map(|f| f.ranges[i]);
            let (nd, stats) = normalize_contrast(tape, raw, cfg.eps, fixed)?;
            ranges.push(stats);
            directions.push((*dir, out.s_initial, out.s_extended, nd));
            if let Some(l) = out.loss {
                dec_losses.push(l);
            }
        }
        let contrast = if directions.is_empty() {
            tape.constant(Tensor::zeros(&[n, cfg.classes]))
        } else {
            let parts: Vec<(Direction, Var)> = directions.iter().map(|&(d, _, _, nd)| (d, nd)).collect();
            fuse_directions(tape, &parts, &cfg.fusion())?
        };
        let (x_rcls, x_rdec) = fuse_semantics(tape, &mil, x_cls, x_dec, contrast)?;
        let (x_s, sigma) = proposal_and_image_scores(tape, x_rcls, x_rdec)?;
        let phi = mil.refinement_scores(tape, hidden)?;

        let mut pseudo = Vec::new();
        let losses = match labels {
            None => None,
            Some(y) => {
                let wsddn = wsddn_loss(tape, sigma, y)?;
                let mut refine = Vec::with_capacity(phi.len());
                for (k, &phi_k) in phi.iter().enumerate() {
                    let lab = match frozen {
                        Some(f) => f.labels[k].clone(),
                        None => {
                            // the previous branch supplies the seeds; its values are
                            // read as a snapshot, so no gradient reaches them
                            let src = if k == 0 {
                                tape.value(x_s)
                            } else {
                                tape.value(phi[k - 1])
                            };
                            refine_labels(src, &scene.proposals, y, cfg.tau)?
                        }
                    };
                    refine.push(refinement_loss(tape, phi_k, &lab)?);
                    pseudo.push(lab);
                }
                let cpe = if dec_losses.is_empty() {
                    tape.constant(Tensor::scalar(0.0))
                } else {
                    cpe_loss(tape, &dec_losses)?
                };
                let total = total_loss(tape, cpe, wsddn, &refine)?;
                Some(LossTerms {
                    total,
                    cpe,
                    wsddn,
                    refine,
                })
            }
        };
        Ok(ForwardOutput {
            x_s,
            sigma,
            phi,
            contrast,
            directions,
            losses,
            stats: FrozenStats { ranges, labels: pseudo },
        })
    }

    /// Reads the loss terms of a forward pass as numbers.
    pub fn loss_values(&self, tape: &Tape, out: &ForwardOutput) -> Result<Option<LossValues>> {
        let Some(l) = &out.losses else { return Ok(None) };
        Ok(Some(LossValues {
            total: tape.item(l.total)?,
            cpe: tape.item(l.cpe)?,
            wsddn: tape.item(l.wsddn)?,
            refine: l.refine.iter().map(|&v| tape.item(v)).collect::<Result<_>>()?,
        }))
    }

    /// `N×C` detection scores: the contrast-fused proposal scores `x_s`,
    /// each in `[0,1]`. The refinement branches only shape training.
    pub fn predict(&self, scene: &PreparedScene) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, scene, None, None)?;
        Ok(tape.value(out.x_s).clone())
    }
}
