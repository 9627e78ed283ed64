//! Contrast between the semantic scores of initial and extended proposals:
//! absolute difference, whole-matrix min-max normalisation, fusion of the
//! directions, and the averaged decoder loss.

use std::io::Write;

use crate::error::{shape_mismatch, CpeError, Result};
use crate::geometry::Direction;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    alpha: f64,
    eps: f64,
}

impl FusionConfig {
    pub fn new(alpha: f64, eps: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CpeError::InvalidParameter(format!(
                "alpha must lie in (0,1), got {alpha}"
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(CpeError::InvalidParameter(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { alpha, eps })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Weight of a direction in the fused matrix.
    pub fn weight(&self, dir: Direction) -> f64 {
        if dir.is_horizontal() {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastTag {
    Direction(Direction),
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    pub values: Tensor,
    pub tag: ContrastTag,
}

/// Min and range of a raw contrast matrix. `None` range means degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeStats {
    pub min: f64,
    pub range: Option<f64>,
}

impl RangeStats {
    pub fn of(raw: &Tensor, eps: f64) -> Result<Self> {
        if !raw.all_finite() {
            return Err(CpeError::NonFinite("normalize_contrast"));
        }
        let min = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        Ok(Self {
            min,
            range: (range >= eps).then_some(range),
        })
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `|S^B - S^{B_L}|` on the tape.
pub fn raw_contrast(tape: &mut Tape, s_b: Var, s_bl: Var) -> Result<Var> {
    let d = tape.sub(s_b, s_bl)?;
    tape.abs(d)
}

/// `(raw - min) / (max - min)` over the whole matrix, with min and max held
/// constant in the backward pass. A range below `eps` gives zeros. `frozen`
/// replaces the statistics measured on `raw`.
pub fn normalize_contrast(
    tape: &mut Tape,
    raw: Var,
    eps: f64,
    frozen: Option<RangeStats>,
) -> Result<(Var, RangeStats)> {
    let stats = match frozen {
        Some(s) => s,
        None => RangeStats::of(tape.value(raw), eps)?,
    };
    let out = match stats.range {
        Some(range) => tape.rescale(raw, stats.min, range)?,
        None => tape.constant(Tensor::zeros(tape.value(raw).shape())),
    };
    Ok((out, stats))
}

/// `α·Σ horizontal + (1-α)·Σ vertical`; absent directions contribute zero.
pub fn fuse_directions(tape: &mut Tape, parts: &[(Direction, Var)], cfg: &FusionConfig) -> Result<Var> {
    let Some(&(_, first)) = parts.first() else {
        return Err(CpeError::InvalidInput("no directions to fuse".into()));
    };
    let shape = tape.value(first).shape().to_vec();
    let mut terms = Vec::with_capacity(parts.len());
    for &(dir, v) in parts {
        if tape.value(v).shape() != shape {
            return Err(shape_mismatch("fuse_directions", &shape, tape.value(v).shape()));
        }
        terms.push(tape.scale(v, cfg.weight(dir))?);
    }
    tape.add_n(&terms)
}

/// Mean over directions of `L¹_W + L²_W`.
pub fn cpe_loss(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(CpeError::InvalidInput("no direction losses".into()));
    }
    let mut terms = Vec::with_capacity(2 * pairs.len());
    for &(a, b) in pairs {
        terms.push(a);
        terms.push(b);
    }
    let s = tape.add_n(&terms)?;
    if tape.item(s)?.is_nan() {
        return Err(CpeError::NonFinite("cpe_loss"));
    }
    tape.scale(s, 1.0 / pairs.len() as f64)
}

/// Plain-tensor form of [`raw_contrast`].
pub fn raw_contrast_values(s_b: &Tensor, s_bl: &Tensor) -> Result<Tensor> {
    check_same("raw_contrast", s_b, s_bl)?;
    let data = s_b.data().iter().zip(s_bl.data()).map(|(a, b)| (a - b).abs()).collect();
    Tensor::new(s_b.shape().to_vec(), data)
}

/// Plain-tensor form of [`normalize_contrast`].
pub fn normalize_contrast_values(raw: &Tensor, eps: f64, dir: Direction) -> Result<ContrastMatrix> {
    let stats = RangeStats::of(raw, eps)?;
    let values = match stats.range {
        Some(range) => {
            let data = raw.data().iter().map(|x| (x - stats.min) / range).collect();
            Tensor::new(raw.shape().to_vec(), data)?
        }
        None => Tensor::zeros(raw.shape()),
    };
    Ok(ContrastMatrix {
        values,
        tag: ContrastTag::Direction(dir),
    })
}

/// Plain-tensor form of [`fuse_directions`] over the four sides.
pub fn fuse_four(
    n_l: &ContrastMatrix,
    n_r: &ContrastMatrix,
    n_b: &ContrastMatrix,
    n_t: &ContrastMatrix,
    cfg: &FusionConfig,
) -> Result<ContrastMatrix> {
    for m in [n_r, n_b, n_t] {
        check_same("fuse_directions", &n_l.values, &m.values)?;
    }
    let a = cfg.alpha;
    let data = (0..n_l.values.len())
        .map(|i| {
            let at = |m: &ContrastMatrix| m.values.data()[i];
            a * (at(n_l) + at(n_r)) + (1.0 - a) * (at(n_b) + at(n_t))
        })
        .collect();
    Ok(ContrastMatrix {
        values: Tensor::new(n_l.values.shape().to_vec(), data)?,
        tag: ContrastTag::Fused,
    })
}

/// Plain-number form of [`cpe_loss`].
pub fn cpe_loss_values(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CpeError::InvalidInput("no direction losses".into()));
    }
    if pairs.iter().any(|(a, b)| a.is_nan() || b.is_nan()) {
        return Err(CpeError::NonFinite("cpe_loss"));
    }
    Ok(pairs.iter().map(|(a, b)| a + b).sum::<f64>() / pairs.len() as f64)
}

/// Scores of one direction for the debug dump.
#[derive(Debug, Clone)]
pub struct DirectionDump {
    pub direction: Direction,
    pub s_initial: Tensor,
    pub s_extended: Tensor,
    pub contrast: Tensor,
}

/// Writes `proposal_id,class_id,direction,s_b,s_bl,n,fused`, one row per
/// proposal, class and direction.
pub fn write_contrast_dump(w: &mut impl Write, dirs: &[DirectionDump], fused: &Tensor) -> Result<()> {
    writeln!(w, "proposal_id,class_id,direction,s_b,s_bl,n,fused")?;
    let (n, c) = fused.dims2()?;
    for d in dirs {
        for t in [&d.s_initial, &d.s_extended, &d.contrast] {
            check_same("write_contrast_dump", fused, t)?;
        }
    }
    for i in 0..n {
        for k in 0..c {
            for d in dirs {
                writeln!(
                    w,
                    "{i},{k},{},{},{},{},{}",
                    d.direction.name(),
                    d.s_initial.at(i, k),
                    d.s_extended.at(i, k),
                    d.contrast.at(i, k),
                    fused.at(i, k)
                )?;
            }
        }
    }
    Ok(())
}
