//! Sequential encoding of oriented pooled features: LSTM cell, attention
//! pooling over steps, the sigmoid semantic-score head and the dual-stream
//! decoder attached to each directional encoder.

use rand::Rng;

use crate::error::{CpeError, Result};
use crate::features::{DirectionalSteps, StepSequence};
use crate::geometry::Direction;
use crate::mil::{proposal_and_image_scores, wsddn_loss, ImageLabel, Linear};
use crate::tensor::{uniform, ParamId, ParamStore, Tape, Tensor, Var};

/// LSTM weights on the tape. Gate columns are laid out `[i | f | o | g]`:
/// `w_x` is `input_dim×4M`, `w_h` is `M×4M`, `bias` is `1×4M`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(tape: &Tape, w_x: Var, w_h: Var, bias: Var) -> Result<Self> {
        let (input_dim, four_m) = tape.value(w_x).dims2()?;
        if four_m % 4 != 0 || four_m == 0 {
            return Err(CpeError::InvalidInput(format!(
                "gate width {four_m} is not a multiple of 4"
            )));
        }
        let hidden_dim = four_m / 4;
        if tape.value(w_h).shape() != [hidden_dim, four_m] || tape.value(bias).shape() != [1, four_m] {
            return Err(CpeError::ShapeMismatch {
                op: "lstm_cell",
                lhs: tape.value(w_h).shape().to_vec(),
                rhs: tape.value(bias).shape().to_vec(),
            });
        }
        Ok(Self {
            w_x,
            w_h,
            bias,
            input_dim,
            hidden_dim,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden_dim: usize) -> Self {
        let h = tape.constant(Tensor::zeros(&[1, hidden_dim]));
        let c = tape.constant(Tensor::zeros(&[1, hidden_dim]));
        Self { h, c }
    }
}

/// One step given the already projected input `x·W_x` (`1×4M`).
fn step_projected(tape: &mut Tape, cell: &LstmCell, s: &LstmState, xw: Var) -> Result<LstmState> {
    let m = cell.hidden_dim;
    let hw = tape.matmul(s.h, cell.w_h)?;
    let pre = tape.add(xw, hw)?;
    let pre = tape.add(pre, cell.bias)?;
    let sig = tape.slice_cols(pre, 0, 3 * m)?;
    let sig = tape.sigmoid(sig)?;
    let i = tape.slice_cols(sig, 0, m)?;
    let f = tape.slice_cols(sig, m, m)?;
    let o = tape.slice_cols(sig, 2 * m, m)?;
    let g = tape.slice_cols(pre, 3 * m, m)?;
    let g = tape.tanh(g)?;
    let fc = tape.mul(f, s.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(tape: &mut Tape, cell: &LstmCell, s: &LstmState, x: Var) -> Result<LstmState> {
    let (r, d) = tape.value(x).dims2()?;
    if r != 1 || d != cell.input_dim {
        return Err(CpeError::ShapeMismatch {
            op: "lstm_step",
            lhs: vec![r, d],
            rhs: vec![1, cell.input_dim],
        });
    }
    let xw = tape.matmul(x, cell.w_x)?;
    step_projected(tape, cell, s, xw)
}

/// Folds [`lstm_step`] over the rows of `steps` (`T×input_dim`). Returns the
/// final state and every per-step hidden state.
pub fn encode_steps(tape: &mut Tape, cell: &LstmCell, steps: Var, init: LstmState) -> Result<(LstmState, Vec<Var>)> {
    let (t, d) = tape.value(steps).dims2()?;
    if d != cell.input_dim {
        return Err(CpeError::ShapeMismatch {
            op: "encode_steps",
            lhs: vec![t, d],
            rhs: vec![t, cell.input_dim],
        });
    }
    // Row k of X·W_x is bit-identical to x_k·W_x, so projecting all steps at
    // once keeps encode(a ++ b) == encode(b, encode(a)).
    let xw = tape.matmul(steps, cell.w_x)?;
    let mut state = init;
    let mut hiddens = Vec::with_capacity(t);
    for k in 0..t {
        let row = tape.slice_rows(xw, k, 1)?;
        state = step_projected(tape, cell, &state, row)?;
        hiddens.push(state.h);
    }
    Ok((state, hiddens))
}

/// [`encode_steps`] over a [`StepSequence`]; an empty sequence returns `init`.
pub fn encode_sequence(
    tape: &mut Tape,
    cell: &LstmCell,
    seq: &StepSequence,
    init: LstmState,
) -> Result<(LstmState, Vec<Var>)> {
    match seq.to_tensor() {
        None => Ok((init, Vec::new())),
        Some(x) => {
            if seq.step_len() != cell.input_dim {
                return Err(CpeError::ShapeMismatch {
                    op: "encode_sequence",
                    lhs: vec![seq.len(), seq.step_len()],
                    rhs: vec![seq.len(), cell.input_dim],
                });
            }
            let x = tape.constant(x);
            encode_steps(tape, cell, x, init)
        }
    }
}

/// Query, key and value projections, each `M×M`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Scaled dot-product self-attention over the steps followed by an
/// unweighted mean over steps. Returns a `1×M` row.
pub fn attention_pool(tape: &mut Tape, attn: &Attention, hiddens: &[Var]) -> Result<Var> {
    if hiddens.is_empty() {
        return Err(CpeError::InvalidInput("attention over zero steps".into()));
    }
    let h = tape.concat_rows(hiddens)?;
    let m = tape.value(h).cols();
    let q = tape.matmul(h, attn.w_q)?;
    let k = tape.matmul(h, attn.w_k)?;
    let v = tape.matmul(h, attn.w_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (m as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(weights, v)?;
    tape.mean_rows(mixed)
}

/// `sigmoid(pooled·W + b)`, one row of class scores per pooled row.
pub fn semantic_score(tape: &mut Tape, head: &Linear, pooled: Var) -> Result<Var> {
    let z = head.forward(tape, pooled)?;
    tape.sigmoid(z)
}

/// The two linear heads of a small dual-stream decoder.
#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    pub cls: Linear,
    pub dec: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `1×C` image-level scores.
    pub image_scores: Var,
    pub loss: Option<Var>,
}

/// Class softmax times proposal softmax over `d` (`N×M`), summed over
/// proposals; the loss is the image-level binary cross-entropy.
pub fn decoder_forward(tape: &mut Tape, dec: &Decoder, d: Var, labels: Option<&ImageLabel>) -> Result<DecoderOutput> {
    let x_cls = dec.cls.forward(tape, d)?;
    let x_dec = dec.dec.forward(tape, d)?;
    let (_, sigma) = proposal_and_image_scores(tape, x_cls, x_dec)?;
    let loss = labels.map(|y| wsddn_loss(tape, sigma, y)).transpose()?;
    Ok(DecoderOutput {
        image_scores: sigma,
        loss,
    })
}

/// Dimensions of one directional module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcpeDims {
    pub step_len: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// Parameter handles of one directional module inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DcpeParams {
    pub direction: Direction,
    pub dims: DcpeDims,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    score_w: ParamId,
    score_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// The bound (on-tape) form of [`DcpeParams`].
#[derive(Debug, Clone, Copy)]
pub struct DcpeHead {
    pub cell: LstmCell,
    pub attention: Attention,
    pub score: Linear,
    pub decoder: Decoder,
}

impl DcpeParams {
    /// Registers freshly initialised parameters under `dcpe.<dir>.*`.
    /// Weights are `uniform(±1/√fan_in)`, forget-gate bias starts at 1.
    pub fn register(store: &mut ParamStore, direction: Direction, dims: DcpeDims, rng: &mut impl Rng) -> Result<Self> {
        let DcpeDims {
            step_len,
            hidden: m,
            classes: c,
        } = dims;
        let name = |t: &str| format!("dcpe.{}.{t}", direction.name());
        let in_bound = 1.0 / (step_len as f64).sqrt();
        let m_bound = 1.0 / (m as f64).sqrt();
        let w_x = store.add(name("lstm.w_x"), uniform(rng, &[step_len, 4 * m], in_bound))?;
        let w_h = store.add(name("lstm.w_h"), uniform(rng, &[m, 4 * m], m_bound))?;
        let mut b = uniform(rng, &[1, 4 * m], m_bound);
        b.data_mut()[m..2 * m].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(name("lstm.bias"), b)?;
        let w_q = store.add(name("attn.w_q"), uniform(rng, &[m, m], m_bound))?;
        let w_k = store.add(name("attn.w_k"), uniform(rng, &[m, m], m_bound))?;
        let w_v = store.add(name("attn.w_v"), uniform(rng, &[m, m], m_bound))?;
        let score_w = store.add(name("score.w"), uniform(rng, &[m, c], m_bound))?;
        let score_b = store.add(name("score.b"), uniform(rng, &[1, c], m_bound))?;
        let cls_w = store.add(name("dec.cls.w"), uniform(rng, &[m, c], m_bound))?;
        let cls_b = store.add(name("dec.cls.b"), uniform(rng, &[1, c], m_bound))?;
        let dec_w = store.add(name("dec.det.w"), uniform(rng, &[m, c], m_bound))?;
        let dec_b = store.add(name("dec.det.b"), uniform(rng, &[1, c], m_bound))?;
        Ok(Self {
            direction,
            dims,
            w_x,
            w_h,
            bias,
            w_q,
            w_k,
            w_v,
            score_w,
            score_b,
            cls_w,
            cls_b,
            dec_w,
            dec_b,
        })
    }

    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.w_x,
            self.w_h,
            self.bias,
            self.w_q,
            self.w_k,
            self.w_v,
            self.score_w,
            self.score_b,
            self.cls_w,
            self.cls_b,
            self.dec_w,
            self.dec_b,
        ]
    }

    /// Looks the handles up in the `vars` produced by [`ParamStore::bind`].
    pub fn bind(&self, tape: &Tape, vars: &[Var]) -> Result<DcpeHead> {
        let v = |id: ParamId| vars[id.index()];
        Ok(DcpeHead {
            cell: LstmCell::new(tape, v(self.w_x), v(self.w_h), v(self.bias))?,
            attention: Attention {
                w_q: v(self.w_q),
                w_k: v(self.w_k),
                w_v: v(self.w_v),
            },
            score: Linear {
                w: v(self.score_w),
                b: v(self.score_b),
            },
            decoder: Decoder {
                cls: Linear {
                    w: v(self.cls_w),
                    b: v(self.cls_b),
                },
                dec: Linear {
                    w: v(self.dec_w),
                    b: v(self.dec_b),
                },
            },
        })
    }
}

/// Which optional parts of a directional module are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcpeOptions {
    pub attention: bool,
    pub decoder: bool,
}

impl Default for DcpeOptions {
    fn default() -> Self {
        Self {
            attention: true,
            decoder: true,
        }
    }
}

/// Outputs of one directional module over all proposals of an image.
#[derive(Debug, Clone, Copy)]
pub struct DcpeOutput {
    /// `N×M` encodings of the initial proposals.
    pub d_initial: Var,
    /// `N×M` encodings of the extended proposals.
    pub d_extended: Var,
    /// `N×C` semantic scores of the initial proposals.
    pub s_initial: Var,
    /// `N×C` semantic scores of the extended proposals.
    pub s_extended: Var,
    /// Decoder losses of the initial and extended encodings, when labels
    /// were given and the decoder is enabled.
    pub loss: Option<(Var, Var)>,
}

/// Encodes every proposal's initial steps, continues the same encoder over
/// the extra strip, and scores both encodings.
pub fn dcpe_forward(
    tape: &mut Tape,
    head: &DcpeHead,
    proposals: &[DirectionalSteps],
    labels: Option<&ImageLabel>,
    opts: DcpeOptions,
) -> Result<DcpeOutput> {
    if proposals.is_empty() {
        return Err(CpeError::InvalidInput("no proposals".into()));
    }
    let m = head.cell.hidden_dim;
    let mut d_init = Vec::with_capacity(proposals.len());
    let mut d_ext = Vec::with_capacity(proposals.len());
    for p in proposals {
        let zero = LstmState::zeros(tape, m);
        let (s_init, h_init) = encode_sequence(tape, &head.cell, &p.initial, zero)?;
        let (s_ext, h_extra) = encode_sequence(tape, &head.cell, &p.extra, s_init)?;
        if opts.attention {
            let a = attention_pool(tape, &head.attention, &h_init)?;
            let all: Vec<Var> = h_init.iter().chain(&h_extra).copied().collect();
            // no extra steps: the extended encoding is the initial one
            let b = if h_extra.is_empty() {
                a
            } else {
                attention_pool(tape, &head.attention, &all)?
            };
            d_init.push(a);
            d_ext.push(b);
        } else {
            d_init.push(s_init.h);
            d_ext.push(s_ext.h);
        }
    }
    let d_initial = tape.concat_rows(&d_init)?;
    let d_extended = tape.concat_rows(&d_ext)?;
    let s_initial = semantic_score(tape, &head.score, d_initial)?;
    let s_extended = semantic_score(tape, &head.score, d_extended)?;
    let loss = match (labels, opts.decoder) {
        (Some(y), true) => {
            let l1 = decoder_forward(tape, &head.decoder, d_initial, Some(y))?
                .loss
                .expect("labels given");
            let l2 = decoder_forward(tape, &head.decoder, d_extended, Some(y))?
                .loss
                .expect("labels given");
            Some((l1, l2))
        }
        _ => None,
    };
    Ok(DcpeOutput {
        d_initial,
        d_extended,
        s_initial,
        s_extended,
        loss,
    })
}
