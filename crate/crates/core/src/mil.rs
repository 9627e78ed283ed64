//! Dual-stream MIL scoring, semantic fusion with contrast scores, image-level
//! loss, online refinement branches with pseudo-labels, and the total loss.

use rand::Rng;

use crate::error::{CpeError, Result};
use crate::geometry::BBox;
use crate::tensor::{uniform, ParamId, ParamStore, Tape, Tensor, Var};

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-6;
/// Floor applied to refinement probabilities before the log.
pub const CE_EPS: f64 = 1e-12;

/// Binary image-level class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLabel {
    y: Vec<f64>,
}

impl ImageLabel {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(CpeError::InvalidInput("empty label vector".into()));
        }
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(CpeError::InvalidInput(format!(
                "label entries must be 0 or 1, got {bad}"
            )));
        }
        Ok(Self { y })
    }

    /// Label with ones at `classes`.
    pub fn from_classes(num_classes: usize, classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut y = vec![0.0; num_classes];
        for c in classes {
            *y.get_mut(c)
                .ok_or_else(|| CpeError::InvalidInput(format!("class {c} out of range {num_classes}")))? = 1.0;
        }
        Self::new(y)
    }

    pub fn num_classes(&self) -> usize {
        self.y.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn is_positive(&self, c: usize) -> bool {
        self.y.get(c) == Some(&1.0)
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.y.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(c, _)| c)
    }

    pub fn has_positive(&self) -> bool {
        self.positives().next().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MilDims {
    /// Width of the per-proposal input features.
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Number of refinement branches.
    pub branches: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

impl LinearIds {
    fn register(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("mil.{name}.w"), w)?,
            b: store.add(format!("mil.{name}.b"), b)?,
        })
    }

    fn random(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform(rng, &[fan_in, fan_out], bound);
        let b = uniform(rng, &[1, fan_out], bound);
        Self::register(store, name, w, b)
    }

    fn bind(self, vars: &[Var]) -> Linear {
        Linear {
            w: vars[self.w.index()],
            b: vars[self.b.index()],
        }
    }
}

/// `x·W + b` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row(y, self.b)
    }
}

/// Handles of the MIL detector's parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MilParams {
    pub dims: MilDims,
    fc1: LinearIds,
    fc2: LinearIds,
    cls: LinearIds,
    dec: LinearIds,
    fuse_cls: LinearIds,
    fuse_dec: LinearIds,
    refine: Vec<LinearIds>,
}

/// `[I | 0]` stacked as a `2C×C` weight: passes the first `C` inputs through.
pub fn block_identity(c: usize) -> Tensor {
    let mut w = Tensor::zeros(&[2 * c, c]);
    for i in 0..c {
        w.set(i, i, 1.0);
    }
    w
}

impl MilParams {
    pub fn register(store: &mut ParamStore, dims: MilDims, rng: &mut impl Rng) -> Result<Self> {
        let MilDims {
            features,
            hidden,
            classes: c,
            branches,
        } = dims;
        if features == 0 || hidden == 0 || c == 0 || branches == 0 {
            return Err(CpeError::InvalidParameter(format!("degenerate MIL dims {dims:?}")));
        }
        let fc1 = LinearIds::random(store, "fc1", features, hidden, rng)?;
        let fc2 = LinearIds::random(store, "fc2", hidden, hidden, rng)?;
        let cls = LinearIds::random(store, "cls", hidden, c, rng)?;
        let dec = LinearIds::random(store, "dec", hidden, c, rng)?;
        let fuse_cls = LinearIds::register(store, "fuse_cls", block_identity(c), Tensor::zeros(&[1, c]))?;
        let fuse_dec = LinearIds::register(store, "fuse_dec", block_identity(c), Tensor::zeros(&[1, c]))?;
        let refine = (0..branches)
            .map(|k| LinearIds::random(store, &format!("refine{k}"), hidden, c + 1, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            dims,
            fc1,
            fc2,
            cls,
            dec,
            fuse_cls,
            fuse_dec,
            refine,
        })
    }

    /// Parameters of the two fusion linears.
    pub fn fusion_ids(&self) -> [ParamId; 4] {
        [self.fuse_cls.w, self.fuse_cls.b, self.fuse_dec.w, self.fuse_dec.b]
    }

    pub fn bind(&self, vars: &[Var]) -> MilHead {
        MilHead {
            fc1: self.fc1.bind(vars),
            fc2: self.fc2.bind(vars),
            cls: self.cls.bind(vars),
            dec: self.dec.bind(vars),
            fuse_cls: self.fuse_cls.bind(vars),
            fuse_dec: self.fuse_dec.bind(vars),
            refine: self.refine.iter().map(|l| l.bind(vars)).collect(),
        }
    }
}

/// The bound (on-tape) form of [`MilParams`].
#[derive(Debug, Clone)]
pub struct MilHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub dec: Linear,
    pub fuse_cls: Linear,
    pub fuse_dec: Linear,
    pub refine: Vec<Linear>,
}

impl MilHead {
    /// Shared proposal embedding: two ReLU linears.
    pub fn embed(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, features)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, h)?;
        tape.relu(h)
    }

    /// Row-softmaxed scores `φ^k` (`N×(C+1)`) of every refinement branch.
    pub fn refinement_scores(&self, tape: &mut Tape, hidden: Var) -> Result<Vec<Var>> {
        self.refine
            .iter()
            .map(|l| {
                let z = l.forward(tape, hidden)?;
                tape.softmax_rows(z)
            })
            .collect()
    }
}

/// Raw classification and detection logits (`N×C` each).
pub fn mil_streams(tape: &mut Tape, head: &MilHead, hidden: Var) -> Result<(Var, Var)> {
    if tape.value(hidden).rows() == 0 {
        return Err(CpeError::InvalidInput("no proposals".into()));
    }
    let x_cls = head.cls.forward(tape, hidden)?;
    let x_dec = head.dec.forward(tape, hidden)?;
    Ok((x_cls, x_dec))
}

/// `x_r = Linear([x, 𝒩])` for both streams.
pub fn fuse_semantics(tape: &mut Tape, head: &MilHead, x_cls: Var, x_dec: Var, n: Var) -> Result<(Var, Var)> {
    let shape = tape.value(x_cls).shape().to_vec();
    for v in [x_dec, n] {
        if tape.value(v).shape() != shape {
            return Err(CpeError::ShapeMismatch {
                op: "fuse_semantics",
                lhs: shape,
                rhs: tape.value(v).shape().to_vec(),
            });
        }
    }
    let cat_cls = tape.concat_cols(&[x_cls, n])?;
    let cat_dec = tape.concat_cols(&[x_dec, n])?;
    let x_rcls = head.fuse_cls.forward(tape, cat_cls)?;
    let x_rdec = head.fuse_dec.forward(tape, cat_dec)?;
    Ok((x_rcls, x_rdec))
}

/// `x_s = softmax_rows(x_rcls) ⊙ softmax_cols(x_rdec)` and its column sums
/// `σ` (`1×C`).
pub fn proposal_and_image_scores(tape: &mut Tape, x_rcls: Var, x_rdec: Var) -> Result<(Var, Var)> {
    let a = tape.softmax_rows(x_rcls)?;
    let b = tape.softmax_cols(x_rdec)?;
    let x_s = tape.mul(a, b)?;
    let sigma = tape.sum_rows(x_s)?;
    Ok((x_s, sigma))
}

/// Image-level binary cross-entropy summed over classes.
pub fn wsddn_loss(tape: &mut Tape, sigma: Var, y: &ImageLabel) -> Result<Var> {
    let (r, c) = tape.value(sigma).dims2()?;
    if r != 1 || c != y.num_classes() {
        return Err(CpeError::ShapeMismatch {
            op: "wsddn_loss",
            lhs: vec![r, c],
            rhs: vec![1, y.num_classes()],
        });
    }
    let p = tape.clamp(sigma, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(q)?;
    let yv = tape.constant(Tensor::row(y.values().to_vec()));
    let ny = tape.constant(Tensor::row(y.values().iter().map(|v| 1.0 - v).collect()));
    let pos = tape.mul(yv, log_p)?;
    let neg = tape.mul(ny, log_q)?;
    let both = tape.add(pos, neg)?;
    let s = tape.sum(both)?;
    tape.scale(s, -1.0)
}

/// Pseudo-label for one proposal: an object class index or background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PseudoLabel {
    Class(usize),
    Background,
}

impl PseudoLabel {
    /// Column in an `N×(C+1)` score matrix; background is column `C`.
    pub fn column(self, num_classes: usize) -> usize {
        match self {
            PseudoLabel::Class(c) => c,
            PseudoLabel::Background => num_classes,
        }
    }
}

/// Seeds each positive class at its top-scoring proposal (lowest index on
/// ties) and labels every proposal overlapping a seed with IoU above `tau`.
/// A proposal qualifying for several classes takes the one whose seed it
/// overlaps most, then the lowest class index.
///
/// `scores` is `N×C` or `N×(C+1)`; a trailing background column is ignored.
pub fn refine_labels(scores: &Tensor, boxes: &[BBox], y: &ImageLabel, tau: f64) -> Result<Vec<PseudoLabel>> {
    let (n, cols) = scores.dims2()?;
    let c = y.num_classes();
    if n == 0 || n != boxes.len() {
        return Err(CpeError::InvalidInput(format!(
            "{n} score rows for {} boxes",
            boxes.len()
        )));
    }
    if cols != c && cols != c + 1 {
        return Err(CpeError::ShapeMismatch {
            op: "refine_labels",
            lhs: vec![n, cols],
            rhs: vec![n, c],
        });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CpeError::InvalidParameter(format!("tau must lie in (0,1), got {tau}")));
    }
    if !y.has_positive() {
        return Err(CpeError::InvalidInput(
            "pseudo-labels need at least one positive class".into(),
        ));
    }
    let seeds: Vec<(usize, usize)> = y
        .positives()
        .map(|cls| {
            let mut best = 0;
            for i in 1..n {
                if scores.at(i, cls) > scores.at(best, cls) {
                    best = i;
                }
            }
            (cls, best)
        })
        .collect();
    Ok(boxes
        .iter()
        .map(|b| {
            let mut label = PseudoLabel::Background;
            let mut best_iou = tau;
            for &(cls, seed) in &seeds {
                let o = b.iou(&boxes[seed]);
                if o > best_iou {
                    best_iou = o;
                    label = PseudoLabel::Class(cls);
                }
            }
            label
        })
        .collect())
}

/// Mean cross-entropy of `phi` (`N×(C+1)`, rows are distributions) against
/// hard labels.
pub fn refinement_loss(tape: &mut Tape, phi: Var, labels: &[PseudoLabel]) -> Result<Var> {
    let (n, width) = tape.value(phi).dims2()?;
    if n != labels.len() || n == 0 {
        return Err(CpeError::InvalidInput(format!("{} labels for {n} rows", labels.len())));
    }
    let c = width - 1;
    let mut index = Vec::with_capacity(n);
    for (i, l) in labels.iter().enumerate() {
        let col = l.column(c);
        if col >= width || matches!(l, PseudoLabel::Class(k) if *k >= c) {
            return Err(CpeError::InvalidInput(format!(
                "label {l:?} out of range for {c} classes"
            )));
        }
        index.push(i * width + col);
    }
    let picked = tape.gather(phi, index, vec![1, n])?;
    let picked = tape.clamp(picked, CE_EPS, 1.0)?;
    let logs = tape.log(picked)?;
    let m = tape.mean(logs)?;
    tape.scale(m, -1.0)
}

/// `L_CPE + L_W + Σ_k L_r^k`.
pub fn total_loss(tape: &mut Tape, l_cpe: Var, l_w: Var, l_r: &[Var]) -> Result<Var> {
    let mut terms = vec![l_cpe, l_w];
    terms.extend_from_slice(l_r);
    let t = tape.add_n(&terms)?;
    let v = tape.item(t)?;
    if v.is_nan() {
        return Err(CpeError::NonFinite("total_loss"));
    }
    Ok(t)
}

/// Plain-number form of [`total_loss`].
pub fn total_loss_value(l_cpe: f64, l_w: f64, l_r: &[f64]) -> Result<f64> {
    let v = l_cpe + l_w + l_r.iter().sum::<f64>();
    if v.is_nan() {
        return Err(CpeError::NonFinite("total_loss"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn label_validation() {
        assert!(ImageLabel::new(vec![1.0, 0.5]).is_err());
        assert!(ImageLabel::new(vec![]).is_err());
        let y = ImageLabel::from_classes(3, [2, 0]).unwrap();
        assert_eq!(y.values(), &[1.0, 0.0, 1.0]);
        assert_eq!(y.positives().collect::<Vec<_>>(), vec![0, 2]);
        assert!(ImageLabel::from_classes(2, [2]).is_err());
    }

    #[test]
    fn streams_with_hand_weights() {
        let mut tape = Tape::new();
        let zero = Linear {
            w: tape.constant(Tensor::zeros(&[2, 3])),
            b: tape.constant(Tensor::zeros(&[1, 3])),
        };
        let hand = Linear {
            w: tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.5, 2.0, 0.0]]).unwrap()),
            b: tape.constant(Tensor::row(vec![0.1, 0.0, 0.0])),
        };
        let head = MilHead {
            fc1: zero,
            fc2: zero,
            cls: zero,
            dec: hand,
            fuse_cls: zero,
            fuse_dec: zero,
            refine: vec![],
        };
        let h = tape.constant(Tensor::row(vec![2.0, 1.0]));
        let (c, d) = mil_streams(&mut tape, &head, h).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 0.0, 0.0]);
        // [2,1]·W + b = [2.5+0.1, 2, -2]
        assert_eq!(tape.value(d).data(), &[2.6, 2.0, -2.0]);
    }

    fn fusion_head(tape: &mut Tape, w: Tensor) -> MilHead {
        let c = w.cols();
        let z = Linear {
            w: tape.constant(Tensor::zeros(&[1, 1])),
            b: tape.constant(Tensor::zeros(&[1, 1])),
        };
        let f = Linear {
            w: tape.constant(w),
            b: tape.constant(Tensor::zeros(&[1, c])),
        };
        MilHead {
            fc1: z,
            fc2: z,
            cls: z,
            dec: z,
            fuse_cls: f,
            fuse_dec: f,
            refine: vec![],
        }
    }

    #[test]
    fn fusion_block_identity_passthrough() {
        let mut tape = Tape::new();
        let head = fusion_head(&mut tape, block_identity(3));
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![4.0, 0.0, -0.5]]).unwrap());
        let n = tape.constant(Tensor::zeros(&[2, 3]));
        let (r, d) = fuse_semantics(&mut tape, &head, x, x, n).unwrap();
        assert_eq!(tape.value(r), tape.value(x));
        assert_eq!(tape.value(d), tape.value(x));
    }

    #[test]
    fn fusion_hand_weights() {
        // C=2, N=1: [x | n] = [1, 2, 0.5, 0.25]
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0], vec![4.0, 8.0]]).unwrap();
        let mut tape = Tape::new();
        let head = fusion_head(&mut tape, w);
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let n = tape.constant(Tensor::row(vec![0.5, 0.25]));
        let (r, _) = fuse_semantics(&mut tape, &head, x, x, n).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0 + 1.0 + 1.0, 2.0 - 0.5 + 2.0]);
        let bad = tape.constant(Tensor::row(vec![0.5]));
        assert!(fuse_semantics(&mut tape, &head, x, x, bad).is_err());
    }

    #[test]
    fn uniform_scores() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 2]));
        let (xs, sigma) = proposal_and_image_scores(&mut tape, z, z).unwrap();
        assert!(tape.value(xs).data().iter().all(|&v| v == 0.125));
        assert_eq!(tape.value(sigma).data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_proposal_scores_are_class_softmax() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0, 0.0]));
        let b = tape.constant(Tensor::row(vec![5.0, -3.0, 0.2]));
        let (_, sigma) = proposal_and_image_scores(&mut tape, a, b).unwrap();
        let s: f64 = tape.value(sigma).data().iter().sum();
        assert!(close(s, 1.0, 1e-15));
    }

    fn bce(sigma: &[f64], y: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(sigma.to_vec()));
        let l = wsddn_loss(&mut tape, s, &ImageLabel::new(y.to_vec()).unwrap()).unwrap();
        tape.item(l).unwrap()
    }

    #[test]
    fn wsddn_loss_examples() {
        assert!(close(bce(&[0.5], &[1.0]), std::f64::consts::LN_2, 1e-12));
        assert!(bce(&[1.0 - 1e-9], &[1.0]) < 1e-5);
        let v = bce(&[0.8, 0.2], &[1.0, 0.0]);
        assert!(close(v, -2.0 * 0.8f64.ln(), 1e-12));
        assert!(close(v, 0.4463, 1e-4));
        // clamping keeps the loss finite
        assert!(bce(&[0.0, 1.0], &[1.0, 0.0]).is_finite());
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(vec![0.5]));
        assert!(wsddn_loss(&mut tape, s, &ImageLabel::new(vec![1.0, 0.0]).unwrap()).is_err());
    }

    fn ce(rows: &[Vec<f64>], labels: &[PseudoLabel]) -> Result<f64> {
        let mut tape = Tape::new();
        let phi = tape.constant(Tensor::from_rows(rows).unwrap());
        let l = refinement_loss(&mut tape, phi, labels)?;
        tape.item(l)
    }

    #[test]
    fn refinement_loss_examples() {
        let uniform_row = vec![1.0 / 21.0; 21];
        let v = ce(
            &[uniform_row.clone(), uniform_row],
            &[PseudoLabel::Class(3), PseudoLabel::Background],
        )
        .unwrap();
        assert!(close(v, 21f64.ln(), 1e-12));
        assert!(close(v, 3.0445, 1e-4));
        let v = ce(&[vec![0.0, 1.0, 0.0]], &[PseudoLabel::Class(1)]).unwrap();
        assert!(v.abs() < 1e-12);
        let v = ce(
            &[vec![0.7, 0.2, 0.1], vec![0.5, 0.2, 0.3]],
            &[PseudoLabel::Class(0), PseudoLabel::Class(1)],
        )
        .unwrap();
        assert!(close(v, -(0.7f64.ln() + 0.2f64.ln()) / 2.0, 1e-12));
        assert!(close(v, 0.9831, 1e-4));
        assert!(ce(&[vec![0.5, 0.5]], &[PseudoLabel::Class(1)]).is_err());
        assert!(ce(&[vec![0.5, 0.5]], &[]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss_value(1.0, 1.0, &[1.0, 1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(total_loss_value(0.0, 0.0, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(close(total_loss_value(0.5, 1.5, &[0.1, 0.2, 0.3]).unwrap(), 2.6, 1e-12));
        assert!(total_loss_value(f64::NAN, 0.0, &[]).is_err());
        let mut tape = Tape::new();
        let v: Vec<Var> = [0.5, 1.5, 0.1, 0.2, 0.3]
            .iter()
            .map(|&x| tape.constant(Tensor::scalar(x)))
            .collect();
        let t = total_loss(&mut tape, v[0], v[1], &v[2..]).unwrap();
        assert!(close(tape.item(t).unwrap(), 2.6, 1e-12));
    }

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn refine_labels_examples() {
        let y = ImageLabel::new(vec![0.0, 1.0]).unwrap();
        let one = Tensor::row(vec![0.2, 0.1]);
        assert_eq!(
            refine_labels(&one, &[bx(0.0, 0.0, 4.0, 4.0)], &y, 0.1).unwrap(),
            vec![PseudoLabel::Class(1)]
        );
        let two = Tensor::from_rows(&[vec![0.2, 0.9], vec![0.3, 0.1]]).unwrap();
        let boxes = [bx(0.0, 0.0, 4.0, 4.0), bx(10.0, 10.0, 4.0, 4.0)];
        assert_eq!(
            refine_labels(&two, &boxes, &y, 0.1).unwrap(),
            vec![PseudoLabel::Class(1), PseudoLabel::Background]
        );
        // a background column is ignored
        let with_bg = Tensor::from_rows(&[vec![0.2, 0.9, 0.0], vec![0.3, 0.1, 5.0]]).unwrap();
        assert_eq!(
            refine_labels(&with_bg, &boxes, &y, 0.1).unwrap(),
            refine_labels(&two, &boxes, &y, 0.1).unwrap()
        );
        let none = ImageLabel::new(vec![0.0, 0.0]).unwrap();
        assert!(refine_labels(&two, &boxes, &none, 0.1).is_err());
        assert!(refine_labels(&two, &boxes[..1], &y, 0.1).is_err());
        assert!(refine_labels(&two, &boxes, &y, 1.0).is_err());
    }

    #[test]
    fn shared_seed_goes_to_lower_class() {
        let y = ImageLabel::new(vec![1.0, 1.0]).unwrap();
        let s = Tensor::from_rows(&[vec![0.9, 0.9], vec![0.1, 0.1]]).unwrap();
        let boxes = [bx(0.0, 0.0, 4.0, 4.0), bx(1.0, 0.0, 4.0, 4.0)];
        assert_eq!(
            refine_labels(&s, &boxes, &y, 0.1).unwrap(),
            vec![PseudoLabel::Class(0); 2]
        );
    }

    /// Direct reading of the labelling rule: collect every (class, IoU) pair
    /// that passes the threshold, then sort by IoU descending and class
    /// ascending.
    fn brute_labels(scores: &Tensor, boxes: &[BBox], y: &ImageLabel, tau: f64) -> Vec<PseudoLabel> {
        let n = boxes.len();
        let mut seed = vec![None; y.num_classes()];
        for (c, s) in seed.iter_mut().enumerate() {
            if !y.is_positive(c) {
                continue;
            }
            let top = (0..n).map(|i| scores.at(i, c)).fold(f64::NEG_INFINITY, f64::max);
            *s = (0..n).find(|&i| scores.at(i, c) == top);
        }
        (0..n)
            .map(|i| {
                let mut cands: Vec<(f64, usize)> = seed
                    .iter()
                    .enumerate()
                    .filter_map(|(c, s)| s.map(|s| (boxes[i].iou(&boxes[s]), c)))
                    .filter(|&(o, _)| o > tau)
                    .collect();
                cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                cands
                    .first()
                    .map_or(PseudoLabel::Background, |&(_, c)| PseudoLabel::Class(c))
            })
            .collect()
    }

    proptest! {
        #[test]
        fn refine_labels_matches_brute_force(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            let boxes: Vec<BBox> = (0..n).map(|_| {
                bx(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), rng.random_range(1.0..12.0), rng.random_range(1.0..12.0))
            }).collect();
            // coarse scores make ties common
            let scores = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.random_range(0..5) as f64).collect()).unwrap();
            let mut y: Vec<f64> = (0..3).map(|_| rng.random_range(0..2) as f64).collect();
            y[rng.random_range(0..3)] = 1.0;
            let y = ImageLabel::new(y).unwrap();
            prop_assert_eq!(refine_labels(&scores, &boxes, &y, 0.1).unwrap(), brute_labels(&scores, &boxes, &y, 0.1));
        }

        #[test]
        fn image_scores_bounded(seed in 0u64..500, n in 1usize..10, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.constant(uniform(&mut rng, &[n, c], 20.0));
            let b = tape.constant(uniform(&mut rng, &[n, c], 20.0));
            let (xs, sigma) = proposal_and_image_scores(&mut tape, a, b).unwrap();
            prop_assert!(tape.value(xs).data().iter().all(|&v| v >= 0.0));
            prop_assert!(tape.value(sigma).data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn registered_fusion_starts_at_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dims = MilDims {
            features: 5,
            hidden: 4,
            classes: 3,
            branches: 3,
        };
        let p = MilParams::register(&mut store, dims, &mut rng).unwrap();
        assert_eq!(store.get(p.fusion_ids()[0]), &block_identity(3));
        assert_eq!(store.by_name("mil.refine2.w").unwrap().shape(), &[4, 4]);
        assert!(store.iter().all(|(n, _)| n.starts_with("mil.")));
    }

    #[test]
    fn mil_loss_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dims = MilDims {
            features: 4,
            hidden: 3,
            classes: 2,
            branches: 2,
        };
        let p = MilParams::register(&mut store, dims, &mut rng).unwrap();
        let feats = uniform(&mut rng, &[3, 4], 1.0);
        let n = uniform(&mut rng, &[3, 2], 1.0);
        let y = ImageLabel::new(vec![1.0, 0.0]).unwrap();
        let labels = [PseudoLabel::Class(0), PseudoLabel::Background, PseudoLabel::Class(0)];
        let r = grad_check(store.tensors(), 1e-5, |tape, vars| {
            let head = p.bind(vars);
            let f = tape.constant(feats.clone());
            let h = head.embed(tape, f)?;
            let (c, d) = mil_streams(tape, &head, h)?;
            let nv = tape.constant(n.clone());
            let (rc, rd) = fuse_semantics(tape, &head, c, d, nv)?;
            let (_, sigma) = proposal_and_image_scores(tape, rc, rd)?;
            let lw = wsddn_loss(tape, sigma, &y)?;
            let phis = head.refinement_scores(tape, h)?;
            let lr = phis
                .iter()
                .map(|&phi| refinement_loss(tape, phi, &labels))
                .collect::<Result<Vec<_>>>()?;
            let zero = tape.constant(Tensor::scalar(0.0));
            total_loss(tape, zero, lw, &lr)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }
}
