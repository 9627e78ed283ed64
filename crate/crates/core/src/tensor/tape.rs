use super::{matmul_raw, Tensor};
use crate::error::{shape_mismatch, CpeError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SumAll(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    ChannelMean(Var),
    /// `(x - min) / range` with `min` and `range` held constant.
    Rescale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order. One forward pass,
/// one call to [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// The gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same length")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same length")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(shape_mismatch("matmul", &[m, k], &[k2, n]));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let t = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let t = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let t = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + row` with `row` (`1×n`) broadcast over the rows of `a` (`m×n`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (r, n2) = self.dims(row)?;
        if r != 1 || n != n2 {
            return Err(shape_mismatch("add_row", &[m, n], &[r, n2]));
        }
        let b = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// Sum of same-shaped tensors. Summation runs left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| CpeError::InvalidInput("add_n of nothing".into()))?;
        let mut t = self.value(first).clone();
        for &x in &xs[1..] {
            same_shape("add_n", &t, self.value(x))?;
            for (o, v) in t.data_mut().iter_mut().zip(self.value(x).data()) {
                *o += v;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(t, Op::AddN(xs.to_vec()), rg))
    }

    /// `a * k`.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = map(self.value(a), |x| x * k);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Affine(a, k), rg))
    }

    /// `a * k + c`.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Result<Var> {
        let t = map(self.value(a), |x| x * k + c);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Affine(a, k), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = map(self.value(a), sigmoid);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sigmoid(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Tanh(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Relu(a), rg))
    }

    /// Elementwise `|a|`, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = map(self.value(a), f64::abs);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Abs(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = map(self.value(a), f64::ln);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Log(a), rg))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = map(self.value(a), |x| x.clamp(lo, hi));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Clamp(a, lo, hi), rg))
    }

    /// Softmax along each row (over classes).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a)?;
        if !self.value(a).all_finite() {
            return Err(CpeError::NonFinite("softmax_rows"));
        }
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            softmax_inplace(row);
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxRows(a), rg))
    }

    /// Softmax along each column (over proposals).
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if !self.value(a).all_finite() {
            return Err(CpeError::NonFinite("softmax_cols"));
        }
        let src = self.value(a).data();
        let mut t = Tensor::zeros(&[m, n]);
        let mut col = vec![0.0; m];
        for j in 0..n {
            for (i, v) in col.iter_mut().enumerate() {
                *v = src[i * n + j];
            }
            softmax_inplace(&mut col);
            for (i, &v) in col.iter().enumerate() {
                t.data_mut()[i * n + j] = v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxCols(a), rg))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| CpeError::InvalidInput("concat of nothing".into()))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims(x)?;
            if r != m {
                return Err(shape_mismatch("concat_cols", &[m], &[r, c]));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * c..(i + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| CpeError::InvalidInput("concat of nothing".into()))?;
        let (_, n) = self.dims(first)?;
        let mut m = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c) = self.dims(x)?;
            if c != n {
                return Err(shape_mismatch("concat_rows", &[n], &[r, c]));
            }
            m += r;
            data.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start + len > n || len == 0 {
            return Err(shape_mismatch("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start + len > m || len == 0 {
            return Err(shape_mismatch("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(len, n, data)?, Op::SliceRows(a, start), rg))
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums (`m×n → 1×n`).
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::row(out), Op::SumRows(a), rg))
    }

    /// Column means (`m×n → 1×n`).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a)?;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / m as f64)
    }

    /// `out[i] = a.data[index[i]]`, reshaped to `shape`. Gradients scatter-add
    /// back to the gathered positions.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(CpeError::InvalidInput(format!(
                "gather index {bad} out of range {}",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Gather(a, index), rg))
    }

    /// Mean over the leading axis of a `C×H×W` tensor, giving `H×W`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let [c, h, w] = shape[..] else {
            return Err(CpeError::InvalidInput(format!(
                "channel_mean expects C×H×W, got {shape:?}"
            )));
        };
        let src = self.value(a).data();
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                *o += v;
            }
        }
        let inv = 1.0 / c as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(h, w, out)?, Op::ChannelMean(a), rg))
    }

    /// `(a - min) / range` where `min` and `range` are treated as constants
    /// in the backward pass.
    pub fn rescale(&mut self, a: Var, min: f64, range: f64) -> Result<Var> {
        if range.is_nan() || range <= 0.0 {
            return Err(CpeError::InvalidParameter(format!(
                "rescale range must be positive, got {range}"
            )));
        }
        // division rather than multiplication by 1/range keeps the maximum
        // entry at exactly 1
        let t = map(self.value(a), |x| (x - min) / range);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Rescale(a, range), rg))
    }

    /// Runs the backward pass from the scalar `loss`, visiting the records in
    /// reverse execution order.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(CpeError::BackwardReused);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(CpeError::NotScalar(lv.shape().to_vec()));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let nn = nodes[b.0].value.cols();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    // dA = G · Bᵀ
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..nn {
                                s += g[r * nn + c] * bv[p * nn + c];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · G
                    for r in 0..m {
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            for c in 0..nn {
                                gb[p * nn + c] += a_rp * g[r * nn + c];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                acc(*a, &mut |ga| {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = nodes[row.0].value.len();
                acc(*row, &mut |gr| {
                    for (j, v) in g.iter().enumerate() {
                        gr[j % n] += v;
                    }
                });
            }
            Op::AddN(xs) => {
                for x in xs {
                    acc(*x, &mut |gx| add_into(gx, g));
                }
            }
            Op::Affine(a, k) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += k * v)),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        let s = if av[j] > 0.0 {
                            1.0
                        } else if av[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[j] += g[j] * s;
                    }
                });
            }
            Op::Log(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / av[j];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        if av[j] >= *lo && av[j] <= *hi {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (r, (yr, gr)) in out.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                        for c in 0..n {
                            ga[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCols(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |ga| {
                    for c in 0..n {
                        let mut dot = 0.0;
                        for r in 0..m {
                            dot += out[r * n + c] * g[r * n + c];
                        }
                        for r in 0..m {
                            ga[r * n + c] += out[r * n + c] * (g[r * n + c] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut offset = 0;
                for x in xs {
                    let w = nodes[x.0].value.cols();
                    acc(*x, &mut |gx| {
                        for r in 0..m {
                            for c in 0..w {
                                gx[r * w + c] += g[r * n + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = nodes[x.0].value.len();
                    acc(*x, &mut |gx| add_into(gx, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, len) = (node.value.rows(), node.value.cols());
                let n = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..len {
                            ga[r * n + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| add_into(&mut ga[start * n..start * n + g.len()], g));
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::SumRows(a) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += g[j % n];
                    }
                });
            }
            Op::Gather(a, index) => acc(*a, &mut |ga| {
                for (j, &src) in index.iter().enumerate() {
                    ga[src] += g[j];
                }
            }),
            Op::ChannelMean(a) => {
                let plane = node.value.len();
                let c = nodes[a.0].value.len() / plane;
                let inv = 1.0 / c as f64;
                acc(*a, &mut |ga| {
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += g[j % plane] * inv;
                    }
                });
            }
            Op::Rescale(a, range) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v / range)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}
