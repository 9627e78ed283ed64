//! From feature maps and boxes to oriented pooled step sequences.

use crate::error::{CpeError, Result};
use crate::geometry::{clip_box, extension_strip, BBox, Direction, ImageDims};
use crate::tensor::{Tape, Tensor, Var};

/// A `C×H×W` feature map with the scale from pixel to feature coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
    spatial_scale: f64,
}

impl FeatureMap {
    pub fn new(values: Tensor, spatial_scale: f64) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape.contains(&0) {
            return Err(CpeError::InvalidInput(format!(
                "feature map must be C×H×W, got {shape:?}"
            )));
        }
        if !(spatial_scale.is_finite() && spatial_scale > 0.0) {
            return Err(CpeError::InvalidParameter(format!(
                "spatial scale must be positive, got {spatial_scale}"
            )));
        }
        Ok(Self { values, spatial_scale })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn spatial_scale(&self) -> f64 {
        self.spatial_scale
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// The `H×W` plane of channel `c`.
    pub fn channel(&self, c: usize) -> Tensor {
        let plane = self.height() * self.width();
        let data = self.values.data()[c * plane..(c + 1) * plane].to_vec();
        Tensor::matrix(self.height(), self.width(), data).expect("plane size")
    }

    /// Pixel extent covered by the map.
    pub fn image_dims(&self) -> ImageDims {
        ImageDims::new(
            self.width() as f64 / self.spatial_scale,
            self.height() as f64 / self.spatial_scale,
        )
        .expect("positive dims")
    }
}

/// Mean over channels, giving an `H×W` grid.
pub fn channel_average(x: &FeatureMap) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.values.clone());
    let m = tape.channel_mean(v).expect("rank checked at construction");
    tape.value(m).clone()
}

/// A pooled `rows×cols` block plus, for every output cell, the flat index of
/// the grid cell that supplied its maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    sources: Vec<usize>,
}

impl PooledFeature {
    pub fn empty(rows: usize, cols: usize) -> Self {
        assert!(rows == 0 || cols == 0);
        Self {
            rows,
            cols,
            values: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        (!self.is_empty()).then(|| Tensor::matrix(self.rows, self.cols, self.values.clone()).expect("size"))
    }

    /// Side-by-side concatenation; row counts must agree.
    pub fn concat_cols(&self, right: &PooledFeature) -> Result<PooledFeature> {
        if self.rows != right.rows {
            return Err(CpeError::InvalidInput(format!(
                "cannot concat {} rows with {} rows",
                self.rows, right.rows
            )));
        }
        let cols = self.cols + right.cols;
        let mut values = Vec::with_capacity(self.rows * cols);
        let mut sources = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            values.extend_from_slice(&self.values[r * self.cols..(r + 1) * self.cols]);
            values.extend_from_slice(&right.values[r * right.cols..(r + 1) * right.cols]);
            sources.extend_from_slice(&self.sources[r * self.cols..(r + 1) * self.cols]);
            sources.extend_from_slice(&right.sources[r * right.cols..(r + 1) * right.cols]);
        }
        Ok(PooledFeature {
            rows: self.rows,
            cols,
            values,
            sources,
        })
    }

    /// Stacks `bottom` under `self`; column counts must agree.
    pub fn concat_rows(&self, bottom: &PooledFeature) -> Result<PooledFeature> {
        if self.cols != bottom.cols {
            return Err(CpeError::InvalidInput(format!(
                "cannot stack {} cols on {} cols",
                bottom.cols, self.cols
            )));
        }
        Ok(PooledFeature {
            rows: self.rows + bottom.rows,
            cols: self.cols,
            values: [&self.values[..], &bottom.values[..]].concat(),
            sources: [&self.sources[..], &bottom.sources[..]].concat(),
        })
    }

    /// Re-records the pooled values on `tape` as a gather from `grid`, so
    /// gradients route back to the max cells.
    pub fn gather_from(&self, tape: &mut Tape, grid: Var) -> Result<Option<Var>> {
        if self.is_empty() {
            return Ok(None);
        }
        tape.gather(grid, self.sources.clone(), vec![self.rows, self.cols])
            .map(Some)
    }
}

/// Integer cell range `[start, end)` covering the real interval `[lo, hi]`
/// after outward rounding, clamped to `[0, n)`. Falls back to the single
/// nearest cell when nothing is left.
fn bin_cells(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let start = lo.floor().max(0.0) as usize;
    let end = (hi.ceil().max(0.0) as usize).min(n);
    if end > start {
        (start, end)
    } else {
        let c = ((lo + hi) * 0.5).floor().clamp(0.0, (n - 1) as f64) as usize;
        (c, c + 1)
    }
}

/// Max-pools the part of `grid` (`H×W`) under box `b` into `out_rows×out_cols`
/// bins. The box is first clipped to the grid's pixel extent.
pub fn roi_pool(grid: &Tensor, b: &BBox, out_rows: usize, out_cols: usize, scale: f64) -> Result<PooledFeature> {
    let (h, w) = grid.dims2()?;
    if out_rows == 0 || out_cols == 0 {
        return Err(CpeError::InvalidParameter("pooling size must be positive".into()));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CpeError::InvalidParameter(format!(
            "spatial scale must be positive, got {scale}"
        )));
    }
    let img = ImageDims::new(w as f64 / scale, h as f64 / scale)?;
    let b = clip_box(b, &img)?;
    let [x0, y0, x1, y1] = b.corners().map(|v| v * scale);
    let bw = (x1 - x0) / out_cols as f64;
    let bh = (y1 - y0) / out_rows as f64;
    let data = grid.data();
    let mut values = Vec::with_capacity(out_rows * out_cols);
    let mut sources = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        let (r0, r1) = bin_cells(y0 + i as f64 * bh, y0 + (i + 1) as f64 * bh, h);
        for j in 0..out_cols {
            let (c0, c1) = bin_cells(x0 + j as f64 * bw, x0 + (j + 1) as f64 * bw, w);
            let mut best = f64::NEG_INFINITY;
            let mut arg = r0 * w + c0;
            for r in r0..r1 {
                for c in c0..c1 {
                    let v = data[r * w + c];
                    if v > best {
                        best = v;
                        arg = r * w + c;
                    }
                }
            }
            values.push(data[arg]);
            sources.push(arg);
        }
    }
    Ok(PooledFeature {
        rows: out_rows,
        cols: out_cols,
        values,
        sources,
    })
}

/// Pooling sizes for one directional extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    /// Bins across the extension axis; also the length of every step.
    pub step_len: usize,
    /// Bins along the extension axis for the initial box.
    pub initial_steps: usize,
    /// Bins along the extension axis for the extra strip.
    pub extra_steps: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            step_len: 7,
            initial_steps: 7,
            extra_steps: 3,
        }
    }
}

/// Pooled features of a box, its extra strip, and the extended box.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledPair {
    pub initial: PooledFeature,
    pub strip: PooledFeature,
    pub extended: PooledFeature,
}

/// Pools `b` and the strip `b_ext \ b` separately and concatenates them in
/// spatial order along the extension axis.
pub fn pool_pair(
    grid: &Tensor,
    b: &BBox,
    b_ext: &BBox,
    dir: Direction,
    spec: PoolSpec,
    scale: f64,
) -> Result<PooledPair> {
    if !b_ext.contains(b) {
        return Err(CpeError::InvalidInput(format!(
            "extended box ({b_ext}) does not contain ({b})"
        )));
    }
    let strip_box = extension_strip(b, b_ext, dir);
    let (initial, strip) = if dir.is_horizontal() {
        let initial = roi_pool(grid, b, spec.step_len, spec.initial_steps, scale)?;
        let strip = match strip_box {
            Some(s) => roi_pool(grid, &s, spec.step_len, spec.extra_steps, scale)?,
            None => PooledFeature::empty(spec.step_len, 0),
        };
        (initial, strip)
    } else {
        let initial = roi_pool(grid, b, spec.initial_steps, spec.step_len, scale)?;
        let strip = match strip_box {
            Some(s) => roi_pool(grid, &s, spec.extra_steps, spec.step_len, scale)?,
            None => PooledFeature::empty(0, spec.step_len),
        };
        (initial, strip)
    };
    let extended = match dir {
        Direction::R2L => strip.concat_cols(&initial)?,
        Direction::L2R => initial.concat_cols(&strip)?,
        Direction::B2T => strip.concat_rows(&initial)?,
        Direction::T2B => initial.concat_rows(&strip)?,
    };
    Ok(PooledPair {
        initial,
        strip,
        extended,
    })
}

/// Rows or columns of a pooled block in reading order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSequence {
    pub direction: Direction,
    step_len: usize,
    values: Vec<f64>,
    sources: Vec<usize>,
}

impl StepSequence {
    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.step_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step_len(&self) -> usize {
        self.step_len
    }

    pub fn step(&self, i: usize) -> &[f64] {
        &self.values[i * self.step_len..(i + 1) * self.step_len]
    }

    pub fn steps(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.step_len.max(1))
    }

    /// Grid cell indices backing each value, in step order.
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// All steps as a `len×step_len` matrix, or `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        (!self.is_empty()).then(|| Tensor::matrix(self.len(), self.step_len, self.values.clone()).expect("size"))
    }

    /// This sequence followed by `tail`.
    pub fn concat(&self, tail: &StepSequence) -> Result<StepSequence> {
        if !tail.is_empty() && !self.is_empty() && tail.step_len != self.step_len {
            return Err(CpeError::InvalidInput("step lengths differ".into()));
        }
        Ok(StepSequence {
            direction: self.direction,
            step_len: self.step_len.max(tail.step_len),
            values: [&self.values[..], &tail.values[..]].concat(),
            sources: [&self.sources[..], &tail.sources[..]].concat(),
        })
    }
}

/// Reading order of cell `(step, k)`: returns the `(row, col)` it comes from.
fn oriented_cell(dir: Direction, rows: usize, cols: usize, step: usize, k: usize) -> (usize, usize) {
    match dir {
        Direction::T2B => (step, k),
        Direction::B2T => (rows - 1 - step, k),
        Direction::L2R => (k, step),
        Direction::R2L => (k, cols - 1 - step),
    }
}

fn oriented_dims(dir: Direction, rows: usize, cols: usize) -> (usize, usize) {
    if dir.is_horizontal() {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

/// Turns a pooled block into steps so that the extension side is read last:
/// `T2B` rows top to bottom, `B2T` rows bottom to top, `L2R` columns left to
/// right, `R2L` columns right to left.
pub fn orient(x: &PooledFeature, dir: Direction) -> StepSequence {
    let (n_steps, step_len) = oriented_dims(dir, x.rows, x.cols);
    let mut values = Vec::with_capacity(x.values.len());
    let mut sources = Vec::with_capacity(x.values.len());
    for s in 0..n_steps {
        for k in 0..step_len {
            let (r, c) = oriented_cell(dir, x.rows, x.cols, s, k);
            values.push(x.values[r * x.cols + c]);
            sources.push(x.sources[r * x.cols + c]);
        }
    }
    StepSequence {
        direction: dir,
        step_len,
        values,
        sources,
    }
}

/// Inverse of [`orient`] for a block of `rows×cols`.
pub fn unorient(seq: &StepSequence, rows: usize, cols: usize) -> Result<PooledFeature> {
    if seq.values.len() != rows * cols {
        return Err(CpeError::InvalidInput(format!(
            "sequence of {} values does not fill {rows}×{cols}",
            seq.values.len()
        )));
    }
    let (n_steps, step_len) = oriented_dims(seq.direction, rows, cols);
    let mut values = vec![0.0; rows * cols];
    let mut sources = vec![0; rows * cols];
    for s in 0..n_steps {
        for k in 0..step_len {
            let (r, c) = oriented_cell(seq.direction, rows, cols, s, k);
            values[r * cols + c] = seq.values[s * step_len + k];
            sources[r * cols + c] = seq.sources[s * step_len + k];
        }
    }
    Ok(PooledFeature {
        rows,
        cols,
        values,
        sources,
    })
}

/// Oriented sequences for one proposal and one direction: the initial box
/// steps and the extra strip steps read after them.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalSteps {
    pub initial: StepSequence,
    pub extra: StepSequence,
}

impl DirectionalSteps {
    pub fn from_pair(pair: &PooledPair, dir: Direction) -> Self {
        Self {
            initial: orient(&pair.initial, dir),
            extra: orient(&pair.strip, dir),
        }
    }
}

/// Per-channel max pooling of each box into a `grid×grid` block, flattened
/// into one `C·grid²` feature row per box.
pub fn proposal_features(fm: &FeatureMap, boxes: &[BBox], grid: usize) -> Result<Tensor> {
    let c = fm.channels();
    let width = c * grid * grid;
    let planes: Vec<Tensor> = (0..c).map(|ch| fm.channel(ch)).collect();
    let mut data = Vec::with_capacity(boxes.len() * width);
    for b in boxes {
        for plane in &planes {
            let p = roi_pool(plane, b, grid, grid, fm.spatial_scale)?;
            data.extend_from_slice(p.values());
        }
    }
    Tensor::matrix(boxes.len(), width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::extend_box;
    use proptest::prelude::*;

    fn grid_1_to_16() -> Tensor {
        Tensor::matrix(4, 4, (1..=16).map(f64::from).collect()).unwrap()
    }

    /// Bin maxima by exhaustive scan over all cells whose unit square
    /// overlaps the bin's real interval.
    fn brute_force_pool(grid: &Tensor, b: &BBox, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
        let (h, w) = grid.dims2().unwrap();
        let [x0, y0, x1, y1] = b.corners().map(|v| v * scale);
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(w as f64), y1.min(h as f64));
        let mut out = Vec::new();
        for i in 0..rows {
            let lo_y = y0 + (y1 - y0) * i as f64 / rows as f64;
            let hi_y = y0 + (y1 - y0) * (i + 1) as f64 / rows as f64;
            for j in 0..cols {
                let lo_x = x0 + (x1 - x0) * j as f64 / cols as f64;
                let hi_x = x0 + (x1 - x0) * (j + 1) as f64 / cols as f64;
                let mut best = f64::NEG_INFINITY;
                for r in 0..h {
                    for c in 0..w {
                        let overlaps = (r as f64) < hi_y
                            && (r as f64 + 1.0) > lo_y
                            && (c as f64) < hi_x
                            && (c as f64 + 1.0) > lo_x;
                        if overlaps {
                            best = best.max(grid.at(r, c));
                        }
                    }
                }
                if best == f64::NEG_INFINITY {
                    let r = ((lo_y + hi_y) / 2.0).floor().clamp(0.0, h as f64 - 1.0) as usize;
                    let c = ((lo_x + hi_x) / 2.0).floor().clamp(0.0, w as f64 - 1.0) as usize;
                    best = grid.at(r, c);
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn channel_average_examples() {
        let two = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
        let avg = channel_average(&FeatureMap::new(two, 1.0).unwrap());
        assert!(avg.data().iter().all(|&v| v == 2.0));

        let one = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            channel_average(&FeatureMap::new(one.clone(), 1.0).unwrap()).data(),
            one.data()
        );

        let three = Tensor::new(vec![3, 1, 1], vec![0.0, 0.3, 0.9]).unwrap();
        let avg = channel_average(&FeatureMap::new(three, 1.0).unwrap());
        assert!((avg.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureMap::new(Tensor::zeros(&[2, 2]), 1.0).is_err());
        assert!(FeatureMap::new(Tensor::zeros(&[1, 2, 2]), 0.0).is_err());
        let fm = FeatureMap::new(Tensor::zeros(&[1, 8, 16]), 0.25).unwrap();
        assert_eq!((fm.image_dims().width(), fm.image_dims().height()), (64.0, 32.0));
    }

    #[test]
    fn roi_pool_examples() {
        let g = Tensor::full(&[6, 6], 7.0);
        let p = roi_pool(&g, &BBox::new(1.3, 0.2, 3.1, 4.4).unwrap(), 3, 2, 1.0).unwrap();
        assert!(p.values().iter().all(|&v| v == 7.0));

        let g = grid_1_to_16();
        let all = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let p = roi_pool(&g, &all, 2, 2, 1.0).unwrap();
        assert_eq!(p.values(), &[6.0, 8.0, 14.0, 16.0]);
        assert_eq!(p.values(), &brute_force_pool(&g, &all, 2, 2, 1.0)[..]);

        let b = BBox::new(0.5, 0.5, 2.0, 1.2).unwrap();
        let p = roi_pool(&g, &b, 1, 1, 1.0).unwrap();
        // cells rows 0..2, cols 0..3
        assert_eq!(p.values(), &[7.0]);
    }

    #[test]
    fn roi_pool_scaled_and_outside() {
        let g = grid_1_to_16();
        let b = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let p = roi_pool(&g, &b, 2, 2, 0.5).unwrap();
        assert_eq!(p.values(), &[6.0, 8.0, 14.0, 16.0]);
        assert!(matches!(
            roi_pool(&g, &BBox::new(10.0, 10.0, 2.0, 2.0).unwrap(), 2, 2, 1.0),
            Err(CpeError::EmptyIntersection)
        ));
    }

    #[test]
    fn tiny_box_takes_nearest_cell() {
        let g = grid_1_to_16();
        let b = BBox::new(2.2, 1.1, 0.1, 0.1).unwrap();
        let p = roi_pool(&g, &b, 3, 3, 1.0).unwrap();
        assert!(p.values().iter().all(|&v| v == g.at(1, 2)));
    }

    #[test]
    fn roi_pool_gradient_routes_to_max_cells() {
        let g = grid_1_to_16();
        let b = BBox::new(0.3, 0.0, 3.4, 3.0).unwrap();
        let p = roi_pool(&g, &b, 2, 2, 1.0).unwrap();
        let mut tape = Tape::new();
        let gv = tape.param(g.clone());
        let pooled = p.gather_from(&mut tape, gv).unwrap().unwrap();
        let s = tape.sum(pooled).unwrap();
        let grads = tape.backward(s).unwrap().get(gv).unwrap();
        // finite differences on the pooling itself
        let eps = 1e-6;
        for idx in 0..16 {
            let mut gp = g.clone();
            gp.data_mut()[idx] += eps;
            let mut gm = g.clone();
            gm.data_mut()[idx] -= eps;
            let sp: f64 = roi_pool(&gp, &b, 2, 2, 1.0).unwrap().values().iter().sum();
            let sm: f64 = roi_pool(&gm, &b, 2, 2, 1.0).unwrap().values().iter().sum();
            let num = (sp - sm) / (2.0 * eps);
            assert!(
                (num - grads.data()[idx]).abs() < 1e-6,
                "cell {idx}: {num} vs {}",
                grads.data()[idx]
            );
            if grads.data()[idx] != 0.0 {
                assert!(p.sources().contains(&idx));
            }
        }
    }

    #[test]
    fn pool_pair_border_clamped() {
        let g = grid_1_to_16();
        let img = ImageDims::new(4.0, 4.0).unwrap();
        let b = BBox::new(0.0, 1.0, 2.0, 2.0).unwrap();
        let e = extend_box(&b, Direction::R2L, &img, 4.0).unwrap();
        let pair = pool_pair(&g, &b, &e, Direction::R2L, PoolSpec::default(), 1.0).unwrap();
        assert_eq!(pair.strip.cols(), 0);
        assert_eq!(pair.extended, pair.initial);
    }

    #[test]
    fn pool_pair_widths_add() {
        let g = Tensor::matrix(16, 16, (0..256).map(|v| ((v * 37) % 101) as f64).collect()).unwrap();
        let img = ImageDims::new(16.0, 16.0).unwrap();
        let b = BBox::new(3.0, 4.0, 6.0, 5.0).unwrap();
        let spec = PoolSpec {
            step_len: 7,
            initial_steps: 7,
            extra_steps: 3,
        };
        for dir in Direction::ALL {
            let e = extend_box(&b, dir, &img, 4.0).unwrap();
            let pair = pool_pair(&g, &b, &e, dir, spec, 1.0).unwrap();
            if dir.is_horizontal() {
                assert_eq!((pair.extended.rows(), pair.extended.cols()), (7, 10));
            } else {
                assert_eq!((pair.extended.rows(), pair.extended.cols()), (10, 7));
            }
        }
        // L2R: extended equals [pool(b) | pool(strip)] recomputed directly
        let e = extend_box(&b, Direction::L2R, &img, 4.0).unwrap();
        let pair = pool_pair(&g, &b, &e, Direction::L2R, spec, 1.0).unwrap();
        let left = roi_pool(&g, &b, 7, 7, 1.0).unwrap();
        let strip = BBox::from_corners(b.right(), b.y(), e.right(), b.bottom()).unwrap();
        let right = roi_pool(&g, &strip, 7, 3, 1.0).unwrap();
        for r in 0..7 {
            for c in 0..10 {
                let expect = if c < 7 { left.at(r, c) } else { right.at(r, c - 7) };
                assert_eq!(pair.extended.at(r, c), expect);
            }
        }
    }

    #[test]
    fn pool_pair_requires_containment() {
        let g = grid_1_to_16();
        let b = BBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        let smaller = BBox::new(1.5, 1.0, 1.0, 2.0).unwrap();
        assert!(pool_pair(&g, &b, &smaller, Direction::R2L, PoolSpec::default(), 1.0).is_err());
    }

    fn abcd() -> PooledFeature {
        PooledFeature {
            rows: 2,
            cols: 2,
            values: vec![1.0, 2.0, 3.0, 4.0], // a b / c d
            sources: vec![0, 1, 2, 3],
        }
    }

    #[test]
    fn orient_examples() {
        let x = abcd();
        let steps = |d| orient(&x, d).steps().map(<[f64]>::to_vec).collect::<Vec<_>>();
        assert_eq!(steps(Direction::T2B), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(steps(Direction::R2L), vec![vec![2.0, 4.0], vec![1.0, 3.0]]);
        assert_eq!(steps(Direction::B2T), vec![vec![3.0, 4.0], vec![1.0, 2.0]]);
        assert_eq!(steps(Direction::L2R), vec![vec![1.0, 3.0], vec![2.0, 4.0]]);
    }

    #[test]
    fn oriented_extension_is_prefix_then_strip() {
        let g = Tensor::matrix(16, 16, (0..256).map(|v| ((v * 53) % 97) as f64).collect()).unwrap();
        let img = ImageDims::new(16.0, 16.0).unwrap();
        let b = BBox::new(5.0, 6.0, 4.0, 3.0).unwrap();
        for dir in Direction::ALL {
            let e = extend_box(&b, dir, &img, 2.0).unwrap();
            let pair = pool_pair(&g, &b, &e, dir, PoolSpec::default(), 1.0).unwrap();
            let whole = orient(&pair.extended, dir);
            let parts = orient(&pair.initial, dir).concat(&orient(&pair.strip, dir)).unwrap();
            assert_eq!(whole, parts, "{dir}");
        }
    }

    #[test]
    fn proposal_feature_width() {
        let fm = FeatureMap::new(Tensor::full(&[3, 8, 8], 1.0), 0.5).unwrap();
        let boxes = [
            BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            BBox::new(2.0, 2.0, 4.0, 6.0).unwrap(),
        ];
        let f = proposal_features(&fm, &boxes, 2).unwrap();
        assert_eq!(f.shape(), &[2, 12]);
    }

    proptest! {
        #[test]
        fn roi_pool_matches_brute_force(
            seed in 0u64..1000,
            x in 0.0f64..10.0, y in 0.0f64..10.0, w in 0.05f64..8.0, h in 0.05f64..8.0,
            rows in 1usize..5, cols in 1usize..5, scale in prop::sample::select(vec![0.5, 1.0, 0.25])
        ) {
            let data = (0..144).map(|i| (((i as u64 + 1) * (seed + 7919)) % 1009) as f64).collect();
            let g = Tensor::matrix(12, 12, data).unwrap();
            let b = BBox::new(x, y, w, h).unwrap();
            if let Ok(p) = roi_pool(&g, &b, rows, cols, scale) {
                prop_assert_eq!(p.values().to_vec(), brute_force_pool(&g, &b, rows, cols, scale));
            }
        }

        #[test]
        fn clipping_is_idempotent(x in -6.0f64..14.0, y in -6.0f64..14.0, w in 0.5f64..10.0, h in 0.5f64..10.0) {
            let g = Tensor::matrix(8, 8, (0..64).map(|v| ((v * 29) % 61) as f64).collect()).unwrap();
            let b = BBox::new(x, y, w, h).unwrap();
            let img = ImageDims::new(8.0, 8.0).unwrap();
            if let Ok(clipped) = clip_box(&b, &img) {
                prop_assert_eq!(roi_pool(&g, &b, 3, 3, 1.0).unwrap(), roi_pool(&g, &clipped, 3, 3, 1.0).unwrap());
            }
        }

        #[test]
        fn orient_inverts(rows in 1usize..6, cols in 1usize..6, d in 0usize..4) {
            let x = PooledFeature {
                rows, cols,
                values: (0..rows * cols).map(|v| v as f64).collect(),
                sources: (0..rows * cols).collect(),
            };
            let dir = Direction::ALL[d];
            let seq = orient(&x, dir);
            prop_assert_eq!(seq.step_len(), if dir.is_horizontal() { rows } else { cols });
            prop_assert_eq!(unorient(&seq, rows, cols).unwrap(), x);
        }
    }
}
