//! Reverse-mode automatic differentiation over `ndarray::Array2<f64>`.
//!
//! A `Tape` records every operation applied to node handles and replays
//! them backwards to accumulate exact gradients. All tensors are 2-D
//! (rows = time/tokens, cols = channels); scalars are 1x1. Computation is
//! double precision throughout so analytic gradients can be checked
//! against central finite differences at tight tolerances.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a` (L x D) plus row vector `b` (1 x D) broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `a` (L x D) times row vector `b` (1 x D) broadcast over rows.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a` scaled by a 1x1 node.
    ScaleVar(NodeId, NodeId),
    /// a (L x K) . b (K x N)
    Matmul(NodeId, NodeId),
    /// a (L x K) . b^T, b is (N x K)
    MatmulNT(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    RowSoftmax(NodeId),
    /// Row-wise L2 normalization to (near) unit norm.
    RowUnit(NodeId),
    /// Row-wise standardization (x - mean) / sqrt(var + eps); no affine.
    RowStandardize(NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    /// L x D -> 1 x D column means.
    MeanRows(NodeId),
    /// 1 x D -> L x D copies.
    BroadcastRows(NodeId),
    /// Row i repeated durations[i] times, order preserved.
    RepeatRows(NodeId, Vec<usize>),
    /// Non-overlapping mean pooling over rows; last window may be partial.
    AvgPoolRows(NodeId, usize),
    /// Rows shifted by `offset` (positive = down), zero-filled.
    ShiftRows(NodeId, isize),
    /// Mean of (a - b)^2 over all cells -> 1x1.
    MseLoss(NodeId, NodeId),
    LogSoftmaxRow(NodeId),
    /// -x[0, idx] -> 1x1.
    PickNeg(NodeId, usize),
    /// Identity forward; upstream gradient multiplied by -scale.
    GradReverse(NodeId, f64),
    /// Sum of all cells -> 1x1.
    SumAll(NodeId),
}

/// Records a computation graph and computes gradients by backpropagation.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.vals[id]
    }

    /// Value of a 1x1 node as a plain scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id].dim(), (1, 1));
        self.vals[id][(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.vals.push(value);
        self.ops.push(op);
        self.vals.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] + &self.vals[b];
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] - &self.vals[b];
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] * &self.vals[b];
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[row].nrows(), 1);
        let v = &self.vals[a] + &self.vals[row].row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[row].nrows(), 1);
        let v = &self.vals[a] * &self.vals[row].row(0);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.vals[a].mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn scale_var(&mut self, a: NodeId, s: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[s].dim(), (1, 1));
        let c = self.vals[s][(0, 0)];
        let v = self.vals[a].mapv(|x| x * c);
        self.push(v, Op::ScaleVar(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a].dot(&self.vals[b]);
        self.push(v, Op::Matmul(a, b))
    }

    /// `a . b^T` without materializing the transpose node.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a].dot(&self.vals[b].t());
        self.push(v, Op::MatmulNT(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.vals[a].slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.vals[p].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("column concat shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.vals[p].view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("row concat shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.vals[a].clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn row_unit(&mut self, a: NodeId) -> NodeId {
        let mut v = self.vals[a].clone();
        for mut row in v.rows_mut() {
            let n = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::RowUnit(a))
    }

    pub fn row_standardize(&mut self, a: NodeId) -> NodeId {
        let mut v = self.vals[a].clone();
        for mut row in v.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * istd);
        }
        self.push(v, Op::RowStandardize(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let rows = self.vals[a].nrows() as f64;
        let v = self.vals[a]
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .mapv(|x| x / rows);
        self.push(v, Op::MeanRows(a))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        debug_assert_eq!(self.vals[a].nrows(), 1);
        let row = self.vals[a].row(0).to_owned();
        let v = Array2::from_shape_fn((rows, row.len()), |(_, j)| row[j]);
        self.push(v, Op::BroadcastRows(a))
    }

    pub fn repeat_rows(&mut self, a: NodeId, durations: &[usize]) -> NodeId {
        debug_assert_eq!(self.vals[a].nrows(), durations.len());
        let total: usize = durations.iter().sum();
        let cols = self.vals[a].ncols();
        let mut v = Array2::zeros((total, cols));
        let mut out = 0;
        for (i, &d) in durations.iter().enumerate() {
            for _ in 0..d {
                v.row_mut(out).assign(&self.vals[a].row(i));
                out += 1;
            }
        }
        self.push(v, Op::RepeatRows(a, durations.to_vec()))
    }

    pub fn avg_pool_rows(&mut self, a: NodeId, factor: usize) -> NodeId {
        let rows = self.vals[a].nrows();
        let cols = self.vals[a].ncols();
        let out_rows = rows.div_ceil(factor);
        let mut v = Array2::zeros((out_rows, cols));
        for r in 0..out_rows {
            let lo = r * factor;
            let hi = (lo + factor).min(rows);
            let w = (hi - lo) as f64;
            let mean = self.vals[a].slice(s![lo..hi, ..]).sum_axis(Axis(0)) / w;
            v.row_mut(r).assign(&mean);
        }
        self.push(v, Op::AvgPoolRows(a, factor))
    }

    pub fn shift_rows(&mut self, a: NodeId, offset: isize) -> NodeId {
        let (rows, cols) = self.vals[a].dim();
        let mut v = Array2::zeros((rows, cols));
        for t in 0..rows as isize {
            let src = t - offset;
            if src >= 0 && src < rows as isize {
                v.row_mut(t as usize).assign(&self.vals[a].row(src as usize));
            }
        }
        self.push(v, Op::ShiftRows(a, offset))
    }

    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[a].dim(), self.vals[b].dim());
        let diff = &self.vals[a] - &self.vals[b];
        let n = diff.len() as f64;
        let v = Array2::from_elem((1, 1), diff.iter().map(|x| x * x).sum::<f64>() / n);
        self.push(v, Op::MseLoss(a, b))
    }

    pub fn log_softmax_row(&mut self, a: NodeId) -> NodeId {
        let mut v = self.vals[a].clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRow(a))
    }

    pub fn pick_neg(&mut self, a: NodeId, idx: usize) -> NodeId {
        let v = Array2::from_elem((1, 1), -self.vals[a][(0, idx)]);
        self.push(v, Op::PickNeg(a, idx))
    }

    pub fn grad_reverse(&mut self, a: NodeId, scale: f64) -> NodeId {
        let v = self.vals[a].clone();
        self.push(v, Op::GradReverse(a, scale))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.vals[a].sum());
        self.push(v, Op::SumAll(a))
    }

    /// Backpropagate from `loss` (a 1x1 node). Returns per-node gradients;
    /// nodes unreachable from the loss have `None`.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.vals[loss].dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        grads[loss] = Some(Array2::ones((1, 1)));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], p: NodeId, delta: Array2<f64>| {
            match &mut grads[p] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.vals[*b]);
                add_to(grads, *b, g * &self.vals[*a]);
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, col_sum);
            }
            Op::MulRow(a, row) => {
                add_to(grads, *a, g * &self.vals[*row].row(0));
                let prod = g * &self.vals[*a];
                add_to(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => add_to(grads, *a, g.mapv(|x| x * c)),
            Op::ScaleVar(a, s) => {
                let c = self.vals[*s][(0, 0)];
                add_to(grads, *a, g.mapv(|x| x * c));
                let ds = (g * &self.vals[*a]).sum();
                add_to(grads, *s, Array2::from_elem((1, 1), ds));
            }
            Op::Matmul(a, b) => {
                add_to(grads, *a, g.dot(&self.vals[*b].t()));
                add_to(grads, *b, self.vals[*a].t().dot(g));
            }
            Op::MatmulNT(a, b) => {
                add_to(grads, *a, g.dot(&self.vals[*b]));
                add_to(grads, *b, g.t().dot(&self.vals[*a]));
            }
            Op::SliceCols(a, start, len) => {
                let mut da = Array2::zeros(self.vals[*a].dim());
                da.slice_mut(s![.., *start..*start + *len]).assign(g);
                add_to(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.vals[p].ncols();
                    let dp = g.slice(s![.., start..start + w]).to_owned();
                    add_to(grads, p, dp);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.vals[p].nrows();
                    let dp = g.slice(s![start..start + h, ..]).to_owned();
                    add_to(grads, p, dp);
                    start += h;
                }
            }
            Op::RowSoftmax(a) => {
                let y = &self.vals[id];
                let mut da = g * y;
                for (mut row, (gy_row, y_row)) in
                    da.rows_mut().into_iter().zip(g.rows().into_iter().zip(y.rows()))
                {
                    let dot: f64 = gy_row.iter().zip(y_row.iter()).map(|(a, b)| a * b).sum();
                    row.iter_mut()
                        .zip(y_row.iter())
                        .for_each(|(d, &yv)| *d -= dot * yv);
                }
                add_to(grads, *a, da);
            }
            Op::RowUnit(a) => {
                let x = &self.vals[*a];
                let y = &self.vals[id];
                let mut da = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let n = (x.row(i).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let gy = g.row(i);
                    let yr = y.row(i);
                    let dot: f64 = gy.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..x.ncols() {
                        da[(i, j)] = (gy[j] - dot * yr[j]) / n;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::RowStandardize(a) => {
                let x = &self.vals[*a];
                let y = &self.vals[id];
                let d = x.ncols() as f64;
                let mut da = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let row = x.row(i);
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let istd = 1.0 / (var + LN_EPS).sqrt();
                    let gy = g.row(i);
                    let yr = y.row(i);
                    let g_mean = gy.sum() / d;
                    let gy_dot_y: f64 = gy.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    let proj = gy_dot_y / d;
                    for j in 0..x.ncols() {
                        da[(i, j)] = istd * (gy[j] - g_mean - yr[j] * proj);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::Silu(a) => {
                let da = g * &self.vals[*a].mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                add_to(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = g * &self.vals[id].mapv(|y| 1.0 - y * y);
                add_to(grads, *a, da);
            }
            Op::Exp(a) => add_to(grads, *a, g * &self.vals[id]),
            Op::MeanRows(a) => {
                let rows = self.vals[*a].nrows();
                let scale = 1.0 / rows as f64;
                let row = g.row(0).to_owned();
                let da = Array2::from_shape_fn((rows, row.len()), |(_, j)| row[j] * scale);
                add_to(grads, *a, da);
            }
            Op::BroadcastRows(a) => {
                add_to(grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::RepeatRows(a, durations) => {
                let cols = self.vals[*a].ncols();
                let mut da = Array2::zeros((durations.len(), cols));
                let mut out = 0;
                for (i, &d) in durations.iter().enumerate() {
                    for _ in 0..d {
                        let gr = g.row(out);
                        let mut dr = da.row_mut(i);
                        dr += &gr;
                        out += 1;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::AvgPoolRows(a, factor) => {
                let rows = self.vals[*a].nrows();
                let mut da = Array2::zeros(self.vals[*a].dim());
                for r in 0..g.nrows() {
                    let lo = r * factor;
                    let hi = (lo + factor).min(rows);
                    let w = (hi - lo) as f64;
                    for t in lo..hi {
                        let gr = g.row(r).mapv(|x| x / w);
                        let mut dr = da.row_mut(t);
                        dr += &gr;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ShiftRows(a, offset) => {
                let rows = self.vals[*a].nrows() as isize;
                let mut da = Array2::zeros(self.vals[*a].dim());
                for t in 0..rows {
                    let src = t - offset;
                    if src >= 0 && src < rows {
                        da.row_mut(src as usize).assign(&g.row(t as usize));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::MseLoss(a, b) => {
                let diff = &self.vals[*a] - &self.vals[*b];
                let n = diff.len() as f64;
                let gs = g[(0, 0)] * 2.0 / n;
                add_to(grads, *a, diff.mapv(|x| x * gs));
                add_to(grads, *b, diff.mapv(|x| -x * gs));
            }
            Op::LogSoftmaxRow(a) => {
                let y = &self.vals[id];
                let mut da = g.clone();
                for (mut row, (gy_row, y_row)) in
                    da.rows_mut().into_iter().zip(g.rows().into_iter().zip(y.rows()))
                {
                    let gsum: f64 = gy_row.sum();
                    row.iter_mut()
                        .zip(y_row.iter())
                        .for_each(|(d, &lv)| *d -= gsum * lv.exp());
                }
                add_to(grads, *a, da);
            }
            Op::PickNeg(a, idx) => {
                let mut da = Array2::zeros(self.vals[*a].dim());
                da[(0, *idx)] = -g[(0, 0)];
                add_to(grads, *a, da);
            }
            Op::GradReverse(a, scale) => {
                add_to(grads, *a, g.mapv(|x| -scale * x));
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.vals[*a].dim(), g[(0, 0)]);
                add_to(grads, *a, da);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
