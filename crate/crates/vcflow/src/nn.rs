//! Parameter management and small neural building blocks on top of the tape.
//!
//! Parameters are held in f64 for exact gradient work but are constrained to
//! f32-representable values (enforced at init and after every optimizer
//! step) so the f32 checkpoint container round-trips them bit-exactly.

use std::collections::HashMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Param(pub usize);

/// Named parameter tensors in allocation order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

/// Rounds every entry through f32 so it survives f32 serialization exactly.
pub fn round_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: &str, mut value: Array2<f64>) -> Param {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        round_f32(&mut value);
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Param(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, p: Param) -> &str {
        &self.names[p.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, p: Param) -> &Array2<f64> {
        &self.values[p.0]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Array2<f64> {
        &mut self.values[p.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn set_by_name(&mut self, name: &str, value: Array2<f64>) -> Option<()> {
        let idx = *self.index.get(name)?;
        self.values[idx] = value;
        Some(())
    }

    /// Inserts every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Binding { ids }
    }

    /// Sums gradients from `tape.backward` into a per-parameter vector,
    /// adding zero arrays for parameters the loss does not reach.
    pub fn collect_grads(
        &self,
        binding: &Binding,
        node_grads: &[Option<Array2<f64>>],
    ) -> Vec<Array2<f64>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| match &node_grads[binding.ids[i]] {
                Some(g) => g.clone(),
                None => Array2::zeros(v.dim()),
            })
            .collect()
    }
}

/// Per-tape node ids for each parameter, in store order.
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, p: Param) -> NodeId {
        self.ids[p.0]
    }
}

/// How a tensor is filled at allocation time.
pub enum Init {
    Zeros,
    Const(f64),
    /// Gaussian with std 1/sqrt(fan_in).
    ScaledNormal,
}

/// Dense layer `x . w + b` with `w: (d_in, d_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.alloc(&format!("{name}.w"), init_matrix(d_in, d_out, &init, rng));
        let b = bias.then(|| store.alloc(&format!("{name}.b"), Array2::zeros((1, d_out))));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> NodeId {
        let y = tape.matmul(x, bind.node(self.w));
        match self.b {
            Some(b) => tape.add_row(y, bind.node(b)),
            None => y,
        }
    }
}

fn init_matrix(d_in: usize, d_out: usize, init: &Init, rng: &mut ChaCha8Rng) -> Array2<f64> {
    match init {
        Init::Zeros => Array2::zeros((d_in, d_out)),
        Init::Const(c) => Array2::from_elem((d_in, d_out), *c),
        Init::ScaledNormal => {
            let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).unwrap();
            Array2::from_shape_fn((d_in, d_out), |_| normal.sample(rng))
        }
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.alloc(&format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: store.alloc(&format!("{name}.beta"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> NodeId {
        let n = tape.row_standardize(x);
        let scaled = tape.mul_row(n, bind.node(self.gamma));
        tape.add_row(scaled, bind.node(self.beta))
    }
}

/// Kernel-3 1-D convolution over rows (time), same padding.
#[derive(Debug, Clone)]
pub struct Conv1d3 {
    pub w_prev: Param,
    pub w_cur: Param,
    pub w_next: Param,
    pub b: Param,
}

impl Conv1d3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // 1/sqrt(3*d_in) keeps the summed taps at unit variance.
        let normal = Normal::new(0.0, 1.0 / (3.0 * d_in as f64).sqrt()).unwrap();
        let mut draw = |suffix: &str| {
            store.alloc(
                &format!("{name}.{suffix}"),
                Array2::from_shape_fn((d_in, d_out), |_| normal.sample(rng)),
            )
        };
        let w_prev = draw("w_prev");
        let w_cur = draw("w_cur");
        let w_next = draw("w_next");
        let b = store.alloc(&format!("{name}.b"), Array2::zeros((1, d_out)));
        Self {
            w_prev,
            w_cur,
            w_next,
            b,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> NodeId {
        let from_prev = tape.shift_rows(x, 1);
        let from_next = tape.shift_rows(x, -1);
        let a = tape.matmul(from_prev, bind.node(self.w_prev));
        let b = tape.matmul(x, bind.node(self.w_cur));
        let c = tape.matmul(from_next, bind.node(self.w_next));
        let ab = tape.add(a, b);
        let abc = tape.add(ab, c);
        tape.add_row(abc, bind.node(self.b))
    }
}

/// Two-layer feed-forward block with SiLU.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), dim, hidden, Init::ScaledNormal, true, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), hidden, dim, Init::ScaledNormal, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> NodeId {
        let h = self.lin1.forward(tape, bind, x);
        let h = tape.silu(h);
        self.lin2.forward(tape, bind, h)
    }
}

/// Adam with decoupled weight decay. Updated parameters are re-rounded to
/// f32-representable values to keep checkpoints lossless.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = (0..store.len())
            .map(|i| Array2::zeros(store.get(Param(i)).dim()))
            .collect();
        let v = (0..store.len())
            .map(|i| Array2::zeros(store.get(Param(i)).dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i]
                .zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let p = store.get_mut(Param(i));
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
                });
            round_f32(p);
        }
    }
}

/// Sinusoidal features of a scalar position `u` (typically in [0, 1]).
pub fn sinusoid_row(u: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut row = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = u * 1000.0 * freq;
        row[(0, i)] = angle.sin();
        row[(0, half + i)] = angle.cos();
    }
    row
}

/// Stacked sinusoidal encodings of normalized row positions (t+0.5)/rows.
pub fn position_encoding(rows: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, dim));
    for t in 0..rows {
        let u = (t as f64 + 0.5) / rows as f64;
        out.row_mut(t).assign(&sinusoid_row(u, dim).row(0));
    }
    out
}

/// Deterministic seed derivation for independent substreams.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
