//! DiT blocks with dual attention and adaptive gate control.
//!
//! The flow blocks condition on a timestep through FiLM, then attend from
//! the content stream to two sources at once: reference mel frames (timbre,
//! with a prepended speaker-prior slot) and the compressed style sequence.
//! The style branch is gated by tanh(alpha) with alpha learned from zero, so
//! a freshly initialized block is exactly style-independent.
//!
//! Queries and keys are L2-normalized per head with a learned temperature
//! before the scaled dot product.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::VcError;
use crate::nn::{Binding, Ffn, Init, LayerNorm, Linear, Param, ParamStore};
use crate::Result;

/// Reference material for timbre attention: concatenated mel frames from
/// one speaker plus a model-width prior vector for that speaker.
#[derive(Debug, Clone)]
pub struct TimbreReference {
    /// T_r x n_mels.
    pub ref_mel: Array2<f64>,
    /// Width-dim speaker prior (projected from the speaker's tau).
    pub prior: Array1<f64>,
}

impl TimbreReference {
    pub fn prior_row(&self) -> Array2<f64> {
        self.prior.clone().insert_axis(ndarray::Axis(0))
    }
}

/// Feature-wise affine modulation from a timestep embedding.
///
/// Initialized to the identity: gamma = 1, beta = 0 for every timestep.
#[derive(Debug, Clone)]
pub struct FilmLayer {
    hidden: Linear,
    gamma: Linear,
    beta: Linear,
}

impl FilmLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = Linear::new(
            store,
            &format!("{name}.hidden"),
            width,
            width,
            Init::ScaledNormal,
            true,
            rng,
        );
        let gamma = Linear::new(
            store,
            &format!("{name}.gamma"),
            width,
            width,
            Init::Zeros,
            true,
            rng,
        );
        // Bias of 1 makes the scale start at identity.
        if let Some(b) = gamma.b {
            store.get_mut(b).fill(1.0);
        }
        let beta = Linear::new(
            store,
            &format!("{name}.beta"),
            width,
            width,
            Init::Zeros,
            true,
            rng,
        );
        Self {
            hidden,
            gamma,
            beta,
        }
    }

    /// `gamma(t) * c + beta(t)` with gamma/beta produced by a small net.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, c: NodeId, t_embed: NodeId) -> NodeId {
        let h = self.hidden.forward(tape, bind, t_embed);
        let h = tape.silu(h);
        let gamma = self.gamma.forward(tape, bind, h);
        let beta = self.beta.forward(tape, bind, h);
        let scaled = tape.mul_row(c, gamma);
        tape.add_row(scaled, beta)
    }
}

/// Dual attention over timbre (reference mel + prior slot) and style, with
/// the style branch gated by tanh(alpha).
#[derive(Debug, Clone)]
pub struct DualAttention {
    pub wq: Linear,
    pub wk_mel: Linear,
    pub wv_mel: Linear,
    pub prior_k: Linear,
    pub prior_v: Linear,
    pub wk_style: Linear,
    pub wv_style: Linear,
    pub wo: Linear,
    pub log_temp_timbre: Param,
    pub log_temp_style: Param,
    pub alpha: Param,
    pub heads: usize,
    pub head_dim: usize,
}

impl DualAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        n_mels: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(width % heads == 0, "width must divide into heads");
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, suffix: &str, d_in: usize| {
            Linear::new(
                store,
                &format!("{name}.{suffix}"),
                d_in,
                width,
                Init::ScaledNormal,
                false,
                rng,
            )
        };
        let wq = lin(store, rng, "wq", width);
        let wk_mel = lin(store, rng, "wk_mel", n_mels);
        let wv_mel = lin(store, rng, "wv_mel", n_mels);
        let prior_k = lin(store, rng, "prior_k", width);
        let prior_v = lin(store, rng, "prior_v", width);
        let wk_style = lin(store, rng, "wk_style", width);
        let wv_style = lin(store, rng, "wv_style", width);
        // Small style-value init: the zero gate's equilibrium scales
        // inversely with the squared value norm, so a large init pins the
        // gate at zero while a small one lets it open and bootstrap.
        store.get_mut(wv_style.w).mapv_inplace(|x| x * 0.1);
        let wo = Linear::new(
            store,
            &format!("{name}.wo"),
            width,
            width,
            Init::ScaledNormal,
            true,
            rng,
        );
        let log_temp_timbre = store.alloc(
            &format!("{name}.log_temp_timbre"),
            Array2::from_elem((1, 1), (10.0f64).ln()),
        );
        let log_temp_style = store.alloc(
            &format!("{name}.log_temp_style"),
            Array2::from_elem((1, 1), (10.0f64).ln()),
        );
        let alpha = store.alloc(&format!("{name}.alpha"), Array2::zeros((1, 1)));
        Self {
            wq,
            wk_mel,
            wv_mel,
            prior_k,
            prior_v,
            wk_style,
            wv_style,
            wo,
            log_temp_timbre,
            log_temp_style,
            alpha,
            heads,
            head_dim: width / heads,
        }
    }

    /// `c_norm` is the (layer-normalized) content stream, `style_seq` the
    /// encoded style frames, `ref_mel`/`prior` the timbre reference nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        c_norm: NodeId,
        style_seq: NodeId,
        ref_mel: NodeId,
        prior: NodeId,
    ) -> Result<NodeId> {
        if tape.value(ref_mel).nrows() == 0 {
            return Err(VcError::InvalidArg("empty timbre reference".into()));
        }
        let d = self.head_dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let q = self.wq.forward(tape, bind, c_norm);
        let k_mel = self.wk_mel.forward(tape, bind, ref_mel);
        let v_mel = self.wv_mel.forward(tape, bind, ref_mel);
        let k_prior = self.prior_k.forward(tape, bind, prior);
        let v_prior = self.prior_v.forward(tape, bind, prior);
        let k_style = self.wk_style.forward(tape, bind, style_seq);
        let v_style = self.wv_style.forward(tape, bind, style_seq);

        let temp_t = tape.exp(bind.node(self.log_temp_timbre));
        let temp_s = tape.exp(bind.node(self.log_temp_style));
        let alpha = bind.node(self.alpha);
        let gate = tape.tanh(alpha);

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * d;
            let qh = tape.slice_cols(q, lo, d);
            let qh = tape.row_unit(qh);

            // Timbre branch: prior slot occupies key/value row 0.
            let kp = tape.slice_cols(k_prior, lo, d);
            let km = tape.slice_cols(k_mel, lo, d);
            let kt = tape.concat_rows(&[kp, km]);
            let kt = tape.row_unit(kt);
            let vp = tape.slice_cols(v_prior, lo, d);
            let vm = tape.slice_cols(v_mel, lo, d);
            let vt = tape.concat_rows(&[vp, vm]);
            let logits_t = tape.matmul_nt(qh, kt);
            let logits_t = tape.scale(logits_t, inv_sqrt_d);
            let logits_t = tape.scale_var(logits_t, temp_t);
            let attn_t = tape.row_softmax(logits_t);
            let out_t = tape.matmul(attn_t, vt);

            // Style branch, gated by tanh(alpha).
            let ks = tape.slice_cols(k_style, lo, d);
            let ks = tape.row_unit(ks);
            let vs = tape.slice_cols(v_style, lo, d);
            let logits_s = tape.matmul_nt(qh, ks);
            let logits_s = tape.scale(logits_s, inv_sqrt_d);
            let logits_s = tape.scale_var(logits_s, temp_s);
            let attn_s = tape.row_softmax(logits_s);
            let out_s = tape.matmul(attn_s, vs);
            let gated_s = tape.scale_var(out_s, gate);

            head_outs.push(tape.add(out_t, gated_s));
        }
        let merged = tape.concat_cols(&head_outs);
        Ok(self.wo.forward(tape, bind, merged))
    }
}

/// Flow-stack DiT block: FiLM timestep conditioning, pre-norm dual
/// attention, pre-norm feed-forward, residual wiring.
#[derive(Debug, Clone)]
pub struct FlowBlock {
    pub film: FilmLayer,
    pub ln_attn: LayerNorm,
    pub attn: DualAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl FlowBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        n_mels: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            film: FilmLayer::new(store, &format!("{name}.film"), width, rng),
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: DualAttention::new(store, &format!("{name}.attn"), width, n_mels, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), width),
            ffn: Ffn::new(store, &format!("{name}.ffn"), width, ffn_hidden, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        c: NodeId,
        t_embed: NodeId,
        style_seq: NodeId,
        ref_mel: NodeId,
        prior: NodeId,
    ) -> Result<NodeId> {
        let c = self.film.forward(tape, bind, c, t_embed);
        let normed = self.ln_attn.forward(tape, bind, c);
        let attn = self
            .attn
            .forward(tape, bind, normed, style_seq, ref_mel, prior)?;
        let h = tape.add(c, attn);
        let normed = self.ln_ffn.forward(tape, bind, h);
        let f = self.ffn.forward(tape, bind, normed);
        Ok(tape.add(h, f))
    }
}

/// QK-normalized multi-head self-attention for the content stack.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub log_temp: Param,
    pub heads: usize,
    pub head_dim: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, suffix: &str| {
            Linear::new(
                store,
                &format!("{name}.{suffix}"),
                width,
                width,
                Init::ScaledNormal,
                false,
                rng,
            )
        };
        let wq = lin(store, rng, "wq");
        let wk = lin(store, rng, "wk");
        let wv = lin(store, rng, "wv");
        let wo = Linear::new(
            store,
            &format!("{name}.wo"),
            width,
            width,
            Init::ScaledNormal,
            true,
            rng,
        );
        let log_temp = store.alloc(
            &format!("{name}.log_temp"),
            Array2::from_elem((1, 1), (10.0f64).ln()),
        );
        Self {
            wq,
            wk,
            wv,
            wo,
            log_temp,
            heads,
            head_dim: width / heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> NodeId {
        let d = self.head_dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let q = self.wq.forward(tape, bind, x);
        let k = self.wk.forward(tape, bind, x);
        let v = self.wv.forward(tape, bind, x);
        let temp = tape.exp(bind.node(self.log_temp));

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * d;
            let qh = tape.slice_cols(q, lo, d);
            let qh = tape.row_unit(qh);
            let kh = tape.slice_cols(k, lo, d);
            let kh = tape.row_unit(kh);
            let vh = tape.slice_cols(v, lo, d);
            let logits = tape.matmul_nt(qh, kh);
            let logits = tape.scale(logits, inv_sqrt_d);
            let logits = tape.scale_var(logits, temp);
            let attn = tape.row_softmax(logits);
            head_outs.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&head_outs);
        self.wo.forward(tape, bind, merged)
    }
}

/// Content-stack block: pre-norm self-attention + feed-forward. No
/// timestep or style/timbre conditioning — content must stay factor-free.
#[derive(Debug, Clone)]
pub struct ContentBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl ContentBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), width),
            ffn: Ffn::new(store, &format!("{name}.ffn"), width, ffn_hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> NodeId {
        let normed = self.ln_attn.forward(tape, bind, x);
        let attn = self.attn.forward(tape, bind, normed);
        let h = tape.add(x, attn);
        let normed = self.ln_ffn.forward(tape, bind, h);
        let f = self.ffn.forward(tape, bind, normed);
        tape.add(h, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::prelude::*;

    fn setup(width: usize, n_mels: usize, heads: usize) -> (ParamStore, DualAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let attn = DualAttention::new(&mut store, "attn", width, n_mels, heads, &mut rng);
        (store, attn)
    }

    fn rand_mat(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn run_attn(
        store: &ParamStore,
        attn: &DualAttention,
        c: &Array2<f64>,
        style: &Array2<f64>,
        ref_mel: &Array2<f64>,
        prior: &Array2<f64>,
    ) -> Array2<f64> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(c.clone());
        let sid = tape.leaf(style.clone());
        let rid = tape.leaf(ref_mel.clone());
        let pid = tape.leaf(prior.clone());
        let out = attn.forward(&mut tape, &bind, cid, sid, rid, pid).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_alpha_ignores_style_bitwise() {
        let (store, attn) = setup(16, 10, 2);
        let c = rand_mat(1, 5, 16);
        let ref_mel = rand_mat(2, 7, 10);
        let prior = rand_mat(3, 1, 16);
        let out_a = run_attn(&store, &attn, &c, &rand_mat(4, 6, 16), &ref_mel, &prior);
        let out_b = run_attn(&store, &attn, &c, &rand_mat(5, 9, 16), &ref_mel, &prior);
        for (a, b) in out_a.iter().zip(out_b.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn softmax_rows_normalized_inside_attention() {
        // Run the same projections manually and check the row sums.
        let (store, attn) = setup(16, 10, 2);
        let c = rand_mat(6, 4, 16);
        let ref_mel = rand_mat(7, 5, 10);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(c);
        let rid = tape.leaf(ref_mel);
        let q = attn.wq.forward(&mut tape, &bind, cid);
        let k = attn.wk_mel.forward(&mut tape, &bind, rid);
        let d = attn.head_dim;
        for h in 0..attn.heads {
            let qh = tape.slice_cols(q, h * d, d);
            let qh = tape.row_unit(qh);
            let kh = tape.slice_cols(k, h * d, d);
            let kh = tape.row_unit(kh);
            let logits = tape.matmul_nt(qh, kh);
            let sm = tape.row_softmax(logits);
            for row in tape.value(sm).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn qk_norm_bounds_logits_by_temperature() {
        let (store, attn) = setup(16, 10, 2);
        let c = rand_mat(8, 4, 16).mapv(|x| x * 30.0);
        let ref_mel = rand_mat(9, 5, 10).mapv(|x| x * 30.0);
        let temp = store.get(attn.log_temp_timbre)[(0, 0)].exp();

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(c);
        let rid = tape.leaf(ref_mel);
        let q = attn.wq.forward(&mut tape, &bind, cid);
        let k = attn.wk_mel.forward(&mut tape, &bind, rid);
        let d = attn.head_dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for h in 0..attn.heads {
            let qh = tape.slice_cols(q, h * d, d);
            let qh = tape.row_unit(qh);
            let kh = tape.slice_cols(k, h * d, d);
            let kh = tape.row_unit(kh);
            let logits = tape.matmul_nt(qh, kh);
            let logits = tape.scale(logits, inv_sqrt_d);
            let tnode = tape.exp(bind.node(attn.log_temp_timbre));
            let logits = tape.scale_var(logits, tnode);
            for &v in tape.value(logits).iter() {
                assert!(v.abs() <= temp + 1e-9, "logit {v} exceeds temperature {temp}");
            }
        }
    }

    #[test]
    fn timbre_reference_permutation_invariance() {
        let (store, attn) = setup(16, 10, 4);
        let c = rand_mat(10, 6, 16);
        let style = rand_mat(11, 4, 16);
        let ref_mel = rand_mat(12, 8, 10);
        let prior = rand_mat(13, 1, 16);

        let out_a = run_attn(&store, &attn, &c, &style, &ref_mel, &prior);

        // Joint permutation of reference frames; prior slot stays at 0.
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let mut shuffled = Array2::zeros(ref_mel.dim());
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).assign(&ref_mel.row(src));
        }
        let out_b = run_attn(&store, &attn, &c, &style, &shuffled, &prior);

        for (a, b) in out_a.iter().zip(out_b.iter()) {
            let denom = a.abs().max(b.abs()).max(1e-9);
            assert!((a - b).abs() / denom < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_reference_rejected() {
        let (store, attn) = setup(16, 10, 2);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let c = tape.leaf(rand_mat(14, 3, 16));
        let s = tape.leaf(rand_mat(15, 3, 16));
        let r = tape.leaf(Array2::zeros((0, 10)));
        let p = tape.leaf(rand_mat(16, 1, 16));
        assert!(attn.forward(&mut tape, &bind, c, s, r, p).is_err());
    }

    #[test]
    fn film_identity_when_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut store = ParamStore::new();
        let film = FilmLayer::new(&mut store, "film", 8, &mut rng);
        // Freshly initialized FiLM is the identity (gamma=1, beta=0).
        let c = rand_mat(17, 5, 8);
        let t_embed = rand_mat(18, 1, 8);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(c.clone());
        let tid = tape.leaf(t_embed);
        let out = film.forward(&mut tape, &bind, cid, tid);
        assert_eq!(tape.value(out), &c);
    }

    #[test]
    fn film_gamma_zero_broadcasts_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let film = FilmLayer::new(&mut store, "film", 8, &mut rng);
        store.get_mut(film.gamma.b.unwrap()).fill(0.0);
        store.get_mut(film.beta.b.unwrap()).fill(0.25);
        let c = rand_mat(19, 5, 8);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(c);
        let tid = tape.leaf(Array2::zeros((1, 8)));
        let out = film.forward(&mut tape, &bind, cid, tid);
        // gamma=0: output is beta regardless of c.
        for &v in tape.value(out).iter() {
            assert_eq!(v, 0.25);
        }
        // c=0: output is beta for any gamma.
        store.get_mut(film.gamma.b.unwrap()).fill(1.0);
        let mut tape2 = Tape::new();
        let bind2 = store.bind(&mut tape2);
        let zid = tape2.leaf(Array2::zeros((5, 8)));
        let tid2 = tape2.leaf(Array2::zeros((1, 8)));
        let out2 = film.forward(&mut tape2, &bind2, zid, tid2);
        for &v in tape2.value(out2).iter() {
            assert_eq!(v, 0.25);
        }
    }

    fn block_setup() -> (ParamStore, FlowBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut store = ParamStore::new();
        let block = FlowBlock::new(&mut store, "blk", 16, 10, 2, 32, &mut rng);
        (store, block)
    }

    fn run_block(
        store: &ParamStore,
        block: &FlowBlock,
        c: &Array2<f64>,
        t_embed: &Array2<f64>,
        style: &Array2<f64>,
        ref_mel: &Array2<f64>,
        prior: &Array2<f64>,
    ) -> Array2<f64> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(c.clone());
        let tid = tape.leaf(t_embed.clone());
        let sid = tape.leaf(style.clone());
        let rid = tape.leaf(ref_mel.clone());
        let pid = tape.leaf(prior.clone());
        let out = block
            .forward(&mut tape, &bind, cid, tid, sid, rid, pid)
            .unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn block_preserves_shape() {
        let (store, block) = block_setup();
        for rows in [1usize, 3, 9] {
            let out = run_block(
                &store,
                &block,
                &rand_mat(50, rows, 16),
                &rand_mat(51, 1, 16),
                &rand_mat(52, 4, 16),
                &rand_mat(53, 6, 10),
                &rand_mat(54, 1, 16),
            );
            assert_eq!(out.dim(), (rows, 16));
        }
    }

    #[test]
    fn zeroed_output_projection_reduces_to_residual_path() {
        let (mut store, block) = block_setup();
        store.get_mut(block.attn.wo.w).fill(0.0);
        store.get_mut(block.attn.wo.b.unwrap()).fill(0.0);

        let c = rand_mat(60, 4, 16);
        let t_embed = rand_mat(61, 1, 16);
        let out = run_block(
            &store,
            &block,
            &c,
            &t_embed,
            &rand_mat(62, 4, 16),
            &rand_mat(63, 5, 10),
            &rand_mat(64, 1, 16),
        );

        // Expected: film + feed-forward residual only.
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(c);
        let tid = tape.leaf(t_embed);
        let filmed = block.film.forward(&mut tape, &bind, cid, tid);
        let normed = block.ln_ffn.forward(&mut tape, &bind, filmed);
        let f = block.ffn.forward(&mut tape, &bind, normed);
        let expect = tape.add(filmed, f);
        assert_eq!(&out, tape.value(expect));
    }

    #[test]
    fn gate_gradient_nonzero_with_nonzero_style() {
        let (store, block) = block_setup();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let cid = tape.leaf(rand_mat(70, 4, 16));
        let tid = tape.leaf(rand_mat(71, 1, 16));
        let sid = tape.leaf(rand_mat(72, 4, 16));
        let rid = tape.leaf(rand_mat(73, 5, 10));
        let pid = tape.leaf(rand_mat(74, 1, 16));
        let out = block
            .forward(&mut tape, &bind, cid, tid, sid, rid, pid)
            .unwrap();
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss);
        let g_alpha = grads[bind.node(block.attn.alpha)].as_ref().unwrap();
        assert!(g_alpha[(0, 0)].abs() > 1e-12, "gate gradient is zero");
    }

    #[test]
    fn content_block_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut store = ParamStore::new();
        let block = ContentBlock::new(&mut store, "cb", 16, 2, 32, &mut rng);
        let x = rand_mat(81, 7, 16);
        let run = || {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let xid = tape.leaf(x.clone());
            let out = block.forward(&mut tape, &bind, xid);
            tape.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.dim(), (7, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn timbre_reference_prior_row_shape() {
        let r = TimbreReference {
            ref_mel: Array2::zeros((3, 10)),
            prior: Array1::from_elem(16, 0.5),
        };
        assert_eq!(r.prior_row().dim(), (1, 16));
    }
}
