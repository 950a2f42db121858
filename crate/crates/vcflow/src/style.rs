//! Style encoder (4x temporal average pooling + convolutional blocks) and
//! the adversarial speaker classifier behind a gradient reversal layer.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::VcError;
use crate::nn::{Binding, Conv1d3, Init, LayerNorm, Linear, ParamStore};
use crate::Result;

pub const POOL_FACTOR: usize = 4;

/// Residual conv block: x + conv3(silu(ln(x))).
#[derive(Debug, Clone)]
struct ConvBlock {
    ln: LayerNorm,
    conv: Conv1d3,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            conv: Conv1d3::new(store, &format!("{name}.conv"), width, width, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> NodeId {
        let h = self.ln.forward(tape, bind, x);
        let h = tape.silu(h);
        let h = self.conv.forward(tape, bind, h);
        tape.add(x, h)
    }
}

/// Sinusoidal channels appended to the pooled style frames so downstream
/// attention can align on normalized time.
pub const STYLE_POS_DIM: usize = 16;

/// Compresses quantized style frames 4x in time and mixes them through
/// residual convolutions. Normalized-position sinusoid channels are
/// appended after pooling so downstream attention can align on relative
/// time (the flow input carries the same encoding family).
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    in_proj: Linear,
    blocks: Vec<ConvBlock>,
    pub width: usize,
}

impl StyleEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        style_bins: usize,
        width: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_proj = Linear::new(
            store,
            &format!("{name}.in_proj"),
            style_bins + STYLE_POS_DIM,
            width,
            Init::ScaledNormal,
            true,
            rng,
        );
        let blocks = (0..n_blocks)
            .map(|i| ConvBlock::new(store, &format!("{name}.block{i}"), width, rng))
            .collect();
        Self {
            in_proj,
            blocks,
            width,
        }
    }

    /// Encodes T style frames into ceil(T/4) width-dim frames.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        style_feats: &Array2<f64>,
    ) -> Result<NodeId> {
        if style_feats.nrows() == 0 {
            return Err(VcError::InvalidArg("empty style features".into()));
        }
        let input = tape.leaf(style_feats.clone());
        let pooled = tape.avg_pool_rows(input, POOL_FACTOR);
        let n = tape.value(pooled).nrows();
        let pos = tape.leaf(crate::nn::position_encoding(n, STYLE_POS_DIM));
        let x = tape.concat_cols(&[pooled, pos]);
        let mut h = self.in_proj.forward(tape, bind, x);
        for block in &self.blocks {
            h = block.forward(tape, bind, h);
        }
        Ok(h)
    }
}

/// Speaker classifier fed through a gradient reversal layer.
///
/// Forward is the identity through the reversal; backward multiplies the
/// gradient flowing into the style encoder by -reversal_scale. The
/// classifier's own parameters receive unreversed gradients.
#[derive(Debug, Clone)]
pub struct GrlHead {
    pub classifier: Linear,
    pub reversal_scale: f64,
    pub n_speakers: usize,
}

impl GrlHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        n_speakers: usize,
        reversal_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(reversal_scale > 0.0);
        Self {
            classifier: Linear::new(
                store,
                &format!("{name}.classifier"),
                width,
                n_speakers,
                Init::ScaledNormal,
                true,
                rng,
            ),
            reversal_scale,
            n_speakers,
        }
    }

    /// Negative log-softmax probability of the true speaker from the
    /// time-averaged style sequence.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        style_seq: NodeId,
        speaker_label: usize,
    ) -> Result<NodeId> {
        self.loss_inner(tape, bind, style_seq, speaker_label, true)
    }

    /// Same loss with the reversal disabled; used by gradient checks.
    pub fn loss_without_reversal(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        style_seq: NodeId,
        speaker_label: usize,
    ) -> Result<NodeId> {
        self.loss_inner(tape, bind, style_seq, speaker_label, false)
    }

    fn loss_inner(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        style_seq: NodeId,
        speaker_label: usize,
        reversed: bool,
    ) -> Result<NodeId> {
        if speaker_label >= self.n_speakers {
            return Err(VcError::InvalidArg(format!(
                "speaker label {speaker_label} outside classifier of size {}",
                self.n_speakers
            )));
        }
        let global = tape.mean_rows(style_seq);
        let global = if reversed {
            tape.grad_reverse(global, self.reversal_scale)
        } else {
            global
        };
        // The classifier reads a unit-normalized summary. Without this the
        // reversed player wins the adversarial game by inflating feature
        // magnitudes, which blows up the NLL and corrupts the style stream
        // shared with the flow blocks.
        let global = tape.row_unit(global);
        let logits = self.classifier.forward(tape, bind, global);
        let log_probs = tape.log_softmax_row(logits);
        Ok(tape.pick_neg(log_probs, speaker_label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn encoder_setup(width: usize) -> (ParamStore, StyleEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = StyleEncoder::new(&mut store, "style", 8, width, 2, &mut rng);
        (store, enc)
    }

    fn rand_feats(seed: u64, rows: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, 8), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn output_length_is_ceil_t_over_4() {
        let (store, enc) = encoder_setup(16);
        for t in [1usize, 2, 3, 4, 5, 15, 16, 17, 33] {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let out = enc.encode(&mut tape, &bind, &rand_feats(t as u64, t)).unwrap();
            assert_eq!(tape.value(out).nrows(), t.div_ceil(4), "T={t}");
            assert_eq!(tape.value(out).ncols(), 16);
        }
    }

    #[test]
    fn empty_input_rejected() {
        let (store, enc) = encoder_setup(16);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        assert!(enc.encode(&mut tape, &bind, &Array2::zeros((0, 8))).is_err());
    }

    #[test]
    fn constant_input_pools_to_constant() {
        // The pooled pre-conv sequence of a time-constant input is constant.
        let feats = Array2::from_shape_fn((12, 8), |(_, j)| (j as f64) * 0.1);
        let mut tape = Tape::new();
        let id = tape.leaf(feats.clone());
        let pooled = tape.avg_pool_rows(id, POOL_FACTOR);
        for row in tape.value(pooled).rows() {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - j as f64 * 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let head = GrlHead::new(&mut store, "grl", 8, 7, 1.0, &mut rng);
        store.get_mut(head.classifier.w).fill(0.0);
        store.get_mut(head.classifier.b.unwrap()).fill(0.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let seq = tape.leaf(Array2::from_elem((5, 8), 0.3));
        let loss = head.loss(&mut tape, &bind, seq, 2).unwrap();
        assert!((tape.scalar(loss) - (7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_label_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let head = GrlHead::new(&mut store, "grl", 8, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let seq = tape.leaf(Array2::zeros((3, 8)));
        assert!(head.loss(&mut tape, &bind, seq, 4).is_err());
    }

    /// End-to-end GRL check: encoder parameters see -scale times the true
    /// derivative (verified against central finite differences), classifier
    /// parameters see the true derivative unchanged.
    #[test]
    fn reversal_flips_encoder_gradients_only() {
        let width = 8;
        let scale = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = StyleEncoder::new(&mut store, "style", 8, width, 2, &mut rng);
        let head = GrlHead::new(&mut store, "grl", width, 5, scale, &mut rng);
        let feats = rand_feats(77, 13);
        let label = 3;

        let eval_loss = |store: &ParamStore, reversed: bool| -> f64 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let seq = enc.encode(&mut tape, &bind, &feats).unwrap();
            let loss = if reversed {
                head.loss(&mut tape, &bind, seq, label).unwrap()
            } else {
                head.loss_without_reversal(&mut tape, &bind, seq, label).unwrap()
            };
            tape.scalar(loss)
        };

        // Forward value identical with and without reversal.
        assert_eq!(eval_loss(&store, true), eval_loss(&store, false));

        // Analytic gradients with reversal enabled.
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let seq = enc.encode(&mut tape, &bind, &feats).unwrap();
        let loss = head.loss(&mut tape, &bind, seq, label).unwrap();
        let node_grads = tape.backward(loss);
        let grads = store.collect_grads(&bind, &node_grads);

        let fd = |store: &mut ParamStore, name: &str, r: usize, c: usize| -> f64 {
            let eps = 1e-5;
            let orig = store.by_name(name).unwrap()[(r, c)];
            let mut plus = store.by_name(name).unwrap().clone();
            plus[(r, c)] = orig + eps;
            store.set_by_name(name, plus).unwrap();
            let lp = eval_loss(store, false);
            let mut minus = store.by_name(name).unwrap().clone();
            minus[(r, c)] = orig - eps;
            store.set_by_name(name, minus).unwrap();
            let lm = eval_loss(store, false);
            let mut back = store.by_name(name).unwrap().clone();
            back[(r, c)] = orig;
            store.set_by_name(name, back).unwrap();
            (lp - lm) / (2.0 * eps)
        };

        let mut store_mut = store.clone();
        // Encoder parameter: reversed analytic = -scale * true derivative.
        let enc_name = "style.block0.conv.w_cur";
        let enc_idx = store
            .names()
            .position(|n| n == enc_name)
            .expect("encoder param");
        for (r, c) in [(0, 0), (1, 3), (4, 2)] {
            let true_d = fd(&mut store_mut, enc_name, r, c);
            let rev_d = grads[enc_idx][(r, c)];
            let denom = true_d.abs().max(rev_d.abs()).max(1e-8);
            assert!(
                (rev_d + scale * true_d).abs() / denom < 1e-4,
                "encoder grad {rev_d} vs -{scale}*{true_d}"
            );
        }
        // Classifier parameter: identical with and without the reversal.
        let cls_name = "grl.classifier.w";
        let cls_idx = store.names().position(|n| n == cls_name).unwrap();
        for (r, c) in [(0, 0), (3, 2), (7, 4)] {
            let true_d = fd(&mut store_mut, cls_name, r, c);
            let an = grads[cls_idx][(r, c)];
            let denom = true_d.abs().max(an.abs()).max(1e-8);
            assert!(
                (an - true_d).abs() / denom < 1e-4,
                "classifier grad {an} vs fd {true_d}"
            );
        }
    }
}
