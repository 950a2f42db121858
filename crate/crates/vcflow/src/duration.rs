//! Duration prediction over deduplicated content, log-scale MSE training,
//! and length regulation back to frame level.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::VcError;
use crate::nn::{Binding, Conv1d3, Init, LayerNorm, Linear, ParamStore};
use crate::Result;

/// Predicts one log-duration per token from the content hidden sequence
/// with style and timbre summaries added as a per-position bias.
///
/// The final head is zero-initialized, so an untrained predictor outputs
/// log-duration 0 (one frame) everywhere.
#[derive(Debug, Clone)]
pub struct DurationPredictor {
    style_proj: Linear,
    ref_proj: Linear,
    timbre_proj: Linear,
    ln: LayerNorm,
    conv: Conv1d3,
    head: Linear,
}

impl DurationPredictor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        n_mels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            style_proj: Linear::new(
                store,
                &format!("{name}.style_proj"),
                width,
                width,
                Init::ScaledNormal,
                true,
                rng,
            ),
            ref_proj: Linear::new(
                store,
                &format!("{name}.ref_proj"),
                n_mels,
                width,
                Init::ScaledNormal,
                false,
                rng,
            ),
            timbre_proj: Linear::new(
                store,
                &format!("{name}.timbre_proj"),
                width,
                width,
                Init::ScaledNormal,
                false,
                rng,
            ),
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            conv: Conv1d3::new(store, &format!("{name}.conv"), width, width, rng),
            head: Linear::new(store, &format!("{name}.head"), width, 1, Init::Zeros, true, rng),
        }
    }

    /// Returns an L x 1 node of natural-log durations.
    ///
    /// `style_seq` is the encoded style sequence (summarized by its time
    /// average); `ref_mel` the raw reference frames (summarized by the time
    /// average of their value projections).
    pub fn predict(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        content_hidden: NodeId,
        style_seq: NodeId,
        ref_mel: NodeId,
    ) -> NodeId {
        let style_summary = tape.mean_rows(style_seq);
        let style_bias = self.style_proj.forward(tape, bind, style_summary);
        let ref_values = self.ref_proj.forward(tape, bind, ref_mel);
        let timbre_summary = tape.mean_rows(ref_values);
        let timbre_bias = self.timbre_proj.forward(tape, bind, timbre_summary);
        let bias = tape.add(style_bias, timbre_bias);

        let h = tape.add_row(content_hidden, bias);
        let normed = self.ln.forward(tape, bind, h);
        let act = tape.silu(normed);
        let conv = self.conv.forward(tape, bind, act);
        let h = tape.add(h, conv);
        self.head.forward(tape, bind, h)
    }
}

/// Mean squared error between predicted log-durations and log of the
/// ground-truth frame counts.
pub fn duration_loss(
    tape: &mut Tape,
    log_pred: NodeId,
    true_durations: &[u32],
) -> Result<NodeId> {
    if true_durations.iter().any(|&d| d < 1) {
        return Err(VcError::InvalidArg("duration < 1".into()));
    }
    if tape.value(log_pred).nrows() != true_durations.len() {
        return Err(VcError::InvalidArg(format!(
            "{} predictions vs {} durations",
            tape.value(log_pred).nrows(),
            true_durations.len()
        )));
    }
    let target = Array2::from_shape_fn((true_durations.len(), 1), |(i, _)| {
        (true_durations[i] as f64).ln()
    });
    let target = tape.leaf(target);
    Ok(tape.mse_loss(log_pred, target))
}

/// max(1, round(exp(log_d))) per token.
pub fn round_durations(log_durations: &Array2<f64>) -> Vec<u32> {
    log_durations
        .column(0)
        .iter()
        .map(|&ld| (ld.exp().round() as i64).max(1) as u32)
        .collect()
}

/// Repeats row i of `hidden` durations[i] times, preserving order.
pub fn regulate_length(hidden: &Array2<f64>, durations: &[u32]) -> Result<Array2<f64>> {
    if durations.len() != hidden.nrows() {
        return Err(VcError::InvalidArg(format!(
            "{} rows vs {} durations",
            hidden.nrows(),
            durations.len()
        )));
    }
    if durations.iter().any(|&d| d < 1) {
        return Err(VcError::InvalidArg("duration < 1".into()));
    }
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let mut out = Array2::zeros((total, hidden.ncols()));
    let mut row = 0;
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            out.row_mut(row).assign(&hidden.row(i));
            row += 1;
        }
    }
    Ok(out)
}
