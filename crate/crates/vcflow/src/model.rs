//! Full voice-conversion model: content stack over deduplicated tokens,
//! duration prediction, the dual-attention flow matching stack, the total
//! training objective, the training loop, and conversion.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{ContentBlock, FlowBlock, TimbreReference};
use crate::autodiff::{NodeId, Tape};
use crate::content::{Codebook, ContentSequence};
use crate::corpus::{Corpus, Utterance};
use crate::duration::{self, DurationPredictor};
use crate::error::VcError;
use crate::flow::{self, ConditionBundle, VectorField};
use crate::nn::{
    derive_seed, position_encoding, sinusoid_row, AdamW, Binding, Init, LayerNorm, Linear, Param,
    ParamStore,
};
use crate::style::{GrlHead, StyleEncoder};
use crate::Result;

/// Architecture hyperparameters; serialized into checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub content_blocks: usize,
    pub flow_blocks: usize,
    pub style_conv_blocks: usize,
    pub n_mels: usize,
    pub ssl_dim: usize,
    pub style_bins: usize,
    pub timbre_rank: usize,
    pub n_speakers: usize,
    /// Positional channels appended to the flow input.
    pub pos_dim: usize,
    pub reversal_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            ffn_hidden: 128,
            content_blocks: 2,
            flow_blocks: 4,
            style_conv_blocks: 2,
            n_mels: 40,
            ssl_dim: 32,
            style_bins: 8,
            timbre_rank: 8,
            n_speakers: 32,
            pos_dim: 16,
            reversal_scale: 1.0,
        }
    }
}

/// Optimization settings. Defaults follow the reference configuration:
/// learning rate 1e-4, loss balance lambda 0.1, sigma_min 1e-4, 10 Euler
/// steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub lambda_grl: f64,
    pub sigma_min: f64,
    pub euler_steps: usize,
    /// Probability of replacing the condition bundle with the learned null
    /// bundle during training (classifier-free guidance hook).
    pub cond_dropout: f64,
    /// Probability of nulling only the timbre reference while style and
    /// content stay real. Forces the gated style branch to carry the pitch
    /// band on its own.
    pub timbre_dropout: f64,
    /// Gate warm-up: the style gates ramp linearly from 0 to
    /// `gate_warmup_target` over this many iterations, then train freely.
    /// Implements the gradual style injection the gate exists for; without
    /// it the zero-initialized gates sit in a self-reinforcing optimum at
    /// desk-scale iteration counts (the branch behind tanh(0) receives no
    /// gradient). 0 disables the ramp.
    pub gate_warmup_iters: usize,
    pub gate_warmup_target: f64,
    pub refs_min: usize,
    pub refs_max: usize,
    /// Cap on concatenated reference frames during training.
    pub max_ref_frames: usize,
    /// Global L2 gradient-norm clip applied to the averaged batch gradient
    /// (0 disables). Keeps the adversarial game and early flow updates from
    /// destabilizing training.
    pub grad_clip: f64,
    /// Checkpoint callback period in iterations (0 disables).
    pub ckpt_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 8,
            iters: 1000,
            lambda_grl: 0.1,
            sigma_min: flow::SIGMA_MIN,
            euler_steps: flow::DEFAULT_EULER_STEPS,
            cond_dropout: 0.1,
            timbre_dropout: 0.3,
            gate_warmup_iters: 1500,
            gate_warmup_target: 0.75,
            refs_min: 1,
            refs_max: 3,
            max_ref_frames: 160,
            grad_clip: 5.0,
            ckpt_every: 0,
            seed: 0,
        }
    }
}

/// The assembled model.
pub struct VcModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub codebook: Codebook,
    content_emb: Linear,
    content_blocks: Vec<ContentBlock>,
    t_lin1: Linear,
    t_lin2: Linear,
    in_proj: Linear,
    flow_blocks: Vec<FlowBlock>,
    out_ln: LayerNorm,
    out_proj: Linear,
    pub style_enc: StyleEncoder,
    pub grl: GrlHead,
    dur: DurationPredictor,
    prior_proj: Linear,
    null_content: Param,
    null_style: Param,
    null_ref: Param,
    null_prior: Param,
}

/// Condition nodes on one tape (real or null bundle).
struct CondNodes {
    frame_content: NodeId,
    style_seq: NodeId,
    ref_mel: NodeId,
    prior: NodeId,
}

/// Per-example inputs to the total training objective.
pub struct LossInputs<'a> {
    pub utterance: &'a Utterance,
    pub refs: &'a [&'a Utterance],
    pub speaker_tau: &'a Array1<f64>,
    pub speaker_label: usize,
    pub t: f64,
    pub x0: &'a Array2<f64>,
    pub drop_condition: bool,
    pub drop_timbre: bool,
    pub lambda_grl: f64,
    pub sigma_min: f64,
}

pub struct LossNodes {
    pub total: NodeId,
    pub cfm: NodeId,
    pub dur: NodeId,
    pub grl: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cfm: f64,
    pub dur: f64,
    pub grl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub cfm: f64,
    pub dur: f64,
    pub grl: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
}

/// Result of one conversion.
#[derive(Debug, Clone)]
pub struct Conversion {
    pub mel: Array2<f64>,
    pub durations: Vec<u32>,
    pub token_ids: Vec<u32>,
}

impl VcModel {
    pub fn new(cfg: ModelConfig, codebook: Codebook, seed: u64) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(VcError::InvalidArg(format!(
                "width {} not divisible by heads {}",
                cfg.width, cfg.heads
            )));
        }
        if codebook.dim() != cfg.ssl_dim {
            return Err(VcError::InvalidArg(format!(
                "codebook dim {} does not match ssl_dim {}",
                codebook.dim(),
                cfg.ssl_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7, 0));
        let mut store = ParamStore::new();
        let w = cfg.width;

        let content_emb = Linear::new(
            &mut store,
            "content.emb",
            cfg.ssl_dim,
            w,
            Init::ScaledNormal,
            true,
            &mut rng,
        );
        let content_blocks = (0..cfg.content_blocks)
            .map(|i| {
                ContentBlock::new(
                    &mut store,
                    &format!("content.block{i}"),
                    w,
                    cfg.heads,
                    cfg.ffn_hidden,
                    &mut rng,
                )
            })
            .collect();
        let t_lin1 = Linear::new(&mut store, "time.lin1", w, w, Init::ScaledNormal, true, &mut rng);
        let t_lin2 = Linear::new(&mut store, "time.lin2", w, w, Init::ScaledNormal, true, &mut rng);
        let in_proj = Linear::new(
            &mut store,
            "flow.in_proj",
            cfg.n_mels + w + cfg.pos_dim,
            w,
            Init::ScaledNormal,
            true,
            &mut rng,
        );
        let flow_blocks = (0..cfg.flow_blocks)
            .map(|i| {
                FlowBlock::new(
                    &mut store,
                    &format!("flow.block{i}"),
                    w,
                    cfg.n_mels,
                    cfg.heads,
                    cfg.ffn_hidden,
                    &mut rng,
                )
            })
            .collect();
        let out_ln = LayerNorm::new(&mut store, "flow.out_ln", w);
        let out_proj = Linear::new(
            &mut store,
            "flow.out_proj",
            w,
            cfg.n_mels,
            Init::ScaledNormal,
            true,
            &mut rng,
        );
        let style_enc = StyleEncoder::new(
            &mut store,
            "style",
            cfg.style_bins,
            w,
            cfg.style_conv_blocks,
            &mut rng,
        );
        let grl = GrlHead::new(
            &mut store,
            "grl",
            w,
            cfg.n_speakers,
            cfg.reversal_scale,
            &mut rng,
        );
        let dur = DurationPredictor::new(&mut store, "dur", w, cfg.n_mels, &mut rng);
        let prior_proj = Linear::new(
            &mut store,
            "timbre.prior_proj",
            cfg.timbre_rank,
            w,
            Init::ScaledNormal,
            true,
            &mut rng,
        );
        let normal = |rng: &mut ChaCha8Rng, n: usize| {
            Array2::from_shape_fn((1, n), |_| {
                rng.sample::<f64, _>(StandardNormal) * 0.1
            })
        };
        let nc = normal(&mut rng, w);
        let null_content = store.alloc("null.content", nc);
        let ns = normal(&mut rng, w);
        let null_style = store.alloc("null.style", ns);
        let nr = normal(&mut rng, cfg.n_mels);
        let null_ref = store.alloc("null.ref_mel", nr);
        let np = normal(&mut rng, w);
        let null_prior = store.alloc("null.prior", np);

        Ok(Self {
            cfg,
            store,
            codebook,
            content_emb,
            content_blocks,
            t_lin1,
            t_lin2,
            in_proj,
            flow_blocks,
            out_ln,
            out_proj,
            style_enc,
            grl,
            dur,
            prior_proj,
            null_content,
            null_style,
            null_ref,
            null_prior,
        })
    }

    fn embed_timestep(&self, tape: &mut Tape, bind: &Binding, t: f64) -> NodeId {
        let sin = tape.leaf(sinusoid_row(t, self.cfg.width));
        let h = self.t_lin1.forward(tape, bind, sin);
        let h = tape.silu(h);
        self.t_lin2.forward(tape, bind, h)
    }

    /// Content stack over deduplicated token embeddings.
    fn encode_content(&self, tape: &mut Tape, bind: &Binding, embeddings: &Array2<f64>) -> NodeId {
        let emb = tape.leaf(embeddings.clone());
        let mut h = self.content_emb.forward(tape, bind, emb);
        let pos = tape.leaf(position_encoding(embeddings.nrows(), self.cfg.width));
        h = tape.add(h, pos);
        for block in &self.content_blocks {
            h = block.forward(tape, bind, h);
        }
        h
    }

    /// Vector-field evaluation on the tape.
    fn field_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x_t: NodeId,
        t: f64,
        cond: &CondNodes,
    ) -> Result<NodeId> {
        let rows = tape.value(x_t).nrows();
        let t_embed = self.embed_timestep(tape, bind, t);
        let pos = tape.leaf(position_encoding(rows, self.cfg.pos_dim));
        let xin = tape.concat_cols(&[x_t, cond.frame_content, pos]);
        let mut h = self.in_proj.forward(tape, bind, xin);
        for block in &self.flow_blocks {
            h = block.forward(
                tape,
                bind,
                h,
                t_embed,
                cond.style_seq,
                cond.ref_mel,
                cond.prior,
            )?;
        }
        let h = self.out_ln.forward(tape, bind, h);
        Ok(self.out_proj.forward(tape, bind, h))
    }

    fn null_cond(&self, tape: &mut Tape, bind: &Binding, rows: usize) -> CondNodes {
        CondNodes {
            frame_content: tape.broadcast_rows(bind.node(self.null_content), rows),
            style_seq: bind.node(self.null_style),
            ref_mel: bind.node(self.null_ref),
            prior: bind.node(self.null_prior),
        }
    }

    /// Total objective: CFM + duration + lambda * GRL on one utterance.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        inputs: &LossInputs,
    ) -> Result<LossNodes> {
        let utt = inputs.utterance;
        if inputs.refs.is_empty() {
            return Err(VcError::InvalidArg("empty timbre references".into()));
        }
        if inputs.refs.iter().any(|r| r.speaker_id != utt.speaker_id) {
            return Err(VcError::InvalidArg(
                "training timbre references must come from the source speaker".into(),
            ));
        }
        let content = ContentSequence::extract(utt.ssl.view(), &self.codebook)?;
        let content_hidden = self.encode_content(tape, bind, &content.embeddings);

        // Teacher durations align content to frame level during training.
        let teacher: Vec<usize> = content.durations.iter().map(|&d| d as usize).collect();
        let frame_content = tape.repeat_rows(content_hidden, &teacher);

        let style_seq = self.style_enc.encode(tape, bind, &utt.style_feats)?;

        let ref_mel_data = concat_ref_mels(inputs.refs, usize::MAX);
        let ref_mel = tape.leaf(ref_mel_data);
        let tau = tape.leaf(tau_row(inputs.speaker_tau));
        let prior = self.prior_proj.forward(tape, bind, tau);

        // Flow-matching regression on the mel target.
        let x_t = flow::sample_path(inputs.x0, &utt.mel, inputs.t, inputs.sigma_min)?;
        let target = flow::cfm_target(inputs.x0, &utt.mel, inputs.sigma_min);
        let x_t = tape.leaf(x_t);
        let target = tape.leaf(target);
        let cond = if inputs.drop_condition {
            self.null_cond(tape, bind, utt.n_frames())
        } else if inputs.drop_timbre {
            CondNodes {
                frame_content,
                style_seq,
                ref_mel: bind.node(self.null_ref),
                prior: bind.node(self.null_prior),
            }
        } else {
            CondNodes {
                frame_content,
                style_seq,
                ref_mel,
                prior,
            }
        };
        let pred = self.field_forward(tape, bind, x_t, inputs.t, &cond)?;
        let cfm = tape.mse_loss(pred, target);

        // Duration and adversarial losses always see real conditions.
        let log_pred = self
            .dur
            .predict(tape, bind, content_hidden, style_seq, ref_mel);
        let dur = duration::duration_loss(tape, log_pred, &content.durations)?;
        let grl = self.grl.loss(tape, bind, style_seq, inputs.speaker_label)?;

        let scaled_grl = tape.scale(grl, inputs.lambda_grl);
        let partial = tape.add(cfm, dur);
        let total = tape.add(partial, scaled_grl);
        Ok(LossNodes {
            total,
            cfm,
            dur,
            grl,
        })
    }

    /// Loss components on a fresh tape, without gradients.
    pub fn loss_values(&self, inputs: &LossInputs) -> Result<LossValues> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let nodes = self.total_loss(&mut tape, &bind, inputs)?;
        Ok(LossValues {
            total: tape.scalar(nodes.total),
            cfm: tape.scalar(nodes.cfm),
            dur: tape.scalar(nodes.dur),
            grl: tape.scalar(nodes.grl),
        })
    }

    /// Loss components plus per-parameter gradients of the total loss.
    pub fn loss_gradients(&self, inputs: &LossInputs) -> Result<(LossValues, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let nodes = self.total_loss(&mut tape, &bind, inputs)?;
        let values = LossValues {
            total: tape.scalar(nodes.total),
            cfm: tape.scalar(nodes.cfm),
            dur: tape.scalar(nodes.dur),
            grl: tape.scalar(nodes.grl),
        };
        let node_grads = tape.backward(nodes.total);
        Ok((values, self.store.collect_grads(&bind, &node_grads)))
    }

    /// Seeded, iteration-bounded training loop (single logical writer).
    pub fn train(
        &mut self,
        corpus: &Corpus,
        cfg: &TrainConfig,
        mut on_checkpoint: impl FnMut(&VcModel, usize) -> Result<()>,
    ) -> Result<TrainReport> {
        if corpus.utterances.is_empty() {
            return Err(VcError::Data("empty corpus".into()));
        }
        if cfg.batch_size == 0 {
            return Err(VcError::InvalidArg("batch_size must be positive".into()));
        }
        let offset = corpus.cfg.speaker_offset;
        for utt in &corpus.utterances {
            let label = (utt.speaker_id - offset) as usize;
            if label >= self.cfg.n_speakers {
                return Err(VcError::InvalidArg(format!(
                    "speaker label {label} outside classifier of size {}",
                    self.cfg.n_speakers
                )));
            }
        }

        let mut opt = AdamW::new(&self.store, cfg.lr, cfg.weight_decay);
        let mut report = TrainReport::default();
        let n = corpus.utterances.len();
        let gate_params: Vec<Param> = (0..self.store.len())
            .map(Param)
            .filter(|&p| self.store.name(p).ends_with(".alpha"))
            .collect();

        for iter in 0..cfg.iters {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 10, iter as u64));
            let mut grad_sum: Option<Vec<Array2<f64>>> = None;
            let mut sums = LossValues {
                total: 0.0,
                cfm: 0.0,
                dur: 0.0,
                grl: 0.0,
            };

            for _ in 0..cfg.batch_size {
                let idx = rng.random_range(0..n);
                let utt = &corpus.utterances[idx];
                let refs = pick_refs(corpus, idx, cfg, &mut rng);
                let refs: Vec<&Utterance> = refs.iter().map(|&i| &corpus.utterances[i]).collect();
                let t: f64 = rng.random();
                let x0 = Array2::from_shape_fn((utt.n_frames(), self.cfg.n_mels), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let drop = rng.random::<f64>() < cfg.cond_dropout;
                let drop_timbre = rng.random::<f64>() < cfg.timbre_dropout;
                let tau = &corpus
                    .speaker(utt.speaker_id)
                    .ok_or_else(|| VcError::Data(format!("unknown speaker {}", utt.speaker_id)))?
                    .tau;
                let inputs = LossInputs {
                    utterance: utt,
                    refs: &refs,
                    speaker_tau: tau,
                    speaker_label: (utt.speaker_id - offset) as usize,
                    t,
                    x0: &x0,
                    drop_condition: drop,
                    drop_timbre,
                    lambda_grl: cfg.lambda_grl,
                    sigma_min: cfg.sigma_min,
                };
                let (values, grads) = self.loss_gradients(&inputs)?;
                sums.total += values.total;
                sums.cfm += values.cfm;
                sums.dur += values.dur;
                sums.grl += values.grl;
                match &mut grad_sum {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            *a += g;
                        }
                    }
                    None => grad_sum = Some(grads),
                }
            }

            let scale = 1.0 / cfg.batch_size as f64;
            let record = LossRecord {
                iter,
                total: sums.total * scale,
                cfm: sums.cfm * scale,
                dur: sums.dur * scale,
                grl: sums.grl * scale,
            };
            if !record.total.is_finite() {
                return Err(VcError::NonFiniteLoss {
                    iteration: iter,
                    cfm: record.cfm,
                    dur: record.dur,
                    grl: record.grl,
                });
            }
            let mut grads = grad_sum.expect("batch_size >= 1");
            for g in &mut grads {
                g.mapv_inplace(|x| x * scale);
            }
            if cfg.grad_clip > 0.0 {
                let norm: f64 = grads
                    .iter()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    for g in &mut grads {
                        g.mapv_inplace(|x| x * s);
                    }
                }
            }
            opt.step(&mut self.store, &grads);
            if cfg.gate_warmup_iters > 0 && iter < cfg.gate_warmup_iters {
                let ramp = cfg.gate_warmup_target * (iter + 1) as f64
                    / cfg.gate_warmup_iters as f64;
                for &p in &gate_params {
                    let a = self.store.get_mut(p);
                    a.fill(ramp);
                    crate::nn::round_f32(a);
                }
            }
            report.history.push(record);

            if cfg.ckpt_every > 0 && (iter + 1) % cfg.ckpt_every == 0 {
                on_checkpoint(&*self, iter + 1)?;
            }
        }
        Ok(report)
    }

    /// Converts source content to the target speaker's timbre under the
    /// style reference's delivery. Deterministic given the seed.
    pub fn convert(
        &self,
        source: &Utterance,
        timbre_refs: &[&Utterance],
        target_tau: &Array1<f64>,
        style_ref: &Utterance,
        n_steps: usize,
        guidance_scale: f64,
        seed: u64,
    ) -> Result<Conversion> {
        if timbre_refs.is_empty() {
            return Err(VcError::InvalidArg("empty timbre references".into()));
        }
        let spk = timbre_refs[0].speaker_id;
        if timbre_refs.iter().any(|r| r.speaker_id != spk) {
            return Err(VcError::InvalidArg(
                "timbre references must share one speaker".into(),
            ));
        }
        if n_steps < 1 {
            return Err(VcError::InvalidArg("n_steps must be >= 1".into()));
        }

        let content = ContentSequence::extract(source.ssl.view(), &self.codebook)?;
        let ref_mel_data = concat_ref_mels(timbre_refs, usize::MAX);

        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let content_hidden = self.encode_content(&mut tape, &bind, &content.embeddings);
        let style_seq = self.style_enc.encode(&mut tape, &bind, &style_ref.style_feats)?;
        let ref_mel = tape.leaf(ref_mel_data.clone());
        let tau = tape.leaf(tau_row(target_tau));
        let prior = self.prior_proj.forward(&mut tape, &bind, tau);
        let log_d = self
            .dur
            .predict(&mut tape, &bind, content_hidden, style_seq, ref_mel);

        let durations = duration::round_durations(tape.value(log_d));
        let frame_content = duration::regulate_length(tape.value(content_hidden), &durations)?;
        let total_frames = frame_content.nrows();

        let cond = ConditionBundle {
            frame_content,
            style_seq: tape.value(style_seq).clone(),
            timbre: TimbreReference {
                ref_mel: ref_mel_data,
                prior: tape.value(prior).row(0).to_owned(),
            },
        };
        let sampler = ModelField { model: self };
        let mel = flow::euler_sample(
            &sampler,
            Some(&cond),
            (total_frames, self.cfg.n_mels),
            n_steps,
            guidance_scale,
            seed,
        )?;
        Ok(Conversion {
            mel,
            durations,
            token_ids: content.token_ids,
        })
    }
}

/// Adapter exposing the model as a [`VectorField`] over condition bundles.
pub struct ModelField<'m> {
    pub model: &'m VcModel,
}

impl VectorField for ModelField<'_> {
    type Cond = ConditionBundle;

    fn eval(&self, x: &Array2<f64>, t: f64, cond: Option<&ConditionBundle>) -> Array2<f64> {
        let m = self.model;
        let mut tape = Tape::new();
        let bind = m.store.bind(&mut tape);
        let x_id = tape.leaf(x.clone());
        let nodes = match cond {
            Some(c) => {
                assert_eq!(
                    c.frame_content.nrows(),
                    x.nrows(),
                    "condition length must match the generated mel"
                );
                CondNodes {
                    frame_content: tape.leaf(c.frame_content.clone()),
                    style_seq: tape.leaf(c.style_seq.clone()),
                    ref_mel: tape.leaf(c.timbre.ref_mel.clone()),
                    prior: tape.leaf(c.timbre.prior_row()),
                }
            }
            None => m.null_cond(&mut tape, &bind, x.nrows()),
        };
        let out = m
            .field_forward(&mut tape, &bind, x_id, t, &nodes)
            .expect("field evaluation");
        tape.value(out).clone()
    }
}

fn tau_row(tau: &Array1<f64>) -> Array2<f64> {
    tau.clone().insert_axis(Axis(0))
}

fn concat_ref_mels(refs: &[&Utterance], max_frames: usize) -> Array2<f64> {
    let views: Vec<_> = refs.iter().map(|r| r.mel.view()).collect();
    let all = concatenate(Axis(0), &views).expect("reference mel concat");
    if all.nrows() > max_frames {
        all.slice(ndarray::s![..max_frames, ..]).to_owned()
    } else {
        all
    }
}

fn pick_refs(corpus: &Corpus, idx: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let utt = &corpus.utterances[idx];
    let mut candidates: Vec<usize> = corpus
        .utterances_of(utt.speaker_id)
        .into_iter()
        .filter(|&i| i != idx)
        .collect();
    if candidates.is_empty() {
        return vec![idx];
    }
    let want = rng
        .random_range(cfg.refs_min.max(1)..=cfg.refs_max.max(1))
        .min(candidates.len());
    let mut picked = Vec::with_capacity(want);
    let mut total_frames = 0usize;
    for _ in 0..want {
        let j = rng.random_range(0..candidates.len());
        let chosen = candidates.swap_remove(j);
        total_frames += corpus.utterances[chosen].n_frames();
        picked.push(chosen);
        if total_frames >= cfg.max_ref_frames {
            break;
        }
    }
    picked
}
