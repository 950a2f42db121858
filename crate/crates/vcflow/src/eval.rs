//! Evaluation: DTW alignment, pitch RMSE / Pearson correlation after
//! alignment, timbre cosine through the corpus oracle, the sampler step
//! benchmark, and the held-out conversion grid.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{
    cosine, ground_truth_pitch, ground_truth_timbre, Corpus, CorpusConfig, SynthConfig, Utterance,
};
use crate::error::VcError;
use crate::model::VcModel;
use crate::nn::derive_seed;
use crate::Result;

/// Monotone alignment between two sequences.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    /// Index pairs from (0,0) to (n-1,m-1); successive pairs differ by
    /// (1,0), (0,1), or (1,1).
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Dynamic-programming DTW with |a_i - b_j| local distance.
///
/// Backtrack ties prefer the diagonal step, then (1,0), then (0,1).
pub fn dtw_align(a: &[f64], b: &[f64]) -> Result<AlignedPair> {
    dtw_align_with(a.len(), b.len(), |i, j| (a[i] - b[j]).abs())
}

/// DTW over arbitrary local costs; used for scalar contours and for
/// frame-vector distances in the benchmark.
pub fn dtw_align_with(
    n: usize,
    m: usize,
    local: impl Fn(usize, usize) -> f64,
) -> Result<AlignedPair> {
    if n == 0 || m == 0 {
        return Err(VcError::InvalidArg("empty sequence for DTW".into()));
    }
    let mut d = Array2::from_elem((n, m), f64::INFINITY);
    d[(0, 0)] = local(0, 0);
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = f64::INFINITY;
            if i > 0 && j > 0 {
                best = best.min(d[(i - 1, j - 1)]);
            }
            if i > 0 {
                best = best.min(d[(i - 1, j)]);
            }
            if j > 0 {
                best = best.min(d[(i, j - 1)]);
            }
            d[(i, j)] = local(i, j) + best;
        }
    }

    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        // Tie-break order: diagonal, then (1,0), then (0,1).
        let mut step = None;
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 && d[(i - 1, j - 1)] < best {
            best = d[(i - 1, j - 1)];
            step = Some((i - 1, j - 1));
        }
        if i > 0 && d[(i - 1, j)] < best {
            best = d[(i - 1, j)];
            step = Some((i - 1, j));
        }
        if j > 0 && d[(i, j - 1)] < best {
            step = Some((i, j - 1));
        }
        let (pi, pj) = step.expect("reachable predecessor");
        path.push((pi, pj));
        i = pi;
        j = pj;
    }
    path.reverse();
    Ok(AlignedPair {
        path,
        cost: d[(n - 1, m - 1)],
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct PitchMetrics {
    /// RMSE in Hz over DTW-matched pairs.
    pub rmse: f64,
    /// Pearson correlation over matched pairs; undefined on zero variance.
    pub corr: Option<f64>,
}

/// Aligns two voiced contours with DTW, then scores the matched pairs.
/// Unvoiced frames must be removed by the caller.
pub fn pitch_metrics(pred: &[f64], reference: &[f64]) -> Result<PitchMetrics> {
    let aligned = dtw_align(pred, reference)?;
    let pairs = aligned.path.len() as f64;
    let mse = aligned
        .path
        .iter()
        .map(|&(i, j)| (pred[i] - reference[j]) * (pred[i] - reference[j]))
        .sum::<f64>()
        / pairs;
    let xs: Vec<f64> = aligned.path.iter().map(|&(i, _)| pred[i]).collect();
    let ys: Vec<f64> = aligned.path.iter().map(|&(_, j)| reference[j]).collect();
    Ok(PitchMetrics {
        rmse: mse.sqrt(),
        corr: pearson(&xs, &ys),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimbreScore {
    pub cosine: f64,
    /// Set when the mel is shorter than the 50-frame averaging floor.
    pub low_confidence: bool,
}

/// Cosine between the timbre readout of a mel and a target tau.
pub fn timbre_similarity(
    cfg: &SynthConfig,
    mel: &Array2<f64>,
    target_tau: &Array1<f64>,
    content_mean: &Array1<f64>,
) -> TimbreScore {
    let tau_hat = ground_truth_timbre(cfg, mel, content_mean);
    TimbreScore {
        cosine: cosine(&tau_hat, target_tau),
        low_confidence: mel.nrows() < 50,
    }
}

/// Voiced pitch readout of a generated mel (drops undefined frames).
pub fn voiced_pitch(cfg: &SynthConfig, mel: &Array2<f64>) -> Vec<f64> {
    ground_truth_pitch(cfg, mel).into_iter().flatten().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub steps: usize,
    /// DTW-aligned mean squared frame distance between the reconstruction
    /// and the reference render (held-out proxy objective).
    pub proxy_loss: f64,
    pub timbre_cosine: f64,
    pub secs_per_frame: f64,
}

/// Reconstruction benchmark over a step grid: converts held-out utterances
/// back to their own speaker and style with fixed seeds, then reports mean
/// proxy loss, timbre cosine, and wall time per generated frame.
pub fn bench_steps(
    model: &VcModel,
    corpus: &Corpus,
    step_list: &[usize],
    conversions: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if corpus.utterances.is_empty() {
        return Err(VcError::Data("empty corpus".into()));
    }
    let synth = &corpus.cfg.synth;
    let mut rows = Vec::new();
    for &steps in step_list {
        let mut proxy_sum = 0.0;
        let mut cos_sum = 0.0;
        let mut secs_sum = 0.0;
        for c in 0..conversions {
            let utt = &corpus.utterances[c % corpus.utterances.len()];
            let speaker = corpus
                .speaker(utt.speaker_id)
                .ok_or_else(|| VcError::Data("unknown speaker".into()))?;
            let others: Vec<&Utterance> = corpus
                .utterances_of(utt.speaker_id)
                .into_iter()
                .filter(|&i| corpus.utterances[i].utt_id != utt.utt_id)
                .take(2)
                .map(|i| &corpus.utterances[i])
                .collect();
            let refs: Vec<&Utterance> = if others.is_empty() {
                vec![utt]
            } else {
                others
            };
            let start = Instant::now();
            let out = model.convert(
                utt,
                &refs,
                &speaker.tau,
                utt,
                steps,
                1.0,
                derive_seed(seed, 40, c as u64),
            )?;
            let elapsed = start.elapsed().as_secs_f64();
            secs_sum += elapsed / out.mel.nrows() as f64;

            let aligned = dtw_align_with(out.mel.nrows(), utt.mel.nrows(), |i, j| {
                let a = out.mel.row(i);
                let b = utt.mel.row(j);
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / a.len() as f64
            })?;
            proxy_sum += aligned.cost / aligned.path.len() as f64;
            cos_sum += timbre_similarity(synth, &out.mel, &speaker.tau, &corpus.content_mean).cosine;
        }
        let n = conversions as f64;
        rows.push(BenchRow {
            steps,
            proxy_loss: proxy_sum / n,
            timbre_cosine: cos_sum / n,
            secs_per_frame: secs_sum / n,
        });
    }
    Ok(rows)
}

/// Options for the held-out conversion grid.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub heldout_speakers: usize,
    pub per_cell: usize,
    pub conversions: usize,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            heldout_speakers: 8,
            per_cell: 2,
            conversions: 100,
            steps: crate::flow::DEFAULT_EULER_STEPS,
            guidance: crate::flow::DEFAULT_GUIDANCE,
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub source: String,
    pub target_speaker: u32,
    pub style_ref: String,
    pub style_ref_swap: String,
    pub cos_target: f64,
    pub cos_source: f64,
    pub pitch_corr: Option<f64>,
    pub pitch_rmse: f64,
    pub swap_corr_new: Option<f64>,
    pub swap_corr_old: Option<f64>,
    pub cos_target_after_swap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub conversions: usize,
    /// Fraction of trials where the output timbre is closer to the target
    /// speaker than to the source speaker.
    pub timbre_win_rate: f64,
    pub median_pitch_corr: f64,
    pub median_pitch_rmse: f64,
    /// Fraction of style-swap trials where the new output tracks the new
    /// style reference more closely than the old one.
    pub swap_win_rate: f64,
    pub median_timbre_drop_on_swap: f64,
    pub trials: Vec<TrialRecord>,
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Builds a held-out corpus (fresh speakers from the same seeded universe)
/// and runs the conversion grid: timbre from unseen speakers, style from
/// unseen references, plus a style-swap pass per trial.
pub fn conversion_eval(
    model: &VcModel,
    train_cfg: &CorpusConfig,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    let mut held_cfg = train_cfg.clone();
    held_cfg.speaker_offset = train_cfg.speaker_offset + train_cfg.n_speakers as u32;
    held_cfg.n_speakers = opts.heldout_speakers;
    held_cfg.per_cell = opts.per_cell;
    let held = Corpus::generate(&held_cfg)?;
    conversion_eval_on(model, &held, opts)
}

/// Same grid on an already-built evaluation corpus.
pub fn conversion_eval_on(
    model: &VcModel,
    held: &Corpus,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    if held.speakers.len() < 2 {
        return Err(VcError::InvalidArg(
            "conversion grid needs at least two held-out speakers".into(),
        ));
    }
    let synth = &held.cfg.synth;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 50, 0));
    let mut trials = Vec::with_capacity(opts.conversions);

    for trial in 0..opts.conversions {
        let source = &held.utterances[rng.random_range(0..held.utterances.len())];
        let src_speaker = held.speaker(source.speaker_id).unwrap();

        // Target timbre: a different held-out speaker.
        let target = loop {
            let s = &held.speakers[rng.random_range(0..held.speakers.len())];
            if s.speaker_id != source.speaker_id {
                break s;
            }
        };
        let ref_idx = held.utterances_of(target.speaker_id);
        let mut refs = Vec::new();
        let want = 3.min(ref_idx.len());
        let mut pool = ref_idx.clone();
        for _ in 0..want {
            let j = rng.random_range(0..pool.len());
            refs.push(&held.utterances[pool.swap_remove(j)]);
        }

        // Style reference from any held-out speaker; the swap reference has
        // a different contour class.
        let style_ref = &held.utterances[rng.random_range(0..held.utterances.len())];
        let style_swap = loop {
            let u = &held.utterances[rng.random_range(0..held.utterances.len())];
            if u.style_class != style_ref.style_class {
                break u;
            }
        };

        let seed1 = derive_seed(opts.seed, 51, trial as u64);
        let out1 = model.convert(
            source,
            &refs,
            &target.tau,
            style_ref,
            opts.steps,
            opts.guidance,
            seed1,
        )?;
        let seed2 = derive_seed(opts.seed, 52, trial as u64);
        let out2 = model.convert(
            source,
            &refs,
            &target.tau,
            style_swap,
            opts.steps,
            opts.guidance,
            seed2,
        )?;

        let cos_target =
            timbre_similarity(synth, &out1.mel, &target.tau, &held.content_mean).cosine;
        let cos_source =
            timbre_similarity(synth, &out1.mel, &src_speaker.tau, &held.content_mean).cosine;
        let cos_after_swap =
            timbre_similarity(synth, &out2.mel, &target.tau, &held.content_mean).cosine;

        let pitch1 = voiced_pitch(synth, &out1.mel);
        let metrics = if pitch1.is_empty() {
            PitchMetrics {
                rmse: f64::NAN,
                corr: None,
            }
        } else {
            pitch_metrics(&pitch1, &style_ref.f0)?
        };
        let pitch2 = voiced_pitch(synth, &out2.mel);
        let (swap_new, swap_old) = if pitch2.is_empty() {
            (None, None)
        } else {
            (
                pitch_metrics(&pitch2, &style_swap.f0)?.corr,
                pitch_metrics(&pitch2, &style_ref.f0)?.corr,
            )
        };

        trials.push(TrialRecord {
            source: source.utt_id.clone(),
            target_speaker: target.speaker_id,
            style_ref: style_ref.utt_id.clone(),
            style_ref_swap: style_swap.utt_id.clone(),
            cos_target,
            cos_source,
            pitch_corr: metrics.corr,
            pitch_rmse: metrics.rmse,
            swap_corr_new: swap_new,
            swap_corr_old: swap_old,
            cos_target_after_swap: cos_after_swap,
        });
    }

    let n = trials.len() as f64;
    let timbre_wins = trials.iter().filter(|t| t.cos_target > t.cos_source).count();
    let mut corrs: Vec<f64> = trials.iter().filter_map(|t| t.pitch_corr).collect();
    let mut rmses: Vec<f64> = trials
        .iter()
        .map(|t| t.pitch_rmse)
        .filter(|r| r.is_finite())
        .collect();
    let swap_scored: Vec<&TrialRecord> = trials
        .iter()
        .filter(|t| t.swap_corr_new.is_some() && t.swap_corr_old.is_some())
        .collect();
    let swap_wins = swap_scored
        .iter()
        .filter(|t| t.swap_corr_new.unwrap() > t.swap_corr_old.unwrap())
        .count();
    let mut drops: Vec<f64> = trials
        .iter()
        .map(|t| t.cos_target - t.cos_target_after_swap)
        .collect();

    Ok(EvalSummary {
        conversions: trials.len(),
        timbre_win_rate: timbre_wins as f64 / n,
        median_pitch_corr: median(&mut corrs),
        median_pitch_rmse: median(&mut rmses),
        swap_win_rate: if swap_scored.is_empty() {
            0.0
        } else {
            swap_wins as f64 / swap_scored.len() as f64
        },
        median_timbre_drop_on_swap: median(&mut drops),
        trials,
    })
}

/// Mean absolute error between predicted and true durations over a corpus
/// (reconstruction setting: each utterance is its own style reference).
pub fn duration_mae(model: &VcModel, corpus: &Corpus) -> Result<f64> {
    let mut total_err = 0.0;
    let mut total_tokens = 0usize;
    for utt in &corpus.utterances {
        let speaker = corpus
            .speaker(utt.speaker_id)
            .ok_or_else(|| VcError::Data("unknown speaker".into()))?;
        let others: Vec<&Utterance> = corpus
            .utterances_of(utt.speaker_id)
            .into_iter()
            .filter(|&i| corpus.utterances[i].utt_id != utt.utt_id)
            .take(2)
            .map(|i| &corpus.utterances[i])
            .collect();
        let refs = if others.is_empty() { vec![utt] } else { others };
        let conv = model.convert(utt, &refs, &speaker.tau, utt, 1, 1.0, 0)?;
        let (_, true_durs) = crate::content::dedup(&crate::content::encode(
            utt.ssl.view(),
            &model.codebook,
        ))?;
        if conv.durations.len() != true_durs.len() {
            continue;
        }
        for (p, t) in conv.durations.iter().zip(&true_durs) {
            total_err += (*p as f64 - *t as f64).abs();
            total_tokens += 1;
        }
    }
    Ok(total_err / total_tokens.max(1) as f64)
}
