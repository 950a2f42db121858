//! Command-line interface: corpus synthesis, codebook fitting, training,
//! conversion, evaluation, and the sampler step benchmark.
//!
//! Settings resolve as: command-line flags, then `key = value` entries from
//! the `--config` file (keys are command-scoped, e.g. `train.lr`), then
//! built-in defaults. Unknown config keys are rejected.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::content::{fit_kmeans, Codebook};
use crate::corpus::{Corpus, CorpusConfig};
use crate::error::VcError;
use crate::eval::{bench_steps, conversion_eval, timbre_similarity, voiced_pitch, EvalOptions};
use crate::melb;
use crate::model::{ModelConfig, TrainConfig, VcModel};
use crate::Result;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(
    name = "vcflow",
    about = "Zero-shot voice conversion testbed on synthetic disentangled features",
    version
)]
pub struct Cli {
    /// Text config file with `key = value` lines (command-scoped keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for all deterministic operations.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus on disk.
    Synth(SynthArgs),
    /// Fit a K-means codebook and export it as a MELB matrix.
    Fit(FitArgs),
    /// Fit the codebook and train a model; writes checkpoint + loss CSV.
    Train(TrainArgs),
    /// Convert one utterance to a target speaker's timbre and a style
    /// reference's delivery.
    Convert(ConvertArgs),
    /// Held-out conversion grid with timbre/style transfer metrics.
    Eval(EvalArgs),
    /// Euler step ablation benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory [default: corpus]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of speakers [default: 32]
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Number of contour classes, up to 5 [default: 5]
    #[arg(long)]
    pub styles: Option<usize>,
    /// Utterances per (speaker, style) cell [default: 4]
    #[arg(long)]
    pub per_cell: Option<usize>,
    /// Minimum units per utterance [default: 6]
    #[arg(long)]
    pub units_min: Option<usize>,
    /// Maximum units per utterance [default: 10]
    #[arg(long)]
    pub units_max: Option<usize>,
    /// First speaker id [default: 0]
    #[arg(long)]
    pub speaker_offset: Option<u32>,
    /// Disable additive feature noise.
    #[arg(long)]
    pub no_noise: bool,
}

#[derive(Args)]
pub struct FitArgs {
    /// Corpus directory [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Cluster count [default: 64]
    #[arg(long)]
    pub k: Option<usize>,
    /// Frame cap for fitting [default: 20000]
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Output MELB file [default: codebook.melb]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory for checkpoint and loss history [default: run]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training iterations [default: 2000]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adversarial loss weight [default: 0.1]
    #[arg(long)]
    pub lambda_grl: Option<f64>,
    /// Flow path residual noise scale [default: 0.0001]
    #[arg(long)]
    pub sigma_min: Option<f64>,
    /// Batch size [default: 8]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Condition dropout probability [default: 0.1]
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    /// Decoupled weight decay [default: 0]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Model width [default: 64]
    #[arg(long)]
    pub width: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward hidden size [default: 128]
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    /// Content stack depth [default: 2]
    #[arg(long)]
    pub content_blocks: Option<usize>,
    /// Flow stack depth [default: 4]
    #[arg(long)]
    pub flow_blocks: Option<usize>,
    /// Codebook size [default: 64]
    #[arg(long)]
    pub k: Option<usize>,
    /// Frame cap for codebook fitting [default: 20000]
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Checkpoint period in iterations, 0 = only final [default: 0]
    #[arg(long)]
    pub ckpt_every: Option<usize>,
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Corpus directory [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint file [default: run/model.ckpt]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Source utterance id.
    #[arg(long)]
    pub source: String,
    /// Target speaker id for timbre.
    #[arg(long)]
    pub timbre_speaker: u32,
    /// Style reference utterance id.
    #[arg(long)]
    pub style_ref: String,
    /// Euler steps [default: 10]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale [default: 1.0]
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Maximum timbre reference utterances [default: 3]
    #[arg(long)]
    pub max_refs: Option<usize>,
    /// Output MELB file [default: out.melb]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Corpus directory (training corpus; held-out speakers derive from
    /// its seed) [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint file [default: run/model.ckpt]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Held-out speakers [default: 8]
    #[arg(long)]
    pub heldout_speakers: Option<usize>,
    /// Utterances per held-out cell [default: 2]
    #[arg(long)]
    pub per_cell: Option<usize>,
    /// Number of conversions [default: 100]
    #[arg(long)]
    pub conversions: Option<usize>,
    /// Euler steps [default: 10]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale [default: 1.0]
    #[arg(long)]
    pub guidance: Option<f64>,
    /// JSON report path [default: report.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Corpus directory [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint file [default: run/model.ckpt]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Comma-separated step grid [default: 1,2,5,10,20]
    #[arg(long)]
    pub steps: Option<String>,
    /// Conversions per grid point [default: 20]
    #[arg(long)]
    pub conversions: Option<usize>,
    /// JSON report path [default: bench.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parsed `key = value` config file with known-key validation.
pub struct ConfigFile {
    entries: HashMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "synth.out",
    "synth.speakers",
    "synth.styles",
    "synth.per_cell",
    "synth.units_min",
    "synth.units_max",
    "synth.speaker_offset",
    "synth.no_noise",
    "fit.corpus",
    "fit.k",
    "fit.max_frames",
    "fit.out",
    "train.corpus",
    "train.out",
    "train.iters",
    "train.lr",
    "train.lambda_grl",
    "train.sigma_min",
    "train.batch",
    "train.cond_dropout",
    "train.weight_decay",
    "train.width",
    "train.heads",
    "train.ffn_hidden",
    "train.content_blocks",
    "train.flow_blocks",
    "train.k",
    "train.max_frames",
    "train.ckpt_every",
    "convert.corpus",
    "convert.ckpt",
    "convert.steps",
    "convert.guidance",
    "convert.max_refs",
    "convert.out",
    "eval.corpus",
    "eval.ckpt",
    "eval.heldout_speakers",
    "eval.per_cell",
    "eval.conversions",
    "eval.steps",
    "eval.guidance",
    "eval.out",
    "bench.corpus",
    "bench.ckpt",
    "bench.steps",
    "bench.conversions",
    "bench.out",
];

impl ConfigFile {
    pub fn empty() -> Self {
        Self {
            entries: HashMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| VcError::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VcError::InvalidArg(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(VcError::InvalidArg(format!(
                    "config line {}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            entries.insert(key, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                VcError::InvalidArg(format!("config key `{key}`: cannot parse `{raw}`"))
            }),
        }
    }
}

/// flag > config file > default.
fn resolve<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file.get(key)?.unwrap_or(default))
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::empty(),
    };
    let seed = resolve(cli.seed, &file, "seed", 17u64)?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &file, seed),
        Command::Fit(args) => cmd_fit(args, &file, seed),
        Command::Train(args) => cmd_train(args, &file, seed),
        Command::Convert(args) => cmd_convert(args, &file, seed),
        Command::Eval(args) => cmd_eval(args, &file, seed),
        Command::Bench(args) => cmd_bench(args, &file, seed),
    }
}

fn corpus_config_from(args: &SynthArgs, file: &ConfigFile, seed: u64) -> Result<CorpusConfig> {
    let mut cfg = CorpusConfig {
        seed,
        ..CorpusConfig::default()
    };
    cfg.n_speakers = resolve(args.speakers, file, "synth.speakers", 32)?;
    cfg.n_styles = resolve(args.styles, file, "synth.styles", 5)?;
    cfg.per_cell = resolve(args.per_cell, file, "synth.per_cell", 4)?;
    cfg.units_min = resolve(args.units_min, file, "synth.units_min", 6)?;
    cfg.units_max = resolve(args.units_max, file, "synth.units_max", 10)?;
    cfg.speaker_offset = resolve(args.speaker_offset, file, "synth.speaker_offset", 0)?;
    if args.no_noise || file.get::<bool>("synth.no_noise")?.unwrap_or(false) {
        cfg.noise = false;
    }
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let out = resolve(args.out.clone(), file, "synth.out", PathBuf::from("corpus"))?;
    let cfg = corpus_config_from(&args, file, seed)?;
    let corpus = Corpus::generate(&cfg)?;
    corpus.save(&out)?;
    let frames: usize = corpus.utterances.iter().map(|u| u.n_frames()).sum();
    println!(
        "corpus: {} utterances ({} speakers x {} styles x {} per cell), {} frames, seed {} -> {}",
        corpus.utterances.len(),
        cfg.n_speakers,
        cfg.n_styles,
        cfg.per_cell,
        frames,
        seed,
        out.display()
    );
    Ok(())
}

fn stacked_ssl_frames(corpus: &Corpus, max_frames: usize) -> Array2<f64> {
    let total: usize = corpus.utterances.iter().map(|u| u.n_frames()).sum();
    let stride = total.div_ceil(max_frames).max(1);
    let mut rows = Vec::new();
    let mut i = 0usize;
    for utt in &corpus.utterances {
        for t in 0..utt.n_frames() {
            if i % stride == 0 {
                rows.push(utt.ssl.row(t).to_owned());
            }
            i += 1;
        }
    }
    let dim = corpus.cfg.synth.ssl_dim;
    let mut out = Array2::zeros((rows.len(), dim));
    for (r, row) in rows.iter().enumerate() {
        out.row_mut(r).assign(row);
    }
    out
}

/// Fits the content codebook on (possibly strided) corpus frames.
pub fn fit_codebook(corpus: &Corpus, k: usize, max_frames: usize, seed: u64) -> Result<Codebook> {
    let frames = stacked_ssl_frames(corpus, max_frames);
    fit_kmeans(frames.view(), k, seed)
}

fn cmd_fit(args: FitArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let corpus_dir = resolve(args.corpus, file, "fit.corpus", PathBuf::from("corpus"))?;
    let k = resolve(args.k, file, "fit.k", 64)?;
    let max_frames = resolve(args.max_frames, file, "fit.max_frames", 20_000)?;
    let out = resolve(args.out, file, "fit.out", PathBuf::from("codebook.melb"))?;
    let corpus = Corpus::load(&corpus_dir)?;
    let codebook = fit_codebook(&corpus, k, max_frames, seed)?;
    melb::write_melb(&out, &codebook.centroids)?;
    println!(
        "codebook: k={} dim={} -> {}",
        codebook.k,
        codebook.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let corpus_dir = resolve(args.corpus, file, "train.corpus", PathBuf::from("corpus"))?;
    let out_dir = resolve(args.out, file, "train.out", PathBuf::from("run"))?;
    let corpus = Corpus::load(&corpus_dir)?;

    let k = resolve(args.k, file, "train.k", 64)?;
    let max_frames = resolve(args.max_frames, file, "train.max_frames", 20_000)?;
    let codebook = fit_codebook(&corpus, k, max_frames, seed)?;

    let model_cfg = ModelConfig {
        width: resolve(args.width, file, "train.width", 64)?,
        heads: resolve(args.heads, file, "train.heads", 4)?,
        ffn_hidden: resolve(args.ffn_hidden, file, "train.ffn_hidden", 128)?,
        content_blocks: resolve(args.content_blocks, file, "train.content_blocks", 2)?,
        flow_blocks: resolve(args.flow_blocks, file, "train.flow_blocks", 4)?,
        n_mels: corpus.cfg.synth.n_mels,
        ssl_dim: corpus.cfg.synth.ssl_dim,
        style_bins: corpus.cfg.synth.pitch_bins(),
        timbre_rank: corpus.cfg.synth.timbre_rank,
        n_speakers: corpus.cfg.n_speakers,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        lr: resolve(args.lr, file, "train.lr", 1e-4)?,
        lambda_grl: resolve(args.lambda_grl, file, "train.lambda_grl", 0.1)?,
        sigma_min: resolve(args.sigma_min, file, "train.sigma_min", 1e-4)?,
        batch_size: resolve(args.batch, file, "train.batch", 8)?,
        iters: resolve(args.iters, file, "train.iters", 2000)?,
        cond_dropout: resolve(args.cond_dropout, file, "train.cond_dropout", 0.1)?,
        weight_decay: resolve(args.weight_decay, file, "train.weight_decay", 0.0)?,
        ckpt_every: resolve(args.ckpt_every, file, "train.ckpt_every", 0)?,
        seed,
        ..TrainConfig::default()
    };

    fs::create_dir_all(&out_dir)?;
    let ckpt_path = out_dir.join("model.ckpt");
    let mut model = VcModel::new(model_cfg, codebook, seed)?;
    let report = match model.train(&corpus, &train_cfg, |m, iter| {
        save_checkpoint(m, &ckpt_path)?;
        println!("checkpoint at iteration {iter}");
        Ok(())
    }) {
        Ok(r) => r,
        Err(VcError::NonFiniteLoss {
            iteration,
            cfm,
            dur,
            grl,
        }) => {
            let snapshot = serde_json::json!({
                "iteration": iteration,
                "cfm": cfm,
                "dur": dur,
                "grl": grl,
            });
            fs::write(
                out_dir.join("abort_diagnostics.json"),
                serde_json::to_string_pretty(&snapshot)?,
            )?;
            return Err(VcError::NonFiniteLoss {
                iteration,
                cfm,
                dur,
                grl,
            });
        }
        Err(e) => return Err(e),
    };

    save_checkpoint(&model, &ckpt_path)?;
    let mut csv = String::from("iter,total,cfm,dur,grl\n");
    for r in &report.history {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter, r.total, r.cfm, r.dur, r.grl
        ));
    }
    fs::write(out_dir.join("loss_history.csv"), csv)?;
    let last = report.history.last();
    println!(
        "trained {} iterations (final total loss {}) -> {}",
        report.history.len(),
        last.map(|r| r.total).unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_convert(args: ConvertArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let corpus_dir = resolve(args.corpus, file, "convert.corpus", PathBuf::from("corpus"))?;
    let ckpt = resolve(args.ckpt, file, "convert.ckpt", PathBuf::from("run/model.ckpt"))?;
    let steps = resolve(args.steps, file, "convert.steps", crate::flow::DEFAULT_EULER_STEPS)?;
    let guidance = resolve(args.guidance, file, "convert.guidance", 1.0)?;
    let max_refs = resolve(args.max_refs, file, "convert.max_refs", 3)?;
    let out = resolve(args.out, file, "convert.out", PathBuf::from("out.melb"))?;
    if steps < 1 {
        return Err(VcError::InvalidArg("--steps must be >= 1".into()));
    }

    let corpus = Corpus::load(&corpus_dir)?;
    let model = load_checkpoint(&ckpt)?;
    let source = corpus
        .utterance(&args.source)
        .ok_or_else(|| VcError::Data(format!("unknown source utterance `{}`", args.source)))?;
    let style_ref = corpus
        .utterance(&args.style_ref)
        .ok_or_else(|| VcError::Data(format!("unknown style ref `{}`", args.style_ref)))?;
    let speaker = corpus
        .speaker(args.timbre_speaker)
        .ok_or_else(|| VcError::Data(format!("unknown speaker {}", args.timbre_speaker)))?;
    let refs: Vec<_> = corpus
        .utterances_of(args.timbre_speaker)
        .into_iter()
        .take(max_refs.max(1))
        .map(|i| &corpus.utterances[i])
        .collect();
    if refs.is_empty() {
        return Err(VcError::Data(format!(
            "speaker {} has no utterances in the corpus",
            args.timbre_speaker
        )));
    }

    let conv = model.convert(source, &refs, &speaker.tau, style_ref, steps, guidance, seed)?;
    melb::write_melb(&out, &conv.mel)?;

    let synth = &corpus.cfg.synth;
    let score = timbre_similarity(synth, &conv.mel, &speaker.tau, &corpus.content_mean);
    let pitch = voiced_pitch(synth, &conv.mel);
    let sidecar = serde_json::json!({
        "source": args.source,
        "timbre_speaker": args.timbre_speaker,
        "style_ref": args.style_ref,
        "steps": steps,
        "guidance": guidance,
        "seed": seed,
        "output_frames": conv.mel.nrows(),
        "n_bins": conv.mel.ncols(),
        "durations": conv.durations,
        "timbre_cosine_to_target": score.cosine,
        "timbre_low_confidence": score.low_confidence,
        "voiced_frames": pitch.len(),
    });
    let sidecar_path = out.with_extension("json");
    fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    println!(
        "converted {} frames -> {} (metrics in {})",
        conv.mel.nrows(),
        out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let corpus_dir = resolve(args.corpus, file, "eval.corpus", PathBuf::from("corpus"))?;
    let ckpt = resolve(args.ckpt, file, "eval.ckpt", PathBuf::from("run/model.ckpt"))?;
    let out = resolve(args.out, file, "eval.out", PathBuf::from("report.json"))?;
    let opts = EvalOptions {
        heldout_speakers: resolve(args.heldout_speakers, file, "eval.heldout_speakers", 8)?,
        per_cell: resolve(args.per_cell, file, "eval.per_cell", 2)?,
        conversions: resolve(args.conversions, file, "eval.conversions", 100)?,
        steps: resolve(args.steps, file, "eval.steps", crate::flow::DEFAULT_EULER_STEPS)?,
        guidance: resolve(args.guidance, file, "eval.guidance", 1.0)?,
        seed,
    };
    if opts.steps < 1 {
        return Err(VcError::InvalidArg("--steps must be >= 1".into()));
    }
    let corpus = Corpus::load(&corpus_dir)?;
    let model = load_checkpoint(&ckpt)?;
    let summary = conversion_eval(&model, &corpus.cfg, &opts)?;
    fs::write(&out, serde_json::to_string_pretty(&summary)?)?;
    println!("conversions\t{}", summary.conversions);
    println!("timbre_win_rate\t{:.3}", summary.timbre_win_rate);
    println!("median_pitch_corr\t{:.3}", summary.median_pitch_corr);
    println!("median_pitch_rmse\t{:.2}", summary.median_pitch_rmse);
    println!("swap_win_rate\t{:.3}", summary.swap_win_rate);
    println!(
        "median_timbre_drop_on_swap\t{:.3}",
        summary.median_timbre_drop_on_swap
    );
    println!("report -> {}", out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let corpus_dir = resolve(args.corpus, file, "bench.corpus", PathBuf::from("corpus"))?;
    let ckpt = resolve(args.ckpt, file, "bench.ckpt", PathBuf::from("run/model.ckpt"))?;
    let out = resolve(args.out, file, "bench.out", PathBuf::from("bench.json"))?;
    let conversions = resolve(args.conversions, file, "bench.conversions", 20)?;
    let steps_raw: String = resolve(
        args.steps,
        file,
        "bench.steps",
        "1,2,5,10,20".to_string(),
    )?;
    let step_list: Vec<usize> = steps_raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| VcError::InvalidArg(format!("bad step count `{s}`")))
        })
        .collect::<Result<_>>()?;
    if step_list.iter().any(|&s| s < 1) {
        return Err(VcError::InvalidArg("step counts must be >= 1".into()));
    }

    let corpus = Corpus::load(&corpus_dir)?;
    let model = load_checkpoint(&ckpt)?;
    let rows = bench_steps(&model, &corpus, &step_list, conversions, seed)?;
    println!("steps\tproxy_loss\ttimbre_cos\tsecs_per_frame");
    for r in &rows {
        println!(
            "{}\t{:.6}\t{:.3}\t{:.6}",
            r.steps, r.proxy_loss, r.timbre_cosine, r.secs_per_frame
        );
    }
    fs::write(&out, serde_json::to_string_pretty(&rows)?)?;
    println!("report -> {}", out.display());
    Ok(())
}

/// Maps an error to the documented exit code.
pub fn exit_code_for(err: &VcError) -> i32 {
    match err {
        VcError::InvalidArg(_) => EXIT_USAGE,
        VcError::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}
