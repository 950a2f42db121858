//! Seeded synthetic corpus with analytically recoverable factors.
//!
//! Each utterance is rendered from three independent controls: a speaker
//! timbre vector `tau` (spectral envelope over the timbre band), a style
//! (pitch contour class + speaking rate), and a unit sequence (content).
//! The mel stand-in is additive in log domain and band-partitioned — bins
//! `0..timbre_bins` carry content + timbre, the remaining bins carry a
//! Gaussian pitch bump — so both factors can be read back analytically.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::VcError;
use crate::melb;
use crate::nn::derive_seed;
use crate::Result;

/// The three speaking rates the generator uses.
pub const RATES: [f64; 3] = [0.8, 1.0, 1.25];

const STREAM_SPEAKER: u64 = 1;
const STREAM_UTT: u64 = 2;
const STREAM_PATTERNS: u64 = 3;
const META_VERSION: u32 = 1;

/// Fixed constants of the synthetic feature space.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    /// Total mel bins (timbre band + pitch band).
    pub n_mels: usize,
    /// Bins 0..timbre_bins carry content + speaker envelope.
    pub timbre_bins: usize,
    /// Sinusoid basis rank of the speaker envelope (length of tau).
    pub timbre_rank: usize,
    /// Width of the content channel (unit pattern dimension).
    pub ssl_dim: usize,
    /// Unit vocabulary size.
    pub vocab: usize,
    /// Gaussian bump width in the pitch band, in bins.
    pub bump_width: f64,
    pub mel_noise_std: f64,
    pub ssl_noise_std: f64,
    /// Pitch range mapped onto the pitch band.
    pub f0_lo: f64,
    pub f0_hi: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            timbre_bins: 32,
            timbre_rank: 8,
            ssl_dim: 32,
            vocab: 64,
            bump_width: 0.8,
            mel_noise_std: 0.01,
            ssl_noise_std: 0.05,
            f0_lo: 100.0,
            f0_hi: 400.0,
        }
    }
}

impl SynthConfig {
    pub fn pitch_bins(&self) -> usize {
        self.n_mels - self.timbre_bins
    }

    /// Continuous pitch-band coordinate of a frequency, clamped to the band.
    pub fn kappa(&self, f0: f64) -> f64 {
        let tb = self.timbre_bins as f64;
        let pb = self.pitch_bins() as f64;
        let span = (self.f0_hi / self.f0_lo).log2();
        let k = tb + pb * (f0 / self.f0_lo).log2() / span;
        k.clamp(tb, tb + pb - 1.0)
    }

    /// Inverse of [`Self::kappa`] on the unclamped range.
    pub fn kappa_to_f0(&self, kappa: f64) -> f64 {
        let tb = self.timbre_bins as f64;
        let pb = self.pitch_bins() as f64;
        let span = (self.f0_hi / self.f0_lo).log2();
        self.f0_lo * ((kappa - tb) * span / pb).exp2()
    }

    /// Sinusoid basis value for component `j` at timbre bin `m`.
    pub fn basis(&self, j: usize, m: usize) -> f64 {
        (std::f64::consts::PI * (j as f64 + 1.0) * (m as f64 + 0.5) / self.timbre_bins as f64)
            .sin()
    }
}

/// Speaker identity: timbre parameters and the envelope they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub speaker_id: u32,
    pub tau: Array1<f64>,
    pub envelope: Array1<f64>,
}

/// Draws `tau` uniformly on [-1, 1]^rank from the seed and expands the
/// deterministic sinusoid envelope over the timbre band.
pub fn make_speaker(cfg: &SynthConfig, seed: u64, speaker_id: u32) -> SpeakerSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = Array1::from_shape_fn(cfg.timbre_rank, |_| rng.random_range(-1.0..1.0));
    SpeakerSpec {
        speaker_id,
        envelope: envelope_from_tau(cfg, &tau),
        tau,
    }
}

pub fn envelope_from_tau(cfg: &SynthConfig, tau: &Array1<f64>) -> Array1<f64> {
    Array1::from_shape_fn(cfg.timbre_bins, |m| {
        0.5 * (0..cfg.timbre_rank)
            .map(|j| tau[j] * cfg.basis(j, m))
            .sum::<f64>()
    })
}

/// Pitch contour classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StyleClass {
    Rising,
    Falling,
    Flat,
    SlowOsc,
    FastOsc,
}

pub const STYLE_CLASSES: [StyleClass; 5] = [
    StyleClass::Rising,
    StyleClass::Falling,
    StyleClass::Flat,
    StyleClass::SlowOsc,
    StyleClass::FastOsc,
];

impl StyleClass {
    pub fn name(&self) -> &'static str {
        match self {
            StyleClass::Rising => "rising",
            StyleClass::Falling => "falling",
            StyleClass::Flat => "flat",
            StyleClass::SlowOsc => "slow_osc",
            StyleClass::FastOsc => "fast_osc",
        }
    }
}

impl fmt::Display for StyleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StyleClass {
    type Err = VcError;

    fn from_str(s: &str) -> Result<Self> {
        STYLE_CLASSES
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| VcError::InvalidArg(format!("unknown style class `{s}`")))
    }
}

/// Style = contour class + speaking rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleSpec {
    pub class: StyleClass,
    pub rate: f64,
}

pub fn make_style(class: StyleClass, rate: f64) -> Result<StyleSpec> {
    if !RATES.contains(&rate) {
        return Err(VcError::InvalidArg(format!(
            "rate {rate} not in {RATES:?}"
        )));
    }
    Ok(StyleSpec { class, rate })
}

impl StyleSpec {
    /// Pitch in Hz at normalized time `u` in [0, 1].
    pub fn f0_at(&self, u: f64) -> f64 {
        use std::f64::consts::PI;
        let f = match self.class {
            StyleClass::Rising => 120.0 + 120.0 * u,
            StyleClass::Falling => 240.0 - 120.0 * u,
            StyleClass::Flat => 180.0,
            StyleClass::SlowOsc => 180.0 + 60.0 * (2.0 * PI * u).sin(),
            StyleClass::FastOsc => 180.0 + 60.0 * (6.0 * PI * u).sin(),
        };
        f.clamp(100.0, 400.0)
    }
}

/// One rendered utterance with every per-frame channel sharing length T.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: u32,
    pub style_class: StyleClass,
    pub rate: f64,
    /// T x n_mels.
    pub mel: Array2<f64>,
    /// T x ssl_dim speaker-independent content channel.
    pub ssl: Array2<f64>,
    /// T x pitch_bins quantized pitch one-hots.
    pub style_feats: Array2<f64>,
    /// Ground-truth unit id per frame.
    pub token_ids: Vec<u32>,
    /// Ground-truth pitch contour in Hz per frame.
    pub f0: Vec<f64>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.mel.nrows()
    }
}

/// Per-vocabulary unit patterns, drawn once per corpus seed.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPatterns {
    /// vocab x ssl_dim, entries uniform on [-1, 1].
    pub b: Array2<f64>,
}

impl UnitPatterns {
    pub fn generate(cfg: &SynthConfig, corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, STREAM_PATTERNS, 0));
        let b = Array2::from_shape_fn((cfg.vocab, cfg.ssl_dim), |_| rng.random_range(-1.0..1.0));
        Self { b }
    }

    /// Mean pattern over the vocabulary; subtracted by the timbre oracle.
    pub fn content_mean(&self) -> Array1<f64> {
        let v = self.b.nrows() as f64;
        self.b.sum_axis(ndarray::Axis(0)) / v
    }
}

/// Frame count of one unit occurrence under a speaking rate.
pub fn frames_for(base_duration: f64, rate: f64) -> usize {
    ((base_duration / rate).round() as i64).max(1) as usize
}

/// Renders mel, content, and style channels for a unit sequence.
///
/// `noise_seed = None` renders noise-free (oracle mode); `Some(seed)` adds
/// Gaussian noise with the configured stds to mel and ssl channels.
pub fn render_utterance(
    cfg: &SynthConfig,
    speaker: &SpeakerSpec,
    style: &StyleSpec,
    units: &[(u32, f64)],
    patterns: &UnitPatterns,
    noise_seed: Option<u64>,
) -> Result<Utterance> {
    if units.is_empty() {
        return Err(VcError::InvalidArg("empty unit sequence".into()));
    }
    for &(id, base) in units {
        if id as usize >= cfg.vocab {
            return Err(VcError::InvalidArg(format!(
                "unit id {id} outside vocabulary {}",
                cfg.vocab
            )));
        }
        if !(2.0..=6.0).contains(&base) {
            return Err(VcError::InvalidArg(format!(
                "base duration {base} outside [2, 6]"
            )));
        }
    }

    let durations: Vec<usize> = units
        .iter()
        .map(|&(_, base)| frames_for(base, style.rate))
        .collect();
    let total: usize = durations.iter().sum();
    let tb = cfg.timbre_bins;
    let pb = cfg.pitch_bins();

    let mut mel = Array2::zeros((total, cfg.n_mels));
    let mut ssl = Array2::zeros((total, cfg.ssl_dim));
    let mut style_feats = Array2::zeros((total, pb));
    let mut token_ids = Vec::with_capacity(total);
    let mut f0 = Vec::with_capacity(total);

    let mut t = 0;
    for (&(unit_id, _), &d) in units.iter().zip(&durations) {
        for _ in 0..d {
            let u = (t as f64 + 0.5) / total as f64;
            let hz = style.f0_at(u);
            let kappa = cfg.kappa(hz);
            for m in 0..tb {
                mel[(t, m)] = speaker.envelope[m] + patterns.b[(unit_id as usize, m)];
            }
            for m in tb..cfg.n_mels {
                let d_bin = m as f64 - kappa;
                mel[(t, m)] = (-d_bin * d_bin / (2.0 * cfg.bump_width * cfg.bump_width)).exp();
            }
            for j in 0..cfg.ssl_dim {
                ssl[(t, j)] = patterns.b[(unit_id as usize, j)];
            }
            let band = (kappa.round() as usize).min(cfg.n_mels - 1) - tb;
            style_feats[(t, band)] = 1.0;
            token_ids.push(unit_id);
            f0.push(hz);
            t += 1;
        }
    }

    if let Some(seed) = noise_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if cfg.mel_noise_std > 0.0 {
            let n = Normal::new(0.0, cfg.mel_noise_std).unwrap();
            mel.mapv_inplace(|x| x + n.sample(&mut rng));
        }
        if cfg.ssl_noise_std > 0.0 {
            let n = Normal::new(0.0, cfg.ssl_noise_std).unwrap();
            ssl.mapv_inplace(|x| x + n.sample(&mut rng));
        }
    }

    Ok(Utterance {
        utt_id: String::new(),
        speaker_id: speaker.speaker_id,
        style_class: style.class,
        rate: style.rate,
        mel,
        ssl,
        style_feats,
        token_ids,
        f0,
    })
}

/// Per-frame pitch readout from the pitch band; `None` marks frames whose
/// band carries no energy (undefined/unvoiced).
pub fn ground_truth_pitch(cfg: &SynthConfig, mel: &Array2<f64>) -> Vec<Option<f64>> {
    let tb = cfg.timbre_bins;
    mel.rows()
        .into_iter()
        .map(|row| {
            let mut wsum = 0.0;
            let mut msum = 0.0;
            for m in tb..cfg.n_mels {
                let w = row[m].max(0.0);
                wsum += w;
                msum += m as f64 * w;
            }
            (wsum > 0.0).then(|| cfg.kappa_to_f0(msum / wsum))
        })
        .collect()
}

/// Projects the time-averaged timbre band onto the sinusoid basis to
/// recover an estimate of the speaker's tau vector.
pub fn ground_truth_timbre(
    cfg: &SynthConfig,
    mel: &Array2<f64>,
    content_mean: &Array1<f64>,
) -> Array1<f64> {
    let tb = cfg.timbre_bins;
    let frames = mel.nrows() as f64;
    let r: Array1<f64> = Array1::from_shape_fn(tb, |m| {
        mel.slice(s![.., m]).sum() / frames - content_mean[m]
    });
    let scale = 2.0 / (tb as f64 * 0.5);
    Array1::from_shape_fn(cfg.timbre_rank, |j| {
        scale * (0..tb).map(|m| r[m] * cfg.basis(j, m)).sum::<f64>()
    })
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Corpus-level generation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    pub synth: SynthConfig,
    pub n_speakers: usize,
    /// First speaker id; lets an evaluation set extend a training corpus
    /// with fresh speakers drawn from the same seeded universe.
    pub speaker_offset: u32,
    /// Number of contour classes used (first `n_styles` of the enum).
    pub n_styles: usize,
    /// Utterances per (speaker, style) cell; rates cycle over [`RATES`].
    pub per_cell: usize,
    pub units_min: usize,
    pub units_max: usize,
    pub noise: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            n_speakers: 32,
            speaker_offset: 0,
            n_styles: 5,
            per_cell: 4,
            units_min: 6,
            units_max: 10,
            noise: true,
            seed: 17,
        }
    }
}

/// A fully generated corpus, kept in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub cfg: CorpusConfig,
    pub patterns: UnitPatterns,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<Utterance>,
    pub content_mean: Array1<f64>,
}

/// Base duration is a fixed function of the unit id so duration becomes a
/// learnable property of content (scaled by the style's rate).
pub fn base_duration_for_unit(unit_id: u32) -> f64 {
    2.0 + (unit_id % 5) as f64
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        if cfg.n_speakers == 0 || cfg.per_cell == 0 {
            return Err(VcError::InvalidArg(
                "speakers and per-cell counts must be positive".into(),
            ));
        }
        if cfg.n_styles == 0 || cfg.n_styles > STYLE_CLASSES.len() {
            return Err(VcError::InvalidArg(format!(
                "n_styles must be in 1..={}",
                STYLE_CLASSES.len()
            )));
        }
        if cfg.units_min < 1 || cfg.units_min > cfg.units_max {
            return Err(VcError::InvalidArg("bad units range".into()));
        }
        let patterns = UnitPatterns::generate(&cfg.synth, cfg.seed);
        let speakers: Vec<SpeakerSpec> = (0..cfg.n_speakers)
            .map(|i| {
                let id = cfg.speaker_offset + i as u32;
                make_speaker(
                    &cfg.synth,
                    derive_seed(cfg.seed, STREAM_SPEAKER, id as u64),
                    id,
                )
            })
            .collect();

        let mut utterances = Vec::new();
        for speaker in &speakers {
            for class in &STYLE_CLASSES[..cfg.n_styles] {
                for i in 0..cfg.per_cell {
                    let rate = RATES[i % RATES.len()];
                    let style = make_style(*class, rate)?;
                    let utt_seed = derive_seed(
                        cfg.seed,
                        STREAM_UTT,
                        (speaker.speaker_id as u64) << 24
                            | (*class as u64) << 16
                            | i as u64,
                    );
                    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
                    let n_units = rng.random_range(cfg.units_min..=cfg.units_max);
                    let units: Vec<(u32, f64)> = (0..n_units)
                        .map(|_| {
                            let id = rng.random_range(0..cfg.synth.vocab as u32);
                            (id, base_duration_for_unit(id))
                        })
                        .collect();
                    let noise_seed = cfg.noise.then(|| rng.random::<u64>());
                    let mut utt = render_utterance(
                        &cfg.synth,
                        speaker,
                        &style,
                        &units,
                        &patterns,
                        noise_seed,
                    )?;
                    utt.utt_id =
                        format!("s{:03}_{}_{:02}", speaker.speaker_id, class.name(), i);
                    utterances.push(utt);
                }
            }
        }

        let content_mean = patterns.content_mean();
        Ok(Self {
            cfg: cfg.clone(),
            patterns,
            speakers,
            utterances,
            content_mean,
        })
    }

    pub fn speaker(&self, id: u32) -> Option<&SpeakerSpec> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn utterance(&self, utt_id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.utt_id == utt_id)
    }

    pub fn utterances_of(&self, speaker_id: u32) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker_id == speaker_id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes meta.json, manifest.jsonl, and per-utterance MELB channels.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("utt"))?;
        let meta = CorpusMeta {
            version: META_VERSION,
            config: self.cfg.clone(),
            content_mean: self.content_mean.to_vec(),
            patterns: self
                .patterns
                .b
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            speakers: self
                .speakers
                .iter()
                .map(|s| SpeakerMeta {
                    speaker_id: s.speaker_id,
                    tau: s.tau.to_vec(),
                })
                .collect(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

        let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
        for utt in &self.utterances {
            let paths = UttPaths::for_id(&utt.utt_id);
            melb::write_melb(&dir.join(&paths.mel), &utt.mel)?;
            melb::write_melb(&dir.join(&paths.ssl), &utt.ssl)?;
            melb::write_melb(&dir.join(&paths.style), &utt.style_feats)?;
            let tokens =
                Array2::from_shape_fn((utt.token_ids.len(), 1), |(i, _)| utt.token_ids[i] as f64);
            melb::write_melb(&dir.join(&paths.tokens), &tokens)?;
            let f0 = Array2::from_shape_fn((utt.f0.len(), 1), |(i, _)| utt.f0[i]);
            melb::write_melb(&dir.join(&paths.f0), &f0)?;
            let entry = ManifestEntry {
                utt_id: utt.utt_id.clone(),
                speaker_id: utt.speaker_id,
                style_class: utt.style_class.name().to_string(),
                rate: utt.rate,
                paths,
            };
            serde_json::to_writer(&mut manifest, &entry)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(
            |e| VcError::Data(format!("cannot read {}: {e}", meta_path.display())),
        )?)?;
        if meta.version != META_VERSION {
            return Err(VcError::VersionMismatch {
                kind: "corpus meta",
                found: meta.version,
                expected: META_VERSION,
            });
        }
        let cfg = meta.config;
        let patterns = UnitPatterns {
            b: vecs_to_array(&meta.patterns)?,
        };
        let speakers = meta
            .speakers
            .iter()
            .map(|s| {
                let tau = Array1::from_vec(s.tau.clone());
                SpeakerSpec {
                    speaker_id: s.speaker_id,
                    envelope: envelope_from_tau(&cfg.synth, &tau),
                    tau,
                }
            })
            .collect();

        let manifest = fs::File::open(dir.join("manifest.jsonl"))
            .map_err(|e| VcError::Data(format!("cannot open manifest: {e}")))?;
        let mut utterances = Vec::new();
        for line in std::io::BufReader::new(manifest).lines() {
            let entry: ManifestEntry = serde_json::from_str(&line?)?;
            let mel = melb::read_melb(&dir.join(&entry.paths.mel))?;
            let ssl = melb::read_melb(&dir.join(&entry.paths.ssl))?;
            let style_feats = melb::read_melb(&dir.join(&entry.paths.style))?;
            let tokens = melb::read_melb(&dir.join(&entry.paths.tokens))?;
            let f0 = melb::read_melb(&dir.join(&entry.paths.f0))?;
            utterances.push(Utterance {
                utt_id: entry.utt_id,
                speaker_id: entry.speaker_id,
                style_class: entry.style_class.parse()?,
                rate: entry.rate,
                mel,
                ssl,
                style_feats,
                token_ids: tokens.column(0).iter().map(|&x| x as u32).collect(),
                f0: f0.column(0).to_vec(),
            });
        }
        Ok(Self {
            cfg,
            patterns,
            speakers,
            utterances,
            content_mean: Array1::from_vec(meta.content_mean),
        })
    }
}

fn vecs_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((r, c), flat).map_err(|e| VcError::Data(format!("patterns: {e}")))
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    version: u32,
    config: CorpusConfig,
    content_mean: Vec<f64>,
    patterns: Vec<Vec<f64>>,
    speakers: Vec<SpeakerMeta>,
}

#[derive(Serialize, Deserialize)]
struct SpeakerMeta {
    speaker_id: u32,
    tau: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    utt_id: String,
    speaker_id: u32,
    style_class: String,
    rate: f64,
    paths: UttPaths,
}

#[derive(Serialize, Deserialize)]
struct UttPaths {
    mel: PathBuf,
    ssl: PathBuf,
    style: PathBuf,
    tokens: PathBuf,
    f0: PathBuf,
}

impl UttPaths {
    fn for_id(utt_id: &str) -> Self {
        let base = PathBuf::from("utt");
        Self {
            mel: base.join(format!("{utt_id}.mel.melb")),
            ssl: base.join(format!("{utt_id}.ssl.melb")),
            style: base.join(format!("{utt_id}.style.melb")),
            tokens: base.join(format!("{utt_id}.tokens.melb")),
            f0: base.join(format!("{utt_id}.f0.melb")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    fn test_units(n: usize) -> Vec<(u32, f64)> {
        (0..n)
            .map(|i| {
                let id = (i * 7 % 64) as u32;
                (id, base_duration_for_unit(id))
            })
            .collect()
    }

    #[test]
    fn make_speaker_deterministic() {
        let c = cfg();
        let a = make_speaker(&c, 42, 0);
        let b = make_speaker(&c, 42, 0);
        assert_eq!(a, b);
        let other = make_speaker(&c, 43, 0);
        assert_ne!(a.tau, other.tau);
    }

    #[test]
    fn zero_tau_gives_zero_envelope() {
        let c = cfg();
        let env = envelope_from_tau(&c, &Array1::zeros(c.timbre_rank));
        assert!(env.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn envelope_matches_independent_basis_sum() {
        // Recompute the sinusoid expansion from scratch for seed 1.
        let c = cfg();
        let sp = make_speaker(&c, 1, 0);
        for m in 0..c.timbre_bins {
            let mut expect = 0.0;
            for j in 0..c.timbre_rank {
                expect += sp.tau[j]
                    * (std::f64::consts::PI * (j as f64 + 1.0) * (m as f64 + 0.5) / 32.0).sin();
            }
            expect *= 0.5;
            assert!((sp.envelope[m] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn style_contour_values() {
        let flat = make_style(StyleClass::Flat, 1.0).unwrap();
        for u in [0.0, 0.3, 1.0] {
            assert_eq!(flat.f0_at(u), 180.0);
        }
        let rising = make_style(StyleClass::Rising, 1.0).unwrap();
        assert_eq!(rising.f0_at(1.0), 240.0);
        // 180 + 60*sin(pi/2) = 240
        let slow = make_style(StyleClass::SlowOsc, 1.0).unwrap();
        assert!((slow.f0_at(0.25) - 240.0).abs() < 1e-9);
    }

    #[test]
    fn style_rejects_bad_inputs() {
        assert!(make_style(StyleClass::Flat, 0.9).is_err());
        assert!("sideways".parse::<StyleClass>().is_err());
        assert!("rising".parse::<StyleClass>().is_ok());
    }

    #[test]
    fn render_timbre_band_is_pattern_plus_envelope() {
        let c = cfg();
        let mut sp = make_speaker(&c, 5, 0);
        sp.tau.fill(0.0);
        sp.envelope = envelope_from_tau(&c, &sp.tau);
        let style = make_style(StyleClass::Flat, 1.0).unwrap();
        let patterns = UnitPatterns::generate(&c, 9);
        let utt =
            render_utterance(&c, &sp, &style, &[(3, 4.0)], &patterns, None).unwrap();
        assert_eq!(utt.n_frames(), 4);
        for t in 0..utt.n_frames() {
            for m in 0..c.timbre_bins {
                assert_eq!(utt.mel[(t, m)], patterns.b[(3, m)]);
            }
        }
    }

    #[test]
    fn flat_pitch_bump_centered_at_kappa_180() {
        let c = cfg();
        // kappa(180) = 32 + 8*log2(1.8)/2
        let expect = 32.0 + 8.0 * (1.8f64).log2() / 2.0;
        assert!((c.kappa(180.0) - expect).abs() < 1e-12);
        assert!((expect - 35.39).abs() < 0.01);

        let sp = make_speaker(&c, 5, 0);
        let style = make_style(StyleClass::Flat, 1.0).unwrap();
        let patterns = UnitPatterns::generate(&c, 9);
        let utt = render_utterance(&c, &sp, &style, &test_units(4), &patterns, None).unwrap();
        for t in 0..utt.n_frames() {
            for m in c.timbre_bins..c.n_mels {
                let d = m as f64 - expect;
                let want = (-d * d / (2.0 * 0.8 * 0.8)).exp();
                assert!((utt.mel[(t, m)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slower_rate_gives_at_least_as_many_frames() {
        let c = cfg();
        let sp = make_speaker(&c, 2, 0);
        let patterns = UnitPatterns::generate(&c, 9);
        let units = test_units(8);
        let slow = render_utterance(
            &c,
            &sp,
            &make_style(StyleClass::Flat, 0.8).unwrap(),
            &units,
            &patterns,
            None,
        )
        .unwrap();
        let norm = render_utterance(
            &c,
            &sp,
            &make_style(StyleClass::Flat, 1.0).unwrap(),
            &units,
            &patterns,
            None,
        )
        .unwrap();
        assert!(slow.n_frames() >= norm.n_frames());
    }

    #[test]
    fn duration_law_total_frames() {
        let c = cfg();
        let sp = make_speaker(&c, 2, 0);
        let patterns = UnitPatterns::generate(&c, 9);
        let units = test_units(7);
        for rate in RATES {
            let style = make_style(StyleClass::Rising, rate).unwrap();
            let utt = render_utterance(&c, &sp, &style, &units, &patterns, None).unwrap();
            let expect: usize = units.iter().map(|&(_, b)| frames_for(b, rate)).sum();
            assert_eq!(utt.n_frames(), expect);
        }
    }

    #[test]
    fn empty_units_rejected() {
        let c = cfg();
        let sp = make_speaker(&c, 2, 0);
        let patterns = UnitPatterns::generate(&c, 9);
        let style = make_style(StyleClass::Flat, 1.0).unwrap();
        assert!(render_utterance(&c, &sp, &style, &[], &patterns, None).is_err());
    }

    #[test]
    fn pitch_readout_flat_within_2hz() {
        let c = cfg();
        let sp = make_speaker(&c, 7, 0);
        let patterns = UnitPatterns::generate(&c, 9);
        let style = make_style(StyleClass::Flat, 1.0).unwrap();
        let utt = render_utterance(&c, &sp, &style, &test_units(10), &patterns, None).unwrap();
        for f in ground_truth_pitch(&c, &utt.mel) {
            let f = f.expect("voiced frame");
            assert!((f - 180.0).abs() < 2.0, "readout {f}");
        }
    }

    #[test]
    fn pitch_readout_contour_recovery_within_2hz() {
        let c = cfg();
        let sp = make_speaker(&c, 7, 0);
        let patterns = UnitPatterns::generate(&c, 9);
        for class in STYLE_CLASSES {
            let style = make_style(class, 1.0).unwrap();
            let utt =
                render_utterance(&c, &sp, &style, &test_units(12), &patterns, None).unwrap();
            let readout = ground_truth_pitch(&c, &utt.mel);
            for (t, f) in readout.iter().enumerate() {
                let f = f.expect("voiced frame");
                assert!(
                    (f - utt.f0[t]).abs() < 2.0,
                    "{class}: frame {t} readout {f} vs {}",
                    utt.f0[t]
                );
            }
        }
    }

    #[test]
    fn pitch_readout_rising_monotone() {
        let c = cfg();
        let sp = make_speaker(&c, 3, 0);
        let patterns = UnitPatterns::generate(&c, 9);
        let style = make_style(StyleClass::Rising, 1.0).unwrap();
        let utt = render_utterance(&c, &sp, &style, &test_units(10), &patterns, None).unwrap();
        let f: Vec<f64> = ground_truth_pitch(&c, &utt.mel)
            .into_iter()
            .map(|x| x.unwrap())
            .collect();
        for w in f.windows(2) {
            assert!(w[1] >= w[0] - 0.5, "non-monotone: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_pitch_band_is_undefined() {
        let c = cfg();
        let mel = Array2::zeros((3, c.n_mels));
        let out = ground_truth_pitch(&c, &mel);
        assert!(out.iter().all(|f| f.is_none()));
    }

    #[test]
    fn timbre_recovery_zero_and_known_tau() {
        let c = cfg();
        let patterns = UnitPatterns::generate(&c, 11);
        let mean = patterns.content_mean();
        let style = make_style(StyleClass::Flat, 1.0).unwrap();

        let mut sp = make_speaker(&c, 5, 0);
        sp.tau.fill(0.0);
        sp.envelope = envelope_from_tau(&c, &sp.tau);
        let utt = render_utterance(&c, &sp, &style, &test_units(30), &patterns, None).unwrap();
        let tau_hat = ground_truth_timbre(&c, &utt.mel, &mean);
        assert!(tau_hat.iter().all(|&x| x.abs() < 0.2), "{tau_hat}");

        let sp2 = make_speaker(&c, 6, 1);
        let utt2 =
            render_utterance(&c, &sp2, &style, &test_units(30), &patterns, None).unwrap();
        assert!(utt2.n_frames() >= 100);
        let tau_hat2 = ground_truth_timbre(&c, &utt2.mel, &mean);
        assert!(cosine(&tau_hat2, &sp2.tau) > 0.95);
    }

    #[test]
    fn timbre_recovery_same_vs_cross_speaker() {
        // Monte-Carlo over 100 seeded pairs: same-speaker cosine should beat
        // cross-speaker cosine in at least 95 of them.
        let c = cfg();
        let patterns = UnitPatterns::generate(&c, 11);
        let mean = patterns.content_mean();
        let mut wins = 0;
        for trial in 0..100u64 {
            let sp_a = make_speaker(&c, 1000 + trial, 0);
            let sp_b = make_speaker(&c, 2000 + trial, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
            let mut rand_units = |n: usize| -> Vec<(u32, f64)> {
                (0..n)
                    .map(|_| {
                        let id = rng.random_range(0..c.vocab as u32);
                        (id, base_duration_for_unit(id))
                    })
                    .collect()
            };
            let s1 = make_style(STYLE_CLASSES[(trial % 5) as usize], 1.0).unwrap();
            let s2 = make_style(STYLE_CLASSES[((trial + 2) % 5) as usize], 1.0).unwrap();
            let u1 =
                render_utterance(&c, &sp_a, &s1, &rand_units(14), &patterns, Some(trial)).unwrap();
            let u2 = render_utterance(&c, &sp_a, &s2, &rand_units(14), &patterns, Some(trial + 1))
                .unwrap();
            let ub = render_utterance(&c, &sp_b, &s1, &rand_units(14), &patterns, Some(trial + 2))
                .unwrap();
            let t1 = ground_truth_timbre(&c, &u1.mel, &mean);
            let t2 = ground_truth_timbre(&c, &u2.mel, &mean);
            let tb = ground_truth_timbre(&c, &ub.mel, &mean);
            if cosine(&t1, &t2) > cosine(&t1, &tb) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "same-speaker won only {wins}/100");
    }

    #[test]
    fn band_separation_noise_free() {
        let c = cfg();
        let patterns = UnitPatterns::generate(&c, 11);
        let units = test_units(6);
        let style = make_style(StyleClass::SlowOsc, 1.0).unwrap();
        let sp_a = make_speaker(&c, 100, 0);
        let sp_b = make_speaker(&c, 200, 1);
        let ua = render_utterance(&c, &sp_a, &style, &units, &patterns, None).unwrap();
        let ub = render_utterance(&c, &sp_b, &style, &units, &patterns, None).unwrap();
        // Pitch band depends only on style.
        assert_eq!(
            ua.mel.slice(s![.., c.timbre_bins..]),
            ub.mel.slice(s![.., c.timbre_bins..])
        );
        // Timbre band depends only on (speaker, units): same speaker two styles.
        let style2 = make_style(StyleClass::Falling, 1.0).unwrap();
        let ua2 = render_utterance(&c, &sp_a, &style2, &units, &patterns, None).unwrap();
        assert_eq!(
            ua.mel.slice(s![.., ..c.timbre_bins]),
            ua2.mel.slice(s![.., ..c.timbre_bins])
        );
    }

    #[test]
    fn corpus_generation_deterministic_and_sized() {
        let mut cc = CorpusConfig::default();
        cc.n_speakers = 3;
        cc.n_styles = 2;
        cc.per_cell = 2;
        let a = Corpus::generate(&cc).unwrap();
        let b = Corpus::generate(&cc).unwrap();
        assert_eq!(a.utterances.len(), 3 * 2 * 2);
        for (ua, ub) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(ua.mel, ub.mel);
            assert_eq!(ua.token_ids, ub.token_ids);
        }
    }

    #[test]
    fn corpus_save_load_round_trip() {
        let mut cc = CorpusConfig::default();
        cc.n_speakers = 2;
        cc.n_styles = 2;
        cc.per_cell = 1;
        let corpus = Corpus::generate(&cc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.utterances.len(), corpus.utterances.len());
        assert_eq!(back.speakers.len(), 2);
        for (a, b) in corpus.utterances.iter().zip(&back.utterances) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(a.token_ids, b.token_ids);
            assert_eq!(a.n_frames(), b.n_frames());
            // MELB stores f32; loaded values match to f32 precision.
            for (x, y) in a.mel.iter().zip(b.mel.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn held_out_speakers_share_patterns() {
        let mut train = CorpusConfig::default();
        train.n_speakers = 2;
        train.n_styles = 1;
        train.per_cell = 1;
        let mut held = train.clone();
        held.speaker_offset = 2;
        held.n_speakers = 2;
        let a = Corpus::generate(&train).unwrap();
        let b = Corpus::generate(&held).unwrap();
        assert_eq!(a.patterns, b.patterns);
        assert_ne!(a.speakers[0].tau, b.speakers[0].tau);
        assert_eq!(b.speakers[0].speaker_id, 2);
    }
}
