//! Synthetic desk-scale corpus.
//!
//! Each "speaker" is amplitude-modulated noise confined to a set of
//! formant bands. The modulation envelope is syllable-like (random-height
//! raised-sine bumps with pauses) and doubles as the "lip motion": it is
//! sampled at the video frame rate, interpolated to STFT frame times and
//! turned into a small embedding together with a speaker one-hot code.

mod io;

pub use io::{
    decode_embeddings, encode_embeddings, load_corpus, manifest_hash, read_embeddings, write_corpus,
    write_embeddings, Manifest, ManifestEntry, EMBEDDING_MAGIC,
};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{power, stft, StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::vae::TrainingFrame;

pub const VIDEO_FPS: f64 = 30.0;
pub const EMBEDDING_DIM: usize = 16;
/// Identity features at the start of each embedding.
pub const ID_SLOTS: usize = 8;
const IDENTITY_LO_HZ: f64 = 500.0;
const IDENTITY_STEP_HZ: f64 = 550.0;
const IDENTITY_WIDTH_HZ: f64 = 300.0;
/// Noise SNR grid in dB.
pub const SNR_GRID: [f64; 5] = [-15.0, -10.0, -5.0, 0.0, 5.0];
const TARGET_RMS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormantBand {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

impl FormantBand {
    pub const fn new(center_hz: f64, bandwidth_hz: f64) -> Self {
        Self {
            center_hz,
            bandwidth_hz,
        }
    }

    pub fn lo(&self) -> f64 {
        self.center_hz - self.bandwidth_hz / 2.0
    }

    pub fn hi(&self) -> f64 {
        self.center_hz + self.bandwidth_hz / 2.0
    }

    pub fn contains(&self, hz: f64) -> bool {
        hz >= self.lo() && hz <= self.hi()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpeakerSpec {
    pub id: u32,
    pub formant_bands: Vec<FormantBand>,
    /// Mean syllable rate in Hz.
    pub modulation_rate: f64,
    /// Fixes the per-band levels (the speaker's "timbre").
    pub seed: u64,
}

impl SynthSpeakerSpec {
    /// Two speakers with interleaved, disjoint bands.
    pub fn default_pair() -> [Self; 2] {
        [
            Self {
                id: 0,
                formant_bands: vec![
                    FormantBand::new(500.0, 200.0),
                    FormantBand::new(1500.0, 250.0),
                    FormantBand::new(3000.0, 300.0),
                ],
                modulation_rate: 4.0,
                seed: 11,
            },
            Self {
                id: 1,
                formant_bands: vec![
                    FormantBand::new(1000.0, 200.0),
                    FormantBand::new(2200.0, 250.0),
                    FormantBand::new(4200.0, 300.0),
                ],
                modulation_rate: 5.5,
                seed: 23,
            },
        ]
    }

    /// Training-pool speakers: variants of the two default voices with
    /// jittered band centres, band levels and syllable rates. Ids start at
    /// 2 so they never collide with the default pair.
    pub fn pool<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<Self> {
        let base = Self::default_pair();
        (0..count)
            .map(|k| {
                let b = &base[k % 2];
                Self {
                    id: 2 + k as u32,
                    formant_bands: b
                        .formant_bands
                        .iter()
                        .map(|f| FormantBand::new(f.center_hz + rng.random_range(-60.0..60.0), f.bandwidth_hz))
                        .collect(),
                    modulation_rate: b.modulation_rate * rng.random_range(0.8..1.25),
                    seed: rng.random(),
                }
            })
            .collect()
    }

    /// Speaker-like process above both default speakers' bands.
    pub fn babble() -> Self {
        Self {
            id: 7,
            formant_bands: vec![FormantBand::new(5600.0, 600.0), FormantBand::new(6800.0, 600.0)],
            modulation_rate: 3.0,
            seed: 97,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.formant_bands.is_empty() {
            return Err(Error::Config(format!("speaker {} has no formant bands", self.id)));
        }
        for b in &self.formant_bands {
            if !(b.bandwidth_hz > 0.0 && b.lo() > 0.0 && b.hi() < nyquist) {
                return Err(Error::Config(format!(
                    "speaker {}: band {:?} must lie strictly inside (0, {nyquist}) Hz",
                    self.id, b
                )));
            }
        }
        if !(self.modulation_rate > 0.0 && self.modulation_rate.is_finite()) {
            return Err(Error::Config(format!("speaker {}: modulation rate must be positive", self.id)));
        }
        Ok(())
    }

    pub fn in_band(&self, hz: f64) -> bool {
        self.formant_bands.iter().any(|b| b.contains(hz))
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.formant_bands.iter().any(|a| {
            other
                .formant_bands
                .iter()
                .any(|b| a.lo() <= b.hi() && b.lo() <= a.hi())
        })
    }

    fn band_levels(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.formant_bands.iter().map(|_| rng.random_range(0.5..1.0)).collect()
    }

    /// Identity part of the embedding: the band centres smoothed onto
    /// `ID_SLOTS` reference frequencies, so similar voices get similar codes.
    pub fn identity_code(&self) -> [f64; ID_SLOTS] {
        let mut code = [0.0; ID_SLOTS];
        for (j, c) in code.iter_mut().enumerate() {
            let mu = IDENTITY_LO_HZ + j as f64 * IDENTITY_STEP_HZ;
            *c = self
                .formant_bands
                .iter()
                .map(|b| (-(b.center_hz - mu).powi(2) / (2.0 * IDENTITY_WIDTH_HZ.powi(2))).exp())
                .sum();
        }
        code
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseType {
    White,
    Pink,
    BabbleSurrogate,
}

impl NoiseType {
    pub const ALL: [NoiseType; 3] = [NoiseType::White, NoiseType::Pink, NoiseType::BabbleSurrogate];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseType::White => "white",
            NoiseType::Pink => "pink",
            NoiseType::BabbleSurrogate => "babble-surrogate",
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    /// Level of speaker 2 relative to speaker 1, in dB.
    pub speaker_snr_db: f64,
    pub noise_type: NoiseType,
    /// Speech-to-noise ratio in dB; `+inf` disables the noise.
    pub noise_snr_db: f64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.speaker_snr_db.is_finite() {
            return Err(Error::Config("speaker SNR must be finite".into()));
        }
        if self.noise_snr_db.is_nan() || self.noise_snr_db == f64::NEG_INFINITY {
            return Err(Error::Config("noise SNR must be finite or +inf".into()));
        }
        Ok(())
    }
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            speaker_snr_db: 0.0,
            noise_type: NoiseType::White,
            noise_snr_db: -5.0,
        }
    }
}

/// Syllable envelope: `amp * sin^2(pi (t - start) / dur)` on each syllable.
#[derive(Debug, Clone)]
struct Envelope {
    syllables: Vec<(f64, f64, f64)>,
}

impl Envelope {
    fn generate<R: Rng + ?Sized>(rate: f64, duration: f64, rng: &mut R) -> Self {
        let mut syllables = Vec::new();
        let mut t = 0.0;
        while t < duration {
            let dur = rng.random_range(0.6..1.4) / rate;
            let amp = if !syllables.is_empty() && rng.random::<f64>() < 0.2 {
                0.0
            } else {
                rng.random_range(0.3..1.0)
            };
            syllables.push((t, dur, amp));
            t += dur;
        }
        Self { syllables }
    }

    fn at(&self, t: f64) -> f64 {
        let i = self.syllables.partition_point(|s| s.0 <= t);
        if i == 0 {
            return 0.0;
        }
        let (start, dur, amp) = self.syllables[i - 1];
        if t >= start + dur {
            return 0.0;
        }
        amp * (PI * (t - start) / dur).sin().powi(2)
    }
}

/// Real Gaussian noise of `len` samples whose spectrum has magnitude
/// profile `shape(hz)`, synthesised in the frequency domain.
fn shaped_noise<R: Rng + ?Sized>(len: usize, sample_rate: u32, shape: impl Fn(f64) -> f64, rng: &mut R) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); len];
    for k in 1..=len / 2 {
        let a = shape(k as f64 * sample_rate as f64 / len as f64);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        if a == 0.0 {
            continue;
        }
        let c = if 2 * k == len {
            Complex64::new(a * re, 0.0)
        } else {
            Complex64::new(a * re, a * im)
        };
        spec[k] = c;
        spec[len - k] = c.conj();
    }
    FftPlanner::new().plan_fft_inverse(len).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

fn normalise(x: &mut [f64], rms: f64) {
    let e = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if e > 0.0 {
        x.iter_mut().for_each(|v| *v *= rms / e);
    }
}

fn speech_like<R: Rng + ?Sized>(spec: &SynthSpeakerSpec, len: usize, sample_rate: u32, rng: &mut R) -> (Vec<f64>, Envelope) {
    let levels = spec.band_levels();
    let mut carrier = shaped_noise(
        len,
        sample_rate,
        |hz| {
            spec.formant_bands
                .iter()
                .zip(&levels)
                .filter(|(b, _)| b.contains(hz))
                .map(|(_, l)| l)
                .sum()
        },
        rng,
    );
    normalise(&mut carrier, 1.0);
    let env = Envelope::generate(spec.modulation_rate, len as f64 / sample_rate as f64, rng);
    let sr = sample_rate as f64;
    for (k, v) in carrier.iter_mut().enumerate() {
        *v *= env.at(k as f64 / sr);
    }
    (carrier, env)
}

/// Embedding of one STFT frame at time `t` seconds: identity code, then
/// envelope value, its square and square root, its slope, and the envelope
/// two and one video frames before and after.
fn embedding_at(identity: &[f64; ID_SLOTS], video: &[f64], t: f64) -> Vec<f64> {
    let last = (video.len() - 1) as f64;
    let e = |t: f64| -> f64 {
        let p = (t * VIDEO_FPS).clamp(0.0, last);
        let i = p.floor() as usize;
        let frac = p - i as f64;
        if i + 1 < video.len() {
            video[i] * (1.0 - frac) + video[i + 1] * frac
        } else {
            video[i]
        }
    };
    let dt = 1.0 / VIDEO_FPS;
    let e0 = e(t);
    let mut out = vec![0.0; EMBEDDING_DIM];
    out[..ID_SLOTS].copy_from_slice(identity);
    out[ID_SLOTS..].copy_from_slice(&[
        e0,
        e0 * e0,
        e0.sqrt(),
        (e(t + dt) - e(t - dt)) / 2.0,
        e(t - 2.0 * dt),
        e(t - dt),
        e(t + dt),
        e(t + 2.0 * dt),
    ]);
    out
}

/// One utterance of `duration_s` seconds and its per-STFT-frame embeddings.
pub fn synth_utterance<R: Rng + ?Sized>(
    spec: &SynthSpeakerSpec,
    duration_s: f64,
    stft_cfg: &StftConfig,
    sample_rate: u32,
    rng: &mut R,
) -> Result<(Waveform, Vec<Vec<f64>>)> {
    if !(duration_s >= 1.0 && duration_s.is_finite()) {
        return Err(Error::Config(format!("utterance duration must be >= 1 s, got {duration_s}")));
    }
    spec.validate(sample_rate)?;
    stft_cfg.validate()?;
    let len = (duration_s * sample_rate as f64).round() as usize;
    let (mut samples, env) = speech_like(spec, len, sample_rate, rng);
    normalise(&mut samples, TARGET_RMS);

    let video: Vec<f64> = (0..=(duration_s * VIDEO_FPS).ceil() as usize)
        .map(|k| env.at(k as f64 / VIDEO_FPS))
        .collect();
    let sr = sample_rate as f64;
    let identity = spec.identity_code();
    let embedding = (0..stft_cfg.frame_count(len))
        .map(|n| embedding_at(&identity, &video, stft_cfg.frame_center(n) / sr))
        .collect();
    Ok((Waveform::new(samples, sample_rate)?, embedding))
}

/// Noise of the given type, unit RMS.
pub fn generate_noise<R: Rng + ?Sized>(kind: NoiseType, len: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let mut x = match kind {
        NoiseType::White => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseType::Pink => shaped_noise(len, sample_rate, |hz| 1.0 / hz.max(20.0).sqrt(), rng),
        NoiseType::BabbleSurrogate => {
            let spec = SynthSpeakerSpec::babble();
            let mut sum = vec![0.0; len];
            for _ in 0..3 {
                let (talker, _) = speech_like(&spec, len, sample_rate, rng);
                sum.iter_mut().zip(talker).for_each(|(s, t)| *s += t);
            }
            sum
        }
    };
    normalise(&mut x, 1.0);
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    /// Scaled speaker signals as they appear in the mixture.
    pub references: [Waveform; 2],
    pub noise: Waveform,
}

fn energy_db(num: f64, den: f64) -> f64 {
    10.0 * (num / den).log10()
}

/// Mixes two utterances (the shorter is zero-padded) and noise. Speaker 1
/// keeps its level; speaker 2 and the noise are scaled to the requested
/// ratios, the noise relative to the summed speech.
pub fn mix<R: Rng + ?Sized>(u1: &Waveform, u2: &Waveform, m: &MixSpec, rng: &mut R) -> Result<Mixture> {
    m.validate()?;
    if u1.sample_rate != u2.sample_rate {
        return Err(Error::Dimension("utterances have different sample rates".into()));
    }
    let len = u1.len().max(u2.len());
    let s1 = u1.resized(len);
    let s2 = u2.resized(len);
    let (e1, e2) = (s1.energy(), s2.energy());
    if e1 == 0.0 || e2 == 0.0 {
        return Err(Error::Data("cannot mix a silent utterance".into()));
    }
    let s2 = s2.scaled((e1 / e2 * 10f64.powf(m.speaker_snr_db / 10.0)).sqrt());
    let speech = &s1 + &s2;
    let noise = if m.noise_snr_db == f64::INFINITY {
        Waveform::zeros(len, u1.sample_rate)
    } else {
        let raw = Waveform::new(generate_noise(m.noise_type, len, u1.sample_rate, rng), u1.sample_rate)?;
        let gain = (speech.energy() / raw.energy() * 10f64.powf(-m.noise_snr_db / 10.0)).sqrt();
        raw.scaled(gain)
    };
    Ok(Mixture {
        mixture: &speech + &noise,
        references: [s1, s2],
        noise,
    })
}

/// Measured `(speaker_snr_db, noise_snr_db)` of a mixture.
pub fn measured_snrs(m: &Mixture) -> (f64, f64) {
    let speech = &m.references[0] + &m.references[1];
    (
        energy_db(m.references[1].energy(), m.references[0].energy()),
        energy_db(speech.energy(), m.noise.energy()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Utterances per speaker.
    pub n_utt: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub stft: StftConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utt: 8,
            duration_s: 2.0,
            sample_rate: SAMPLE_RATE,
            stft: StftConfig::desk(),
        }
    }
}

impl CorpusConfig {
    /// `(train, validation, test)` utterances per speaker.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let held = (self.n_utt / 4).max(1);
        (self.n_utt - 2 * held, held, held)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_utt < 4 {
            return Err(Error::Config(format!("n_utt must be at least 4, got {}", self.n_utt)));
        }
        if !(self.duration_s >= 1.0 && self.duration_s.is_finite()) {
            return Err(Error::Config("duration_s must be >= 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        self.stft.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Index into the corpus speaker list.
    pub speaker: usize,
    pub split: Split,
    pub seed: u64,
    pub waveform: Waveform,
    pub embedding: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SynthSpeakerSpec>,
    pub utterances: Vec<Utterance>,
}

/// The default pair (evaluation speakers 0 and 1) followed by `pool`
/// training-pool speakers.
pub fn default_speaker_set<R: Rng + ?Sized>(pool: usize, rng: &mut R) -> Vec<SynthSpeakerSpec> {
    let mut specs = SynthSpeakerSpec::default_pair().to_vec();
    specs.extend(SynthSpeakerSpec::pool(pool, rng));
    specs
}

impl Corpus {
    /// Speakers used to train the speaker-independent model: every speaker
    /// after the evaluation pair, or the pair itself when there is no pool.
    pub fn pool_speakers(&self) -> Vec<usize> {
        if self.speakers.len() > 2 {
            (2..self.speakers.len()).collect()
        } else {
            (0..self.speakers.len()).collect()
        }
    }

    pub fn utterances_of(&self, speaker: usize, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.speaker == speaker && u.split == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    /// Test utterances of speakers 0 and 1 paired by position.
    pub fn test_pairs(&self) -> Vec<[&Utterance; 2]> {
        let a = self.utterances_of(0, Split::Test);
        let b = self.utterances_of(1, Split::Test);
        a.into_iter().zip(b).map(|(x, y)| [x, y]).collect()
    }
}

/// Generates `n_utt` utterances per speaker, split into train, validation
/// and test by utterance. Each utterance has its own seed drawn from `rng`.
pub fn build_corpus<R: Rng + ?Sized>(cfg: &CorpusConfig, specs: &[SynthSpeakerSpec], rng: &mut R) -> Result<Corpus> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("at least one speaker is required".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate(cfg.sample_rate)?;
        if specs[..i].iter().any(|o| o.id == s.id) {
            return Err(Error::Config(format!("duplicate speaker id {}", s.id)));
        }
    }
    let (train, val, _) = cfg.split_sizes();
    let jobs: Vec<(usize, usize, Split, u64)> = (0..specs.len())
        .flat_map(|spk| (0..cfg.n_utt).map(move |k| (spk, k)))
        .map(|(spk, k)| {
            let split = if k < train {
                Split::Train
            } else if k < train + val {
                Split::Validation
            } else {
                Split::Test
            };
            (spk, k, split, rng.random())
        })
        .collect();
    let utterances = jobs
        .into_par_iter()
        .map(|(spk, k, split, seed)| {
            let spec = &specs[spk];
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (waveform, embedding) = synth_utterance(spec, cfg.duration_s, &cfg.stft, cfg.sample_rate, &mut r)?;
            Ok(Utterance {
                id: format!("spk{}-{:04}", spec.id, k),
                speaker: spk,
                split,
                seed,
                waveform,
                embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: *cfg,
        speakers: specs.to_vec(),
        utterances,
    })
}

fn frames_of(mix_wave: &Waveform, clean: &Waveform, embedding: &[Vec<f64>], stft_cfg: &StftConfig) -> Result<Vec<TrainingFrame>> {
    let p_mix = power(&stft(mix_wave, stft_cfg)?);
    let p_clean = power(&stft(clean, stft_cfg)?);
    if embedding.len() != p_mix.frames() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} frames",
            embedding.len(),
            p_mix.frames()
        )));
    }
    Ok((0..p_mix.frames())
        .map(|n| TrainingFrame {
            mix_power: p_mix.frame(n).to_vec(),
            clean_power: p_clean.frame(n).to_vec(),
            visual: embedding[n].clone(),
        })
        .collect())
}

/// Training triples: every utterance of a `targets` speaker in `split` is
/// mixed under `m` with a random utterance of a different speaker from
/// `partners` (same split). The encoder sees the mixture; the
/// reconstruction target is the utterance itself.
pub fn training_frames<R: Rng + ?Sized>(
    corpus: &Corpus,
    split: Split,
    targets: &[usize],
    partners: &[usize],
    m: &MixSpec,
    rng: &mut R,
) -> Result<Vec<TrainingFrame>> {
    let utts = corpus.split(split);
    let plan: Vec<(&Utterance, &Utterance, u64)> = utts
        .iter()
        .filter(|u| targets.contains(&u.speaker))
        .map(|u| {
            let pool: Vec<&&Utterance> = utts
                .iter()
                .filter(|p| p.speaker != u.speaker && partners.contains(&p.speaker))
                .collect();
            if pool.is_empty() {
                return Err(Error::Data(format!("no partner utterances for {}", u.id)));
            }
            Ok((*u, *pool[rng.random_range(0..pool.len())], rng.random()))
        })
        .collect::<Result<_>>()?;
    let stft_cfg = corpus.config.stft;
    let per_utt = plan
        .into_par_iter()
        .map(|(u, p, seed)| {
            let mixed = mix(&u.waveform, &p.waveform, m, &mut ChaCha8Rng::seed_from_u64(seed))?;
            frames_of(&mixed.mixture, &mixed.references[0], &u.embedding, &stft_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_utt.into_iter().flatten().collect())
}
