//! Scale-invariant SDR scoring and benchmark sweeps.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::{istft, power, stft, ComplexSpectrogram, PowerSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::estimator::separate;
use crate::matrix::Matrix;
use crate::mcem::McemConfig;
use crate::nmf::{baseline_separate, fit_is_nmf};
use crate::streams::named_stream;
use crate::synthdata::{mix, Corpus, MixSpec, Mixture, NoiseType, Split, Utterance};
use crate::vae::CvaeModel;

/// Scores are clamped to `[-SI_SDR_CAP, SI_SDR_CAP]` dB.
pub const SI_SDR_CAP: f64 = 60.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10 log10(|a s|^2 / |e - a s|^2)` with `a = <e, s> / |s|^2`.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let (s, e) = (&reference.samples, &estimate.samples);
    let ss = dot(s, s);
    if ss == 0.0 {
        return Err(Error::Data("SI-SDR of a silent reference".into()));
    }
    let a = dot(e, s) / ss;
    let target = a * a * ss;
    let resid: f64 = s.iter().zip(e).map(|(s, e)| (e - a * s).powi(2)).sum();
    let db = if target == 0.0 {
        -SI_SDR_CAP
    } else if resid == 0.0 {
        SI_SDR_CAP
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    /// Per reference, in reference order.
    pub si_sdr_mix: [f64; 2],
    pub si_sdr_est: [f64; 2],
    pub improvement: [f64; 2],
    /// The best assignment maps estimate 2 to reference 1 and vice versa.
    pub swapped: bool,
}

impl PairScore {
    pub fn mean_improvement(&self) -> f64 {
        (self.improvement[0] + self.improvement[1]) / 2.0
    }
}

/// Scores both estimate-to-reference assignments and keeps the one with
/// the higher mean SI-SDR.
pub fn evaluate_pair(refs: [&Waveform; 2], estimates: [&Waveform; 2], mixture: &Waveform) -> Result<PairScore> {
    let direct = [si_sdr(refs[0], estimates[0])?, si_sdr(refs[1], estimates[1])?];
    let crossed = [si_sdr(refs[0], estimates[1])?, si_sdr(refs[1], estimates[0])?];
    let swapped = crossed[0] + crossed[1] > direct[0] + direct[1];
    let est = if swapped { crossed } else { direct };
    let mix = [si_sdr(refs[0], mixture)?, si_sdr(refs[1], mixture)?];
    Ok(PairScore {
        si_sdr_mix: mix,
        si_sdr_est: est,
        improvement: [est[0] - mix[0], est[1] - mix[1]],
        swapped,
    })
}

/// One mixture to separate, with everything a method may use.
pub struct BenchCase<'a> {
    pub mixture: Mixture,
    pub embeddings: [&'a [Vec<f64>]; 2],
    pub stft: StftConfig,
}

pub trait Method: Sync {
    fn name(&self) -> &str;
    /// Estimates of speaker 1 and speaker 2, each as long as the mixture.
    fn separate(&self, case: &BenchCase, seed: u64) -> Result<[Waveform; 2]>;
}

/// Returns the mixture for both speakers.
pub struct Identity;

impl Method for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn separate(&self, case: &BenchCase, _seed: u64) -> Result<[Waveform; 2]> {
        Ok([case.mixture.mixture.clone(), case.mixture.mixture.clone()])
    }
}

/// Wiener filtering with the true source and noise power spectrograms.
pub struct OracleWiener;

fn masked_istft(x: &ComplexSpectrogram, mask: &[f64], cfg: &StftConfig, len: usize, rate: u32) -> Result<Waveform> {
    let w = istft(&x.masked(mask)?, cfg, len)?;
    Waveform::new(w.samples, rate)
}

impl Method for OracleWiener {
    fn name(&self) -> &str {
        "oracle-wiener"
    }

    fn separate(&self, case: &BenchCase, _seed: u64) -> Result<[Waveform; 2]> {
        let m = &case.mixture;
        let x = stft(&m.mixture, &case.stft)?;
        let p: Vec<PowerSpectrogram> = [&m.references[0], &m.references[1], &m.noise]
            .iter()
            .map(|w| Ok(power(&stft(w, &case.stft)?)))
            .collect::<Result<_>>()?;
        let total: Vec<f64> = (0..p[0].as_slice().len())
            .map(|i| p.iter().map(|q| q.as_slice()[i]).sum::<f64>() + f64::MIN_POSITIVE)
            .collect();
        let est = |k: usize| -> Result<Waveform> {
            let mask: Vec<f64> = p[k].as_slice().iter().zip(&total).map(|(a, t)| a / t).collect();
            masked_istft(&x, &mask, &case.stft, m.mixture.len(), m.mixture.sample_rate)
        };
        Ok([est(0)?, est(1)?])
    }
}

/// Monte-Carlo EM separation with one decoder per speaker.
pub struct McemMethod {
    pub name: String,
    pub models: [CvaeModel; 2],
    pub config: McemConfig,
}

impl Method for McemMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn separate(&self, case: &BenchCase, seed: u64) -> Result<[Waveform; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = separate(
            &case.mixture.mixture,
            case.embeddings,
            [&self.models[0], &self.models[1]],
            &case.stft,
            &self.config,
            &mut rng,
        )?;
        let [a, b] = out.sources;
        Ok([a.waveform, b.waveform])
    }
}

/// Supervised IS-NMF baseline with per-speaker dictionaries.
pub struct NmfBaseline {
    pub dictionaries: [Matrix; 2],
    pub noise_rank: usize,
    pub iters: usize,
}

impl NmfBaseline {
    /// Learns a rank-`rank` dictionary per test speaker (0 and 1) from the
    /// clean training utterances.
    pub fn train<R: Rng + ?Sized>(corpus: &Corpus, rank: usize, noise_rank: usize, iters: usize, rng: &mut R) -> Result<Self> {
        let mut dict = |speaker: usize| -> Result<Matrix> {
            let utts = corpus.utterances_of(speaker, Split::Train);
            if utts.is_empty() {
                return Err(Error::Data(format!("speaker {speaker} has no training utterances")));
            }
            let mut data = Vec::new();
            let mut frames = 0;
            for u in utts {
                let p = power(&stft(&u.waveform, &corpus.config.stft)?);
                frames += p.frames();
                data.extend_from_slice(p.as_slice());
            }
            let p = PowerSpectrogram::from_vec(corpus.config.stft.bins(), frames, data)?;
            Ok(fit_is_nmf(&p, rank, iters, rng)?.model.w)
        };
        Ok(Self {
            dictionaries: [dict(0)?, dict(1)?],
            noise_rank,
            iters,
        })
    }
}

impl Method for NmfBaseline {
    fn name(&self) -> &str {
        "nmf-baseline"
    }

    fn separate(&self, case: &BenchCase, seed: u64) -> Result<[Waveform; 2]> {
        let m = &case.mixture.mixture;
        let x = stft(m, &case.stft)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = baseline_separate(&x, &self.dictionaries[0], &self.dictionaries[1], self.noise_rank, self.iters, &mut rng)?;
        let [a, b] = out.speech;
        Ok([
            Waveform::new(istft(&a, &case.stft, m.len())?.samples, m.sample_rate)?,
            Waveform::new(istft(&b, &case.stft, m.len())?.samples, m.sample_rate)?,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub snr_grid: Vec<f64>,
    pub noise_types: Vec<NoiseType>,
    pub speaker_snr_db: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    /// The default synthetic suite: white noise at -5 dB, speakers at 0 dB.
    fn default() -> Self {
        Self {
            snr_grid: vec![-5.0],
            noise_types: vec![NoiseType::White],
            speaker_snr_db: 0.0,
            seed: 0,
        }
    }
}

/// Score of one method on one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub method: String,
    pub noise_type: NoiseType,
    pub snr_db: f64,
    pub pair: usize,
    pub score: PairScore,
}

/// Mean scores of one method in one (SNR, noise type) cell, averaged over
/// mixtures and both speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub noise_type: NoiseType,
    pub snr_db: f64,
    pub si_sdr_mix: f64,
    pub si_sdr_est: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<BenchRow>,
    pub utterances: Vec<UtteranceScore>,
}

impl EvalReport {
    pub fn row(&self, method: &str, noise_type: NoiseType, snr_db: f64) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.noise_type == noise_type && r.snr_db == snr_db)
    }

    /// Mean improvement of `method` over every cell.
    pub fn mean_improvement(&self, method: &str) -> Option<f64> {
        let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.method == method).collect();
        (!rows.is_empty()).then(|| rows.iter().map(|r| r.improvement).sum::<f64>() / rows.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,noise_type,snr_db,si_sdr_mix,si_sdr_est,improvement")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4}",
                r.method, r.noise_type, r.snr_db, r.si_sdr_mix, r.si_sdr_est, r.improvement
            )?;
        }
        Ok(())
    }
}

/// Runs every method on every pair at every (SNR, noise type). Mixtures and
/// method seeds come from named sub-streams of `cfg.seed`, so all methods
/// see identical inputs and the table is reproducible.
pub fn benchmark(methods: &[&dyn Method], pairs: &[[&Utterance; 2]], stft_cfg: &StftConfig, cfg: &BenchConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("benchmark needs at least one test pair".into()));
    }
    let cells: Vec<(NoiseType, f64, usize)> = cfg
        .snr_grid
        .iter()
        .flat_map(|&snr| cfg.noise_types.iter().map(move |&t| (t, snr)))
        .flat_map(|(t, snr)| (0..pairs.len()).map(move |j| (t, snr, j)))
        .collect();
    let scores: Vec<Vec<UtteranceScore>> = cells
        .par_iter()
        .map(|&(noise_type, snr_db, j)| {
            let mut rng = named_stream(cfg.seed, &format!("bench/{noise_type}/{snr_db}/{j}"));
            let spec = MixSpec {
                speaker_snr_db: cfg.speaker_snr_db,
                noise_type,
                noise_snr_db: snr_db,
            };
            let [u1, u2] = pairs[j];
            let case = BenchCase {
                mixture: mix(&u1.waveform, &u2.waveform, &spec, &mut rng)?,
                embeddings: [&u1.embedding, &u2.embedding],
                stft: *stft_cfg,
            };
            let method_seed: u64 = rng.random();
            methods
                .iter()
                .map(|m| {
                    let [e1, e2] = m.separate(&case, method_seed)?;
                    let refs = &case.mixture.references;
                    Ok(UtteranceScore {
                        method: m.name().to_string(),
                        noise_type,
                        snr_db,
                        pair: j,
                        score: evaluate_pair([&refs[0], &refs[1]], [&e1, &e2], &case.mixture.mixture)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let utterances: Vec<UtteranceScore> = scores.into_iter().flatten().collect();

    let mut rows = Vec::new();
    for m in methods {
        for &snr_db in &cfg.snr_grid {
            for &noise_type in &cfg.noise_types {
                let cell: Vec<&PairScore> = utterances
                    .iter()
                    .filter(|u| u.method == m.name() && u.noise_type == noise_type && u.snr_db == snr_db)
                    .map(|u| &u.score)
                    .collect();
                let n = 2.0 * cell.len() as f64;
                let mean = |f: &dyn Fn(&PairScore) -> [f64; 2]| cell.iter().map(|s| f(s).iter().sum::<f64>()).sum::<f64>() / n;
                rows.push(BenchRow {
                    method: m.name().to_string(),
                    noise_type,
                    snr_db,
                    si_sdr_mix: mean(&|s| s.si_sdr_mix),
                    si_sdr_est: mean(&|s| s.si_sdr_est),
                    improvement: mean(&|s| s.improvement),
                });
            }
        }
    }
    Ok(EvalReport { rows, utterances })
}
