//! Test-time inference: the two-speaker mixture model and its Monte-Carlo
//! EM fit.
//!
//! The observed frame `x_n` is a zero-mean proper complex Gaussian with
//! per-bin variance `g1_n σ(z1_n, v1_n) + g2_n σ(z2_n, v2_n) + (W H)_n`.
//! The E-step samples latent pairs per frame with a random-walk
//! Metropolis-Hastings chain; the M-step applies square-root
//! multiplicative updates to `H`, `W` and the two gain vectors.

mod config;

pub use config::McemConfig;

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nmf::{frame_major, NmfModel};
use crate::vae::{standard_normal_vec, CvaeModel, GaussDiag};

/// Decoders used for speaker 1 and speaker 2. Both entries point at the
/// same model in the speaker-independent setting.
pub type ModelPair<'a> = [&'a CvaeModel; 2];

/// Latent codes of both speakers for one frame, with their decoded
/// variances cached.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub z: [Vec<f64>; 2],
    pub var: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationState {
    pub noise: NmfModel,
    pub gains: [Vec<f64>; 2],
    /// Current chain position per frame.
    pub chains: Vec<LatentPair>,
    /// Retained samples per frame from the latest E-step.
    pub samples: Vec<Vec<LatentPair>>,
    /// Raw visual embeddings per speaker per frame.
    pub visual: [Vec<Vec<f64>>; 2],
    features: [Vec<Vec<f64>>; 2],
    priors: [Vec<GaussDiag>; 2],
    pub variance_floor: f64,
    pub gain_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats {
    pub accepted: usize,
    pub proposed: usize,
}

impl SweepStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub q: f64,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone)]
pub struct McemRun {
    pub state: SeparationState,
    pub trace: Vec<TraceRow>,
}

fn check_models(models: ModelPair, bins: usize) -> Result<()> {
    let [a, b] = models;
    if a.bins() != bins || b.bins() != bins {
        return Err(Error::Dimension(format!(
            "model has {}/{} bins, mixture has {bins}",
            a.bins(),
            b.bins()
        )));
    }
    if a.latent_dim() != b.latent_dim() || a.raw_visual_dim() != b.raw_visual_dim() {
        return Err(Error::Dimension("speaker models disagree on dimensions".into()));
    }
    Ok(())
}

/// `g1 σ1 + g2 σ2 + noise`, floored.
fn combine(gains: [f64; 2], var: [&[f64]; 2], noise: &[f64], floor: f64) -> Vec<f64> {
    noise
        .iter()
        .enumerate()
        .map(|(f, b)| (gains[0] * var[0][f] + gains[1] * var[1][f] + b).max(floor))
        .collect()
}

impl SeparationState {
    /// Chains start at the prior means, gains at 1, `W` and `H` uniform in
    /// `[0.1, 1.1)`.
    pub fn init<R: Rng + ?Sized>(
        x: &ComplexSpectrogram,
        visual: [&[Vec<f64>]; 2],
        models: ModelPair,
        cfg: &McemConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        check_models(models, x.bins())?;
        let frames = x.frames();
        for (i, v) in visual.iter().enumerate() {
            if v.len() != frames {
                return Err(Error::Dimension(format!(
                    "speaker {} has {} embeddings for {frames} frames",
                    i + 1,
                    v.len()
                )));
            }
        }
        let mut features: [Vec<Vec<f64>>; 2] = Default::default();
        let mut priors: [Vec<GaussDiag>; 2] = Default::default();
        for i in 0..2 {
            for v in visual[i] {
                let m = models[i].visual_features(v)?;
                priors[i].push(models[i].prior_with_features(&m)?);
                features[i].push(m);
            }
        }
        let chains = (0..frames)
            .map(|n| {
                let z = [priors[0][n].mean.clone(), priors[1][n].mean.clone()];
                let var = [
                    models[0].decode_with_features(&z[0], &features[0][n])?,
                    models[1].decode_with_features(&z[1], &features[1][n])?,
                ];
                Ok(LatentPair { z, var })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            noise: NmfModel::random(x.bins(), cfg.noise_rank, frames, rng),
            gains: [vec![1.0; frames], vec![1.0; frames]],
            chains,
            samples: vec![Vec::new(); frames],
            visual: [visual[0].to_vec(), visual[1].to_vec()],
            features,
            priors,
            variance_floor: cfg.variance_floor,
            gain_floor: cfg.gain_floor,
        })
    }

    pub fn frames(&self) -> usize {
        self.chains.len()
    }

    pub fn prior(&self, speaker: usize, n: usize) -> &GaussDiag {
        &self.priors[speaker][n]
    }

    /// Noise variances `W H`, frame-major.
    fn noise_frame_major(&self) -> Vec<f64> {
        frame_major(&self.noise.product())
    }

    /// Mixture variance of frame `n` for precomputed speech variances.
    pub fn mixture_variance_from(&self, n: usize, var: [&[f64]; 2]) -> Result<Vec<f64>> {
        let noise = self.noise.noise_variance(n)?;
        Ok(combine(
            [self.gains[0][n], self.gains[1][n]],
            var,
            &noise,
            self.variance_floor,
        ))
    }

    /// Mixture variance of frame `n` at latent codes `z1`, `z2`.
    pub fn mixture_variance(&self, models: ModelPair, n: usize, z1: &[f64], z2: &[f64]) -> Result<Vec<f64>> {
        let v1 = models[0].decode_with_features(z1, &self.features[0][n])?;
        let v2 = models[1].decode_with_features(z2, &self.features[1][n])?;
        self.mixture_variance_from(n, [&v1, &v2])
    }

    /// Per-frame speech variance of a retained sample, as an `F x N` matrix
    /// (`speaker` in 0..2, sample index `r`).
    fn sample_speech(&self, speaker: usize, r: usize) -> Matrix {
        let bins = self.noise.bins();
        Matrix::from_fn(bins, self.frames(), |f, n| self.samples[n][r].var[speaker][f])
    }

    fn retained(&self) -> Result<usize> {
        let r = self.samples.first().map(Vec::len).unwrap_or(0);
        if r == 0 || self.samples.iter().any(|s| s.len() != r) {
            return Err(Error::Data("sample buffer is empty or ragged".into()));
        }
        Ok(r)
    }

    /// `V_x` of every retained sample, each `F x N`.
    fn sample_mixture_variances(&self) -> Result<Vec<Matrix>> {
        let r_count = self.retained()?;
        let wh = self.noise.product();
        Ok((0..r_count)
            .map(|r| {
                let s1 = self.sample_speech(0, r);
                let s2 = self.sample_speech(1, r);
                Matrix::from_fn(wh.rows(), wh.cols(), |f, n| {
                    (self.gains[0][n] * s1.get(f, n) + self.gains[1][n] * s2.get(f, n) + wh.get(f, n))
                        .max(self.variance_floor)
                })
            })
            .collect())
    }
}

/// `sum_f -ln(π V_f) - |x_f|^2 / V_f`.
pub fn mixture_loglik(x: &[Complex64], v: &[f64]) -> f64 {
    x.iter()
        .zip(v)
        .map(|(x, v)| -(PI * v).ln() - x.norm_sqr() / v)
        .sum()
}

/// One random-walk Metropolis-Hastings step for every frame. Frames use
/// independent generators derived from a single draw of `rng`, so results
/// do not depend on thread scheduling.
pub fn mh_sweep<R: Rng + ?Sized>(
    state: &mut SeparationState,
    models: ModelPair,
    x: &ComplexSpectrogram,
    epsilon: f64,
    rng: &mut R,
) -> Result<SweepStats> {
    let noise = state.noise_frame_major();
    sweep_with_noise(state, models, x, epsilon, &noise, rng.random())
}

fn sweep_with_noise(
    state: &mut SeparationState,
    models: ModelPair,
    x: &ComplexSpectrogram,
    epsilon: f64,
    noise: &[f64],
    seed: u64,
) -> Result<SweepStats> {
    let bins = x.bins();
    let floor = state.variance_floor;
    let gains = &state.gains;
    let features = &state.features;
    let priors = &state.priors;
    let accepted = state
        .chains
        .par_iter_mut()
        .enumerate()
        .map(|(n, chain)| -> Result<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let g = [gains[0][n], gains[1][n]];
            let b = &noise[n * bins..(n + 1) * bins];
            let xn = x.frame(n);
            let target = |z: &[Vec<f64>; 2], var: &[Vec<f64>; 2]| -> f64 {
                let v = combine(g, [&var[0], &var[1]], b, floor);
                mixture_loglik(xn, &v)
                    + priors[0][n].log_density(&z[0])
                    + priors[1][n].log_density(&z[1])
            };
            let current = target(&chain.z, &chain.var);
            let mut z_new: [Vec<f64>; 2] = Default::default();
            for (i, zi) in z_new.iter_mut().enumerate() {
                let xi = standard_normal_vec(chain.z[i].len(), &mut rng);
                *zi = chain.z[i].iter().zip(&xi).map(|(z, e)| z + epsilon * e).collect();
            }
            let var_new = [
                models[0].decode_with_features(&z_new[0], &features[0][n])?,
                models[1].decode_with_features(&z_new[1], &features[1][n])?,
            ];
            let log_ratio = target(&z_new, &var_new) - current;
            let u: f64 = rng.random();
            if u.ln() < log_ratio {
                chain.z = z_new;
                chain.var = var_new;
                Ok(1)
            } else {
                Ok(0)
            }
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(SweepStats {
        accepted,
        proposed: state.chains.len(),
    })
}

/// Runs `sweeps` sweeps, discards `burn_in`, and keeps `retain` states
/// thinned uniformly from the rest. Replaces the sample buffer.
pub fn estep_with<R: Rng + ?Sized>(
    state: &mut SeparationState,
    models: ModelPair,
    x: &ComplexSpectrogram,
    sweeps: usize,
    burn_in: usize,
    retain: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<SweepStats> {
    if retain == 0 || sweeps < burn_in + retain {
        return Err(Error::Config(format!(
            "cannot retain {retain} samples from {sweeps} sweeps with burn-in {burn_in}"
        )));
    }
    let thin = (sweeps - burn_in) / retain;
    let noise = state.noise_frame_major();
    let mut buffers: Vec<Vec<LatentPair>> = vec![Vec::with_capacity(retain); state.frames()];
    let mut total = SweepStats {
        accepted: 0,
        proposed: 0,
    };
    for s in 0..sweeps {
        let stats = sweep_with_noise(state, models, x, epsilon, &noise, rng.random())?;
        total.accepted += stats.accepted;
        total.proposed += stats.proposed;
        if s >= burn_in && (s + 1 - burn_in) % thin == 0 && buffers[0].len() < retain {
            for (buf, chain) in buffers.iter_mut().zip(&state.chains) {
                buf.push(chain.clone());
            }
        }
    }
    state.samples = buffers;
    Ok(total)
}

/// E-step with the schedule from `cfg` (`first` selects the initial,
/// longer schedule).
pub fn estep<R: Rng + ?Sized>(
    state: &mut SeparationState,
    models: ModelPair,
    x: &ComplexSpectrogram,
    cfg: &McemConfig,
    first: bool,
    rng: &mut R,
) -> Result<SweepStats> {
    let (sweeps, burn_in) = if first {
        (cfg.mh_iters_first, cfg.burn_in_first)
    } else {
        (cfg.mh_iters, cfg.burn_in)
    };
    estep_with(state, models, x, sweeps, burn_in, cfg.samples, cfg.epsilon, rng)
}

/// `A = sum_r |X|^2 / V_r^2` (as `(P / V) / V`) and `B = sum_r 1 / V_r`.
fn ratio_sums(power: &Matrix, vx: &[Matrix]) -> (Matrix, Matrix) {
    let (rows, cols) = power.shape();
    let mut a = Matrix::zeros(rows, cols);
    let mut b = Matrix::zeros(rows, cols);
    for v in vx {
        for i in 0..rows * cols {
            let (p, vi) = (power.as_slice()[i], v.as_slice()[i]);
            a.as_mut_slice()[i] += (p / vi) / vi;
            b.as_mut_slice()[i] += 1.0 / vi;
        }
    }
    (a, b)
}

fn power_of(x: &ComplexSpectrogram) -> Matrix {
    Matrix::from_fn(x.bins(), x.frames(), |f, n| x.get(f, n).norm_sqr())
}

/// Updates `H`; returns the multipliers applied (before flooring).
pub fn mstep_h(state: &mut SeparationState, x: &ComplexSpectrogram) -> Result<Matrix> {
    let (a, b) = ratio_sums(&power_of(x), &state.sample_mixture_variances()?);
    let wt = state.noise.w.transpose();
    let num = wt.matmul(&a);
    let den = wt.matmul(&b);
    let mult = Matrix::from_fn(num.rows(), num.cols(), |k, n| (num.get(k, n) / den.get(k, n)).sqrt());
    for (h, m) in state.noise.h.as_mut_slice().iter_mut().zip(mult.as_slice()) {
        *h *= m;
    }
    state.noise.apply_floor();
    Ok(mult)
}

/// Updates `W`; returns the multipliers applied (before flooring).
pub fn mstep_w(state: &mut SeparationState, x: &ComplexSpectrogram) -> Result<Matrix> {
    let (a, b) = ratio_sums(&power_of(x), &state.sample_mixture_variances()?);
    let ht = state.noise.h.transpose();
    let num = a.matmul(&ht);
    let den = b.matmul(&ht);
    let mult = Matrix::from_fn(num.rows(), num.cols(), |f, k| (num.get(f, k) / den.get(f, k)).sqrt());
    for (w, m) in state.noise.w.as_mut_slice().iter_mut().zip(mult.as_slice()) {
        *w *= m;
    }
    state.noise.apply_floor();
    Ok(mult)
}

/// Updates the gains of `speaker` (0 or 1); returns the multipliers.
pub fn mstep_gains(state: &mut SeparationState, x: &ComplexSpectrogram, speaker: usize) -> Result<Vec<f64>> {
    if speaker > 1 {
        return Err(Error::Config(format!(
            "speaker index {speaker} out of range (expected 0 or 1)"
        )));
    }
    let vx = state.sample_mixture_variances()?;
    let power = power_of(x);
    let bins = x.bins();
    let mut mult = Vec::with_capacity(state.frames());
    for n in 0..state.frames() {
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, v) in vx.iter().enumerate() {
            let s = &state.samples[n][r].var[speaker];
            for f in 0..bins {
                let vi = v.get(f, n);
                num += s[f] * ((power.get(f, n) / vi) / vi);
                den += s[f] * (1.0 / vi);
            }
        }
        mult.push((num / den).sqrt());
    }
    let floor = state.gain_floor;
    for (g, m) in state.gains[speaker].iter_mut().zip(&mult) {
        *g = (*g * m).max(floor);
    }
    Ok(mult)
}

/// Monte-Carlo estimate of the expected complete log-likelihood: the
/// mixture log-likelihood summed over frames, averaged over samples.
pub fn q_value(state: &SeparationState, x: &ComplexSpectrogram) -> Result<f64> {
    let vx = state.sample_mixture_variances()?;
    let r = vx.len() as f64;
    let mut total = 0.0;
    for v in &vx {
        for n in 0..x.frames() {
            let col: Vec<f64> = v.column(n);
            total += mixture_loglik(x.frame(n), &col);
        }
    }
    Ok(total / r)
}

/// Full Monte-Carlo EM: alternates E-steps (warm-started chains) and the
/// four multiplicative M-step updates, recording Q after every iteration.
pub fn run_mcem<R: Rng + ?Sized>(
    x: &ComplexSpectrogram,
    visual: [&[Vec<f64>]; 2],
    models: ModelPair,
    cfg: &McemConfig,
    rng: &mut R,
) -> Result<McemRun> {
    let mut state = SeparationState::init(x, visual, models, cfg, rng)?;
    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.em_iters);
    for it in 0..cfg.em_iters {
        let stats = estep(&mut state, models, x, cfg, it == 0, rng)?;
        mstep_h(&mut state, x)?;
        mstep_w(&mut state, x)?;
        mstep_gains(&mut state, x, 0)?;
        mstep_gains(&mut state, x, 1)?;
        let q = q_value(&state, x)?;
        if !q.is_finite() {
            return Err(Error::Numerical(format!("Q became non-finite at iteration {it}")));
        }
        let converged = trace
            .last()
            .is_some_and(|prev| (q - prev.q).abs() <= cfg.tolerance * prev.q.abs());
        trace.push(TraceRow {
            iteration: it,
            q,
            acceptance_rate: stats.rate(),
        });
        if converged {
            break;
        }
    }
    Ok(McemRun { state, trace })
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,q,acceptance_rate")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.iteration, r.q, r.acceptance_rate)?;
    }
    Ok(())
}
