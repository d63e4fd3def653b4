//! Posterior-mean source reconstruction from the retained MCEM samples.

use rand::Rng;

use crate::dsp::{istft, stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{ensure_finite, Error, Result};
use crate::mcem::{estep_with, run_mcem, LatentPair, McemConfig, ModelPair, SeparationState, TraceRow};

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEstimate {
    /// Scaled clean-speech estimate; the frame gain is not undone.
    pub spectrogram: ComplexSpectrogram,
    pub waveform: Waveform,
}

/// Spectral estimates of both speakers and the residual noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimates {
    pub speech: [ComplexSpectrogram; 2],
    pub noise: ComplexSpectrogram,
}

#[derive(Debug, Clone)]
pub struct Separation {
    pub sources: [SourceEstimate; 2],
    pub trace: Vec<TraceRow>,
    pub state: SeparationState,
}

/// Wiener coefficients of speaker 1, speaker 2 and the noise for frame `n`
/// at one latent sample. The three vectors sum to 1 in every bin.
pub fn wiener_gains(state: &SeparationState, n: usize, sample: &LatentPair) -> Result<[Vec<f64>; 3]> {
    let noise = state.noise.noise_variance(n)?;
    let g = [state.gains[0][n], state.gains[1][n]];
    let bins = noise.len();
    let mut out = [vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]];
    for f in 0..bins {
        let a = g[0] * sample.var[0][f];
        let b = g[1] * sample.var[1][f];
        let total = a + b + noise[f];
        out[0][f] = a / total;
        out[1][f] = b / total;
        out[2][f] = noise[f] / total;
    }
    Ok(out)
}

/// Wiener coefficient of `speaker` (0 or 1) for frame `n` at latent codes
/// `z1`, `z2`.
pub fn wiener_gain(
    state: &SeparationState,
    models: ModelPair,
    n: usize,
    z1: &[f64],
    z2: &[f64],
    speaker: usize,
) -> Result<Vec<f64>> {
    if speaker > 1 {
        return Err(Error::Config(format!("speaker index {speaker} out of range")));
    }
    let sample = LatentPair {
        var: [models[0].decode(z1, &state.visual[0][n])?, models[1].decode(z2, &state.visual[1][n])?],
        z: [z1.to_vec(), z2.to_vec()],
    };
    let [a, b, _] = wiener_gains(state, n, &sample)?;
    Ok(if speaker == 0 { a } else { b })
}

/// Averages the Wiener coefficients over the retained samples and applies
/// them to the observation.
pub fn estimate_spectrograms(x: &ComplexSpectrogram, state: &SeparationState) -> Result<SpectralEstimates> {
    if state.frames() != x.frames() || state.noise.bins() != x.bins() {
        return Err(Error::Dimension("state does not match the mixture".into()));
    }
    let mut out = SpectralEstimates {
        speech: [
            ComplexSpectrogram::zeros(x.bins(), x.frames()),
            ComplexSpectrogram::zeros(x.bins(), x.frames()),
        ],
        noise: ComplexSpectrogram::zeros(x.bins(), x.frames()),
    };
    for n in 0..x.frames() {
        let samples = &state.samples[n];
        if samples.is_empty() {
            return Err(Error::Data("empty sample buffer".into()));
        }
        let r = samples.len() as f64;
        let mut mean = [vec![0.0; x.bins()], vec![0.0; x.bins()], vec![0.0; x.bins()]];
        for s in samples {
            let g = wiener_gains(state, n, s)?;
            for k in 0..3 {
                for (m, gi) in mean[k].iter_mut().zip(&g[k]) {
                    *m += gi;
                }
            }
        }
        let xn = x.frame(n);
        let [s0, s1] = &mut out.speech;
        let targets = [s0, s1, &mut out.noise];
        for (k, target) in targets.into_iter().enumerate() {
            for (f, y) in target.frame_mut(n).iter_mut().enumerate() {
                *y = xn[f] * (mean[k][f] / r);
            }
        }
    }
    Ok(out)
}

/// Posterior-mean estimates of both scaled sources, with waveforms of
/// `length` samples.
pub fn estimate_sources(
    x: &ComplexSpectrogram,
    state: &SeparationState,
    stft_cfg: &StftConfig,
    length: usize,
    sample_rate: u32,
) -> Result<[SourceEstimate; 2]> {
    let [s1, s2] = estimate_spectrograms(x, state)?.speech;
    let make = |s: ComplexSpectrogram| -> Result<SourceEstimate> {
        let w = istft(&s, stft_cfg, length)?;
        Ok(SourceEstimate {
            spectrogram: s,
            waveform: Waveform::new(w.samples, sample_rate)?,
        })
    };
    Ok([make(s1)?, make(s2)?])
}

/// STFT, Monte-Carlo EM, posterior-mean estimation and resynthesis.
pub fn separate<R: Rng + ?Sized>(
    mix: &Waveform,
    visual: [&[Vec<f64>]; 2],
    models: ModelPair,
    stft_cfg: &StftConfig,
    mcem_cfg: &McemConfig,
    rng: &mut R,
) -> Result<Separation> {
    let x = stft(mix, stft_cfg)?;
    let run = run_mcem(&x, visual, models, mcem_cfg, rng)?;
    let mut state = run.state;
    if mcem_cfg.final_sweeps > 0 {
        let sweeps = mcem_cfg.final_sweeps;
        let burn_in = (sweeps - mcem_cfg.samples).min(sweeps / 2);
        estep_with(&mut state, models, &x, sweeps, burn_in, mcem_cfg.samples, mcem_cfg.epsilon, rng)?;
    }
    let sources = estimate_sources(&x, &state, stft_cfg, mix.len(), mix.sample_rate)?;
    for s in &sources {
        ensure_finite(&s.waveform.samples, "separated output")?;
    }
    Ok(Separation {
        sources,
        trace: run.trace,
        state,
    })
}
