//! Time/frequency transforms.
//!
//! Frames are laid out frame-major: the `F` one-sided coefficients of frame
//! `n` are contiguous. The analysis and synthesis windows are both the
//! periodic square-root Hann window, so with `fft_size / hop >= 2` the
//! squared windows overlap-add to the constant `fft_size / (2 * hop)`.

mod wav;

pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use std::ops::{Add, Mul};

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Pads with zeros or truncates to exactly `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

impl Add for &Waveform {
    type Output = Waveform;

    /// Sample-wise sum; the shorter signal is zero-extended.
    fn add(self, rhs: &Waveform) -> Waveform {
        let len = self.len().max(rhs.len());
        let samples = (0..len)
            .map(|i| self.samples.get(i).unwrap_or(&0.0) + rhs.samples.get(i).unwrap_or(&0.0))
            .collect();
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            fft_size,
            hop,
            window: Window::SqrtHann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 64 ms window at 16 kHz (F = 513), 50% overlap.
    pub fn wideband() -> Self {
        Self {
            fft_size: 1024,
            hop: 512,
            window: Window::SqrtHann,
        }
    }

    /// 8 ms window (F = 65) used by the desk-scale pipeline and tests.
    pub fn desk() -> Self {
        Self {
            fft_size: 128,
            hop: 64,
            window: Window::SqrtHann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size must be even and >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!(
                "hop must satisfy 0 < hop <= fft_size, got {}",
                self.hop
            )));
        }
        // COLA for the squared sqrt-Hann window needs an integer overlap factor >= 2.
        if self.fft_size % self.hop != 0 || self.fft_size / self.hop < 2 {
            return Err(Error::Config(format!(
                "hop {} does not give constant overlap-add for fft_size {}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    fn pad(&self) -> usize {
        self.fft_size - self.hop
    }

    /// Number of frames produced for a signal of `len` samples. Every sample
    /// is covered by `fft_size / hop` frames.
    pub fn frame_count(&self, len: usize) -> usize {
        (len + self.pad()).div_ceil(self.hop)
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.fft_size as f64;
        match self.window {
            Window::SqrtHann => (0..self.fft_size)
                .map(|k| (std::f64::consts::PI * k as f64 / n).sin())
                .collect(),
        }
    }

    /// Constant value of the overlap-added squared window.
    fn ola_gain(&self) -> f64 {
        (self.fft_size / self.hop) as f64 / 2.0
    }

    /// Centre time of frame `n` in samples relative to the original signal.
    pub fn frame_center(&self, n: usize) -> f64 {
        (n * self.hop) as f64 - self.pad() as f64 + self.fft_size as f64 / 2.0
    }
}

/// One-sided complex STFT, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    bins: usize,
    frames: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            data: vec![Complex64::new(0.0, 0.0); bins * frames],
        }
    }

    pub fn from_vec(bins: usize, frames: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != bins * frames {
            return Err(Error::Dimension(format!(
                "{} coefficients for a {bins}x{frames} spectrogram",
                data.len()
            )));
        }
        Ok(Self { bins, frames, data })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, f: usize, n: usize) -> Complex64 {
        self.data[n * self.bins + f]
    }

    pub fn set(&mut self, f: usize, n: usize, value: Complex64) {
        self.data[n * self.bins + f] = value;
    }

    pub fn frame(&self, n: usize) -> &[Complex64] {
        &self.data[n * self.bins..(n + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, n: usize) -> &mut [Complex64] {
        &mut self.data[n * self.bins..(n + 1) * self.bins]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Multiplies every coefficient by a real mask of the same shape.
    pub fn masked(&self, mask: &[f64]) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::Dimension("mask shape differs from spectrogram".into()));
        }
        Ok(Self {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().zip(mask).map(|(v, m)| v * m).collect(),
        })
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

impl Add for &ComplexSpectrogram {
    type Output = ComplexSpectrogram;

    fn add(self, rhs: &ComplexSpectrogram) -> ComplexSpectrogram {
        assert_eq!((self.bins, self.frames), (rhs.bins, rhs.frames));
        ComplexSpectrogram {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Mul<f64> for &ComplexSpectrogram {
    type Output = ComplexSpectrogram;

    fn mul(self, rhs: f64) -> ComplexSpectrogram {
        self.scaled(rhs)
    }
}

/// Entrywise squared modulus of a spectrogram, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    bins: usize,
    frames: usize,
    data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn from_vec(bins: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bins * frames {
            return Err(Error::Dimension(format!(
                "{} values for a {bins}x{frames} power spectrogram",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(
                "power spectrogram entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { bins, frames, data })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, f: usize, n: usize) -> f64 {
        self.data[n * self.bins + f]
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        &self.data[n * self.bins..(n + 1) * self.bins]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.len() < cfg.fft_size {
        return Err(Error::InputTooShort {
            len: w.len(),
            min: cfg.fft_size,
        });
    }
    let n_fft = cfg.fft_size;
    let bins = cfg.bins();
    let frames = cfg.frame_count(w.len());
    let pad = cfg.pad();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut data = Vec::with_capacity(bins * frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for n in 0..frames {
        let start = (n * cfg.hop) as isize - pad as isize;
        for (k, slot) in buf.iter_mut().enumerate() {
            let t = start + k as isize;
            let x = if t >= 0 && (t as usize) < w.len() {
                w.samples[t as usize]
            } else {
                0.0
            };
            *slot = Complex64::new(x * window[k], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram { bins, frames, data })
}

/// Overlap-add synthesis, truncated or zero-padded to `length` samples.
pub fn istft(s: &ComplexSpectrogram, cfg: &StftConfig, length: usize) -> Result<Waveform> {
    cfg.validate()?;
    if s.bins != cfg.bins() {
        return Err(Error::Dimension(format!(
            "spectrogram has {} bins, config expects {}",
            s.bins,
            cfg.bins()
        )));
    }
    let n_fft = cfg.fft_size;
    let pad = cfg.pad();
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let scale = 1.0 / (n_fft as f64 * cfg.ola_gain());

    let total = if s.frames == 0 {
        0
    } else {
        (s.frames - 1) * cfg.hop + n_fft
    };
    let mut acc = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for n in 0..s.frames {
        let frame = s.frame(n);
        buf[..s.bins].copy_from_slice(frame);
        for k in s.bins..n_fft {
            buf[k] = frame[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = n * cfg.hop;
        for (k, v) in buf.iter().enumerate() {
            acc[start + k] += v.re * window[k] * scale;
        }
    }
    let samples = (0..length)
        .map(|t| acc.get(t + pad).copied().unwrap_or(0.0))
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

pub fn power(s: &ComplexSpectrogram) -> PowerSpectrogram {
    PowerSpectrogram {
        bins: s.bins,
        frames: s.frames,
        data: s.data.iter().map(|v| v.norm_sqr()).collect(),
    }
}
