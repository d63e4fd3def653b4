//! Conditional variational model of clean-speech spectrogram variance.
//!
//! A visual front end maps a raw per-frame embedding to features `m`. The
//! decoder maps `(z, m)` to per-bin variances of a proper complex Gaussian,
//! the prior network maps `m` to a diagonal Gaussian over `z`, and the encoder
//! maps a (mixture) power frame together with `m` to the approximate
//! posterior over `z`.

pub mod checkpoint;
mod model;
mod net;
mod train;

pub use checkpoint::{load_model, save_model, Checkpoint};
pub use model::{CvaeModel, LossWeights, ModelDims, TrainingFrame};
pub use net::{variance_head, Activation, Dense, DenseNet, OutputHead, Trace};
pub use train::{finetune_decoder, train, Adam, TrainConfig, TrainReport};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian `N(mean, diag(variance))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussDiag {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussDiag {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Dimension(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Data("variances must be positive and finite".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(z)
            .map(|((m, v), z)| -0.5 * (2.0 * PI * v).ln() - (z - m) * (z - m) / (2.0 * v))
            .sum()
    }

    /// `mean + sqrt(variance) * eps` for a given standard-normal draw.
    pub fn shift(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect()
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Reparameterized draw `z = mean + sqrt(variance) * eps`, `eps ~ N(0, I)`.
pub fn reparam_sample<R: Rng + ?Sized>(g: &GaussDiag, rng: &mut R) -> Vec<f64> {
    let eps = standard_normal_vec(g.dim(), rng);
    g.shift(&eps)
}

/// `KL(q || p)` between diagonal Gaussians.
pub fn kl_gauss_diag(q: &GaussDiag, p: &GaussDiag) -> f64 {
    let mut acc = 0.0;
    for l in 0..q.dim() {
        let (vq, vp) = (q.variance[l], p.variance[l]);
        let d = q.mean[l] - p.mean[l];
        acc += (vp / vq).ln() + (vq + d * d) / vp - 1.0;
    }
    // Rounding can leave a tiny negative residue when q == p.
    (0.5 * acc).max(0.0)
}

/// Log-density of a power frame under independent proper complex Gaussians
/// with the given variances.
pub fn recon_loglik(power_frame: &[f64], variances: &[f64]) -> f64 {
    power_frame
        .iter()
        .zip(variances)
        .map(|(p, v)| -(PI * v).ln() - p / v)
        .sum()
}
