use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{CvaeModel, LossWeights, TrainingFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            learning_rate: 1e-4,
            epochs: 45,
            batch_size: 256,
            seed: 0,
            variance_floor: super::DEFAULT_VARIANCE_FLOOR,
        }
    }
}

impl TrainConfig {
    /// Settings for desk-scale corpora of a few thousand frames.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut k = 0;
        for (p_blk, g_blk) in params.into_iter().zip(grads) {
            for (p, g) in p_blk.iter_mut().zip(g_blk) {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[k] / c1;
                let v_hat = self.v[k] / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        }
        debug_assert_eq!(k, self.m.len());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-frame loss of each epoch, measured during the epoch.
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Scope {
    All,
    DecoderOnly,
}

fn run_epochs(
    model: &mut CvaeModel,
    corpus: &[TrainingFrame],
    cfg: &TrainConfig,
    scope: Scope,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let weights = LossWeights::from_alpha(cfg.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = match scope {
        Scope::All => model.param_count(),
        Scope::DecoderOnly => model.decoder.param_count(),
    };
    let mut adam = Adam::new(count, cfg.learning_rate);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingFrame> = idx.iter().map(|&i| corpus[i].clone()).collect();
            let noise = model.draw_noise(batch.len(), &mut rng);
            let (loss, grad) = model.grad_with_noise(&batch, weights, &noise)?;
            if !loss.is_finite() {
                return Err(Error::Numerical("training loss became non-finite".into()));
            }
            epoch_total += loss * batch.len() as f64;
            match scope {
                Scope::All => adam.update(model.param_blocks_mut(), grad.param_blocks()),
                Scope::DecoderOnly => {
                    adam.update(model.decoder.param_blocks_mut(), grad.decoder.param_blocks())
                }
            }
        }
        trace.push(epoch_total / corpus.len() as f64);
    }
    if !model.is_finite() {
        return Err(Error::Numerical("model parameters became non-finite".into()));
    }
    Ok(TrainReport { loss_trace: trace })
}

/// Trains every network jointly with Adam. Deterministic in `cfg.seed`.
pub fn train(
    mut model: CvaeModel,
    corpus: &[TrainingFrame],
    cfg: &TrainConfig,
) -> Result<(CvaeModel, TrainReport)> {
    let report = run_epochs(&mut model, corpus, cfg, Scope::All)?;
    Ok((model, report))
}

/// Updates only the decoder on one speaker's frames; encoder, prior and
/// visual front end are left bit-identical.
pub fn finetune_decoder(
    mut model: CvaeModel,
    speaker_corpus: &[TrainingFrame],
    cfg: &TrainConfig,
) -> Result<(CvaeModel, TrainReport)> {
    let report = run_epochs(&mut model, speaker_corpus, cfg, Scope::DecoderOnly)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::{recon_loglik, ModelDims};
    use rand::Rng;

    fn dims() -> ModelDims {
        ModelDims {
            bins: 8,
            latent: 2,
            visual: 3,
            visual_raw: 4,
            hidden: vec![12],
        }
    }

    /// Two "speakers" with different spectral shapes; the embedding carries
    /// the speaker identity and a loudness cue.
    fn corpus(n: usize, seed: u64, speaker: Option<usize>) -> Vec<TrainingFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let spk = speaker.unwrap_or(i % 2);
                let level: f64 = rng.random_range(0.2..2.0);
                let clean: Vec<f64> = (0..8)
                    .map(|f| {
                        let shape = if (f < 4) == (spk == 0) { 1.0 } else { 0.01 };
                        let e: f64 = rng.random_range(0.0f64..1.0).max(1e-12);
                        -shape * level * e.ln()
                    })
                    .collect();
                let mix = clean.iter().map(|c| c + rng.random_range(0.0..0.5)).collect();
                let mut visual = vec![0.0; 4];
                visual[spk] = 1.0;
                visual[2] = level;
                TrainingFrame {
                    mix_power: mix,
                    clean_power: clean,
                    visual,
                }
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            alpha: 0.9,
            learning_rate: 1e-2,
            epochs,
            batch_size: 32,
            seed: 3,
            variance_floor: 1e-6,
        }
    }

    #[test]
    fn loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CvaeModel::new(&dims(), 1e-6, &mut rng).unwrap();
        let (_, report) = train(model, &corpus(256, 2, None), &cfg(20)).unwrap();
        let t = &report.loss_trace;
        assert_eq!(t.len(), 20);
        assert!(t[t.len() - 1] < t[0], "{t:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CvaeModel::new(&dims(), 1e-6, &mut rng).unwrap();
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg(2)
        };
        let (trained, _) = train(model.clone(), &corpus(64, 2, None), &c).unwrap();
        assert_eq!(trained, model);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CvaeModel::new(&dims(), 1e-6, &mut rng).unwrap();
        let data = corpus(100, 2, None);
        let (a, ra) = train(model.clone(), &data, &cfg(3)).unwrap();
        let (b, rb) = train(model, &data, &cfg(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn empty_corpus_and_bad_alpha_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CvaeModel::new(&dims(), 1e-6, &mut rng).unwrap();
        assert!(matches!(train(model.clone(), &[], &cfg(1)), Err(Error::Data(_))));
        assert!(finetune_decoder(model.clone(), &[], &cfg(1)).is_err());
        let bad = TrainConfig { alpha: 1.5, ..cfg(1) };
        assert!(matches!(train(model, &corpus(4, 1, None), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn finetune_freezes_everything_but_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CvaeModel::new(&dims(), 1e-6, &mut rng).unwrap();
        let (tuned, _) = finetune_decoder(model.clone(), &corpus(64, 5, Some(0)), &cfg(1)).unwrap();
        assert_eq!(tuned.frontend, model.frontend);
        assert_eq!(tuned.encoder, model.encoder);
        assert_eq!(tuned.prior_net, model.prior_net);
        assert_ne!(tuned.decoder, model.decoder);

        let (same, _) = finetune_decoder(model.clone(), &corpus(64, 5, Some(0)), &cfg(0)).unwrap();
        assert_eq!(same, model);
    }

    #[test]
    fn finetune_improves_speaker_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CvaeModel::new(&dims(), 1e-6, &mut rng).unwrap();
        let (generic, _) = train(model, &corpus(512, 2, None), &cfg(5)).unwrap();
        let (tuned, _) = finetune_decoder(
            generic.clone(),
            &corpus(512, 7, Some(1)),
            &TrainConfig { epochs: 2, ..cfg(2) },
        )
        .unwrap();
        let held_out = corpus(200, 99, Some(1));
        let score = |m: &CvaeModel| -> f64 {
            held_out
                .iter()
                .map(|fr| {
                    let q = m.encode(&fr.mix_power, &fr.visual).unwrap();
                    recon_loglik(&fr.clean_power, &m.decode(&q.mean, &fr.visual).unwrap())
                })
                .sum::<f64>()
        };
        assert!(score(&tuned) > score(&generic));
    }
}
