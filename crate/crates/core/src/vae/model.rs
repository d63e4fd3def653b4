use rand::Rng;
use rayon::prelude::*;

use super::net::{variance_head, Activation, DenseNet, OutputHead};
use super::{kl_gauss_diag, recon_loglik, standard_normal_vec, GaussDiag};
use crate::error::{Error, Result};

/// Offset inside the log compression applied to encoder power inputs.
const ENCODER_LOG_OFFSET: f64 = 1e-6;
const ENCODER_LOG_SCALE: f64 = 0.1;

/// Frames per gradient work unit; fixes the floating-point reduction order.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Frequency bins `F`.
    pub bins: usize,
    /// Latent dimension `L`.
    pub latent: usize,
    /// Visual feature dimension `M`.
    pub visual: usize,
    /// Raw visual embedding dimension.
    pub visual_raw: usize,
    /// Hidden layer widths shared by all four networks.
    pub hidden: Vec<usize>,
}

impl ModelDims {
    pub fn desk(bins: usize) -> Self {
        Self {
            bins,
            latent: 16,
            visual: 8,
            visual_raw: 16,
            hidden: vec![64],
        }
    }

    /// 513 bins and a 128-dimensional latent space.
    pub fn wideband() -> Self {
        Self {
            bins: 513,
            latent: 128,
            visual: 8,
            visual_raw: 16,
            hidden: vec![64],
        }
    }

    fn net_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.hidden);
        d.push(output);
        d
    }
}

/// One training example: encoder input, reconstruction target, embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFrame {
    pub mix_power: Vec<f64>,
    pub clean_power: Vec<f64>,
    pub visual: Vec<f64>,
}

/// Coefficients of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon_posterior: f64,
    pub recon_prior: f64,
    pub kl: f64,
}

impl LossWeights {
    pub fn from_alpha(alpha: f64) -> Self {
        Self {
            recon_posterior: alpha,
            recon_prior: 1.0 - alpha,
            kl: alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub frontend: DenseNet,
    pub encoder: DenseNet,
    pub prior_net: DenseNet,
    pub decoder: DenseNet,
    pub variance_floor: f64,
}

fn split_gauss(raw: &[f64], floor: f64) -> GaussDiag {
    let l = raw.len() / 2;
    GaussDiag {
        mean: raw[..l].to_vec(),
        variance: raw[l..].iter().map(|&y| variance_head(y, floor).0).collect(),
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

impl CvaeModel {
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, variance_floor: f64, rng: &mut R) -> Result<Self> {
        if dims.bins == 0 || dims.latent == 0 || dims.visual == 0 || dims.visual_raw == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(variance_floor > 0.0 && variance_floor.is_finite()) {
            return Err(Error::Config("variance_floor must be positive".into()));
        }
        let (f, l, m) = (dims.bins, dims.latent, dims.visual);
        let frontend = DenseNet::new(
            &dims.net_dims(dims.visual_raw, m),
            Activation::Tanh,
            OutputHead::Plain,
            rng,
        );
        let encoder = DenseNet::new(
            &dims.net_dims(f + m, 2 * l),
            Activation::Tanh,
            OutputHead::MeanLogVariance,
            rng,
        );
        let prior_net = DenseNet::new(
            &dims.net_dims(m, 2 * l),
            Activation::Tanh,
            OutputHead::MeanLogVariance,
            rng,
        );
        let decoder = DenseNet::new(
            &dims.net_dims(l + m, f),
            Activation::Tanh,
            OutputHead::LogVariance,
            rng,
        );
        Self::from_nets(frontend, encoder, prior_net, decoder, variance_floor)
    }

    /// Assembles a model from networks, checking that their shapes agree.
    pub fn from_nets(
        frontend: DenseNet,
        encoder: DenseNet,
        prior_net: DenseNet,
        decoder: DenseNet,
        variance_floor: f64,
    ) -> Result<Self> {
        let m = frontend.output_dim();
        let two_l = prior_net.output_dim();
        let f = decoder.output_dim();
        let dim_err = |what: &str| Err(Error::Dimension(what.to_string()));
        if two_l == 0 || two_l % 2 != 0 {
            return dim_err("prior network must output mean and log-variance halves");
        }
        let l = two_l / 2;
        if prior_net.input_dim() != m {
            return dim_err("prior network input differs from visual feature size");
        }
        if encoder.output_dim() != two_l || encoder.input_dim() != f + m {
            return dim_err("encoder shape inconsistent with F, L, M");
        }
        if decoder.input_dim() != l + m {
            return dim_err("decoder input differs from L + M");
        }
        if frontend.head != OutputHead::Plain
            || encoder.head != OutputHead::MeanLogVariance
            || prior_net.head != OutputHead::MeanLogVariance
            || decoder.head != OutputHead::LogVariance
        {
            return dim_err("unexpected output head");
        }
        if !(variance_floor > 0.0 && variance_floor.is_finite()) {
            return Err(Error::Config("variance_floor must be positive".into()));
        }
        Ok(Self {
            frontend,
            encoder,
            prior_net,
            decoder,
            variance_floor,
        })
    }

    pub fn dims(&self) -> ModelDims {
        let d = self.decoder.dims();
        ModelDims {
            bins: self.bins(),
            latent: self.latent_dim(),
            visual: self.visual_dim(),
            visual_raw: self.raw_visual_dim(),
            hidden: d[1..d.len() - 1].to_vec(),
        }
    }

    pub fn bins(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.prior_net.output_dim() / 2
    }

    pub fn visual_dim(&self) -> usize {
        self.frontend.output_dim()
    }

    pub fn raw_visual_dim(&self) -> usize {
        self.frontend.input_dim()
    }

    pub fn nets(&self) -> [&DenseNet; 4] {
        [&self.frontend, &self.encoder, &self.prior_net, &self.decoder]
    }

    pub fn nets_mut(&mut self) -> [&mut DenseNet; 4] {
        [
            &mut self.frontend,
            &mut self.encoder,
            &mut self.prior_net,
            &mut self.decoder,
        ]
    }

    /// Same shapes, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            frontend: self.frontend.zeros_like(),
            encoder: self.encoder.zeros_like(),
            prior_net: self.prior_net.zeros_like(),
            decoder: self.decoder.zeros_like(),
            variance_floor: self.variance_floor,
        }
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// All parameter blocks: front end, encoder, prior, decoder.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        self.nets().into_iter().flat_map(|n| n.param_blocks()).collect()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets_mut()
            .into_iter()
            .flat_map(|n| n.param_blocks_mut())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn add_scaled(&mut self, other: &CvaeModel, c: f64) {
        for (dst, src) in self.param_blocks_mut().into_iter().zip(other.param_blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        }
    }

    pub fn visual_features(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.frontend.forward(v)
    }

    pub fn decode(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let m = self.visual_features(v)?;
        self.decode_with_features(z, &m)
    }

    /// Decoder variances given precomputed visual features.
    pub fn decode_with_features(&self, z: &[f64], m: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latent has {} entries, model expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let raw = self.decoder.forward(&concat(z, m))?;
        Ok(raw
            .into_iter()
            .map(|y| variance_head(y, self.variance_floor).0)
            .collect())
    }

    fn encoder_input(&self, power_frame: &[f64], m: &[f64]) -> Result<Vec<f64>> {
        if power_frame.len() != self.bins() {
            return Err(Error::Dimension(format!(
                "power frame has {} bins, model expects {}",
                power_frame.len(),
                self.bins()
            )));
        }
        if power_frame.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Data(
                "power frame entries must be finite and nonnegative".into(),
            ));
        }
        let mut x: Vec<f64> = power_frame
            .iter()
            .map(|p| ENCODER_LOG_SCALE * (p + ENCODER_LOG_OFFSET).ln())
            .collect();
        x.extend_from_slice(m);
        Ok(x)
    }

    pub fn encode(&self, power_frame: &[f64], v: &[f64]) -> Result<GaussDiag> {
        let m = self.visual_features(v)?;
        let raw = self.encoder.forward(&self.encoder_input(power_frame, &m)?)?;
        Ok(split_gauss(&raw, self.variance_floor))
    }

    pub fn prior(&self, v: &[f64]) -> Result<GaussDiag> {
        let m = self.visual_features(v)?;
        self.prior_with_features(&m)
    }

    pub fn prior_with_features(&self, m: &[f64]) -> Result<GaussDiag> {
        let raw = self.prior_net.forward(m)?;
        Ok(split_gauss(&raw, self.variance_floor))
    }

    /// Negated training objective for one frame with a single
    /// reparameterized draw from the posterior and one from the prior.
    pub fn loss<R: Rng + ?Sized>(&self, frame: &TrainingFrame, alpha: f64, rng: &mut R) -> Result<f64> {
        let eps_q = standard_normal_vec(self.latent_dim(), rng);
        let eps_p = standard_normal_vec(self.latent_dim(), rng);
        self.loss_with_noise(frame, LossWeights::from_alpha(alpha), &eps_q, &eps_p)
    }

    pub fn loss_with_noise(
        &self,
        frame: &TrainingFrame,
        w: LossWeights,
        eps_q: &[f64],
        eps_p: &[f64],
    ) -> Result<f64> {
        let q = self.encode(&frame.mix_power, &frame.visual)?;
        let p = self.prior(&frame.visual)?;
        let m = self.visual_features(&frame.visual)?;
        let var_q = self.decode_with_features(&q.shift(eps_q), &m)?;
        let var_p = self.decode_with_features(&p.shift(eps_p), &m)?;
        Ok(-w.recon_posterior * recon_loglik(&frame.clean_power, &var_q)
            - w.recon_prior * recon_loglik(&frame.clean_power, &var_p)
            + w.kl * kl_gauss_diag(&q, &p))
    }

    /// Loss for one frame; parameter gradients are added into `grad`.
    pub fn loss_and_grad_with_noise(
        &self,
        frame: &TrainingFrame,
        w: LossWeights,
        eps_q: &[f64],
        eps_p: &[f64],
        grad: &mut CvaeModel,
    ) -> Result<f64> {
        let floor = self.variance_floor;
        let l = self.latent_dim();
        let f = self.bins();
        if frame.clean_power.len() != f {
            return Err(Error::Dimension("clean power frame size differs from F".into()));
        }

        let fe_trace = self.frontend.forward_trace(&frame.visual)?;
        let m = fe_trace.output().to_vec();
        let enc_trace = self
            .encoder
            .forward_trace(&self.encoder_input(&frame.mix_power, &m)?)?;
        let prior_trace = self.prior_net.forward_trace(&m)?;

        // Heads: (value, d value / d raw)
        let heads = |raw: &[f64]| -> (Vec<f64>, Vec<(f64, f64)>) {
            (
                raw[..l].to_vec(),
                raw[l..].iter().map(|&y| variance_head(y, floor)).collect(),
            )
        };
        let (mu_q, hq) = heads(enc_trace.output());
        let (mu_p, hp) = heads(prior_trace.output());
        let var_q: Vec<f64> = hq.iter().map(|h| h.0).collect();
        let var_p: Vec<f64> = hp.iter().map(|h| h.0).collect();

        let z_q: Vec<f64> = (0..l).map(|i| mu_q[i] + var_q[i].sqrt() * eps_q[i]).collect();
        let z_p: Vec<f64> = (0..l).map(|i| mu_p[i] + var_p[i].sqrt() * eps_p[i]).collect();

        let dec_q = self.decoder.forward_trace(&concat(&z_q, &m))?;
        let dec_p = self.decoder.forward_trace(&concat(&z_p, &m))?;
        let hs_q: Vec<(f64, f64)> = dec_q.output().iter().map(|&y| variance_head(y, floor)).collect();
        let hs_p: Vec<(f64, f64)> = dec_p.output().iter().map(|&y| variance_head(y, floor)).collect();
        let sig_q: Vec<f64> = hs_q.iter().map(|h| h.0).collect();
        let sig_p: Vec<f64> = hs_p.iter().map(|h| h.0).collect();

        let q = GaussDiag {
            mean: mu_q.clone(),
            variance: var_q.clone(),
        };
        let p = GaussDiag {
            mean: mu_p.clone(),
            variance: var_p.clone(),
        };
        let value = -w.recon_posterior * recon_loglik(&frame.clean_power, &sig_q)
            - w.recon_prior * recon_loglik(&frame.clean_power, &sig_p)
            + w.kl * kl_gauss_diag(&q, &p);

        // d(-c * recon)/d raw = c * (1/s - P/s^2) * ds/draw
        let recon_raw_grad = |c: f64, hs: &[(f64, f64)]| -> Vec<f64> {
            hs.iter()
                .zip(&frame.clean_power)
                .map(|(&(s, ds), &pw)| c * (1.0 / s - pw / (s * s)) * ds)
                .collect()
        };
        let mut d_m = vec![0.0; m.len()];

        let d_dec_in_q = self.decoder.backward(
            &dec_q,
            &recon_raw_grad(w.recon_posterior, &hs_q),
            &mut grad.decoder,
        );
        let d_dec_in_p = self.decoder.backward(
            &dec_p,
            &recon_raw_grad(w.recon_prior, &hs_p),
            &mut grad.decoder,
        );
        for (i, dm) in d_m.iter_mut().enumerate() {
            *dm += d_dec_in_q[l + i] + d_dec_in_p[l + i];
        }

        let mut d_mu_q = vec![0.0; l];
        let mut d_var_q = vec![0.0; l];
        let mut d_mu_p = vec![0.0; l];
        let mut d_var_p = vec![0.0; l];
        for i in 0..l {
            d_mu_q[i] += d_dec_in_q[i];
            d_var_q[i] += d_dec_in_q[i] * eps_q[i] / (2.0 * var_q[i].sqrt());
            d_mu_p[i] += d_dec_in_p[i];
            d_var_p[i] += d_dec_in_p[i] * eps_p[i] / (2.0 * var_p[i].sqrt());

            let diff = mu_q[i] - mu_p[i];
            d_var_q[i] += w.kl * 0.5 * (1.0 / var_p[i] - 1.0 / var_q[i]);
            d_var_p[i] +=
                w.kl * 0.5 * (1.0 / var_p[i] - (var_q[i] + diff * diff) / (var_p[i] * var_p[i]));
            d_mu_q[i] += w.kl * diff / var_p[i];
            d_mu_p[i] -= w.kl * diff / var_p[i];
        }

        let raw_grad = |d_mu: &[f64], d_var: &[f64], h: &[(f64, f64)]| -> Vec<f64> {
            let mut g = d_mu.to_vec();
            g.extend(d_var.iter().zip(h).map(|(d, &(_, dv))| d * dv));
            g
        };
        let d_enc_in = self
            .encoder
            .backward(&enc_trace, &raw_grad(&d_mu_q, &d_var_q, &hq), &mut grad.encoder);
        for (i, dm) in d_m.iter_mut().enumerate() {
            *dm += d_enc_in[f + i];
        }
        let d_prior_in =
            self.prior_net
                .backward(&prior_trace, &raw_grad(&d_mu_p, &d_var_p, &hp), &mut grad.prior_net);
        for (dm, d) in d_m.iter_mut().zip(&d_prior_in) {
            *dm += d;
        }
        self.frontend.backward(&fe_trace, &d_m, &mut grad.frontend);
        Ok(value)
    }

    /// Draws the per-frame reparameterization noise for a batch: posterior
    /// draw first, then prior draw, frame by frame.
    pub fn draw_noise<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Vec<(Vec<f64>, Vec<f64>)> {
        let l = self.latent_dim();
        (0..frames)
            .map(|_| (standard_normal_vec(l, rng), standard_normal_vec(l, rng)))
            .collect()
    }

    /// Mean batch loss and its gradient for fixed noise.
    pub fn grad_with_noise(
        &self,
        batch: &[TrainingFrame],
        w: LossWeights,
        noise: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<(f64, CvaeModel)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if noise.len() != batch.len() {
            return Err(Error::Dimension("one noise pair per frame required".into()));
        }
        let partials = batch
            .par_chunks(GRAD_CHUNK)
            .zip(noise.par_chunks(GRAD_CHUNK))
            .map(|(frames, eps)| -> Result<(f64, CvaeModel)> {
                let mut g = self.zeros_like();
                let mut total = 0.0;
                for (fr, (eq, ep)) in frames.iter().zip(eps) {
                    total += self.loss_and_grad_with_noise(fr, w, eq, ep, &mut g)?;
                }
                Ok((total, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        for (t, g) in &partials {
            total += t;
            grad.add_scaled(g, scale);
        }
        Ok((total * scale, grad))
    }

    /// Mean batch loss and gradient w.r.t. every parameter.
    pub fn grad<R: Rng + ?Sized>(
        &self,
        batch: &[TrainingFrame],
        alpha: f64,
        rng: &mut R,
    ) -> Result<(f64, CvaeModel)> {
        let noise = self.draw_noise(batch.len(), rng);
        self.grad_with_noise(batch, LossWeights::from_alpha(alpha), &noise)
    }
}
