//! Nonnegative variance models: the NMF noise model, Itakura-Saito NMF
//! fitting and the dictionary-based separation baseline.

use rand::Rng;

use crate::dsp::{ComplexSpectrogram, PowerSpectrogram};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const NMF_FLOOR: f64 = 1e-10;
pub const K_SPEECH: usize = 64;
pub const K_NOISE: usize = 10;

/// `V = W H` with `W: F x K` and `H: K x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    pub w: Matrix,
    pub h: Matrix,
}

impl NmfModel {
    pub fn new(w: Matrix, h: Matrix) -> Result<Self> {
        if w.cols() != h.rows() {
            return Err(Error::Dimension(format!(
                "W is {}x{}, H is {}x{}",
                w.rows(),
                w.cols(),
                h.rows(),
                h.cols()
            )));
        }
        if w.as_slice().iter().chain(h.as_slice()).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Data("NMF factors must be finite and nonnegative".into()));
        }
        let mut m = Self { w, h };
        m.apply_floor();
        Ok(m)
    }

    /// Factors drawn uniformly from `[0.1, 1.1)`.
    pub fn random<R: Rng + ?Sized>(bins: usize, rank: usize, frames: usize, rng: &mut R) -> Self {
        let w = Matrix::random_uniform(bins, rank, 0.1, 1.1, rng);
        let h = Matrix::random_uniform(rank, frames, 0.1, 1.1, rng);
        Self { w, h }
    }

    pub fn rank(&self) -> usize {
        self.w.cols()
    }

    pub fn bins(&self) -> usize {
        self.w.rows()
    }

    pub fn frames(&self) -> usize {
        self.h.cols()
    }

    pub fn apply_floor(&mut self) {
        self.w.floor_at(NMF_FLOOR);
        self.h.floor_at(NMF_FLOOR);
    }

    /// `W h_n`, the noise variance of frame `n`.
    pub fn noise_variance(&self, n: usize) -> Result<Vec<f64>> {
        if n >= self.frames() {
            return Err(Error::Dimension(format!(
                "frame {n} out of range for {} frames",
                self.frames()
            )));
        }
        Ok((0..self.bins())
            .map(|f| (0..self.rank()).map(|k| self.w.get(f, k) * self.h.get(k, n)).sum())
            .collect())
    }

    pub fn product(&self) -> Matrix {
        self.w.matmul(&self.h)
    }
}

/// Frame-major power spectrogram as an `F x N` matrix.
pub fn power_matrix(p: &PowerSpectrogram) -> Matrix {
    Matrix::from_fn(p.bins(), p.frames(), |f, n| p.get(f, n))
}

/// `F x N` matrix to the frame-major layout used by spectrograms.
pub fn frame_major(m: &Matrix) -> Vec<f64> {
    let (bins, frames) = m.shape();
    let mut out = Vec::with_capacity(bins * frames);
    for n in 0..frames {
        for f in 0..bins {
            out.push(m.get(f, n));
        }
    }
    out
}

/// `sum p/v - ln(p/v) - 1` over all entries.
pub fn is_divergence(p: &Matrix, v: &Matrix) -> f64 {
    p.as_slice()
        .iter()
        .zip(v.as_slice())
        .map(|(&p, &v)| {
            let r = p / v;
            r - r.ln() - 1.0
        })
        .sum()
}

/// `(num, den)` ratio statistics of the IS multiplicative updates:
/// `P / V^2` (computed as `(P / V) / V` so that `P == V` yields exactly
/// `1 / V`) and `1 / V`.
fn is_statistics(p: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = v.shape();
    let num = Matrix::from_fn(rows, cols, |r, c| (p.get(r, c) / v.get(r, c)) / v.get(r, c));
    let den = Matrix::from_fn(rows, cols, |r, c| 1.0 / v.get(r, c));
    (num, den)
}

fn multiply_by_ratio(target: &mut Matrix, num: &Matrix, den: &Matrix, exponent: f64) {
    for ((t, n), d) in target
        .as_mut_slice()
        .iter_mut()
        .zip(num.as_slice())
        .zip(den.as_slice())
    {
        let ratio = n / d;
        *t *= if exponent == 0.5 { ratio.sqrt() } else { ratio.powf(exponent) };
    }
}

/// One IS-NMF update of every row of `H`.
fn update_h(p: &Matrix, model: &mut NmfModel, exponent: f64) {
    let v = model.product();
    let (num, den) = is_statistics(p, &v);
    let wt = model.w.transpose();
    multiply_by_ratio(&mut model.h, &wt.matmul(&num), &wt.matmul(&den), exponent);
    model.h.floor_at(NMF_FLOOR);
}

/// One IS-NMF update of the columns `cols` of `W`.
fn update_w(p: &Matrix, model: &mut NmfModel, cols: std::ops::Range<usize>, exponent: f64) {
    let v = model.product();
    let (num, den) = is_statistics(p, &v);
    let ht = model.h.transpose();
    let num_w = num.matmul(&ht);
    let den_w = den.matmul(&ht);
    for f in 0..model.w.rows() {
        for k in cols.clone() {
            let ratio = num_w.get(f, k) / den_w.get(f, k);
            let factor = if exponent == 0.5 { ratio.sqrt() } else { ratio.powf(exponent) };
            model.w.set(f, k, (model.w.get(f, k) * factor).max(NMF_FLOOR));
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmfFit {
    pub model: NmfModel,
    /// Divergence before the first update and after each iteration.
    pub divergence: Vec<f64>,
}

fn clamp_power(p: &PowerSpectrogram) -> Matrix {
    let mut m = power_matrix(p);
    m.floor_at(NMF_FLOOR);
    m
}

/// Itakura-Saito NMF of a power spectrogram with square-root multiplicative
/// updates (monotone in the divergence). Zero entries of `P` are clamped to
/// the NMF floor so the divergence stays finite.
pub fn fit_is_nmf<R: Rng + ?Sized>(
    p: &PowerSpectrogram,
    rank: usize,
    iters: usize,
    rng: &mut R,
) -> Result<NmfFit> {
    if rank == 0 {
        return Err(Error::Config("NMF rank must be at least 1".into()));
    }
    let init = NmfModel::random(p.bins(), rank, p.frames(), rng);
    fit_is_nmf_from(p, init, iters)
}

pub fn fit_is_nmf_from(p: &PowerSpectrogram, mut model: NmfModel, iters: usize) -> Result<NmfFit> {
    if p.as_slice().iter().all(|v| *v == 0.0) {
        return Err(Error::Data("cannot factorize an all-zero power spectrogram".into()));
    }
    if (model.bins(), model.frames()) != (p.bins(), p.frames()) {
        return Err(Error::Dimension("NMF shape differs from the spectrogram".into()));
    }
    let pm = clamp_power(p);
    let mut divergence = Vec::with_capacity(iters + 1);
    divergence.push(is_divergence(&pm, &model.product()));
    for _ in 0..iters {
        update_h(&pm, &mut model, 0.5);
        let rank = model.rank();
        update_w(&pm, &mut model, 0..rank, 0.5);
        divergence.push(is_divergence(&pm, &model.product()));
    }
    Ok(NmfFit { model, divergence })
}

#[derive(Debug, Clone)]
pub struct BaselineSeparation {
    pub speech: [ComplexSpectrogram; 2],
    pub noise: ComplexSpectrogram,
    /// Wiener masks (speaker 1, speaker 2, noise), each `F x N`.
    pub masks: [Matrix; 3],
}

/// Dictionary-based supervised separation: speaker dictionaries are frozen,
/// activations and a free noise factorization are fitted with classical IS
/// multiplicative updates, then Wiener masks are applied to the mixture.
pub fn baseline_separate<R: Rng + ?Sized>(
    x: &ComplexSpectrogram,
    w1: &Matrix,
    w2: &Matrix,
    k_noise: usize,
    iters: usize,
    rng: &mut R,
) -> Result<BaselineSeparation> {
    let bins = x.bins();
    if w1.rows() != bins || w2.rows() != bins {
        return Err(Error::Dimension(format!(
            "dictionaries have {}/{} rows, mixture has {bins} bins",
            w1.rows(),
            w2.rows()
        )));
    }
    if k_noise == 0 {
        return Err(Error::Config("K_noise must be at least 1".into()));
    }
    let frames = x.frames();
    let (k1, k2) = (w1.cols(), w2.cols());
    let wb = Matrix::random_uniform(bins, k_noise, 0.1, 1.1, rng);
    let h = Matrix::random_uniform(k1 + k2 + k_noise, frames, 0.1, 1.1, rng);
    let mut model = NmfModel::new(w1.hcat(w2).hcat(&wb), h)?;
    let p = clamp_power(&crate::dsp::power(x));
    let total = model.rank();
    for _ in 0..iters {
        update_h(&p, &mut model, 1.0);
        update_w(&p, &mut model, k1 + k2..total, 1.0);
    }

    let part = |a: usize, b: usize| -> Matrix {
        model.w.col_block(a, b).matmul(&model.h.row_block(a, b))
    };
    let v1 = part(0, k1);
    let v2 = part(k1, k1 + k2);
    let vb = part(k1 + k2, total);
    let mask = |num: &Matrix| -> Matrix {
        Matrix::from_fn(bins, frames, |f, n| {
            num.get(f, n) / (v1.get(f, n) + v2.get(f, n) + vb.get(f, n))
        })
    };
    let masks = [mask(&v1), mask(&v2), mask(&vb)];
    let apply = |m: &Matrix| x.masked(&frame_major(m));
    Ok(BaselineSeparation {
        speech: [apply(&masks[0])?, apply(&masks[1])?],
        noise: apply(&masks[2])?,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_power(bins: usize, frames: usize, seed: u64) -> PowerSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..bins * frames).map(|_| rng.random_range(0.0..4.0)).collect();
        PowerSpectrogram::from_vec(bins, frames, data).unwrap()
    }

    #[test]
    fn noise_variance_cases() {
        let w = Matrix::filled(4, 1, 1.0);
        let h = Matrix::from_vec(1, 2, vec![2.5, 0.5]).unwrap();
        let m = NmfModel::new(w, h).unwrap();
        assert_eq!(m.noise_variance(0).unwrap(), vec![2.5; 4]);
        assert!(m.noise_variance(2).is_err());

        let floored = NmfModel::new(Matrix::zeros(3, 2), Matrix::zeros(2, 2)).unwrap();
        assert!(floored
            .noise_variance(1)
            .unwrap()
            .iter()
            .all(|v| *v >= NMF_FLOOR * NMF_FLOOR * 2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = NmfModel::random(6, 3, 5, &mut rng);
        for n in 0..5 {
            let got = m.noise_variance(n).unwrap();
            for (f, g) in got.iter().enumerate() {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += m.w.get(f, k) * m.h.get(k, n);
                }
                assert!((g - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_factorization_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = NmfModel::random(7, 2, 9, &mut rng);
        let p = PowerSpectrogram::from_vec(7, 9, frame_major(&truth.product())).unwrap();
        let fit = fit_is_nmf_from(&p, truth.clone(), 5).unwrap();
        for (a, b) in fit.model.w.as_slice().iter().zip(truth.w.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
        for (a, b) in fit.model.h.as_slice().iter().zip(truth.h.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn divergence_is_monotone_and_factors_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_power(12, 20, 6);
        let fit = fit_is_nmf(&p, 3, 100, &mut rng).unwrap();
        for pair in fit.divergence.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{pair:?}");
        }
        // Independent recomputation of the last value.
        let v = fit.model.product();
        let mut d = 0.0;
        for f in 0..12 {
            for n in 0..20 {
                let pv = p.get(f, n).max(NMF_FLOOR);
                let vv = v.get(f, n);
                d += pv / vv - (pv / vv).ln() - 1.0;
            }
        }
        assert!((d - fit.divergence.last().unwrap()).abs() < 1e-9 * d.max(1.0));
        assert!(fit.model.w.as_slice().iter().all(|v| *v >= NMF_FLOOR));
        assert!(fit.model.h.as_slice().iter().all(|v| *v >= NMF_FLOOR));
    }

    #[test]
    fn all_zero_power_is_an_error() {
        let p = PowerSpectrogram::from_vec(3, 3, vec![0.0; 9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(fit_is_nmf(&p, 2, 3, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn baseline_masks_partition_unity_and_zero_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = Matrix::random_uniform(9, 2, 0.1, 1.0, &mut rng);
        let w2 = Matrix::random_uniform(9, 2, 0.1, 1.0, &mut rng);
        let data: Vec<Complex64> = (0..9 * 6)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let x = ComplexSpectrogram::from_vec(9, 6, data).unwrap();
        let out = baseline_separate(&x, &w1, &w2, 2, 30, &mut rng).unwrap();
        for i in 0..9 * 6 {
            let s: f64 = out.masks.iter().map(|m| m.as_slice()[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(out.masks.iter().all(|m| (0.0..=1.0).contains(&m.as_slice()[i])));
        }
        let recombined = &(&out.speech[0] + &out.speech[1]) + &out.noise;
        for (a, b) in recombined.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }

        let zero = ComplexSpectrogram::zeros(9, 6);
        let out = baseline_separate(&zero, &w1, &w2, 2, 10, &mut rng).unwrap();
        assert!(out.speech.iter().all(|s| s.squared_norm() == 0.0));

        let w_bad = Matrix::filled(8, 2, 1.0);
        assert!(matches!(
            baseline_separate(&x, &w_bad, &w2, 2, 1, &mut rng),
            Err(Error::Dimension(_))
        ));
    }
}
