use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avsep::config::KvConfig;
use avsep::dsp::{decode_wav, encode_wav, istft, power, stft, ComplexSpectrogram, PowerSpectrogram, StftConfig, Waveform};
use avsep::estimator::{estimate_spectrograms, wiener_gains};
use avsep::eval::{evaluate_pair, si_sdr, SI_SDR_CAP};
use avsep::matrix::Matrix;
use avsep::mcem::{McemConfig, SeparationState};
use avsep::nmf::fit_is_nmf;
use avsep::synthdata::{decode_embeddings, encode_embeddings};
use avsep::vae::{Checkpoint, CvaeModel, ModelDims};

fn wave(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples, 16_000).unwrap()
}

fn toy_model(seed: u64) -> CvaeModel {
    let dims = ModelDims {
        bins: 5,
        latent: 2,
        visual: 2,
        visual_raw: 3,
        hidden: vec![4],
    };
    CvaeModel::new(&dims, 1e-6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn toy_state(seed: u64, frames: usize) -> (ComplexSpectrogram, SeparationState, CvaeModel) {
    let model = toy_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let data = (0..5 * frames)
        .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
        .collect();
    let x = ComplexSpectrogram::from_vec(5, frames, data).unwrap();
    let v: Vec<Vec<f64>> = (0..frames).map(|n| vec![n as f64 * 0.1, -0.2, 0.5]).collect();
    let cfg = McemConfig {
        noise_rank: 2,
        samples: 3,
        mh_iters_first: 5,
        burn_in_first: 2,
        ..McemConfig::default()
    };
    let mut st = SeparationState::init(&x, [&v, &v], [&model, &model], &cfg, &mut rng).unwrap();
    avsep::mcem::estep(&mut st, [&model, &model], &x, &cfg, true, &mut rng).unwrap();
    (x, st, model)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stft_round_trip(samples in prop::collection::vec(-1.0f64..1.0, 256..2000), wide in any::<bool>()) {
        let cfg = if wide { StftConfig::new(256, 64).unwrap() } else { StftConfig::desk() };
        let w = wave(samples);
        let s = stft(&w, &cfg).unwrap();
        prop_assert_eq!(s.frames(), cfg.frame_count(w.len()));
        let back = istft(&s, &cfg, w.len()).unwrap();
        for (a, b) in w.samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn power_is_nonnegative_squared_modulus(samples in prop::collection::vec(-1.0f64..1.0, 128..600)) {
        let s = stft(&wave(samples), &StftConfig::desk()).unwrap();
        let p = power(&s);
        for (c, v) in s.as_slice().iter().zip(p.as_slice()) {
            prop_assert!(*v >= 0.0);
            prop_assert!((c.norm_sqr() - v).abs() <= 1e-12 * v.max(1.0));
        }
    }

    #[test]
    fn wav_round_trip_within_quantisation(samples in prop::collection::vec(-0.99f64..0.99, 1..500)) {
        let w = wave(samples);
        let back = decode_wav(&encode_wav(&w).unwrap()).unwrap();
        prop_assert_eq!(back.len(), w.len());
        for (a, b) in w.samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn si_sdr_is_scale_invariant(
        r in prop::collection::vec(-1.0f64..1.0, 32..200),
        noise in prop::collection::vec(-0.3f64..0.3, 200),
        c in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
    ) {
        prop_assume!(r.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let e: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let reference = wave(r);
        let est = wave(e.clone());
        let scaled = wave(e.iter().map(|x| x * c).collect());
        let a = si_sdr(&reference, &est).unwrap();
        let b = si_sdr(&reference, &scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-8);
        prop_assert!(a <= SI_SDR_CAP && a >= -SI_SDR_CAP);
    }

    #[test]
    fn evaluate_pair_is_permutation_invariant(
        r1 in prop::collection::vec(-1.0f64..1.0, 64),
        r2 in prop::collection::vec(-1.0f64..1.0, 64),
        n in prop::collection::vec(-0.2f64..0.2, 64),
    ) {
        let (a, b) = (wave(r1.clone()), wave(r2.clone()));
        let mixture = wave(r1.iter().zip(&r2).map(|(x, y)| x + y).collect());
        let e1 = wave(r1.iter().zip(&n).map(|(x, d)| x + d).collect());
        let e2 = wave(r2.iter().zip(&n).map(|(x, d)| x - d).collect());
        let direct = evaluate_pair([&a, &b], [&e1, &e2], &mixture).unwrap();
        let swapped = evaluate_pair([&a, &b], [&e2, &e1], &mixture).unwrap();
        prop_assert_eq!(direct.si_sdr_est, swapped.si_sdr_est);
        prop_assert_eq!(direct.improvement, swapped.improvement);
        prop_assert_eq!(direct.swapped, !swapped.swapped);
    }

    #[test]
    fn wiener_gains_partition_unity(seed in 0u64..500, frames in 2usize..6) {
        let (x, st, _) = toy_state(seed, frames);
        for n in 0..frames {
            for sample in &st.samples[n] {
                let [g1, g2, gb] = wiener_gains(&st, n, sample).unwrap();
                for f in 0..5 {
                    prop_assert!(g1[f] >= 0.0 && g2[f] >= 0.0 && gb[f] >= 0.0);
                    prop_assert!((g1[f] + g2[f] + gb[f] - 1.0).abs() < 1e-12);
                }
            }
        }
        let est = estimate_spectrograms(&x, &st).unwrap();
        for (i, xv) in x.as_slice().iter().enumerate() {
            let sum = est.speech[0].as_slice()[i] + est.speech[1].as_slice()[i] + est.noise.as_slice()[i];
            prop_assert!((sum - xv).norm() < 1e-10 * xv.norm().max(1.0));
        }
    }

    #[test]
    fn kv_config_display_round_trips(
        entries in prop::collection::btree_map("[a-z][a-z0-9_.]{0,8}", "[A-Za-z0-9_.,+-]{0,12}", 0..8),
    ) {
        let mut kv = KvConfig::new();
        for (k, v) in &entries {
            kv.set(k, v);
        }
        let back = KvConfig::parse(&kv.to_string()).unwrap();
        prop_assert_eq!(back, kv);
    }

    #[test]
    fn embeddings_round_trip(frames in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 0..20)) {
        let bytes = encode_embeddings(&frames).unwrap();
        prop_assert_eq!(decode_embeddings(&bytes).unwrap(), frames);
    }

    #[test]
    fn embedding_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = decode_embeddings(&bytes);
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..5) {
        let model = toy_model(seed);
        let back = Checkpoint::from_bytes(&Checkpoint::Model(model.clone()).to_bytes()).unwrap();
        prop_assert_eq!(back, Checkpoint::Model(model));
        let m = Matrix::from_fn(rows, cols, |r, c| (r * 7 + c) as f64 * 0.25 + seed as f64);
        let back = Checkpoint::from_bytes(&Checkpoint::Matrices(vec![m.clone()]).to_bytes()).unwrap();
        prop_assert_eq!(back, Checkpoint::Matrices(vec![m]));
    }

    #[test]
    fn checkpoint_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = Checkpoint::from_bytes(&bytes);
    }

    #[test]
    fn is_nmf_divergence_never_increases(seed in 0u64..1000, rank in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..12 * 9).map(|i| 0.01 + ((i as f64 + seed as f64) * 0.731).sin().abs()).collect();
        let p = PowerSpectrogram::from_vec(12, 9, data).unwrap();
        let fit = fit_is_nmf(&p, rank, 30, &mut rng).unwrap();
        for d in fit.divergence.windows(2) {
            prop_assert!(d[1] <= d[0] * (1.0 + 1e-9));
        }
        prop_assert!(fit.divergence.iter().all(|d| *d >= 0.0));
    }
}
