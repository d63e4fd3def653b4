//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per check
//! and exits non-zero if any check fails.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use avsep::cli::{cmd_separate, RunConfig};
use avsep::config::KvConfig;
use avsep::dsp::{istft, stft, write_wav, ComplexSpectrogram, PowerSpectrogram, StftConfig, Waveform, SAMPLE_RATE};
use avsep::eval::{BenchConfig, EvalReport, NmfBaseline};
use avsep::mcem::{estep_with, mstep_gains, mstep_h, mstep_w, run_mcem, McemConfig, SeparationState};
use avsep::nmf::{fit_is_nmf, K_NOISE, K_SPEECH};
use avsep::pipeline::{finetune_speaker, train_generic, training_mix, MethodSet, NMF_DICT_ITERS};
use avsep::streams::named_stream;
use avsep::synthdata::{build_corpus, default_speaker_set, mix, write_embeddings, CorpusConfig, MixSpec, SynthSpeakerSpec};
use avsep::vae::{kl_gauss_diag, CvaeModel, GaussDiag, LossWeights, ModelDims, TrainConfig, TrainingFrame};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} [{status}] {name}: {detail}");
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn c01_stft_round_trip() -> bool {
    let t = Instant::now();
    let cfg = StftConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let samples: Vec<f64> = (0..SAMPLE_RATE as usize).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let back = istft(&stft(&w, &cfg).unwrap(), &cfg, w.len()).unwrap();
        for (a, b) in w.samples.iter().zip(&back.samples) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = t.elapsed();
    let pass = worst < 1e-6 && within(elapsed, 5);
    report(1, "STFT round trip", pass, format!("max error {worst:.2e}, {elapsed:.2?}"));
    pass
}

fn random_frame<R: Rng>(m: &CvaeModel, rng: &mut R) -> TrainingFrame {
    TrainingFrame {
        mix_power: (0..m.bins()).map(|_| rng.random_range(0.0..3.0)).collect(),
        clean_power: (0..m.bins()).map(|_| rng.random_range(0.0..2.0)).collect(),
        visual: (0..m.raw_visual_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn c02_gradient_fidelity() -> bool {
    let t = Instant::now();
    let dims = ModelDims {
        bins: 65,
        latent: 8,
        visual: 8,
        visual_raw: 16,
        hidden: vec![32, 32],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = CvaeModel::new(&dims, 1e-6, &mut rng).unwrap();
    let w = LossWeights::from_alpha(0.9);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..5 {
        let batch: Vec<_> = (0..4).map(|_| random_frame(&model, &mut rng)).collect();
        let noise = model.draw_noise(batch.len(), &mut rng);
        let analytic = model.grad_with_noise(&batch, w, &noise).unwrap().1.param_blocks().concat();
        let loss = |m: &CvaeModel| -> f64 {
            let total: f64 = batch
                .iter()
                .zip(&noise)
                .map(|(fr, (eq, ep))| m.loss_with_noise(fr, w, eq, ep).unwrap())
                .sum();
            total / batch.len() as f64
        };
        let coords: Vec<(usize, usize)> = model
            .param_blocks()
            .iter()
            .enumerate()
            .flat_map(|(b, blk)| (0..blk.len()).map(move |i| (b, i)))
            .collect();
        let batch_worst = coords
            .par_iter()
            .zip(&analytic)
            .map(|(&(b, i), &a)| {
                let mut m = model.clone();
                m.param_blocks_mut()[b][i] += h;
                let lp = loss(&m);
                m.param_blocks_mut()[b][i] -= 2.0 * h;
                let lm = loss(&m);
                let fd = (lp - lm) / (2.0 * h);
                let diff = (fd - a).abs();
                let rel = if diff > 1e-8 { diff / fd.abs().max(a.abs()) } else { 0.0 };
                (rel, diff)
            })
            .reduce(|| (0.0, 0.0), |x, y| (x.0.max(y.0), x.1.max(y.1)));
        worst = worst.max(batch_worst.0);
        worst_abs = worst_abs.max(batch_worst.1);
        checked += coords.len();
    }
    let elapsed = t.elapsed();
    let pass = worst < 1e-4 && within(elapsed, 60);
    report(
        2,
        "gradient fidelity",
        pass,
        format!("{checked} partials, max relative error {worst:.2e} (max absolute {worst_abs:.2e}), {elapsed:.2?}"),
    );
    pass
}

fn c03_kl_oracle() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dim = rng.random_range(1..6);
        let mut g = || {
            GaussDiag::new(
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..dim).map(|_| rng.random_range(0.3..2.0)).collect(),
            )
            .unwrap()
        };
        let (q, p) = (g(), g());
        let exact = kl_gauss_diag(&q, &p);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = q.shift(&eps);
            acc += q.log_density(&z) - p.log_density(&z);
        }
        let mc = acc / n as f64;
        worst = worst.max((mc - exact).abs() / exact);
    }
    let pass = worst < 0.01;
    report(3, "KL oracle", pass, format!("max relative deviation {:.3}%", worst * 100.0));
    pass
}

/// Small model whose decoder output does not depend on `z`.
fn z_ignoring_model(seed: u64) -> CvaeModel {
    let dims = ModelDims {
        bins: 4,
        latent: 3,
        visual: 2,
        visual_raw: 4,
        hidden: vec![6],
    };
    let mut model = CvaeModel::new(&dims, 1e-6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let first = &mut model.nets_mut()[3].layers[0];
    for o in 0..first.outputs {
        for i in 0..dims.latent {
            first.weights[o * first.inputs + i] = 0.0;
        }
    }
    model
}

fn c04_sampler_correctness() -> bool {
    let model = z_ignoring_model(4);
    let frames = 10_000;
    let v = vec![0.3, -0.5, 0.8, 0.1];
    let visual = vec![v.clone(); frames];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = (0..model.bins() * frames)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let x = ComplexSpectrogram::from_vec(model.bins(), frames, data).unwrap();
    let cfg = McemConfig {
        noise_rank: 2,
        ..McemConfig::default()
    };
    let mut st = SeparationState::init(&x, [&visual, &visual], [&model, &model], &cfg, &mut rng).unwrap();
    // one retained state per independent chain after a long burn-in
    estep_with(&mut st, [&model, &model], &x, 200, 199, 1, 0.8, &mut rng).unwrap();
    let prior = model.prior(&v).unwrap();
    let mut worst: f64 = 0.0;
    for spk in 0..2 {
        for d in 0..model.latent_dim() {
            let vals: Vec<f64> = st.samples.iter().map(|s| s[0].z[spk][d]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se_mean = (prior.variance[d] / n).sqrt();
            let se_var = prior.variance[d] * (2.0 / (n - 1.0)).sqrt();
            worst = worst
                .max((mean - prior.mean[d]).abs() / se_mean)
                .max((var - prior.variance[d]).abs() / se_var);
        }
    }
    let pass = worst < 3.0;
    report(
        4,
        "sampler correctness",
        pass,
        format!("{frames} samples per coordinate, max deviation {worst:.2} standard errors"),
    );
    pass
}

fn c05_mstep_fixed_points() -> bool {
    let dims = ModelDims {
        bins: 8,
        latent: 3,
        visual: 2,
        visual_raw: 4,
        hidden: vec![8],
    };
    let model = CvaeModel::new(&dims, 1e-6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let frames = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vis = || -> Vec<Vec<f64>> {
        (0..frames)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let (v1, v2) = (vis(), vis());
    let cfg = McemConfig {
        noise_rank: 3,
        ..McemConfig::default()
    };
    let dummy = ComplexSpectrogram::zeros(8, frames);
    let mut st = SeparationState::init(&dummy, [&v1, &v2], [&model, &model], &cfg, &mut rng).unwrap();
    // identical samples give one V_x shared by every r
    st.samples = st.chains.iter().map(|c| vec![c.clone(); 4]).collect();
    st.gains = [
        (0..frames).map(|n| 0.4 + n as f64 * 0.05).collect(),
        (0..frames).map(|n| 1.6 - n as f64 * 0.05).collect(),
    ];
    let mut x = ComplexSpectrogram::zeros(8, frames);
    for n in 0..frames {
        let c = &st.chains[n];
        let vx = st.mixture_variance([&model, &model], n, &c.z[0], &c.z[1]).unwrap();
        for (f, v) in vx.iter().enumerate() {
            x.set(f, n, Complex64::from_polar(v.sqrt(), f as f64));
        }
    }
    let mh = mstep_h(&mut st.clone(), &x).unwrap();
    let mw = mstep_w(&mut st.clone(), &x).unwrap();
    let g1 = mstep_gains(&mut st.clone(), &x, 0).unwrap();
    let g2 = mstep_gains(&mut st.clone(), &x, 1).unwrap();
    let worst = mh
        .as_slice()
        .iter()
        .chain(mw.as_slice())
        .chain(&g1)
        .chain(&g2)
        .map(|m| (m - 1.0).abs())
        .fold(0.0, f64::max);
    let pass = worst < 1e-12;
    report(5, "M-step fixed points", pass, format!("max |multiplier - 1| = {worst:.2e}"));
    pass
}

fn c06_q_monotonicity() -> bool {
    let dims = ModelDims {
        bins: 16,
        latent: 4,
        visual: 4,
        visual_raw: 6,
        hidden: vec![16],
    };
    let frames = 40;
    let mut up = 0usize;
    let mut total = 0usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let model = CvaeModel::new(&dims, 1e-6, &mut rng).unwrap();
        let mut vis = || -> Vec<Vec<f64>> {
            (0..frames)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let (v1, v2) = (vis(), vis());
        let data = (0..16 * frames)
            .map(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(re, im)
            })
            .collect();
        let x = ComplexSpectrogram::from_vec(16, frames, data).unwrap();
        let cfg = McemConfig {
            em_iters: 30,
            noise_rank: 4,
            tolerance: 0.0,
            seed,
            ..McemConfig::default()
        };
        let run = run_mcem(&x, [&v1, &v2], [&model, &model], &cfg, &mut rng).unwrap();
        for pair in run.trace.windows(2) {
            total += 1;
            if pair[1].q >= pair[0].q {
                up += 1;
            }
        }
    }
    let frac = up as f64 / total as f64;
    let pass = frac >= 0.9;
    report(
        6,
        "Q monotonicity",
        pass,
        format!("{up}/{total} consecutive iterations non-decreasing ({:.1}%)", frac * 100.0),
    );
    pass
}

struct Experiment {
    report: EvalReport,
    elapsed: Duration,
}

/// The default synthetic suite: generic model trained on pool speakers,
/// decoders fine-tuned for the evaluation pair, all methods benchmarked with
/// speakers at 0 dB and white noise at -5 dB.
fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let seed = 1;
        let specs = default_speaker_set(4, &mut named_stream(seed, "pool"));
        let corpus = build_corpus(&CorpusConfig::default(), &specs, &mut named_stream(seed, "corpus")).unwrap();
        let train_cfg = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let mix_spec = training_mix();
        let dims = ModelDims::desk(corpus.config.stft.bins());
        let (generic, _) = train_generic(&corpus, &dims, &train_cfg, &mix_spec).unwrap();
        let ft = |s| finetune_speaker(&corpus, &generic, s, &train_cfg, &mix_spec).unwrap().0;
        let dependent = [ft(0), ft(1)];
        let nmf = NmfBaseline::train(&corpus, K_SPEECH, K_NOISE, NMF_DICT_ITERS, &mut named_stream(seed, "nmf")).unwrap();
        let set = MethodSet {
            generic,
            dependent: Some(dependent),
            nmf,
            mcem: McemConfig {
                em_iters: 30,
                seed,
                ..McemConfig::default()
            },
        };
        let bench = BenchConfig {
            seed,
            ..BenchConfig::default()
        };
        let report = set.benchmark(&corpus, &bench).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        print!("{}", String::from_utf8(csv).unwrap());
        Experiment {
            report,
            elapsed: t.elapsed(),
        }
    })
}

fn c07_end_to_end_separation() -> bool {
    let e = experiment();
    let si = e.report.mean_improvement("mcem-i").unwrap();
    let oracle = e.report.mean_improvement("oracle-wiener").unwrap();
    let pass = si > 3.0 && oracle > 15.0 && within(e.elapsed, 600);
    report(
        7,
        "end-to-end separation",
        pass,
        format!(
            "MCEM-i {si:+.2} dB, oracle Wiener {oracle:+.2} dB, suite {:.1?}",
            e.elapsed
        ),
    );
    pass
}

fn c08_ordering() -> bool {
    let e = experiment();
    let m = |name| e.report.mean_improvement(name).unwrap();
    let (sd, si, id, nmf) = (m("mcem-d"), m("mcem-i"), m("identity"), m("nmf-baseline"));
    let pass = sd >= si && si >= 0.0 && sd >= 0.0 && id.abs() < 1e-9 && nmf.is_finite();
    report(
        8,
        "ordering",
        pass,
        format!("MCEM-d {sd:+.2} dB >= MCEM-i {si:+.2} dB >= identity {id:+.2} dB; NMF baseline {nmf:+.2} dB"),
    );
    pass
}

fn c09_is_nmf_monotone() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_rise: f64 = 0.0;
    for _ in 0..10 {
        let (bins, frames) = (rng.random_range(8..40), rng.random_range(10..60));
        let data = (0..bins * frames)
            .map(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                re * re + im * im
            })
            .collect();
        let p = PowerSpectrogram::from_vec(bins, frames, data).unwrap();
        let fit = fit_is_nmf(&p, 5, 200, &mut rng).unwrap();
        assert_eq!(fit.divergence.len(), 201);
        for d in fit.divergence.windows(2) {
            worst_rise = worst_rise.max((d[1] - d[0]) / d[0]);
        }
    }
    let pass = worst_rise <= 1e-9;
    report(
        9,
        "IS-NMF monotone divergence",
        pass,
        format!("largest relative rise {worst_rise:.2e} over 10 x 200 iterations"),
    );
    pass
}

fn c10_separation_determinism() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let stft_cfg = StftConfig::desk();
    let dims = ModelDims::desk(stft_cfg.bins());
    let model = CvaeModel::new(&dims, 1e-6, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    avsep::vae::save_model(p("model.ckpt"), &model).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let [a, b] = SynthSpeakerSpec::default_pair();
    let (u1, e1) = avsep::synthdata::synth_utterance(&a, 1.0, &stft_cfg, SAMPLE_RATE, &mut rng).unwrap();
    let (u2, e2) = avsep::synthdata::synth_utterance(&b, 1.0, &stft_cfg, SAMPLE_RATE, &mut rng).unwrap();
    let m = mix(&u1, &u2, &MixSpec::default(), &mut rng).unwrap();
    write_wav(p("mix.wav"), &m.mixture).unwrap();
    write_embeddings(p("v1.bin"), &e1).unwrap();
    write_embeddings(p("v2.bin"), &e2).unwrap();

    let run = |out: &str| {
        let mut kv = KvConfig::new();
        kv.set("seed", 10);
        kv.set("out", p(out).display());
        kv.set("model", p("model.ckpt").display());
        kv.set("mixture", p("mix.wav").display());
        kv.set("visual1", p("v1.bin").display());
        kv.set("visual2", p("v2.bin").display());
        kv.set("mcem.em_iters", 5);
        cmd_separate(&RunConfig::from_kv(&kv).unwrap()).unwrap();
        ["speaker1.wav", "speaker2.wav", "qtrace.csv"].map(|f| std::fs::read(p(out).join(f)).unwrap())
    };
    let first = run("a");
    let second = run("b");
    let pass = first == second;
    report(
        10,
        "separation determinism",
        pass,
        format!("{} output bytes compared", first.iter().map(Vec::len).sum::<usize>()),
    );
    pass
}

fn main() {
    let checks: [fn() -> bool; 10] = [
        c01_stft_round_trip,
        c02_gradient_fidelity,
        c03_kl_oracle,
        c04_sampler_correctness,
        c05_mstep_fixed_points,
        c06_q_monotonicity,
        c07_end_to_end_separation,
        c08_ordering,
        c09_is_nmf_monotone,
        c10_separation_determinism,
    ];
    let failed = checks
        .iter()
        .enumerate()
        .filter(|(i, check)| {
            let ok = std::panic::catch_unwind(|| check()).unwrap_or_else(|_| {
                println!("criterion {:>2} [FAIL] panicked", i + 1);
                false
            });
            !ok
        })
        .count();
    println!("acceptance: {} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
