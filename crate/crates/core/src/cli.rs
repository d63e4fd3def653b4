//! Batch command-line front end.
//!
//! Every command is described by a [`RunConfig`]: a flat key-value or JSON
//! file, overridden by `--set key=value` pairs and then by dedicated flags.
//! All randomness is derived from the run seed through named streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::KvConfig;
use crate::dsp::{read_wav, write_wav, StftConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::estimator::separate;
use crate::eval::{BenchConfig, EvalReport, NmfBaseline};
use crate::mcem::{write_trace_csv, McemConfig};
use crate::nmf::{K_NOISE, K_SPEECH};
use crate::pipeline::{finetune_speaker, train_generic, training_mix, MethodSet, NMF_DICT_ITERS};
use crate::streams::named_stream;
use crate::synthdata::{
    build_corpus, default_speaker_set, load_corpus, read_embeddings, write_corpus, Corpus, CorpusConfig,
    MixSpec, NoiseType,
};
use crate::vae::{load_model, save_model, CvaeModel, ModelDims, TrainConfig, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "avsep", version, about = "Audio-visual two-speaker separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Key-value or JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; required here or as the `seed` config key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen,
    /// Train the speaker-independent model.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Also fine-tune a decoder for this evaluation speaker.
        #[arg(long)]
        speaker_dependent: Option<usize>,
    },
    /// Fine-tune a trained model's decoder for one speaker.
    Finetune {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        speaker: Option<usize>,
    },
    /// Separate a two-speaker mixture.
    Separate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Model for the second speaker; defaults to `--model`.
        #[arg(long)]
        model2: Option<PathBuf>,
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long)]
        visual1: Option<PathBuf>,
        #[arg(long)]
        visual2: Option<PathBuf>,
    },
    /// Benchmark all methods on the corpus test split.
    Bench {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Fine-tuned models of speakers 0 and 1.
        #[arg(long, num_args = 2, value_names = ["SPK0", "SPK1"])]
        sd_models: Option<Vec<PathBuf>>,
    },
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "out",
    "corpus",
    "model",
    "model2",
    "mixture",
    "visual1",
    "visual2",
    "sd_model1",
    "sd_model2",
    "speaker",
];
const GEN_KEYS: &[&str] = &["n_utt", "duration_s", "pool_speakers"];
const STFT_KEYS: &[&str] = &["fft_size", "hop"];
const NET_KEYS: &[&str] = &["latent", "visual", "hidden"];
const TRAIN_KEYS: &[&str] = &["alpha", "learning_rate", "epochs", "batch_size", "variance_floor", "finetune_epochs"];
const MIX_KEYS: &[&str] = &["speaker_snr_db", "noise_type", "noise_snr_db"];
const BENCH_KEYS: &[&str] = &["snr_grid", "noise_types", "speaker_snr_db"];
const NMF_KEYS: &[&str] = &["rank", "noise_rank", "iters"];
const SECTIONS: &[&str] = &["gen", "stft", "net", "train", "trainmix", "mcem", "bench", "nmf"];

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub corpus: CorpusConfig,
    pub pool_speakers: usize,
}

/// Model size overrides on top of the corpus-derived defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetParams {
    pub latent: Option<usize>,
    pub visual: Option<usize>,
    pub hidden: Option<Vec<usize>>,
}

impl NetParams {
    pub fn dims(&self, bins: usize) -> ModelDims {
        let mut d = ModelDims::desk(bins);
        if let Some(l) = self.latent {
            d.latent = l;
        }
        if let Some(m) = self.visual {
            d.visual = m;
        }
        if let Some(h) = &self.hidden {
            d.hidden = h.clone();
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfParams {
    pub rank: usize,
    pub noise_rank: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub model2: Option<PathBuf>,
    pub mixture: Option<PathBuf>,
    pub visual: [Option<PathBuf>; 2],
    pub sd_models: Option<[PathBuf; 2]>,
    pub speaker: Option<usize>,
    pub gen: GenParams,
    pub stft: StftConfig,
    pub net: NetParams,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    pub train_mix: MixSpec,
    pub mcem: McemConfig,
    pub bench: BenchConfig,
    pub nmf: NmfParams,
}

fn path(kv: &KvConfig, key: &str) -> Option<PathBuf> {
    kv.raw(key).map(PathBuf::from)
}

impl RunConfig {
    /// Parses and validates every key; unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        for k in kv.keys() {
            let known = match k.split_once('.') {
                Some((sec, _)) => SECTIONS.contains(&sec),
                None => TOP_KEYS.contains(&k),
            };
            if !known {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let seed = kv
            .get::<u64>("seed")?
            .ok_or_else(|| Error::Config("a seed is required (--seed or `seed` key)".into()))?;

        let g = kv.section("gen");
        g.ensure_known(GEN_KEYS)?;
        let cd = CorpusConfig::default();
        let s = kv.section("stft");
        s.ensure_known(STFT_KEYS)?;
        let desk = StftConfig::desk();
        let stft = StftConfig::new(s.get_or("fft_size", desk.fft_size)?, s.get_or("hop", desk.hop)?)?;
        let gen = GenParams {
            corpus: CorpusConfig {
                n_utt: g.get_or("n_utt", cd.n_utt)?,
                duration_s: g.get_or("duration_s", cd.duration_s)?,
                sample_rate: SAMPLE_RATE,
                stft,
            },
            pool_speakers: g.get_or("pool_speakers", 4)?,
        };
        gen.corpus.validate()?;

        let n = kv.section("net");
        n.ensure_known(NET_KEYS)?;
        let net = NetParams {
            latent: n.get("latent")?,
            visual: n.get("visual")?,
            hidden: n.get_list("hidden")?,
        };

        let t = kv.section("train");
        t.ensure_known(TRAIN_KEYS)?;
        let td = TrainConfig::desk();
        let train = TrainConfig {
            alpha: t.get_or("alpha", td.alpha)?,
            learning_rate: t.get_or("learning_rate", td.learning_rate)?,
            epochs: t.get_or("epochs", td.epochs)?,
            batch_size: t.get_or("batch_size", td.batch_size)?,
            seed,
            variance_floor: t.get_or("variance_floor", td.variance_floor)?,
        };
        train.validate()?;
        let finetune_epochs = t.get_or("finetune_epochs", train.epochs)?;

        let m = kv.section("trainmix");
        m.ensure_known(MIX_KEYS)?;
        let md = training_mix();
        let train_mix = MixSpec {
            speaker_snr_db: m.get_or("speaker_snr_db", md.speaker_snr_db)?,
            noise_type: m.get_or("noise_type", md.noise_type)?,
            noise_snr_db: m.get_or("noise_snr_db", md.noise_snr_db)?,
        };
        train_mix.validate()?;

        let mut mcem = McemConfig::from_kv(&kv.section("mcem"))?;
        mcem.seed = seed;

        let b = kv.section("bench");
        b.ensure_known(BENCH_KEYS)?;
        let bd = BenchConfig::default();
        let bench = BenchConfig {
            snr_grid: b.get_list("snr_grid")?.unwrap_or(bd.snr_grid),
            noise_types: b.get_list::<NoiseType>("noise_types")?.unwrap_or(bd.noise_types),
            speaker_snr_db: b.get_or("speaker_snr_db", bd.speaker_snr_db)?,
            seed,
        };
        if bench.snr_grid.is_empty() || bench.noise_types.is_empty() {
            return Err(Error::Config("benchmark grid must not be empty".into()));
        }

        let p = kv.section("nmf");
        p.ensure_known(NMF_KEYS)?;
        let nmf = NmfParams {
            rank: p.get_or("rank", K_SPEECH)?,
            noise_rank: p.get_or("noise_rank", K_NOISE)?,
            iters: p.get_or("iters", NMF_DICT_ITERS)?,
        };
        if nmf.rank == 0 || nmf.noise_rank == 0 {
            return Err(Error::Config("NMF ranks must be positive".into()));
        }

        let sd_models = match (path(kv, "sd_model1"), path(kv, "sd_model2")) {
            (Some(a), Some(b)) => Some([a, b]),
            (None, None) => None,
            _ => return Err(Error::Config("sd_model1 and sd_model2 must be given together".into())),
        };
        Ok(Self {
            seed,
            out: path(kv, "out").unwrap_or_else(|| PathBuf::from(".")),
            corpus: path(kv, "corpus"),
            model: path(kv, "model"),
            model2: path(kv, "model2"),
            mixture: path(kv, "mixture"),
            visual: [path(kv, "visual1"), path(kv, "visual2")],
            sd_models,
            speaker: kv.get("speaker")?,
            gen,
            stft,
            net,
            train,
            finetune_epochs,
            train_mix,
            mcem,
            bench,
            nmf,
        })
    }

    fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            ..self.train.clone()
        }
    }
}

fn required<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "epoch,loss")?;
        for (i, l) in report.loss_trace.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, l)?;
        }
        Ok(())
    })
}

fn write_sidecar(path: &Path, cfg: &TrainConfig, dims: &ModelDims, mix: &MixSpec, speaker: Option<usize>) -> Result<()> {
    let v = serde_json::json!({
        "train": cfg,
        "dims": dims,
        "mix": {
            "speaker_snr_db": mix.speaker_snr_db,
            "noise_type": mix.noise_type,
            "noise_snr_db": mix.noise_snr_db,
        },
        "speaker": speaker,
    });
    let text = serde_json::to_string_pretty(&v)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn save_run(out: &Path, stem: &str, model: &CvaeModel, report: &TrainReport, cfg: &TrainConfig, mix: &MixSpec, speaker: Option<usize>) -> Result<()> {
    save_model(out.join(format!("{stem}.ckpt")), model)?;
    write_loss_csv(&out.join(format!("{stem}_loss.csv")), report)?;
    write_sidecar(&out.join(format!("{stem}_train.json")), cfg, &model.dims(), mix, speaker)
}

/// Writes a corpus of the default pair plus the configured pool speakers.
pub fn cmd_gen(run: &RunConfig) -> Result<PathBuf> {
    let specs = default_speaker_set(run.gen.pool_speakers, &mut named_stream(run.seed, "pool"));
    let corpus = build_corpus(&run.gen.corpus, &specs, &mut named_stream(run.seed, "corpus"))?;
    write_corpus(&corpus, &run.out, run.seed)?;
    Ok(run.out.join("manifest.json"))
}

fn check_speaker(corpus: &Corpus, speaker: usize) -> Result<()> {
    if speaker > 1 {
        return Err(Error::Config(format!("speaker {speaker} is not an evaluation speaker (0 or 1)")));
    }
    if corpus.speakers.len() < 2 {
        return Err(Error::Data("corpus has fewer than two speakers".into()));
    }
    Ok(())
}

/// Trains the speaker-independent model (`generic.ckpt`), then optionally
/// fine-tunes it for `speaker` (`speaker{id}.ckpt`).
pub fn cmd_train(run: &RunConfig) -> Result<()> {
    let corpus = load_corpus(required(&run.corpus, "corpus")?)?;
    if let Some(s) = run.speaker {
        check_speaker(&corpus, s)?;
    }
    create_dir(&run.out)?;
    let dims = run.net.dims(corpus.config.stft.bins());
    let (generic, report) = train_generic(&corpus, &dims, &run.train, &run.train_mix)?;
    save_run(&run.out, "generic", &generic, &report, &run.train, &run.train_mix, None)?;
    if let Some(s) = run.speaker {
        finetune_and_save(run, &corpus, &generic, s)?;
    }
    Ok(())
}

fn finetune_and_save(run: &RunConfig, corpus: &Corpus, generic: &CvaeModel, speaker: usize) -> Result<()> {
    let cfg = run.finetune_config();
    let (model, report) = finetune_speaker(corpus, generic, speaker, &cfg, &run.train_mix)?;
    save_run(&run.out, &format!("speaker{speaker}"), &model, &report, &cfg, &run.train_mix, Some(speaker))
}

/// Fine-tunes the decoder of a trained model for one evaluation speaker.
pub fn cmd_finetune(run: &RunConfig) -> Result<()> {
    let corpus = load_corpus(required(&run.corpus, "corpus")?)?;
    let speaker = *required(&run.speaker, "speaker")?;
    check_speaker(&corpus, speaker)?;
    let generic = load_model(required(&run.model, "model")?)?;
    if generic.bins() != corpus.config.stft.bins() {
        return Err(Error::Dimension(format!(
            "model has {} bins, corpus STFT has {}",
            generic.bins(),
            corpus.config.stft.bins()
        )));
    }
    create_dir(&run.out)?;
    finetune_and_save(run, &corpus, &generic, speaker)
}

/// Separates a mixture into `speaker1.wav` and `speaker2.wav` and writes the
/// Q trace to `qtrace.csv`.
pub fn cmd_separate(run: &RunConfig) -> Result<()> {
    let m1 = load_model(required(&run.model, "model")?)?;
    let m2 = match &run.model2 {
        Some(p) => load_model(p)?,
        None => m1.clone(),
    };
    let mix = read_wav(required(&run.mixture, "mixture")?)?;
    let v1 = read_embeddings(required(&run.visual[0], "visual1")?)?;
    let v2 = read_embeddings(required(&run.visual[1], "visual2")?)?;
    let mut rng = named_stream(run.seed, "separate");
    let sep = separate(&mix, [&v1, &v2], [&m1, &m2], &run.stft, &run.mcem, &mut rng)?;
    create_dir(&run.out)?;
    for (i, s) in sep.sources.iter().enumerate() {
        write_wav(run.out.join(format!("speaker{}.wav", i + 1)), &s.waveform)?;
    }
    write_file(&run.out.join("qtrace.csv"), |w| write_trace_csv(&sep.trace, w))
}

/// Benchmarks identity, oracle Wiener, MCEM with the generic model, MCEM
/// with fine-tuned models (when given) and the NMF baseline; writes
/// `bench.csv`.
pub fn cmd_bench(run: &RunConfig) -> Result<EvalReport> {
    let corpus = load_corpus(required(&run.corpus, "corpus")?)?;
    check_speaker(&corpus, 1)?;
    let generic = load_model(required(&run.model, "model")?)?;
    let dependent = match &run.sd_models {
        Some([a, b]) => Some([load_model(a)?, load_model(b)?]),
        None => None,
    };
    let mut rng = named_stream(run.seed, "nmf");
    let nmf = NmfBaseline::train(&corpus, run.nmf.rank, run.nmf.noise_rank, run.nmf.iters, &mut rng)?;
    let set = MethodSet {
        generic,
        dependent,
        nmf,
        mcem: run.mcem.clone(),
    };
    let report = set.benchmark(&corpus, &run.bench)?;
    create_dir(&run.out)?;
    write_file(&run.out.join("bench.csv"), |w| report.write_csv(w))?;
    Ok(report)
}

impl Cli {
    /// Merges the config file, `--set` overrides and flags, flags last.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            kv.set(k.trim(), v.trim());
        }
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(k, v);
            }
        };
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        set("seed", self.seed.map(|s| s.to_string()));
        set("out", p(&self.out));
        match &self.command {
            Command::Gen => {}
            Command::Train {
                corpus,
                speaker_dependent,
            } => {
                set("corpus", p(corpus));
                set("speaker", speaker_dependent.map(|s| s.to_string()));
            }
            Command::Finetune { corpus, model, speaker } => {
                set("corpus", p(corpus));
                set("model", p(model));
                set("speaker", speaker.map(|s| s.to_string()));
            }
            Command::Separate {
                model,
                model2,
                mixture,
                visual1,
                visual2,
            } => {
                set("model", p(model));
                set("model2", p(model2));
                set("mixture", p(mixture));
                set("visual1", p(visual1));
                set("visual2", p(visual2));
            }
            Command::Bench {
                corpus,
                model,
                sd_models,
            } => {
                set("corpus", p(corpus));
                set("model", p(model));
                if let Some(m) = sd_models {
                    set("sd_model1", Some(m[0].display().to_string()));
                    set("sd_model2", Some(m[1].display().to_string()));
                }
            }
        }
        RunConfig::from_kv(&kv)
    }

    pub fn execute(&self) -> Result<()> {
        let run = self.run_config()?;
        match &self.command {
            Command::Gen => {
                let manifest = cmd_gen(&run)?;
                println!("wrote {}", manifest.display());
            }
            Command::Train { .. } => cmd_train(&run)?,
            Command::Finetune { .. } => cmd_finetune(&run)?,
            Command::Separate { .. } => cmd_separate(&run)?,
            Command::Bench { .. } => {
                let report = cmd_bench(&run)?;
                report
                    .write_csv(std::io::stdout().lock())
                    .map_err(|e| Error::io("<stdout>", e))?;
            }
        }
        Ok(())
    }
}
