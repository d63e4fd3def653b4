//! Training protocol shared by the command-line tool and the test suites.
//!
//! The speaker-independent model is trained on pool speakers only; the
//! evaluation pair (speakers 0 and 1) is unseen. Speaker-dependent models
//! fine-tune its decoder on mixtures whose target is one evaluation speaker
//! and whose partner is drawn from the pool.

use crate::error::Result;
use crate::eval::{BenchConfig, EvalReport, Identity, McemMethod, Method, NmfBaseline, OracleWiener};
use crate::mcem::McemConfig;
use crate::streams::named_stream;
use crate::synthdata::{training_frames, Corpus, MixSpec, NoiseType, Split};
use crate::vae::{finetune_decoder, train, CvaeModel, ModelDims, TrainConfig, TrainReport};

/// IS-NMF iterations used to learn the baseline speech dictionaries.
pub const NMF_DICT_ITERS: usize = 100;

/// Mixture conditions of the training frames: equal-level speakers and
/// white noise at 0 dB.
pub fn training_mix() -> MixSpec {
    MixSpec {
        speaker_snr_db: 0.0,
        noise_type: NoiseType::White,
        noise_snr_db: 0.0,
    }
}

/// Untrained model for `dims`, initialised from `seed`.
pub fn init_model(dims: &ModelDims, cfg: &TrainConfig) -> Result<CvaeModel> {
    CvaeModel::new(dims, cfg.variance_floor, &mut named_stream(cfg.seed, "init"))
}

/// Trains the speaker-independent model on the pool speakers' Train split.
pub fn train_generic(
    corpus: &Corpus,
    dims: &ModelDims,
    cfg: &TrainConfig,
    mix: &MixSpec,
) -> Result<(CvaeModel, TrainReport)> {
    let model = init_model(dims, cfg)?;
    let pool = corpus.pool_speakers();
    let frames = training_frames(corpus, Split::Train, &pool, &pool, mix, &mut named_stream(cfg.seed, "train-mix"))?;
    train(model, &frames, cfg)
}

/// Fine-tunes the decoder of `generic` on mixtures targeting `speaker`.
pub fn finetune_speaker(
    corpus: &Corpus,
    generic: &CvaeModel,
    speaker: usize,
    cfg: &TrainConfig,
    mix: &MixSpec,
) -> Result<(CvaeModel, TrainReport)> {
    let partners: Vec<usize> = corpus.pool_speakers().into_iter().filter(|&p| p != speaker).collect();
    let mut rng = named_stream(cfg.seed, &format!("finetune-mix/{speaker}"));
    let frames = training_frames(corpus, Split::Train, &[speaker], &partners, mix, &mut rng)?;
    finetune_decoder(generic.clone(), &frames, cfg)
}

/// Trained models for every benchmarked method.
pub struct MethodSet {
    pub generic: CvaeModel,
    pub dependent: Option<[CvaeModel; 2]>,
    pub nmf: NmfBaseline,
    pub mcem: McemConfig,
}

impl MethodSet {
    /// Runs identity, oracle Wiener, both MCEM variants and the NMF baseline
    /// on the evaluation pairs of `corpus`.
    pub fn benchmark(&self, corpus: &Corpus, cfg: &BenchConfig) -> Result<EvalReport> {
        let si = McemMethod {
            name: "mcem-i".into(),
            models: [self.generic.clone(), self.generic.clone()],
            config: self.mcem.clone(),
        };
        let sd = self.dependent.as_ref().map(|[a, b]| McemMethod {
            name: "mcem-d".into(),
            models: [a.clone(), b.clone()],
            config: self.mcem.clone(),
        });
        let mut methods: Vec<&dyn Method> = vec![&Identity, &OracleWiener, &si];
        if let Some(sd) = &sd {
            methods.push(sd);
        }
        methods.push(&self.nmf);
        crate::eval::benchmark(&methods, &corpus.test_pairs(), &corpus.config.stft, cfg)
    }
}
