//! On-disk corpus layout: a JSON manifest next to `wav/` and `emb/`
//! directories.
//!
//! Embedding files are little-endian:
//!
//! ```text
//! magic   8 bytes  "AVSEPEMB"
//! version u32      1
//! frames  u32
//! dim     u32
//! values  f64 x frames x dim, frame-major
//! ```

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusConfig, Split, SynthSpeakerSpec, Utterance};
use crate::dsp::{decode_wav, encode_wav};
use crate::error::{Error, Result};
use crate::streams::sha256_hex;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"AVSEPEMB";
const EMBEDDING_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;
const MAX_EMBEDDING_DIM: usize = 1 << 16;

pub fn encode_embeddings(frames: &[Vec<f64>]) -> Result<Vec<u8>> {
    let dim = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension("embedding frames have different lengths".into()));
    }
    let mut out = Vec::with_capacity(20 + 8 * dim * frames.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in frames.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let bad = |r: &str| Error::format("embedding", r.to_string());
    if bytes.len() < 20 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(8) != EMBEDDING_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (frames, dim) = (word(12), word(16));
    if dim > MAX_EMBEDDING_DIM || (dim == 0 && frames != 0) {
        return Err(bad("implausible dimension"));
    }
    let payload = &bytes[20..];
    if frames.checked_mul(dim).and_then(|n| n.checked_mul(8)) != Some(payload.len()) {
        return Err(bad("payload size does not match header"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    Ok(values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn write_embeddings(path: impl AsRef<Path>, frames: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(frames)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    decode_embeddings(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub wav: String,
    pub embedding: String,
    pub wav_sha256: String,
    pub embedding_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub speakers: Vec<SynthSpeakerSpec>,
    pub utterances: Vec<ManifestEntry>,
}

fn safe_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::format("manifest", r));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        self.config.validate()?;
        for s in &self.speakers {
            s.validate(self.config.sample_rate)?;
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.speaker >= self.speakers.len() {
                return bad(format!("utterance {} names speaker {}", u.id, u.speaker));
            }
            if !safe_relative(&u.wav) || !safe_relative(&u.embedding) {
                return bad(format!("utterance {} has a non-relative path", u.id));
            }
            if self.utterances[..i].iter().any(|o| o.id == u.id) {
                return bad(format!("duplicate utterance id {}", u.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

/// Writes WAVs, embeddings and `manifest.json` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>, seed: u64) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["wav", "emb"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let wav = format!("wav/{}.wav", u.id);
        let embedding = format!("emb/{}.bin", u.id);
        let wav_bytes = encode_wav(&u.waveform)?;
        let emb_bytes = encode_embeddings(&u.embedding)?;
        for (rel, bytes) in [(&wav, &wav_bytes), (&embedding, &emb_bytes)] {
            let p = dir.join(rel);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        entries.push(ManifestEntry {
            id: u.id.clone(),
            speaker: u.speaker,
            split: u.split,
            seed: u.seed,
            wav_sha256: sha256_hex(&wav_bytes),
            embedding_sha256: sha256_hex(&emb_bytes),
            wav,
            embedding,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        config: corpus.config,
        speakers: corpus.speakers.clone(),
        utterances: entries,
    };
    let p = dir.join("manifest.json");
    std::fs::write(&p, manifest.to_json()).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

fn read_checked(path: &Path, expected_sha: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if sha256_hex(&bytes) != expected_sha {
        return Err(Error::Data(format!("{} does not match its manifest hash", path.display())));
    }
    Ok(bytes)
}

/// Loads a corpus written by [`write_corpus`], checking file hashes and
/// frame alignment.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Corpus> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m = Manifest::parse(&text)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let expected_len = (m.config.duration_s * m.config.sample_rate as f64).round() as usize;
    let mut utterances = Vec::with_capacity(m.utterances.len());
    for e in &m.utterances {
        let wav_path = base.join(&e.wav);
        let waveform = decode_wav(&read_checked(&wav_path, &e.wav_sha256)?)?;
        let emb_path = base.join(&e.embedding);
        let embedding = decode_embeddings(&read_checked(&emb_path, &e.embedding_sha256)?)?;
        if waveform.sample_rate != m.config.sample_rate || waveform.len() != expected_len {
            return Err(Error::Data(format!("{}: unexpected rate or length", wav_path.display())));
        }
        if embedding.len() != m.config.stft.frame_count(waveform.len()) {
            return Err(Error::Data(format!("{}: embedding not frame-aligned", emb_path.display())));
        }
        utterances.push(Utterance {
            id: e.id.clone(),
            speaker: e.speaker,
            split: e.split,
            seed: e.seed,
            waveform,
            embedding,
        });
    }
    Ok(Corpus {
        config: m.config,
        speakers: m.speakers,
        utterances,
    })
}

/// Hex SHA-256 of the manifest file.
pub fn manifest_hash(manifest_path: impl AsRef<Path>) -> Result<String> {
    let p = manifest_path.as_ref();
    Ok(sha256_hex(&std::fs::read(p).map_err(|e| Error::io(p, e))?))
}
