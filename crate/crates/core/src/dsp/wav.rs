//! Mono 16-bit PCM WAV input/output.

use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

fn spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

fn read_from<R: Read>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let s = reader.spec();
    if s.channels != 1 || s.bits_per_sample != 16 || s.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            "wav",
            format!(
                "expected mono 16-bit PCM, got {} channel(s), {}-bit {:?}",
                s.channels, s.bits_per_sample, s.sample_format
            ),
        ));
    }
    if s.sample_rate == 0 {
        return Err(Error::format("wav", "zero sample rate"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|v| v.map(|x| x as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform {
        samples,
        sample_rate: s.sample_rate,
    })
}

/// Parses an in-memory WAV file.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    read_from(hound::WavReader::new(Cursor::new(bytes))?)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    read_from(reader)
}

fn write_to<W: Write + Seek>(w: &Waveform, sink: W) -> Result<()> {
    let mut writer = hound::WavWriter::new(sink, spec(w.sample_rate))?;
    for &x in &w.samples {
        let q = (x * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Serializes to WAV bytes; samples are clipped to the 16-bit range.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    write_to(w, &mut buf)?;
    Ok(buf.into_inner())
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(w)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_16_bit() {
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.999, -1.0, 2.0], 16_000).unwrap();
        let bytes = encode_wav(&w).unwrap();
        assert_eq!(&bytes[..4], b"RIFF");
        assert_eq!(bytes.len(), 44 + 2 * w.len());
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples[1], 0.5);
        assert_eq!(back.samples[4], -1.0);
        // clipped
        assert_eq!(back.samples[5], 32767.0 / 32768.0);
        for (a, b) in w.samples.iter().zip(&back.samples).take(5) {
            assert!((a - b).abs() <= 0.5 / 32768.0);
        }
    }

    #[test]
    fn rejects_stereo_and_garbage() {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut wr = hound::WavWriter::new(&mut buf, spec).unwrap();
        wr.write_sample(1i16).unwrap();
        wr.write_sample(1i16).unwrap();
        wr.finalize().unwrap();
        assert!(decode_wav(buf.get_ref()).is_err());
        assert!(decode_wav(b"not a wav file").is_err());
        assert!(decode_wav(&[]).is_err());
    }
}
