//! 16-bit PCM mono WAV input (and output, for fixtures).

use std::path::Path;

use crate::error::{Error, Result};

/// Reads a RIFF PCM16 mono file at `expected_rate`, scaled to `[-1, 1)` by
/// 1/32768. Anything else is rejected; there is no resampling.
pub fn read_wav_pcm16(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let reader =
        hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: expected 16-bit integer PCM, got {} bits {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Wav(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::Wav(format!(
            "{}: sample rate {} Hz, model expects {expected_rate} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| v as f32 / 32768.0)
                .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Writes samples in `[-1, 1]` as PCM16 mono, rounding and saturating.
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav(e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav_pcm16(&p, &[0.0, 0.5, -1.0, 1.0, 0.25], 16000).unwrap();
        let x = read_wav_pcm16(&p, 16000).unwrap();
        assert_eq!(x, vec![0.0, 0.5, -1.0, 32767.0 / 32768.0, 0.25]);
    }

    #[test]
    fn rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav_pcm16(&p, &[0.0; 10], 8000).unwrap();
        assert!(matches!(read_wav_pcm16(&p, 16000), Err(Error::Wav(_))));

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..4 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav_pcm16(&stereo, 16000), Err(Error::Wav(_))));

        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"not a wav").unwrap();
        assert!(matches!(read_wav_pcm16(&junk, 16000), Err(Error::Wav(_))));
    }
}
