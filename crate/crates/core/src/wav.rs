//! Mono 16-bit PCM WAV at the codec sample rate.

use std::path::Path;

use crate::Real;
use crate::error::{Error, Result};

/// Reads a mono 16-bit PCM file, rejecting any other rate than `expected_rate`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<Real>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRate {
            got: spec.sample_rate,
            expected: expected_rate,
        });
    }
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::InvalidArgument(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| Ok(s? as Real / 32768.0))
        .collect()
}

/// Writes mono 16-bit PCM; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, samples: &[Real], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(to_pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn to_pcm16(s: Real) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<Real> = (0..500).map(|i| (i as Real * 0.01).sin() * 0.8).collect();
        write_wav(&p, &x, 16_000).unwrap();
        let y = read_wav(&p, 16_000).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 2.0 / 32768.0));
    }

    #[test]
    fn other_rates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_wav(&p, &[0.0; 10], 22_050).unwrap();
        assert!(matches!(read_wav(&p, 16_000), Err(Error::SampleRate { got: 22_050, .. })));
    }
}
