//! Audio plumbing: WAV I/O, resampling, peak normalization, spectral-gate
//! denoising, fixed-length chunking with overlap-add, and spectrograms.

mod chunk;
mod denoise;
mod resample;
mod stft;
mod wav;

use thiserror::Error;

pub use chunk::{chunk, chunk_count, overlap_add, ChunkSpec};
pub use denoise::{
    denoise, estimate_noise_profile, NoiseProfile, DEFAULT_REDUCTION_DB, DEFAULT_THRESHOLD_SIGMAS,
};
pub use resample::resample;
pub use stft::{
    hann, spectrogram, stft_frame_count, Spectrogram, DEFAULT_FLOOR_DB, DEFAULT_HOP, DEFAULT_WINDOW,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, WavEncoding};

/// Canonical working rate for the pipeline.
pub const CANONICAL_RATE: u32 = 44_100;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("silent signal: peak normalization gain is undefined")]
    SilentSignal,
    #[error("input too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono sample buffer with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidParameter(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(AudioError::InvalidParameter(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate).expect("zeros are finite")
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Scales `w` so its peak magnitude is `10^(target_db/20)`.
pub fn peak_normalize(w: &Waveform, target_db: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(AudioError::InvalidParameter(
            "cannot normalize an empty waveform".into(),
        ));
    }
    let peak = w.peak();
    if peak == 0.0 {
        return Err(AudioError::SilentSignal);
    }
    let gain = db_to_gain(target_db) / peak;
    Waveform::new(w.samples.iter().map(|v| v * gain).collect(), w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_to_minus_one_db() {
        let w = Waveform::new(vec![0.1, -0.5, 0.25], 8000).unwrap();
        let out = peak_normalize(&w, -1.0).unwrap();
        // 10^(-1/20) evaluated independently
        assert!((out.peak() - 0.891_250_938_133_745_5).abs() < 1e-9);
        let ratio = out.samples()[0] / w.samples()[0];
        for (o, i) in out.samples().iter().zip(w.samples()) {
            assert!((o - ratio * i).abs() < 1e-15);
        }
        assert!(ratio > 0.0);
    }

    #[test]
    fn normalize_already_at_target_is_identity() {
        let p = db_to_gain(-1.0);
        let w = Waveform::new(vec![p, -0.3, 0.2], 8000).unwrap();
        let out = peak_normalize(&w, -1.0).unwrap();
        for (a, b) in out.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_silence_fails() {
        let w = Waveform::silence(10, 8000);
        assert!(matches!(
            peak_normalize(&w, -1.0),
            Err(AudioError::SilentSignal)
        ));
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 8000).is_err());
    }
}
