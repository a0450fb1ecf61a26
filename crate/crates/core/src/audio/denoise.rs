use super::stft::{check_params, Stft};
use super::{db_to_gain, AudioError, Result, Waveform};

pub const DEFAULT_THRESHOLD_SIGMAS: f64 = 1.5;
pub const DEFAULT_REDUCTION_DB: f64 = 12.0;

/// Per-bin statistics of noise STFT magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseProfile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub window: usize,
    pub hop: usize,
}

impl NoiseProfile {
    pub fn bins(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        check_params(self.window, self.hop)?;
        let bins = self.window / 2 + 1;
        if self.mean.len() != bins || self.std.len() != bins {
            return Err(AudioError::InvalidParameter(format!(
                "profile has {}/{} bins, window {} needs {bins}",
                self.mean.len(),
                self.std.len(),
                self.window
            )));
        }
        if self
            .mean
            .iter()
            .chain(&self.std)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(AudioError::InvalidParameter(
                "profile statistics must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn estimate_noise_profile(w: &Waveform, window: usize, hop: usize) -> Result<NoiseProfile> {
    let stft = Stft::new(window, hop)?;
    if w.len() < window {
        return Err(AudioError::TooShort {
            len: w.len(),
            needed: window,
        });
    }
    let frames = stft.analyze(w.samples());
    let bins = stft.bins();
    let count = frames.len() as f64;
    let mut mean = vec![0.0; bins];
    for f in &frames {
        for (m, c) in mean.iter_mut().zip(f) {
            *m += c.norm() / count;
        }
    }
    let mut var = vec![0.0; bins];
    for f in &frames {
        for ((v, c), m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (c.norm() - m).powi(2) / count;
        }
    }
    Ok(NoiseProfile {
        mean,
        std: var.into_iter().map(f64::sqrt).collect(),
        window,
        hop,
    })
}

/// 3x3 time-frequency box average of a magnitude grid.
fn smooth(mag: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let frames = mag.len();
    let bins = mag.first().map_or(0, Vec::len);
    (0..frames)
        .map(|t| {
            (0..bins)
                .map(|k| {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for tt in t.saturating_sub(1)..(t + 2).min(frames) {
                        for kk in k.saturating_sub(1)..(k + 2).min(bins) {
                            sum += mag[tt][kk];
                            n += 1.0;
                        }
                    }
                    sum / n
                })
                .collect()
        })
        .collect()
}

/// Spectral gate: cells whose local magnitude stays under `mean + threshold_sigmas * std`
/// are attenuated by `reduction_db`.
pub fn denoise(
    w: &Waveform,
    profile: &NoiseProfile,
    threshold_sigmas: f64,
    reduction_db: f64,
) -> Result<Waveform> {
    profile.validate()?;
    if !threshold_sigmas.is_finite() || !reduction_db.is_finite() || reduction_db < 0.0 {
        return Err(AudioError::InvalidParameter(format!(
            "threshold {threshold_sigmas} sigmas / reduction {reduction_db} dB"
        )));
    }
    if w.is_empty() {
        return Ok(w.clone());
    }
    let stft = Stft::new(profile.window, profile.hop)?;
    let mut spectra = stft.analyze_padded(w.samples());
    let mag: Vec<Vec<f64>> = spectra
        .iter()
        .map(|f| f.iter().map(|c| c.norm()).collect())
        .collect();
    let local = smooth(&mag);
    let atten = db_to_gain(-reduction_db);
    let gate: Vec<f64> = profile
        .mean
        .iter()
        .zip(&profile.std)
        .map(|(m, s)| m + threshold_sigmas * s)
        .collect();
    for (frame, level) in spectra.iter_mut().zip(&local) {
        for ((c, l), g) in frame.iter_mut().zip(level).zip(&gate) {
            if l < g {
                *c *= atten;
            }
        }
    }
    Waveform::new(stft.synthesize_padded(&spectra, w.len()), w.sample_rate())
}
