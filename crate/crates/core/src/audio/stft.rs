use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{AudioError, Result, Waveform};

pub const DEFAULT_WINDOW: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_FLOOR_DB: f64 = -120.0;

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Frames of an unpadded STFT: `1 + (len - window) / hop`, or 0 when too short.
pub fn stft_frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window || hop == 0 {
        0
    } else {
        1 + (len - window) / hop
    }
}

pub(crate) fn check_params(window: usize, hop: usize) -> Result<()> {
    if window < 2 {
        return Err(AudioError::InvalidParameter(format!(
            "window {window} too small"
        )));
    }
    if hop == 0 || hop > window {
        return Err(AudioError::InvalidParameter(format!(
            "hop {hop} must be in 1..={window}"
        )));
    }
    Ok(())
}

/// Windowed one-sided DFT of fixed-size frames.
pub(crate) struct Stft {
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub(crate) fn new(window: usize, hop: usize) -> Result<Self> {
        check_params(window, hop)?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: hann(window),
            hop,
            fft: planner.plan_fft_forward(window),
            ifft: planner.plan_fft_inverse(window),
        })
    }

    pub(crate) fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    pub(crate) fn window(&self) -> &[f64] {
        &self.window
    }

    pub(crate) fn frame(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .zip(&self.window)
            .map(|(&v, &w)| Complex::new(v * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(self.bins());
        buf
    }

    /// Unpadded analysis of every full frame of `x`.
    pub(crate) fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n = self.window.len();
        (0..stft_frame_count(x.len(), n, self.hop))
            .map(|m| self.frame(&x[m * self.hop..m * self.hop + n]))
            .collect()
    }

    fn pad(&self) -> usize {
        self.window.len() - self.hop
    }

    /// Analysis with `window - hop` zeros on the left and enough on the right
    /// that every input sample is covered by the same number of frames.
    pub(crate) fn analyze_padded(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let pad = self.pad();
        let covered = pad + x.len() + pad;
        let frames = covered.saturating_sub(self.window.len()).div_ceil(self.hop) + 1;
        let mut padded = vec![0.0; pad];
        padded.extend_from_slice(x);
        padded.resize((frames - 1) * self.hop + self.window.len(), 0.0);
        self.analyze(&padded)
    }

    /// Weighted overlap-add inverse of [`Stft::analyze_padded`], trimmed to `len`.
    pub(crate) fn synthesize_padded(&self, spectra: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let n = self.window.len();
        let total = (spectra.len().saturating_sub(1)) * self.hop + n;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (m, half) in spectra.iter().enumerate() {
            buf[..half.len()].copy_from_slice(half);
            for k in half.len()..n {
                buf[k] = half[n - k].conj();
            }
            self.ifft.process(&mut buf);
            let start = m * self.hop;
            for (i, (c, &w)) in buf.iter().zip(&self.window).enumerate() {
                acc[start + i] += c.re / n as f64 * w;
                norm[start + i] += w * w;
            }
        }
        let pad = self.pad();
        (pad..pad + len)
            .map(|i| {
                if norm[i] > 1e-12 {
                    acc[i] / norm[i]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Magnitude spectrogram in dB relative to a full-scale sine.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    db: Vec<f64>,
    frames: usize,
    bins: usize,
    window: usize,
    hop: usize,
    floor_db: f64,
}

pub fn spectrogram(w: &Waveform, window: usize, hop: usize, floor_db: f64) -> Result<Spectrogram> {
    if !floor_db.is_finite() || floor_db >= 0.0 {
        return Err(AudioError::InvalidParameter(format!(
            "floor {floor_db} dB must be negative"
        )));
    }
    let stft = Stft::new(window, hop)?;
    if w.len() < window {
        return Err(AudioError::TooShort {
            len: w.len(),
            needed: window,
        });
    }
    let full_scale = stft.window().iter().sum::<f64>() / 2.0;
    let spectra = stft.analyze(w.samples());
    let bins = stft.bins();
    let db = spectra
        .iter()
        .flat_map(|f| f.iter())
        .map(|c| {
            let mag = c.norm() / full_scale;
            if mag > 0.0 {
                (20.0 * mag.log10()).max(floor_db)
            } else {
                floor_db
            }
        })
        .collect();
    Ok(Spectrogram {
        db,
        frames: spectra.len(),
        bins,
        window,
        hop,
        floor_db,
    })
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn floor_db(&self) -> f64 {
        self.floor_db
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.db[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.db[frame * self.bins..(frame + 1) * self.bins]
    }

    /// Binary 8-bit graymap: time runs left to right, low frequencies at the bottom.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.frames, self.bins).into_bytes();
        for bin in (0..self.bins).rev() {
            for frame in 0..self.frames {
                let level = (self.get(frame, bin) - self.floor_db) / -self.floor_db;
                out.push((level * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// One row per frame, one column per bin, values in dB.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for frame in 0..self.frames {
            for (i, v) in self.frame(frame).iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}
