//! Band-limited rational resampling with a Blackman-windowed sinc kernel.

use std::f64::consts::PI;

use super::{AudioError, Result, Waveform};

/// Zero crossings of the sinc on each side of the kernel centre.
const ZERO_CROSSINGS: f64 = 16.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
/// Phase tables larger than this are evaluated on the fly.
const MAX_TABLE_PHASES: u64 = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(pos: f64) -> f64 {
    // pos in [-1, 1]
    if pos.abs() >= 1.0 {
        return 0.0;
    }
    let t = (pos + 1.0) / 2.0;
    0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos()
}

struct Kernel {
    /// Cutoff in cycles per input sample.
    cutoff: f64,
    half_width: f64,
    reach: i64,
}

impl Kernel {
    fn new(from: u32, to: u32) -> Self {
        let cutoff = 0.5 * ROLLOFF * (to as f64 / from as f64).min(1.0);
        let half_width = ZERO_CROSSINGS / (2.0 * cutoff);
        Self {
            cutoff,
            half_width,
            reach: half_width.ceil() as i64,
        }
    }

    /// DC-normalized taps for fractional offset `frac` in `[0, 1)`; tap `j` weights
    /// input index `base + j - reach + 1`.
    fn taps(&self, frac: f64) -> Vec<f64> {
        let n = 2 * self.reach as usize;
        let mut taps: Vec<f64> = (0..n)
            .map(|j| {
                let tau = frac - (j as f64 - self.reach as f64 + 1.0);
                2.0 * self.cutoff * sinc(2.0 * self.cutoff * tau) * blackman(tau / self.half_width)
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        taps
    }
}

/// Converts `w` to `to_rate`; output length is `round(len * to / from)`.
pub fn resample(w: &Waveform, to_rate: u32) -> Result<Waveform> {
    if to_rate == 0 {
        return Err(AudioError::InvalidParameter(
            "target rate must be positive".into(),
        ));
    }
    let from = w.sample_rate();
    if from == to_rate {
        return Ok(w.clone());
    }
    let g = gcd(from as u64, to_rate as u64);
    let (up, down) = (to_rate as u64 / g, from as u64 / g);
    let out_len = (w.len() as f64 * to_rate as f64 / from as f64).round() as usize;
    let kernel = Kernel::new(from, to_rate);
    let table: Option<Vec<Vec<f64>>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| kernel.taps(p as f64 / up as f64)).collect());
    let x = w.samples();
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let num = n * down;
        let (base, phase) = ((num / up) as i64, num % up);
        let owned;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                owned = kernel.taps(phase as f64 / up as f64);
                &owned
            }
        };
        let first = base - kernel.reach + 1;
        let acc: f64 = taps
            .iter()
            .enumerate()
            .filter_map(|(j, &h)| {
                let idx = first + j as i64;
                (idx >= 0 && (idx as usize) < x.len()).then(|| h * x[idx as usize])
            })
            .sum();
        out.push(acc);
    }
    Waveform::new(out, to_rate)
}
