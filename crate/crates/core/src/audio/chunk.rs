use super::{AudioError, Result, Waveform};

/// Fixed-length framing with fractional overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkSpec {
    length: usize,
    overlap: f64,
    hop: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self::new(44_160, 0.25).expect("default chunk spec is valid")
    }
}

impl ChunkSpec {
    pub fn new(length: usize, overlap: f64) -> Result<Self> {
        if length == 0 {
            return Err(AudioError::InvalidParameter(
                "chunk length must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(AudioError::InvalidParameter(format!(
                "chunk overlap {overlap} outside [0, 1)"
            )));
        }
        let hop = (length as f64 * (1.0 - overlap)).round() as usize;
        if hop == 0 || hop > length {
            return Err(AudioError::InvalidParameter(format!(
                "chunk hop {hop} invalid for length {length}"
            )));
        }
        Ok(Self {
            length,
            overlap,
            hop,
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn overlap(&self) -> f64 {
        self.overlap
    }

    pub fn hop(&self) -> usize {
        self.hop
    }
}

/// Number of frames `chunk` yields for a signal of `len` samples.
pub fn chunk_count(len: usize, spec: &ChunkSpec) -> usize {
    if len == 0 {
        0
    } else if len <= spec.length {
        1
    } else {
        (len - spec.length).div_ceil(spec.hop) + 1
    }
}

/// Splits `w` into frames of `spec.length()`; the final frame is zero-padded.
pub fn chunk(w: &Waveform, spec: &ChunkSpec) -> Vec<Vec<f64>> {
    let x = w.samples();
    (0..chunk_count(x.len(), spec))
        .map(|i| {
            let start = i * spec.hop;
            let end = (start + spec.length).min(x.len());
            let mut frame = x[start..end].to_vec();
            frame.resize(spec.length, 0.0);
            frame
        })
        .collect()
}

fn triangle(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 1.0 - (2.0 * (i as f64 + 0.5) / len as f64 - 1.0).abs())
        .collect()
}

/// Inverse of [`chunk`]: triangular-weighted overlap-add normalized by summed weights.
pub fn overlap_add(
    frames: &[Vec<f64>],
    spec: &ChunkSpec,
    original_len: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    if let Some((i, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| f.len() != spec.length)
    {
        return Err(AudioError::InvalidParameter(format!(
            "frame {i} has {} samples, expected {}",
            f.len(),
            spec.length
        )));
    }
    let weights = triangle(spec.length);
    let mut acc = vec![0.0; original_len];
    let mut cover = vec![0.0; original_len];
    for (i, frame) in frames.iter().enumerate() {
        let start = i * spec.hop;
        if start >= original_len {
            break;
        }
        let end = (start + spec.length).min(original_len);
        for (j, n) in (start..end).enumerate() {
            acc[n] += weights[j] * frame[j];
            cover[n] += weights[j];
        }
    }
    let out = acc
        .into_iter()
        .zip(cover)
        .map(|(a, c)| if c > 0.0 { a / c } else { 0.0 })
        .collect();
    Waveform::new(out, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(len: usize) -> Waveform {
        Waveform::new((0..len).map(|i| (i as f64 * 0.37).sin()).collect(), 44_100).unwrap()
    }

    #[test]
    fn default_hop() {
        let s = ChunkSpec::default();
        assert_eq!((s.length(), s.hop()), (44_160, 33_120));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ChunkSpec::new(0, 0.25).is_err());
        assert!(ChunkSpec::new(10, 1.0).is_err());
        assert!(ChunkSpec::new(10, -0.1).is_err());
        assert!(ChunkSpec::new(1, 0.9).is_err());
    }

    #[test]
    fn exact_length_gives_one_unpadded_frame() {
        let w = ramp(44_160);
        let frames = chunk(&w, &ChunkSpec::default());
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0], w.samples());
    }

    #[test]
    fn two_frames_tile_77280() {
        let frames = chunk(&ramp(77_280), &ChunkSpec::default());
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1][44_159], ramp(77_280).samples()[77_279]);
    }

    #[test]
    fn second_frame_of_50000_is_padded() {
        let frames = chunk(&ramp(50_000), &ChunkSpec::default());
        assert_eq!(frames.len(), 2);
        let tail = &frames[1][50_000 - 33_120..];
        assert_eq!(tail.len(), 27_280);
        assert!(tail.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_gives_no_frames() {
        assert!(chunk(&Waveform::silence(0, 44_100), &ChunkSpec::default()).is_empty());
    }

    #[test]
    fn single_frame_overlap_add_is_the_frame() {
        let spec = ChunkSpec::new(64, 0.25).unwrap();
        let frame: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let out = overlap_add(std::slice::from_ref(&frame), &spec, 64, 8000).unwrap();
        for (a, b) in out.samples().iter().zip(&frame) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_survives_round_trip() {
        let spec = ChunkSpec::default();
        let w = Waveform::new(vec![1.0; 77_280], 44_100).unwrap();
        let out = overlap_add(&chunk(&w, &spec), &spec, w.len(), 44_100).unwrap();
        assert!(out.samples().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mismatched_frame_length_errors() {
        let spec = ChunkSpec::new(8, 0.5).unwrap();
        assert!(overlap_add(&[vec![0.0; 8], vec![0.0; 7]], &spec, 12, 8000).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            len in 1usize..400,
            length in 1usize..64,
            overlap in 0.0f64..0.9,
            seed in any::<u64>(),
        ) {
            let Ok(spec) = ChunkSpec::new(length, overlap) else { return Ok(()); };
            let mut s = seed | 1;
            let x: Vec<f64> = (0..len).map(|_| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            }).collect();
            let w = Waveform::new(x, 8000).unwrap();
            let frames = chunk(&w, &spec);
            prop_assert_eq!(frames.len(), chunk_count(len, &spec));
            let out = overlap_add(&frames, &spec, len, 8000).unwrap();
            for (a, b) in out.samples().iter().zip(w.samples()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
