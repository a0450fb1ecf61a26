//! Synthetic mixtures of fish vocalizations and sea background.
//!
//! Every random draw comes from a generator keyed by `(seed, stream, epoch, index)`,
//! so a sample can be regenerated in isolation and in any order.

mod manifest;
mod testset;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{chunk, AudioError, ChunkSpec, Waveform};

pub use manifest::{Manifest, ManifestEntry, SourceKind, SplitTag};
pub use testset::{read_testset, write_testset, TestItem, INDEX_FILE};

#[derive(Error, Debug)]
pub enum MixError {
    #[error("frame length mismatch: fish {fish}, background {background}")]
    LengthMismatch { fish: usize, background: usize },
    #[error("empty {0} pool")]
    EmptyPool(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("test set index: {0}")]
    Index(String),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, MixError>;

/// Gains applied to one fish/background pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixCoefficients {
    pub k_f: f64,
    pub k_b: f64,
    pub alpha_f: f64,
}

/// Ranges for the random gains and the fixed fish attenuation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixConfig {
    pub k_min: f64,
    pub k_max: f64,
    pub alpha_f: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            k_min: 0.0,
            k_max: 1.0,
            alpha_f: 0.1,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k_min.is_finite()
            && self.k_max.is_finite()
            && self.k_min >= 0.0
            && self.k_max >= self.k_min
            && self.alpha_f.is_finite()
            && self.alpha_f > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MixError::InvalidParameter(format!(
                "k range [{}, {}], alpha_f {}",
                self.k_min, self.k_max, self.alpha_f
            )))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> MixCoefficients {
        MixCoefficients {
            k_f: rng.random_range(self.k_min..=self.k_max),
            k_b: rng.random_range(self.k_min..=self.k_max),
            alpha_f: self.alpha_f,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub mixture: Vec<f64>,
    pub source_fish: Vec<f64>,
    pub source_background: Vec<f64>,
    pub coeffs: MixCoefficients,
    pub fish_id: usize,
    pub background_id: usize,
    pub epoch: u64,
}

impl MixtureSample {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Rounds both sources to `f32` and recomputes the mixture as an `f32` sum,
    /// so the triple survives a float32 file round trip unchanged.
    pub fn quantize_f32(&self) -> Self {
        let q = |v: &[f64]| -> Vec<f32> { v.iter().map(|&x| x as f32).collect() };
        let (s0, s1) = (q(&self.source_fish), q(&self.source_background));
        Self {
            mixture: s0.iter().zip(&s1).map(|(&a, &b)| (a + b) as f64).collect(),
            source_fish: s0.into_iter().map(f64::from).collect(),
            source_background: s1.into_iter().map(f64::from).collect(),
            ..self.clone()
        }
    }
}

/// `s0 = k_f * alpha_f * fish`, `s1 = (1 + k_b) * bg`, `mixture = s0 + s1`.
pub fn make_sample(fish: &[f64], bg: &[f64], coeffs: MixCoefficients) -> Result<MixtureSample> {
    if fish.len() != bg.len() {
        return Err(MixError::LengthMismatch {
            fish: fish.len(),
            background: bg.len(),
        });
    }
    let gf = coeffs.k_f * coeffs.alpha_f;
    let gb = 1.0 + coeffs.k_b;
    let source_fish: Vec<f64> = fish.iter().map(|&v| gf * v).collect();
    let source_background: Vec<f64> = bg.iter().map(|&v| gb * v).collect();
    let mixture = source_fish
        .iter()
        .zip(&source_background)
        .map(|(a, b)| a + b)
        .collect();
    Ok(MixtureSample {
        mixture,
        source_fish,
        source_background,
        coeffs,
        fish_id: 0,
        background_id: 0,
        epoch: 0,
    })
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_SPLIT: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(seed, stream, epoch, index)` key.
pub fn keyed_rng(seed: u64, stream: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let key = [stream, epoch, index]
        .into_iter()
        .fold(splitmix64(seed), |acc, part| splitmix64(acc ^ part));
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

/// Seeded shuffle of `0..count`; the first `round(ratio * count)` go to training.
pub fn split_dataset(count: usize, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if count == 0 {
        return Err(MixError::EmptyPool("item"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(MixError::InvalidParameter(format!(
            "split ratio {ratio} outside (0, 1]"
        )));
    }
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut keyed_rng(seed, STREAM_SPLIT, 0, count as u64));
    let n_train = (ratio * count as f64).round() as usize;
    let mut test_ids = ids.split_off(n_train);
    ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(DatasetSplit {
        train_ids: ids,
        test_ids,
        ratio,
        seed,
    })
}

/// Per-epoch random pairing of every fish chunk with a background chunk.
#[derive(Clone, Debug)]
pub struct EpochMixer {
    fish: Vec<Vec<f64>>,
    backgrounds: Vec<Vec<f64>>,
    config: MixConfig,
    seed: u64,
}

impl EpochMixer {
    pub fn new(
        fish: Vec<Vec<f64>>,
        backgrounds: Vec<Vec<f64>>,
        config: MixConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if fish.is_empty() {
            return Err(MixError::EmptyPool("fish"));
        }
        if backgrounds.is_empty() {
            return Err(MixError::EmptyPool("background"));
        }
        Ok(Self {
            fish,
            backgrounds,
            config,
            seed,
        })
    }

    /// Number of samples per epoch (one per fish chunk).
    pub fn len(&self) -> usize {
        self.fish.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fish.is_empty()
    }

    pub fn config(&self) -> &MixConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample(&self, epoch: u64, fish_index: usize) -> Result<MixtureSample> {
        epoch_sample(
            epoch,
            fish_index,
            &self.fish,
            &self.backgrounds,
            self.seed,
            &self.config,
        )
    }
}

pub fn epoch_sample(
    epoch: u64,
    fish_index: usize,
    fish: &[Vec<f64>],
    backgrounds: &[Vec<f64>],
    seed: u64,
    config: &MixConfig,
) -> Result<MixtureSample> {
    if backgrounds.is_empty() {
        return Err(MixError::EmptyPool("background"));
    }
    let f = fish.get(fish_index).ok_or(MixError::EmptyPool("fish"))?;
    let mut rng = keyed_rng(seed, STREAM_TRAIN, epoch, fish_index as u64);
    let background_id = rng.random_range(0..backgrounds.len());
    let coeffs = config.draw(&mut rng);
    let mut s = make_sample(f, &backgrounds[background_id], coeffs)?;
    s.fish_id = fish_index;
    s.background_id = background_id;
    s.epoch = epoch;
    Ok(s)
}

/// Fixed evaluation set: item `i` uses fish chunk `i mod |fish|` and a random background.
pub fn build_testset(
    fish: &[Vec<f64>],
    backgrounds: &[Vec<f64>],
    count: usize,
    seed: u64,
    config: &MixConfig,
) -> Result<Vec<MixtureSample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    config.validate()?;
    if fish.is_empty() {
        return Err(MixError::EmptyPool("fish"));
    }
    if backgrounds.is_empty() {
        return Err(MixError::EmptyPool("background"));
    }
    (0..count)
        .map(|i| {
            let mut rng = keyed_rng(seed, STREAM_TEST, 0, i as u64);
            let fish_id = i % fish.len();
            let background_id = rng.random_range(0..backgrounds.len());
            let coeffs = config.draw(&mut rng);
            let mut s = make_sample(&fish[fish_id], &backgrounds[background_id], coeffs)?;
            s.fish_id = fish_id;
            s.background_id = background_id;
            Ok(s)
        })
        .collect()
}

/// Chunks every waveform and concatenates the frames.
pub fn chunk_pool(waves: &[Waveform], spec: &ChunkSpec) -> Vec<Vec<f64>> {
    waves.iter().flat_map(|w| chunk(w, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn coeffs(k_f: f64, k_b: f64) -> MixCoefficients {
        MixCoefficients {
            k_f,
            k_b,
            alpha_f: 0.1,
        }
    }

    fn pool(n: usize, len: usize, offset: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..len)
                    .map(|j| ((i * len + j) as f64 * 0.31 + offset).sin())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn worked_example() {
        let s = make_sample(&[1.0, 1.0], &[1.0, 0.0], coeffs(1.0, 0.0)).unwrap();
        assert_eq!(s.source_fish, vec![0.1, 0.1]);
        assert_eq!(s.source_background, vec![1.0, 0.0]);
        assert_eq!(s.mixture, vec![1.1, 0.1]);
    }

    #[test]
    fn zero_fish_gain_leaves_background() {
        let s = make_sample(&[0.3, -0.7], &[0.5, 0.25], coeffs(0.0, 0.4)).unwrap();
        assert!(s.source_fish.iter().all(|&v| v == 0.0));
        assert_eq!(s.mixture, s.source_background);
    }

    #[test]
    fn unit_background_gain() {
        let s = make_sample(&[0.0], &[0.2], coeffs(0.5, 0.0)).unwrap();
        assert_eq!(s.source_background, vec![0.2]);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(matches!(
            make_sample(&[1.0], &[1.0, 2.0], coeffs(1.0, 1.0)),
            Err(MixError::LengthMismatch {
                fish: 1,
                background: 2
            })
        ));
    }

    #[test]
    fn split_counts() {
        let s = split_dataset(10, 0.8, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (8, 2));
        let s = split_dataset(143, 0.8, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (114, 29));
        let s = split_dataset(7, 1.0, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (7, 0));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_dataset(50, 0.8, 9).unwrap();
        assert_eq!(a, split_dataset(50, 0.8, 9).unwrap());
        assert_ne!(a.test_ids, split_dataset(50, 0.8, 10).unwrap().test_ids);
        let mut all: Vec<usize> = a.train_ids.iter().chain(&a.test_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split_dataset(0, 0.8, 1).is_err());
        assert!(split_dataset(5, 0.0, 1).is_err());
        assert!(split_dataset(5, 1.5, 1).is_err());
    }

    #[test]
    fn epochs_remix() {
        let fish = pool(3, 16, 0.0);
        let bg = pool(4, 16, 1.0);
        let cfg = MixConfig::default();
        let a = epoch_sample(0, 1, &fish, &bg, 42, &cfg).unwrap();
        let b = epoch_sample(1, 1, &fish, &bg, 42, &cfg).unwrap();
        assert!(a.background_id != b.background_id || a.coeffs != b.coeffs);
        assert_eq!(a, epoch_sample(0, 1, &fish, &bg, 42, &cfg).unwrap());
    }

    #[test]
    fn single_background_always_chosen() {
        let fish = pool(3, 8, 0.0);
        let bg = pool(1, 8, 1.0);
        for epoch in 0..20 {
            let s = epoch_sample(epoch, 2, &fish, &bg, 5, &MixConfig::default()).unwrap();
            assert_eq!(s.background_id, 0);
        }
    }

    #[test]
    fn empty_pools_error() {
        assert!(epoch_sample(0, 0, &pool(1, 4, 0.0), &[], 1, &MixConfig::default()).is_err());
        assert!(EpochMixer::new(vec![], pool(1, 4, 0.0), MixConfig::default(), 1).is_err());
        assert!(build_testset(&[], &pool(1, 4, 0.0), 3, 1, &MixConfig::default()).is_err());
    }

    #[test]
    fn testset_properties() {
        let fish = pool(3, 32, 0.0);
        let bg = pool(5, 32, 2.0);
        let cfg = MixConfig::default();
        assert!(build_testset(&fish, &bg, 0, 1, &cfg).unwrap().is_empty());
        let a = build_testset(&fish, &bg, 12, 7, &cfg).unwrap();
        assert_eq!(a, build_testset(&fish, &bg, 12, 7, &cfg).unwrap());
        for s in &a {
            for i in 0..s.len() {
                assert_eq!(s.mixture[i], s.source_fish[i] + s.source_background[i]);
            }
        }
    }

    #[test]
    fn quantized_sample_is_f32_additive() {
        let s = make_sample(&[0.123456789, -0.5], &[0.3, 0.777777777], coeffs(0.9, 0.3))
            .unwrap()
            .quantize_f32();
        for i in 0..2 {
            let (a, b) = (s.source_fish[i] as f32, s.source_background[i] as f32);
            assert_eq!(s.mixture[i], (a + b) as f64);
            assert_eq!(s.source_fish[i], a as f64);
        }
    }

    proptest! {
        #[test]
        fn additivity_and_scaling(
            fish in prop::collection::vec(-1.0f64..1.0, 1..64),
            seed in any::<u64>(),
            k_f in 0.0f64..1.0,
            k_b in 0.0f64..1.0,
        ) {
            let bg: Vec<f64> = fish.iter().enumerate().map(|(i, v)| (v * 3.1 + i as f64 + seed as f64).sin()).collect();
            let s = make_sample(&fish, &bg, coeffs(k_f, k_b)).unwrap();
            for i in 0..fish.len() {
                prop_assert_eq!(s.mixture[i], s.source_fish[i] + s.source_background[i]);
            }
            let d = make_sample(&fish, &bg, coeffs(2.0 * k_f, k_b)).unwrap();
            prop_assert_eq!(&d.source_background, &s.source_background);
            for i in 0..fish.len() {
                prop_assert_eq!(d.source_fish[i], 2.0 * s.source_fish[i]);
            }
        }

        #[test]
        fn epoch_draws_stay_in_range(epoch in 0u64..1000, idx in 0usize..4, seed in any::<u64>()) {
            let cfg = MixConfig { k_min: 0.2, k_max: 0.6, alpha_f: 0.1 };
            let s = epoch_sample(epoch, idx, &pool(4, 4, 0.0), &pool(3, 4, 1.0), seed, &cfg).unwrap();
            prop_assert!((0.2..=0.6).contains(&s.coeffs.k_f));
            prop_assert!((0.2..=0.6).contains(&s.coeffs.k_b));
            prop_assert!(s.background_id < 3);
        }
    }
}
