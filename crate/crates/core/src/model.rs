//! Architecture-independent plumbing: chunked inference, checkpoint export and import.

use std::path::Path;

use finsep_numcore::{Checkpoint, Compute, DType, Eager, ParamStore, Tensor};
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{chunk, overlap_add, AudioError, ChunkSpec, Waveform};
use crate::demucs::{Demucs, DemucsConfig};
use crate::tasnet::{TasNet, TasNetConfig};

/// Fish and background.
pub const N_SOURCES: usize = 2;
/// Prefix of model parameters inside a checkpoint.
pub const PARAM_PREFIX: &str = "param.";

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("model produced non-finite output")]
    NonFinite,
    #[error(transparent)]
    Numcore(#[from] finsep_numcore::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A two-source separator evaluated on batches of mono frames.
pub trait Separator {
    const ARCH: &'static str;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// `[B, 1, T] -> [B, 2, T]`, channel 0 fish, channel 1 background.
    fn separate_batch<C: Compute>(&self, ctx: &mut C, x: &C::Value) -> Result<C::Value>;

    /// Stores configuration and initialization seed as checkpoint metadata.
    fn write_meta(&self, ck: &mut Checkpoint);
}

#[derive(Clone, Debug)]
pub enum Model {
    TasNet(TasNet),
    Demucs(Demucs),
}

impl From<TasNet> for Model {
    fn from(m: TasNet) -> Self {
        Self::TasNet(m)
    }
}

impl From<Demucs> for Model {
    fn from(m: Demucs) -> Self {
        Self::Demucs(m)
    }
}

impl Model {
    /// Builds a freshly initialized model for `arch` ("tasnet" or "demucs").
    pub fn with_defaults(arch: &str, seed: u64) -> Result<Self> {
        match arch {
            TasNet::ARCH => Ok(TasNet::new(TasNetConfig::default(), seed)?.into()),
            Demucs::ARCH => Ok(Demucs::new(DemucsConfig::default(), seed)?.into()),
            other => Err(ModelError::UnknownArch(other.to_string())),
        }
    }

    pub fn arch(&self) -> &'static str {
        match self {
            Self::TasNet(_) => TasNet::ARCH,
            Self::Demucs(_) => Demucs::ARCH,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Self::TasNet(m) => m.params(),
            Self::Demucs(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::TasNet(m) => m.params_mut(),
            Self::Demucs(m) => m.params_mut(),
        }
    }

    pub fn separate_batch<C: Compute>(&self, ctx: &mut C, x: &C::Value) -> Result<C::Value> {
        match self {
            Self::TasNet(m) => m.separate_batch(ctx, x),
            Self::Demucs(m) => m.separate_batch(ctx, x),
        }
    }

    /// Separates one frame of samples into `(fish, background)`.
    pub fn separate_frame(&self, frame: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let y = self.separate_batch(&mut Eager, &Tensor::from_signal(frame))?;
        if !y.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok((y.row(0, 0).to_vec(), y.row(0, 1).to_vec()))
    }

    /// Full-length separation: chunk, separate each chunk, overlap-add.
    pub fn separate(&self, mixture: &Waveform, spec: &ChunkSpec) -> Result<(Waveform, Waveform)> {
        let rate = mixture.sample_rate();
        let frames = chunk(mixture, spec);
        let outputs = frames
            .par_iter()
            .map(|f| self.separate_frame(f))
            .collect::<Result<Vec<_>>>()?;
        let (fish, bg): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
        Ok((
            overlap_add(&fish, spec, mixture.len(), rate)?,
            overlap_add(&bg, spec, mixture.len(), rate)?,
        ))
    }

    pub fn write_meta(&self, ck: &mut Checkpoint) {
        match self {
            Self::TasNet(m) => m.write_meta(ck),
            Self::Demucs(m) => m.write_meta(ck),
        }
    }

    /// Checkpoint holding configuration metadata and every parameter at `dtype`.
    pub fn to_checkpoint(&self, dtype: DType) -> Checkpoint {
        let mut ck = Checkpoint::new(self.arch());
        self.write_meta(&mut ck);
        ck.push_store(PARAM_PREFIX, self.params(), dtype);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let seed = ck.meta_parsed("init_seed").unwrap_or(0);
        let mut model: Self = match ck.arch.as_str() {
            TasNet::ARCH => TasNet::new(TasNetConfig::from_meta(ck)?, seed)?.into(),
            Demucs::ARCH => Demucs::new(DemucsConfig::from_meta(ck)?, seed)?.into(),
            other => return Err(ModelError::UnknownArch(other.to_string())),
        };
        model.params_mut().load_from(&ck.store(PARAM_PREFIX))?;
        if !model.params().all_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        Ok(self.to_checkpoint(dtype).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Sets every bias (including normalization offsets and LSTM biases) to zero.
pub fn zero_biases(store: &mut ParamStore) {
    let ids: Vec<_> = store
        .ids()
        .zip(store.iter())
        .filter(|(_, (name, _))| {
            [".bias", ".b_ih", ".b_hh"]
                .iter()
                .any(|s| name.ends_with(s))
        })
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}
