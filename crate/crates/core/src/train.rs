//! Supervised training: losses, Adam, the epoch loop, checkpoints and the CSV log.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use finsep_numcore::kernels::{l1_rows, neg_si_snr_row};
use finsep_numcore::{Checkpoint, Compute, DType, Graph, Tensor};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::mixgen::{keyed_rng, EpochMixer, MixError, MixtureSample};
use crate::model::{Model, ModelError, PARAM_PREFIX};

const STREAM_ORDER: u64 = 4;
pub const LOG_HEADER: &str = "step,epoch,loss,loss_fish,loss_background,wall_secs";

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (batch keys {keys:?})")]
    NonFiniteLoss { step: u64, keys: Vec<(u64, usize)> },
    #[error("non-finite parameters after step {step}")]
    NonFiniteParams { step: u64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("batch frames have unequal lengths")]
    RaggedBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] MixError),
}

impl From<finsep_numcore::Error> for TrainError {
    fn from(e: finsep_numcore::Error) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SiSnr,
    L1,
}

impl LossKind {
    /// Default loss per architecture.
    pub fn for_arch(arch: &str) -> Self {
        if arch == "demucs" {
            Self::L1
        } else {
            Self::SiSnr
        }
    }
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "si-snr" | "sisnr" => Ok(Self::SiSnr),
            "l1" => Ok(Self::L1),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SiSnr => "si-snr",
            Self::L1 => "l1",
        })
    }
}

/// Negated SI-SNR in dB, clamped to `[-60, 60]`; silent targets use the estimate energy.
pub fn si_snr_loss(estimate: &[f64], target: &[f64]) -> f64 {
    assert_eq!(estimate.len(), target.len(), "si_snr_loss: length mismatch");
    neg_si_snr_row(estimate, target).0
}

/// SI-SNR in dB (the negation of [`si_snr_loss`]).
pub fn si_snr(estimate: &[f64], target: &[f64]) -> f64 {
    -si_snr_loss(estimate, target)
}

/// Mean absolute error.
pub fn l1_loss(estimate: &[f64], target: &[f64]) -> f64 {
    assert_eq!(estimate.len(), target.len(), "l1_loss: length mismatch");
    let t = |v: &[f64]| Tensor::new(vec![1, 1, v.len()], v.to_vec()).expect("length matches");
    l1_rows(&t(estimate), &t(target))
        .expect("shapes match")
        .item()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(
        params.len(),
        grads.len(),
        "adam_step: parameter/gradient count"
    );
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "adam_step: shape of parameter {i}");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            *w -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Write a checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 4,
            seed: 0,
            loss: LossKind::SiSnr,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch size must be positive".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub loss_fish: f64,
    pub loss_background: f64,
    pub wall_secs: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.step, self.epoch, self.loss, self.loss_fish, self.loss_background, self.wall_secs
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn step(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Key-addressed stream of training samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn sample(&self, epoch: u64, index: usize) -> Result<MixtureSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for EpochMixer {
    fn len(&self) -> usize {
        EpochMixer::len(self)
    }

    fn sample(&self, epoch: u64, index: usize) -> Result<MixtureSample> {
        Ok(EpochMixer::sample(self, epoch, index)?)
    }
}

/// The same samples every epoch.
#[derive(Clone, Debug)]
pub struct FixedSamples(pub Vec<MixtureSample>);

impl SampleSource for FixedSamples {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, _epoch: u64, index: usize) -> Result<MixtureSample> {
        Ok(self.0[index].clone())
    }
}

/// Where [`Trainer::run`] writes its side effects.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub state: TrainState,
    started: Instant,
    wall_offset: f64,
}

fn stack(batch: &[MixtureSample]) -> Result<(Tensor, Tensor)> {
    let len = batch[0].len();
    if batch.iter().any(|s| s.len() != len) {
        return Err(TrainError::RaggedBatch);
    }
    let mut x = Vec::with_capacity(batch.len() * len);
    let mut y = Vec::with_capacity(2 * batch.len() * len);
    for s in batch {
        x.extend_from_slice(&s.mixture);
        y.extend_from_slice(&s.source_fish);
        y.extend_from_slice(&s.source_background);
    }
    Ok((
        Tensor::new(vec![batch.len(), 1, len], x)?,
        Tensor::new(vec![batch.len(), 2, len], y)?,
    ))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !model.params().all_finite() {
            return Err(TrainError::NonFiniteParams { step: 0 });
        }
        let adam = AdamState::new(model.params().tensors());
        Ok(Self {
            model,
            config,
            state: TrainState {
                adam,
                epoch: 0,
                history: Vec::new(),
            },
            started: Instant::now(),
            wall_offset: 0.0,
        })
    }

    /// Loss of the current model on `batch` without updating anything: `(total, fish, background)`.
    pub fn evaluate_loss(&self, batch: &[MixtureSample]) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let (_, rows) = self.forward_rows(&mut g, batch)?;
        Ok(summarize(g.value(rows)))
    }

    fn forward_rows(
        &self,
        g: &mut Graph,
        batch: &[MixtureSample],
    ) -> Result<(finsep_numcore::Var, finsep_numcore::Var)> {
        let (x, target) = stack(batch)?;
        let xv = g.input(x);
        let y = self.model.separate_batch(g, &xv)?;
        let rows = match self.config.loss {
            LossKind::SiSnr => g.neg_si_snr_rows(y, &target)?,
            LossKind::L1 => g.l1_rows(y, &target)?,
        };
        Ok((y, rows))
    }

    /// One optimizer step on `batch`; `keys` identify the samples for diagnostics.
    pub fn step(&mut self, batch: &[MixtureSample], keys: &[(u64, usize)]) -> Result<StepRecord> {
        let step = self.state.step() + 1;
        let mut g = Graph::new();
        let (_, rows) = self.forward_rows(&mut g, batch)?;
        let (loss, loss_fish, loss_background) = summarize(g.value(rows));
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                keys: keys.to_vec(),
            });
        }
        let total = g.sum(rows);
        let mean = g.scale(&total, 1.0 / batch.len() as f64);
        let grads = g.backward(mean)?;
        let grads = g.param_grads(&grads, self.model.params());
        let adam = self.config.adam();
        adam_step(
            self.model.params_mut().tensors_mut(),
            &grads,
            &mut self.state.adam,
            &adam,
        );
        if !self.model.params().all_finite() {
            return Err(TrainError::NonFiniteParams { step });
        }
        let record = StepRecord {
            step,
            epoch: self.state.epoch,
            loss,
            loss_fish,
            loss_background,
            wall_secs: self.wall_offset + self.started.elapsed().as_secs_f64(),
        };
        self.state.history.push(record);
        Ok(record)
    }

    /// Sample order for `epoch`.
    pub fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(self.config.seed, STREAM_ORDER, epoch, 0));
        order
    }

    /// One pass over `source`.
    pub fn run_epoch<S: SampleSource + ?Sized>(
        &mut self,
        source: &S,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        let epoch = self.state.epoch;
        let order = self.epoch_order(epoch, source.len());
        for ids in order.chunks(self.config.batch_size) {
            let batch = ids
                .iter()
                .map(|&i| source.sample(epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let keys: Vec<(u64, usize)> = ids.iter().map(|&i| (epoch, i)).collect();
            let rec = self.step(&batch, &keys)?;
            on_step(&rec);
        }
        self.state.epoch += 1;
        Ok(())
    }

    /// Trains until `config.epochs` epochs are complete, writing checkpoints and the log.
    pub fn run<S: SampleSource + ?Sized>(&mut self, source: &S, out: &TrainOutputs) -> Result<()> {
        if source.is_empty() {
            return Err(TrainError::Data(MixError::EmptyPool("training sample")));
        }
        let mut log = match &out.log {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                }
                Some(self.open_log(p)?)
            }
            None => None,
        };
        if let Some(dir) = &out.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            if self.state.epoch == 0 && self.state.history.is_empty() {
                self.save_checkpoint(dir)?;
            }
        }
        while self.state.epoch < self.config.epochs {
            let mut write_err = None;
            self.run_epoch(source, |rec| {
                log::debug!("step {} epoch {} loss {:.6}", rec.step, rec.epoch, rec.loss);
                if let Some((path, w)) = log.as_mut() {
                    if let Err(e) = writeln!(w, "{}", rec.csv_row()).and_then(|_| w.flush()) {
                        write_err.get_or_insert((path.clone(), e));
                    }
                }
            })?;
            if let Some((path, source)) = write_err {
                return Err(TrainError::Io {
                    path: path.display().to_string(),
                    source,
                });
            }
            let epoch = self.state.epoch;
            if let Some(last) = self.state.history.last() {
                log::info!("epoch {epoch}/{} loss {:.6}", self.config.epochs, last.loss);
            }
            if let Some(dir) = &out.checkpoint_dir {
                let due = self.config.checkpoint_every > 0
                    && epoch.is_multiple_of(self.config.checkpoint_every);
                if due || epoch == self.config.epochs {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(())
    }

    /// Opens the log for appending, rewriting it from the recorded history first.
    fn open_log(&self, path: &Path) -> Result<(PathBuf, BufWriter<File>)> {
        let mut text = format!("{LOG_HEADER}\n");
        for r in &self.state.history {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        crate::fsio::write_atomic(path, text.as_bytes()).map_err(io_err(path))?;
        let f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok((path.to_path_buf(), BufWriter::new(f)))
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let ck = self.to_checkpoint();
        let epoch_path = dir.join(format!("epoch{:04}.ckpt", self.state.epoch));
        ck.save(&epoch_path)?;
        ck.save(&dir.join(LATEST_CHECKPOINT))?;
        Ok(())
    }

    /// Full training state at 64-bit precision.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(DType::F64);
        ck.set_meta("epoch", self.state.epoch);
        ck.set_meta("step", self.state.step());
        ck.set_meta("adam_t", self.state.adam.t);
        ck.set_meta("learning_rate", self.config.learning_rate);
        ck.set_meta("batch_size", self.config.batch_size);
        ck.set_meta("data_seed", self.config.seed);
        ck.set_meta("loss", self.config.loss);
        let names: Vec<String> = self
            .model
            .params()
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        for (i, name) in names.iter().enumerate() {
            ck.push(
                format!("adam.m.{name}"),
                self.state.adam.m[i].clone(),
                DType::F64,
            );
            ck.push(
                format!("adam.v.{name}"),
                self.state.adam.v[i].clone(),
                DType::F64,
            );
        }
        let h = &self.state.history;
        let data = h
            .iter()
            .flat_map(|r| {
                [
                    r.epoch as f64,
                    r.loss,
                    r.loss_fish,
                    r.loss_background,
                    r.wall_secs,
                ]
            })
            .collect();
        ck.push(
            "history",
            Tensor::new(vec![h.len(), 5], data).expect("5 columns"),
            DType::F64,
        );
        ck
    }

    /// Restores a trainer written by [`Trainer::to_checkpoint`]; `config` may extend the epoch count.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let mut t = Self::new(model, config)?;
        let missing = |what: &str| TrainError::Checkpoint(format!("missing {what}"));
        let names: Vec<String> = t
            .model
            .params()
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        for (i, name) in names.iter().enumerate() {
            t.state.adam.m[i] = ck
                .array(&format!("adam.m.{name}"))
                .ok_or_else(|| missing("adam moments"))?
                .clone();
            t.state.adam.v[i] = ck
                .array(&format!("adam.v.{name}"))
                .ok_or_else(|| missing("adam moments"))?
                .clone();
            if t.state.adam.m[i].shape() != t.model.params().tensors()[i].shape()
                || t.state.adam.v[i].shape() != t.model.params().tensors()[i].shape()
            {
                return Err(TrainError::Checkpoint(format!("moment shape for {name}")));
            }
        }
        t.state.adam.t = ck.meta_parsed("adam_t")?;
        t.state.epoch = ck.meta_parsed("epoch")?;
        let h = ck.array("history").ok_or_else(|| missing("history"))?;
        if h.shape().len() != 2 || h.shape()[1] != 5 {
            return Err(TrainError::Checkpoint(format!(
                "history shape {:?}",
                h.shape()
            )));
        }
        t.state.history = h
            .data()
            .chunks(5)
            .enumerate()
            .map(|(i, r)| StepRecord {
                step: i as u64 + 1,
                epoch: r[0] as u64,
                loss: r[1],
                loss_fish: r[2],
                loss_background: r[3],
                wall_secs: r[4],
            })
            .collect();
        t.wall_offset = t.state.history.last().map_or(0.0, |r| r.wall_secs);
        if ck.meta_parsed::<u64>("step")? != t.state.step() {
            return Err(TrainError::Checkpoint(
                "step count disagrees with history".into(),
            ));
        }
        if ck
            .arrays
            .iter()
            .any(|a| a.name.starts_with(PARAM_PREFIX) && a.dtype != DType::F64)
        {
            log::warn!("resuming from reduced-precision parameters");
        }
        Ok(t)
    }

    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }
}

/// `(mean over batch of channel sum, mean fish, mean background)` from `[B, 2]` rows.
fn summarize(rows: &Tensor) -> (f64, f64, f64) {
    let b = rows.shape()[0] as f64;
    let d = rows.data();
    let fish: f64 = d.iter().step_by(2).sum::<f64>() / b;
    let bg: f64 = d.iter().skip(1).step_by(2).sum::<f64>() / b;
    (fish + bg, fish, bg)
}
