//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Result;
use finsep::audio::{ChunkSpec, CANONICAL_RATE};
use finsep::demucs::DemucsConfig;
use finsep::mixgen::MixConfig;
use finsep::tasnet::{parse_norm, TasNetConfig};
use finsep::train::{LossKind, TrainConfig};

use crate::exit::{bail_usage, usage};

const KEYS: &[&str] = &[
    "arch",
    "manifest",
    "out_dir",
    "sample_rate",
    "chunk_length",
    "chunk_overlap",
    "alpha_f",
    "k_min",
    "k_max",
    "split_ratio",
    "split_seed",
    "init_seed",
    "data_seed",
    "epochs",
    "learning_rate",
    "batch_size",
    "loss",
    "checkpoint_every",
    "tasnet.frame_len",
    "tasnet.basis",
    "tasnet.bottleneck",
    "tasnet.hidden",
    "tasnet.kernel",
    "tasnet.blocks",
    "tasnet.repeats",
    "tasnet.norm",
    "demucs.depth",
    "demucs.channels",
    "demucs.growth",
    "demucs.kernel",
    "demucs.stride",
    "demucs.lstm_layers",
];

/// Raw key/value pairs; later insertions win.
#[derive(Clone, Debug, Default)]
pub struct Pairs {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

impl Pairs {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = Self {
            values: BTreeMap::new(),
            base: base.to_path_buf(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail_usage!("config line {}: expected key = value", i + 1);
            };
            pairs
                .set(k.trim(), v.trim())
                .map_err(|e| usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            bail_usage!("unknown key `{key}`");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, kv: &str) -> Result<()> {
        let Some((k, v)) = kv.split_once('=') else {
            bail_usage!("override `{kv}` is not key=value");
        };
        self.set(k.trim(), v.trim())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(|v| {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.base.join(p)
            }
        })
    }
}

/// Fully validated settings shared by the subcommands.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch: String,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub sample_rate: u32,
    pub chunk: ChunkSpec,
    pub mix: MixConfig,
    pub split_ratio: f64,
    pub split_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub train: TrainConfig,
    pub tasnet: TasNetConfig,
    pub demucs: DemucsConfig,
}

impl RunConfig {
    pub fn from_pairs(p: &Pairs) -> Result<Self> {
        let arch: String = p.get_or("arch", "tasnet".to_string())?;
        if arch != "tasnet" && arch != "demucs" {
            bail_usage!("unknown architecture `{arch}` (expected tasnet or demucs)");
        }
        let sample_rate = p.get_or("sample_rate", CANONICAL_RATE)?;
        if sample_rate == 0 {
            bail_usage!("sample_rate must be positive");
        }
        let chunk = ChunkSpec::new(
            p.get_or("chunk_length", 44_160)?,
            p.get_or("chunk_overlap", 0.25)?,
        )
        .map_err(|e| usage(format!("chunk settings: {e}")))?;
        let mix = MixConfig {
            k_min: p.get_or("k_min", 0.0)?,
            k_max: p.get_or("k_max", 1.0)?,
            alpha_f: p.get_or("alpha_f", 0.1)?,
        };
        mix.validate()
            .map_err(|e| usage(format!("mixing settings: {e}")))?;
        let split_ratio = p.get_or("split_ratio", 0.8)?;
        if !(split_ratio > 0.0 && split_ratio <= 1.0) {
            bail_usage!("split_ratio {split_ratio} outside (0, 1]");
        }
        let data_seed: Option<u64> = p.get("data_seed")?;
        let loss = match p.values.get("loss") {
            Some(v) => v
                .parse::<LossKind>()
                .map_err(|e| usage(format!("loss: {e}")))?,
            None => LossKind::for_arch(&arch),
        };
        let train = TrainConfig {
            learning_rate: p.get_or("learning_rate", 1e-4)?,
            epochs: p.get_or("epochs", 200)?,
            batch_size: p.get_or("batch_size", 4)?,
            seed: data_seed.unwrap_or(0),
            loss,
            checkpoint_every: p.get_or("checkpoint_every", 1)?,
        };
        train.validate().map_err(|e| usage(e.to_string()))?;
        let td = TasNetConfig::default();
        let norm = match p.values.get("tasnet.norm") {
            Some(v) => parse_norm(v).map_err(|e| usage(e.to_string()))?,
            None => td.norm,
        };
        let tasnet = TasNetConfig {
            frame_len: p.get_or("tasnet.frame_len", td.frame_len)?,
            basis: p.get_or("tasnet.basis", td.basis)?,
            bottleneck: p.get_or("tasnet.bottleneck", td.bottleneck)?,
            hidden: p.get_or("tasnet.hidden", td.hidden)?,
            kernel: p.get_or("tasnet.kernel", td.kernel)?,
            blocks: p.get_or("tasnet.blocks", td.blocks)?,
            repeats: p.get_or("tasnet.repeats", td.repeats)?,
            norm,
            ..td
        };
        tasnet.validate().map_err(|e| usage(e.to_string()))?;
        let dd = DemucsConfig::default();
        let demucs = DemucsConfig {
            depth: p.get_or("demucs.depth", dd.depth)?,
            channels: p.get_or("demucs.channels", dd.channels)?,
            growth: p.get_or("demucs.growth", dd.growth)?,
            kernel: p.get_or("demucs.kernel", dd.kernel)?,
            stride: p.get_or("demucs.stride", dd.stride)?,
            lstm_layers: p.get_or("demucs.lstm_layers", dd.lstm_layers)?,
            ..dd
        };
        demucs.validate().map_err(|e| usage(e.to_string()))?;
        Ok(Self {
            arch,
            manifest: p.path("manifest"),
            out_dir: p.path("out_dir"),
            sample_rate,
            chunk,
            mix,
            split_ratio,
            split_seed: p.get("split_seed")?,
            init_seed: p.get("init_seed")?,
            data_seed,
            train,
            tasnet,
            demucs,
        })
    }

    /// Training needs every seed spelled out.
    pub fn require_training_seeds(&self) -> Result<(u64, u64)> {
        match (self.init_seed, self.data_seed) {
            (Some(i), Some(d)) => Ok((i, d)),
            _ => Err(usage(
                "training requires both init_seed and data_seed in the configuration",
            )),
        }
    }

    pub fn require_split_seed(&self) -> Result<u64> {
        self.split_seed.ok_or_else(|| {
            usage("manifest has `auto` split entries but no split_seed is configured")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit::{code_for, USAGE};

    fn cfg(text: &str) -> Result<RunConfig> {
        RunConfig::from_pairs(&Pairs::parse(text, Path::new("/base"))?)
    }

    #[test]
    fn defaults() {
        let c = cfg("").unwrap();
        assert_eq!(c.arch, "tasnet");
        assert_eq!(c.sample_rate, 44_100);
        assert_eq!((c.chunk.length(), c.chunk.hop()), (44_160, 33_120));
        assert_eq!(c.train.loss, LossKind::SiSnr);
        assert_eq!(c.tasnet, TasNetConfig::default());
        assert_eq!(c.mix, MixConfig::default());
        assert!(c.require_training_seeds().is_err());
    }

    #[test]
    fn values_comments_and_paths() {
        let c = cfg("arch = demucs # synthesis\nmanifest = data/m.tsv\nout_dir=/abs/run\ninit_seed=3\ndata_seed = 4\n\ndemucs.channels = 16\nepochs=5")
            .unwrap();
        assert_eq!(c.arch, "demucs");
        assert_eq!(c.train.loss, LossKind::L1);
        assert_eq!(c.manifest.as_deref(), Some(Path::new("/base/data/m.tsv")));
        assert_eq!(c.out_dir.as_deref(), Some(Path::new("/abs/run")));
        assert_eq!(c.require_training_seeds().unwrap(), (3, 4));
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.demucs.channels, 16);
        assert_eq!(c.train.epochs, 5);
    }

    #[test]
    fn overrides_win() {
        let mut p = Pairs::parse("epochs = 5\nlearning_rate = 0.01", Path::new(".")).unwrap();
        p.set_override("epochs=7").unwrap();
        let c = RunConfig::from_pairs(&p).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.learning_rate, 0.01);
    }

    #[test]
    fn rejects_bad_input_as_usage_errors() {
        for text in [
            "arch = wavenet",
            "bogus = 1",
            "epochs = many",
            "no equals sign",
            "chunk_overlap = 1.5",
            "k_min = 0.5\nk_max = 0.1",
            "tasnet.kernel = 4",
            "tasnet.norm = batch",
            "batch_size = 0",
            "split_ratio = 0",
            "loss = mse",
        ] {
            let err = cfg(text).unwrap_err();
            assert_eq!(code_for(&err), USAGE, "{text}: {err}");
        }
    }
}
