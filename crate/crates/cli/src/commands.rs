use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use finsep::audio::{
    chunk, denoise, estimate_noise_profile, peak_normalize, read_wav, resample, spectrogram,
    write_wav, ChunkSpec, WavEncoding, Waveform,
};
use finsep::bsseval::{evaluate_rows, EvalRow, SdrReport};
use finsep::demucs::Demucs;
use finsep::fsio::write_atomic;
use finsep::mixgen::{
    build_testset, read_testset, write_testset, EpochMixer, Manifest, SourceKind, SplitTag,
    TestItem,
};
use finsep::tasnet::TasNet;
use finsep::train::{TrainOutputs, Trainer, LATEST_CHECKPOINT};
use finsep::Model;
use finsep_numcore::DType;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{Pairs, RunConfig};
use crate::exit::{bail_usage, usage};
use crate::{ChunkArgs, EvalArgs, PreprocessArgs, SeparateArgs, SpectroArgs, SynthArgs, TrainArgs};

pub const REPORT_TABLE: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_MODEL: &str = "model.ckpt";

fn to_rate(w: Waveform, rate: u32, what: &Path) -> Result<Waveform> {
    if w.sample_rate() == rate {
        return Ok(w);
    }
    warn!(
        "{}: resampling {} Hz -> {rate} Hz",
        what.display(),
        w.sample_rate()
    );
    Ok(resample(&w, rate)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn chunk_spec(c: &ChunkArgs) -> Result<ChunkSpec> {
    if c.model_rate == 0 {
        bail_usage!("--model-rate must be positive");
    }
    ChunkSpec::new(c.chunk_length, c.overlap).map_err(|e| usage(format!("chunk settings: {e}")))
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let encoding: WavEncoding = a
        .encoding
        .parse()
        .map_err(|e| usage(format!("--encoding: {e}")))?;
    if a.rate == 0 {
        bail_usage!("--rate must be positive");
    }
    let mut w = to_rate(read_wav(&a.input)?, a.rate, &a.input)?;
    if let Some(noise_path) = &a.noise_profile {
        let noise = to_rate(read_wav(noise_path)?, a.rate, noise_path)?;
        let profile = estimate_noise_profile(&noise, a.window, a.hop)
            .with_context(|| format!("noise profile from {}", noise_path.display()))?;
        w = denoise(&w, &profile, a.threshold_sigmas, a.reduction_db)?;
    }
    let w = peak_normalize(&w, a.target_db)
        .with_context(|| format!("normalizing {}", a.input.display()))?;
    write_wav(&w, &a.output, encoding)?;
    info!(
        "wrote {} ({} samples at {} Hz)",
        a.output.display(),
        w.len(),
        w.sample_rate()
    );
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Pairs> {
    let mut pairs = match path {
        Some(p) => Pairs::load(p)?,
        None => Pairs::default(),
    };
    for kv in overrides {
        pairs.set_override(kv)?;
    }
    Ok(pairs)
}

fn load_manifest(path: &Path, cfg: &RunConfig) -> Result<Manifest> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let manifest = Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
        .with_context(|| format!("parsing {}", path.display()))?;
    if manifest.has_auto() {
        return Ok(manifest.resolve_splits(cfg.split_ratio, cfg.require_split_seed()?)?);
    }
    Ok(manifest)
}

/// Reads every file, brings it to the working rate and cuts it into chunks.
fn chunk_files(paths: &[&Path], cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    let waves = paths
        .par_iter()
        .map(|p| to_rate(read_wav(p)?, cfg.sample_rate, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(waves.iter().flat_map(|w| chunk(w, &cfg.chunk)).collect())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut pairs = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(m) = &a.manifest {
        pairs.set("manifest", &m.display().to_string())?;
    }
    let cfg = RunConfig::from_pairs(&pairs)?;
    let Some(manifest_path) = cfg.manifest.clone() else {
        bail_usage!("no manifest given (use --manifest or `manifest` in the configuration)");
    };
    let manifest = load_manifest(&manifest_path, &cfg)?;
    let fish = chunk_files(&manifest.paths(SourceKind::Fish, SplitTag::Test), &cfg)?;
    let backgrounds = chunk_files(
        &manifest.paths(SourceKind::Background, SplitTag::Test),
        &cfg,
    )?;
    let samples: Vec<_> = build_testset(&fish, &backgrounds, a.count, a.seed, &cfg.mix)?
        .iter()
        .map(|s| s.quantize_f32())
        .collect();
    write_testset(&a.out, &samples, cfg.sample_rate)?;
    let meta = format!(
        "seed = {}\ncount = {}\nsample_rate = {}\nchunk_length = {}\nchunk_overlap = {}\nk_min = {}\nk_max = {}\nalpha_f = {}\nfish_chunks = {}\nbackground_chunks = {}\n",
        a.seed,
        a.count,
        cfg.sample_rate,
        cfg.chunk.length(),
        cfg.chunk.overlap(),
        cfg.mix.k_min,
        cfg.mix.k_max,
        cfg.mix.alpha_f,
        fish.len(),
        backgrounds.len()
    );
    write_text(&a.out.join("dataset.cfg"), &meta)?;
    println!("wrote {} items to {}", samples.len(), a.out.display());
    Ok(())
}

fn build_model(cfg: &RunConfig, seed: u64) -> Result<Model> {
    Ok(match cfg.arch.as_str() {
        "demucs" => Demucs::new(cfg.demucs, seed)?.into(),
        _ => TasNet::new(cfg.tasnet, seed)?.into(),
    })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut pairs = load_config(Some(&a.config), &a.overrides)?;
    if let Some(arch) = &a.arch {
        pairs.set("arch", arch)?;
    }
    if let Some(e) = a.epochs {
        pairs.set("epochs", &e.to_string())?;
    }
    if let Some(o) = &a.out {
        pairs.set("out_dir", &o.display().to_string())?;
    }
    if let Some(m) = &a.manifest {
        pairs.set("manifest", &m.display().to_string())?;
    }
    let cfg = RunConfig::from_pairs(&pairs)?;
    let (init_seed, data_seed) = cfg.require_training_seeds()?;
    let (Some(out_dir), Some(manifest_path)) = (cfg.out_dir.clone(), cfg.manifest.clone()) else {
        bail_usage!("training requires `out_dir` and `manifest`");
    };

    let manifest = load_manifest(&manifest_path, &cfg)?;
    let fish = chunk_files(&manifest.paths(SourceKind::Fish, SplitTag::Train), &cfg)?;
    let backgrounds = chunk_files(
        &manifest.paths(SourceKind::Background, SplitTag::Train),
        &cfg,
    )?;
    let source = EpochMixer::new(fish, backgrounds, cfg.mix, data_seed)?;
    info!("{} training chunks per epoch", source.len());

    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let latest = ckpt_dir.join(LATEST_CHECKPOINT);
    let mut trainer = if latest.exists() {
        let t = Trainer::resume(&latest, cfg.train.clone())
            .with_context(|| format!("resuming from {}", latest.display()))?;
        if t.model.arch() != cfg.arch {
            bail_usage!(
                "{} holds a {} model but the configuration asks for {}",
                latest.display(),
                t.model.arch(),
                cfg.arch
            );
        }
        info!(
            "resuming after epoch {} (step {})",
            t.state.epoch,
            t.state.step()
        );
        t
    } else {
        Trainer::new(build_model(&cfg, init_seed)?, cfg.train.clone())?
    };
    let outputs = TrainOutputs {
        checkpoint_dir: Some(ckpt_dir),
        log: Some(out_dir.join(TRAIN_LOG)),
    };
    trainer.run(&source, &outputs)?;
    trainer.model.save(&out_dir.join(FINAL_MODEL), DType::F32)?;
    match trainer.state.history.last() {
        Some(r) => println!(
            "trained {} epochs, {} steps, final loss {:.4}",
            trainer.state.epoch, r.step, r.loss
        ),
        None => println!("no training steps run; initial checkpoint written"),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Separates at the model rate and returns estimates at the input rate and length.
fn separate_waveform(
    model: &Model,
    w: &Waveform,
    c: &ChunkArgs,
    spec: &ChunkSpec,
    what: &Path,
) -> Result<(Waveform, Waveform)> {
    let rate = w.sample_rate();
    let x = to_rate(w.clone(), c.model_rate, what)?;
    let (f, b) = model.separate(&x, spec)?;
    if rate == c.model_rate {
        return Ok((f, b));
    }
    let back = |s: Waveform| -> Result<Waveform> {
        let mut v = resample(&s, rate)?.into_samples();
        v.resize(w.len(), 0.0);
        Ok(Waveform::new(v, rate)?)
    };
    Ok((back(f)?, back(b)?))
}

pub fn separate(a: &SeparateArgs) -> Result<()> {
    let spec = chunk_spec(&a.chunking)?;
    let model = load_model(&a.checkpoint)?;
    let w = read_wav(&a.input)?;
    let (f, b) = separate_waveform(&model, &w, &a.chunking, &spec, &a.input)?;
    let (fp, bp) = (
        with_suffix(&a.out_prefix, ".fish.wav"),
        with_suffix(&a.out_prefix, ".background.wav"),
    );
    write_wav(&f, &fp, WavEncoding::Float32)?;
    write_wav(&b, &bp, WavEncoding::Float32)?;
    println!("wrote {} and {}", fp.display(), bp.display());
    Ok(())
}

fn score(items: &[TestItem], estimates: &[(Waveform, Waveform)]) -> Result<SdrReport> {
    let rows: Vec<EvalRow> = items
        .iter()
        .zip(estimates)
        .map(|(it, (f, b))| EvalRow {
            id: &it.id,
            fish_est: f.samples(),
            bg_est: b.samples(),
            fish_ref: it.fish.samples(),
            bg_ref: it.background.samples(),
        })
        .collect();
    Ok(evaluate_rows(&rows)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let spec = chunk_spec(&a.chunking)?;
    let model = match &a.checkpoint {
        Some(p) if !a.oracle => Some(load_model(p)?),
        _ => None,
    };
    let items = read_testset(&a.testset)
        .with_context(|| format!("reading test set {}", a.testset.display()))?;
    if items.is_empty() {
        bail_usage!("{} lists no items", a.testset.display());
    }
    let estimates: Vec<(Waveform, Waveform)> = match &model {
        None => items
            .iter()
            .map(|it| (it.fish.clone(), it.background.clone()))
            .collect(),
        Some(m) => items
            .par_iter()
            .map(|it| separate_waveform(m, &it.mixture, &a.chunking, &spec, Path::new(&it.id)))
            .collect::<Result<_>>()?,
    };
    let report = score(&items, &estimates)?;
    let out = a.out.clone().unwrap_or_else(|| a.testset.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let table = report.to_table();
    write_text(&out.join(REPORT_TABLE), &table)?;
    write_text(&out.join(REPORT_CSV), &report.to_csv())?;
    print!("{table}");
    Ok(())
}

pub fn spectro(a: &SpectroArgs) -> Result<()> {
    let ext = a
        .output
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    if !matches!(ext.as_deref(), Some("pgm" | "csv")) {
        bail_usage!("{}: output must end in .pgm or .csv", a.output.display());
    }
    let w = read_wav(&a.input)?;
    let s = spectrogram(&w, a.window, a.hop, a.floor_db)?;
    let bytes = match ext.as_deref() {
        Some("pgm") => s.to_pgm(),
        _ => s.to_csv().into_bytes(),
    };
    write_atomic(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}
