use std::fs;
use std::path::{Path, PathBuf};

use super::{MixCoefficients, MixError, MixtureSample, Result};
use crate::audio::{read_wav, write_wav, WavEncoding, Waveform};
use crate::fsio::write_atomic;

pub const INDEX_FILE: &str = "index.csv";
const HEADER: &str = "id,mixture,fish,background,fish_id,background_id,k_f,k_b,alpha_f";

/// One stored test item with its ground-truth sources.
#[derive(Clone, Debug, PartialEq)]
pub struct TestItem {
    pub id: String,
    pub mixture: Waveform,
    pub fish: Waveform,
    pub background: Waveform,
    pub fish_id: usize,
    pub background_id: usize,
    pub coeffs: MixCoefficients,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MixError + '_ {
    move |source| MixError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes float32 WAV triples `<id>_{mixture,fish,background}.wav` plus [`INDEX_FILE`].
pub fn write_testset(dir: &Path, samples: &[MixtureSample], sample_rate: u32) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut index = format!("{HEADER}\n");
    for (i, s) in samples.iter().enumerate() {
        let id = format!("item{i:05}");
        let names = ["mixture", "fish", "background"].map(|role| format!("{id}_{role}.wav"));
        for (name, data) in names
            .iter()
            .zip([&s.mixture, &s.source_fish, &s.source_background])
        {
            let w = Waveform::new(data.clone(), sample_rate)?;
            write_wav(&w, &dir.join(name), WavEncoding::Float32)?;
        }
        index.push_str(&format!(
            "{id},{},{},{},{},{},{},{},{}\n",
            names[0],
            names[1],
            names[2],
            s.fish_id,
            s.background_id,
            s.coeffs.k_f,
            s.coeffs.k_b,
            s.coeffs.alpha_f
        ));
    }
    let path = dir.join(INDEX_FILE);
    write_atomic(&path, index.as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_testset(dir: &Path) -> Result<Vec<TestItem>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(MixError::Index(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| MixError::Index(format!("row {}: {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("expected 9 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad("bad index"));
            let item = TestItem {
                id: f[0].to_string(),
                mixture: read_wav(&dir.join(f[1]))?,
                fish: read_wav(&dir.join(f[2]))?,
                background: read_wav(&dir.join(f[3]))?,
                fish_id: idx(f[4])?,
                background_id: idx(f[5])?,
                coeffs: MixCoefficients {
                    k_f: num(f[6])?,
                    k_b: num(f[7])?,
                    alpha_f: num(f[8])?,
                },
            };
            if item.fish.len() != item.mixture.len() || item.background.len() != item.mixture.len()
            {
                return Err(bad("source lengths differ from mixture"));
            }
            Ok(item)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixgen::{build_testset, MixConfig};

    #[test]
    fn round_trip_preserves_quantized_samples() {
        let fish: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..50).map(|j| ((i + j) as f64).sin()).collect())
            .collect();
        let bg: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..50).map(|j| ((i * j) as f64 * 0.1).cos()).collect())
            .collect();
        let samples: Vec<MixtureSample> = build_testset(&fish, &bg, 4, 3, &MixConfig::default())
            .unwrap()
            .iter()
            .map(MixtureSample::quantize_f32)
            .collect();
        let dir = tempfile::tempdir().unwrap();
        write_testset(dir.path(), &samples, 8000).unwrap();
        let items = read_testset(dir.path()).unwrap();
        assert_eq!(items.len(), 4);
        for (item, s) in items.iter().zip(&samples) {
            assert_eq!(item.mixture.samples(), &s.mixture[..]);
            assert_eq!(item.fish.samples(), &s.source_fish[..]);
            assert_eq!(item.background.samples(), &s.source_background[..]);
            assert_eq!(item.coeffs, s.coeffs);
            assert_eq!(
                (item.fish_id, item.background_id),
                (s.fish_id, s.background_id)
            );
        }
    }

    #[test]
    fn missing_index_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_testset(dir.path()), Err(MixError::Io { .. })));
    }
}
