//! RIFF/WAVE reader and writer for PCM-16 and IEEE float-32, mono or stereo.

use std::path::Path;

use super::{AudioError, Result, Waveform};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

impl std::str::FromStr for WavEncoding {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" => Ok(Self::Pcm16),
            "float32" => Ok(Self::Float32),
            other => Err(AudioError::UnsupportedFormat(format!("encoding `{other}`"))),
        }
    }
}

fn corrupt(msg: impl Into<String>) -> AudioError {
    AudioError::CorruptContainer(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Format {
    encoding: WavEncoding,
    channels: u16,
    sample_rate: u32,
}

fn parse_fmt(body: &[u8]) -> Result<Format> {
    if body.len() < 16 {
        return Err(corrupt("fmt chunk shorter than 16 bytes"));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(corrupt("extensible fmt chunk too short"));
        }
        tag = u16_at(body, 24);
    }
    let encoding = match (tag, bits) {
        (FORMAT_PCM, 16) => WavEncoding::Pcm16,
        (FORMAT_FLOAT, 32) => WavEncoding::Float32,
        _ => {
            return Err(AudioError::UnsupportedFormat(format!(
                "format tag {tag} with {bits} bits per sample"
            )))
        }
    };
    if !(1..=2).contains(&channels) {
        return Err(AudioError::UnsupportedFormat(format!(
            "{channels} channels"
        )));
    }
    if sample_rate == 0 {
        return Err(corrupt("zero sample rate"));
    }
    Ok(Format {
        encoding,
        channels,
        sample_rate,
    })
}

/// Parses an in-memory WAV file; stereo is averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(corrupt("missing RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::UnsupportedFormat("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut format = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "chunk `{}` runs past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => format = Some(parse_fmt(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let format = format.ok_or_else(|| corrupt("missing fmt chunk"))?;
    let data = data.ok_or_else(|| corrupt("missing data chunk"))?;
    let width = match format.encoding {
        WavEncoding::Pcm16 => 2,
        WavEncoding::Float32 => 4,
    };
    let frame = width * format.channels as usize;
    if data.len() % frame != 0 {
        return Err(corrupt("data chunk holds a partial frame"));
    }
    let values: Vec<f64> = match format.encoding {
        WavEncoding::Pcm16 => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        WavEncoding::Float32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    let samples = if format.channels == 2 {
        values
            .chunks_exact(2)
            .map(|p| (p[0] + p[1]) / 2.0)
            .collect()
    } else {
        values
    };
    Waveform::new(samples, format.sample_rate).map_err(|_| corrupt("non-finite sample values"))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

fn pcm16(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Serializes a mono WAV file. PCM-16 clips to `[-1, 32767/32768]`.
pub fn encode_wav(w: &Waveform, encoding: WavEncoding) -> Vec<u8> {
    let (tag, bits, fmt_len) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16u16, 16u32),
        WavEncoding::Float32 => (FORMAT_FLOAT, 32u16, 18u32),
    };
    let block = bits / 8;
    let data_len = (w.len() * block as usize) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(4 + 8 + fmt_len + 8 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&fmt_len.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    if fmt_len == 18 {
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in w.samples() {
        match encoding {
            WavEncoding::Pcm16 => out.extend_from_slice(&pcm16(v).to_le_bytes()),
            WavEncoding::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    out
}

pub fn write_wav(w: &Waveform, path: &Path, encoding: WavEncoding) -> Result<()> {
    crate::fsio::write_atomic(path, &encode_wav(w, encoding)).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}
