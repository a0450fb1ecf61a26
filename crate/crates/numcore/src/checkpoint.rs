//! Versioned checkpoint container.
//!
//! ```text
//! FINSEP-CHECKPOINT\n
//! version 1\n
//! arch <name>\n
//! meta <key> <value...>\n            (zero or more, sorted by key)
//! array <name> <f32|f64> <d0>x<d1>...\n   (zero or more; `-` for a rank-0 array)
//! end\n
//! <payload>
//! ```
//!
//! The payload is every declared array, in header order, as packed little-endian
//! values of the declared type. No padding or alignment.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "FINSEP-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedArray {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

impl Checkpoint {
    pub fn new(arch: impl Into<String>) -> Self {
        Self {
            arch: arch.into(),
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| bad(format!("missing meta key `{key}`")))?;
        raw.parse()
            .map_err(|_| bad(format!("meta key `{key}` has unparsable value `{raw}`")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, dtype: DType) {
        self.arrays.push(NamedArray {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &a.tensor)
    }

    /// Adds every tensor of `store` as `<prefix><param name>`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore, dtype: DType) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone(), dtype);
        }
    }

    /// Collects every array whose name starts with `prefix`, prefix stripped.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for a in &self.arrays {
            if let Some(name) = a.name.strip_prefix(prefix) {
                store.add(name, a.tensor.clone());
            }
        }
        store
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if !valid_token(&self.arch) {
            return Err(bad(format!("invalid architecture name `{}`", self.arch)));
        }
        let mut header = format!("{MAGIC}\nversion {FORMAT_VERSION}\narch {}\n", self.arch);
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(bad(format!("invalid meta entry `{k}`")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for a in &self.arrays {
            if !valid_token(&a.name) {
                return Err(bad(format!("invalid array name `{}`", a.name)));
            }
            let dims = if a.tensor.shape().is_empty() {
                "-".to_string()
            } else {
                a.tensor
                    .shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!("array {} {} {dims}\n", a.name, a.dtype.tag()));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for a in &self.arrays {
            let mut buf = Vec::with_capacity(a.tensor.len() * a.dtype.width());
            for &v in a.tensor.data() {
                match a.dtype {
                    DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
            line.clear();
            let n = r
                .read_line(&mut line)
                .map_err(|e| bad(format!("unreadable header: {e}")))?;
            if n == 0 || !line.ends_with('\n') {
                return Err(bad("truncated header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a finsep checkpoint"));
        }
        let version = next_line(&mut r)?;
        match version.strip_prefix("version ").map(str::parse::<u32>) {
            Some(Ok(FORMAT_VERSION)) => {}
            _ => return Err(bad(format!("unsupported format `{version}`"))),
        }
        let arch_line = next_line(&mut r)?;
        let arch = arch_line
            .strip_prefix("arch ")
            .filter(|a| valid_token(a))
            .ok_or_else(|| bad("missing architecture line"))?
            .to_string();
        let mut ckpt = Checkpoint::new(arch);
        let mut decls = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = l.strip_prefix("array ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, dtype, dims] = parts[..] else {
                    return Err(bad(format!("malformed array line `{l}`")));
                };
                let dtype = match dtype {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    other => return Err(bad(format!("unknown dtype `{other}`"))),
                };
                let shape = if dims == "-" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| {
                            d.parse::<usize>()
                                .map_err(|_| bad(format!("bad dims `{dims}`")))
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                decls.push((name.to_string(), dtype, shape));
            } else {
                return Err(bad(format!("unexpected header line `{l}`")));
            }
        }
        for (name, dtype, shape) in decls {
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * dtype.width()];
            r.read_exact(&mut raw)
                .map_err(|_| bad(format!("truncated payload in array `{name}`")))?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            ckpt.push(name, Tensor::new(shape, data)?, dtype);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("tasnet");
        c.set_meta("seed", 7);
        c.set_meta("frame_len", 40);
        c.push(
            "enc.weight",
            Tensor::new(vec![2, 1, 3], vec![0.5, -1.0, 2.0, 0.25, 0.0, 1.5]).unwrap(),
            DType::F32,
        );
        c.push("step", Tensor::scalar(12.0), DType::F64);
        c
    }

    #[test]
    fn round_trip_preserves_everything() {
        let c = sample();
        let back = Checkpoint::read_from(&c.to_bytes().unwrap()[..]).unwrap();
        assert_eq!(back.arch, "tasnet");
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.arrays.len(), 2);
        assert_eq!(back.array("enc.weight"), c.array("enc.weight"));
        assert_eq!(back.array("step").unwrap().shape(), &[] as &[usize]);
    }

    #[test]
    fn header_layout_is_stable() {
        let bytes = sample().to_bytes().unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        assert_eq!(
            header,
            "FINSEP-CHECKPOINT\nversion 1\narch tasnet\nmeta frame_len 40\nmeta seed 7\n\
             array enc.weight f32 2x1x3\narray step f64 -\nend\n"
        );
        assert_eq!(bytes.len() - header_end, 6 * 4 + 8);
        assert_eq!(&bytes[header_end..header_end + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::read_from(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(Checkpoint::read_from(&b"RIFF\n"[..]).is_err());
    }
}
