//! Binary parameter container.
//!
//! Layout: 8-byte magic `LIOCKPT\0`, little-endian `u32` format version,
//! little-endian `u64` header length, a UTF-8 JSON header, then each tensor's
//! values in header order as little-endian `f64` or `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LIOCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub architecture: serde_json::Value,
    pub precision: Precision,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_params(architecture: serde_json::Value, params: &[&Param], precision: Precision) -> Self {
        Self {
            header: Header {
                architecture,
                precision,
                tensors: params
                    .iter()
                    .map(|p| TensorEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                        trainable: p.trainable,
                    })
                    .collect(),
            },
            values: params.iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.values.iter().map(Tensor::len).sum::<usize>() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.values {
            for &v in t.data() {
                match self.header.precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |at: usize, msg: &str| Error::format(path, format!("byte {at}"), msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad(0, "missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(8, &format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(12, "header length exceeds file size"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(20, &format!("header: {e}")))?;
        let width = header.precision.width();
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if bytes.len() - body != total * width {
            return Err(bad(
                body,
                &format!("payload is {} bytes, header describes {}", bytes.len() - body, total * width),
            ));
        }
        let mut offset = body;
        let mut values = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let data = bytes[offset..offset + n * width]
                .chunks_exact(width)
                .map(|c| match header.precision {
                    Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                    Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                })
                .collect();
            values.push(Tensor::from_vec(&entry.shape, data)?);
            offset += n * width;
        }
        Ok(Self { header, values })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies stored values into parameters matched by name.
    pub fn restore(&self, params: Vec<&mut Param>) -> Result<()> {
        if params.len() != self.values.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model has {}",
                self.values.len(),
                params.len()
            )));
        }
        let index: std::collections::HashMap<&str, usize> = self
            .header
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.as_str(), i))
            .collect();
        for p in params {
            let i = *index
                .get(p.name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {}", p.name)))?;
            if self.values[i].shape() != p.value.shape() {
                return Err(Error::shape(p.value.shape(), self.values[i].shape()));
            }
            p.value = self.values[i].clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let a = Param::new("a", Tensor::vector(vec![1.5, -2.0]));
        let b = Param::buffer("b", Tensor::from_vec(&[1, 1], vec![0.25]).unwrap());
        Checkpoint::from_params(serde_json::json!({"kind": "toy"}), &[&a, &b], Precision::F64)
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().to_bytes();
        let header = br#"{"architecture":{"kind":"toy"},"precision":"f64","tensors":[{"name":"a","shape":[2],"trainable":true},{"name":"b","shape":[1,1],"trainable":false}]}"#;
        let mut expected = b"LIOCKPT\0".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&(header.len() as u64).to_le_bytes());
        expected.extend_from_slice(header);
        expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xf8, 0x3f]);
        expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0xc0]);
        expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xd0, 0x3f]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn f32_round_trip_loses_only_precision() {
        let mut c = sample();
        c.header.precision = Precision::F32;
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.values, c.values);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample().to_bytes();
        for bad in [&bytes[..10], &bytes[..bytes.len() - 1], b"NOTACKPT0000000000000000".as_slice()] {
            assert!(matches!(
                Checkpoint::from_bytes(bad, Path::new("x")),
                Err(Error::Format { .. })
            ));
        }
    }

    #[test]
    fn restore_matches_by_name() {
        let c = sample();
        let mut b = Param::buffer("b", Tensor::zeros(&[1, 1]));
        let mut a = Param::new("a", Tensor::zeros(&[2]));
        c.restore(vec![&mut b, &mut a]).unwrap();
        assert_eq!(a.value.data(), &[1.5, -2.0]);
        assert_eq!(b.value.data(), &[0.25]);
        let mut wrong = Param::new("a", Tensor::zeros(&[3]));
        let mut b2 = b.clone();
        assert!(c.restore(vec![&mut wrong, &mut b2]).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        assert!(!path.with_extension("tmp").exists());
    }
}
