//! Tensor archive (`.m3dt`) encoding.
//!
//! Layout, all little-endian:
//!
//! | bytes        | field                              |
//! |--------------|------------------------------------|
//! | 4            | magic `M3DT`                       |
//! | 2            | `u16` version (= 1)                |
//! | 1            | `u8` dtype: 0 = f32, 1 = i32       |
//! | 4            | `u32` rank                         |
//! | 4 × rank     | `u32` dims                         |
//! | 4 × Π dims   | payload, row-major                 |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use super::{Sample, SampleData};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"M3DT";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 1 + 4;

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: ArchiveData,
}

impl ArchiveTensor {
    pub fn from_array(a: &ArrayD<f32>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: ArchiveData::F32(a.iter().copied().collect()),
        }
    }

    pub fn into_array(self) -> Result<ArrayD<f32>> {
        match self.data {
            ArchiveData::F32(v) => ArrayD::from_shape_vec(IxDyn(&self.shape), v)
                .map_err(|e| Error::shape(e.to_string())),
            ArchiveData::I32(_) => Err(Error::contract("expected an f32 tensor, found i32")),
        }
    }

    pub fn from_sample(s: &Sample) -> Self {
        let data = match s.data() {
            SampleData::Real(v) => ArchiveData::F32(v.clone()),
            SampleData::Ids(v) => ArchiveData::I32(v.iter().map(|&i| i as i32).collect()),
        };
        Self {
            shape: s.shape().to_vec(),
            data,
        }
    }

    pub fn into_sample(self) -> Result<Sample> {
        let data = match self.data {
            ArchiveData::F32(v) => SampleData::Real(v),
            ArchiveData::I32(v) => SampleData::Ids(
                v.into_iter()
                    .map(|i| u32::try_from(i).map_err(|_| Error::contract("negative token id")))
                    .collect::<Result<_>>()?,
            ),
        };
        Sample::from_parts(self.shape, data)
    }
}

pub fn encode(t: &ArchiveTensor) -> Vec<u8> {
    let n: usize = t.shape.iter().product();
    let mut out = Vec::with_capacity(HEADER + 4 * t.shape.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match t.data {
        ArchiveData::F32(_) => 0,
        ArchiveData::I32(_) => 1,
    });
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &t.data {
        ArchiveData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArchiveData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ArchiveTensor> {
    let corrupt = |reason: String| Error::CorruptArchive {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: VERSION as u32,
        });
    }
    let dtype = bytes[6];
    let rank = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
    let dims_end = HEADER + 4 * rank;
    if bytes.len() < dims_end {
        return Err(corrupt(format!("truncated dims for rank {rank}")));
    }
    let shape: Vec<usize> = bytes[HEADER..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| corrupt("dimension product overflows".into()))?;
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * n {
        return Err(corrupt(format!(
            "payload is {} bytes, expected {} for shape {shape:?}",
            payload.len(),
            4 * n
        )));
    }
    let words = payload.chunks_exact(4).map(|c| c.try_into().expect("4 bytes"));
    let data = match dtype {
        0 => ArchiveData::F32(words.map(f32::from_le_bytes).collect()),
        1 => ArchiveData::I32(words.map(i32::from_le_bytes).collect()),
        other => return Err(corrupt(format!("unknown dtype code {other}"))),
    };
    Ok(ArchiveTensor { shape, data })
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("create {}", tmp.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn write_tensor(path: &Path, t: &ArchiveTensor) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn read_tensor(path: &Path) -> Result<ArchiveTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode(&bytes, path)
}

pub fn write_sample(path: &Path, s: &Sample) -> Result<()> {
    write_tensor(path, &ArchiveTensor::from_sample(s))
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    read_tensor(path)?.into_sample()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = ArchiveTensor {
            shape: vec![2, 1],
            data: ArchiveData::F32(vec![1.0, -2.0]),
        };
        let b = encode(&t);
        assert_eq!(
            b,
            [
                b'M', b'3', b'D', b'T', 1, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, //
                0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0
            ]
        );
        let i = ArchiveTensor {
            shape: vec![1],
            data: ArchiveData::I32(vec![-1]),
        };
        assert_eq!(&encode(&i)[6..], &[1, 1, 0, 0, 0, 1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = Path::new("x.m3dt");
        let good = encode(&ArchiveTensor {
            shape: vec![3],
            data: ArchiveData::F32(vec![0.5; 3]),
        });
        assert!(decode(&good, p).is_ok());
        let err = decode(&good[..good.len() - 1], p).unwrap_err();
        assert!(err.to_string().contains("x.m3dt"), "{err}");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::CorruptArchive { .. })));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2, p), Err(Error::Version { found: 2, .. })));
        let mut dt = good;
        dt[6] = 9;
        assert!(decode(&dt, p).is_err());
    }
}
