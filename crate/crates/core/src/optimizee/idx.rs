//! IDX (MNIST) files: big-endian header `0x00 0x00 <type> <rank>`, one
//! big-endian u32 per dimension, then the payload. Only unsigned bytes
//! (type `0x08`) are supported.

use std::fs;
use std::path::Path;

use super::{Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UNSIGNED_BYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Values scaled to `[0, 1]`.
    pub fn scaled(&self) -> Tensor {
        Tensor::new(self.dims.clone(), self.data.iter().map(|&b| f64::from(b) / 255.0).collect()).expect("idx dims")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.data.iter().map(|&b| b as usize).collect()
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::ByteCount {
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UNSIGNED_BYTE || bytes[3] == 0 {
        return Err(Error::Format(format!(
            "bad IDX magic {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank as u64;
    if (bytes.len() as u64) < header {
        return Err(Error::ByteCount {
            expected: header,
            actual: bytes.len() as u64,
        });
    }
    let dims: Vec<usize> = bytes[4..header as usize]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload: u64 = dims.iter().map(|&d| d as u64).product();
    let expected = header + payload;
    if bytes.len() as u64 != expected {
        return Err(Error::ByteCount {
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header as usize..].to_vec(),
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

pub fn write_idx(path: impl AsRef<Path>, dims: &[usize], data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if dims.is_empty() || dims.len() > 255 || dims.iter().product::<usize>() != data.len() {
        return Err(Error::InvalidArgument(format!("dims {dims:?} do not describe {} bytes", data.len())));
    }
    let mut out = vec![0, 0, UNSIGNED_BYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The first `n_train + n_validation` MNIST training samples from `dir`,
/// flattened to rows of 784 pixels.
pub fn load_mnist(dir: impl AsRef<Path>, n_train: usize, n_validation: usize, batch_size: usize) -> Result<DatasetSource> {
    let dir = dir.as_ref();
    let images = load_idx(dir.join("train-images-idx3-ubyte"))?;
    let labels = load_idx(dir.join("train-labels-idx1-ubyte"))?;
    if images.rank() != 3 || labels.rank() != 1 || images.dims[0] != labels.dims[0] {
        return Err(Error::Format("MNIST images/labels disagree".into()));
    }
    let n = n_train + n_validation;
    if n > images.dims[0] {
        return Err(Error::InvalidArgument(format!("requested {n} samples, file has {}", images.dims[0])));
    }
    let width = images.dims[1] * images.dims[2];
    let pixels = images.scaled().into_data();
    let labels = labels.labels();
    let split = |from: usize, to: usize| -> Result<Dataset> {
        Dataset::new(
            Tensor::new(vec![to - from, width], pixels[from * width..to * width].to_vec())?,
            labels[from..to].to_vec(),
        )
    };
    DatasetSource::new(split(0, n_train)?, split(n_train, n)?, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rank3() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.idx");
        let data: Vec<u8> = (0..18).map(|i| (i * 13) as u8).collect();
        write_idx(&path, &[2, 3, 3], &data).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        let arr = load_idx(&path).unwrap();
        assert_eq!(arr.dims, vec![2, 3, 3]);
        assert_eq!(arr.data, data);
        let t = arr.scaled();
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn labels_are_rank1() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 3];
        bytes.extend([4, 0, 9]);
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.rank(), 1);
        assert_eq!(arr.labels(), vec![4, 0, 9]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]), Err(Error::Format(_))));
        let err = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 5, 1, 2]).unwrap_err();
        match err {
            Error::ByteCount { expected, actual } => {
                assert_eq!((expected, actual), (13, 10));
            }
            other => panic!("{other}"),
        }
    }
}
