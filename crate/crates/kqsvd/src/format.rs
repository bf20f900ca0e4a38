//! `KQC1` tensor files.
//!
//! Layout (little-endian):
//! - magic: `b"KQC1"`
//! - rows: u32
//! - cols: u32
//! - dtype: u32 (0 = f32, 1 = f64)
//! - data: rows * cols scalars, row-major

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use kqsvd_core::cachestore::Dtype;
use kqsvd_core::Matrix;

pub const MAGIC: [u8; 4] = *b"KQC1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: file not found", path.display())]
    Missing { path: PathBuf },
    #[error("{}: bad magic {found:?}, expected \"KQC1\"", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{}: truncated, expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{}: {actual} bytes, expected {expected}", path.display())]
    TrailingBytes {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{}: unknown dtype tag {tag}", path.display())]
    UnknownDtype { path: PathBuf, tag: u32 },
    #[error("{}: shape {actual:?}, expected {expected:?}", path.display())]
    DimensionMismatch {
        path: PathBuf,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("{}: dtype {actual}, manifest says {expected}", path.display())]
    DtypeMismatch {
        path: PathBuf,
        expected: Dtype,
        actual: Dtype,
    },
    #[error("{}: {source}", path.display())]
    Invalid {
        path: PathBuf,
        source: kqsvd_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl FormatError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            FormatError::Missing {
                path: path.to_path_buf(),
            }
        } else {
            FormatError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Serializes `m` at `dtype`. Values are rounded when narrowing to f32.
pub fn encode_tensor(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.extend_from_slice(&dtype.tag().to_le_bytes());
    match dtype {
        Dtype::F32 => m
            .as_slice()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => m
            .as_slice()
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parses a tensor file image; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Matrix, Dtype), FormatError> {
    let path_buf = || path.to_path_buf();
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            path: path_buf(),
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            path: path_buf(),
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let rows = u32_at(bytes, 4) as usize;
    let cols = u32_at(bytes, 8) as usize;
    let tag = u32_at(bytes, 12);
    let dtype = Dtype::from_tag(tag).ok_or(FormatError::UnknownDtype {
        path: path_buf(),
        tag,
    })?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size()))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            path: path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            path: path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let m = Matrix::new(rows, cols, data).map_err(|source| FormatError::Invalid {
        path: path_buf(),
        source,
    })?;
    Ok((m, dtype))
}

pub fn read_tensor(path: &Path) -> Result<(Matrix, Dtype), FormatError> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Reads a tensor and checks its shape and dtype.
pub fn read_tensor_expect(
    path: &Path,
    shape: (usize, usize),
    dtype: Dtype,
) -> Result<Matrix, FormatError> {
    let (m, actual) = read_tensor(path)?;
    if m.shape() != shape {
        return Err(FormatError::DimensionMismatch {
            path: path.to_path_buf(),
            expected: shape,
            actual: m.shape(),
        });
    }
    if actual != dtype {
        return Err(FormatError::DtypeMismatch {
            path: path.to_path_buf(),
            expected: dtype,
            actual,
        });
    }
    Ok(m)
}

pub fn write_tensor(path: &Path, m: &Matrix, dtype: Dtype) -> Result<(), FormatError> {
    write_file(path, &encode_tensor(m, dtype))
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let tmp = temp_sibling(path);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|()| fs::rename(&tmp, path));
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        FormatError::io(path, e)
    })
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_row_slice(2, 3, &[1.0, -2.5, 3.25, 0.0, 1e-3, -7.0])
    }

    #[test]
    fn header_and_payload_size() {
        let bytes = encode_tensor(&sample(), Dtype::F32);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"KQC1");
        assert_eq!(u32_at(&bytes, 4), 2);
        assert_eq!(u32_at(&bytes, 8), 3);
        assert_eq!(u32_at(&bytes, 12), 0);
        assert_eq!(encode_tensor(&sample(), Dtype::F64).len(), 16 + 48);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = sample();
        let (back, dtype) = decode_tensor(&encode_tensor(&m, Dtype::F64), Path::new("x")).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back, m);
        let narrowed = m.map(|x| x as f32 as f64);
        let (back, _) = decode_tensor(&encode_tensor(&m, Dtype::F32), Path::new("x")).unwrap();
        assert_eq!(back, narrowed);
    }

    #[test]
    fn corrupt_files_are_rejected_distinctly() {
        let p = Path::new("t.bin");
        let good = encode_tensor(&sample(), Dtype::F32);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad, p), Err(FormatError::BadMagic { .. })));

        let short = &good[..good.len() - 1];
        assert!(matches!(
            decode_tensor(short, p),
            Err(FormatError::Truncated { expected: 40, actual: 39, .. })
        ));
        assert!(matches!(decode_tensor(&good[..10], p), Err(FormatError::Truncated { .. })));
        assert!(matches!(decode_tensor(&good[..2], p), Err(FormatError::Truncated { .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_tensor(&long, p), Err(FormatError::TrailingBytes { .. })));

        let mut tag = good.clone();
        tag[12] = 7;
        assert!(matches!(decode_tensor(&tag, p), Err(FormatError::UnknownDtype { tag: 7, .. })));

        let nan = encode_tensor(&sample(), Dtype::F64);
        let mut nan = nan;
        nan[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&nan, p), Err(FormatError::Invalid { .. })));
    }
}
