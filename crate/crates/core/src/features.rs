//! Binary feature files.
//!
//! Layout: magic `EMF1`, frame count `T` (u32 LE), width `d` (u32 LE),
//! dtype code (u8: 0 = f32, 1 = f64), then `T * d` little-endian values in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Matrix, Scalar};

pub const MAGIC: &[u8; 4] = b"EMF1";
pub const HEADER_LEN: usize = 13;

/// Decoded contents of a feature file in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureData {
    F32(Matrix<f32>),
    F64(Matrix<f64>),
}

impl FeatureData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::F32(m) => m.shape(),
            Self::F64(m) => m.shape(),
        }
    }

    /// Converts to `T`; widening is exact, narrowing rounds.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        match self {
            Self::F32(m) => m.cast(),
            Self::F64(m) => m.cast(),
        }
    }
}

pub fn encode<T: Scalar>(m: &Matrix<T>) -> Result<Vec<u8>> {
    let too_big = |what: &str, n: usize| Error::Format(format!("{what} {n} does not fit in u32"));
    let t = u32::try_from(m.rows()).map_err(|_| too_big("frame count", m.rows()))?;
    let d = u32::try_from(m.cols()).map_err(|_| too_big("width", m.cols()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * T::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(T::DTYPE.code());
    for &v in m.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn decode_payload<T: Scalar>(t: usize, d: usize, payload: &[u8]) -> Result<Matrix<T>> {
    let data: Vec<T> = payload
        .chunks_exact(T::DTYPE.size_bytes())
        .map(T::read_le)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "non-finite value at frame {}, column {}",
            i / d.max(1),
            i % d.max(1)
        )));
    }
    Matrix::from_vec(t, d, data)
}

pub fn decode(bytes: &[u8]) -> Result<FeatureData> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected EMF1".into()));
    }
    let word =
        |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (t, d) = (word(4), word(8));
    let dtype = DType::from_code(bytes[12])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[12])))?;
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(dtype.size_bytes()))
        .ok_or_else(|| Error::Format("header size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header {t}x{d} {} needs {expected}",
            payload.len(),
            dtype.name()
        )));
    }
    Ok(match dtype {
        DType::F32 => FeatureData::F32(decode_payload(t, d, payload)?),
        DType::F64 => FeatureData::F64(decode_payload(t, d, payload)?),
    })
}

pub fn read_features(path: &Path) -> Result<FeatureData> {
    decode(&fs::read(path)?)
}

/// Writes to a temporary sibling and renames it over `path`, so a failed
/// write never leaves a partial file behind.
pub fn write_features<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    if !m.all_finite() {
        return Err(Error::Format("refusing to write non-finite values".into()));
    }
    let bytes = encode(m)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
