//! `WRLF` feature files: little-endian header (magic, version, rows, dim)
//! followed by `rows * dim` f32 values in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::FeatureSeries;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"WRLF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn write_feature_file(path: &Path, series: &FeatureSeries) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&FEATURE_MAGIC);
    header[4..8].copy_from_slice(&FEATURE_VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&(series.rows() as u32).to_le_bytes());
    header[12..16].copy_from_slice(&(series.dim() as u32).to_le_bytes());
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        out.write_all(&header)?;
        for v in series.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Reads a feature file without checking the dimension against the trunk
/// width; the manifest loader does that with the owning record id.
pub fn read_feature_file(path: &Path) -> Result<FeatureSeries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

pub(crate) fn decode(path: &Path, bytes: &[u8]) -> Result<FeatureSeries> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let version = word(4) as u32;
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let rows = word(8);
    let dim = word(12);
    let expected = HEADER_LEN + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite {
                path: path.to_path_buf(),
                row: i / dim,
                col: i % dim,
            });
        }
        data.push(v);
    }
    FeatureSeries::with_dim(rows, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FEATURE_DIM;

    fn series(rows: usize) -> FeatureSeries {
        let data = (0..rows * FEATURE_DIM)
            .map(|i| (i as f32 * 0.37).sin() * 1e3)
            .collect();
        FeatureSeries::new(rows, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wrlf");
        let s = series(3);
        write_feature_file(&path, &s).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.rows(), 3);
        let bits = |s: &FeatureSeries| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s), bits(&back));
    }

    #[test]
    fn missing_row_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wrlf");
        write_feature_file(&path, &series(3)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(HEADER_LEN + 2 * FEATURE_DIM * 4);
        fs::write(&path, &bytes).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn nan_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wrlf");
        write_feature_file(&path, &series(2)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let off = HEADER_LEN + (FEATURE_DIM + 5) * 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match read_feature_file(&path).unwrap_err() {
            Error::NonFinite { row, col, .. } => assert_eq!((row, col), (1, 5)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wrlf");
        write_feature_file(&path, &series(1)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::BadMagic { .. })));
    }
}
