//! GSF1 feature files: magic `GSF1`, a u8 rank, one little-endian u32 per
//! dimension, then the row-major payload as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSF1";

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Write a feature tensor. Values are stored as f32.
pub fn write_features(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    let numel: usize = dims.iter().product();
    if values.len() != numel || dims.is_empty() || dims.len() > u8::MAX as usize {
        return Err(Error::Contract(format!(
            "{} values for dims {dims:?}",
            values.len()
        )));
    }
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::Contract("dimension exceeds u32".into()));
    }
    let mut buf = Vec::with_capacity(4 + 1 + 4 * dims.len() + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a feature tensor, widening the payload to f64.
pub fn read_features(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_features(&bytes)
}

pub fn parse_features(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len() as u64, "truncated before magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected GSF1"));
    }
    if bytes.len() < 5 {
        return Err(format_err(4, "truncated before rank"));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(format_err(4, "rank must be at least 1"));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(bytes.len() as u64, "truncated inside dims"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 5 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(format_err(off as u64, "zero dimension"));
        }
        dims.push(d);
    }
    let numel: usize = dims.iter().product();
    let want = header + 4 * numel;
    if bytes.len() < want {
        return Err(format_err(
            bytes.len() as u64,
            format!("truncated payload: {} of {numel} values", (bytes.len() - header) / 4),
        ));
    }
    if bytes.len() > want {
        return Err(format_err(want as u64, "trailing data after payload"));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((dims, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gsf");
        let values: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37 - 1.0) as f64).collect();
        write_features(&path, &[3, 4], &values).unwrap();
        let (dims, got) = read_features(&path).unwrap();
        assert_eq!(dims, vec![3, 4]);
        for (a, b) in got.iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupted_headers_are_rejected() {
        let values = vec![1.0, 2.0];
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(1);
        buf.extend_from_slice(&2u32.to_le_bytes());
        for v in &values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        assert!(parse_features(&buf).is_ok());

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            parse_features(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            parse_features(truncated),
            Err(Error::Format { .. })
        ));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(
            parse_features(&trailing),
            Err(Error::Format { .. })
        ));

        let mut zero_dim = buf;
        zero_dim[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(parse_features(&zero_dim), Err(Error::Format { .. })));
    }
}
