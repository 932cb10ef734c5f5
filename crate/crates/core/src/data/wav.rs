//! Minimal reader and writer for 16-bit PCM mono WAV files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Read a PCM 16-bit mono WAV file into samples scaled to [−1, 1).
pub fn read_pcm16_mono(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pcm16_mono(&bytes)
}

pub fn parse_pcm16_mono(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 {
        return Err(format_err(bytes.len() as u64, "truncated RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(0, "not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut rate: Option<u32> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(format_err(pos as u64, "chunk overruns file"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(pos as u64, "fmt chunk too small"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if audio_format != 1 {
                    return Err(Error::Data(format!(
                        "unsupported WAV format {audio_format}, need PCM"
                    )));
                }
                if channels != 1 {
                    return Err(Error::Data(format!(
                        "unsupported channel count {channels}, need mono"
                    )));
                }
                if bits != 16 {
                    return Err(Error::Data(format!("unsupported bit depth {bits}, need 16")));
                }
                rate = Some(sample_rate);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }
    let rate = rate.ok_or_else(|| format_err(bytes.len() as u64, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| format_err(bytes.len() as u64, "missing data chunk"))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
        .collect();
    Ok((samples, rate))
}

/// Write samples in [−1, 1] as a PCM 16-bit mono WAV file.
pub fn write_pcm16_mono(path: &Path, samples: &[f64], rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut buf = Vec::with_capacity(44 + data_len);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&rate.to_le_bytes());
    buf.extend_from_slice(&(rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}
