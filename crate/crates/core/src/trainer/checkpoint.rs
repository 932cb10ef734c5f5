//! Checkpoint files: magic `GMTL`, a u16 format version, a metadata block
//! describing the architecture, a parameter manifest (name, shape, offset)
//! with a little-endian f64 payload, and the optimizer state appended with
//! its own manifest.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::Vocabulary;
use crate::encoders::{EncoderStackConfig, ModelDims, ModelParameters};
use crate::error::{Error, Result};

use super::adam::{AdamSlot, OptimizerState};

pub const MAGIC: &[u8; 4] = b"GMTL";
pub const VERSION: u16 = 1;

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

// ── writing ─────────────────────────────────────────────────────────────

fn layer_field(v: Option<usize>) -> String {
    v.map_or_else(|| ".".to_string(), |n| n.to_string())
}

fn meta_block(model: &ModelParameters) -> String {
    let c = &model.config;
    let d = &model.dims;
    let vocab: Vec<String> = model
        .vocabulary
        .chars()
        .iter()
        .map(|&ch| (ch as u32).to_string())
        .collect();
    format!(
        "config.s={}\nconfig.t={}\nconfig.s2i={}\nconfig.s2t={}\nconfig.t2s={}\nconfig.t2i={}\n\
         config.aligned={}\ndims.mfcc_dim={}\ndims.conv_kernel={}\ndims.conv_channels={}\n\
         dims.conv_stride={}\ndims.hidden={}\ndims.attn_hidden={}\ndims.embed_dim={}\n\
         dims.image_dim={}\nvocab={}\n",
        layer_field(c.speech_layers),
        layer_field(c.text_layers),
        layer_field(c.s2i_layers),
        layer_field(c.s2t_layers),
        layer_field(c.t2s_layers),
        layer_field(c.t2i_layers),
        c.aligned,
        d.mfcc_dim,
        d.conv_kernel,
        d.conv_channels,
        d.conv_stride,
        d.hidden,
        d.attn_hidden,
        d.embed_dim,
        d.image_dim,
        vocab.join(",")
    )
}

/// Serialize a model (and optionally its optimizer state) to disk.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelParameters,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = meta_block(model);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());

    let params = model.named_tensors();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, tensor) in &params {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += tensor.numel() as u64;
    }
    buf.extend_from_slice(&offset.to_le_bytes());
    for (_, tensor) in &params {
        for &v in tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    match optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.learning_rate.to_le_bytes());
            buf.extend_from_slice(&opt.clip_threshold.to_le_bytes());
            buf.extend_from_slice(&opt.step_count.to_le_bytes());
            buf.extend_from_slice(&(opt.slots.len() as u32).to_le_bytes());
            let mut offset = 0u64;
            for (name, slot) in &opt.slots {
                buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                buf.extend_from_slice(&(slot.m.len() as u64).to_le_bytes());
                buf.extend_from_slice(&slot.steps.to_le_bytes());
                buf.extend_from_slice(&offset.to_le_bytes());
                offset += 2 * slot.m.len() as u64;
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            for slot in opt.slots.values() {
                for &v in slot.m.iter().chain(&slot.v) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

// ── reading ─────────────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let pos = self.pos as u64;
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| format_err(pos, format!("{what} is not valid UTF-8")))
    }
}

fn parse_layer_field(v: &str, offset: u64) -> Result<Option<usize>> {
    if v == "." {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| format_err(offset, format!("bad layer count {v:?}")))
}

fn parse_meta(meta: &str, meta_offset: u64) -> Result<(EncoderStackConfig, ModelDims, Vocabulary)> {
    let mut map = std::collections::HashMap::new();
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k, v);
        }
    }
    let get = |k: &str| -> Result<&str> {
        map.get(k)
            .copied()
            .ok_or_else(|| format_err(meta_offset, format!("metadata key {k} missing")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| format_err(meta_offset, format!("bad integer for {k}")))
    };
    let config = EncoderStackConfig {
        speech_layers: parse_layer_field(get("config.s")?, meta_offset)?,
        text_layers: parse_layer_field(get("config.t")?, meta_offset)?,
        s2i_layers: parse_layer_field(get("config.s2i")?, meta_offset)?,
        s2t_layers: parse_layer_field(get("config.s2t")?, meta_offset)?,
        t2s_layers: parse_layer_field(get("config.t2s")?, meta_offset)?,
        t2i_layers: parse_layer_field(get("config.t2i")?, meta_offset)?,
        aligned: get("config.aligned")? == "true",
    };
    let dims = ModelDims {
        mfcc_dim: usize_of("dims.mfcc_dim")?,
        conv_kernel: usize_of("dims.conv_kernel")?,
        conv_channels: usize_of("dims.conv_channels")?,
        conv_stride: usize_of("dims.conv_stride")?,
        hidden: usize_of("dims.hidden")?,
        attn_hidden: usize_of("dims.attn_hidden")?,
        embed_dim: usize_of("dims.embed_dim")?,
        image_dim: usize_of("dims.image_dim")?,
    };
    let vocab_field = get("vocab")?;
    let chars = if vocab_field.is_empty() {
        Vec::new()
    } else {
        vocab_field
            .split(',')
            .map(|cp| {
                cp.parse::<u32>()
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| format_err(meta_offset, format!("bad code point {cp:?}")))
            })
            .collect::<Result<Vec<char>>>()?
    };
    Ok((config, dims, Vocabulary::from_chars(chars)))
}

/// Load a checkpoint. The round trip through [`save_checkpoint`] is
/// bit-exact for every parameter and optimizer moment.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParameters, Option<OptimizerState>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelParameters, Option<OptimizerState>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected GMTL"));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(format_err(
            4,
            format!("unsupported format version {version}, expected {VERSION}"),
        ));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let meta_offset = c.pos as u64;
    let meta = c.string(meta_len, "metadata")?;
    let (config, dims, vocabulary) = parse_meta(&meta, meta_offset)?;
    let mut model = ModelParameters::new(config, dims, vocabulary, 0)
        .map_err(|e| format_err(meta_offset, format!("invalid architecture metadata: {e}")))?;

    let param_count = c.u32("parameter count")? as usize;
    let mut manifest: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = c.u16("parameter name length")? as usize;
        let name = c.string(name_len, "parameter name")?;
        let rank = c.u8("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("parameter dimension")? as usize);
        }
        let offset = c.u64("parameter offset")?;
        manifest.push((name, shape, offset));
    }
    let payload_count = c.u64("payload length")? as usize;
    let payload_pos = c.pos;
    let payload_bytes = c.take(payload_count * 8, "parameter payload")?;

    let mut expected: std::collections::HashMap<String, (Vec<usize>, u64)> = manifest
        .into_iter()
        .map(|(n, s, o)| (n, (s, o)))
        .collect();
    for (name, tensor) in model.tensors_mut(None) {
        let (shape, offset) = expected.remove(&name).ok_or_else(|| {
            format_err(
                payload_pos as u64,
                format!("parameter {name} missing from manifest"),
            )
        })?;
        if shape != tensor.shape() {
            return Err(format_err(
                payload_pos as u64,
                format!(
                    "parameter {name}: stored shape {shape:?} vs expected {:?}",
                    tensor.shape()
                ),
            ));
        }
        let count = tensor.numel();
        let start = offset as usize;
        if start + count > payload_count {
            return Err(format_err(
                (payload_pos + start * 8) as u64,
                format!("parameter {name} payload out of bounds"),
            ));
        }
        tensor.update_values(|values| {
            for (i, v) in values.iter_mut().enumerate() {
                let b = &payload_bytes[(start + i) * 8..(start + i + 1) * 8];
                *v = f64::from_le_bytes(b.try_into().unwrap());
            }
        });
    }
    if let Some(extra) = expected.keys().next() {
        return Err(format_err(
            payload_pos as u64,
            format!("manifest lists unknown parameter {extra}"),
        ));
    }

    let optimizer = match c.u8("optimizer flag")? {
        0 => None,
        1 => {
            let learning_rate = c.f64("learning rate")?;
            let clip_threshold = c.f64("clip threshold")?;
            let step_count = c.u64("step count")?;
            let slot_count = c.u32("slot count")? as usize;
            let mut slot_manifest = Vec::with_capacity(slot_count);
            for _ in 0..slot_count {
                let name_len = c.u16("slot name length")? as usize;
                let name = c.string(name_len, "slot name")?;
                let len = c.u64("slot length")? as usize;
                let steps = c.u64("slot steps")?;
                let offset = c.u64("slot offset")? as usize;
                slot_manifest.push((name, len, steps, offset));
            }
            let opt_count = c.u64("optimizer payload length")? as usize;
            let opt_pos = c.pos;
            let opt_bytes = c.take(opt_count * 8, "optimizer payload")?;
            let read_f64s = |start: usize, len: usize| -> Result<Vec<f64>> {
                if start + len > opt_count {
                    return Err(format_err(
                        (opt_pos + start * 8) as u64,
                        "optimizer slot payload out of bounds",
                    ));
                }
                Ok(opt_bytes[start * 8..(start + len) * 8]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect())
            };
            let mut state = OptimizerState::new(learning_rate, clip_threshold);
            state.step_count = step_count;
            for (name, len, steps, offset) in slot_manifest {
                let m = read_f64s(offset, len)?;
                let v = read_f64s(offset + len, len)?;
                state.slots.insert(name, AdamSlot { m, v, steps });
            }
            Some(state)
        }
        other => {
            return Err(format_err(
                (c.pos - 1) as u64,
                format!("bad optimizer flag {other}"),
            ))
        }
    };

    if c.pos != bytes.len() {
        return Err(format_err(c.pos as u64, "trailing data after checkpoint"));
    }
    Ok((model, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;

    fn sample_model(seed: u64) -> ModelParameters {
        let dims = ModelDims {
            mfcc_dim: 4,
            conv_kernel: 3,
            conv_channels: 5,
            conv_stride: 2,
            hidden: 6,
            attn_hidden: 3,
            embed_dim: 6,
            image_dim: 7,
        };
        let vocab = Vocabulary::from_chars(vec!['a', 'b', 'c']);
        ModelParameters::new(
            EncoderStackConfig::table1_row(6).unwrap(),
            dims,
            vocab,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model(41);
        let mut opt = OptimizerState::new(2e-4, 2.0);
        opt.step_count = 7;
        opt.slots.insert(
            "s.conv.weight".into(),
            AdamSlot {
                m: vec![0.1; model.conv.as_ref().unwrap().weight.numel()],
                v: vec![0.2; model.conv.as_ref().unwrap().weight.numel()],
                steps: 7,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmtl");
        save_checkpoint(&path, &model, Some(&opt)).unwrap();
        let (loaded, loaded_opt) = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.dims, model.dims);
        assert_eq!(loaded.vocabulary, model.vocabulary);
        let a = model.named_tensors();
        let b = loaded.named_tensors();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.values().iter().zip(tb.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(loaded_opt.as_ref(), Some(&opt));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = sample_model(42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmtl");
        save_checkpoint(&path, &model, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let model = sample_model(43);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmtl");
        save_checkpoint(&path, &model, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        for cut in [3usize, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(parse_checkpoint(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut} must fail"
            );
        }

        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(
            parse_checkpoint(&trailing),
            Err(Error::Format { .. })
        ));
    }
}
