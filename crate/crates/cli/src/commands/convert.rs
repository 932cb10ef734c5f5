use std::path::Path;

use gmtl_core::data::{
    extract_mfcc, gsf, wav, ImageEntry, MfccConfig, MultimodalDataset, PhonemeSpan, Split,
    Utterance,
};
use gmtl_core::{Error, Result};

use crate::ConvertArgs;

fn read_alignment(path: &Path) -> Result<Vec<PhonemeSpan>> {
    let text = std::fs::read_to_string(path)?;
    let mut spans = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [label, start, end] = fields.as_slice() else {
            return Err(Error::Data(format!(
                "{}:{}: alignment line needs 3 fields",
                path.display(),
                lineno + 1
            )));
        };
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Data(format!("{}: bad frame index {s:?}", path.display())))
        };
        spans.push(PhonemeSpan {
            label: label.to_string(),
            start: parse(start)?,
            end: parse(end)?,
        });
    }
    Ok(spans)
}

pub fn run(args: ConvertArgs) -> Result<()> {
    let split = Split::parse(&args.split)?;
    let manifest = std::fs::read_to_string(&args.manifest)?;
    let base = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mfcc_cfg = MfccConfig {
        normalize: args.normalize,
        ..Default::default()
    };

    let mut utterances = Vec::new();
    let mut splits = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, wav_rel, text, speaker, image_field, align_rel] = fields.as_slice() else {
            return Err(Error::Data(format!(
                "{}:{}: expected 6 tab-separated fields, got {}",
                args.manifest.display(),
                lineno + 1,
                fields.len()
            )));
        };
        let (samples, rate) = wav::read_pcm16_mono(&base.join(wav_rel))?;
        let (features, frames) = extract_mfcc(&samples, rate, &mfcc_cfg)?;
        let alignment = if *align_rel == "-" {
            Vec::new()
        } else {
            read_alignment(&base.join(align_rel))?
        };
        utterances.push(Utterance {
            id: id.to_string(),
            features,
            frames,
            text: text.to_string(),
            speaker: speaker.to_string(),
            alignment,
            image: (*image_field != "-").then(|| image_field.to_string()),
        });
        splits.push(split);
    }
    if utterances.is_empty() {
        return Err(Error::Data("manifest holds no utterances".into()));
    }

    let mut images = Vec::new();
    let mut image_dim = 0usize;
    if let Some(images_manifest) = &args.images {
        let text = std::fs::read_to_string(images_manifest)?;
        let images_base = images_manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, rel] = fields.as_slice() else {
                return Err(Error::Data(format!(
                    "{}:{}: expected 2 fields",
                    images_manifest.display(),
                    lineno + 1
                )));
            };
            let (dims, feature) = gsf::read_features(&images_base.join(rel))?;
            let [dim] = dims.as_slice() else {
                return Err(Error::Data(format!(
                    "image {id:?} features must be rank 1, got {dims:?}"
                )));
            };
            image_dim = *dim;
            images.push(ImageEntry {
                id: id.to_string(),
                feature,
                captions: Vec::new(),
            });
        }
    }

    let feature_dim = mfcc_cfg.dim();
    let ds = MultimodalDataset::assemble(utterances, images, splits, feature_dim, image_dim)?;
    std::fs::create_dir_all(&args.out)?;
    ds.save(&args.out)?;
    println!(
        "converted {} utterances ({} frames of dim {feature_dim} total) to {}",
        ds.utterances.len(),
        ds.utterances.iter().map(|u| u.frames).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}
