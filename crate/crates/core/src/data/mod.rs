//! Dataset representation and I/O: utterances with audio features, text,
//! speakers and phoneme alignments, paired with image feature vectors.
//!
//! On disk a dataset root holds `utterances.tsv`, `images.tsv`, `splits.tsv`
//! and GSF1 feature files; all paths in the manifests are relative to the
//! root.

pub mod gsf;
pub mod mfcc;
pub mod synth;
pub mod vocab;
pub mod wav;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use mfcc::{extract_mfcc, MfccConfig};
pub use synth::{generate_synthetic, SynthConfig};
pub use vocab::Vocabulary;

/// One phoneme token aligned to a half-open frame span [start, end).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// A spoken utterance with its transcription and optional image pairing.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// Row-major [frames × feature_dim] audio features.
    pub features: Vec<f64>,
    pub frames: usize,
    pub text: String,
    pub speaker: String,
    pub alignment: Vec<PhonemeSpan>,
    /// Absent for speech/text-only corpora.
    pub image: Option<String>,
}

/// An image feature vector and the utterances that caption it.
#[derive(Clone, Debug)]
pub struct ImageEntry {
    pub id: String,
    pub feature: Vec<f64>,
    /// Indices into the dataset's utterance list.
    pub captions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn label(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag {other:?}"))),
        }
    }
}

/// A fully validated multimodal dataset.
#[derive(Clone, Debug)]
pub struct MultimodalDataset {
    pub utterances: Vec<Utterance>,
    pub images: Vec<ImageEntry>,
    pub splits: Vec<Split>,
    pub vocabulary: Vocabulary,
    pub feature_dim: usize,
    pub image_dim: usize,
    image_index: HashMap<String, usize>,
}

impl MultimodalDataset {
    /// Assemble and validate a dataset from parts. The vocabulary is built
    /// from the utterance texts in order.
    pub fn assemble(
        utterances: Vec<Utterance>,
        mut images: Vec<ImageEntry>,
        splits: Vec<Split>,
        feature_dim: usize,
        image_dim: usize,
    ) -> Result<Self> {
        if utterances.len() != splits.len() {
            return Err(Error::Data(format!(
                "{} utterances but {} split tags",
                utterances.len(),
                splits.len()
            )));
        }
        let mut image_index = HashMap::new();
        for (i, img) in images.iter_mut().enumerate() {
            img.captions.clear();
            if image_index.insert(img.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate image id {:?}", img.id)));
            }
        }
        for (u_idx, utt) in utterances.iter().enumerate() {
            if let Some(image_id) = &utt.image {
                let &img_idx = image_index.get(image_id).ok_or_else(|| {
                    Error::Data(format!(
                        "utterance {:?} references absent image id {image_id:?}",
                        utt.id
                    ))
                })?;
                images[img_idx].captions.push(u_idx);
            }
        }
        let vocabulary = Vocabulary::build(utterances.iter().map(|u| u.text.as_str()));
        let ds = Self {
            utterances,
            images,
            splits,
            vocabulary,
            feature_dim,
            image_dim,
            image_index,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen_utt = HashMap::new();
        for (idx, utt) in self.utterances.iter().enumerate() {
            if seen_utt.insert(&utt.id, idx).is_some() {
                return Err(Error::Data(format!("duplicate utterance id {:?}", utt.id)));
            }
            if utt.text.is_empty() {
                return Err(Error::Data(format!("utterance {:?} has empty text", utt.id)));
            }
            if self.feature_dim == 0 || utt.features.len() != utt.frames * self.feature_dim {
                return Err(Error::Data(format!(
                    "utterance {:?}: {} values for {} frames of dim {}",
                    utt.id,
                    utt.features.len(),
                    utt.frames,
                    self.feature_dim
                )));
            }
            let mut prev_end = 0usize;
            for span in &utt.alignment {
                if span.start >= span.end {
                    return Err(Error::Data(format!(
                        "utterance {:?}: empty alignment span {}..{}",
                        utt.id, span.start, span.end
                    )));
                }
                if span.end > utt.frames {
                    return Err(Error::Data(format!(
                        "utterance {:?}: alignment end {} exceeds {} frames",
                        utt.id, span.end, utt.frames
                    )));
                }
                if span.start < prev_end {
                    return Err(Error::Data(format!(
                        "utterance {:?}: overlapping alignment spans at {}",
                        utt.id, span.start
                    )));
                }
                prev_end = span.end;
            }
            if let Some(image_id) = &utt.image {
                if !self.image_index.contains_key(image_id) {
                    return Err(Error::Data(format!(
                        "utterance {:?} references absent image id {image_id:?}",
                        utt.id
                    )));
                }
            }
        }
        for img in &self.images {
            if img.feature.len() != self.image_dim {
                return Err(Error::Data(format!(
                    "image {:?}: feature dim {} vs dataset dim {}",
                    img.id,
                    img.feature.len(),
                    self.image_dim
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.image_index.get(id).map(|&i| &self.images[i])
    }

    pub fn image_position(&self, id: &str) -> Option<usize> {
        self.image_index.get(id).copied()
    }

    /// Indices of utterances tagged with `split`.
    pub fn utterances_in(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Write the dataset under `root` in the GSF1/manifest layout.
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root.join("audio"))?;
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::create_dir_all(root.join("align"))?;

        let mut manifest = String::new();
        let mut splits_file = String::new();
        for (idx, utt) in self.utterances.iter().enumerate() {
            for (field, what) in [(&utt.id, "id"), (&utt.text, "text"), (&utt.speaker, "speaker")] {
                if field.contains('\t') || field.contains('\n') {
                    return Err(Error::Data(format!(
                        "{what} of utterance {:?} contains a tab or newline",
                        utt.id
                    )));
                }
            }
            let audio_rel = format!("audio/{}.gsf", utt.id);
            gsf::write_features(
                &root.join(&audio_rel),
                &[utt.frames, self.feature_dim],
                &utt.features,
            )?;
            let align_rel = if utt.alignment.is_empty() {
                "-".to_string()
            } else {
                let rel = format!("align/{}.tsv", utt.id);
                let mut body = String::new();
                for span in &utt.alignment {
                    body.push_str(&format!("{}\t{}\t{}\n", span.label, span.start, span.end));
                }
                std::fs::write(root.join(&rel), body)?;
                rel
            };
            let image_field = utt.image.as_deref().unwrap_or("-");
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                utt.id, audio_rel, utt.text, utt.speaker, image_field, align_rel
            ));
            splits_file.push_str(&format!("{}\t{}\n", utt.id, self.splits[idx].label()));
        }
        let mut f = std::fs::File::create(root.join("utterances.tsv"))?;
        f.write_all(manifest.as_bytes())?;
        let mut f = std::fs::File::create(root.join("splits.tsv"))?;
        f.write_all(splits_file.as_bytes())?;

        let mut images_manifest = String::new();
        for img in &self.images {
            let rel = format!("images/{}.gsf", img.id);
            gsf::write_features(&root.join(&rel), &[self.image_dim], &img.feature)?;
            images_manifest.push_str(&format!("{}\t{}\n", img.id, rel));
        }
        let mut f = std::fs::File::create(root.join("images.tsv"))?;
        f.write_all(images_manifest.as_bytes())?;
        Ok(())
    }

    /// Load and validate a dataset from a root directory.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(root.join("utterances.tsv"))?;
        let images_manifest = std::fs::read_to_string(root.join("images.tsv"))?;
        let splits_text = std::fs::read_to_string(root.join("splits.tsv"))?;

        let mut split_of: HashMap<String, Split> = HashMap::new();
        for (lineno, line) in splits_text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, tag] = fields.as_slice() else {
                return Err(Error::Data(format!(
                    "splits.tsv line {}: expected 2 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            if split_of.insert(id.to_string(), Split::parse(tag)?).is_some() {
                return Err(Error::Data(format!(
                    "splits.tsv line {}: utterance {id:?} tagged twice; splits must be disjoint",
                    lineno + 1
                )));
            }
        }

        let mut utterances = Vec::new();
        let mut splits = Vec::new();
        let mut feature_dim: Option<usize> = None;
        for (lineno, line) in manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, audio_rel, text, speaker, image_field, align_rel] = fields.as_slice() else {
                return Err(Error::Data(format!(
                    "utterances.tsv line {}: expected 6 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            let (dims, features) = gsf::read_features(&join_checked(root, audio_rel)?)?;
            let [frames, dim] = dims.as_slice() else {
                return Err(Error::Data(format!(
                    "audio features of {id:?} must be rank 2, got {dims:?}"
                )));
            };
            match feature_dim {
                None => feature_dim = Some(*dim),
                Some(d) if d == *dim => {}
                Some(d) => {
                    return Err(Error::Data(format!(
                        "utterance {id:?} feature dim {dim} differs from {d}"
                    )))
                }
            }
            let alignment = if *align_rel == "-" {
                Vec::new()
            } else {
                read_alignment(&join_checked(root, align_rel)?)?
            };
            let image = if *image_field == "-" {
                None
            } else {
                Some(image_field.to_string())
            };
            let split = split_of.remove(*id).ok_or_else(|| {
                Error::Data(format!("utterance {id:?} missing from splits.tsv"))
            })?;
            splits.push(split);
            utterances.push(Utterance {
                id: id.to_string(),
                features,
                frames: *frames,
                text: text.to_string(),
                speaker: speaker.to_string(),
                alignment,
                image,
            });
        }

        let mut images = Vec::new();
        let mut image_dim: Option<usize> = None;
        for (lineno, line) in images_manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, rel] = fields.as_slice() else {
                return Err(Error::Data(format!(
                    "images.tsv line {}: expected 2 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            let (dims, feature) = gsf::read_features(&join_checked(root, rel)?)?;
            let [dim] = dims.as_slice() else {
                return Err(Error::Data(format!(
                    "image features of {id:?} must be rank 1, got {dims:?}"
                )));
            };
            match image_dim {
                None => image_dim = Some(*dim),
                Some(d) if d == *dim => {}
                Some(d) => {
                    return Err(Error::Data(format!(
                        "image {id:?} feature dim {dim} differs from {d}"
                    )))
                }
            }
            images.push(ImageEntry {
                id: id.to_string(),
                feature,
                captions: Vec::new(),
            });
        }

        Self::assemble(
            utterances,
            images,
            splits,
            feature_dim.unwrap_or(0),
            image_dim.unwrap_or(0),
        )
    }
}

fn join_checked(root: &Path, rel: &str) -> Result<PathBuf> {
    if Path::new(rel).is_absolute() || rel.split('/').any(|c| c == "..") {
        return Err(Error::Data(format!(
            "manifest path {rel:?} must be relative to the dataset root"
        )));
    }
    Ok(root.join(rel))
}

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
                "{}: alignment line {} needs 3 fields",
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

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> MultimodalDataset {
        let utterances = vec![
            Utterance {
                id: "u0".into(),
                features: vec![0.25; 4 * 3],
                frames: 4,
                text: "ab".into(),
                speaker: "s0".into(),
                alignment: vec![
                    PhonemeSpan {
                        label: "a".into(),
                        start: 0,
                        end: 2,
                    },
                    PhonemeSpan {
                        label: "b".into(),
                        start: 2,
                        end: 4,
                    },
                ],
                image: Some("i0".into()),
            },
            Utterance {
                id: "u1".into(),
                features: vec![-0.5; 2 * 3],
                frames: 2,
                text: "ba".into(),
                speaker: "s1".into(),
                alignment: Vec::new(),
                image: None,
            },
        ];
        let images = vec![ImageEntry {
            id: "i0".into(),
            feature: vec![1.0, 0.0, 0.5, 0.25, -1.0],
            captions: Vec::new(),
        }];
        MultimodalDataset::assemble(
            utterances,
            images,
            vec![Split::Train, Split::Validation],
            3,
            5,
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = MultimodalDataset::load(dir.path()).unwrap();
        assert_eq!(loaded.utterances.len(), 2);
        assert_eq!(loaded.images.len(), 1);
        assert_eq!(loaded.feature_dim, 3);
        assert_eq!(loaded.image_dim, 5);
        assert_eq!(loaded.utterances[0].alignment, ds.utterances[0].alignment);
        assert_eq!(loaded.splits, ds.splits);
        assert_eq!(loaded.utterances[0].image.as_deref(), Some("i0"));
        assert_eq!(loaded.images[0].captions, vec![0]);
        assert_eq!(loaded.vocabulary.size(), 3);
        for (a, b) in loaded.utterances[0]
            .features
            .iter()
            .zip(&ds.utterances[0].features)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn absent_image_reference_is_rejected() {
        let mut utt = tiny_dataset().utterances;
        utt[0].image = Some("missing".into());
        let err =
            MultimodalDataset::assemble(utt, vec![], vec![Split::Train, Split::Train], 3, 5);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn alignment_violations_are_rejected() {
        let base = tiny_dataset();
        // end beyond frame count
        let mut utts = base.utterances.clone();
        utts[0].alignment[1].end = 9;
        assert!(MultimodalDataset::assemble(
            utts,
            base.images.clone(),
            base.splits.clone(),
            3,
            5
        )
        .is_err());
        // overlapping spans
        let mut utts = base.utterances.clone();
        utts[0].alignment[1].start = 1;
        assert!(MultimodalDataset::assemble(
            utts,
            base.images.clone(),
            base.splits.clone(),
            3,
            5
        )
        .is_err());
        // empty text
        let mut utts = base.utterances.clone();
        utts[1].text.clear();
        assert!(MultimodalDataset::assemble(
            utts,
            base.images.clone(),
            base.splits.clone(),
            3,
            5
        )
        .is_err());
    }

    #[test]
    fn manifest_mutations_are_rejected() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();

        let manifest_path = dir.path().join("utterances.tsv");
        let original = std::fs::read_to_string(&manifest_path).unwrap();

        // wrong field count
        let first_line = original.lines().next().unwrap();
        let broken = first_line.rsplit_once('\t').unwrap().0;
        std::fs::write(&manifest_path, format!("{broken}\n")).unwrap();
        assert!(MultimodalDataset::load(dir.path()).is_err());

        // reference to a missing image
        std::fs::write(&manifest_path, original.replace("\ti0\t", "\tnope\t")).unwrap();
        assert!(MultimodalDataset::load(dir.path()).is_err());

        // absolute path escape
        std::fs::write(
            &manifest_path,
            original.replace("audio/u0.gsf", "/etc/passwd"),
        )
        .unwrap();
        assert!(MultimodalDataset::load(dir.path()).is_err());
        std::fs::write(&manifest_path, &original).unwrap();

        // alignment end beyond frames
        let align_path = dir.path().join("align/u0.tsv");
        std::fs::write(&align_path, "a\t0\t2\nb\t2\t400\n").unwrap();
        assert!(MultimodalDataset::load(dir.path()).is_err());
        std::fs::write(&align_path, "a\t0\t2\nb\t2\t4\n").unwrap();

        // duplicate split tag
        let splits_path = dir.path().join("splits.tsv");
        let splits = std::fs::read_to_string(&splits_path).unwrap();
        std::fs::write(&splits_path, format!("{splits}u0\ttest\n")).unwrap();
        assert!(MultimodalDataset::load(dir.path()).is_err());
        std::fs::write(&splits_path, &splits).unwrap();

        // missing audio file
        std::fs::remove_file(dir.path().join("audio/u1.gsf")).unwrap();
        assert!(matches!(
            MultimodalDataset::load(dir.path()),
            Err(Error::Io(_))
        ));

        // still loads once restored
        gsf::write_features(&dir.path().join("audio/u1.gsf"), &[2, 3], &vec![-0.5; 6]).unwrap();
        assert!(MultimodalDataset::load(dir.path()).is_ok());
    }
}
