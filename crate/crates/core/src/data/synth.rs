//! Synthetic multimodal data for desk-scale experiments.
//!
//! Every item is a random phoneme string. Its audio is the per-phoneme
//! prototype frame repeated for a random duration, shifted by a speaker
//! offset and perturbed with Gaussian noise; its text is the character
//! transcription of the phoneme string; its image feature is the sum of
//! per-phoneme concept vectors plus small noise. Alignments are exact by
//! construction.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::{ImageEntry, MultimodalDataset, PhonemeSpan, Split, Utterance};

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    /// Phoneme inventory size; transcribed as 'a', 'b', … so at most 26.
    pub phonemes: usize,
    pub speakers: usize,
    pub train_items: usize,
    pub val_items: usize,
    pub test_items: usize,
    /// Caption variants per image, re-sampling durations, speaker and noise.
    pub captions_per_image: usize,
    /// Standard deviation of the per-frame audio noise.
    pub noise: f64,
    pub feature_dim: usize,
    pub image_dim: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    /// Frames per phoneme are drawn uniformly from this range.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Scale of the additive per-speaker offset.
    pub speaker_offset_scale: f64,
    /// Image noise is `noise × image_noise_factor` per coordinate.
    pub image_noise_factor: f64,
    pub seed: u64,
    /// When set, items are drawn from this separate stream while the
    /// phoneme prototypes, concepts and speaker offsets still come from
    /// `seed`. Two datasets sharing `seed` but differing here describe the
    /// same world with disjoint items — the non-aligned condition.
    pub item_seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            phonemes: 12,
            speakers: 4,
            train_items: 64,
            val_items: 16,
            test_items: 0,
            captions_per_image: 5,
            noise: 0.3,
            feature_dim: 13,
            image_dim: 32,
            min_phones: 3,
            max_phones: 10,
            min_frames: 3,
            max_frames: 8,
            speaker_offset_scale: 0.5,
            image_noise_factor: 0.1,
            seed: 0,
            item_seed: None,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.phonemes == 0 || self.phonemes > 26 {
            return Err(Error::Config(format!(
                "phoneme inventory must be 1..=26, got {}",
                self.phonemes
            )));
        }
        if self.speakers == 0 {
            return Err(Error::Config("need at least one speaker".into()));
        }
        if self.train_items == 0 {
            return Err(Error::Config("need at least one training item".into()));
        }
        if self.captions_per_image == 0 {
            return Err(Error::Config("need at least one caption per image".into()));
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return Err(Error::Config("bad phoneme-count range".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config("bad frames-per-phoneme range".into()));
        }
        if self.feature_dim == 0 || self.image_dim == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        Ok(())
    }
}

fn phoneme_char(p: usize) -> char {
    (b'a' + p as u8) as char
}

/// Generate a deterministic synthetic dataset. The same config (including
/// seed) always yields an identical dataset.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<MultimodalDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let prototypes: Vec<Vec<f64>> = (0..cfg.phonemes)
        .map(|_| (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let concepts: Vec<Vec<f64>> = (0..cfg.phonemes)
        .map(|_| (0..cfg.image_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let speaker_offsets: Vec<Vec<f64>> = (0..cfg.speakers)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| normal(&mut rng) * cfg.speaker_offset_scale)
                .collect()
        })
        .collect();

    if let Some(item_seed) = cfg.item_seed {
        rng = ChaCha8Rng::seed_from_u64(item_seed);
    }

    let total = cfg.train_items + cfg.val_items + cfg.test_items;
    let mut utterances = Vec::with_capacity(total * cfg.captions_per_image);
    let mut splits = Vec::with_capacity(total * cfg.captions_per_image);
    let mut images = Vec::with_capacity(total);

    for item in 0..total {
        let split = if item < cfg.train_items {
            Split::Train
        } else if item < cfg.train_items + cfg.val_items {
            Split::Validation
        } else {
            Split::Test
        };
        let n_phones = rng.random_range(cfg.min_phones..=cfg.max_phones);
        let phones: Vec<usize> = (0..n_phones)
            .map(|_| rng.random_range(0..cfg.phonemes))
            .collect();
        let text: String = phones.iter().map(|&p| phoneme_char(p)).collect();

        let image_id = format!("i{item:05}");
        let mut feature = vec![0.0; cfg.image_dim];
        for &p in &phones {
            for (dst, &c) in feature.iter_mut().zip(&concepts[p]) {
                *dst += c;
            }
        }
        let image_sigma = cfg.noise * cfg.image_noise_factor;
        for v in feature.iter_mut() {
            *v += normal(&mut rng) * image_sigma;
        }
        images.push(ImageEntry {
            id: image_id.clone(),
            feature,
            captions: Vec::new(),
        });

        for caption in 0..cfg.captions_per_image {
            let speaker = rng.random_range(0..cfg.speakers);
            let mut features = Vec::new();
            let mut alignment = Vec::with_capacity(n_phones);
            let mut frame = 0usize;
            for &p in &phones {
                let duration = rng.random_range(cfg.min_frames..=cfg.max_frames);
                for _ in 0..duration {
                    for d in 0..cfg.feature_dim {
                        features.push(
                            prototypes[p][d]
                                + speaker_offsets[speaker][d]
                                + normal(&mut rng) * cfg.noise,
                        );
                    }
                }
                alignment.push(PhonemeSpan {
                    label: phoneme_char(p).to_string(),
                    start: frame,
                    end: frame + duration,
                });
                frame += duration;
            }
            utterances.push(Utterance {
                id: format!("u{item:05}_{caption}"),
                features,
                frames: frame,
                text: text.clone(),
                speaker: format!("spk{speaker:02}"),
                alignment,
                image: Some(image_id.clone()),
            });
            splits.push(split);
        }
    }

    MultimodalDataset::assemble(utterances, images, splits, cfg.feature_dim, cfg.image_dim)
}
