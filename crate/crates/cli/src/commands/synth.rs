use gmtl_core::data::{generate_synthetic, SynthConfig};
use gmtl_core::Result;

use crate::config::FileConfig;
use crate::SynthArgs;

pub fn run(args: SynthArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        phonemes: file.resolve(args.phonemes, "phonemes", defaults.phonemes)?,
        speakers: file.resolve(args.speakers, "speakers", defaults.speakers)?,
        train_items: file.resolve(args.items, "items", defaults.train_items)?,
        val_items: file.resolve(args.val_items, "val-items", defaults.val_items)?,
        test_items: file.resolve(args.test_items, "test-items", defaults.test_items)?,
        captions_per_image: file.resolve(args.captions, "captions", defaults.captions_per_image)?,
        noise: file.resolve(args.noise, "noise", defaults.noise)?,
        feature_dim: file.resolve(args.feature_dim, "feature-dim", defaults.feature_dim)?,
        image_dim: file.resolve(args.image_dim, "image-dim", defaults.image_dim)?,
        min_phones: file.resolve(args.min_phones, "min-phones", defaults.min_phones)?,
        max_phones: file.resolve(args.max_phones, "max-phones", defaults.max_phones)?,
        speaker_offset_scale: file.resolve(
            args.speaker_offset,
            "speaker-offset",
            defaults.speaker_offset_scale,
        )?,
        seed: file.resolve(args.seed, "seed", defaults.seed)?,
        item_seed: args.item_seed,
        ..defaults
    };
    let ds = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    ds.save(&args.out)?;
    println!(
        "wrote {} utterances / {} images (feature dim {}, image dim {}) to {}",
        ds.utterances.len(),
        ds.images.len(),
        ds.feature_dim,
        ds.image_dim,
        args.out.display()
    );
    Ok(())
}
