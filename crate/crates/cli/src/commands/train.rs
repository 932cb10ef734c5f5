use std::path::{Path, PathBuf};

use gmtl_core::data::{MultimodalDataset, Vocabulary};
use gmtl_core::encoders::{EncoderStackConfig, ModelDims, ModelParameters};
use gmtl_core::trainer::{history_to_tsv, save_checkpoint, train, TrainSchedule};
use gmtl_core::{Error, Result};

use crate::config::FileConfig;
use crate::TrainArgs;

struct RunPlan {
    config: EncoderStackConfig,
    dims: ModelDims,
    vocabulary: Vocabulary,
    schedule: TrainSchedule,
    seeds: Vec<u64>,
    jobs: usize,
    out: PathBuf,
}

struct SeedResult {
    seed: u64,
    best_epoch: usize,
    r1: f64,
    r5: f64,
    r10: f64,
    medr: f64,
}

fn parse_layer_spec(raw: &str, key: &str) -> Result<Option<usize>> {
    if raw == "." {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad layer count {raw:?} for {key}")))
}

fn build_plan(
    args: &TrainArgs,
    main: &MultimodalDataset,
    aux: Option<&MultimodalDataset>,
) -> Result<RunPlan> {
    let file = FileConfig::load(args.config.as_deref())?;

    let row = file.resolve(args.row, "row", 0usize)?;
    let mut config = if row > 0 {
        EncoderStackConfig::table1_row(row)?
    } else {
        // explicit per-encoder layer counts from the config file
        let field = |key: &str, default: &str| -> Result<Option<usize>> {
            parse_layer_spec(file.raw(key).unwrap_or(default), key)
        };
        EncoderStackConfig {
            speech_layers: field("s-layers", "2")?,
            text_layers: field("t-layers", "1")?,
            s2i_layers: field("s2i-layers", "2")?,
            s2t_layers: field("s2t-layers", "0")?,
            t2s_layers: field("t2s-layers", "0")?,
            t2i_layers: field("t2i-layers", "1")?,
            aligned: true,
        }
    };
    if args.aligned && args.aux_data.is_some() {
        return Err(Error::Config(
            "--aligned contradicts --aux-data; the auxiliary dataset defines the non-aligned condition"
                .into(),
        ));
    }
    if !config.aligned && config.s2t_layers.is_some() && args.aux_data.is_none() {
        return Err(Error::Config(format!(
            "row {row} is a non-aligned configuration; pass --aux-data with a disjoint speech/text dataset"
        )));
    }
    config.aligned = args.aux_data.is_none();
    config.validate()?;

    if let Some(aux_ds) = aux {
        if aux_ds.feature_dim != main.feature_dim {
            return Err(Error::Data(format!(
                "auxiliary feature dim {} differs from main {}",
                aux_ds.feature_dim, main.feature_dim
            )));
        }
    }

    let paper = ModelDims::default();
    let dims = ModelDims {
        mfcc_dim: main.feature_dim,
        image_dim: main.image_dim,
        conv_kernel: file.resolve(args.conv_kernel, "conv-kernel", paper.conv_kernel)?,
        conv_channels: file.resolve(args.conv_channels, "conv-channels", paper.conv_channels)?,
        conv_stride: file.resolve(args.conv_stride, "conv-stride", paper.conv_stride)?,
        hidden: file.resolve(args.hidden, "hidden", paper.hidden)?,
        attn_hidden: file.resolve(args.attn_hidden, "attn-hidden", paper.attn_hidden)?,
        embed_dim: file.resolve(args.embed_dim, "embed-dim", paper.embed_dim)?,
    };

    let mut vocabulary = main.vocabulary.clone();
    if let Some(aux_ds) = aux {
        for utt in &aux_ds.utterances {
            vocabulary.extend(&utt.text);
        }
    }

    let defaults = TrainSchedule::default();
    let schedule = TrainSchedule {
        max_epochs: file.resolve(args.epochs, "epochs", defaults.max_epochs)?,
        batch_size: file.resolve(args.batch_size, "batch-size", defaults.batch_size)?,
        learning_rate: file.resolve(args.lr, "lr", defaults.learning_rate)?,
        clip_threshold: file.resolve(args.clip, "clip", defaults.clip_threshold)?,
        margin: file.resolve(args.margin, "margin", defaults.margin)?,
        seed: 0,
        validate_on_train: args.validate_on_train,
    };

    let seed_count = file.resolve(args.seeds, "seeds", 1usize)?;
    if seed_count == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let base = file.resolve(args.seed, "seed", 0u64)?;
    let seeds: Vec<u64> = (0..seed_count as u64).map(|k| base + k).collect();
    let jobs = file.resolve(args.jobs, "jobs", 1usize)?.max(1);

    Ok(RunPlan {
        config,
        dims,
        vocabulary,
        schedule,
        seeds,
        jobs,
        out: args.out.clone(),
    })
}

fn run_seed(
    plan: &RunPlan,
    main: &MultimodalDataset,
    aux: Option<&MultimodalDataset>,
    seed: u64,
) -> Result<SeedResult> {
    let mut model = ModelParameters::new(plan.config, plan.dims, plan.vocabulary.clone(), seed)?;
    let schedule = TrainSchedule {
        seed,
        ..plan.schedule
    };
    let outcome = train(&mut model, main, aux, &schedule)?;
    let seed_dir = plan.out.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&seed_dir)?;
    std::fs::write(seed_dir.join("history.tsv"), history_to_tsv(&outcome.history))?;
    save_checkpoint(&seed_dir.join("checkpoint.gmtl"), &outcome.best, None)?;
    let best = &outcome.history[outcome.best_epoch - 1].metrics;
    Ok(SeedResult {
        seed,
        best_epoch: outcome.best_epoch,
        r1: best.r1,
        r5: best.r5,
        r10: best.r10,
        medr: best.median_rank,
    })
}

fn write_summary(path: &Path, results: &[SeedResult]) -> Result<()> {
    let mut out = String::from("seed\tbest_epoch\tr1\tr5\tr10\tmedr\n");
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.seed, r.best_epoch, r.r1, r.r5, r.r10, r.medr
        ));
    }
    let n = results.len() as f64;
    let mean = |f: fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let std = |f: fn(&SeedResult) -> f64, m: f64| {
        (results.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let (m1, m5, m10, mm) = (
        mean(|r| r.r1),
        mean(|r| r.r5),
        mean(|r| r.r10),
        mean(|r| r.medr),
    );
    out.push_str(&format!("mean\t-\t{m1}\t{m5}\t{m10}\t{mm}\n"));
    out.push_str(&format!(
        "std\t-\t{}\t{}\t{}\t{}\n",
        std(|r| r.r1, m1),
        std(|r| r.r5, m5),
        std(|r| r.r10, m10),
        std(|r| r.medr, mm),
    ));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<()> {
    let root = super::data_root(args.data.clone())?;
    let main = MultimodalDataset::load(&root)?;
    let aux = match &args.aux_data {
        Some(p) => Some(MultimodalDataset::load(p)?),
        None => None,
    };
    let plan = build_plan(&args, &main, aux.as_ref())?;
    std::fs::create_dir_all(&plan.out)?;

    let mut results: Vec<SeedResult> = Vec::with_capacity(plan.seeds.len());
    if plan.jobs <= 1 || plan.seeds.len() <= 1 {
        for &seed in &plan.seeds {
            results.push(run_seed(&plan, &main, aux.as_ref(), seed)?);
        }
    } else {
        // seeds are independent; models are built inside each worker
        let chunks: Vec<Vec<u64>> = plan
            .seeds
            .chunks(plan.seeds.len().div_ceil(plan.jobs))
            .map(<[u64]>::to_vec)
            .collect();
        let mut collected: Vec<Result<SeedResult>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in &chunks {
                let plan = &plan;
                let main = &main;
                let aux = aux.as_ref();
                handles.push(scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&seed| run_seed(plan, main, aux, seed))
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                collected.extend(h.join().expect("seed worker panicked"));
            }
        });
        for r in collected {
            results.push(r?);
        }
        results.sort_by_key(|r| r.seed);
    }

    write_summary(&plan.out.join("summary.tsv"), &results)?;
    for r in &results {
        println!(
            "seed {}: best epoch {} r10 {:.4} medr {:.1}",
            r.seed, r.best_epoch, r.r10, r.medr
        );
    }
    let mean_r10 = results.iter().map(|r| r.r10).sum::<f64>() / results.len() as f64;
    println!("mean r10 over {} seed(s): {mean_r10:.4}", results.len());
    Ok(())
}
