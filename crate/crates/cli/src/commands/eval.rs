use gmtl_core::analysis::{
    build_similarity_spaces, phoneme_decode, retrieval_metrics, rsa_score, speaker_probe,
    speech_image_retrieval, EvaluationReport, PhonemeProbeInput,
};
use gmtl_core::data::{MultimodalDataset, Split};
use gmtl_core::trainer::load_checkpoint;
use gmtl_core::{Error, Result};

use crate::EvalArgs;

pub fn run(args: EvalArgs) -> Result<()> {
    let root = super::data_root(args.data.clone())?;
    let ds = MultimodalDataset::load(&root)?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    if model.dims.mfcc_dim != ds.feature_dim || model.dims.image_dim != ds.image_dim {
        return Err(Error::Data(format!(
            "checkpoint expects feature/image dims {}/{} but the dataset has {}/{}",
            model.dims.mfcc_dim, model.dims.image_dim, ds.feature_dim, ds.image_dim
        )));
    }
    let split = Split::parse(&args.split)?;
    let checkpoint_id = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());

    let (retrieval, rsa, probes) = match args.metrics.as_str() {
        "retrieval" => (true, false, false),
        "rsa" => (false, true, false),
        "probes" => (false, false, true),
        "all" => (true, true, true),
        other => {
            return Err(Error::Config(format!(
                "unknown metric family {other:?}; use retrieval, rsa, probes or all"
            )))
        }
    };

    let mut report = EvaluationReport::default();

    if retrieval {
        let setup = speech_image_retrieval(&model, &ds, split)?;
        let m = retrieval_metrics(&setup.query_embeddings, &setup.image_embeddings, &setup.correct)?;
        report.push("retrieval/r@1", m.r1, split, &checkpoint_id);
        report.push("retrieval/r@5", m.r5, split, &checkpoint_id);
        report.push("retrieval/r@10", m.r10, split, &checkpoint_id);
        report.push("retrieval/medr", m.median_rank, split, &checkpoint_id);
        report.push(
            "retrieval/candidates",
            m.candidates as f64,
            split,
            &checkpoint_id,
        );
    }

    if rsa {
        let spaces = build_similarity_spaces(&model, &ds, split)?;
        let named = spaces.named();
        println!("pairwise representational similarity ({} split):", split.label());
        print!("{:>8}", "");
        for (name, _) in &named {
            print!("{name:>8}");
        }
        println!();
        for (row_name, row_matrix) in &named {
            print!("{row_name:>8}");
            for (col_name, col_matrix) in &named {
                let r = rsa_score(row_matrix, col_matrix)?;
                print!("{r:>8.3}");
                if row_name < col_name {
                    report.push(
                        format!("rsa/{row_name}_{col_name}"),
                        r,
                        split,
                        &checkpoint_id,
                    );
                }
            }
            println!();
        }
    }

    if probes {
        if model.s2i.is_some() {
            let speaker = speaker_probe(&model, &ds, split, args.l2, args.probe_seed)?;
            report.push("probe/speaker_s2i", speaker.accuracy, split, &checkpoint_id);
            report.push(
                "probe/speaker_classes",
                speaker.classes as f64,
                split,
                &checkpoint_id,
            );
        }
        let mfcc = phoneme_decode(
            &model,
            &ds,
            split,
            PhonemeProbeInput::RawFrames,
            2500,
            2500,
            args.l2,
            args.probe_seed,
        )?;
        report.push("probe/phoneme_mfcc", mfcc.accuracy, split, &checkpoint_id);
        let enc = phoneme_decode(
            &model,
            &ds,
            split,
            PhonemeProbeInput::SharedEncoder,
            2500,
            2500,
            args.l2,
            args.probe_seed,
        )?;
        report.push("probe/phoneme_s", enc.accuracy, split, &checkpoint_id);
        if enc.skipped > 0 {
            report.push(
                "probe/phoneme_s_skipped_tokens",
                enc.skipped as f64,
                split,
                &checkpoint_id,
            );
        }
    }

    let table = report.to_table();
    print!("{table}");
    if let Some(path) = &args.out {
        std::fs::write(path, table)?;
    }
    Ok(())
}
