//! Round-robin multi-task optimization with Adam, global-norm gradient
//! clipping, early stopping on validation R@10, and checkpointing.

mod adam;
pub mod checkpoint;

pub use adam::{clip_gradients, OptimizerState, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{retrieval_metrics, speech_image_retrieval, RetrievalMetrics};
use crate::autodiff::{Tape, Tensor};
use crate::data::{MultimodalDataset, Split};
use crate::encoders::{HeadKind, ImageSide, ModelParameters, TaskId};
use crate::error::{Error, Result};
use crate::loss::{contrastive_loss, LossConfig};

/// One task's data binding: the dataset it draws batches from and the
/// train-split utterances usable for it.
pub struct TaskSpec<'a> {
    pub id: TaskId,
    pub data: &'a MultimodalDataset,
    pub pool: Vec<usize>,
}

impl<'a> TaskSpec<'a> {
    /// Bind a task to a dataset. Image-matching tasks keep only utterances
    /// paired with an image; the speech/text task uses every utterance.
    pub fn build(id: TaskId, data: &'a MultimodalDataset) -> Result<Self> {
        let pool: Vec<usize> = data
            .utterances_in(Split::Train)
            .into_iter()
            .filter(|&i| match id {
                TaskId::SpeechImage | TaskId::TextImage => data.utterances[i].image.is_some(),
                TaskId::SpeechText => true,
            })
            .collect();
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "no usable training utterances for the {} task",
                id.label()
            )));
        }
        Ok(Self { id, data, pool })
    }
}

/// Epoch budget, batch size, seeding and validation policy.
#[derive(Clone, Copy, Debug)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_threshold: f64,
    pub margin: f64,
    pub seed: u64,
    /// Evaluate retrieval on the training split instead of the validation
    /// split (overfitting sanity runs).
    pub validate_on_train: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 25,
            batch_size: 32,
            learning_rate: 2e-4,
            clip_threshold: 2.0,
            margin: 0.2,
            seed: 0,
            validate_on_train: false,
        }
    }
}

impl TrainSchedule {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            batch_size: self.batch_size,
        }
    }
}

/// Encode one batch for a task and take a clipped Adam step on that task's
/// parameters (its heads plus the shared encoders it touches). Returns the
/// batch loss.
pub fn train_task_batch(
    model: &mut ModelParameters,
    opt: &mut OptimizerState,
    task: &TaskSpec<'_>,
    batch: &[usize],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let ds = task.data;
    let mut left = Vec::with_capacity(batch.len());
    let mut right = Vec::with_capacity(batch.len());
    for &idx in batch {
        let utt = &ds.utterances[idx];
        match task.id {
            TaskId::SpeechImage => {
                let x = Tensor::new(utt.features.clone(), &[utt.frames, ds.feature_dim])?;
                let shared = model.encode_speech_shared(&tape, &x)?;
                left.push(model.encode_head(&tape, HeadKind::SpeechToImage, &shared)?);
                right.push(encode_utterance_image(model, &tape, ds, idx, ImageSide::ToSpeech)?);
            }
            TaskId::SpeechText => {
                let x = Tensor::new(utt.features.clone(), &[utt.frames, ds.feature_dim])?;
                let shared = model.encode_speech_shared(&tape, &x)?;
                left.push(model.encode_head(&tape, HeadKind::SpeechToText, &shared)?);
                let text = model.encode_text(&tape, &utt.text)?;
                right.push(model.encode_head(&tape, HeadKind::TextToSpeech, &text)?);
            }
            TaskId::TextImage => {
                let text = model.encode_text(&tape, &utt.text)?;
                left.push(model.encode_head(&tape, HeadKind::TextToImage, &text)?);
                right.push(encode_utterance_image(model, &tape, ds, idx, ImageSide::ToText)?);
            }
        }
    }
    let loss = contrastive_loss(&tape, &left, &right, loss_cfg)?;
    let loss_value = loss.item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "{} loss diverged to {loss_value}",
            task.id.label()
        )));
    }
    tape.backward(&loss)?;
    let task_tensors = model.task_tensors(task.id);
    clip_gradients(&task_tensors, opt.clip_threshold)?;
    opt.adam_step(&mut model.tensors_mut(Some(task.id)))?;
    model.zero_grads();
    Ok(loss_value)
}

fn encode_utterance_image(
    model: &ModelParameters,
    tape: &Tape,
    ds: &MultimodalDataset,
    utt_index: usize,
    side: ImageSide,
) -> Result<Tensor> {
    let utt = &ds.utterances[utt_index];
    let image_id = utt.image.as_ref().ok_or_else(|| {
        Error::Contract(format!("utterance {:?} has no paired image", utt.id))
    })?;
    let entry = ds
        .image(image_id)
        .ok_or_else(|| Error::Data(format!("image {image_id:?} missing")))?;
    let feat = Tensor::new(entry.feature.clone(), &[entry.feature.len()])?;
    model.encode_image(tape, side, &feat)
}

/// Per-epoch scheduler outcome.
#[derive(Clone, Debug)]
pub struct EpochStats {
    /// (task, updates performed, mean batch loss) in round-robin order.
    pub tasks: Vec<(TaskId, usize, f64)>,
}

impl EpochStats {
    pub fn updates(&self) -> usize {
        self.tasks.iter().map(|(_, n, _)| n).sum()
    }

    pub fn loss_of(&self, id: TaskId) -> Option<f64> {
        self.tasks
            .iter()
            .find(|(t, _, _)| *t == id)
            .map(|&(_, _, l)| l)
    }
}

/// One epoch of round-robin training: reshuffle every task's pool, then
/// cycle through the tasks in fixed order until the task with the fewest
/// full batches runs out. Every present task performs the same number of
/// updates.
pub fn round_robin_epoch(
    model: &mut ModelParameters,
    opt: &mut OptimizerState,
    tasks: &[TaskSpec<'_>],
    loss_cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to train".into()));
    }
    let batch = loss_cfg.batch_size;
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut order = task.pool.clone();
        order.shuffle(rng);
        orders.push(order);
    }
    let rounds = orders
        .iter()
        .map(|o| o.len() / batch)
        .min()
        .expect("at least one task");
    if rounds == 0 {
        return Err(Error::Config(format!(
            "smallest task pool has fewer than one full batch of {batch}"
        )));
    }
    let mut totals = vec![0.0f64; tasks.len()];
    for round in 0..rounds {
        for (t, task) in tasks.iter().enumerate() {
            let slice = &orders[t][round * batch..(round + 1) * batch];
            totals[t] += train_task_batch(model, opt, task, slice, loss_cfg)?;
        }
    }
    Ok(EpochStats {
        tasks: tasks
            .iter()
            .zip(&totals)
            .map(|(task, &total)| (task.id, rounds, total / rounds as f64))
            .collect(),
    })
}

/// One epoch's scheduler stats plus validation retrieval metrics.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stats: EpochStats,
    pub metrics: RetrievalMetrics,
}

/// Best checkpoint (by validation R@10) and the full metric history.
pub struct TrainOutcome {
    pub best: ModelParameters,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Train a model on `main` (with the speech/text task drawing from `aux`
/// when given), evaluating retrieval after every epoch and retaining the
/// parameters of the epoch with the best R@10.
pub fn train(
    model: &mut ModelParameters,
    main: &MultimodalDataset,
    aux: Option<&MultimodalDataset>,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    if schedule.max_epochs == 0 {
        return Err(Error::Config("schedule needs at least one epoch".into()));
    }
    if !model.config.aligned && model.config.has_task(TaskId::SpeechText) && aux.is_none() {
        return Err(Error::Config(
            "non-aligned configuration requires an auxiliary speech/text dataset".into(),
        ));
    }
    let loss_cfg = schedule.loss_config();
    loss_cfg.validate()?;

    let mut tasks = Vec::new();
    for id in model.config.tasks() {
        let data = match (id, aux) {
            (TaskId::SpeechText, Some(aux_ds)) => aux_ds,
            _ => main,
        };
        tasks.push(TaskSpec::build(id, data)?);
    }

    let val_split = if schedule.validate_on_train {
        Split::Train
    } else {
        Split::Validation
    };
    let mut opt = OptimizerState::new(schedule.learning_rate, schedule.clip_threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut history = Vec::with_capacity(schedule.max_epochs);
    let mut best: Option<(usize, f64, ModelParameters)> = None;

    for epoch in 1..=schedule.max_epochs {
        let stats = round_robin_epoch(model, &mut opt, &tasks, &loss_cfg, &mut rng)?;
        let setup = speech_image_retrieval(model, main, val_split)?;
        let metrics =
            retrieval_metrics(&setup.query_embeddings, &setup.image_embeddings, &setup.correct)?;
        let better = match &best {
            None => true,
            Some((_, best_r10, _)) => metrics.r10 > *best_r10,
        };
        if better {
            best = Some((epoch, metrics.r10, model.snapshot()));
        }
        history.push(EpochRecord {
            epoch,
            stats,
            metrics,
        });
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        history,
    })
}

/// Render a metric history as a TSV table. The output is a pure function of
/// the run, so identical seeds produce byte-identical files.
pub fn history_to_tsv(history: &[EpochRecord]) -> String {
    let mut out = String::from(
        "epoch\tupdates\tloss_speech_image\tloss_speech_text\tloss_text_image\tr1\tr5\tr10\tmedr\n",
    );
    for rec in history {
        let loss_field = |id: TaskId| -> String {
            rec.stats
                .loss_of(id)
                .map_or_else(|| "-".to_string(), |l| format!("{l}"))
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            rec.epoch,
            rec.stats.updates(),
            loss_field(TaskId::SpeechImage),
            loss_field(TaskId::SpeechText),
            loss_field(TaskId::TextImage),
            rec.metrics.r1,
            rec.metrics.r5,
            rec.metrics.r10,
            rec.metrics.median_rank,
        ));
    }
    out
}
