//! The eight-encoder architecture: shared speech, text, and image encoders
//! plus task-specific heads, assembled from a per-encoder layer-count
//! configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{AttentionPool, Conv1d, EmbeddingTable, GruStack, Linear};

/// The three pairwise matching tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    SpeechImage,
    SpeechText,
    TextImage,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::SpeechImage, TaskId::SpeechText, TaskId::TextImage];

    pub fn label(&self) -> &'static str {
        match self {
            TaskId::SpeechImage => "speech_image",
            TaskId::SpeechText => "speech_text",
            TaskId::TextImage => "text_image",
        }
    }
}

/// Task-specific encoder heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    SpeechToImage,
    SpeechToText,
    TextToSpeech,
    TextToImage,
}

/// The two linear maps applied to image feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageSide {
    ToSpeech,
    ToText,
}

/// Per-encoder recurrent layer counts. `None` means the encoder — and the
/// whole task it participates in — is ablated; `Some(0)` means the head is
/// attention-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderStackConfig {
    pub speech_layers: Option<usize>,
    pub text_layers: Option<usize>,
    pub s2i_layers: Option<usize>,
    pub s2t_layers: Option<usize>,
    pub t2s_layers: Option<usize>,
    pub t2i_layers: Option<usize>,
    /// Whether the speech/text task trains on the same parallel data as the
    /// other tasks or on a disjoint auxiliary corpus.
    pub aligned: bool,
}

impl EncoderStackConfig {
    /// The thirteen benchmark configurations, 1-based.
    pub fn table1_row(row: usize) -> Result<Self> {
        let cfg = |s, t, s2i, s2t, t2s, t2i, aligned| EncoderStackConfig {
            speech_layers: Some(s),
            text_layers: t,
            s2i_layers: s2i,
            s2t_layers: s2t,
            t2s_layers: t2s,
            t2i_layers: t2i,
            aligned,
        };
        let c = match row {
            1 => EncoderStackConfig {
                speech_layers: Some(2),
                text_layers: None,
                s2i_layers: Some(2),
                s2t_layers: None,
                t2s_layers: None,
                t2i_layers: None,
                aligned: true,
            },
            2 => cfg(2, Some(1), Some(2), Some(0), Some(0), None, true),
            3 => cfg(2, Some(1), Some(2), Some(0), Some(0), None, false),
            4 => cfg(2, Some(1), Some(1), Some(0), Some(0), Some(1), true),
            5 => cfg(2, Some(1), Some(1), Some(1), Some(1), Some(1), true),
            6 => cfg(2, Some(1), Some(2), Some(0), Some(0), Some(1), true),
            7 => cfg(2, Some(1), Some(2), Some(1), Some(1), Some(1), true),
            8 => cfg(4, Some(1), Some(0), Some(0), Some(0), Some(0), true),
            9 => cfg(2, Some(1), Some(1), Some(0), Some(0), Some(1), false),
            10 => cfg(2, Some(1), Some(1), Some(1), Some(1), Some(1), false),
            11 => cfg(2, Some(1), Some(2), Some(0), Some(0), Some(1), false),
            12 => cfg(2, Some(1), Some(2), Some(1), Some(1), Some(1), false),
            13 => cfg(4, Some(1), Some(0), Some(0), Some(0), Some(0), false),
            _ => {
                return Err(Error::Config(format!(
                    "configuration row must be 1..=13, got {row}"
                )))
            }
        };
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s2t_layers.is_some() != self.t2s_layers.is_some() {
            return Err(Error::Config(
                "speech/text is ablated as a whole: s2t and t2s must both be present or both absent"
                    .into(),
            ));
        }
        let speech_task = self.s2i_layers.is_some() || self.s2t_layers.is_some();
        if speech_task && self.speech_layers.map_or(true, |s| s == 0) {
            return Err(Error::Config(
                "shared speech encoder needs at least one layer when a speech task is present"
                    .into(),
            ));
        }
        let text_task = self.t2s_layers.is_some() || self.t2i_layers.is_some();
        if text_task && self.text_layers.is_none() {
            return Err(Error::Config(
                "shared text encoder required when a text task is present".into(),
            ));
        }
        if !self.has_task(TaskId::SpeechImage)
            && !self.has_task(TaskId::SpeechText)
            && !self.has_task(TaskId::TextImage)
        {
            return Err(Error::Config("all tasks are ablated".into()));
        }
        Ok(())
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        match task {
            TaskId::SpeechImage => self.s2i_layers.is_some(),
            TaskId::SpeechText => self.s2t_layers.is_some(),
            TaskId::TextImage => self.t2i_layers.is_some(),
        }
    }

    /// Present tasks in the fixed round-robin order.
    pub fn tasks(&self) -> Vec<TaskId> {
        TaskId::ALL
            .into_iter()
            .filter(|t| self.has_task(*t))
            .collect()
    }
}

/// Feature and layer sizes. Defaults follow the reference setup; synthetic
/// desk-scale runs shrink them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub mfcc_dim: usize,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub conv_stride: usize,
    pub hidden: usize,
    pub attn_hidden: usize,
    pub embed_dim: usize,
    pub image_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            mfcc_dim: 13,
            conv_kernel: 6,
            conv_channels: 64,
            conv_stride: 2,
            hidden: 1024,
            attn_hidden: 128,
            embed_dim: 128,
            image_dim: 4096,
        }
    }
}

/// A task-specific head: a GRU stack (possibly empty) followed by attention
/// pooling. Each head owns its attention parameters.
#[derive(Clone, Debug)]
pub struct Head {
    pub gru: GruStack,
    pub attn: AttentionPool,
}

/// All trainable parameters of one model instance.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    pub config: EncoderStackConfig,
    pub dims: ModelDims,
    pub conv: Option<Conv1d>,
    pub speech_gru: Option<GruStack>,
    pub text_embedding: Option<EmbeddingTable>,
    pub text_gru: Option<GruStack>,
    pub s2i: Option<Head>,
    pub s2t: Option<Head>,
    pub t2s: Option<Head>,
    pub t2i: Option<Head>,
    pub i2s: Option<Linear>,
    pub i2t: Option<Linear>,
    /// Character mapping the embedding table was built for.
    pub vocabulary: Vocabulary,
}

impl ModelParameters {
    pub fn new(
        config: EncoderStackConfig,
        dims: ModelDims,
        vocabulary: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let vocab_size = vocabulary.size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let speech_present = config.s2i_layers.is_some() || config.s2t_layers.is_some();
        let text_present = config.text_layers.is_some()
            && (config.t2s_layers.is_some() || config.t2i_layers.is_some());

        let conv = if speech_present {
            Some(Conv1d::new(
                &mut rng,
                dims.conv_kernel,
                dims.mfcc_dim,
                dims.conv_channels,
                dims.conv_stride,
            )?)
        } else {
            None
        };
        let speech_gru = if speech_present {
            Some(GruStack::new(
                &mut rng,
                config.speech_layers.unwrap_or(0),
                dims.conv_channels,
                dims.hidden,
            ))
        } else {
            None
        };
        let speech_out = dims.hidden;

        let (text_embedding, text_gru, text_out) = if text_present {
            if vocab_size < 2 {
                return Err(Error::Config(
                    "text encoders need a non-empty vocabulary".into(),
                ));
            }
            let emb = EmbeddingTable::new(&mut rng, vocab_size, dims.embed_dim);
            let t_layers = config.text_layers.unwrap();
            let gru = GruStack::new(&mut rng, t_layers, dims.embed_dim, dims.hidden);
            let out = if t_layers > 0 { dims.hidden } else { dims.embed_dim };
            (Some(emb), Some(gru), out)
        } else {
            (None, None, 0)
        };

        let head = |rng: &mut ChaCha8Rng, layers: usize, in_dim: usize, dims: &ModelDims| Head {
            gru: GruStack::new(rng, layers, in_dim, dims.hidden),
            attn: AttentionPool::new(
                rng,
                if layers > 0 { dims.hidden } else { in_dim },
                dims.attn_hidden,
            ),
        };
        let head_out = |layers: usize, in_dim: usize| if layers > 0 { dims.hidden } else { in_dim };

        let s2i = config
            .s2i_layers
            .map(|l| head(&mut rng, l, speech_out, &dims));
        let s2t = config
            .s2t_layers
            .map(|l| head(&mut rng, l, speech_out, &dims));
        let t2s = config
            .t2s_layers
            .map(|l| head(&mut rng, l, text_out, &dims));
        let t2i = config
            .t2i_layers
            .map(|l| head(&mut rng, l, text_out, &dims));

        let i2s = config
            .s2i_layers
            .map(|l| {
                let out = head_out(l, speech_out);
                Linear::new(&mut rng, dims.image_dim, out)
            });
        let i2t = config
            .t2i_layers
            .map(|l| {
                let out = head_out(l, text_out);
                Linear::new(&mut rng, dims.image_dim, out)
            });

        // both sides of each loss must produce embeddings of one dimension
        if let (Some(ls2t), Some(lt2s)) = (config.s2t_layers, config.t2s_layers) {
            if head_out(ls2t, speech_out) != head_out(lt2s, text_out) {
                return Err(Error::Config(format!(
                    "speech/text embedding dims differ: {} vs {}",
                    head_out(ls2t, speech_out),
                    head_out(lt2s, text_out)
                )));
            }
        }

        Ok(Self {
            config,
            dims,
            conv,
            speech_gru,
            text_embedding,
            text_gru,
            s2i,
            s2t,
            t2s,
            t2i,
            i2s,
            i2t,
            vocabulary,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.size()
    }

    /// Shared speech encoder: convolution then the shared GRU stack.
    /// [T × mfcc_dim] → [⌈T/stride⌉ × hidden].
    pub fn encode_speech_shared(&self, tape: &Tape, mfcc: &Tensor) -> Result<Tensor> {
        let conv = self
            .conv
            .as_ref()
            .ok_or_else(|| Error::Config("speech encoder is ablated".into()))?;
        if mfcc.shape().len() != 2 || mfcc.shape()[1] != self.dims.mfcc_dim {
            return Err(Error::Dimension(format!(
                "speech input must be [T × {}], got {:?}",
                self.dims.mfcc_dim,
                mfcc.shape()
            )));
        }
        let sub = conv.forward(tape, mfcc)?;
        self.speech_gru
            .as_ref()
            .expect("speech gru present with conv")
            .forward(tape, &sub)
    }

    /// Shared text encoder: embedding lookup then the shared GRU stack.
    /// No subsampling, so the sequence length is preserved.
    pub fn encode_text_shared(&self, tape: &Tape, char_ids: &[usize]) -> Result<Tensor> {
        let emb = self
            .text_embedding
            .as_ref()
            .ok_or_else(|| Error::Config("text encoder is ablated".into()))?;
        if char_ids.is_empty() {
            return Err(Error::Contract("cannot encode an empty character sequence".into()));
        }
        let looked = emb.forward(tape, char_ids)?;
        self.text_gru
            .as_ref()
            .expect("text gru present with embedding")
            .forward(tape, &looked)
    }

    /// Encode raw text through the model's own vocabulary.
    pub fn encode_text(&self, tape: &Tape, text: &str) -> Result<Tensor> {
        self.encode_text_shared(tape, &self.vocabulary.encode(text))
    }

    fn head(&self, kind: HeadKind) -> Result<&Head> {
        let slot = match kind {
            HeadKind::SpeechToImage => &self.s2i,
            HeadKind::SpeechToText => &self.s2t,
            HeadKind::TextToSpeech => &self.t2s,
            HeadKind::TextToImage => &self.t2i,
        };
        slot.as_ref()
            .ok_or_else(|| Error::Config(format!("head {kind:?} is ablated")))
    }

    /// Task head: GRU stack (identity at zero layers), attention pooling,
    /// then L2 normalization. The output is a unit vector.
    pub fn encode_head(&self, tape: &Tape, kind: HeadKind, x: &Tensor) -> Result<Tensor> {
        let head = self.head(kind)?;
        let seq = head.gru.forward(tape, x)?;
        let pooled = head.attn.forward(tape, &seq)?;
        tape.l2_normalize(&pooled)
    }

    /// Image encoder for one side: linear map then L2 normalization.
    pub fn encode_image(&self, tape: &Tape, side: ImageSide, feat: &Tensor) -> Result<Tensor> {
        let lin = match side {
            ImageSide::ToSpeech => &self.i2s,
            ImageSide::ToText => &self.i2t,
        };
        let lin = lin
            .as_ref()
            .ok_or_else(|| Error::Config(format!("image map {side:?} is ablated")))?;
        if feat.shape() != [self.dims.image_dim] {
            return Err(Error::Dimension(format!(
                "image feature must be [{}], got {:?}",
                self.dims.image_dim,
                feat.shape()
            )));
        }
        let mapped = lin.forward(tape, feat)?;
        tape.l2_normalize(&mapped)
    }

    /// All parameters with their unique checkpoint names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        if let Some(conv) = &self.conv {
            out.push(("s.conv.weight".to_string(), conv.weight.clone()));
            out.push(("s.conv.bias".to_string(), conv.bias.clone()));
        }
        if let Some(stack) = &self.speech_gru {
            for (i, layer) in stack.layers.iter().enumerate() {
                push_gru(&mut out, &format!("s.gru{i}"), layer);
            }
        }
        if let Some(emb) = &self.text_embedding {
            out.push(("t.embed.table".to_string(), emb.table.clone()));
        }
        if let Some(stack) = &self.text_gru {
            for (i, layer) in stack.layers.iter().enumerate() {
                push_gru(&mut out, &format!("t.gru{i}"), layer);
            }
        }
        for (prefix, head) in [
            ("s2i", &self.s2i),
            ("s2t", &self.s2t),
            ("t2s", &self.t2s),
            ("t2i", &self.t2i),
        ] {
            if let Some(head) = head {
                for (i, layer) in head.gru.layers.iter().enumerate() {
                    push_gru(&mut out, &format!("{prefix}.gru{i}"), layer);
                }
                out.push((format!("{prefix}.attn.w"), head.attn.w.clone()));
                out.push((format!("{prefix}.attn.u"), head.attn.u.clone()));
            }
        }
        if let Some(lin) = &self.i2s {
            out.push(("i2s.weight".to_string(), lin.weight.clone()));
        }
        if let Some(lin) = &self.i2t {
            out.push(("i2t.weight".to_string(), lin.weight.clone()));
        }
        out
    }

    /// Mutable references to every parameter, optionally restricted to the
    /// set a task owns (its heads plus the shared encoders it touches).
    pub fn tensors_mut(&mut self, task: Option<TaskId>) -> Vec<(String, &mut Tensor)> {
        let all = collect_mut_pairs(self);
        match task {
            None => all,
            Some(t) => {
                let prefixes = task_prefixes(t);
                all.into_iter()
                    .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
                    .collect()
            }
        }
    }

    /// Cheap handles (shared storage) to the parameters a task owns.
    pub fn task_tensors(&self, task: TaskId) -> Vec<(String, Tensor)> {
        let prefixes = task_prefixes(task);
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .collect()
    }

    /// Independent copy with detached storage, for best-epoch snapshots.
    pub fn snapshot(&self) -> ModelParameters {
        let mut copy = self.clone();
        for (_, t) in collect_mut_pairs(&mut copy) {
            *t = t.deep_clone();
        }
        copy
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }
}

/// Checkpoint name prefixes owned by each task. A task updates its own heads
/// plus the shared encoders of the modalities it touches, and nothing else.
pub fn task_prefixes(task: TaskId) -> &'static [&'static str] {
    match task {
        TaskId::SpeechImage => &["s.", "s2i.", "i2s."],
        TaskId::SpeechText => &["s.", "s2t.", "t.", "t2s."],
        TaskId::TextImage => &["t.", "t2i.", "i2t."],
    }
}

fn push_gru(out: &mut Vec<(String, Tensor)>, prefix: &str, layer: &crate::nn::GruLayer) {
    out.push((format!("{prefix}.w_z"), layer.w_z.clone()));
    out.push((format!("{prefix}.w_r"), layer.w_r.clone()));
    out.push((format!("{prefix}.w_h"), layer.w_h.clone()));
    out.push((format!("{prefix}.u_z"), layer.u_z.clone()));
    out.push((format!("{prefix}.u_r"), layer.u_r.clone()));
    out.push((format!("{prefix}.u_h"), layer.u_h.clone()));
    out.push((format!("{prefix}.b_z"), layer.b_z.clone()));
    out.push((format!("{prefix}.b_r"), layer.b_r.clone()));
    out.push((format!("{prefix}.b_h"), layer.b_h.clone()));
}

fn collect_mut_pairs(model: &mut ModelParameters) -> Vec<(String, &mut Tensor)> {
    let mut out: Vec<(String, &mut Tensor)> = Vec::new();
    if let Some(conv) = &mut model.conv {
        out.push(("s.conv.weight".to_string(), &mut conv.weight));
        out.push(("s.conv.bias".to_string(), &mut conv.bias));
    }
    if let Some(stack) = &mut model.speech_gru {
        for (i, layer) in stack.layers.iter_mut().enumerate() {
            push_gru_mut(&mut out, &format!("s.gru{i}"), layer);
        }
    }
    if let Some(emb) = &mut model.text_embedding {
        out.push(("t.embed.table".to_string(), &mut emb.table));
    }
    if let Some(stack) = &mut model.text_gru {
        for (i, layer) in stack.layers.iter_mut().enumerate() {
            push_gru_mut(&mut out, &format!("t.gru{i}"), layer);
        }
    }
    for (prefix, head) in [
        ("s2i", &mut model.s2i),
        ("s2t", &mut model.s2t),
        ("t2s", &mut model.t2s),
        ("t2i", &mut model.t2i),
    ] {
        if let Some(head) = head {
            for (i, layer) in head.gru.layers.iter_mut().enumerate() {
                push_gru_mut(&mut out, &format!("{prefix}.gru{i}"), layer);
            }
            out.push((format!("{prefix}.attn.w"), &mut head.attn.w));
            out.push((format!("{prefix}.attn.u"), &mut head.attn.u));
        }
    }
    if let Some(lin) = &mut model.i2s {
        out.push(("i2s.weight".to_string(), &mut lin.weight));
    }
    if let Some(lin) = &mut model.i2t {
        out.push(("i2t.weight".to_string(), &mut lin.weight));
    }
    out
}

fn push_gru_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    layer: &'a mut crate::nn::GruLayer,
) {
    out.push((format!("{prefix}.w_z"), &mut layer.w_z));
    out.push((format!("{prefix}.w_r"), &mut layer.w_r));
    out.push((format!("{prefix}.w_h"), &mut layer.w_h));
    out.push((format!("{prefix}.u_z"), &mut layer.u_z));
    out.push((format!("{prefix}.u_r"), &mut layer.u_r));
    out.push((format!("{prefix}.u_h"), &mut layer.u_h));
    out.push((format!("{prefix}.b_z"), &mut layer.b_z));
    out.push((format!("{prefix}.b_r"), &mut layer.b_r));
    out.push((format!("{prefix}.b_h"), &mut layer.b_h));
}
