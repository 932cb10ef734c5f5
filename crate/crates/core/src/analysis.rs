//! Evaluation and probing: retrieval metrics, string similarity,
//! representational similarity analysis, and diagnostic classifiers over
//! frozen representations.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{MultimodalDataset, Split};
use crate::encoders::{HeadKind, ImageSide, ModelParameters};
use crate::error::{Error, Result};

// ── retrieval ───────────────────────────────────────────────────────────

fn cosine_distance_raw(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut su = 0.0;
    let mut sv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        su += a * a;
        sv += b * b;
    }
    1.0 - dot / (su * sv).sqrt()
}

/// 1-based rank of each query's correct image under ascending cosine
/// distance; ties break toward the lower image index.
fn ranks_of_correct(
    queries: &[Vec<f64>],
    images: &[Vec<f64>],
    correct: &[usize],
) -> Result<Vec<usize>> {
    if queries.len() != correct.len() {
        return Err(Error::Contract(format!(
            "{} queries but {} correct mappings",
            queries.len(),
            correct.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Contract("no candidate images".into()));
    }
    let mut ranks = Vec::with_capacity(queries.len());
    for (q, &target) in queries.iter().zip(correct) {
        if target >= images.len() {
            return Err(Error::Contract(format!(
                "correct image index {target} out of {} candidates",
                images.len()
            )));
        }
        let d_correct = cosine_distance_raw(q, &images[target]);
        let mut rank = 1usize;
        for (i, img) in images.iter().enumerate() {
            if i == target {
                continue;
            }
            let d = cosine_distance_raw(q, img);
            if d < d_correct || (d == d_correct && i < target) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    Ok(ranks)
}

/// Fraction of queries whose correct image ranks in the top `k`.
pub fn recall_at_k(
    queries: &[Vec<f64>],
    images: &[Vec<f64>],
    correct: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 || k > images.len() {
        return Err(Error::Contract(format!(
            "k = {k} outside 1..={}",
            images.len()
        )));
    }
    let ranks = ranks_of_correct(queries, images, correct)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Median of the 1-based ranks of the correct images; even counts take the
/// mean of the two middle values.
pub fn median_rank(
    queries: &[Vec<f64>],
    images: &[Vec<f64>],
    correct: &[usize],
) -> Result<f64> {
    let mut ranks = ranks_of_correct(queries, images, correct)?;
    if ranks.is_empty() {
        return Err(Error::Contract("median rank of no queries".into()));
    }
    ranks.sort_unstable();
    let n = ranks.len();
    Ok(if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    })
}

/// R@1/5/10 and median rank in one pass.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub queries: usize,
    pub candidates: usize,
}

pub fn retrieval_metrics(
    queries: &[Vec<f64>],
    images: &[Vec<f64>],
    correct: &[usize],
) -> Result<RetrievalMetrics> {
    let mut ranks = ranks_of_correct(queries, images, correct)?;
    if ranks.is_empty() {
        return Err(Error::Contract("retrieval over no queries".into()));
    }
    let m = images.len();
    let at = |k: usize| -> f64 {
        let k = k.min(m);
        ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
    };
    let (r1, r5, r10) = (at(1), at(5), at(10));
    ranks.sort_unstable();
    let n = ranks.len();
    let medr = if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    };
    Ok(RetrievalMetrics {
        r1,
        r5,
        r10,
        median_rank: medr,
        queries: n,
        candidates: m,
    })
}

/// Speech-to-image retrieval setup for one split: every caption is its own
/// query; candidates are the split's distinct images in first-appearance
/// order.
pub struct RetrievalSetup {
    pub query_embeddings: Vec<Vec<f64>>,
    pub image_embeddings: Vec<Vec<f64>>,
    pub correct: Vec<usize>,
    pub utterance_indices: Vec<usize>,
    pub image_ids: Vec<String>,
}

pub fn speech_image_retrieval(
    model: &ModelParameters,
    ds: &MultimodalDataset,
    split: Split,
) -> Result<RetrievalSetup> {
    let mut image_ids: Vec<String> = Vec::new();
    let mut position: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut utterance_indices = Vec::new();
    let mut correct = Vec::new();
    for idx in ds.utterances_in(split) {
        let utt = &ds.utterances[idx];
        let Some(image_id) = &utt.image else { continue };
        let pos = match position.get(image_id.as_str()) {
            Some(&p) => p,
            None => {
                let p = image_ids.len();
                image_ids.push(image_id.clone());
                position.insert(
                    ds.image(image_id)
                        .ok_or_else(|| Error::Data(format!("image {image_id:?} missing")))?
                        .id
                        .as_str(),
                    p,
                );
                p
            }
        };
        utterance_indices.push(idx);
        correct.push(pos);
    }
    if utterance_indices.is_empty() {
        return Err(Error::Config(format!(
            "no image-paired utterances in the {} split",
            split.label()
        )));
    }
    let mut query_embeddings = Vec::with_capacity(utterance_indices.len());
    for &idx in &utterance_indices {
        query_embeddings.push(encode_speech_head(model, ds, idx, HeadKind::SpeechToImage)?);
    }
    let mut image_embeddings = Vec::with_capacity(image_ids.len());
    for id in &image_ids {
        let entry = ds.image(id).expect("collected above");
        image_embeddings.push(encode_image_side(model, &entry.feature, ImageSide::ToSpeech)?);
    }
    Ok(RetrievalSetup {
        query_embeddings,
        image_embeddings,
        correct,
        utterance_indices,
        image_ids,
    })
}

/// Encode one utterance through the shared speech encoder and a head.
pub fn encode_speech_head(
    model: &ModelParameters,
    ds: &MultimodalDataset,
    utt_index: usize,
    head: HeadKind,
) -> Result<Vec<f64>> {
    let utt = &ds.utterances[utt_index];
    let tape = Tape::no_grad();
    let x = Tensor::new(utt.features.clone(), &[utt.frames, ds.feature_dim])?;
    let shared = model.encode_speech_shared(&tape, &x)?;
    Ok(model.encode_head(&tape, head, &shared)?.values().to_vec())
}

/// Encode one utterance's text through the shared text encoder and a head.
pub fn encode_text_head(
    model: &ModelParameters,
    ds: &MultimodalDataset,
    utt_index: usize,
    head: HeadKind,
) -> Result<Vec<f64>> {
    let utt = &ds.utterances[utt_index];
    let tape = Tape::no_grad();
    let shared = model.encode_text(&tape, &utt.text)?;
    Ok(model.encode_head(&tape, head, &shared)?.values().to_vec())
}

fn encode_image_side(
    model: &ModelParameters,
    feature: &[f64],
    side: ImageSide,
) -> Result<Vec<f64>> {
    let tape = Tape::no_grad();
    let feat = Tensor::new(feature.to_vec(), &[feature.len()])?;
    Ok(model.encode_image(&tape, side, &feat)?.values().to_vec())
}

// ── string similarity ───────────────────────────────────────────────────

/// 1 − D(a, b)/max(|a|, |b|) where D is the unit-cost Levenshtein distance.
pub fn levenshtein_similarity(a: &str, b: &str) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(
            "levenshtein similarity of an empty string".into(),
        ));
    }
    let d = levenshtein_distance(a, b);
    let max_len = a.chars().count().max(b.chars().count());
    Ok(1.0 - d as f64 / max_len as f64)
}

fn levenshtein_distance(a: &str, b: &str) -> usize {
    let bv: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=bv.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut diagonal = row[0];
        row[0] = i + 1;
        for (j, &cb) in bv.iter().enumerate() {
            let cost = if ca == cb { diagonal } else { diagonal + 1 };
            diagonal = row[j + 1];
            row[j + 1] = cost.min(row[j] + 1).min(row[j + 1] + 1);
        }
    }
    row[bv.len()]
}

// ── representational similarity ─────────────────────────────────────────

/// Symmetric matrix of pairwise similarities over a fixed item list.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wrap a symmetric matrix. Matrices built from actual similarity
    /// measures ([`from_vectors`](Self::from_vectors),
    /// [`from_texts`](Self::from_texts)) additionally keep each diagonal
    /// entry at its row maximum; affine transforms of them need not.
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(Error::Dimension(format!(
                "{} values for a {n}×{n} matrix",
                values.len()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (values[i * n + j] - values[j * n + i]).abs() > 1e-12 {
                    return Err(Error::Contract(format!(
                        "similarity matrix asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { ids, values })
    }

    /// Cosine similarity matrix of row vectors.
    pub fn from_vectors(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if ids.len() != n {
            return Err(Error::Dimension("ids and rows differ in length".into()));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let s = 1.0 - cosine_distance_raw(&rows[i], &rows[j]);
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Self::new(ids, values)
    }

    /// Normalized Levenshtein similarity matrix of texts.
    pub fn from_texts(ids: Vec<String>, texts: &[&str]) -> Result<Self> {
        let n = texts.len();
        if ids.len() != n {
            return Err(Error::Dimension("ids and texts differ in length".into()));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let s = levenshtein_similarity(texts[i], texts[j])?;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Self::new(ids, values)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ids.len() + j]
    }

    fn upper_triangle(&self) -> Vec<f64> {
        let n = self.ids.len();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.values[i * n + j]);
            }
        }
        out
    }
}

/// Pearson correlation between the upper triangles (diagonal excluded) of
/// two similarity matrices over the same items.
pub fn rsa_score(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "similarity matrices of {} vs {} items",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::Contract(
            "representational similarity needs at least 3 items".into(),
        ));
    }
    if a.ids() != b.ids() {
        return Err(Error::Contract(
            "similarity matrices are over different item orderings".into(),
        ));
    }
    pearson(&a.upper_triangle(), &b.upper_triangle())
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a similarity matrix is constant off-diagonal".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

// ── diagnostic probes ───────────────────────────────────────────────────

/// Outcome of a diagnostic classifier run.
#[derive(Clone, Copy, Debug)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    /// Tokens dropped because their aligned span vanished after
    /// downsampling (phoneme probe only).
    pub skipped: usize,
}

struct LogisticModel {
    weights: Vec<f64>, // [classes × dim]
    bias: Vec<f64>,    // [classes]
    classes: usize,
}

impl LogisticModel {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * dim..(c + 1) * dim]
                        .iter()
                        .zip(x)
                        .map(|(&w, &v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }
}

/// Multinomial logistic regression fit by full-batch gradient descent with
/// an L2 penalty on the weights (the intercept is unpenalized). Starts at
/// learning rate 0.1 and halves it whenever a step fails to decrease the
/// loss; stops when the gradient norm falls below 1e-5 or after 5000
/// iterations.
fn fit_logistic(x: &[Vec<f64>], y: &[usize], classes: usize, l2: f64) -> LogisticModel {
    let n = x.len();
    let dim = x[0].len();
    let mut model = LogisticModel {
        weights: vec![0.0; classes * dim],
        bias: vec![0.0; classes],
        classes,
    };

    let loss_of = |m: &LogisticModel| -> f64 {
        let mut loss = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z = m.logits(xi);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += log_norm - z[yi];
        }
        loss + 0.5 * l2 * m.weights.iter().map(|w| w * w).sum::<f64>()
    };

    let mut lr = 0.1;
    let mut loss = loss_of(&model);
    for _ in 0..5000 {
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let z = model.logits(xi);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / total;
                let coef = p - if c == yi { 1.0 } else { 0.0 };
                gb[c] += coef;
                for (g, &v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(xi) {
                    *g += coef * v;
                }
            }
        }
        for (g, &w) in gw.iter_mut().zip(&model.weights) {
            *g += l2 * w;
        }
        let grad_norm = gw
            .iter()
            .chain(&gb)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if grad_norm < 1e-5 {
            break;
        }
        // backtracking halving until the step decreases the loss
        let mut stepped = false;
        while lr > 1e-15 {
            let mut candidate = LogisticModel {
                weights: model.weights.clone(),
                bias: model.bias.clone(),
                classes,
            };
            for (w, &g) in candidate.weights.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, &g) in candidate.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
            let candidate_loss = loss_of(&candidate);
            if candidate_loss <= loss {
                model = candidate;
                loss = candidate_loss;
                stepped = true;
                break;
            }
            lr /= 2.0;
        }
        if !stepped {
            break;
        }
        let _ = n;
    }
    model
}

fn accuracy_of(model: &LogisticModel, x: &[Vec<f64>], y: &[usize]) -> f64 {
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| model.predict(xi) == yi)
        .count();
    correct as f64 / x.len() as f64
}

/// L2-penalized logistic probe with a deterministic seeded 2/3–1/3
/// train/test split. Every class must appear in the training portion.
pub fn logistic_probe(x: &[Vec<f64>], y: &[usize], l2: f64, seed: u64) -> Result<ProbeResult> {
    if x.len() != y.len() {
        return Err(Error::Contract("features and labels differ in length".into()));
    }
    if x.len() < 3 {
        return Err(Error::Contract("probe needs at least 3 examples".into()));
    }
    let classes = y.iter().max().map_or(0, |&m| m + 1);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (2 * x.len()) / 3;
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut present = vec![false; classes];
    for &i in train_idx {
        present[y[i]] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateSplit(
            "training portion holds fewer than 2 classes".into(),
        ));
    }
    if let Some(missing) = (0..classes).find(|&c| !present[c] && y.iter().any(|&yi| yi == c)) {
        return Err(Error::DegenerateSplit(format!(
            "class {missing} absent from the training split"
        )));
    }

    let xtr: Vec<Vec<f64>> = train_idx.iter().map(|&i| x[i].clone()).collect();
    let ytr: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
    let xte: Vec<Vec<f64>> = test_idx.iter().map(|&i| x[i].clone()).collect();
    let yte: Vec<usize> = test_idx.iter().map(|&i| y[i]).collect();
    let model = fit_logistic(&xtr, &ytr, classes, l2);
    Ok(ProbeResult {
        accuracy: accuracy_of(&model, &xte, &yte),
        train_size: xtr.len(),
        test_size: xte.len(),
        classes,
        skipped: 0,
    })
}

/// Speaker-identity probe on the task-facing (post-normalization) output of
/// the speech-to-image head.
pub fn speaker_probe(
    model: &ModelParameters,
    ds: &MultimodalDataset,
    split: Split,
    l2: f64,
    seed: u64,
) -> Result<ProbeResult> {
    let indices = ds.utterances_in(split);
    if indices.is_empty() {
        return Err(Error::Config(format!("empty {} split", split.label())));
    }
    let mut speaker_ids: Vec<&str> = Vec::new();
    let mut features = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let utt = &ds.utterances[idx];
        let class = match speaker_ids.iter().position(|s| *s == utt.speaker) {
            Some(c) => c,
            None => {
                speaker_ids.push(&utt.speaker);
                speaker_ids.len() - 1
            }
        };
        features.push(encode_speech_head(model, ds, idx, HeadKind::SpeechToImage)?);
        labels.push(class);
    }
    logistic_probe(&features, &labels, l2, seed)
}

/// Which representation the phoneme probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhonemeProbeInput {
    /// The raw input feature frames.
    RawFrames,
    /// The shared speech encoder's output, with alignment spans mapped
    /// through the convolution stride.
    SharedEncoder,
}

/// Phoneme decoding probe: mean-pool the representation over each aligned
/// phoneme token, train on tokens from `n_train` utterances and test on
/// tokens from `n_test` held-out utterances.
pub fn phoneme_decode(
    model: &ModelParameters,
    ds: &MultimodalDataset,
    split: Split,
    input: PhonemeProbeInput,
    n_train: usize,
    n_test: usize,
    l2: f64,
    seed: u64,
) -> Result<ProbeResult> {
    let mut utts: Vec<usize> = ds
        .utterances_in(split)
        .into_iter()
        .filter(|&i| !ds.utterances[i].alignment.is_empty())
        .collect();
    if utts.len() < 2 {
        return Err(Error::Contract(
            "phoneme probe needs at least 2 aligned utterances".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    utts.shuffle(&mut rng);
    let n_tr = n_train.min(utts.len() / 2).max(1);
    let n_te = n_test.min(utts.len() - n_tr);
    if n_te == 0 {
        return Err(Error::DegenerateSplit(
            "no held-out utterances for the phoneme probe".into(),
        ));
    }

    let mut label_ids: Vec<String> = Vec::new();
    let mut skipped = 0usize;
    let mut pooled = |utt_idx: usize| -> Result<Vec<(Vec<f64>, usize)>> {
        let utt = &ds.utterances[utt_idx];
        let (rows, frames, stride) = match input {
            PhonemeProbeInput::RawFrames => (utt.features.clone(), utt.frames, 1usize),
            PhonemeProbeInput::SharedEncoder => {
                let tape = Tape::no_grad();
                let x = Tensor::new(utt.features.clone(), &[utt.frames, ds.feature_dim])?;
                let enc = model.encode_speech_shared(&tape, &x)?;
                let frames = enc.shape()[0];
                (enc.values().to_vec(), frames, model.dims.conv_stride)
            }
        };
        let dim = rows.len() / frames;
        let mut tokens = Vec::with_capacity(utt.alignment.len());
        for span in &utt.alignment {
            let lo = span.start / stride;
            let hi = ((span.end - 1) / stride).min(frames.saturating_sub(1));
            if lo >= frames || lo > hi {
                skipped += 1;
                continue;
            }
            let mut mean = vec![0.0; dim];
            for f in lo..=hi {
                for (m, &v) in mean.iter_mut().zip(&rows[f * dim..(f + 1) * dim]) {
                    *m += v;
                }
            }
            let count = (hi - lo + 1) as f64;
            for m in mean.iter_mut() {
                *m /= count;
            }
            let class = match label_ids.iter().position(|l| *l == span.label) {
                Some(c) => c,
                None => {
                    label_ids.push(span.label.clone());
                    label_ids.len() - 1
                }
            };
            tokens.push((mean, class));
        }
        Ok(tokens)
    };

    let mut xtr = Vec::new();
    let mut ytr = Vec::new();
    for &idx in &utts[..n_tr] {
        for (feat, class) in pooled(idx)? {
            xtr.push(feat);
            ytr.push(class);
        }
    }
    let mut xte = Vec::new();
    let mut yte = Vec::new();
    for &idx in &utts[n_tr..n_tr + n_te] {
        for (feat, class) in pooled(idx)? {
            xte.push(feat);
            yte.push(class);
        }
    }
    if xtr.is_empty() || xte.is_empty() {
        return Err(Error::DegenerateSplit(
            "phoneme probe has an empty train or test token set".into(),
        ));
    }
    let train_classes: std::collections::HashSet<usize> = ytr.iter().copied().collect();
    if train_classes.len() < 2 {
        return Err(Error::DegenerateSplit(
            "phoneme probe training tokens cover fewer than 2 classes".into(),
        ));
    }
    let classes = label_ids.len();
    let probe = fit_logistic(&xtr, &ytr, classes, l2);
    Ok(ProbeResult {
        accuracy: accuracy_of(&probe, &xte, &yte),
        train_size: xtr.len(),
        test_size: xte.len(),
        classes,
        skipped,
    })
}

// ── similarity spaces (one per representation) ──────────────────────────

/// Pairwise-similarity matrices of the same utterances in each available
/// representation space.
pub struct SimilaritySpaces {
    pub mfcc_mean: SimilarityMatrix,
    pub text: SimilarityMatrix,
    pub image: Option<SimilarityMatrix>,
    pub s2i: Option<SimilarityMatrix>,
    pub s2t: Option<SimilarityMatrix>,
}

impl SimilaritySpaces {
    /// (name, matrix) pairs for the spaces that exist.
    pub fn named(&self) -> Vec<(&'static str, &SimilarityMatrix)> {
        let mut out: Vec<(&'static str, &SimilarityMatrix)> = Vec::new();
        if let Some(m) = &self.s2i {
            out.push(("s2i", m));
        }
        if let Some(m) = &self.s2t {
            out.push(("s2t", m));
        }
        out.push(("mfcc", &self.mfcc_mean));
        out.push(("text", &self.text));
        if let Some(m) = &self.image {
            out.push(("image", m));
        }
        out
    }
}

/// Build similarity matrices over the utterances of one split: time-mean
/// input features, text (normalized Levenshtein), image features, and the
/// available speech-head embeddings.
pub fn build_similarity_spaces(
    model: &ModelParameters,
    ds: &MultimodalDataset,
    split: Split,
) -> Result<SimilaritySpaces> {
    let indices = ds.utterances_in(split);
    if indices.len() < 3 {
        return Err(Error::Config(format!(
            "similarity spaces need at least 3 utterances in the {} split",
            split.label()
        )));
    }
    let ids: Vec<String> = indices
        .iter()
        .map(|&i| ds.utterances[i].id.clone())
        .collect();

    let mfcc_rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| {
            let utt = &ds.utterances[i];
            let dim = ds.feature_dim;
            let mut mean = vec![0.0; dim];
            for f in 0..utt.frames {
                for (m, &v) in mean.iter_mut().zip(&utt.features[f * dim..(f + 1) * dim]) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= utt.frames as f64;
            }
            mean
        })
        .collect();
    let mfcc_mean = SimilarityMatrix::from_vectors(ids.clone(), &mfcc_rows)?;

    let texts: Vec<&str> = indices
        .iter()
        .map(|&i| ds.utterances[i].text.as_str())
        .collect();
    let text = SimilarityMatrix::from_texts(ids.clone(), &texts)?;

    let image = if indices.iter().all(|&i| ds.utterances[i].image.is_some()) {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| {
                let id = ds.utterances[i].image.as_ref().unwrap();
                ds.image(id)
                    .map(|e| e.feature.clone())
                    .ok_or_else(|| Error::Data(format!("image {id:?} missing")))
            })
            .collect::<Result<_>>()?;
        Some(SimilarityMatrix::from_vectors(ids.clone(), &rows)?)
    } else {
        None
    };

    let s2i = if model.s2i.is_some() {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| encode_speech_head(model, ds, i, HeadKind::SpeechToImage))
            .collect::<Result<_>>()?;
        Some(SimilarityMatrix::from_vectors(ids.clone(), &rows)?)
    } else {
        None
    };
    let s2t = if model.s2t.is_some() {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| encode_speech_head(model, ds, i, HeadKind::SpeechToText))
            .collect::<Result<_>>()?;
        Some(SimilarityMatrix::from_vectors(ids, &rows)?)
    } else {
        None
    };

    Ok(SimilaritySpaces {
        mfcc_mean,
        text,
        image,
        s2i,
        s2t,
    })
}

// ── evaluation report ───────────────────────────────────────────────────

/// A flat metric table: (metric, value, split, checkpoint id).
#[derive(Clone, Debug, Default)]
pub struct EvaluationReport {
    pub rows: Vec<(String, f64, String, String)>,
}

impl EvaluationReport {
    pub fn push(&mut self, metric: impl Into<String>, value: f64, split: Split, checkpoint: &str) {
        self.rows
            .push((metric.into(), value, split.label().to_string(), checkpoint.to_string()));
    }

    /// Render as a tab-separated table with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("metric\tvalue\tsplit\tcheckpoint\n");
        for (metric, value, split, checkpoint) in &self.rows {
            out.push_str(&format!("{metric}\t{value}\t{split}\t{checkpoint}\n"));
        }
        out
    }
}
