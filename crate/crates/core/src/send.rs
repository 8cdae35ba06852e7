//! SenD (Sensitivity Dropout): the training protocol, run end to end
//! against a desk-scale feed-forward next-token model.
//!
//! The protocol trains in windows of `T` checkpoints. During a window the
//! current dropout mask is applied to the penultimate layer on every
//! forward pass, and the penultimate representations of a held-out
//! tracking set are recorded at each checkpoint. At the window boundary
//! the per-coordinate variability of those recordings is averaged over
//! the tracking set, the top-k% indices become the mask for the next
//! window, and the previous mask is discarded (replacement, not union).
//! Training stops once both the loss threshold ε and the EES threshold δ
//! are met, or at `max_checkpoints`.
//!
//! [`normal_loop`] is the control arm: identical schedule, scoring, and
//! random streams, permanently empty mask, no sensitivity bookkeeping.
//! With `k_percent = 0` the SenD arm degenerates to exactly the control
//! arm, bit for bit — masking is the only intervention, so every random
//! stream is derived from (run seed, checkpoint, role) and never from the
//! mask state.
//!
//! The toy model is deliberately small: token embeddings feed a fixed
//! window (mean vector plus last-token vector), a stack of tanh layers
//! ends in a penultimate layer of width `embed_dim` — the layer the mask
//! bites on and the layer all sentence embeddings are read from — and a
//! linear head produces next-token logits. Everything is f64 and runs in
//! deterministic serial order per run.

use crate::linalg::{derive_seed, DenseMatrix, Vector};
use crate::scores::{self, EesConfig, ScoreError};
use crate::sensitivity::{
    self, average_variability, select_sensitive, sentence_embedding, CheckpointSeries,
    DropoutMask, SensitivityError, TokenActivations,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// A tokenized datapoint.
pub type TokenSeq = Vec<u32>;

/// Tokens sampled per generated continuation.
const GEN_LEN: usize = 12;
/// Tracking prompts scored per checkpoint (EES/exact averaged over them).
const EVAL_PROMPTS: usize = 6;
/// Prompt length fed to the generator.
const PROMPT_LEN: usize = 4;
/// Sequences per SGD mini-batch.
const BATCH_SIZE: usize = 8;

// Stream tags for deriving independent sub-seeds from the run seed.
const TAG_SPLIT: u64 = 0x5350;
const TAG_TRAIN: u64 = 0x5452;
const TAG_GEN: u64 = 0x4745;

#[derive(Debug, Error)]
pub enum SendError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("tracking split is empty; lower alpha_split or grow the corpus")]
    EmptyTrackingSet,
    #[error("alpha_split must lie strictly between 0 and 100, got {0}")]
    InvalidSplit(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at checkpoint {checkpoint}: loss = {loss}")]
    Divergence { checkpoint: usize, loss: f64 },
    #[error("sequence too short: need at least {need} tokens, got {got}")]
    SequenceTooShort { need: usize, got: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

/// Shape and initialization of the toy next-token model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ToyModelConfig {
    pub vocab: usize,
    /// Window of trailing tokens visible to the predictor.
    pub context: usize,
    /// Width of the penultimate layer; must match the sensitivity
    /// pipeline dimension.
    pub embed_dim: usize,
    /// Hidden tanh layers between the input features and the penultimate
    /// layer.
    pub hidden_layers: usize,
    pub learning_rate: f64,
    pub init_seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            context: 16,
            embed_dim: 64,
            hidden_layers: 2,
            learning_rate: 0.15,
            init_seed: 0,
        }
    }
}

impl ToyModelConfig {
    fn validate(&self) -> Result<(), SendError> {
        if self.vocab == 0 || self.context == 0 || self.embed_dim == 0 {
            return Err(SendError::InvalidConfig(
                "vocab, context, and embed_dim must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SendError::InvalidConfig(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Protocol thresholds and schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SendConfig {
    /// Loss convergence threshold ε.
    pub epsilon: f64,
    /// EES convergence threshold δ.
    pub delta: f64,
    /// Checkpoints per sensitivity window T.
    pub t_window: usize,
    /// Share of coordinates dropped each window; 0 disables dropout and
    /// makes the protocol identical to plain training.
    pub k_percent: f64,
    /// Train share of the corpus in percent; the rest becomes the
    /// tracking set.
    pub alpha_split: f64,
    pub max_checkpoints: usize,
    pub ees: EesConfig,
    pub gen_temperature: f64,
    /// Generations per scored prompt (the K of the metrics).
    pub gen_count: usize,
    /// Master seed for the run: split, batch order, and sampling streams
    /// derive from it.
    pub seed: u64,
}

impl Default for SendConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            delta: -1.0,
            t_window: 3,
            k_percent: 20.0,
            alpha_split: 95.0,
            max_checkpoints: 18,
            ees: EesConfig::default(),
            gen_temperature: 0.5,
            gen_count: 10,
            seed: 0,
        }
    }
}

impl SendConfig {
    fn validate(&self) -> Result<(), SendError> {
        if !(self.epsilon > 0.0) {
            return Err(SendError::InvalidConfig("epsilon must be positive".into()));
        }
        if self.t_window < 2 {
            return Err(SendError::InvalidConfig(
                "t_window must be >= 2 (variability needs at least two recorded states)".into(),
            ));
        }
        if !(self.k_percent >= 0.0 && self.k_percent < 100.0) {
            return Err(SendError::InvalidConfig(
                "k_percent must lie in [0, 100)".into(),
            ));
        }
        if !(self.alpha_split > 0.0 && self.alpha_split < 100.0) {
            return Err(SendError::InvalidSplit(self.alpha_split));
        }
        if self.max_checkpoints == 0 {
            return Err(SendError::InvalidConfig(
                "max_checkpoints must be >= 1".into(),
            ));
        }
        if self.gen_count < 2 {
            return Err(SendError::InvalidConfig(
                "gen_count must be >= 2 for covariance scoring".into(),
            ));
        }
        if !(self.gen_temperature > 0.0) {
            return Err(SendError::InvalidConfig(
                "gen_temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Send,
    Normal,
}

/// One checkpoint's log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub checkpoint_index: usize,
    pub train_loss: f64,
    pub ees: f64,
    pub exact_score: f64,
    /// Mask active while this checkpoint trained (ascending indices).
    pub active_mask: Vec<usize>,
    pub wall_seconds: f64,
}

/// Full trajectory of one protocol run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub mode: RunMode,
    pub seed: u64,
    /// True when the loop exited because both thresholds were met.
    pub converged: bool,
    pub records: Vec<CheckpointRecord>,
}

/// Feed-forward next-token model with an exposed penultimate layer.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    /// vocab × embed_dim, row per token.
    embed: Vec<f64>,
    layers: Vec<Layer>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Layer {
    /// out_dim × in_dim, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Layer {
    fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale)
            .collect();
        Self {
            w,
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc.tanh());
        }
    }
}

/// Per-position forward cache used by backprop.
struct ForwardTrace {
    features: Vec<f64>,
    /// Post-activation output of every layer; last entry is the
    /// penultimate activation before masking.
    hidden: Vec<Vec<f64>>,
    penult_masked: Vec<f64>,
    probs: Vec<f64>,
}

/// Gradient accumulators mirroring the parameter layout.
struct Gradients {
    embed: Vec<f64>,
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
    positions: usize,
}

impl ToyModel {
    pub fn new(cfg: &ToyModelConfig) -> Result<Self, SendError> {
        cfg.validate()?;
        let n = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.init_seed, 0x696e_6974));
        let scale = 1.0 / (n as f64).sqrt();
        let embed = (0..cfg.vocab * n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale)
            .collect();
        let mut layers = Vec::new();
        let mut in_dim = 2 * n;
        for _ in 0..cfg.hidden_layers {
            layers.push(Layer::new(in_dim, n, &mut rng));
            in_dim = n;
        }
        // Penultimate layer: always present, width n.
        layers.push(Layer::new(in_dim, n, &mut rng));
        let out_scale = 1.0 / (n as f64).sqrt();
        let out_w = (0..cfg.vocab * n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * out_scale)
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            layers,
            out_w,
            out_b: vec![0.0; cfg.vocab],
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// Penultimate-layer weight row feeding coordinate `i` (for the
    /// zero-gradient contract on masked coordinates).
    pub fn penultimate_row(&self, i: usize) -> &[f64] {
        let l = self.layers.last().unwrap();
        &l.w[i * l.in_dim..(i + 1) * l.in_dim]
    }

    pub fn penultimate_bias(&self, i: usize) -> f64 {
        self.layers.last().unwrap().b[i]
    }

    pub fn output_column(&self, i: usize) -> Vec<f64> {
        let n = self.cfg.embed_dim;
        (0..self.cfg.vocab).map(|v| self.out_w[v * n + i]).collect()
    }

    fn check_tokens(&self, seq: &[u32]) -> Result<(), SendError> {
        for &t in seq {
            if t as usize >= self.cfg.vocab {
                return Err(SendError::TokenOutOfRange {
                    token: t,
                    vocab: self.cfg.vocab,
                });
            }
        }
        Ok(())
    }

    /// Input features at `pos`: mean embedding over the trailing window
    /// blended next to the last token's embedding.
    fn features(&self, seq: &[u32], pos: usize) -> Vec<f64> {
        let n = self.cfg.embed_dim;
        let start = (pos + 1).saturating_sub(self.cfg.context);
        let window = &seq[start..=pos];
        let mut x = vec![0.0; 2 * n];
        for &t in window {
            let row = &self.embed[t as usize * n..(t as usize + 1) * n];
            for i in 0..n {
                x[i] += row[i];
            }
        }
        let inv = 1.0 / window.len() as f64;
        for i in 0..n {
            x[i] *= inv;
        }
        let last = &self.embed[seq[pos] as usize * n..(seq[pos] as usize + 1) * n];
        x[n..2 * n].copy_from_slice(last);
        x
    }

    fn forward_position(&self, seq: &[u32], pos: usize, mask: &DropoutMask) -> ForwardTrace {
        let features = self.features(seq, pos);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut cur = features.clone();
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.forward(&cur, &mut out);
            hidden.push(out.clone());
            cur = out;
        }
        let mut penult_masked = hidden.last().unwrap().clone();
        mask.apply_in_place(&mut penult_masked);

        let vocab = self.cfg.vocab;
        let n = self.cfg.embed_dim;
        let mut logits = vec![0.0; vocab];
        for v in 0..vocab {
            let row = &self.out_w[v * n..(v + 1) * n];
            let mut acc = self.out_b[v];
            for (wi, pi) in row.iter().zip(&penult_masked) {
                acc += wi * pi;
            }
            logits[v] = acc;
        }
        let probs = softmax(&logits, 1.0);
        ForwardTrace {
            features,
            hidden,
            penult_masked,
            probs,
        }
    }

    /// Penultimate activation (post-mask) at every position of a sequence.
    pub fn token_activations(
        &self,
        seq: &[u32],
        mask: &DropoutMask,
    ) -> Result<TokenActivations, SendError> {
        self.check_tokens(seq)?;
        if seq.is_empty() {
            return Err(SendError::SequenceTooShort { need: 1, got: 0 });
        }
        let n = self.cfg.embed_dim;
        let mut data = Vec::with_capacity(seq.len() * n);
        for pos in 0..seq.len() {
            let trace = self.forward_position(seq, pos, mask);
            data.extend_from_slice(&trace.penult_masked);
        }
        Ok(TokenActivations::new(seq.len(), n, data)?)
    }

    fn backward_position(
        &self,
        seq: &[u32],
        pos: usize,
        target: u32,
        mask: &DropoutMask,
        grads: &mut Gradients,
    ) -> f64 {
        let trace = self.forward_position(seq, pos, mask);
        let n = self.cfg.embed_dim;
        let vocab = self.cfg.vocab;
        let loss = -trace.probs[target as usize].max(1e-300).ln();

        // d logits = probs − onehot(target)
        let mut dlogits = trace.probs.clone();
        dlogits[target as usize] -= 1.0;

        // Output head.
        let mut dpenult = vec![0.0; n];
        for v in 0..vocab {
            let dv = dlogits[v];
            grads.out_b[v] += dv;
            let grow = &mut grads.out_w[v * n..(v + 1) * n];
            let wrow = &self.out_w[v * n..(v + 1) * n];
            for i in 0..n {
                grow[i] += dv * trace.penult_masked[i];
                dpenult[i] += dv * wrow[i];
            }
        }
        // Mask gate: masked coordinates pass no gradient, so the
        // parameters feeding them stay bit-identical.
        mask.apply_in_place(&mut dpenult);

        // Back through the tanh stack.
        let mut delta = dpenult;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let h = &trace.hidden[li];
            // dz = delta ⊙ (1 − h²)
            for (d, hv) in delta.iter_mut().zip(h) {
                *d *= 1.0 - hv * hv;
            }
            let input: &[f64] = if li == 0 {
                &trace.features
            } else {
                &trace.hidden[li - 1]
            };
            let (gw, gb) = &mut grads.layers[li];
            let mut dinput = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let dz = delta[o];
                gb[o] += dz;
                let grow = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    grow[i] += dz * input[i];
                    dinput[i] += dz * wrow[i];
                }
            }
            delta = dinput;
        }

        // delta now spans the 2n input features: mean-of-window then last.
        let start = (pos + 1).saturating_sub(self.cfg.context);
        let window = &seq[start..=pos];
        let inv = 1.0 / window.len() as f64;
        for &t in window {
            let g = &mut grads.embed[t as usize * n..(t as usize + 1) * n];
            for i in 0..n {
                g[i] += delta[i] * inv;
            }
        }
        let last = seq[pos] as usize;
        let g = &mut grads.embed[last * n..(last + 1) * n];
        for i in 0..n {
            g[i] += delta[n + i];
        }
        grads.positions += 1;
        loss
    }

    fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        if grads.positions == 0 {
            return;
        }
        let step = lr / grads.positions as f64;
        for (p, g) in self.embed.iter_mut().zip(&grads.embed) {
            *p -= step * g;
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in layer.w.iter_mut().zip(gw) {
                *p -= step * g;
            }
            for (p, g) in layer.b.iter_mut().zip(gb) {
                *p -= step * g;
            }
        }
        for (p, g) in self.out_w.iter_mut().zip(&grads.out_w) {
            *p -= step * g;
        }
        for (p, g) in self.out_b.iter_mut().zip(&grads.out_b) {
            *p -= step * g;
        }
    }

    fn fresh_gradients(&self) -> Gradients {
        Gradients {
            embed: vec![0.0; self.embed.len()],
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
            out_w: vec![0.0; self.out_w.len()],
            out_b: vec![0.0; self.out_b.len()],
            positions: 0,
        }
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// Seeded shuffle-then-split of the corpus into train and tracking sets.
pub fn split_dataset(
    corpus: &[TokenSeq],
    alpha_split: f64,
    seed: u64,
) -> Result<(Vec<TokenSeq>, Vec<TokenSeq>), SendError> {
    if corpus.is_empty() {
        return Err(SendError::EmptyCorpus);
    }
    if !(alpha_split > 0.0 && alpha_split < 100.0) {
        return Err(SendError::InvalidSplit(alpha_split));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_train = ((alpha_split / 100.0) * corpus.len() as f64).floor() as usize;
    let n_train = n_train.min(corpus.len());
    let train = order[..n_train].iter().map(|&i| corpus[i].clone()).collect();
    let track = order[n_train..].iter().map(|&i| corpus[i].clone()).collect();
    Ok((train, track))
}

/// One full pass of mini-batch SGD over the training set with the mask
/// applied to the penultimate layer on every forward and backward pass.
/// Returns the mean next-token cross-entropy over all positions.
pub fn train_checkpoint(
    model: &mut ToyModel,
    train: &[TokenSeq],
    mask: &DropoutMask,
    checkpoint_index: usize,
    seed: u64,
) -> Result<f64, SendError> {
    for seq in train {
        model.check_tokens(seq)?;
        if seq.len() < 2 {
            return Err(SendError::SequenceTooShort {
                need: 2,
                got: seq.len(),
            });
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_TRAIN ^ checkpoint_index as u64));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);

    let lr = model.cfg.learning_rate;
    let mut total_loss = 0.0;
    let mut total_positions = 0usize;
    for batch in order.chunks(BATCH_SIZE) {
        let mut grads = model.fresh_gradients();
        for &si in batch {
            let seq = &train[si];
            for pos in 0..seq.len() - 1 {
                total_loss += model.backward_position(seq, pos, seq[pos + 1], mask, &mut grads);
            }
        }
        total_positions += grads.positions;
        model.apply_gradients(&grads, lr);
    }
    let mean = total_loss / total_positions.max(1) as f64;
    if !mean.is_finite() {
        return Err(SendError::Divergence {
            checkpoint: checkpoint_index,
            loss: mean,
        });
    }
    Ok(mean)
}

/// Sentence embedding of every tracking datapoint under the current model
/// and mask; masked coordinates read as exact zeros.
pub fn record_representations(
    model: &ToyModel,
    tracking: &[TokenSeq],
    mask: &DropoutMask,
) -> Result<Vec<Vector>, SendError> {
    if tracking.is_empty() {
        return Err(SendError::EmptyTrackingSet);
    }
    tracking
        .iter()
        .map(|seq| Ok(sentence_embedding(&model.token_activations(seq, mask)?)))
        .collect()
}

/// Sample K continuations of a prompt at the given temperature and return
/// their sentence embeddings as the columns of an `embed_dim × K` matrix.
pub fn generate_k_outputs(
    model: &ToyModel,
    mask: &DropoutMask,
    prompt: &[u32],
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<DenseMatrix, SendError> {
    if k < 2 {
        return Err(SendError::InvalidConfig(
            "generation count must be >= 2".into(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(SendError::InvalidConfig(
            "temperature must be positive".into(),
        ));
    }
    if prompt.is_empty() {
        return Err(SendError::SequenceTooShort { need: 1, got: 0 });
    }
    model.check_tokens(prompt)?;
    let n = model.cfg.embed_dim;
    let mut out = DenseMatrix::zeros(n, k);
    for gen in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(gen as u64);
        let mut seq: Vec<u32> = prompt.to_vec();
        for _ in 0..GEN_LEN {
            let trace = model.forward_position(&seq, seq.len() - 1, mask);
            let probs = softmax(
                &trace
                    .probs
                    .iter()
                    .map(|p| p.max(1e-300).ln())
                    .collect::<Vec<_>>(),
                temperature,
            );
            let draw: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = model.cfg.vocab - 1;
            for (v, &p) in probs.iter().enumerate() {
                acc += p;
                if draw < acc {
                    tok = v;
                    break;
                }
            }
            seq.push(tok as u32);
        }
        let activations = model.token_activations(&seq, mask)?;
        let emb = sentence_embedding(&activations);
        out.column_mut(gen).copy_from_slice(emb.as_slice());
    }
    Ok(out)
}

/// EES and exact score at the current state, averaged over the fixed
/// tracking prompts.
///
/// Sampling streams derive from the prompt alone, not the checkpoint:
/// scoring every checkpoint with common random numbers makes the
/// trajectory reflect model drift rather than resampling noise, and keeps
/// the two protocol arms on identical draws.
fn score_checkpoint(
    model: &ToyModel,
    mask: &DropoutMask,
    prompts: &[Vec<u32>],
    cfg: &SendConfig,
) -> Result<(f64, f64), SendError> {
    let mut ees_sum = 0.0;
    let mut exact_sum = 0.0;
    for (pi, prompt) in prompts.iter().enumerate() {
        let gen_seed = derive_seed(cfg.seed, TAG_GEN ^ pi as u64);
        let e = generate_k_outputs(
            model,
            mask,
            prompt,
            cfg.gen_count,
            cfg.gen_temperature,
            gen_seed,
        )?;
        ees_sum += scores::efficient_eigenscore(&e, &cfg.ees)?.value;
        exact_sum += scores::exact_eigenscore(&e, scores::DEFAULT_ALPHA)?.value;
    }
    let m = prompts.len() as f64;
    Ok((ees_sum / m, exact_sum / m))
}

fn run_protocol(
    cfg: &SendConfig,
    model_cfg: &ToyModelConfig,
    corpus: &[TokenSeq],
    mode: RunMode,
) -> Result<RunLog, SendError> {
    cfg.validate()?;
    let (train, track) = split_dataset(corpus, cfg.alpha_split, derive_seed(cfg.seed, TAG_SPLIT))?;
    if track.is_empty() {
        return Err(SendError::EmptyTrackingSet);
    }
    let mut model = ToyModel::new(model_cfg)?;
    let n = model_cfg.embed_dim;
    let prompts: Vec<Vec<u32>> = track
        .iter()
        .take(EVAL_PROMPTS)
        .map(|seq| seq[..PROMPT_LEN.min(seq.len())].to_vec())
        .collect();

    let mut mask = DropoutMask::empty(n);
    let mut records = Vec::new();
    let mut window: Vec<Vec<Vector>> = Vec::new();
    let mut converged = false;

    let dropout_active = mode == RunMode::Send && cfg.k_percent > 0.0;

    for cp in 0..cfg.max_checkpoints {
        let started = Instant::now();
        let loss = train_checkpoint(&mut model, &train, &mask, cp, cfg.seed)?;
        if dropout_active {
            window.push(record_representations(&model, &track, &mask)?);
        }
        let (ees, exact) = score_checkpoint(&model, &mask, &prompts, cfg)?;
        records.push(CheckpointRecord {
            checkpoint_index: cp,
            train_loss: loss,
            ees,
            exact_score: exact,
            active_mask: mask.zeroed().to_vec(),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if loss <= cfg.epsilon && ees <= cfg.delta {
            converged = true;
            break;
        }
        if dropout_active && (cp + 1) % cfg.t_window == 0 {
            // Window boundary: variability per tracking datapoint over the
            // T recorded states, averaged, top-k%, mask replaced wholesale.
            let profiles: Vec<Vector> = (0..track.len())
                .map(|dp| {
                    let series = CheckpointSeries::new(
                        format!("track-{dp}"),
                        window
                            .iter()
                            .enumerate()
                            .map(|(t, reps)| (t as u64, reps[dp].clone()))
                            .collect(),
                    )?;
                    sensitivity::variability(&series, cfg.t_window - 1)
                })
                .collect::<Result<_, SensitivityError>>()?;
            let v_avg = average_variability(&profiles)?;
            let profile = select_sensitive(&v_avg, cfg.k_percent)?;
            mask = DropoutMask::new(n, profile.selected)?;
            window.clear();
        }
    }
    Ok(RunLog {
        mode,
        seed: cfg.seed,
        converged,
        records,
    })
}

/// The SenD arm: windowed sensitivity dropout per the protocol above.
pub fn send_loop(
    cfg: &SendConfig,
    model_cfg: &ToyModelConfig,
    corpus: &[TokenSeq],
) -> Result<RunLog, SendError> {
    run_protocol(cfg, model_cfg, corpus, RunMode::Send)
}

/// The control arm: identical schedule and scoring, permanently empty
/// mask, no sensitivity bookkeeping.
pub fn normal_loop(
    cfg: &SendConfig,
    model_cfg: &ToyModelConfig,
    corpus: &[TokenSeq],
) -> Result<RunLog, SendError> {
    run_protocol(cfg, model_cfg, corpus, RunMode::Normal)
}

/// Side-by-side summary of a SenD run against its seed-matched control.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub checkpoints_compared: usize,
    pub send_mean_ees: f64,
    pub normal_mean_ees: f64,
    /// Population variance of the per-checkpoint EES trajectory.
    pub send_ees_variance: f64,
    pub normal_ees_variance: f64,
    pub send_final_ees: f64,
    pub normal_final_ees: f64,
    pub send_final_loss: f64,
    pub normal_final_loss: f64,
    pub send_wall_seconds: f64,
    pub normal_wall_seconds: f64,
    /// Extra wall time of the SenD arm over the control arm, percent.
    pub overhead_percent: f64,
}

/// Compare two run logs checkpoint-by-checkpoint, truncating to the
/// shorter trajectory.
pub fn compare_runs(send: &RunLog, normal: &RunLog) -> Result<ComparisonReport, SendError> {
    let n = send.records.len().min(normal.records.len());
    if n == 0 {
        return Err(SendError::InvalidConfig("empty run logs".into()));
    }
    let stats = |log: &RunLog| {
        let ees: Vec<f64> = log.records[..n].iter().map(|r| r.ees).collect();
        let mean = ees.iter().sum::<f64>() / n as f64;
        let var = ees.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
        let wall: f64 = log.records[..n].iter().map(|r| r.wall_seconds).sum();
        (mean, var, wall)
    };
    let (send_mean, send_var, send_wall) = stats(send);
    let (normal_mean, normal_var, normal_wall) = stats(normal);
    let overhead = if normal_wall > 0.0 {
        (send_wall - normal_wall) / normal_wall * 100.0
    } else {
        0.0
    };
    Ok(ComparisonReport {
        checkpoints_compared: n,
        send_mean_ees: send_mean,
        normal_mean_ees: normal_mean,
        send_ees_variance: send_var,
        normal_ees_variance: normal_var,
        send_final_ees: send.records[n - 1].ees,
        normal_final_ees: normal.records[n - 1].ees,
        send_final_loss: send.records[n - 1].train_loss,
        normal_final_loss: normal.records[n - 1].train_loss,
        send_wall_seconds: send_wall,
        normal_wall_seconds: normal_wall,
        overhead_percent: overhead,
    })
}

/// Synthetic next-token corpus: deterministic cyclic grammars and repeated
/// motifs, with a per-token chance of a uniform noise token.
pub fn synthetic_corpus(
    items: usize,
    seq_len: usize,
    vocab: usize,
    noise: f64,
    seed: u64,
) -> Vec<TokenSeq> {
    assert!(vocab >= 4, "corpus needs a vocabulary of at least 4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::with_capacity(items);
    for _ in 0..items {
        let style: u8 = rng.random_range(0..2);
        let mut seq = Vec::with_capacity(seq_len);
        match style {
            0 => {
                // Arithmetic cycle over a sub-range of the vocabulary.
                let step = rng.random_range(1..4u32);
                let start = rng.random_range(0..vocab as u32);
                let modulus = rng.random_range(vocab as u32 / 2..=vocab as u32);
                for i in 0..seq_len {
                    seq.push((start + step * i as u32) % modulus);
                }
            }
            _ => {
                // Repeating motif.
                let motif_len = rng.random_range(3..6usize);
                let motif: Vec<u32> =
                    (0..motif_len).map(|_| rng.random_range(0..vocab as u32)).collect();
                for i in 0..seq_len {
                    seq.push(motif[i % motif_len]);
                }
            }
        }
        for t in seq.iter_mut() {
            if rng.random::<f64>() < noise {
                *t = rng.random_range(0..vocab as u32);
            }
        }
        corpus.push(seq);
    }
    corpus
}
