//! Sensitive Embedding Index (SEI) detection.
//!
//! An SEI is an embedding coordinate whose value keeps moving while the
//! model trains: per coordinate, the variability score multiplies the
//! variance over a trailing window of checkpoints by the summed absolute
//! net change across that window, and the top k% of coordinates by that
//! score form the sensitive set. The pipeline: per-token activations
//! reduce to a [`sentence_embedding`], embeddings tracked across
//! checkpoints form a [`CheckpointSeries`], [`variability`] scores each
//! coordinate, [`average_variability`] pools the tracking set, and
//! [`select_sensitive`] picks the set that a [`DropoutMask`] then zeroes.
//!
//! [`sei_dropout_experiment`] is the measurement tying SEIs to the
//! EigenScore: masking sensitive rows of a generation-embedding matrix
//! should drop the exact score more than masking a size-matched random
//! index set.

use crate::linalg::{self, DenseMatrix, Vector};
use crate::scores;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("length mismatch: {context} ({left} vs {right})")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("window of {window} deltas needs at least {} checkpoints, series has {got}", window + 1)]
    TooFewCheckpoints { window: usize, got: usize },
    #[error("k_percent must lie strictly between 0 and 100, got {0}")]
    InvalidPercent(f64),
    #[error("mask index {index} out of range for dimension {dims}")]
    IndexOutOfRange { index: usize, dims: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("checkpoint indices must be strictly increasing (saw {prev} then {next})")]
    NonIncreasingCheckpoints { prev: u64, next: u64 },
    #[error(transparent)]
    Score(#[from] scores::ScoreError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Penultimate-layer activations for one datapoint: one row per token.
#[derive(Debug, Clone)]
pub struct TokenActivations {
    tokens: usize,
    dims: usize,
    /// Row-major, tokens × dims.
    data: Vec<f64>,
}

impl TokenActivations {
    pub fn new(tokens: usize, dims: usize, data: Vec<f64>) -> Result<Self, SensitivityError> {
        if tokens == 0 {
            return Err(SensitivityError::Empty("token sequence"));
        }
        if data.len() != tokens * dims {
            return Err(SensitivityError::LengthMismatch {
                context: "TokenActivations data",
                left: data.len(),
                right: tokens * dims,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SensitivityError::Empty("finite activation data required"));
        }
        Ok(Self { tokens, dims, data })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn token_row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }
}

/// One datapoint's sentence embedding tracked across training checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    pub datapoint_id: String,
    checkpoints: Vec<(u64, Vector)>,
}

impl CheckpointSeries {
    pub fn new(
        datapoint_id: impl Into<String>,
        checkpoints: Vec<(u64, Vector)>,
    ) -> Result<Self, SensitivityError> {
        if checkpoints.is_empty() {
            return Err(SensitivityError::Empty("checkpoint series"));
        }
        let dims = checkpoints[0].1.len();
        for w in checkpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(SensitivityError::NonIncreasingCheckpoints {
                    prev: w[0].0,
                    next: w[1].0,
                });
            }
        }
        for (_, v) in &checkpoints {
            if v.len() != dims {
                return Err(SensitivityError::LengthMismatch {
                    context: "embedding lengths across checkpoints",
                    left: v.len(),
                    right: dims,
                });
            }
        }
        Ok(Self {
            datapoint_id: datapoint_id.into(),
            checkpoints,
        })
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction forbids empty series
    }

    pub fn dims(&self) -> usize {
        self.checkpoints[0].1.len()
    }

    pub fn embedding(&self, position: usize) -> &Vector {
        &self.checkpoints[position].1
    }

    pub fn checkpoint_index(&self, position: usize) -> u64 {
        self.checkpoints[position].0
    }
}

/// Per-coordinate variability and the selected sensitive index set.
#[derive(Debug, Clone)]
pub struct SensitivityProfile {
    pub variability: Vector,
    /// Ascending sensitive indices, exactly ⌈(k/100)·n⌉ of them.
    pub selected: Vec<usize>,
    pub k_percent: f64,
    /// Trailing window (number of deltas) the variability came from;
    /// 0 when the profile was built from a bare variability vector.
    pub window: usize,
}

/// Deterministic dropout mask: the listed coordinates are forced to zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutMask {
    dims: usize,
    zeroed: Vec<usize>,
}

impl DropoutMask {
    /// Indices are deduplicated and stored ascending.
    pub fn new(dims: usize, mut zeroed: Vec<usize>) -> Result<Self, SensitivityError> {
        zeroed.sort_unstable();
        zeroed.dedup();
        if let Some(&bad) = zeroed.iter().find(|&&i| i >= dims) {
            return Err(SensitivityError::IndexOutOfRange { index: bad, dims });
        }
        Ok(Self { dims, zeroed })
    }

    pub fn empty(dims: usize) -> Self {
        Self {
            dims,
            zeroed: Vec::new(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn zeroed(&self) -> &[usize] {
        &self.zeroed
    }

    pub fn is_empty(&self) -> bool {
        self.zeroed.is_empty()
    }

    /// Zero the masked coordinates of a mutable slice in place.
    pub fn apply_in_place(&self, values: &mut [f64]) {
        for &i in &self.zeroed {
            values[i] = 0.0;
        }
    }
}

/// Sentence embedding of a token-activation matrix:
/// `½·((1/m)·Σ_i H_i + H_m)` — the token mean blended with the last token.
pub fn sentence_embedding(h: &TokenActivations) -> Vector {
    let m = h.tokens();
    let n = h.dims();
    let mut out = vec![0.0; n];
    for t in 0..m {
        let row = h.token_row(t);
        for i in 0..n {
            out[i] += row[i];
        }
    }
    let inv_m = 1.0 / m as f64;
    let last = h.token_row(m - 1);
    for i in 0..n {
        out[i] = 0.5 * (out[i] * inv_m + last[i]);
    }
    Vector::new(out).expect("finite activations stay finite under averaging")
}

/// Element-wise absolute change |a − b|.
pub fn net_change(a: &Vector, b: &Vector) -> Result<Vector, SensitivityError> {
    if a.len() != b.len() {
        return Err(SensitivityError::LengthMismatch {
            context: "net_change",
            left: a.len(),
            right: b.len(),
        });
    }
    let out: Vec<f64> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .collect();
    Ok(Vector::new(out).expect("abs of finite values is finite"))
}

/// Per-coordinate variability over the trailing window:
/// `V_i = Var(e_i over the last window+1 checkpoints) · Σ |Δe_i|`,
/// population variance convention.
pub fn variability(series: &CheckpointSeries, window: usize) -> Result<Vector, SensitivityError> {
    if window == 0 {
        return Err(SensitivityError::TooFewCheckpoints {
            window,
            got: series.len(),
        });
    }
    if series.len() < window + 1 {
        return Err(SensitivityError::TooFewCheckpoints {
            window,
            got: series.len(),
        });
    }
    let n = series.dims();
    let first = series.len() - (window + 1);
    let count = (window + 1) as f64;

    let mut mean = vec![0.0; n];
    for pos in first..series.len() {
        for (m, v) in mean.iter_mut().zip(series.embedding(pos).as_slice()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0; n];
    let mut delta_sum = vec![0.0; n];
    for pos in first..series.len() {
        let e = series.embedding(pos).as_slice();
        for i in 0..n {
            let c = e[i] - mean[i];
            var[i] += c * c;
        }
        if pos > first {
            let prev = series.embedding(pos - 1).as_slice();
            for i in 0..n {
                delta_sum[i] += (e[i] - prev[i]).abs();
            }
        }
    }
    let out: Vec<f64> = (0..n).map(|i| (var[i] / count) * delta_sum[i]).collect();
    Ok(Vector::new(out).expect("finite inputs produce finite variability"))
}

/// Element-wise mean of per-datapoint variability vectors.
pub fn average_variability(profiles: &[Vector]) -> Result<Vector, SensitivityError> {
    let first = profiles.first().ok_or(SensitivityError::Empty("profile set"))?;
    let n = first.len();
    let mut out = vec![0.0; n];
    for p in profiles {
        if p.len() != n {
            return Err(SensitivityError::LengthMismatch {
                context: "average_variability",
                left: p.len(),
                right: n,
            });
        }
        for (o, v) in out.iter_mut().zip(p.as_slice()) {
            *o += v;
        }
    }
    let inv = 1.0 / profiles.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(Vector::new(out).expect("finite means"))
}

/// Select the top-⌈(k/100)·n⌉ coordinates by variability. Ties at the
/// percentile boundary break toward the lower index, which pins the set
/// size deterministically.
pub fn select_sensitive(v: &Vector, k_percent: f64) -> Result<SensitivityProfile, SensitivityError> {
    if !(k_percent > 0.0 && k_percent < 100.0) {
        return Err(SensitivityError::InvalidPercent(k_percent));
    }
    let n = v.len();
    let take = ((k_percent / 100.0) * n as f64).ceil() as usize;
    let take = take.clamp(1, n);

    let mut order: Vec<usize> = (0..n).collect();
    // Descending by value, ascending by index on ties.
    order.sort_by(|&a, &b| {
        v.as_slice()[b]
            .partial_cmp(&v.as_slice()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..take].to_vec();
    selected.sort_unstable();
    Ok(SensitivityProfile {
        variability: v.clone(),
        selected,
        k_percent,
        window: 0,
    })
}

/// Zero the masked coordinates; everything else passes through bit-exact.
/// No rescaling of survivors.
pub fn apply_mask(activations: &Vector, mask: &DropoutMask) -> Result<Vector, SensitivityError> {
    if activations.len() != mask.dims() {
        return Err(SensitivityError::LengthMismatch {
            context: "apply_mask",
            left: activations.len(),
            right: mask.dims(),
        });
    }
    let mut out = activations.as_slice().to_vec();
    mask.apply_in_place(&mut out);
    Ok(Vector::new(out).expect("masking preserves finiteness"))
}

/// Per-input outcome of the dropout comparison.
#[derive(Debug, Clone, Serialize)]
pub struct DropoutTrialOutcome {
    pub datapoint_id: String,
    /// Score decrease from masking the sensitive set.
    pub sei_drop: f64,
    /// Mean and standard deviation of the score decrease from size-matched
    /// uniformly random sets across trials.
    pub random_drop_mean: f64,
    pub random_drop_std: f64,
}

/// Aggregate report of the SEI-vs-random dropout experiment.
#[derive(Debug, Clone, Serialize)]
pub struct DropoutExperimentReport {
    pub per_input: Vec<DropoutTrialOutcome>,
    pub sei_mean: f64,
    pub sei_std: f64,
    pub random_mean: f64,
    pub random_std: f64,
    pub trials: usize,
    pub k_percent: f64,
}

/// Drop Value comparison: for each input, exact EigenScore before minus
/// after masking (a) the input's sensitive rows and (b) size-matched
/// uniformly random rows, `trials` resamples for the random arm.
///
/// Positive drop means masking lowered the score, i.e. fewer
/// confabulation-like spectra. The sensitive set comes from the paired
/// checkpoint series, using the widest window the series supports.
pub fn sei_dropout_experiment(
    embedding_sets: &[DenseMatrix],
    series: &[CheckpointSeries],
    k_percent: f64,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<DropoutExperimentReport, SensitivityError> {
    if embedding_sets.is_empty() {
        return Err(SensitivityError::Empty("embedding set list"));
    }
    if embedding_sets.len() != series.len() {
        return Err(SensitivityError::LengthMismatch {
            context: "embedding sets vs checkpoint series",
            left: embedding_sets.len(),
            right: series.len(),
        });
    }
    if trials == 0 {
        return Err(SensitivityError::Empty("trial budget"));
    }

    let mut per_input = Vec::with_capacity(embedding_sets.len());
    let mut sei_drops = Vec::new();
    let mut random_drops = Vec::new();

    for (input_idx, (e, s)) in embedding_sets.iter().zip(series).enumerate() {
        let n = e.rows();
        if s.dims() != n {
            return Err(SensitivityError::LengthMismatch {
                context: "embedding rows vs series dims",
                left: n,
                right: s.dims(),
            });
        }
        let v = variability(s, s.len() - 1)?;
        let profile = select_sensitive(&v, k_percent)?;
        let mask = DropoutMask::new(n, profile.selected.clone())?;

        let before = scores::exact_eigenscore(e, alpha)?.value;
        let sei_drop = before - scores::exact_eigenscore(&mask_rows(e, &mask), alpha)?.value;

        let take = mask.zeroed().len();
        let mut drops = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(linalg::derive_seed(
                seed,
                (input_idx as u64) << 32 | trial as u64,
            ));
            let random_set = rand::seq::index::sample(&mut rng, n, take).into_vec();
            let rmask = DropoutMask::new(n, random_set)?;
            drops.push(before - scores::exact_eigenscore(&mask_rows(e, &rmask), alpha)?.value);
        }
        let mean = drops.iter().sum::<f64>() / drops.len() as f64;
        let var = drops.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / drops.len() as f64;

        per_input.push(DropoutTrialOutcome {
            datapoint_id: s.datapoint_id.clone(),
            sei_drop,
            random_drop_mean: mean,
            random_drop_std: var.sqrt(),
        });
        sei_drops.push(sei_drop);
        random_drops.extend(drops);
    }

    let stats = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        (mean, var.sqrt())
    };
    let (sei_mean, sei_std) = stats(&sei_drops);
    let (random_mean, random_std) = stats(&random_drops);
    Ok(DropoutExperimentReport {
        per_input,
        sei_mean,
        sei_std,
        random_mean,
        random_std,
        trials,
        k_percent,
    })
}

/// Zero entire rows of an embedding matrix at the masked coordinates.
pub fn mask_rows(e: &DenseMatrix, mask: &DropoutMask) -> DenseMatrix {
    let mut out = e.clone();
    for j in 0..out.cols() {
        let col = out.column_mut(j);
        mask.apply_in_place(col);
    }
    out
}
