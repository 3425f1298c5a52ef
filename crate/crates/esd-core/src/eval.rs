//! Evaluation kit: reconstruction metrics, confusion matrices,
//! frozen-feature probes, few-shot curves, ablations, and denoising scores.
//!
//! Series are day-major `[365 * 6]` throughout, matching the decoder output
//! and the clean arrays kept by the synthetic generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{EsdNet, ModelConfig, ModelError, TimeSeriesSample, BANDS, DAYS};
use crate::synth::SyntheticDataset;
use crate::train::{train, TrainConfig, TrainError};

pub const BAND_NAMES: [&str; BANDS] = ["blue", "green", "red", "nir", "swir1", "swir2"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 2 points per band for correlation, got {0}")]
    TooFewPoints(usize),
    #[error("label {label} at index {index} out of range for {k} classes")]
    LabelOutOfRange { index: usize, label: usize, k: usize },
    #[error("class {0} has no training samples")]
    EmptyClass(usize),
    #[error("bad size: {0}")]
    BadSize(String),
    #[error("no corrupted days recorded")]
    NoCorruptedDays,
    #[error("bad value {value:?} for knob {knob}: {reason}")]
    BadKnobValue {
        knob: String,
        value: String,
        reason: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ---------------------------------------------------------------------------
// Reconstruction metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BandMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub cc: f64,
}

/// Per-band and band-averaged reconstruction fidelity over a whole set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReconMetrics {
    pub per_band: [BandMetrics; BANDS],
    pub mean_mae: f64,
    pub mean_rmse: f64,
    pub mean_cc: f64,
}

/// MAE, RMSE, and Pearson correlation per band over all (sample, day) pairs.
/// Inputs are day-major `[365 * 6]` series; truth first, prediction second.
pub fn recon_metrics(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<ReconMetrics, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} truth series vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let n_points = truth.len() * DAYS;
    if n_points < 2 {
        return Err(EvalError::TooFewPoints(n_points));
    }
    let mut abs_sum = [0.0f64; BANDS];
    let mut sq_sum = [0.0f64; BANDS];
    let mut sx = [0.0f64; BANDS];
    let mut sy = [0.0f64; BANDS];
    let mut sxx = [0.0f64; BANDS];
    let mut syy = [0.0f64; BANDS];
    let mut sxy = [0.0f64; BANDS];
    for (i, (x, y)) in truth.iter().zip(pred).enumerate() {
        if x.len() != DAYS * BANDS || y.len() != DAYS * BANDS {
            return Err(EvalError::ShapeMismatch(format!(
                "series {i}: lengths {} and {}, expected {}",
                x.len(),
                y.len(),
                DAYS * BANDS
            )));
        }
        for d in 0..DAYS {
            for b in 0..BANDS {
                let xv = x[d * BANDS + b];
                let yv = y[d * BANDS + b];
                let e = yv - xv;
                abs_sum[b] += e.abs();
                sq_sum[b] += e * e;
                sx[b] += xv;
                sy[b] += yv;
                sxx[b] += xv * xv;
                syy[b] += yv * yv;
                sxy[b] += xv * yv;
            }
        }
    }
    let n = n_points as f64;
    let mut per_band = [BandMetrics { mae: 0.0, rmse: 0.0, cc: 0.0 }; BANDS];
    for b in 0..BANDS {
        let cov = sxy[b] - sx[b] * sy[b] / n;
        let vx = sxx[b] - sx[b] * sx[b] / n;
        let vy = syy[b] - sy[b] * sy[b] / n;
        let denom = (vx * vy).sqrt();
        per_band[b] = BandMetrics {
            mae: abs_sum[b] / n,
            rmse: (sq_sum[b] / n).sqrt(),
            cc: if denom > 0.0 { (cov / denom).clamp(-1.0, 1.0) } else { 0.0 },
        };
    }
    Ok(ReconMetrics {
        per_band,
        mean_mae: per_band.iter().map(|m| m.mae).sum::<f64>() / BANDS as f64,
        mean_rmse: per_band.iter().map(|m| m.rmse).sum::<f64>() / BANDS as f64,
        mean_cc: per_band.iter().map(|m| m.cc).sum::<f64>() / BANDS as f64,
    })
}

pub fn recon_csv(m: &ReconMetrics) -> String {
    let mut out = String::from("band,mae,rmse,cc\n");
    for (b, name) in BAND_NAMES.iter().enumerate() {
        let bm = &m.per_band[b];
        out.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", bm.mae, bm.rmse, bm.cc));
    }
    out.push_str(&format!(
        "mean,{:.6},{:.6},{:.6}\n",
        m.mean_mae, m.mean_rmse, m.mean_cc
    ));
    out
}

// ---------------------------------------------------------------------------
// Confusion matrix
// ---------------------------------------------------------------------------

/// K x K counts; rows are reference classes, columns are predictions, so row
/// sums give producer's accuracy denominators and column sums user's.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self, EvalError> {
        if k == 0 || counts.len() != k * k {
            return Err(EvalError::ShapeMismatch(format!(
                "{} counts for k = {k}",
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn from_labels(reference: &[usize], predicted: &[usize], k: usize) -> Result<Self, EvalError> {
        if reference.len() != predicted.len() {
            return Err(EvalError::ShapeMismatch(format!(
                "{} reference labels vs {} predictions",
                reference.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![0u64; k * k];
        for (i, (&r, &p)) in reference.iter().zip(predicted).enumerate() {
            for (what, label) in [("reference", r), ("predicted", p)] {
                if label >= k {
                    let _ = what;
                    return Err(EvalError::LabelOutOfRange { index: i, label, k });
                }
            }
            counts[r * k + p] += 1;
        }
        Self::from_counts(k, counts)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        (0..self.k).map(|c| self.at(r, c)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.at(r, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.at(i, i)).sum()
    }

    /// Overall accuracy, in [0, 1].
    pub fn oa(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64
    }

    /// Producer's accuracy (recall) for one class; 0 when the class is empty.
    pub fn pa(&self, class: usize) -> f64 {
        let denom = self.row_sum(class);
        if denom == 0 {
            return 0.0;
        }
        self.at(class, class) as f64 / denom as f64
    }

    /// User's accuracy (precision) for one class; 0 when never predicted.
    pub fn ua(&self, class: usize) -> f64 {
        let denom = self.col_sum(class);
        if denom == 0 {
            return 0.0;
        }
        self.at(class, class) as f64 / denom as f64
    }

    pub fn f1(&self, class: usize) -> f64 {
        let p = self.ua(class);
        let r = self.pa(class);
        if p + r == 0.0 {
            return 0.0;
        }
        2.0 * p * r / (p + r)
    }

    pub fn macro_precision(&self) -> f64 {
        (0..self.k).map(|c| self.ua(c)).sum::<f64>() / self.k as f64
    }

    pub fn macro_recall(&self) -> f64 {
        (0..self.k).map(|c| self.pa(c)).sum::<f64>() / self.k as f64
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.k).map(|c| self.f1(c)).sum::<f64>() / self.k as f64
    }
}

/// Matrix as CSV in the table layout: count grid, PA column, UA row, OA in
/// the corner. Percentages use two decimals like the published tables.
pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let k = cm.k();
    let name = |c: usize| -> String {
        class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"))
    };
    let mut out = String::from("class");
    for c in 0..k {
        out.push_str(&format!(",{}", name(c)));
    }
    out.push_str(",pa\n");
    for r in 0..k {
        out.push_str(&name(r));
        for c in 0..k {
            out.push_str(&format!(",{}", cm.at(r, c)));
        }
        out.push_str(&format!(",{:.2}%\n", 100.0 * cm.pa(r)));
    }
    out.push_str("ua");
    for c in 0..k {
        out.push_str(&format!(",{:.2}%", 100.0 * cm.ua(c)));
    }
    out.push_str(&format!(",{:.2}%\n", 100.0 * cm.oa()));
    out
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Dequantized latent vectors, concatenated over time: `t_lat * d` reals.
    Codes,
    /// Temporal mean of the dequantized latents: `d` reals.
    Pooled,
    /// Flattened day-major reflectance: `365 * 6` reals.
    Raw,
    /// Four seasonal means per band: `4 * 6` reals.
    Composite,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Codes => "codes",
            FeatureMode::Pooled => "pooled",
            FeatureMode::Raw => "raw",
            FeatureMode::Composite => "composite",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "codes" => Ok(FeatureMode::Codes),
            "pooled" => Ok(FeatureMode::Pooled),
            "raw" => Ok(FeatureMode::Raw),
            "composite" => Ok(FeatureMode::Composite),
            other => Err(format!(
                "unknown feature mode {other:?}; expected codes, pooled, raw, or composite"
            )),
        }
    }
}

/// Frozen-feature vectors for downstream probes. The model is only consulted
/// for the latent modes; raw and composite come straight from the series.
pub fn extract_features(
    net: &EsdNet,
    samples: &[TimeSeriesSample],
    mode: FeatureMode,
) -> Result<Vec<Vec<f64>>, EvalError> {
    samples
        .par_iter()
        .map(|sample| feature_vector(net, sample, mode))
        .collect()
}

fn feature_vector(
    net: &EsdNet,
    sample: &TimeSeriesSample,
    mode: FeatureMode,
) -> Result<Vec<f64>, EvalError> {
    match mode {
        FeatureMode::Codes | FeatureMode::Pooled => {
            let seq = net.encode(sample)?;
            let spec = net.fsq();
            let d = spec.dim();
            let mut blocks = Vec::with_capacity(seq.codes.len() * d);
            for &code in &seq.codes {
                let q = spec.unpack(code).map_err(ModelError::from)?;
                blocks.extend(q.normalized(spec));
            }
            if mode == FeatureMode::Codes {
                Ok(blocks)
            } else {
                let t = seq.codes.len();
                let mut pooled = vec![0.0; d];
                for block in blocks.chunks_exact(d) {
                    for (p, v) in pooled.iter_mut().zip(block) {
                        *p += v;
                    }
                }
                for p in &mut pooled {
                    *p /= t as f64;
                }
                Ok(pooled)
            }
        }
        FeatureMode::Raw => Ok(sample.reflectance.clone()),
        FeatureMode::Composite => {
            // Quarter boundaries over the 365-day year.
            let bounds = [0, 91, 182, 273, DAYS];
            let mut out = Vec::with_capacity(4 * BANDS);
            for s in 0..4 {
                let (lo, hi) = (bounds[s], bounds[s + 1]);
                for b in 0..BANDS {
                    let sum: f64 = (lo..hi).map(|d| sample.reflectance[d * BANDS + b]).sum();
                    out.push(sum / (hi - lo) as f64);
                }
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum ProbeAlgorithm {
    /// Multinomial logistic regression, full-batch gradient descent.
    Linear,
    /// One-vs-rest regularized least squares, argmax over class scores.
    Ridge { lambda: f64 },
    /// Euclidean nearest neighbours; ties vote for the smallest class id.
    Knn { k: usize },
    /// Bagged CART with Gini impurity and sqrt(features) candidates a split.
    RandomForest { trees: usize },
}

impl ProbeAlgorithm {
    pub fn name(self) -> String {
        match self {
            ProbeAlgorithm::Linear => "linear".into(),
            ProbeAlgorithm::Ridge { .. } => "ridge".into(),
            ProbeAlgorithm::Knn { k } => format!("knn{k}"),
            ProbeAlgorithm::RandomForest { .. } => "random_forest".into(),
        }
    }
}

impl std::str::FromStr for ProbeAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ProbeAlgorithm::Linear),
            "ridge" => Ok(ProbeAlgorithm::Ridge { lambda: 1.0 }),
            "knn1" => Ok(ProbeAlgorithm::Knn { k: 1 }),
            "knn3" => Ok(ProbeAlgorithm::Knn { k: 3 }),
            "random_forest" => Ok(ProbeAlgorithm::RandomForest { trees: 100 }),
            other => Err(format!(
                "unknown probe {other:?}; expected linear, ridge, knn1, knn3, or random_forest"
            )),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeResult {
    pub classifier: String,
    pub feature_source: String,
    pub train_size: usize,
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

fn check_probe_inputs(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    k: usize,
) -> Result<usize, EvalError> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "features vs labels: train {}/{}, test {}/{}",
            train_x.len(),
            train_y.len(),
            test_x.len(),
            test_y.len()
        )));
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(EvalError::BadSize("empty train or test set".into()));
    }
    let dim = train_x[0].len();
    if dim == 0 {
        return Err(EvalError::BadSize("zero-length feature vectors".into()));
    }
    for (i, row) in train_x.iter().chain(test_x.iter()).enumerate() {
        if row.len() != dim {
            return Err(EvalError::ShapeMismatch(format!(
                "feature row {i} has length {}, expected {dim}",
                row.len()
            )));
        }
    }
    for (i, &y) in train_y.iter().chain(test_y.iter()).enumerate() {
        if y >= k {
            return Err(EvalError::LabelOutOfRange { index: i, label: y, k });
        }
    }
    let mut seen = vec![false; k];
    for &y in train_y {
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(EvalError::EmptyClass(missing));
    }
    Ok(dim)
}

/// Trains the chosen classifier on frozen features and scores the test set.
/// `seed` only affects the random forest; the other algorithms are exact.
pub fn fit_predict_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    k: usize,
    algorithm: ProbeAlgorithm,
    feature_source: &str,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    let dim = check_probe_inputs(train_x, train_y, test_x, test_y, k)?;
    let predictions = match algorithm {
        ProbeAlgorithm::Linear => linear_probe(train_x, train_y, test_x, k, dim),
        ProbeAlgorithm::Ridge { lambda } => ridge_probe(train_x, train_y, test_x, k, dim, lambda),
        ProbeAlgorithm::Knn { k: nn } => {
            if nn == 0 {
                return Err(EvalError::BadSize("knn needs k >= 1".into()));
            }
            knn_probe(train_x, train_y, test_x, k, nn)
        }
        ProbeAlgorithm::RandomForest { trees } => {
            if trees == 0 {
                return Err(EvalError::BadSize("random forest needs >= 1 tree".into()));
            }
            forest_probe(train_x, train_y, test_x, k, dim, trees, seed)
        }
    };
    let confusion = ConfusionMatrix::from_labels(test_y, &predictions, k)?;
    Ok(ProbeResult {
        classifier: algorithm.name(),
        feature_source: feature_source.to_string(),
        train_size: train_x.len(),
        oa: confusion.oa(),
        precision: confusion.macro_precision(),
        recall: confusion.macro_recall(),
        f1: confusion.macro_f1(),
        confusion,
    })
}

/// Column means and deviations from the training set; zero deviation maps to
/// one so constant features pass through centred instead of exploding.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>], dim: usize) -> Self {
        let n = x.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in x {
            for j in 0..dim {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v - self.mean[j]) / self.scale[j])
                    .collect()
            })
            .collect()
    }
}

fn argmax_row(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    k: usize,
    dim: usize,
) -> Vec<usize> {
    let std = Standardizer::fit(train_x, dim);
    let xs = std.apply(train_x);
    let ts = std.apply(test_x);
    let n = xs.len();
    // Weights [k x (dim + 1)], bias last; momentum gradient descent on the
    // mean cross entropy from a zero start is deterministic.
    let cols = dim + 1;
    let mut w = vec![0.0f64; k * cols];
    let mut vel = vec![0.0f64; k * cols];
    let (lr, momentum, iters) = (0.5, 0.9, 500);
    let mut grad = vec![0.0f64; k * cols];
    let mut probs = vec![0.0f64; k];
    for _ in 0..iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, &y) in xs.iter().zip(train_y) {
            softmax_scores(&w, row, k, dim, &mut probs);
            for c in 0..k {
                let delta = probs[c] - if c == y { 1.0 } else { 0.0 };
                let base = c * cols;
                for (j, &v) in row.iter().enumerate() {
                    grad[base + j] += delta * v;
                }
                grad[base + dim] += delta;
            }
        }
        for i in 0..k * cols {
            vel[i] = momentum * vel[i] - lr * grad[i] / n as f64;
            w[i] += vel[i];
        }
    }
    ts.iter()
        .map(|row| {
            softmax_scores(&w, row, k, dim, &mut probs);
            argmax_row(&probs)
        })
        .collect()
}

fn softmax_scores(w: &[f64], row: &[f64], k: usize, dim: usize, out: &mut [f64]) {
    let cols = dim + 1;
    for c in 0..k {
        let base = c * cols;
        let mut s = w[base + dim];
        for (j, &v) in row.iter().enumerate() {
            s += w[base + j] * v;
        }
        out[c] = s;
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in out.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in out.iter_mut() {
        *s /= sum;
    }
}

/// Cholesky factorization of a symmetric positive definite matrix, in place;
/// returns the lower triangle. Ridge regularization keeps it definite.
fn cholesky(a: &mut [f64], m: usize) {
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for p in 0..j {
                s -= a[i * m + p] * a[j * m + p];
            }
            if i == j {
                a[i * m + i] = s.max(1e-12).sqrt();
            } else {
                a[i * m + j] = s / a[j * m + j];
            }
        }
    }
}

fn cholesky_solve(l: &[f64], m: usize, b: &mut [f64]) {
    for i in 0..m {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * m + p] * b[p];
        }
        b[i] = s / l[i * m + i];
    }
    for i in (0..m).rev() {
        let mut s = b[i];
        for p in i + 1..m {
            s -= l[p * m + i] * b[p];
        }
        b[i] = s / l[i * m + i];
    }
}

fn ridge_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    k: usize,
    dim: usize,
    lambda: f64,
) -> Vec<usize> {
    let std = Standardizer::fit(train_x, dim);
    let xs = std.apply(train_x);
    let ts = std.apply(test_x);
    let n = xs.len();
    // One-vs-rest least squares on centred indicators; the intercept is the
    // class prior because the standardized features have zero mean.
    let mut prior = vec![0.0f64; k];
    for &y in train_y {
        prior[y] += 1.0 / n as f64;
    }
    let yc = |i: usize, c: usize| -> f64 {
        (if train_y[i] == c { 1.0 } else { 0.0 }) - prior[c]
    };

    let mut w = vec![0.0f64; k * dim];
    if dim <= n {
        // Primal: (X'X + lambda I) W = X'Y. Only the lower triangle is
        // accumulated; the factorization never reads the upper one.
        let mut a = vec![0.0f64; dim * dim];
        for row in &xs {
            for i in 0..dim {
                for j in 0..=i {
                    a[i * dim + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..dim {
            a[i * dim + i] += lambda;
        }
        cholesky(&mut a, dim);
        for c in 0..k {
            let mut b = vec![0.0f64; dim];
            for (i, row) in xs.iter().enumerate() {
                let y = yc(i, c);
                for (bj, &v) in b.iter_mut().zip(row) {
                    *bj += v * y;
                }
            }
            cholesky_solve(&a, dim, &mut b);
            w[c * dim..(c + 1) * dim].copy_from_slice(&b);
        }
    } else {
        // Dual: alpha = (XX' + lambda I)^-1 Y, W = X' alpha.
        let mut g = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let dot: f64 = xs[i].iter().zip(&xs[j]).map(|(a, b)| a * b).sum();
                g[i * n + j] = dot;
                g[j * n + i] = dot;
            }
            g[i * n + i] += lambda;
        }
        cholesky(&mut g, n);
        for c in 0..k {
            let mut alpha: Vec<f64> = (0..n).map(|i| yc(i, c)).collect();
            cholesky_solve(&g, n, &mut alpha);
            for (i, row) in xs.iter().enumerate() {
                let a = alpha[i];
                for (j, &v) in row.iter().enumerate() {
                    w[c * dim + j] += a * v;
                }
            }
        }
    }

    ts.iter()
        .map(|row| {
            let scores: Vec<f64> = (0..k)
                .map(|c| {
                    prior[c]
                        + row
                            .iter()
                            .zip(&w[c * dim..(c + 1) * dim])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            argmax_row(&scores)
        })
        .collect()
}

fn knn_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    k: usize,
    neighbours: usize,
) -> Vec<usize> {
    let nn = neighbours.min(train_x.len());
    test_x
        .par_iter()
        .map(|q| {
            let mut dists: Vec<(f64, usize)> = train_x
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let d: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, i)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut votes = vec![0usize; k];
            for &(_, i) in dists.iter().take(nn) {
                votes[train_y[i]] += 1;
            }
            let mut best = 0;
            for c in 1..k {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

enum TreeNode {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    fn predict(&self, row: &[f64]) -> usize {
        match self {
            TreeNode::Leaf(c) => *c,
            TreeNode::Split { feature, threshold, left, right } => {
                if row[*feature] <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }
}

fn majority(counts: &[u64]) -> usize {
    let mut best = 0;
    for c in 1..counts.len() {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

fn gini(counts: &[u64], total: f64) -> f64 {
    let mut g = 1.0;
    for &c in counts {
        let p = c as f64 / total;
        g -= p * p;
    }
    g
}

fn grow_tree(
    x: &[Vec<f64>],
    y: &[usize],
    idx: &[usize],
    k: usize,
    mtry: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> TreeNode {
    let mut counts = vec![0u64; k];
    for &i in idx {
        counts[y[i]] += 1;
    }
    let total = idx.len() as f64;
    let node_gini = gini(&counts, total);
    if node_gini == 0.0 || idx.len() < 2 {
        return TreeNode::Leaf(majority(&counts));
    }

    // Candidate features: a fresh random draw per split.
    let mut features: Vec<usize> = (0..dim).collect();
    features.partial_shuffle(rng, mtry);
    features.truncate(mtry);

    let mut best: Option<(f64, usize, f64)> = None; // (weighted child gini, feature, threshold)
    let mut order: Vec<usize> = idx.to_vec();
    for &f in &features {
        order.sort_by(|&a, &b| x[a][f].partial_cmp(&x[b][f]).unwrap().then(a.cmp(&b)));
        let mut left = vec![0u64; k];
        let mut right = counts.clone();
        for cut in 1..order.len() {
            let prev = order[cut - 1];
            left[y[prev]] += 1;
            right[y[prev]] -= 1;
            let (lo, hi) = (x[prev][f], x[order[cut]][f]);
            if lo == hi {
                continue;
            }
            let nl = cut as f64;
            let nr = total - nl;
            let score = (nl * gini(&left, nl) + nr * gini(&right, nr)) / total;
            if best.map_or(true, |(s, _, _)| score < s) {
                best = Some((score, f, lo + (hi - lo) / 2.0));
            }
        }
    }

    match best {
        Some((score, feature, threshold)) if score < node_gini => {
            let (mut li, mut ri) = (Vec::new(), Vec::new());
            for &i in idx {
                if x[i][feature] <= threshold {
                    li.push(i);
                } else {
                    ri.push(i);
                }
            }
            if li.is_empty() || ri.is_empty() {
                return TreeNode::Leaf(majority(&counts));
            }
            TreeNode::Split {
                feature,
                threshold,
                left: Box::new(grow_tree(x, y, &li, k, mtry, dim, rng)),
                right: Box::new(grow_tree(x, y, &ri, k, mtry, dim, rng)),
            }
        }
        _ => TreeNode::Leaf(majority(&counts)),
    }
}

fn forest_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    k: usize,
    dim: usize,
    trees: usize,
    seed: u64,
) -> Vec<usize> {
    let n = train_x.len();
    let mtry = ((dim as f64).sqrt().floor() as usize).clamp(1, dim);
    let forest: Vec<TreeNode> = (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            grow_tree(train_x, train_y, &idx, k, mtry, dim, &mut rng)
        })
        .collect();
    test_x
        .par_iter()
        .map(|row| {
            let mut votes = vec![0u64; k];
            for tree in &forest {
                votes[tree.predict(row)] += 1;
            }
            majority(&votes)
        })
        .collect()
}

pub fn probe_csv(results: &[ProbeResult]) -> String {
    let mut out = String::from("classifier,features,train_size,oa,precision,recall,f1\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.classifier, r.feature_source, r.train_size, r.oa, r.precision, r.recall, r.f1
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Few-shot curves
// ---------------------------------------------------------------------------

/// Stratified subsample of `size` indices: class quotas proportional to the
/// pool with a floor of one, remainders to the largest fractional parts.
/// Output indices are sorted, so the full pool reproduces itself exactly.
pub fn stratified_subsample(
    labels: &[usize],
    k: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, EvalError> {
    let n = labels.len();
    if size < k {
        return Err(EvalError::BadSize(format!(
            "size {size} is below the class count {k}"
        )));
    }
    if size > n {
        return Err(EvalError::BadSize(format!(
            "size {size} exceeds the pool of {n}"
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(EvalError::LabelOutOfRange { index: i, label: y, k });
        }
        pools[y].push(i);
    }
    if let Some(missing) = pools.iter().position(|p| p.is_empty()) {
        return Err(EvalError::EmptyClass(missing));
    }

    let mut quota = vec![0usize; k];
    let mut assigned = 0;
    for c in 0..k {
        let exact = size as f64 * pools[c].len() as f64 / n as f64;
        quota[c] = (exact.floor() as usize).clamp(1, pools[c].len());
        assigned += quota[c];
    }
    // Hand out (or claw back) the difference by largest (smallest) remainder.
    let remainder = |c: usize, q: &[usize]| -> f64 {
        size as f64 * pools[c].len() as f64 / n as f64 - q[c] as f64
    };
    while assigned < size {
        let c = (0..k)
            .filter(|&c| quota[c] < pools[c].len())
            .max_by(|&a, &b| remainder(a, &quota).partial_cmp(&remainder(b, &quota)).unwrap())
            .expect("size <= n leaves room somewhere");
        quota[c] += 1;
        assigned += 1;
    }
    while assigned > size {
        let c = (0..k)
            .filter(|&c| quota[c] > 1)
            .min_by(|&a, &b| remainder(a, &quota).partial_cmp(&remainder(b, &quota)).unwrap())
            .expect("size >= k leaves slack somewhere");
        quota[c] -= 1;
        assigned -= 1;
    }

    let mut picked = Vec::with_capacity(size);
    for c in 0..k {
        let mut pool = pools[c].clone();
        let q = quota[c];
        pool.partial_shuffle(rng, q);
        picked.extend_from_slice(&pool[..q]);
    }
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FewShotPoint {
    pub size: usize,
    pub mean_oa: f64,
    pub runs: Vec<f64>,
}

/// Mean probe accuracy over stratified subsamples of each training size.
pub fn few_shot_curve(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    k: usize,
    sizes: &[usize],
    repeats: usize,
    algorithm: ProbeAlgorithm,
    feature_source: &str,
    seed: u64,
) -> Result<Vec<FewShotPoint>, EvalError> {
    if repeats == 0 {
        return Err(EvalError::BadSize("repeats must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut runs = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (size as u64).wrapping_mul(0x517C_C1B7_2722_0A95)
                    ^ (rep as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
            );
            let picked = stratified_subsample(train_y, k, size, &mut rng)?;
            let sub_x: Vec<Vec<f64>> = picked.iter().map(|&i| train_x[i].clone()).collect();
            let sub_y: Vec<usize> = picked.iter().map(|&i| train_y[i]).collect();
            let result = fit_predict_probe(
                &sub_x,
                &sub_y,
                test_x,
                test_y,
                k,
                algorithm,
                feature_source,
                seed,
            )?;
            runs.push(result.oa);
        }
        points.push(FewShotPoint {
            size,
            mean_oa: runs.iter().sum::<f64>() / runs.len() as f64,
            runs,
        });
    }
    Ok(points)
}

pub fn few_shot_csv(curves: &[(String, Vec<FewShotPoint>)]) -> String {
    let mut out = String::from("features,size,mean_oa\n");
    for (source, points) in curves {
        for p in points {
            out.push_str(&format!("{source},{},{:.4}\n", p.size, p.mean_oa));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKnob {
    TemporalDim,
    Codebook,
    ResidualLayers,
    Supervision,
}

impl AblationKnob {
    pub fn name(self) -> &'static str {
        match self {
            AblationKnob::TemporalDim => "temporal_dim",
            AblationKnob::Codebook => "codebook",
            AblationKnob::ResidualLayers => "residual_layers",
            AblationKnob::Supervision => "supervision",
        }
    }
}

impl std::str::FromStr for AblationKnob {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "temporal_dim" => Ok(AblationKnob::TemporalDim),
            "codebook" => Ok(AblationKnob::Codebook),
            "residual_layers" => Ok(AblationKnob::ResidualLayers),
            "supervision" => Ok(AblationKnob::Supervision),
            other => Err(format!(
                "unknown knob {other:?}; expected temporal_dim, codebook, residual_layers, or supervision"
            )),
        }
    }
}

/// Applies one knob setting to a base configuration.
pub fn apply_knob(
    base: &ModelConfig,
    knob: AblationKnob,
    value: &str,
) -> Result<ModelConfig, EvalError> {
    let bad = |reason: String| EvalError::BadKnobValue {
        knob: knob.name().to_string(),
        value: value.to_string(),
        reason,
    };
    let mut cfg = base.clone();
    match knob {
        AblationKnob::TemporalDim => {
            let t: usize = value.parse().map_err(|_| bad("not an integer".into()))?;
            let schedule = ModelConfig::for_t_lat(t)
                .ok_or_else(|| bad("supported temporal dims: 4, 6, 8, 12, 24".into()))?;
            cfg.t_lat = schedule.t_lat;
            cfg.stride_schedule = schedule.stride_schedule;
        }
        AblationKnob::Codebook => {
            let size: u32 = value.parse().map_err(|_| bad("not an integer".into()))?;
            let spec = crate::fsq::FsqSpec::for_codebook_size(size)
                .ok_or_else(|| bad("not a 4th power of a level in 2..=16".into()))?;
            cfg.fsq_levels = spec.levels().to_vec();
        }
        AblationKnob::ResidualLayers => {
            let m: usize = value.parse().map_err(|_| bad("not an integer".into()))?;
            cfg.m_res = m;
        }
        AblationKnob::Supervision => {
            cfg.loss = match value {
                "on" | "with" => crate::model::LossWeights::default(),
                "off" | "without" => crate::model::LossWeights::unsupervised(),
                _ => return Err(bad("expected on/off".into())),
            };
        }
    }
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub knob: String,
    pub value: String,
    pub mae: f64,
    pub rmse: f64,
    pub cc: f64,
    pub probe_oa: f64,
}

/// Trains one model per knob value on the same data and seeds, then reports
/// reconstruction fidelity against the clean series plus a linear-probe OA
/// on frozen latent features.
pub fn ablation_run(
    base: &ModelConfig,
    knob: AblationKnob,
    values: &[String],
    train_set: &SyntheticDataset,
    val_set: &SyntheticDataset,
    train_cfg: &TrainConfig,
    model_seed: u64,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let cfg = apply_knob(base, knob, value)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
        let mut net = EsdNet::new(cfg, &mut rng)?;
        train(&mut net, train_set, None, train_cfg)?;
        let row = evaluate_trained(&net, train_set, val_set, knob.name(), value, model_seed)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Shared scoring path for ablation arms and externally trained models.
pub fn evaluate_trained(
    net: &EsdNet,
    train_set: &SyntheticDataset,
    val_set: &SyntheticDataset,
    knob: &str,
    value: &str,
    seed: u64,
) -> Result<AblationRow, EvalError> {
    let preds: Vec<Vec<f64>> = val_set
        .samples
        .par_iter()
        .map(|s| net.decode(&net.encode(s)?))
        .collect::<Result<_, ModelError>>()?;
    let recon = recon_metrics(&val_set.clean, &preds)?;

    let k = train_set.class_names.len();
    let train_feats = extract_features(net, &train_set.samples, FeatureMode::Codes)?;
    let val_feats = extract_features(net, &val_set.samples, FeatureMode::Codes)?;
    let train_y: Vec<usize> = train_set.samples.iter().map(|s| s.labels.annual_class).collect();
    let val_y: Vec<usize> = val_set.samples.iter().map(|s| s.labels.annual_class).collect();
    let probe = fit_predict_probe(
        &train_feats,
        &train_y,
        &val_feats,
        &val_y,
        k,
        ProbeAlgorithm::Linear,
        FeatureMode::Codes.name(),
        seed,
    )?;
    Ok(AblationRow {
        knob: knob.to_string(),
        value: value.to_string(),
        mae: recon.mean_mae,
        rmse: recon.mean_rmse,
        cc: recon.mean_cc,
        probe_oa: probe.oa,
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("knob,value,mae,rmse,cc,probe_oa\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.4}\n",
            r.knob, r.value, r.mae, r.rmse, r.cc, r.probe_oa
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Denoising
// ---------------------------------------------------------------------------

/// Mean absolute error against clean on corrupted days, for the model output
/// versus the corrupted input. Below one means spikes were attenuated.
pub fn denoising_score(
    clean: &[Vec<f64>],
    corrupted: &[Vec<f64>],
    reconstructed: &[Vec<f64>],
    corrupted_days: &[Vec<u16>],
) -> Result<f64, EvalError> {
    if clean.len() != corrupted.len()
        || clean.len() != reconstructed.len()
        || clean.len() != corrupted_days.len()
    {
        return Err(EvalError::ShapeMismatch(format!(
            "{} clean, {} corrupted, {} reconstructed, {} day lists",
            clean.len(),
            corrupted.len(),
            reconstructed.len(),
            corrupted_days.len()
        )));
    }
    let mut recon_err = 0.0;
    let mut spike_err = 0.0;
    let mut points = 0usize;
    for (i, days) in corrupted_days.iter().enumerate() {
        for &day in days {
            let day = day as usize;
            if day >= DAYS {
                return Err(EvalError::ShapeMismatch(format!("day {day} out of range")));
            }
            for b in 0..BANDS {
                let at = day * BANDS + b;
                recon_err += (reconstructed[i][at] - clean[i][at]).abs();
                spike_err += (corrupted[i][at] - clean[i][at]).abs();
                points += 1;
            }
        }
    }
    if points == 0 {
        return Err(EvalError::NoCorruptedDays);
    }
    if spike_err == 0.0 {
        return Err(EvalError::BadSize(
            "corruption left the series unchanged on the recorded days".into(),
        ));
    }
    Ok(recon_err / spike_err)
}
