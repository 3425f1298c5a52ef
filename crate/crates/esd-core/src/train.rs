//! Multi-task loss assembly, biophysical index targets, Adam, and the
//! training loop.
//!
//! The objective is `alpha * recon + beta * sum(a_i * class_i) +
//! gamma * sum(b_i * regr_i)`: mean-squared reconstruction of the (noisy)
//! input, cross-entropy over the annual heads, sigmoid cross-entropy per
//! latent step for monthly water, and squared error against monthly spectral
//! index targets computed from the clean signal. Setting `beta = gamma = 0`
//! trains reconstruction only and provably leaves every head parameter
//! untouched.

use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsq::QuantizeMode;
use crate::model::{
    bands_channel_major, EsdNet, GraphBinding, ModelError, TimeSeriesSample, BANDS, BAND_GREEN,
    BAND_NIR, BAND_RED, BAND_SWIR1, DAYS,
};
use crate::synth::SyntheticDataset;
use crate::tensor::{Tape, TensorError, VarId};

pub const MONTH_DAYS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sample {index}: {what}")]
    BadLabel { index: usize, what: String },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Samples per worker tape. Chunks are fixed-size and reduced in order,
    /// so results do not depend on how many threads actually run.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            chunk_size: 16,
        }
    }
}

/// One step's loss, decomposed. `classification` holds the task-weighted
/// cross-entropies in order: annual, static, impervious, crop, water.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub classification: [f64; 5],
    pub regression: f64,
}

impl LossBreakdown {
    pub fn classification_sum(&self) -> f64 {
        self.classification.iter().sum()
    }

    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.reconstruction += other.reconstruction;
        for (a, b) in self.classification.iter_mut().zip(&other.classification) {
            *a += b;
        }
        self.regression += other.regression;
    }

    fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * f,
            reconstruction: self.reconstruction * f,
            classification: self.classification.map(|c| c * f),
            regression: self.regression * f,
        }
    }
}

/// Monthly means of NDVI, NDWI, NDSI over the 365-day calendar year.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexTargets {
    pub ndvi: [f64; 12],
    pub ndwi: [f64; 12],
    pub ndsi: [f64; 12],
}

/// Daily NDVI/NDWI/NDSI for one day-major `[365*6]` series. Denominators are
/// guarded with `|den| + 1e-6`, which keeps every value in [-1, 1] and makes
/// all-zero inputs map to 0.
fn daily_indices(refl: &[f64], day: usize) -> [f64; 3] {
    let band = |b: usize| refl[day * BANDS + b];
    let nd = |a: f64, b: f64| (a - b) / ((a + b).abs() + 1e-6);
    [
        nd(band(BAND_NIR), band(BAND_RED)),
        nd(band(BAND_GREEN), band(BAND_NIR)),
        nd(band(BAND_GREEN), band(BAND_SWIR1)),
    ]
}

/// Day ranges covered by each latent step. Twelve steps use calendar months;
/// any other count splits the padded grid uniformly, and steps that fall
/// entirely in the replicate-padded tail collapse to the final day.
fn latent_bins(t_lat: usize, padded: usize) -> Vec<(usize, usize)> {
    if t_lat == 12 {
        let mut bins = Vec::with_capacity(12);
        let mut start = 0;
        for len in MONTH_DAYS {
            bins.push((start, start + len));
            start += len;
        }
        return bins;
    }
    let step = padded / t_lat;
    (0..t_lat)
        .map(|k| {
            let start = (k * step).min(DAYS - 1);
            let end = ((k + 1) * step).clamp(start + 1, DAYS);
            (start, end)
        })
        .collect()
}

/// Calendar-month means of the three spectral indices, from day-major
/// reflectance. Use the clean series where available.
pub fn compute_index_targets(refl: &[f64]) -> IndexTargets {
    let binned = binned_index_targets(refl, 12, 384);
    let row = |i: usize| -> [f64; 12] {
        let mut out = [0.0; 12];
        out.copy_from_slice(&binned[i * 12..(i + 1) * 12]);
        out
    };
    IndexTargets {
        ndvi: row(0),
        ndwi: row(1),
        ndsi: row(2),
    }
}

/// `[3 * t_lat]` channel-major per-step index targets (NDVI, NDWI, NDSI rows).
pub fn binned_index_targets(refl: &[f64], t_lat: usize, padded: usize) -> Vec<f64> {
    let bins = latent_bins(t_lat, padded);
    let mut out = vec![0.0; 3 * t_lat];
    for (k, &(start, end)) in bins.iter().enumerate() {
        let mut sums = [0.0; 3];
        for day in start..end {
            let v = daily_indices(refl, day);
            for i in 0..3 {
                sums[i] += v[i];
            }
        }
        for i in 0..3 {
            out[i * t_lat + k] = sums[i] / (end - start) as f64;
        }
    }
    out
}

/// `[t_lat]` water targets from calendar-month flags: the fraction of each
/// latent step's days that are flagged (exactly 0/1 when steps are months).
pub fn binned_water_targets(monthly: &[bool; 12], t_lat: usize, padded: usize) -> Vec<f64> {
    let mut daily = [0.0; DAYS];
    let mut day = 0;
    for (m, len) in MONTH_DAYS.iter().enumerate() {
        for _ in 0..*len {
            daily[day] = if monthly[m] { 1.0 } else { 0.0 };
            day += 1;
        }
    }
    latent_bins(t_lat, padded)
        .iter()
        .map(|&(start, end)| daily[start..end].iter().sum::<f64>() / (end - start) as f64)
        .collect()
}

/// Per-sample training targets, precomputed once before the epoch loop.
#[derive(Clone, Debug)]
pub struct SampleTargets {
    /// Channel-major `[6, 365]` noisy reflectance (the reconstruction target).
    pub recon: Vec<f64>,
    /// `[t_lat]` water fractions.
    pub water: Vec<f64>,
    /// `[3 * t_lat]` index targets from the clean series.
    pub index: Vec<f64>,
}

impl SampleTargets {
    pub fn prepare(
        sample: &TimeSeriesSample,
        clean: &[f64],
        t_lat: usize,
        padded: usize,
    ) -> Self {
        Self {
            recon: bands_channel_major(sample),
            water: binned_water_targets(&sample.labels.water_monthly, t_lat, padded),
            index: binned_index_targets(clean, t_lat, padded),
        }
    }
}

fn check_labels(net: &EsdNet, sample: &TimeSeriesSample, index: usize) -> Result<(), TrainError> {
    let cfg = net.config();
    if sample.labels.annual_class >= cfg.annual_classes {
        return Err(TrainError::BadLabel {
            index,
            what: format!(
                "annual class {} out of range {}",
                sample.labels.annual_class, cfg.annual_classes
            ),
        });
    }
    if sample.labels.static_class >= cfg.static_classes {
        return Err(TrainError::BadLabel {
            index,
            what: format!(
                "static class {} out of range {}",
                sample.labels.static_class, cfg.static_classes
            ),
        });
    }
    Ok(())
}

/// Builds the weighted loss graph for one sample and reports the decomposed
/// values. The graph total is the optimized quantity; the breakdown fields
/// recombine to it within float roundoff.
pub fn build_sample_loss(
    tape: &mut Tape,
    net: &EsdNet,
    binding: &GraphBinding,
    sample: &TimeSeriesSample,
    targets: &SampleTargets,
    mode: QuantizeMode,
) -> Result<(VarId, LossBreakdown), TrainError> {
    let w = &net.config().loss;
    let supervised = w.supervised();
    let g = net.forward_graph(tape, binding, sample, mode, supervised)?;
    let recon = tape.mse_vs(g.reconstruction, &targets.recon)?;
    let mut total = tape.scale(recon, w.alpha);
    let mut breakdown = LossBreakdown {
        reconstruction: tape.value(recon)[0],
        ..LossBreakdown::default()
    };
    if supervised {
        let h = g.heads.as_ref().expect("heads requested");
        let labels = &sample.labels;
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let ce = [
            tape.cross_entropy_logits(h.annual, labels.annual_class)?,
            tape.cross_entropy_logits(h.static_class, labels.static_class)?,
            tape.bce_with_logits(h.impervious, &[flag(labels.impervious)])?,
            tape.bce_with_logits(h.crop, &[flag(labels.crop)])?,
            tape.bce_with_logits(h.water, &targets.water)?,
        ];
        let mut class_sum = None;
        for (i, &node) in ce.iter().enumerate() {
            let weighted = tape.scale(node, w.class_weights[i]);
            breakdown.classification[i] = tape.value(weighted)[0];
            class_sum = Some(match class_sum {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        let class_term = tape.scale(class_sum.expect("five tasks"), w.beta);
        total = tape.add(total, class_term)?;

        let t_lat = net.config().t_lat;
        let mut regr_sum = None;
        for i in 0..3 {
            let row = tape.slice_channels(h.index, i, 1)?;
            let mse = tape.mse_vs(row, &targets.index[i * t_lat..(i + 1) * t_lat])?;
            let weighted = tape.scale(mse, w.index_weights[i]);
            breakdown.regression += tape.value(weighted)[0];
            regr_sum = Some(match regr_sum {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        let regr_term = tape.scale(regr_sum.expect("three indices"), w.gamma);
        total = tape.add(total, regr_term)?;
    }
    breakdown.total = tape.value(total)[0];
    Ok((total, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub classification: f64,
    pub regression: f64,
    pub val_mae: Option<f64>,
}

/// Appends the per-epoch log as CSV: `epoch,total,recon,class,regr,val_mae`.
pub fn write_csv_log<W: Write>(w: &mut W, stats: &[EpochStats]) -> io::Result<()> {
    writeln!(w, "epoch,total,recon,class,regr,val_mae")?;
    for s in stats {
        let val = s.val_mae.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.epoch, s.total, s.reconstruction, s.classification, s.regression, val
        )?;
    }
    Ok(())
}

pub fn write_csv_log_file(path: &Path, stats: &[EpochStats]) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_csv_log(&mut f, stats)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, net: &mut EsdNet, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (pi, (_, tensor)) in net.params_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            let g = &grads[pi];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Mean absolute reconstruction error of the model against the dataset's
/// clean signals, decoding through hard quantization.
pub fn validation_mae(net: &EsdNet, data: &SyntheticDataset) -> Result<f64, ModelError> {
    let per_sample: Vec<f64> = data
        .samples
        .par_iter()
        .zip(&data.clean)
        .map(|(sample, clean)| {
            let recon = net.decode(&net.encode(sample)?)?;
            let n = recon.len() as f64;
            Ok(recon
                .iter()
                .zip(clean)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n)
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64)
}

/// Trains in place. Deterministic for a fixed seed: epoch shuffles come from
/// one ChaCha stream, batches split into fixed chunks whose gradients are
/// reduced in chunk order, and the Adam step is serialized.
pub fn train(
    net: &mut EsdNet,
    data: &SyntheticDataset,
    val: Option<&SyntheticDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, TrainError> {
    if data.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let t_lat = net.config().t_lat;
    let padded = net.config().padded_len();
    for (i, sample) in data.samples.iter().enumerate() {
        check_labels(net, sample, i)?;
    }
    let targets: Vec<SampleTargets> = data
        .samples
        .par_iter()
        .zip(&data.clean)
        .map(|(s, clean)| SampleTargets::prepare(s, clean, t_lat, padded))
        .collect();

    let sizes: Vec<usize> = net.params().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let chunk = cfg.chunk_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown::default();
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<(Vec<Vec<f64>>, LossBreakdown), TrainError>> = batch
                .par_chunks(chunk)
                .map(|ids| {
                    let mut tape = Tape::new();
                    let binding = net.bind_graph(&mut tape);
                    let mut sum = None;
                    let mut stats = LossBreakdown::default();
                    for &i in ids {
                        let (loss, breakdown) = build_sample_loss(
                            &mut tape,
                            net,
                            &binding,
                            &data.samples[i],
                            &targets[i],
                            QuantizeMode::Hard,
                        )?;
                        stats.add(&breakdown);
                        sum = Some(match sum {
                            None => loss,
                            Some(acc) => tape.add(acc, loss)?,
                        });
                    }
                    let root = tape.scale(sum.expect("nonempty chunk"), scale);
                    tape.backward(root)?;
                    let grads = binding
                        .ids()
                        .iter()
                        .map(|&id| tape.grad(id).to_vec())
                        .collect();
                    Ok((grads, stats))
                })
                .collect();

            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_stats = LossBreakdown::default();
            for r in results {
                let (g, stats) = r?;
                for (acc, part) in grads.iter_mut().zip(&g) {
                    for (a, p) in acc.iter_mut().zip(part) {
                        *a += p;
                    }
                }
                batch_stats.add(&stats);
            }
            if !batch_stats.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.update(net, &grads, cfg);
            epoch_sum.add(&batch_stats);
        }
        let mean = epoch_sum.scaled(1.0 / data.samples.len() as f64);
        let val_mae = match val {
            Some(v) => Some(validation_mae(net, v)?),
            None => None,
        };
        log.push(EpochStats {
            epoch,
            total: mean.total,
            reconstruction: mean.reconstruction,
            classification: mean.classification_sum(),
            regression: mean.regression,
            val_mae,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::GeneratorConfig;
    use rand::Rng;

    fn toy_dataset(n: usize, seed: u64) -> SyntheticDataset {
        // Small but real: the class-conditional generator at reduced size.
        let cfg = GeneratorConfig::default();
        SyntheticDataset::generate(&cfg, n, seed).unwrap()
    }

    fn tiny_net(seed: u64) -> EsdNet {
        let cfg = ModelConfig {
            hidden_channels: 6,
            m_res: 1,
            fsq_levels: vec![4, 4],
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EsdNet::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn index_targets_match_brute_force_daily_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refl: Vec<f64> = (0..DAYS * BANDS).map(|_| rng.gen_range(0.0..1.0)).collect();
        let targets = compute_index_targets(&refl);
        // Brute force: every day's index, then a plain mean per month.
        let mut day = 0;
        for (m, len) in MONTH_DAYS.iter().enumerate() {
            let mut sums = [0.0; 3];
            for _ in 0..*len {
                let nir = refl[day * BANDS + BAND_NIR];
                let red = refl[day * BANDS + BAND_RED];
                let green = refl[day * BANDS + BAND_GREEN];
                let swir1 = refl[day * BANDS + BAND_SWIR1];
                sums[0] += (nir - red) / ((nir + red).abs() + 1e-6);
                sums[1] += (green - nir) / ((green + nir).abs() + 1e-6);
                sums[2] += (green - swir1) / ((green + swir1).abs() + 1e-6);
                day += 1;
            }
            let n = *len as f64;
            assert!((targets.ndvi[m] - sums[0] / n).abs() < 1e-12);
            assert!((targets.ndwi[m] - sums[1] / n).abs() < 1e-12);
            assert!((targets.ndsi[m] - sums[2] / n).abs() < 1e-12);
            assert!(targets.ndvi[m].abs() <= 1.0);
            assert!(targets.ndwi[m].abs() <= 1.0);
            assert!(targets.ndsi[m].abs() <= 1.0);
        }
    }

    #[test]
    fn index_target_examples() {
        // NIR == Red everywhere: NDVI exactly zero.
        let mut refl = vec![0.25; DAYS * BANDS];
        let t = compute_index_targets(&refl);
        assert!(t.ndvi.iter().all(|&v| v == 0.0));
        // NIR=0.5, Red=0.1: NDVI = 0.4 / (0.6 + 1e-6) every month.
        for day in 0..DAYS {
            refl[day * BANDS + BAND_NIR] = 0.5;
            refl[day * BANDS + BAND_RED] = 0.1;
        }
        let t = compute_index_targets(&refl);
        let expect = 0.4 / (0.6 + 1e-6);
        assert!(t.ndvi.iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn nonstandard_latent_counts_bin_sensibly() {
        let refl = vec![0.3; DAYS * BANDS];
        for t_lat in [4, 6, 8, 24] {
            let idx = binned_index_targets(&refl, t_lat, 384);
            assert_eq!(idx.len(), 3 * t_lat);
            assert!(idx.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
            let water = binned_water_targets(&[true; 12], t_lat, 384);
            assert!(water.iter().all(|&v| v == 1.0));
        }
        // Monthly flags land exactly on month bins at t_lat = 12.
        let mut monthly = [false; 12];
        monthly[3] = true;
        let water = binned_water_targets(&monthly, 12, 384);
        assert_eq!(water[3], 1.0);
        assert_eq!(water.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn loss_breakdown_recombines_to_total() {
        let net = tiny_net(3);
        let data = toy_dataset(2, 40);
        let w = &net.config().loss;
        for (sample, clean) in data.samples.iter().zip(&data.clean) {
            let targets =
                SampleTargets::prepare(sample, clean, net.config().t_lat, net.config().padded_len());
            let mut tape = Tape::new();
            let binding = net.bind_graph(&mut tape);
            let (_, b) =
                build_sample_loss(&mut tape, &net, &binding, sample, &targets, QuantizeMode::Hard)
                    .unwrap();
            let recombined = w.alpha * b.reconstruction
                + w.beta * b.classification_sum()
                + w.gamma * b.regression;
            assert!(
                (b.total - recombined).abs() < 1e-12,
                "total {} vs recombined {recombined}",
                b.total
            );
            assert!(b.reconstruction >= 0.0 && b.regression >= 0.0);
            assert!(b.classification.iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn classification_loss_examples() {
        // Uniform logits over K classes cost ln K; a hugely confident correct
        // logit costs ~0.
        let mut tape = Tape::new();
        let uniform = tape.leaf(vec![9, 1], vec![0.7; 9]).unwrap();
        let ce = tape.cross_entropy_logits(uniform, 4).unwrap();
        assert!((tape.value(ce)[0] - (9.0f64).ln()).abs() < 1e-12);
        let mut logits = vec![0.0; 9];
        logits[2] = 50.0;
        let confident = tape.leaf(vec![9, 1], logits).unwrap();
        let ce = tape.cross_entropy_logits(confident, 2).unwrap();
        assert!(tape.value(ce)[0] < 1e-12);
    }

    #[test]
    fn reconstruction_loss_examples() {
        // Identical input: zero. Constant 0.1 offset: 0.01.
        let x = vec![0.4; BANDS * DAYS];
        let mut tape = Tape::new();
        let xhat = tape.leaf(vec![BANDS, DAYS], x.clone()).unwrap();
        let zero = tape.mse_vs(xhat, &x).unwrap();
        assert_eq!(tape.value(zero)[0], 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        let off = tape.leaf(vec![BANDS, DAYS], shifted).unwrap();
        let mse = tape.mse_vs(off, &x).unwrap();
        assert!((tape.value(mse)[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let data = toy_dataset(18, 7);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            chunk_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut a = tiny_net(5);
        let log_a = train(&mut a, &data, None, &cfg).unwrap();
        let mut b = tiny_net(5);
        let log_b = train(&mut b, &data, None, &cfg).unwrap();
        assert_eq!(log_a, log_b);
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn unsupervised_training_freezes_heads_exactly() {
        let mut net = {
            let cfg = ModelConfig {
                hidden_channels: 6,
                m_res: 1,
                fsq_levels: vec![4, 4],
                loss: crate::model::LossWeights::unsupervised(),
                ..ModelConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            EsdNet::new(cfg, &mut rng).unwrap()
        };
        let before: Vec<(String, Vec<f64>)> = net
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect();
        let data = toy_dataset(9, 11);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 9,
            chunk_size: 4,
            ..TrainConfig::default()
        };
        train(&mut net, &data, None, &cfg).unwrap();
        for (name, old) in &before {
            let now = net
                .params()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .data()
                .to_vec();
            assert_eq!(&now, old, "{name} changed during unsupervised training");
        }
    }

    #[test]
    fn diverged_loss_aborts_with_batch_index() {
        let mut net = tiny_net(1);
        let data = toy_dataset(9, 13);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            chunk_size: 4,
            learning_rate: 1e155,
            ..TrainConfig::default()
        };
        match train(&mut net, &data, None, &cfg) {
            Err(TrainError::NonFiniteLoss { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn batch_loss_is_permutation_invariant() {
        let net = tiny_net(2);
        let data = toy_dataset(6, 21);
        let eval_mean = |order: &[usize]| -> f64 {
            let mut tape = Tape::new();
            let binding = net.bind_graph(&mut tape);
            let mut sum = 0.0;
            for &i in order {
                let targets = SampleTargets::prepare(
                    &data.samples[i],
                    &data.clean[i],
                    net.config().t_lat,
                    net.config().padded_len(),
                );
                let (_, b) = build_sample_loss(
                    &mut tape,
                    &net,
                    &binding,
                    &data.samples[i],
                    &targets,
                    QuantizeMode::Hard,
                )
                .unwrap();
                sum += b.reconstruction;
            }
            sum / order.len() as f64
        };
        let forward = eval_mean(&[0, 1, 2, 3, 4, 5]);
        let backward = eval_mean(&[5, 3, 1, 4, 2, 0]);
        assert!((forward - backward).abs() < 1e-12);
    }

    #[test]
    fn csv_log_has_expected_shape() {
        let stats = vec![
            EpochStats {
                epoch: 0,
                total: 1.5,
                reconstruction: 1.0,
                classification: 0.8,
                regression: 0.2,
                val_mae: Some(0.05),
            },
            EpochStats {
                epoch: 1,
                total: 1.2,
                reconstruction: 0.9,
                classification: 0.5,
                regression: 0.1,
                val_mae: None,
            },
        ];
        let mut buf = Vec::new();
        write_csv_log(&mut buf, &stats).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,total,recon,class,regr,val_mae");
        assert_eq!(lines[1], "0,1.5,1,0.8,0.2,0.05");
        assert_eq!(lines[2], "1,1.2,0.9,0.5,0.1,");
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut net = tiny_net(1);
        let mut data = toy_dataset(3, 5);
        data.samples[1].labels.annual_class = 99;
        let err = train(&mut net, &data, None, &TrainConfig::default()).unwrap_err();
        match err {
            TrainError::BadLabel { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

}
