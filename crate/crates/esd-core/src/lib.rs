//! Core algorithms for the ESD embedding pipeline.
//!
//! The pipeline encodes one year of daily surface reflectance per pixel
//! (365 days x 6 bands) into a short sequence of discrete latent codes via a
//! 1-D convolutional encoder and finite scalar quantization, reconstructs the
//! series with a mirrored decoder, and trains auxiliary heads on land-cover
//! and index-regression tasks. This crate holds everything except the CLI:
//! the autodiff tape, the quantizer, the network, training, synthetic data,
//! the tile codec, and the evaluation kit.

pub mod eval;
pub mod fsq;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod tile;
pub mod train;

pub use fsq::{FsqError, FsqSpec, QuantizeMode, QuantizedVector};
pub use model::{EsdNet, Labels, LatentCodeSequence, ModelConfig, ModelError, TimeSeriesSample};
pub use tensor::{Tape, Tensor, TensorError, VarId};
pub use tile::{pack_tile, unpack_tile, EmbeddingTile, TileError, VolumeReport};

#[cfg(test)]
pub(crate) mod testutil {
    /// Central finite differences of a scalar function, h = 1e-6, 64-bit.
    pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    /// Worst-case relative disagreement; near-zero pairs compare absolutely.
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| {
                let denom = a.abs().max(n.abs());
                if denom < 1e-10 {
                    (a - n).abs()
                } else {
                    (a - n).abs() / denom
                }
            })
            .fold(0.0, f64::max)
    }
}
