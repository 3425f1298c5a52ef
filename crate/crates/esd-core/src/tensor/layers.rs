//! Convolution layers that own their parameters. A layer is pushed onto a
//! [`Tape`](super::Tape) per training pass; for inference the `forward`
//! methods run the kernels directly without recording anything.

use rand::Rng;

use super::kernels;
use super::{Tensor, TensorError};

/// Geometry shared by forward and transpose convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn out_len(&self, t_in: usize) -> Option<usize> {
        kernels::conv1d_out_len(t_in, self.kernel, self.stride, self.padding)
    }

    pub fn transpose_out_len(&self, t_in: usize, output_padding: usize) -> Option<usize> {
        kernels::conv_transpose1d_out_len(
            t_in,
            self.kernel,
            self.stride,
            self.padding,
            output_padding,
        )
    }
}

fn uniform_init<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let lim = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-lim..lim)).collect()
}

/// Strided 1-D convolution. Weights are `[c_out, c_in, kernel]`, bias `[c_out]`.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub spec: ConvSpec,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Conv1dLayer {
    pub fn new<R: Rng>(spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.c_in * spec.kernel;
        let w = uniform_init(rng, spec.c_out * spec.c_in * spec.kernel, fan_in);
        let b = uniform_init(rng, spec.c_out, fan_in);
        Self {
            spec,
            weights: Tensor::new(vec![spec.c_out, spec.c_in, spec.kernel], w).unwrap(),
            bias: Tensor::new(vec![spec.c_out], b).unwrap(),
        }
    }

    /// Inference forward, channel-major input `[c_in, t_in]`.
    pub fn forward(&self, x: &[f64], t_in: usize) -> Result<(Vec<f64>, usize), TensorError> {
        let s = self.spec;
        if x.len() != s.c_in * t_in {
            return Err(TensorError::LengthMismatch {
                shape: vec![s.c_in, t_in],
                len: x.len(),
            });
        }
        let t_out = s.out_len(t_in).ok_or(TensorError::Invalid {
            what: "conv1d geometry",
            details: format!("t_in={t_in} spec={s:?}"),
        })?;
        let mut out = vec![0.0; s.c_out * t_out];
        kernels::conv1d_forward(
            x,
            s.c_in,
            t_in,
            self.weights.data(),
            self.bias.data(),
            s.c_out,
            s.kernel,
            s.stride,
            s.padding,
            &mut out,
        );
        Ok((out, t_out))
    }
}

/// Transposed 1-D convolution; output length
/// `(t_in - 1) * stride - 2 * padding + kernel + output_padding`.
/// `output_padding` is chosen at model build time so a decoder stage exactly
/// restores the length its encoder mirror consumed.
#[derive(Debug, Clone)]
pub struct ConvTranspose1dLayer {
    pub spec: ConvSpec,
    pub output_padding: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose1dLayer {
    pub fn new<R: Rng>(spec: ConvSpec, output_padding: usize, rng: &mut R) -> Self {
        let fan_in = spec.c_in * spec.kernel;
        let w = uniform_init(rng, spec.c_out * spec.c_in * spec.kernel, fan_in);
        let b = uniform_init(rng, spec.c_out, fan_in);
        Self {
            spec,
            output_padding,
            weights: Tensor::new(vec![spec.c_out, spec.c_in, spec.kernel], w).unwrap(),
            bias: Tensor::new(vec![spec.c_out], b).unwrap(),
        }
    }

    /// The output padding that makes this layer produce `t_target` from `t_in`.
    pub fn required_output_padding(
        spec: ConvSpec,
        t_in: usize,
        t_target: usize,
    ) -> Option<usize> {
        let base = (t_in - 1) * spec.stride + spec.kernel;
        let need = t_target + 2 * spec.padding;
        if need < base || need - base >= spec.stride.max(1) {
            return None;
        }
        Some(need - base)
    }

    pub fn forward(&self, x: &[f64], t_in: usize) -> Result<(Vec<f64>, usize), TensorError> {
        let s = self.spec;
        if x.len() != s.c_in * t_in {
            return Err(TensorError::LengthMismatch {
                shape: vec![s.c_in, t_in],
                len: x.len(),
            });
        }
        let t_out = s
            .transpose_out_len(t_in, self.output_padding)
            .ok_or(TensorError::Invalid {
                what: "conv_transpose1d geometry",
                details: format!("t_in={t_in} spec={s:?}"),
            })?;
        let mut out = vec![0.0; s.c_out * t_out];
        kernels::conv_transpose1d_forward(
            x,
            s.c_in,
            t_in,
            self.weights.data(),
            self.bias.data(),
            s.c_out,
            s.kernel,
            s.stride,
            s.padding,
            self.output_padding,
            &mut out,
        );
        Ok((out, t_out))
    }
}

/// Two stride-1 convolutions with a shortcut: `y = x + conv2(relu(conv1(x)))`.
/// Channel counts match the input so the addition is always well-formed.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv1dLayer,
    pub conv2: Conv1dLayer,
}

impl ResidualBlock {
    pub fn new<R: Rng>(channels: usize, kernel: usize, rng: &mut R) -> Self {
        let spec = ConvSpec {
            c_in: channels,
            c_out: channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        };
        Self {
            conv1: Conv1dLayer::new(spec, rng),
            conv2: Conv1dLayer::new(spec, rng),
        }
    }

    pub fn forward(&self, x: &[f64], t_in: usize) -> Result<Vec<f64>, TensorError> {
        let (h, t1) = self.conv1.forward(x, t_in)?;
        let h: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
        let (inner, t2) = self.conv2.forward(&h, t1)?;
        if t2 != t_in {
            return Err(TensorError::ShapeMismatch {
                context: "residual shortcut",
                expected: vec![self.conv2.spec.c_out, t_in],
                found: vec![self.conv2.spec.c_out, t2],
            });
        }
        Ok(x.iter().zip(&inner).map(|(&a, &b)| a + b).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        // Length formula vs direct enumeration of valid window positions.
        #[test]
        fn conv_length_formula_matches_enumeration(
            t in 1usize..=64,
            k in 1usize..=7,
            stride in 1usize..=4,
            padding in 0usize..=3,
        ) {
            prop_assume!(t + 2 * padding >= k);
            let formula = kernels::conv1d_out_len(t, k, stride, padding).unwrap();
            let mut count = 0;
            let mut pos = 0;
            while pos + k <= t + 2 * padding {
                count += 1;
                pos += stride;
            }
            prop_assert_eq!(formula, count);
        }

        // A transpose configured with the matching output padding restores
        // the length its mirror conv consumed. The required padding always
        // exists and stays below the stride.
        #[test]
        fn transpose_restores_mirror_length(
            t in 1usize..=64,
            k in 1usize..=7,
            stride in 1usize..=4,
            padding in 0usize..=3,
        ) {
            prop_assume!(t + 2 * padding >= k);
            let spec = ConvSpec { c_in: 1, c_out: 1, kernel: k, stride, padding };
            let t_down = spec.out_len(t).unwrap();
            let op = ConvTranspose1dLayer::required_output_padding(spec, t_down, t).unwrap();
            prop_assert!(op < stride);
            let restored = spec.transpose_out_len(t_down, op).unwrap();
            prop_assert_eq!(restored, t);
        }
    }

    #[test]
    fn stride_two_example_lengths() {
        let spec = ConvSpec {
            c_in: 1,
            c_out: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!(spec.out_len(8), Some(4));
        // plain transpose of length 4 lands at 7; output padding 1 restores 8
        assert_eq!(spec.transpose_out_len(4, 0), Some(7));
        assert_eq!(
            ConvTranspose1dLayer::required_output_padding(spec, 4, 8),
            Some(1)
        );
        assert_eq!(spec.transpose_out_len(4, 1), Some(8));
    }

    #[test]
    fn zeroed_residual_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = ResidualBlock::new(3, 3, &mut rng);
        block.conv2.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        block.conv2.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x: Vec<f64> = (0..3 * 9).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let y = block.forward(&x, 9).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = ResidualBlock::new(5, 3, &mut rng);
        let x = vec![0.25; 5 * 17];
        let y = block.forward(&x, 17).unwrap();
        assert_eq!(y.len(), x.len());
    }

    #[test]
    fn layer_init_is_seed_deterministic() {
        let spec = ConvSpec {
            c_in: 4,
            c_out: 6,
            kernel: 5,
            stride: 2,
            padding: 2,
        };
        let a = Conv1dLayer::new(spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Conv1dLayer::new(spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.weights.data(), b.weights.data());
        assert_eq!(a.bias.data(), b.bias.data());
    }
}
