//! Reverse-mode autodiff on an append-only tape.
//!
//! Every op validates shapes, computes its value eagerly, and records enough
//! to replay the chain rule. [`Tape::backward`] runs one reverse sweep into
//! fresh scratch adjoints and then adds them into each node's persistent
//! gradient, so repeated calls without a reset accumulate (two passes double
//! every gradient).
//!
//! Time-series values are channel-major: shape `[C, T]`, `data[c * T + t]`.
//! Scalars have shape `[]`. A tape is single-threaded; data parallelism is
//! independent tapes whose harvested gradients the caller sums.

use super::kernels;
use super::TensorError;

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d {
        x: VarId,
        w: VarId,
        b: VarId,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        x: VarId,
        w: VarId,
        b: VarId,
        geom: ConvGeom,
    },
    Relu {
        x: VarId,
    },
    Tanh {
        x: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        factor: f64,
    },
    RoundSte {
        x: VarId,
    },
    AddChannelConst {
        x: VarId,
    },
    MulChannelConst {
        x: VarId,
        consts: Vec<f64>,
    },
    MeanOverTime {
        x: VarId,
    },
    SliceTime {
        x: VarId,
        start: usize,
    },
    SliceChannels {
        x: VarId,
        start: usize,
    },
    PadReplicateTime {
        x: VarId,
    },
    MseVs {
        x: VarId,
        target: Vec<f64>,
    },
    CrossEntropyLogits {
        x: VarId,
        label: usize,
    },
    BceWithLogits {
        x: VarId,
        targets: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Append-only compute graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Accumulated gradient of `id` across all backward calls so far.
    pub fn grad(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> VarId {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn leaf_tensor(&mut self, t: &super::Tensor) -> VarId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    fn series(&self, id: VarId, context: &'static str) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                context,
                expected: vec![0, 0],
                found: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId, TensorError> {
        let (c_in, t_in) = self.series(x, "conv1d input")?;
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(TensorError::ShapeMismatch {
                context: "conv1d weights",
                expected: vec![0, c_in, 0],
                found: ws,
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.nodes[b.0].data.len() != c_out {
            return Err(TensorError::ShapeMismatch {
                context: "conv1d bias",
                expected: vec![c_out],
                found: self.nodes[b.0].shape.clone(),
            });
        }
        let t_out = kernels::conv1d_out_len(t_in, k, stride, padding).ok_or({
            TensorError::Invalid {
                what: "conv1d geometry",
                details: format!("t_in={t_in} k={k} stride={stride} padding={padding}"),
            }
        })?;
        let mut out = vec![0.0; c_out * t_out];
        kernels::conv1d_forward(
            &self.nodes[x.0].data,
            c_in,
            t_in,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            c_out,
            k,
            stride,
            padding,
            &mut out,
        );
        let geom = ConvGeom {
            c_in,
            t_in,
            c_out,
            k,
            stride,
            padding,
        };
        Ok(self.push(vec![c_out, t_out], out, Op::Conv1d { x, w, b, geom }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose1d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<VarId, TensorError> {
        let (c_in, t_in) = self.series(x, "conv_transpose1d input")?;
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(TensorError::ShapeMismatch {
                context: "conv_transpose1d weights",
                expected: vec![0, c_in, 0],
                found: ws,
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.nodes[b.0].data.len() != c_out {
            return Err(TensorError::ShapeMismatch {
                context: "conv_transpose1d bias",
                expected: vec![c_out],
                found: self.nodes[b.0].shape.clone(),
            });
        }
        let t_out = kernels::conv_transpose1d_out_len(t_in, k, stride, padding, output_padding)
            .ok_or_else(|| TensorError::Invalid {
                what: "conv_transpose1d geometry",
                details: format!(
                    "t_in={t_in} k={k} stride={stride} padding={padding} output_padding={output_padding}"
                ),
            })?;
        let mut out = vec![0.0; c_out * t_out];
        kernels::conv_transpose1d_forward(
            &self.nodes[x.0].data,
            c_in,
            t_in,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            c_out,
            k,
            stride,
            padding,
            output_padding,
            &mut out,
        );
        let geom = ConvGeom {
            c_in,
            t_in,
            c_out,
            k,
            stride,
            padding,
        };
        Ok(self.push(
            vec![c_out, t_out],
            out,
            Op::ConvTranspose1d { x, w, b, geom },
        ))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Tanh { x })
    }

    fn same_shape(
        &self,
        a: VarId,
        b: VarId,
        context: &'static str,
    ) -> Result<Vec<usize>, TensorError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                context,
                expected: sa.clone(),
                found: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let shape = self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&u, &v)| u + v)
            .collect();
        Ok(self.push(shape, data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let shape = self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&u, &v)| u * v)
            .collect();
        Ok(self.push(shape, data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> VarId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Scale { x, factor })
    }

    /// Elementwise round to nearest integer; gradient passes through unchanged
    /// (straight-through estimator).
    pub fn round_ste(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.round()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::RoundSte { x })
    }

    /// Adds `consts[c]` to every time step of channel `c`.
    pub fn add_channel_const(&mut self, x: VarId, consts: &[f64]) -> Result<VarId, TensorError> {
        let (c, t) = self.series(x, "add_channel_const")?;
        if consts.len() != c {
            return Err(TensorError::ShapeMismatch {
                context: "add_channel_const",
                expected: vec![c],
                found: vec![consts.len()],
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for ci in 0..c {
            for v in &mut data[ci * t..(ci + 1) * t] {
                *v += consts[ci];
            }
        }
        Ok(self.push(vec![c, t], data, Op::AddChannelConst { x }))
    }

    /// Multiplies every time step of channel `c` by `consts[c]`.
    pub fn mul_channel_const(&mut self, x: VarId, consts: &[f64]) -> Result<VarId, TensorError> {
        let (c, t) = self.series(x, "mul_channel_const")?;
        if consts.len() != c {
            return Err(TensorError::ShapeMismatch {
                context: "mul_channel_const",
                expected: vec![c],
                found: vec![consts.len()],
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for ci in 0..c {
            for v in &mut data[ci * t..(ci + 1) * t] {
                *v *= consts[ci];
            }
        }
        Ok(self.push(
            vec![c, t],
            data,
            Op::MulChannelConst {
                x,
                consts: consts.to_vec(),
            },
        ))
    }

    /// `[C, T] -> [C, 1]`, the mean over the time axis.
    pub fn mean_over_time(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let (c, t) = self.series(x, "mean_over_time")?;
        if t == 0 {
            return Err(TensorError::EmptyTime {
                context: "mean_over_time",
            });
        }
        let data: Vec<f64> = (0..c)
            .map(|ci| self.nodes[x.0].data[ci * t..(ci + 1) * t].iter().sum::<f64>() / t as f64)
            .collect();
        Ok(self.push(vec![c, 1], data, Op::MeanOverTime { x }))
    }

    /// Keeps time steps `start..start+len`.
    pub fn slice_time(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, TensorError> {
        let (c, t) = self.series(x, "slice_time")?;
        if len == 0 || start + len > t {
            return Err(TensorError::Invalid {
                what: "slice_time range",
                details: format!("start={start} len={len} t={t}"),
            });
        }
        let mut data = Vec::with_capacity(c * len);
        for ci in 0..c {
            data.extend_from_slice(&self.nodes[x.0].data[ci * t + start..ci * t + start + len]);
        }
        Ok(self.push(vec![c, len], data, Op::SliceTime { x, start }))
    }

    /// Keeps channels `start..start+len`.
    pub fn slice_channels(
        &mut self,
        x: VarId,
        start: usize,
        len: usize,
    ) -> Result<VarId, TensorError> {
        let (c, t) = self.series(x, "slice_channels")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                what: "slice_channels range",
                details: format!("start={start} len={len} c={c}"),
            });
        }
        let data = self.nodes[x.0].data[start * t..(start + len) * t].to_vec();
        Ok(self.push(vec![len, t], data, Op::SliceChannels { x, start }))
    }

    /// Extends the time axis to `target_len` by repeating the last time step.
    pub fn pad_replicate_time(
        &mut self,
        x: VarId,
        target_len: usize,
    ) -> Result<VarId, TensorError> {
        let (c, t) = self.series(x, "pad_replicate_time")?;
        if t == 0 {
            return Err(TensorError::EmptyTime {
                context: "pad_replicate_time",
            });
        }
        if target_len < t {
            return Err(TensorError::Invalid {
                what: "pad_replicate_time target",
                details: format!("target_len={target_len} < t={t}"),
            });
        }
        let mut data = Vec::with_capacity(c * target_len);
        for ci in 0..c {
            let row = &self.nodes[x.0].data[ci * t..(ci + 1) * t];
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(row[t - 1]).take(target_len - t));
        }
        Ok(self.push(vec![c, target_len], data, Op::PadReplicateTime { x }))
    }

    /// Mean squared error against a constant target, reduced to a scalar.
    pub fn mse_vs(&mut self, x: VarId, target: &[f64]) -> Result<VarId, TensorError> {
        let xd = &self.nodes[x.0].data;
        if xd.len() != target.len() {
            return Err(TensorError::ShapeMismatch {
                context: "mse_vs target",
                expected: vec![xd.len()],
                found: vec![target.len()],
            });
        }
        if xd.is_empty() {
            return Err(TensorError::Invalid {
                what: "mse_vs operand",
                details: "empty".into(),
            });
        }
        let n = xd.len() as f64;
        let v = xd
            .iter()
            .zip(target)
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum::<f64>()
            / n;
        Ok(self.push(
            vec![],
            vec![v],
            Op::MseVs {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// Multinomial cross-entropy of a logit vector against one hard label,
    /// computed as `logsumexp(x) - x[label]`.
    pub fn cross_entropy_logits(&mut self, x: VarId, label: usize) -> Result<VarId, TensorError> {
        let xd = &self.nodes[x.0].data;
        if label >= xd.len() {
            return Err(TensorError::Invalid {
                what: "cross_entropy label",
                details: format!("label={label} classes={}", xd.len()),
            });
        }
        let m = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xd.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let v = lse - xd[label];
        Ok(self.push(vec![], vec![v], Op::CrossEntropyLogits { x, label }))
    }

    /// Sigmoid cross-entropy against targets in `[0, 1]`, averaged over all
    /// elements. Uses the overflow-safe form `max(x,0) - x t + ln(1+e^{-|x|})`.
    pub fn bce_with_logits(&mut self, x: VarId, targets: &[f64]) -> Result<VarId, TensorError> {
        let xd = &self.nodes[x.0].data;
        if xd.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                context: "bce_with_logits targets",
                expected: vec![xd.len()],
                found: vec![targets.len()],
            });
        }
        if xd.is_empty() {
            return Err(TensorError::Invalid {
                what: "bce_with_logits operand",
                details: "empty".into(),
            });
        }
        let n = xd.len() as f64;
        let v = xd
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            vec![],
            vec![v],
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar root. Adjoints are computed in scratch
    /// buffers and then added to each node's persistent gradient, so repeated
    /// calls accumulate.
    pub fn backward(&mut self, root: VarId) -> Result<(), TensorError> {
        let n = root.0 + 1;
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        let mut adj: Vec<Vec<f64>> = self.nodes[..n]
            .iter()
            .map(|nd| vec![0.0; nd.data.len()])
            .collect();
        adj[root.0][0] = 1.0;
        for i in (0..n).rev() {
            let (par, rest) = adj.split_at_mut(i);
            let gy = rest[0].as_slice();
            if gy.iter().all(|&v| v == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv1d { x, w, b, geom } => {
                    kernels::conv1d_backward_input(
                        gy,
                        geom.c_in,
                        geom.t_in,
                        &self.nodes[w.0].data,
                        geom.c_out,
                        geom.k,
                        geom.stride,
                        geom.padding,
                        &mut par[x.0],
                    );
                    let (gw, gb) = split_two(par, w.0, b.0);
                    kernels::conv1d_backward_params(
                        gy,
                        &self.nodes[x.0].data,
                        geom.c_in,
                        geom.t_in,
                        geom.c_out,
                        geom.k,
                        geom.stride,
                        geom.padding,
                        gw,
                        gb,
                    );
                }
                Op::ConvTranspose1d { x, w, b, geom, .. } => {
                    kernels::conv_transpose1d_backward_input(
                        gy,
                        geom.c_in,
                        geom.t_in,
                        &self.nodes[w.0].data,
                        geom.c_out,
                        geom.k,
                        geom.stride,
                        geom.padding,
                        &mut par[x.0],
                    );
                    let (gw, gb) = split_two(par, w.0, b.0);
                    kernels::conv_transpose1d_backward_params(
                        gy,
                        &self.nodes[x.0].data,
                        geom.c_in,
                        geom.t_in,
                        geom.c_out,
                        geom.k,
                        geom.stride,
                        geom.padding,
                        gw,
                        gb,
                    );
                }
                Op::Relu { x } => {
                    for ((g, &yv), &gv) in par[x.0].iter_mut().zip(&node.data).zip(gy) {
                        if yv > 0.0 {
                            *g += gv;
                        }
                    }
                }
                Op::Tanh { x } => {
                    for ((g, &yv), &gv) in par[x.0].iter_mut().zip(&node.data).zip(gy) {
                        *g += gv * (1.0 - yv * yv);
                    }
                }
                Op::Add { a, b } => {
                    for (g, &gv) in par[a.0].iter_mut().zip(gy) {
                        *g += gv;
                    }
                    for (g, &gv) in par[b.0].iter_mut().zip(gy) {
                        *g += gv;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let bd = &self.nodes[b.0].data;
                    for ((g, &bv), &gv) in par[a.0].iter_mut().zip(bd).zip(gy) {
                        *g += gv * bv;
                    }
                    let ad = &self.nodes[a.0].data;
                    for ((g, &av), &gv) in par[b.0].iter_mut().zip(ad).zip(gy) {
                        *g += gv * av;
                    }
                }
                Op::Scale { x, factor } => {
                    for (g, &gv) in par[x.0].iter_mut().zip(gy) {
                        *g += gv * factor;
                    }
                }
                Op::RoundSte { x } | Op::AddChannelConst { x } => {
                    for (g, &gv) in par[x.0].iter_mut().zip(gy) {
                        *g += gv;
                    }
                }
                Op::MulChannelConst { x, consts } => {
                    let t = node.data.len() / consts.len();
                    let gx = &mut par[x.0];
                    for (ci, &cv) in consts.iter().enumerate() {
                        for (g, &gv) in gx[ci * t..(ci + 1) * t].iter_mut().zip(&gy[ci * t..]) {
                            *g += gv * cv;
                        }
                    }
                }
                Op::MeanOverTime { x } => {
                    let gx = &mut par[x.0];
                    let t = gx.len() / gy.len();
                    let inv = 1.0 / t as f64;
                    for (ci, &gv) in gy.iter().enumerate() {
                        for g in &mut gx[ci * t..(ci + 1) * t] {
                            *g += gv * inv;
                        }
                    }
                }
                Op::SliceTime { x, start } => {
                    let c = node.shape[0];
                    let len = node.shape[1];
                    let gx = &mut par[x.0];
                    let t = gx.len() / c;
                    for ci in 0..c {
                        for (j, &gv) in gy[ci * len..(ci + 1) * len].iter().enumerate() {
                            gx[ci * t + start + j] += gv;
                        }
                    }
                }
                Op::SliceChannels { x, start } => {
                    let t = node.shape[1];
                    let gx = &mut par[x.0];
                    for (j, &gv) in gy.iter().enumerate() {
                        gx[start * t + j] += gv;
                    }
                }
                Op::PadReplicateTime { x } => {
                    let c = node.shape[0];
                    let target = node.shape[1];
                    let gx = &mut par[x.0];
                    let t = gx.len() / c;
                    for ci in 0..c {
                        for j in 0..t {
                            gx[ci * t + j] += gy[ci * target + j];
                        }
                        let tail: f64 = gy[ci * target + t..(ci + 1) * target].iter().sum();
                        gx[ci * t + t - 1] += tail;
                    }
                }
                Op::MseVs { x, target } => {
                    let g = gy[0];
                    let xd = &self.nodes[x.0].data;
                    let inv = 2.0 / xd.len() as f64;
                    for ((gx, &xv), &tv) in par[x.0].iter_mut().zip(xd).zip(target) {
                        *gx += g * inv * (xv - tv);
                    }
                }
                Op::CrossEntropyLogits { x, label } => {
                    let g = gy[0];
                    let xd = &self.nodes[x.0].data;
                    let m = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = xd.iter().map(|&v| (v - m).exp()).sum();
                    for (j, (gx, &xv)) in par[x.0].iter_mut().zip(xd).enumerate() {
                        let p = (xv - m).exp() / denom;
                        let ind = if j == *label { 1.0 } else { 0.0 };
                        *gx += g * (p - ind);
                    }
                }
                Op::BceWithLogits { x, targets } => {
                    let g = gy[0];
                    let xd = &self.nodes[x.0].data;
                    let inv = 1.0 / xd.len() as f64;
                    for ((gx, &zv), &tv) in par[x.0].iter_mut().zip(xd).zip(targets) {
                        let sig = 1.0 / (1.0 + (-zv).exp());
                        *gx += g * inv * (sig - tv);
                    }
                }
            }
        }
        for (node, a) in self.nodes[..n].iter_mut().zip(&adj) {
            for (g, v) in node.grad.iter_mut().zip(a) {
                *g += v;
            }
        }
        Ok(())
    }
}

/// Disjoint mutable borrows of two scratch adjoints (`i != j` required).
fn split_two(bufs: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = bufs.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = bufs.split_at_mut(i);
        let second = &mut lo[j];
        (&mut hi[0], second)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_grad, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0])
            .unwrap();
        let w = tape.leaf(vec![1, 1, 1], vec![1.0]).unwrap();
        let b = tape.leaf(vec![1], vec![0.0]).unwrap();
        let y = tape.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c_in, t_in, c_out, k, s, p) = (3, 13, 2, 5, 2, 2);
        let t_out = kernels::conv1d_out_len(t_in, k, s, p).unwrap();
        let xv = rand_vec(&mut rng, c_in * t_in);
        let wv = rand_vec(&mut rng, c_out * c_in * k);
        let bv = rand_vec(&mut rng, c_out);
        let target = rand_vec(&mut rng, c_out * t_out);

        let run = |xd: &[f64], wd: &[f64], bd: &[f64]| -> (f64, Tape, VarId, VarId, VarId) {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![c_in, t_in], xd.to_vec()).unwrap();
            let w = tape.leaf(vec![c_out, c_in, k], wd.to_vec()).unwrap();
            let b = tape.leaf(vec![c_out], bd.to_vec()).unwrap();
            let y = tape.conv1d(x, w, b, s, p).unwrap();
            let loss = tape.mse_vs(y, &target).unwrap();
            (tape.value(loss)[0], tape, loss, x, w)
        };

        let (_, mut tape, loss, x, w) = run(&xv, &wv, &bv);
        tape.backward(loss).unwrap();

        let fd_x = fd_grad(&mut |v| run(v, &wv, &bv).0, &xv);
        let fd_w = fd_grad(&mut |v| run(&xv, v, &bv).0, &wv);
        assert!(max_rel_err(tape.grad(x), &fd_x) <= 1e-5);
        assert!(max_rel_err(tape.grad(w), &fd_w) <= 1e-5);
    }

    #[test]
    fn conv_transpose1d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c_in, t_in, c_out, k, s, p, op) = (2, 6, 3, 5, 2, 2, 1);
        let t_out = kernels::conv_transpose1d_out_len(t_in, k, s, p, op).unwrap();
        let xv = rand_vec(&mut rng, c_in * t_in);
        let wv = rand_vec(&mut rng, c_out * c_in * k);
        let bv = rand_vec(&mut rng, c_out);
        let target = rand_vec(&mut rng, c_out * t_out);

        let run = |xd: &[f64], wd: &[f64], bd: &[f64]| -> (f64, Tape, VarId, VarId, VarId, VarId) {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![c_in, t_in], xd.to_vec()).unwrap();
            let w = tape.leaf(vec![c_out, c_in, k], wd.to_vec()).unwrap();
            let b = tape.leaf(vec![c_out], bd.to_vec()).unwrap();
            let y = tape.conv_transpose1d(x, w, b, s, p, op).unwrap();
            let loss = tape.mse_vs(y, &target).unwrap();
            (tape.value(loss)[0], tape, loss, x, w, b)
        };

        let (_, mut tape, loss, x, w, b) = run(&xv, &wv, &bv);
        tape.backward(loss).unwrap();

        let fd_x = fd_grad(&mut |v| run(v, &wv, &bv).0, &xv);
        let fd_w = fd_grad(&mut |v| run(&xv, v, &bv).0, &wv);
        let fd_b = fd_grad(&mut |v| run(&xv, &wv, v).0, &bv);
        assert!(max_rel_err(tape.grad(x), &fd_x) <= 1e-5);
        assert!(max_rel_err(tape.grad(w), &fd_w) <= 1e-5);
        assert!(max_rel_err(tape.grad(b), &fd_b) <= 1e-5);
    }

    #[test]
    fn elementwise_and_reduction_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (c, t) = (3, 7);
        let xv = rand_vec(&mut rng, c * t);
        let consts = rand_vec(&mut rng, c);
        let bce_targets: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();

        // chain exercising tanh, relu, channel consts, slice, pad, pooling,
        // scale, mul, and the fused losses
        let run = |xd: &[f64]| -> (f64, Tape, VarId, VarId) {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![c, t], xd.to_vec()).unwrap();
            let a = tape.tanh(x);
            let b = tape.relu(x);
            let prod = tape.mul(a, b).unwrap();
            let shifted = tape.add_channel_const(prod, &consts).unwrap();
            let scaled = tape.mul_channel_const(shifted, &consts).unwrap();
            let sliced = tape.slice_time(scaled, 1, 4).unwrap();
            let padded = tape.pad_replicate_time(sliced, 6).unwrap();
            let chans = tape.slice_channels(padded, 0, 2).unwrap();
            let pooled = tape.mean_over_time(chans).unwrap();
            let half = tape.scale(pooled, 0.5);
            let ce_in = tape.mean_over_time(scaled).unwrap();
            let l1 = tape.mse_vs(half, &[0.2, -0.1]).unwrap();
            let l2 = tape.cross_entropy_logits(ce_in, 1).unwrap();
            let l3 = tape.bce_with_logits(ce_in, &bce_targets).unwrap();
            let s1 = tape.add(l1, l2).unwrap();
            let loss = tape.add(s1, l3).unwrap();
            (tape.value(loss)[0], tape, loss, x)
        };

        let (_, mut tape, loss, x) = run(&xv);
        tape.backward(loss).unwrap();
        let fd_x = fd_grad(&mut |v| run(v).0, &xv);
        assert!(
            max_rel_err(tape.grad(x), &fd_x) <= 1e-5,
            "rel err {}",
            max_rel_err(tape.grad(x), &fd_x)
        );
    }

    #[test]
    fn round_ste_passes_gradient_through() {
        let xv = vec![0.2, 1.7, -2.4];
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 3], xv.clone()).unwrap();
        let r = tape.round_ste(x);
        assert_eq!(tape.value(r), &[0.0, 2.0, -2.0]);
        let loss = tape.mse_vs(r, &[0.0, 0.0, 0.0]).unwrap();
        tape.backward(loss).unwrap();
        // gradient as if rounding were identity: 2*round(x)/n
        let expect: Vec<f64> = tape.value(r).iter().map(|&v| 2.0 * v / 3.0).collect();
        assert_eq!(tape.grad(x), expect.as_slice());
    }

    #[test]
    fn two_backward_passes_double_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2, 2], vec![0.3, -0.7, 1.1, 0.9]).unwrap();
        let y = tape.tanh(x);
        let loss = tape.mse_vs(y, &[0.0; 4]).unwrap();
        tape.backward(loss).unwrap();
        let once: Vec<f64> = tape.grad(x).to_vec();
        tape.backward(loss).unwrap();
        let twice: Vec<f64> = tape.grad(x).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert!((b - 2.0 * a).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2, 2], vec![1.0; 4]).unwrap();
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_mismatches_are_diagnosed() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.leaf(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.add(a, b),
            Err(TensorError::ShapeMismatch { context: "add", .. })
        ));
        let w = tape.leaf(vec![1, 4, 3], vec![0.0; 12]).unwrap();
        let bias = tape.leaf(vec![1], vec![0.0]).unwrap();
        assert!(tape.conv1d(a, w, bias, 1, 1).is_err());
    }

    #[test]
    fn mean_over_time_gradient_is_uniform() {
        let xv = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2, 3], xv).unwrap();
        let m = tape.mean_over_time(x).unwrap();
        assert_eq!(tape.value(m), &[2.0, 5.0]);
        let loss = tape.mse_vs(m, &[0.0, 0.0]).unwrap();
        tape.backward(loss).unwrap();
        // d loss / d x = (2 * mean / 2) * (1/3) per entry of the row
        let expect = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 5.0 / 3.0, 5.0 / 3.0, 5.0 / 3.0];
        for (g, e) in tape.grad(x).iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}
