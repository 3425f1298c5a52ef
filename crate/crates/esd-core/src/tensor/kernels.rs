//! Raw compute routines for 1-D convolutions, shared by the tape ops and by
//! tape-free inference. Layout is channel-major: `x[c * t_len + t]`.
//! Weights are `[c_out, c_in, k]`, flattened row-major.
//!
//! Every routine hoists the valid-index range out of the time loop, so the
//! inner loops are branch-free strided accumulations.

pub fn conv1d_out_len(t_in: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = t_in + 2 * padding;
    if span < k || stride == 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

pub fn conv_transpose1d_out_len(
    t_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if t_in == 0 || stride == 0 || output_padding >= stride {
        return None;
    }
    let full = (t_in - 1) * stride + k + output_padding;
    if full < 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// Range of `t` with `0 <= t*stride + off < n`, clamped to `0..t_max`.
#[inline]
fn t_range(off: isize, stride: usize, n: usize, t_max: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi = if (n as isize) > off {
        ((n as isize - off) as usize).div_ceil(stride).min(t_max)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// `out` must be sized `c_out * t_out` and is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out: &mut [f64],
) {
    let t_out = conv1d_out_len(t_in, k, stride, padding).expect("invalid conv geometry");
    debug_assert_eq!(out.len(), c_out * t_out);
    for co in 0..c_out {
        let out_row = &mut out[co * t_out..(co + 1) * t_out];
        out_row.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let w_row = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            for (kk, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let off = kk as isize - padding as isize;
                let (lo, hi) = t_range(off, stride, t_in, t_out);
                for t in lo..hi {
                    out_row[t] += wv * x_row[((t * stride) as isize + off) as usize];
                }
            }
        }
    }
}

/// Accumulates into `gx` (sized `c_in * t_in`).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward_input(
    gy: &[f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gx: &mut [f64],
) {
    let t_out = gy.len() / c_out;
    for co in 0..c_out {
        let gy_row = &gy[co * t_out..(co + 1) * t_out];
        for ci in 0..c_in {
            let w_row = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let gx_row = &mut gx[ci * t_in..(ci + 1) * t_in];
            for (kk, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let off = kk as isize - padding as isize;
                let (lo, hi) = t_range(off, stride, t_in, t_out);
                for t in lo..hi {
                    gx_row[((t * stride) as isize + off) as usize] += wv * gy_row[t];
                }
            }
        }
    }
}

/// Accumulates into `gw` (`c_out*c_in*k`) and `gb` (`c_out`).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward_params(
    gy: &[f64],
    x: &[f64],
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let t_out = gy.len() / c_out;
    for co in 0..c_out {
        let gy_row = &gy[co * t_out..(co + 1) * t_out];
        gb[co] += gy_row.iter().sum::<f64>();
        for ci in 0..c_in {
            let gw_row = &mut gw[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            for (kk, gwv) in gw_row.iter_mut().enumerate() {
                let off = kk as isize - padding as isize;
                let (lo, hi) = t_range(off, stride, t_in, t_out);
                let mut acc = 0.0;
                for t in lo..hi {
                    acc += gy_row[t] * x_row[((t * stride) as isize + off) as usize];
                }
                *gwv += acc;
            }
        }
    }
}

/// `out` must be sized `c_out * t_out` and is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_forward(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    out: &mut [f64],
) {
    let t_out = conv_transpose1d_out_len(t_in, k, stride, padding, output_padding)
        .expect("invalid transpose conv geometry");
    debug_assert_eq!(out.len(), c_out * t_out);
    for co in 0..c_out {
        let out_row = &mut out[co * t_out..(co + 1) * t_out];
        out_row.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let w_row = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            for (kk, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let off = kk as isize - padding as isize;
                let (lo, hi) = t_range(off, stride, t_out, t_in);
                for t in lo..hi {
                    out_row[((t * stride) as isize + off) as usize] += wv * x_row[t];
                }
            }
        }
    }
}

/// Accumulates into `gx` (sized `c_in * t_in`).
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_backward_input(
    gy: &[f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gx: &mut [f64],
) {
    let t_out = gy.len() / c_out;
    for co in 0..c_out {
        let gy_row = &gy[co * t_out..(co + 1) * t_out];
        for ci in 0..c_in {
            let w_row = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let gx_row = &mut gx[ci * t_in..(ci + 1) * t_in];
            for (kk, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let off = kk as isize - padding as isize;
                let (lo, hi) = t_range(off, stride, t_out, t_in);
                for t in lo..hi {
                    gx_row[t] += wv * gy_row[((t * stride) as isize + off) as usize];
                }
            }
        }
    }
}

/// Accumulates into `gw` and `gb`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_backward_params(
    gy: &[f64],
    x: &[f64],
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let t_out = gy.len() / c_out;
    for co in 0..c_out {
        let gy_row = &gy[co * t_out..(co + 1) * t_out];
        gb[co] += gy_row.iter().sum::<f64>();
        for ci in 0..c_in {
            let gw_row = &mut gw[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            for (kk, gwv) in gw_row.iter_mut().enumerate() {
                let off = kk as isize - padding as isize;
                let (lo, hi) = t_range(off, stride, t_out, t_in);
                let mut acc = 0.0;
                for t in lo..hi {
                    acc += x_row[t] * gy_row[((t * stride) as isize + off) as usize];
                }
                *gwv += acc;
            }
        }
    }
}
