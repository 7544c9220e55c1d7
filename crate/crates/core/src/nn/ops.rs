//! Operator kernels. Reductions accumulate in `f64`, results are stored as `f32`.

use rayon::prelude::*;

use super::{NnError, Tensor4};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Cross-correlation with zero padding. `weight` is `(out_c, in_c / groups, kh, kw)`.
pub fn conv2d(x: &Tensor4, weight: &Tensor4, bias: Option<&[f32]>, p: Conv2dParams) -> Result<Tensor4, NnError> {
    conv2d_raw(x, weight.dims(), weight.data(), bias, p)
}

pub(crate) fn conv2d_raw(
    x: &Tensor4,
    wdims: [usize; 4],
    wd: &[f32],
    bias: Option<&[f32]>,
    p: Conv2dParams,
) -> Result<Tensor4, NnError> {
    let [n, in_c, h, w] = x.dims();
    let [out_c, in_per_group, kh, kw] = wdims;
    if wd.len() != wdims.iter().product::<usize>() {
        return Err(NnError::shape("conv2d", "weight data does not match its shape"));
    }
    let Conv2dParams { stride, padding, groups } = p;
    if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
        return Err(NnError::shape("conv2d", format!("channels {in_c}->{out_c} not divisible by groups {groups}")));
    }
    if in_per_group != in_c / groups {
        return Err(NnError::shape(
            "conv2d",
            format!("weight expects {} input channels per group, input has {}", in_per_group, in_c / groups),
        ));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(NnError::shape("conv2d", format!("bias length {} != {}", b.len(), out_c)));
        }
    }
    let (oh, ow) = match (conv_out_len(h, kh, stride, padding), conv_out_len(w, kw, stride, padding)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(NnError::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}"))),
    };
    let out_per_group = out_c / groups;
    let plane = oh * ow;
    let mut out = vec![0f32; n * out_c * plane];
    let xd = x.data();
    let geom = ConvGeom { h, w, oh, ow, kh, kw, stride, padding };
    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

    out.par_chunks_mut(plane).enumerate().for_each_init(
        || vec![0f64; plane],
        |acc, (idx, dst)| {
            let (b, oc) = (idx / out_c, idx % out_c);
            let g = oc / out_per_group;
            acc.fill(bias.map_or(0.0, |bv| bv[oc] as f64));
            let chan = |icg: usize| {
                let ic = g * in_per_group + icg;
                &xd[(b * in_c + ic) * h * w..(b * in_c + ic + 1) * h * w]
            };
            let wrow = &wd[oc * in_per_group * kh * kw..(oc + 1) * in_per_group * kh * kw];
            if pointwise {
                pointwise_accumulate(acc, wrow, chan);
            } else {
                for icg in 0..in_per_group {
                    let taps = &wrow[icg * kh * kw..(icg + 1) * kh * kw];
                    match kw {
                        2 => accumulate_channel::<2>(acc, chan(icg), taps, &geom),
                        3 => accumulate_channel::<3>(acc, chan(icg), taps, &geom),
                        4 => accumulate_channel::<4>(acc, chan(icg), taps, &geom),
                        7 => accumulate_channel::<7>(acc, chan(icg), taps, &geom),
                        _ => accumulate_channel_any(acc, chan(icg), taps, &geom),
                    }
                }
            }
            for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                *d = a as f32;
            }
        },
    );
    Tensor4::new([n, out_c, oh, ow], out)
}

struct ConvGeom {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

/// 1x1 stride-1 convolution of one output channel, four input channels per sweep.
fn pointwise_accumulate<'a>(acc: &mut [f64], wrow: &[f32], chan: impl Fn(usize) -> &'a [f32]) {
    let cin = wrow.len();
    let mut ic = 0;
    while ic + 4 <= cin {
        let (w0, w1, w2, w3) = (wrow[ic] as f64, wrow[ic + 1] as f64, wrow[ic + 2] as f64, wrow[ic + 3] as f64);
        let (x0, x1, x2, x3) = (chan(ic), chan(ic + 1), chan(ic + 2), chan(ic + 3));
        for i in 0..acc.len() {
            acc[i] += w0 * x0[i] as f64 + w1 * x1[i] as f64 + w2 * x2[i] as f64 + w3 * x3[i] as f64;
        }
        ic += 4;
    }
    for c in ic..cin {
        let w0 = wrow[c] as f64;
        for (a, &v) in acc.iter_mut().zip(chan(c)) {
            *a += w0 * v as f64;
        }
    }
}

/// Adds the contribution of one input channel with a `K`-wide kernel.
/// Interior columns sum the kernel row in registers; border columns check
/// each tap against the padding.
fn accumulate_channel<const K: usize>(acc: &mut [f64], src: &[f32], taps: &[f32], g: &ConvGeom) {
    let (lo, hi) = interior_range(g);
    for ky in 0..g.kh {
        let mut wk = [0f64; K];
        for (d, &t) in wk.iter_mut().zip(&taps[ky * K..(ky + 1) * K]) {
            *d = t as f64;
        }
        for oy in 0..g.oh {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
            let arow = &mut acc[oy * g.ow..(oy + 1) * g.ow];
            for ox in (0..lo).chain(hi.max(lo)..g.ow) {
                arow[ox] += border_tap_sum(row, &wk, ox, g);
            }
            if g.stride == 1 {
                for ox in lo..hi {
                    let seg = &row[ox - g.padding..ox - g.padding + K];
                    let mut s = 0.0;
                    for k in 0..K {
                        s += wk[k] * seg[k] as f64;
                    }
                    arow[ox] += s;
                }
            } else {
                for ox in lo..hi {
                    let base = ox * g.stride - g.padding;
                    let seg = &row[base..base + K];
                    let mut s = 0.0;
                    for k in 0..K {
                        s += wk[k] * seg[k] as f64;
                    }
                    arow[ox] += s;
                }
            }
        }
    }
}

fn accumulate_channel_any(acc: &mut [f64], src: &[f32], taps: &[f32], g: &ConvGeom) {
    for ky in 0..g.kh {
        let wk: Vec<f64> = taps[ky * g.kw..(ky + 1) * g.kw].iter().map(|&t| t as f64).collect();
        for oy in 0..g.oh {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
            for ox in 0..g.ow {
                acc[oy * g.ow + ox] += border_tap_sum(row, &wk, ox, g);
            }
        }
    }
}

#[inline]
fn border_tap_sum(row: &[f32], wk: &[f64], ox: usize, g: &ConvGeom) -> f64 {
    let mut s = 0.0;
    for (k, &wv) in wk.iter().enumerate() {
        let ix = (ox * g.stride + k) as isize - g.padding as isize;
        if ix >= 0 && (ix as usize) < g.w {
            s += wv * row[ix as usize] as f64;
        }
    }
    s
}

/// Output columns whose whole kernel window lies inside the input row.
fn interior_range(g: &ConvGeom) -> (usize, usize) {
    let lo = g.padding.div_ceil(g.stride);
    let hi = if g.w + g.padding >= g.kw { ((g.w + g.padding - g.kw) / g.stride + 1).min(g.ow) } else { 0 };
    (lo.min(g.ow), hi)
}

fn check_param_len(op: &str, name: &str, v: &[f32], c: usize) -> Result<(), NnError> {
    if v.len() != c {
        return Err(NnError::shape(op, format!("{name} has {} values, expected {c}", v.len())));
    }
    Ok(())
}

/// Inference-mode batch normalization with running statistics.
pub fn batchnorm(
    x: &Tensor4,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) -> Result<Tensor4, NnError> {
    let [_, c, h, w] = x.dims();
    for (name, v) in [("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)] {
        check_param_len("batchnorm", name, v, c)?;
    }
    let hw = h * w;
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        let scale = gamma[ch] as f64 / (var[ch] as f64 + eps).sqrt();
        let (m, b) = (mean[ch] as f64, beta[ch] as f64);
        for v in plane {
            *v = ((*v as f64 - m) * scale + b) as f32;
        }
    }
    Ok(out)
}

/// Normalizes across channels independently at every spatial site, then
/// applies per-channel scale and shift.
pub fn layernorm(x: &Tensor4, gamma: &[f32], beta: &[f32], eps: f64) -> Result<Tensor4, NnError> {
    let [_, c, h, w] = x.dims();
    check_param_len("layernorm", "gamma", gamma, c)?;
    check_param_len("layernorm", "beta", beta, c)?;
    let hw = h * w;
    let src = x.data();
    let mut out = vec![0f32; src.len()];
    out.par_chunks_mut(c * hw).zip(src.par_chunks(c * hw)).for_each(|(dst, s)| {
        let mut mean = vec![0f64; hw];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&s[ch * hw..(ch + 1) * hw]) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0f64; hw];
        for ch in 0..c {
            for ((q, &v), &m) in var.iter_mut().zip(&s[ch * hw..(ch + 1) * hw]).zip(&mean) {
                let d = v as f64 - m;
                *q += d * d;
            }
        }
        let inv: Vec<f64> = var.iter().map(|q| 1.0 / (q / c as f64 + eps).sqrt()).collect();
        for ch in 0..c {
            let (g, b) = (gamma[ch] as f64, beta[ch] as f64);
            for i in 0..hw {
                dst[ch * hw + i] = ((s[ch * hw + i] as f64 - mean[i]) * inv[i] * g + b) as f32;
            }
        }
    });
    Tensor4::new(x.dims(), out)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Exact GELU, `x * Phi(x)` with the normal CDF evaluated through `erf`.
pub fn gelu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    out.data_mut().par_iter_mut().for_each(|v| *v = gelu_scalar(*v as f64) as f32);
    out
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Window max with implicit `-inf` padding.
pub fn maxpool(x: &Tensor4, kernel: usize, stride: usize, padding: usize) -> Result<Tensor4, NnError> {
    let [n, c, h, w] = x.dims();
    if kernel == 0 || 2 * padding > kernel {
        return Err(NnError::shape("maxpool", "padding must be at most half the kernel"));
    }
    let (oh, ow) = match (conv_out_len(h, kernel, stride, padding), conv_out_len(w, kernel, stride, padding)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(NnError::shape("maxpool", format!("kernel {kernel} larger than padded input {h}x{w}"))),
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            m = m.max(src[iy as usize * w + ix as usize]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor4::new([n, c, oh, ow], out)
}

pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let hw = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw) as f32).collect();
    Tensor4::new([n, c, 1, 1], data).expect("gap dims")
}

/// `y = W x + b` on each batch item flattened to `c * h * w` features.
/// `weight` is row-major `(out_features, in_features)`.
pub fn linear(x: &Tensor4, weight: &[f32], bias: Option<&[f32]>, out_features: usize) -> Result<Tensor4, NnError> {
    let n = x.batch();
    let in_features = x.len() / n.max(1);
    if weight.len() != out_features * in_features {
        return Err(NnError::shape(
            "linear",
            format!("weight has {} values, expected {}x{}", weight.len(), out_features, in_features),
        ));
    }
    if let Some(b) = bias {
        check_param_len("linear", "bias", b, out_features)?;
    }
    let mut out = Vec::with_capacity(n * out_features);
    for item in x.data().chunks(in_features) {
        for o in 0..out_features {
            let row = &weight[o * in_features..(o + 1) * in_features];
            let mut acc = bias.map_or(0.0, |b| b[o] as f64);
            for (&wv, &xv) in row.iter().zip(item) {
                acc += wv as f64 * xv as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor4::new([n, out_features, 1, 1], out)
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4, NnError> {
    if a.dims() != b.dims() {
        return Err(NnError::shape("add", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
    Ok(out)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
