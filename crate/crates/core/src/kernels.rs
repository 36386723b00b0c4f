//! Forward and backward kernels for the primitive operations.
//!
//! All kernels are single-threaded direct loops over row-major NCHW buffers.
//! The accumulation order of every reduction is fixed so results are
//! bit-reproducible.

use std::borrow::Cow;

use crate::error::{HgError, Result};
use crate::tensor::{ConvSpec, Real, Shape4, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Range `[lo, hi)` of output positions `o` for which `o*stride + offset`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        ((last / s) as usize + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

const LANES: usize = 8;

/// Adds `a[k]·b[k]` into `lanes[k % LANES]`.
#[inline]
fn dot_lanes<T: Real>(lanes: &mut [T; LANES], a: &[T], b: &[T]) {
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            lanes[k] += xa[k] * xb[k];
        }
    }
    for (k, (p, q)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[k] += *p * *q;
    }
}

/// Splits every row into `stride` column phases: phase `p` holds columns
/// `p, p+stride, ...`. Layout is `[n*c][h][stride][ceil(w/stride)]`.
fn split_columns<T: Real>(x: &[T], s: Shape4, stride: usize) -> (Cow<'_, [T]>, usize) {
    if stride == 1 {
        return (Cow::Borrowed(x), s.w);
    }
    let pw = s.w.div_ceil(stride);
    let mut out = vec![T::zero(); s.n * s.c * s.h * stride * pw];
    for (r, row) in x.chunks_exact(s.w).enumerate() {
        let dst = &mut out[r * stride * pw..(r + 1) * stride * pw];
        for (ix, v) in row.iter().enumerate() {
            dst[(ix % stride) * pw + ix / stride] = *v;
        }
    }
    (Cow::Owned(out), pw)
}

/// Inverse of [`split_columns`].
fn merge_columns<T: Real>(xs: Vec<T>, s: Shape4, stride: usize, pw: usize) -> Vec<T> {
    if stride == 1 {
        return xs;
    }
    let mut out = vec![T::zero(); s.numel()];
    for (r, row) in out.chunks_exact_mut(s.w).enumerate() {
        let src = &xs[r * stride * pw..(r + 1) * stride * pw];
        for (ix, v) in row.iter_mut().enumerate() {
            *v = src[(ix % stride) * pw + ix / stride];
        }
    }
    out
}

/// Start of the contiguous run read by output column `ox0` at column
/// offset `xoff`, within a row laid out by [`split_columns`].
#[inline]
fn phase_start(ox0: usize, xoff: isize, stride: usize, pw: usize) -> usize {
    let s = stride as isize;
    let phase = xoff.rem_euclid(s);
    phase as usize * pw + (ox0 as isize + (xoff - phase) / s) as usize
}

/// Grouped, strided, padded, dilated 2-D cross-correlation.
///
/// Every output element starts from its bias (or zero) and accumulates the
/// products in (input channel, kernel row, kernel column) order.
pub fn conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let is = input.shape();
    let os = spec.output_shape(is)?;
    let ws = weight.shape();
    if ws != spec.weight_shape() {
        return Err(HgError::config(format!(
            "weight shape {ws} does not match expected {}",
            spec.weight_shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(HgError::config(format!(
                "bias length {} does not match out_channels {}",
                b.len(),
                spec.out_channels
            )));
        }
    }
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let l = spec.dilation;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (xs, pw_) = split_columns(input.data(), is, sw);
    let x = &xs[..];
    let row_len = sw * pw_;
    let wt = weight.data();
    let mut out = vec![T::zero(); os.numel()];
    let oplane = os.plane();
    let iplane = is.h * row_len;

    for n in 0..is.n {
        for oc in 0..os.c {
            let g = oc / ocpg;
            let obase = (n * os.c + oc) * oplane;
            let oslice = &mut out[obase..obase + oplane];
            if let Some(b) = bias {
                oslice.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icl in 0..icpg {
                let ic = g * icpg + icl;
                let ibase = (n * is.c + ic) * iplane;
                let islice = &x[ibase..ibase + iplane];
                for ky in 0..kh {
                    let yoff = (ky * l) as isize - ph as isize;
                    let (oy0, oy1) = valid_range(os.h, is.h, sh, yoff);
                    for kx in 0..kw {
                        let wv = wt[((oc * icpg + icl) * kh + ky) * kw + kx];
                        let xoff = (kx * l) as isize - pw as isize;
                        let (ox0, ox1) = valid_range(os.w, is.w, sw, xoff);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let ix0 = phase_start(ox0, xoff, sw, pw_);
                        for oy in oy0..oy1 {
                            let iy = ((oy * sh) as isize + yoff) as usize;
                            let src = &islice[iy * row_len + ix0..iy * row_len + ix0 + (ox1 - ox0)];
                            let orow = &mut oslice[oy * os.w + ox0..oy * os.w + ox1];
                            for (o, i) in orow.iter_mut().zip(src) {
                                *o += wv * *i;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec(os, out)
}

/// Gradients of [`conv2d_forward`]. Each requested gradient is returned in
/// the layout of the corresponding forward argument.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &[T],
    spec: &ConvSpec,
    need: [bool; 3],
) -> ConvGrads<T> {
    let is = input.shape();
    let os = spec
        .output_shape(is)
        .expect("shape validated during forward");
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let l = spec.dilation;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let wt = weight.data();
    let oplane = os.plane();

    let gb = if need[2] {
        let mut gb = vec![T::zero(); os.c];
        for n in 0..os.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let base = (n * os.c + oc) * oplane;
                for v in &grad_out[base..base + oplane] {
                    *acc += *v;
                }
            }
        }
        Some(gb)
    } else {
        None
    };

    if !need[0] && !need[1] {
        return ConvGrads {
            input: None,
            weight: None,
            bias: gb,
        };
    }

    let (xs, pw_) = split_columns(input.data(), is, sw);
    let x = &xs[..];
    let row_len = sw * pw_;
    let iplane = is.h * row_len;
    let mut gin = need[0].then(|| vec![T::zero(); is.n * is.c * iplane]);
    let mut gw = need[1].then(|| vec![T::zero(); weight.numel()]);

    for n in 0..is.n {
        for oc in 0..os.c {
            let g = oc / ocpg;
            let obase = (n * os.c + oc) * oplane;
            let go = &grad_out[obase..obase + oplane];
            for icl in 0..icpg {
                let ic = g * icpg + icl;
                let ibase = (n * is.c + ic) * iplane;
                for ky in 0..kh {
                    let yoff = (ky * l) as isize - ph as isize;
                    let (oy0, oy1) = valid_range(os.h, is.h, sh, yoff);
                    for kx in 0..kw {
                        let widx = ((oc * icpg + icl) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let xoff = (kx * l) as isize - pw as isize;
                        let (ox0, ox1) = valid_range(os.w, is.w, sw, xoff);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut lanes = [T::zero(); LANES];
                        let ix0 = ibase + phase_start(ox0, xoff, sw, pw_);
                        for oy in oy0..oy1 {
                            let iy = ((oy * sh) as isize + yoff) as usize;
                            let grow = &go[oy * os.w + ox0..oy * os.w + ox1];
                            let span = ix0 + iy * row_len..ix0 + iy * row_len + grow.len();
                            if let Some(gi) = gin.as_mut() {
                                for (d, g) in gi[span.clone()].iter_mut().zip(grow) {
                                    *d += wv * *g;
                                }
                            }
                            if gw.is_some() {
                                dot_lanes(&mut lanes, grow, &x[span]);
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += lanes.iter().fold(T::zero(), |a, b| a + *b);
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gin.map(|g| merge_columns(g, is, sw, pw_)),
        weight: gw,
        bias: gb,
    }
}

/// 2×2 max-pool with stride 2. Returns the output and, per output cell, the
/// row-major offset (0..4) of the winning element inside its window. Ties go
/// to the first element.
pub fn maxpool2x2_forward<T: Real>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u8>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(HgError::config(format!(
            "max-pool needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let os = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = x[base + 2 * oy * s.w + 2 * ox];
                let mut bi = 0u8;
                for k in 1..4u8 {
                    let dy = (k / 2) as usize;
                    let dx = (k % 2) as usize;
                    let v = x[base + (2 * oy + dy) * s.w + 2 * ox + dx];
                    if v > best {
                        best = v;
                        bi = k;
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    Ok((Tensor4::from_vec(os, out)?, arg))
}

pub fn maxpool2x2_backward<T: Real>(in_shape: Shape4, argmax: &[u8], grad_out: &[T]) -> Vec<T> {
    let mut gin = vec![T::zero(); in_shape.numel()];
    let (oh, ow) = (in_shape.h / 2, in_shape.w / 2);
    for nc in 0..in_shape.n * in_shape.c {
        let base = nc * in_shape.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (nc * oh + oy) * ow + ox;
                let k = argmax[o] as usize;
                let iy = 2 * oy + k / 2;
                let ix = 2 * ox + k % 2;
                gin[base + iy * in_shape.w + ix] += grad_out[o];
            }
        }
    }
    gin
}

pub fn upsample2x_forward<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let os = Shape4::new(s.n, s.c, s.h * 2, s.w * 2);
    let x = input.data();
    Tensor4::from_fn(os, |n, c, h, w| x[s.index(n, c, h / 2, w / 2)])
}

pub fn upsample2x_backward<T: Real>(in_shape: Shape4, grad_out: &[T]) -> Vec<T> {
    let os = Shape4::new(in_shape.n, in_shape.c, in_shape.h * 2, in_shape.w * 2);
    let mut gin = vec![T::zero(); in_shape.numel()];
    for n in 0..os.n {
        for c in 0..os.c {
            for h in 0..os.h {
                for w in 0..os.w {
                    gin[in_shape.index(n, c, h / 2, w / 2)] += grad_out[os.index(n, c, h, w)];
                }
            }
        }
    }
    gin
}

/// Saved context of a training-mode batch-norm forward pass.
pub struct BnTrainCtx<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance, per channel.
    pub var: Vec<T>,
}

fn check_bn_len<T>(s: Shape4, v: &[T], what: &str) -> Result<()> {
    if v.len() != s.c {
        return Err(HgError::config(format!(
            "batch-norm {what} length {} does not match channel count {}",
            v.len(),
            s.c
        )));
    }
    Ok(())
}

/// Batch-norm with batch statistics over (n, h, w) per channel.
pub fn batchnorm_train_forward<T: Real>(
    input: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor4<T>, BnTrainCtx<T>)> {
    let s = input.shape();
    check_bn_len(s, gamma, "gamma")?;
    check_bn_len(s, beta, "beta")?;
    let m = T::of((s.n * s.plane()) as f64);
    let eps = T::of(BN_EPS);
    let x = input.data();
    let p = s.plane();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * p;
            for v in &x[base..base + p] {
                acc += *v;
            }
        }
        mean[c] = acc / m;
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * p;
            for v in &x[base..base + p] {
                let d = *v - mean[c];
                acc += d * d;
            }
        }
        var[c] = acc / m;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * p;
            for i in base..base + p {
                let xh = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    Ok((
        Tensor4::from_vec(s, out)?,
        BnTrainCtx {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns (grad input, grad gamma, grad beta).
pub fn batchnorm_train_backward<T: Real>(
    shape: Shape4,
    ctx: &BnTrainCtx<T>,
    gamma: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = shape.plane();
    let m = T::of((shape.n * p) as f64);
    let mut gg = vec![T::zero(); shape.c];
    let mut gb = vec![T::zero(); shape.c];
    for c in 0..shape.c {
        for n in 0..shape.n {
            let base = (n * shape.c + c) * p;
            for i in base..base + p {
                gb[c] += grad_out[i];
                gg[c] += grad_out[i] * ctx.xhat[i];
            }
        }
    }
    let mut gin = vec![T::zero(); grad_out.len()];
    for c in 0..shape.c {
        // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
        let k = gamma[c] * ctx.inv_std[c] / m;
        for n in 0..shape.n {
            let base = (n * shape.c + c) * p;
            for i in base..base + p {
                gin[i] = k * (m * grad_out[i] - gb[c] - ctx.xhat[i] * gg[c]);
            }
        }
    }
    (gin, gg, gb)
}

/// Batch-norm with fixed running statistics (an affine map per channel).
pub fn batchnorm_eval_forward<T: Real>(
    input: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor4<T>> {
    let s = input.shape();
    check_bn_len(s, gamma, "gamma")?;
    check_bn_len(s, beta, "beta")?;
    check_bn_len(s, running_mean, "running mean")?;
    check_bn_len(s, running_var, "running variance")?;
    let eps = T::of(BN_EPS);
    let x = input.data();
    let p = s.plane();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = T::one() / (running_var[c] + eps).sqrt();
            let base = (n * s.c + c) * p;
            for i in base..base + p {
                out[i] = gamma[c] * ((x[i] - running_mean[c]) * inv) + beta[c];
            }
        }
    }
    Tensor4::from_vec(s, out)
}

/// Channel permutation that interleaves `groups` channel groups: output
/// channel `j*groups + i` takes input channel `i*(c/groups) + j`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(HgError::config(format!(
            "channel count {channels} not divisible by shuffle groups {groups}"
        )));
    }
    let per = channels / groups;
    let mut perm = vec![0; channels];
    for i in 0..groups {
        for j in 0..per {
            perm[j * groups + i] = i * per + j;
        }
    }
    Ok(perm)
}

/// `out[:, o] = in[:, perm[o]]`.
pub fn gather_channels<T: Real>(input: &Tensor4<T>, perm: &[usize]) -> Tensor4<T> {
    let s = input.shape();
    let os = Shape4::new(s.n, perm.len(), s.h, s.w);
    let p = s.plane();
    let x = input.data();
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for &src in perm {
            let base = (n * s.c + src) * p;
            out.extend_from_slice(&x[base..base + p]);
        }
    }
    Tensor4::from_vec(os, out).expect("permutation preserves size")
}

pub fn scatter_channels<T: Real>(in_shape: Shape4, perm: &[usize], grad_out: &[T]) -> Vec<T> {
    let p = in_shape.plane();
    let mut gin = vec![T::zero(); in_shape.numel()];
    for n in 0..in_shape.n {
        for (o, &src) in perm.iter().enumerate() {
            let ob = (n * perm.len() + o) * p;
            let ib = (n * in_shape.c + src) * p;
            for k in 0..p {
                gin[ib + k] += grad_out[ob + k];
            }
        }
    }
    gin
}

/// General axis permutation of a 4-D tensor: output axis `k` is input axis
/// `axes[k]`.
pub fn permute_axes<T: Real>(input: &Tensor4<T>, axes: [usize; 4]) -> Result<Tensor4<T>> {
    let mut seen = [false; 4];
    for &a in &axes {
        if a > 3 || seen[a] {
            return Err(HgError::config(format!("invalid axis permutation {axes:?}")));
        }
        seen[a] = true;
    }
    let d = input.shape().dims();
    let os = Shape4::from_dims([d[axes[0]], d[axes[1]], d[axes[2]], d[axes[3]]]);
    let is = input.shape();
    let x = input.data();
    Ok(Tensor4::from_fn(os, |a, b, c, e| {
        let o = [a, b, c, e];
        let mut i = [0usize; 4];
        for k in 0..4 {
            i[axes[k]] = o[k];
        }
        x[is.index(i[0], i[1], i[2], i[3])]
    }))
}

pub fn inverse_axes(axes: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (k, &a) in axes.iter().enumerate() {
        inv[a] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape4, v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn valid_range_matches_scan() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for s in 1..4 {
                    for off in -5isize..5 {
                        let (lo, hi) = valid_range(out_len, in_len, s, off);
                        let scan: Vec<usize> = (0..out_len)
                            .filter(|o| {
                                let i = (*o * s) as isize + off;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, scan, "out={out_len} in={in_len} s={s} off={off}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor4::<f64>::ones(Shape4::new(1, 1, 3, 3));
        let w = Tensor4::<f64>::ones(Shape4::new(1, 1, 3, 3));
        let spec = ConvSpec::same(1, 1, 3).with_padding(0, 0).with_bias(false);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel_is_bit_exact() {
        let x = Tensor4::<f32>::from_fn(Shape4::new(2, 1, 4, 5), |n, _, h, w| {
            (n as f32 + 0.1) * (h as f32 - 1.7) / (w as f32 + 0.3)
        });
        let w = Tensor4::<f32>::ones(Shape4::new(1, 1, 1, 1));
        let spec = ConvSpec::pointwise(1, 1).with_bias(false);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_conv_on_5x5_ones() {
        let x = Tensor4::<f64>::ones(Shape4::new(1, 1, 5, 5));
        let w = Tensor4::<f64>::ones(Shape4::new(1, 1, 3, 3));
        let spec = ConvSpec::same(1, 1, 3)
            .with_padding(0, 0)
            .with_dilation(2)
            .with_bias(false);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_rejects_wrong_weight_shape() {
        let x = Tensor4::<f64>::ones(Shape4::new(1, 2, 4, 4));
        let w = Tensor4::<f64>::ones(Shape4::new(3, 1, 3, 3));
        let spec = ConvSpec::same(2, 3, 3);
        assert!(conv2d_forward(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn maxpool_picks_max_and_first_on_ties() {
        let x = t(Shape4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.item(), 4.0);
        assert_eq!(arg, vec![3]);

        let x = Tensor4::<f64>::full(Shape4::new(1, 2, 4, 4), 3.0);
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 3.0));
        assert!(arg.iter().all(|a| *a == 0));
        let g = maxpool2x2_backward(x.shape(), &arg, &vec![1.0; y.numel()]);
        for h in 0..4 {
            for w in 0..4 {
                let want = if h % 2 == 0 && w % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g[x.shape().index(0, 1, h, w)], want);
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 3, 4));
        assert!(matches!(maxpool2x2_forward(&x), Err(HgError::Config(_))));
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let x = t(Shape4::new(1, 1, 1, 1), &[5.0]);
        let y = upsample2x_forward(&x);
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|v| *v == 5.0));
        let s = Shape4::new(1, 2, 3, 3);
        let g = upsample2x_backward::<f64>(s, &vec![1.0; 72]);
        assert!(g.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn pool_after_upsample_is_identity() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 3, 5), |n, c, h, w| {
            (n * 31 + c * 7 + h * 3 + w) as f64 * 0.37 - 4.0
        });
        let (y, _) = maxpool2x2_forward(&upsample2x_forward(&x)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn batchnorm_constant_input_gives_beta() {
        let x = Tensor4::<f64>::full(Shape4::new(2, 2, 3, 3), 7.5);
        let (y, _) = batchnorm_train_forward(&x, &[2.0, -1.0], &[0.25, 3.0]).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    assert_eq!(y.at(n, 0, h, w), 0.25);
                    assert_eq!(y.at(n, 1, h, w), 3.0);
                }
            }
        }
    }

    #[test]
    fn batchnorm_standardized_input_passes_through() {
        // Values +-1 alternating have mean 0 and biased variance 1.
        let x = Tensor4::<f64>::from_fn(Shape4::new(2, 1, 2, 2), |n, _, h, w| {
            if (n + h + w) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let (y, ctx) = batchnorm_train_forward(&x, &[1.0], &[0.0]).unwrap();
        assert!(ctx.mean[0].abs() < 1e-15);
        assert!((ctx.var[0] - 1.0).abs() < 1e-15);
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn batchnorm_length_mismatch() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 3, 2, 2));
        assert!(batchnorm_train_forward(&x, &[1.0; 2], &[0.0; 3]).is_err());
        assert!(batchnorm_eval_forward(&x, &[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 2]).is_err());
    }

    #[test]
    fn shuffle_permutations() {
        assert_eq!(shuffle_permutation(4, 2).unwrap(), vec![0, 2, 1, 3]);
        assert_eq!(
            shuffle_permutation(8, 4).unwrap(),
            vec![0, 2, 4, 6, 1, 3, 5, 7]
        );
        assert_eq!(shuffle_permutation(6, 1).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(shuffle_permutation(6, 6).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(shuffle_permutation(6, 4).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 4, 5), |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f64
        });
        let axes = [0, 3, 1, 2];
        let y = permute_axes(&x, axes).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 5, 3, 4));
        assert_eq!(y.at(1, 4, 2, 3), x.at(1, 2, 3, 4));
        let z = permute_axes(&y, inverse_axes(axes)).unwrap();
        assert_eq!(z, x);
        assert!(permute_axes(&x, [0, 0, 1, 2]).is_err());
    }
}
