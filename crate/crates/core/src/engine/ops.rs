//! Layer kernels over NCHW [`Tensor`]s.
//!
//! Every kernel uses "same" padding: a `k×k` window is padded by `(k-1)/2` on
//! each side, so the output spatial size is `ceil(input / stride)`.
//!
//! The `*_par` variants split work over output channels across `threads`
//! scoped threads. Each output element is always accumulated in the same
//! order on one thread, so results are bit-identical for any thread count.

use std::thread;

use crate::engine::param::Param;
use crate::engine::tensor::{Shape, Tensor};
use crate::engine::graph::SplitPart;
use crate::error::{Error, Result};

/// Runs `f(channel, plane)` over every `plane_len`-sized chunk of `out`,
/// distributing contiguous channel ranges over at most `threads` threads.
fn for_each_plane<F>(out: &mut [f32], plane_len: usize, threads: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    if plane_len == 0 {
        return;
    }
    let planes = out.len() / plane_len;
    let threads = threads.clamp(1, planes.max(1));
    if threads == 1 {
        for (c, plane) in out.chunks_mut(plane_len).enumerate() {
            f(c, plane);
        }
        return;
    }
    let per = planes.div_ceil(threads);
    thread::scope(|s| {
        for (t, chunk) in out.chunks_mut(per * plane_len).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (i, plane) in chunk.chunks_mut(plane_len).enumerate() {
                    f(t * per + i, plane);
                }
            });
        }
    });
}

fn check_window(kernel: usize, stride: usize) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::shape(format!("kernel size {kernel} must be odd")));
    }
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    Ok(())
}

fn check_bias(b: Option<&Param>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.dims() != [channels] {
            return Err(Error::shape(format!(
                "bias dims {:?} do not match {} output channels",
                b.dims(),
                channels
            )));
        }
    }
    Ok(())
}

/// Valid output-column range `[lo, hi)` for kernel tap `kx`: those `ox` with
/// `0 <= ox*stride + kx - pad < in_len`.
#[inline]
fn tap_range(kx: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox*stride + kx - pad <= in_len - 1
    let hi = if in_len + pad <= kx {
        0
    } else {
        ((in_len - 1 + pad - kx) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Accumulates `wv * x` for one kernel tap into an output plane.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap(
    out: &mut [f32],
    x: &[f32],
    wv: f32,
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) {
    let (ylo, yhi) = tap_range(ky, pad, stride, h, ho);
    let (xlo, xhi) = tap_range(kx, pad, stride, w, wo);
    if xlo >= xhi {
        return;
    }
    for oy in ylo..yhi {
        let iy = oy * stride + ky - pad;
        let in_row = &x[iy * w..(iy + 1) * w];
        let out_row = &mut out[oy * wo + xlo..oy * wo + xhi];
        if stride == 1 {
            let ix0 = xlo + kx - pad;
            for (o, &v) in out_row.iter_mut().zip(&in_row[ix0..ix0 + (xhi - xlo)]) {
                *o += wv * v;
            }
        } else {
            for (i, o) in out_row.iter_mut().enumerate() {
                *o += wv * in_row[(xlo + i) * stride + kx - pad];
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Param, b: Option<&Param>, stride: usize) -> Result<Tensor> {
    conv2d_par(x, w, b, stride, 1)
}

/// Dense 2-D convolution with weights `(co, ci, k, k)`.
pub fn conv2d_par(
    x: &Tensor,
    w: &Param,
    b: Option<&Param>,
    stride: usize,
    threads: usize,
) -> Result<Tensor> {
    let &[co, ci, kh, kw] = w.dims() else {
        return Err(Error::shape(format!("conv weight must be 4-D, got {:?}", w.dims())));
    };
    if kh != kw {
        return Err(Error::shape(format!("conv kernel must be square, got {kh}x{kw}")));
    }
    if x.c() != ci {
        return Err(Error::shape(format!(
            "conv expects {} input channels, input {} has {}",
            ci,
            x.shape(),
            x.c()
        )));
    }
    let k = kh;
    check_window(k, stride)?;
    check_bias(b, co)?;
    let Shape { n, h, w: wd, .. } = x.shape();
    let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
    let pad = (k - 1) / 2;
    let out_plane = ho * wo;
    let mut out = vec![0.0f32; n * co * out_plane];
    let wdata = w.data();
    for (ni, out_n) in out.chunks_mut(co * out_plane.max(1)).enumerate().take(n) {
        for_each_plane(out_n, out_plane, threads, |oc, plane| {
            plane.fill(b.map_or(0.0, |b| b.data()[oc]));
            for ic in 0..ci {
                let xin = x.plane(ni, ic);
                let wbase = (oc * ci + ic) * k * k;
                if k == 1 && stride == 1 {
                    let wv = wdata[wbase];
                    for (o, &v) in plane.iter_mut().zip(xin) {
                        *o += wv * v;
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdata[wbase + ky * k + kx];
                        accumulate_tap(plane, xin, wv, ky, kx, pad, stride, (h, wd), (ho, wo));
                    }
                }
            }
        });
    }
    Tensor::new((n, co, ho, wo), out)
}

pub fn depthwise_conv2d(x: &Tensor, w: &Param, b: Option<&Param>, stride: usize) -> Result<Tensor> {
    depthwise_conv2d_par(x, w, b, stride, 1)
}

/// Per-channel spatial convolution with weights `(c, 1, k, k)`.
pub fn depthwise_conv2d_par(
    x: &Tensor,
    w: &Param,
    b: Option<&Param>,
    stride: usize,
    threads: usize,
) -> Result<Tensor> {
    let &[c, one, kh, kw] = w.dims() else {
        return Err(Error::shape(format!(
            "depthwise weight must be 4-D, got {:?}",
            w.dims()
        )));
    };
    if one != 1 || kh != kw {
        return Err(Error::shape(format!(
            "depthwise weight must be (c, 1, k, k), got {:?}",
            w.dims()
        )));
    }
    if x.c() != c {
        return Err(Error::shape(format!(
            "depthwise conv has {} channels, input {} has {}",
            c,
            x.shape(),
            x.c()
        )));
    }
    let k = kh;
    check_window(k, stride)?;
    check_bias(b, c)?;
    let Shape { n, h, w: wd, .. } = x.shape();
    let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
    let pad = (k - 1) / 2;
    let mut out = vec![0.0f32; n * c * ho * wo];
    let wdata = w.data();
    for_each_plane(&mut out, ho * wo, threads, |plane_idx, plane| {
        let (ni, ch) = (plane_idx / c, plane_idx % c);
        plane.fill(b.map_or(0.0, |b| b.data()[ch]));
        let xin = x.plane(ni, ch);
        for ky in 0..k {
            for kx in 0..k {
                let wv = wdata[ch * k * k + ky * k + kx];
                accumulate_tap(plane, xin, wv, ky, kx, pad, stride, (h, wd), (ho, wo));
            }
        }
    });
    Tensor::new((n, c, ho, wo), out)
}

/// Dense layer with weights `(out, in)`; each batch item is flattened to
/// `c·h·w` features. Output shape is `(n, out, 1, 1)`.
pub fn fully_connected(x: &Tensor, w: &Param, b: Option<&Param>) -> Result<Tensor> {
    let &[outf, inf] = w.dims() else {
        return Err(Error::shape(format!("fc weight must be 2-D, got {:?}", w.dims())));
    };
    let Shape { n, c, h, w: wd } = x.shape();
    if c * h * wd != inf {
        return Err(Error::shape(format!(
            "fc expects {} input features, input {} flattens to {}",
            inf,
            x.shape(),
            c * h * wd
        )));
    }
    check_bias(b, outf)?;
    let mut out = Vec::with_capacity(n * outf);
    for row in x.data().chunks(inf.max(1)).take(n) {
        for o in 0..outf {
            let wrow = &w.data()[o * inf..(o + 1) * inf];
            let dot: f32 = wrow.iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(b.map_or(0.0, |b| b.data()[o]) + dot);
        }
    }
    Tensor::new((n, outf, 1, 1), out)
}

/// Max pooling; padded sites never win.
pub fn max_pool(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    check_window(kernel, stride)?;
    let Shape { n, c, h, w } = x.shape();
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let pad = (kernel - 1) / 2;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for ni in 0..n {
        for ch in 0..c {
            let p = x.plane(ni, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            m = m.max(p[iy as usize * w + ix as usize]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new((n, c, ho, wo), out)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let Shape { n, c, h, w } = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("global average pool over empty spatial extent"));
    }
    let area = (h * w) as f64;
    let data = (0..n * c)
        .map(|i| {
            let p = x.plane(i / c, i % c);
            (p.iter().map(|&v| v as f64).sum::<f64>() / area) as f32
        })
        .collect();
    Tensor::new((n, c, 1, 1), data)
}

pub fn upsample_nearest_2x(x: &Tensor) -> Tensor {
    let Shape { n, c, h, w } = x.shape();
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in x.data().chunks(h * w).take(n * c) {
        for row in plane.chunks(w) {
            let doubled: Vec<f32> = row.iter().flat_map(|&v| [v, v]).collect();
            out.extend_from_slice(&doubled);
            out.extend_from_slice(&doubled);
        }
    }
    Tensor::new((n, c, 2 * h, 2 * w), out).expect("upsample shape")
}

/// Interleaves channel groups: output channel `j·groups + g` reads input
/// channel `g·(c/groups) + j`.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let Shape { n, c, .. } = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!(
            "{c} channels not divisible into {groups} groups"
        )));
    }
    let per = c / groups;
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        for oc in 0..c {
            let (j, g) = (oc / groups, oc % groups);
            out.extend_from_slice(x.plane(ni, g * per + j));
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn channel_split(x: &Tensor, split: usize, part: SplitPart) -> Result<Tensor> {
    let Shape { n, c, h, w } = x.shape();
    if split == 0 || split >= c {
        return Err(Error::shape(format!("split point {split} outside (0, {c})")));
    }
    let range = match part {
        SplitPart::Lower => 0..split,
        SplitPart::Upper => split..c,
    };
    let oc = range.len();
    let mut out = Vec::with_capacity(n * oc * h * w);
    for ni in 0..n {
        for ch in range.clone() {
            out.extend_from_slice(x.plane(ni, ch));
        }
    }
    Tensor::new((n, oc, h, w), out)
}

/// Channel-axis concatenation.
pub fn concat(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    for t in xs {
        let s = t.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(format!(
                "concat operand shapes differ: {} vs {}",
                first, s
            )));
        }
    }
    let c: usize = xs.iter().map(|t| t.c()).sum();
    let mut out = Vec::with_capacity(first.n * c * first.plane());
    for ni in 0..first.n {
        for t in xs {
            let block = t.c() * first.plane();
            out.extend_from_slice(&t.data()[ni * block..(ni + 1) * block]);
        }
    }
    Tensor::new((first.n, c, first.h, first.w), out)
}

fn zip_same(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what} operand shapes differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "mul", |x, y| x * y)
}

/// `x + v`, with `v` of shape `(n, c, 1, 1)` replicated over every site.
pub fn broadcast_add(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if v.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::shape(format!(
            "broadcast operand must be ({}, {}, 1, 1), got {}",
            s.n,
            s.c,
            v.shape()
        )));
    }
    let p = s.plane();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| a + v.data()[i / p.max(1)])
        .collect();
    Tensor::new(s, data)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Numerically stable softmax along `axis` (1 = channels, 2 = rows, 3 = columns).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let Shape { n, c, h, w } = x.shape();
    let (len, stride) = match axis {
        1 => (c, h * w),
        2 => (h, w),
        3 => (w, 1),
        _ => return Err(Error::shape(format!("softmax axis {axis} must be 1, 2 or 3"))),
    };
    let mut out = x.data().to_vec();
    let outer = n * c * h * w / (len * stride).max(1);
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            let idx = |i: usize| base + i * stride;
            let m = (0..len).map(|i| out[idx(i)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for i in 0..len {
                let e = (out[idx(i)] - m).exp();
                out[idx(i)] = e;
                sum += e;
            }
            for i in 0..len {
                out[idx(i)] /= sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(c: usize) -> Tensor {
        Tensor::from_fn((1, c, 2, 2), |_, c, _, _| c as f32)
    }

    fn channel_tags(t: &Tensor) -> Vec<usize> {
        (0..t.c()).map(|c| t.at(0, c, 0, 0) as usize).collect()
    }

    #[test]
    fn conv_identity_1x1() {
        let x = Tensor::from_fn((2, 3, 4, 5), |n, c, y, x| (n + 2 * c + 3 * y) as f32 - x as f32);
        let mut w = Param::zeros(vec![3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Param::zeros(vec![3]);
        assert!(conv2d(&x, &w, Some(&b), 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn conv_all_ones_window_counts() {
        // 2 channels of ones; a 3x3 all-ones kernel sums 18 taps inside and
        // 2 * 4 taps at a corner.
        let x = Tensor::full((1, 2, 4, 4), 1.0);
        let w = Param::full(vec![1, 2, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(y.at(0, 0, 1, 1), 18.0);
        assert_eq!(y.at(0, 0, 2, 2), 18.0);
        assert_eq!(y.at(0, 0, 0, 0), 8.0);
        assert_eq!(y.at(0, 0, 3, 3), 8.0);
        assert_eq!(y.at(0, 0, 0, 1), 12.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros((1, 3, 4, 4));
        let w = Param::zeros(vec![2, 4, 3, 3]);
        let err = conv2d(&x, &w, None, 1).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let x = Tensor::from_fn((1, 3, 5, 6), |_, c, y, x| (c * 30 + y * 6 + x) as f32);
        let mut w = Param::zeros(vec![3, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 9 + 4] = 1.0;
        }
        assert!(depthwise_conv2d(&x, &w, None, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn depthwise_5x5_interior_sum() {
        let x = Tensor::full((1, 2, 9, 9), 2.0);
        let w = Param::full(vec![2, 1, 5, 5], 1.0);
        let y = depthwise_conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y.at(0, 0, 4, 4), 50.0);
        assert_eq!(y.at(0, 1, 2, 2), 50.0);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let x = Tensor::from_fn((1, 2, 6, 6), |_, c, y, x| {
            if c == 0 {
                0.0
            } else {
                (y * x) as f32 + 1.0
            }
        });
        let w = Param::full(vec![2, 1, 3, 3], 0.7);
        let y = depthwise_conv2d(&x, &w, None, 2).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.0));
        assert!(y.plane(0, 1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let x = Tensor::zeros((1, 3, 4, 4));
        let w = Param::zeros(vec![4, 1, 3, 3]);
        assert!(depthwise_conv2d(&x, &w, None, 1).is_err());
    }

    #[test]
    fn shuffle_interleaves_groups() {
        let y = channel_shuffle(&tagged(8), 2).unwrap();
        assert_eq!(channel_tags(&y), [0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn shuffle_c4_g2_is_involution_and_g1_identity() {
        let x = tagged(4);
        let twice = channel_shuffle(&channel_shuffle(&x, 2).unwrap(), 2).unwrap();
        assert!(twice.bit_eq(&x));
        assert!(channel_shuffle(&tagged(6), 1).unwrap().bit_eq(&tagged(6)));
    }

    #[test]
    fn shuffle_rejects_indivisible() {
        assert!(channel_shuffle(&tagged(6), 4).is_err());
    }

    #[test]
    fn global_avg_pool_means() {
        let c = Tensor::full((1, 3, 5, 7), 3.25);
        let g = global_avg_pool(&c).unwrap();
        assert_eq!(g.shape(), Shape::new(1, 3, 1, 1));
        assert!(g.data().iter().all(|&v| v == 3.25));

        let q = Tensor::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&q).unwrap().data(), [2.5]);

        let one = Tensor::from_fn((2, 3, 1, 1), |n, c, _, _| (n * 3 + c) as f32 - 1.5);
        assert!(global_avg_pool(&one).unwrap().bit_eq(&one));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new((1, 1, 1, 1), vec![4.5]).unwrap();
        assert_eq!(upsample_nearest_2x(&x).data(), [4.5; 4]);

        let x = Tensor::from_fn((2, 3, 3, 4), |n, c, y, x| (n * 7 + c * 5 + y * 3 + x) as f32 * 0.25);
        let y = upsample_nearest_2x(&x);
        assert_eq!(y.shape(), Shape::new(2, 3, 6, 8));
        assert_eq!(y.sum(), 4.0 * x.sum());
        // 2x2 mean pooling recovers the input.
        let back = Tensor::from_fn(x.shape(), |n, c, r, q| {
            (y.at(n, c, 2 * r, 2 * q)
                + y.at(n, c, 2 * r + 1, 2 * q)
                + y.at(n, c, 2 * r, 2 * q + 1)
                + y.at(n, c, 2 * r + 1, 2 * q + 1))
                / 4.0
        });
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn max_pool_ignores_padding() {
        let x = Tensor::full((1, 1, 4, 4), -3.0);
        let y = max_pool(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn softmax_along_channels_sums_to_one() {
        let x = Tensor::from_fn((2, 5, 2, 3), |n, c, y, x| (n + c * y) as f32 - x as f32 * 0.3);
        let s = softmax(&x, 1).unwrap();
        for n in 0..2 {
            for y in 0..2 {
                for xx in 0..3 {
                    let t: f32 = (0..5).map(|c| s.at(n, c, y, xx)).sum();
                    assert!((t - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn broadcast_add_replicates_vector() {
        let x = Tensor::zeros((1, 2, 3, 3));
        let v = Tensor::new((1, 2, 1, 1), vec![1.5, -2.0]).unwrap();
        let y = broadcast_add(&x, &v).unwrap();
        assert!(y.plane(0, 0).iter().all(|&a| a == 1.5));
        assert!(y.plane(0, 1).iter().all(|&a| a == -2.0));
        assert!(broadcast_add(&x, &Tensor::zeros((1, 3, 1, 1))).is_err());
    }

    #[test]
    fn parallel_conv_is_bit_identical() {
        let x = Tensor::from_fn((1, 6, 11, 9), |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 13) as f32 / 13.0 - 0.5);
        let w = Param::new(
            vec![10, 6, 3, 3],
            (0..540).map(|i| ((i * 17) % 23) as f32 / 23.0 - 0.5).collect(),
        )
        .unwrap();
        let a = conv2d_par(&x, &w, None, 2, 1).unwrap();
        for threads in [2, 3, 8, 64] {
            assert!(conv2d_par(&x, &w, None, 2, threads).unwrap().bit_eq(&a));
        }
    }
}
