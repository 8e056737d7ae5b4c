//! Position-sensitive RoI align.
//!
//! The RoI is split into `p × p` equal bins in image coordinates. Output
//! channel `a` of bin `(i, j)` averages input channel `(i·p + j)·alpha + a`
//! over that bin. Image pixel `x` maps to feature coordinate
//! `x / stride − 0.5`, so feature sample `k` sits at the center of the
//! `k`-th stride-sized cell. Between samples the map is interpolated
//! bilinearly; beyond the outermost samples it is extended with the edge
//! value.

use crate::boxes::BBox;
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// How each bin's average is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiSampling {
    /// Exact mean of the bilinear interpolant over the bin (closed form).
    Exact,
    /// Mean of `n × n` bilinear samples at regular offsets `(k + ½) / n`.
    Grid(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsRoiConfig {
    pub alpha: usize,
    pub pool: usize,
    pub stride: f32,
    pub sampling: RoiSampling,
}

impl Default for PsRoiConfig {
    fn default() -> Self {
        PsRoiConfig {
            alpha: 5,
            pool: 7,
            stride: 16.0,
            sampling: RoiSampling::Exact,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PsRoiStats {
    /// RoIs whose width or height was below one pixel and got widened.
    pub degenerate_rois: usize,
}

/// `∫_{-1}^{t} max(0, 1 − |s|) ds`
fn hat_integral(t: f64) -> f64 {
    if t <= -1.0 {
        0.0
    } else if t <= 0.0 {
        0.5 * (t + 1.0) * (t + 1.0)
    } else if t <= 1.0 {
        1.0 - 0.5 * (1.0 - t) * (1.0 - t)
    } else {
        1.0
    }
}

/// Per-sample weights `∫_lo^hi w_k(u) du` of the edge-extended linear
/// interpolant along one axis of length `n`.
fn axis_weights(lo: f64, hi: f64, n: usize) -> Vec<(usize, f64)> {
    let last = (n - 1) as f64;
    let mut w: Vec<(usize, f64)> = Vec::new();
    let below = hi.min(0.0) - lo;
    if below > 0.0 {
        w.push((0, below));
    }
    let (mlo, mhi) = (lo.max(0.0), hi.min(last));
    if mhi > mlo {
        let first = mlo.floor() as usize;
        let end = (mhi.ceil() as usize).min(n - 1);
        for k in first..=end {
            let v = hat_integral(mhi - k as f64) - hat_integral(mlo - k as f64);
            if v > 0.0 {
                w.push((k, v));
            }
        }
    }
    let above = hi - lo.max(last);
    if above > 0.0 {
        w.push((n - 1, above));
    }
    w
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c] as f64;
    (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1))
        + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1))
}

/// Pools every RoI to an `(alpha, p, p)` feature. Returns a tensor of shape
/// `(rois, alpha, p, p)`, in RoI order.
pub fn psroi_align(features: &Tensor, rois: &[BBox], cfg: &PsRoiConfig) -> Result<(Tensor, PsRoiStats)> {
    let (alpha, p) = (cfg.alpha, cfg.pool);
    let s = features.shape();
    if s.c != alpha * p * p {
        return Err(Error::shape(format!(
            "psroi align needs alpha·p·p = {} channels, got {}",
            alpha * p * p,
            s
        )));
    }
    if s.n != 1 {
        return Err(Error::shape(format!("psroi align expects one image, got {s}")));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("psroi align over empty feature map"));
    }
    if let RoiSampling::Grid(0) = cfg.sampling {
        return Err(Error::Config("grid sampling needs at least one sample".into()));
    }
    let mut stats = PsRoiStats::default();
    let inv = 1.0 / cfg.stride as f64;
    let mut out = vec![0.0f32; rois.len() * alpha * p * p];
    for (r, roi) in rois.iter().enumerate() {
        let (x1, y1) = (roi.x1 as f64, roi.y1 as f64);
        let (mut rw, mut rh) = (roi.width() as f64, roi.height() as f64);
        if rw < 1.0 || rh < 1.0 {
            stats.degenerate_rois += 1;
            rw = rw.max(1.0);
            rh = rh.max(1.0);
        }
        let (bw, bh) = (rw / p as f64, rh / p as f64);
        for i in 0..p {
            // Bin extent in feature coordinates.
            let ylo = (y1 + i as f64 * bh) * inv - 0.5;
            let yhi = (y1 + (i + 1) as f64 * bh) * inv - 0.5;
            for j in 0..p {
                let xlo = (x1 + j as f64 * bw) * inv - 0.5;
                let xhi = (x1 + (j + 1) as f64 * bw) * inv - 0.5;
                let group = (i * p + j) * alpha;
                match cfg.sampling {
                    RoiSampling::Exact => {
                        let wy = axis_weights(ylo, yhi, s.h);
                        let wx = axis_weights(xlo, xhi, s.w);
                        let area = (yhi - ylo) * (xhi - xlo);
                        for a in 0..alpha {
                            let plane = features.plane(0, group + a);
                            let mut acc = 0.0f64;
                            for &(ry, ay) in &wy {
                                let row = &plane[ry * s.w..(ry + 1) * s.w];
                                let inner: f64 = wx.iter().map(|&(cx, ax)| row[cx] as f64 * ax).sum();
                                acc += ay * inner;
                            }
                            out[((r * alpha + a) * p + i) * p + j] = (acc / area) as f32;
                        }
                    }
                    RoiSampling::Grid(n) => {
                        for a in 0..alpha {
                            let plane = features.plane(0, group + a);
                            let mut acc = 0.0f64;
                            for sy in 0..n {
                                let y = ylo + (yhi - ylo) * (sy as f64 + 0.5) / n as f64;
                                for sx in 0..n {
                                    let x = xlo + (xhi - xlo) * (sx as f64 + 0.5) / n as f64;
                                    acc += bilinear(plane, s.h, s.w, y, x);
                                }
                            }
                            out[((r * alpha + a) * p + i) * p + j] = (acc / (n * n) as f64) as f32;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new((rois.len(), alpha, p, p), out)?, stats))
}
