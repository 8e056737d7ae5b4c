//! Helpers shared by integration test targets.

#![allow(dead_code)]

use snetdet::boxes::BBox;
use snetdet::engine::Tensor;

pub const DENSE: usize = 64;

/// Edge-extended bilinear lookup, written independently of the library.
pub fn sample(f: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (f.h() as f64, f.w() as f64);
    let y = y.max(0.0).min(h - 1.0);
    let x = x.max(0.0).min(w - 1.0);
    let (fy, fx) = (y.floor(), x.floor());
    let (ty, tx) = (y - fy, x - fx);
    let (r0, c0) = (fy as usize, fx as usize);
    let r1 = if r0 + 1 < f.h() { r0 + 1 } else { r0 };
    let c1 = if c0 + 1 < f.w() { c0 + 1 } else { c0 };
    let v = |r, cc| f.at(0, c, r, cc) as f64;
    v(r0, c0) * (1.0 - ty) * (1.0 - tx) + v(r0, c1) * (1.0 - ty) * tx + v(r1, c0) * ty * (1.0 - tx) + v(r1, c1) * ty * tx
}

pub fn oracle(f: &Tensor, roi: &BBox, alpha: usize, p: usize, stride: f64) -> Vec<f32> {
    let rw = (roi.width() as f64).max(1.0);
    let rh = (roi.height() as f64).max(1.0);
    let mut out = vec![0.0; alpha * p * p];
    for a in 0..alpha {
        for i in 0..p {
            for j in 0..p {
                let c = (i * p + j) * alpha + a;
                let mut acc = 0.0;
                for sy in 0..DENSE {
                    let py = roi.y1 as f64 + rh * (i as f64 + (sy as f64 + 0.5) / DENSE as f64) / p as f64;
                    for sx in 0..DENSE {
                        let px = roi.x1 as f64 + rw * (j as f64 + (sx as f64 + 0.5) / DENSE as f64) / p as f64;
                        acc += sample(f, c, py / stride - 0.5, px / stride - 0.5);
                    }
                }
                out[(a * p + i) * p + j] = (acc / (DENSE * DENSE) as f64) as f32;
            }
        }
    }
    out
}

/// A 245-channel map filled from `vals` in a fixed scrambled order.
pub fn features(h: usize, w: usize, vals: &[f32]) -> Tensor {
    Tensor::from_fn((1, 245, h, w), |_, c, y, x| vals[(c * 131 + y * 17 + x * 7) % vals.len()])
}
