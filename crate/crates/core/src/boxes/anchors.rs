use serde::{Deserialize, Serialize};

use super::BBox;

/// Anchor layout over a feature grid.
///
/// Ratios are height / width. Every anchor of scale `s` has area exactly
/// `s²`: `w = s / √r`, `h = s · √r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub scales: Vec<f32>,
    pub ratios: Vec<f32>,
    pub stride: f32,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            ratios: vec![0.5, 0.75, 1.0, 4.0 / 3.0, 2.0],
            stride: 16.0,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors for a `feat_h × feat_w` grid, ordered by row, column, scale,
/// then ratio. Anchor `a` at cell `(i, j)` has index
/// `(i·feat_w + j)·A + a` with `a = scale_index·|ratios| + ratio_index`.
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let shapes: Vec<(f64, f64)> = cfg
        .scales
        .iter()
        .flat_map(|&s| {
            cfg.ratios.iter().map(move |&r| {
                let (s, r) = (s as f64, (r as f64).sqrt());
                (s / r, s * r)
            })
        })
        .collect();
    let stride = cfg.stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * shapes.len());
    for i in 0..feat_h {
        let cy = (i as f64 + 0.5) * stride;
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BBox::new(
                    (cx - 0.5 * w) as f32,
                    (cy - 0.5 * h) as f32,
                    (cx + 0.5 * w) as f32,
                    (cy + 0.5 * h) as f32,
                ));
            }
        }
    }
    out
}
