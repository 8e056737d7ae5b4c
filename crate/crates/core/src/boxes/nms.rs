use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{iou, BBox, BoxList};

/// Greedy hard NMS. Returns kept indices in descending score order; a box
/// is suppressed when its IoU with a kept box exceeds `iou_thresh`. Equal
/// scores are visited in index order.
pub fn hard_nms(boxes: &[BBox], scores: &[f32], iou_thresh: f32) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SoftNmsMethod {
    /// `s ← s · exp(−IoU² / σ)`
    Gaussian { sigma: f32 },
    /// `s ← s · (1 − IoU)` when `IoU > iou_thresh`.
    Linear { iou_thresh: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftNmsConfig {
    pub method: SoftNmsMethod,
    /// Boxes whose score falls below this are dropped.
    pub score_floor: f32,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        SoftNmsConfig {
            method: SoftNmsMethod::Gaussian { sigma: 0.5 },
            score_floor: 1e-3,
        }
    }
}

impl SoftNmsMethod {
    fn decay(&self, overlap: f32) -> f32 {
        match *self {
            SoftNmsMethod::Gaussian { sigma } => (-(overlap * overlap) / sigma).exp(),
            SoftNmsMethod::Linear { iou_thresh } => {
                if overlap > iou_thresh {
                    1.0 - overlap
                } else {
                    1.0
                }
            }
        }
    }
}

/// Soft-NMS applied independently per label. Output is sorted by
/// descending score.
pub fn soft_nms(dets: &BoxList, cfg: &SoftNmsConfig) -> BoxList {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dets.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut out = BoxList::with_capacity(dets.len());
    for (label, idx) in by_label {
        let mut live: Vec<(BBox, f32)> = idx
            .iter()
            .map(|&i| (dets.boxes[i], dets.scores[i]))
            .filter(|&(_, s)| s >= cfg.score_floor)
            .collect();
        while !live.is_empty() {
            // Highest score; earliest wins ties.
            let best = (0..live.len())
                .reduce(|a, b| if live[b].1 > live[a].1 { b } else { a })
                .expect("non-empty");
            let (bb, bs) = live.remove(best);
            out.push(bb, bs, label);
            for d in live.iter_mut() {
                d.1 *= cfg.method.decay(iou(&bb, &d.0));
            }
            live.retain(|&(_, s)| s >= cfg.score_floor);
        }
    }
    out.sort_by_score();
    out
}
