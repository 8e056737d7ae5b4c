use serde::{Deserialize, Serialize};

use super::{decode_box, hard_nms, soft_nms, BBox, BoxList, RoI, SoftNmsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub pre_nms_top_k: usize,
    pub nms_iou: f32,
    /// Boxes with a side shorter than this (after clipping) are dropped.
    pub min_size: f32,
    pub post_nms_top_k: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_k: 1000,
            nms_iou: 0.7,
            min_size: 4.0,
            post_nms_top_k: 200,
        }
    }
}

/// Turns per-anchor objectness and deltas into at most
/// `post_nms_top_k` RoIs, best first.
///
/// Steps: decode every anchor, clip to the image, drop small boxes, keep
/// the `pre_nms_top_k` highest-scoring (lower anchor index wins ties), hard
/// NMS, truncate.
pub fn select_proposals(
    anchors: &[BBox],
    objectness: &[f32],
    deltas: &[[f32; 4]],
    image_size: (f32, f32),
    cfg: &ProposalConfig,
) -> Vec<RoI> {
    assert_eq!(anchors.len(), objectness.len(), "one score per anchor");
    assert_eq!(anchors.len(), deltas.len(), "one delta per anchor");
    let (iw, ih) = image_size;
    let mut cand: Vec<(usize, BBox)> = anchors
        .iter()
        .zip(deltas)
        .enumerate()
        .map(|(i, (a, d))| (i, decode_box(a, *d).clip(iw, ih)))
        .filter(|(_, b)| b.width() >= cfg.min_size && b.height() >= cfg.min_size)
        .collect();
    // Stable sort: equal scores stay in anchor order.
    cand.sort_by(|a, b| objectness[b.0].total_cmp(&objectness[a.0]));
    cand.truncate(cfg.pre_nms_top_k);

    let boxes: Vec<BBox> = cand.iter().map(|c| c.1).collect();
    let scores: Vec<f32> = cand.iter().map(|c| objectness[c.0]).collect();
    hard_nms(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .take(cfg.post_nms_top_k)
        .map(|k| RoI {
            bbox: boxes[k],
            score: scores[k],
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Minimum class probability for a (RoI, class) pair to be considered.
    pub score_thresh: f32,
    pub max_detections: usize,
    pub soft_nms: SoftNmsConfig,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            score_thresh: 0.05,
            max_detections: 100,
            soft_nms: SoftNmsConfig::default(),
        }
    }
}

/// Builds final detections from per-RoI class probabilities (row-major,
/// `num_labels` columns with column 0 the background) and class-agnostic box
/// deltas. Labels in the result are column indices `1..num_labels`. Refined
/// boxes with zero area after clipping are dropped.
pub fn assemble_detections(
    class_scores: &[f32],
    num_labels: usize,
    box_deltas: &[[f32; 4]],
    rois: &[RoI],
    image_size: (f32, f32),
    cfg: &DetectionConfig,
) -> BoxList {
    assert_eq!(class_scores.len(), rois.len() * num_labels, "scores not aligned with rois");
    assert_eq!(box_deltas.len(), rois.len(), "deltas not aligned with rois");
    let (iw, ih) = image_size;
    let mut cand = BoxList::new();
    for (r, roi) in rois.iter().enumerate() {
        let row = &class_scores[r * num_labels..(r + 1) * num_labels];
        let refined = decode_box(&roi.bbox, box_deltas[r]).clip(iw, ih);
        // Boxes that end up entirely outside the image are not detections.
        if refined.area() <= 0.0 {
            continue;
        }
        for (label, &p) in row.iter().enumerate().skip(1) {
            if p > cfg.score_thresh {
                cand.push(refined, p, label);
            }
        }
    }
    let mut out = soft_nms(&cand, &cfg.soft_nms);
    out.truncate(cfg.max_detections);
    out
}
