//! Boxes, anchors, box coding, NMS and Soft-NMS, proposal selection and
//! final detection assembly.
//!
//! Boxes are `(x1, y1, x2, y2)` in input-image pixels with widths `x2 - x1`
//! (no `+1` convention).

mod anchors;
mod nms;
mod select;

use serde::{Deserialize, Serialize};

pub use anchors::{generate_anchors, AnchorConfig};
pub use nms::{hard_nms, soft_nms, SoftNmsConfig, SoftNmsMethod};
pub use select::{assemble_detections, select_proposals, DetectionConfig, ProposalConfig};

/// Largest `dw`/`dh` fed to `exp` when decoding.
pub fn max_log_scale() -> f32 {
    (1000.0f32 / 16.0).ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x1 + 0.5 * self.width(), self.y1 + 0.5 * self.height())
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1
    }

    /// Clamps all corners into `[0, width] × [0, height]`.
    pub fn clip(&self, width: f32, height: f32) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f32, sy: f32) -> BBox {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint or empty boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Applies `(dx, dy, dw, dh)` to a reference box: the center moves by
/// `(dx·w, dy·h)` and the size scales by `(e^dw, e^dh)`, with `dw`, `dh`
/// clamped to [`max_log_scale`].
pub fn decode_box(reference: &BBox, delta: [f32; 4]) -> BBox {
    let [x1, y1, x2, y2] = reference.to_array().map(f64::from);
    let (w, h) = (x2 - x1, y2 - y1);
    let [dx, dy, dw, dh] = delta.map(f64::from);
    let m = f64::from(max_log_scale());
    let (cx, cy) = (x1 + 0.5 * w + dx * w, y1 + 0.5 * h + dy * h);
    let (w, h) = (w * dw.min(m).exp(), h * dh.min(m).exp());
    BBox::new(
        (cx - 0.5 * w) as f32,
        (cy - 0.5 * h) as f32,
        (cx + 0.5 * w) as f32,
        (cy + 0.5 * h) as f32,
    )
}

/// Inverse of [`decode_box`] for unclamped deltas.
pub fn encode_box(reference: &BBox, target: &BBox) -> [f32; 4] {
    let [x1, y1, x2, y2] = reference.to_array().map(f64::from);
    let [u1, v1, u2, v2] = target.to_array().map(f64::from);
    let (w, h) = (x2 - x1, y2 - y1);
    let (tw, th) = (u2 - u1, v2 - v1);
    [
        ((u1 + 0.5 * tw) - (x1 + 0.5 * w)) / w,
        ((v1 + 0.5 * th) - (y1 + 0.5 * h)) / h,
        (tw / w).ln(),
        (th / h).ln(),
    ]
    .map(|v| v as f32)
}

pub fn decode_boxes(references: &[BBox], deltas: &[[f32; 4]]) -> Vec<BBox> {
    assert_eq!(references.len(), deltas.len(), "one delta per reference box");
    references.iter().zip(deltas).map(|(r, d)| decode_box(r, *d)).collect()
}

/// A region proposal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoI {
    pub bbox: BBox,
    pub score: f32,
}

/// Parallel arrays of boxes, scores and class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxList {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f32>,
    pub labels: Vec<usize>,
}

impl BoxList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        BoxList {
            boxes: Vec::with_capacity(n),
            scores: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, bbox: BBox, score: f32, label: usize) {
        self.boxes.push(bbox);
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn get(&self, i: usize) -> (BBox, f32, usize) {
        (self.boxes[i], self.scores[i], self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (BBox, f32, usize)> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Reorders rows by descending score; equal scores keep their order.
    pub fn sort_by_score(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        *self = order.iter().map(|&i| self.get(i)).collect();
    }

    pub fn truncate(&mut self, n: usize) {
        self.boxes.truncate(n);
        self.scores.truncate(n);
        self.labels.truncate(n);
    }
}

impl FromIterator<(BBox, f32, usize)> for BoxList {
    fn from_iter<I: IntoIterator<Item = (BBox, f32, usize)>>(iter: I) -> Self {
        let mut out = BoxList::new();
        for (b, s, l) in iter {
            out.push(b, s, l);
        }
        out
    }
}
