//! End-to-end detection: preprocessing, the whole-image graph, proposal
//! selection, PSRoI align, the R-CNN subnet and detection assembly.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxes::{
    assemble_detections, generate_anchors, select_proposals, AnchorConfig, BBox, BoxList, DetectionConfig,
    ProposalConfig,
};
use crate::engine::{validate_weights, ExecConfig, Executor, Graph, Tensor};
use crate::error::{Error, Result};
use crate::head::{
    build_detector_graph, build_rcnn_graph, psroi_align, rcnn_run, roles, rpn_anchor_deltas, rpn_objectness,
    weights_for, HeadConfig, PsRoiStats,
};
use crate::model_io::{random_init, WeightStore};
use crate::snet::{SnetVariant, IMAGE_INPUT};

/// Magic bytes of the raw tensor image format.
pub const RAW_MAGIC: &[u8; 4] = b"RTNS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Images are resized to `input_size × input_size` without keeping the
    /// aspect ratio.
    pub input_size: usize,
    /// Per-channel mean and std applied after scaling pixels to [0, 1].
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            input_size: 320,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub preprocess: PreprocessConfig,
    pub anchors: AnchorConfig,
    pub proposals: ProposalConfig,
    pub detection: DetectionConfig,
}

impl DetectorConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// An RGB image as `(3, h, w)` floats in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "image {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    /// Decodes a raster file (PNG / JPEG) or a raw tensor file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut head = [0u8; 4];
        let n = std::fs::File::open(path)?.read(&mut head)?;
        if n == 4 && &head == RAW_MAGIC {
            return Self::from_raw(&std::fs::read(path)?);
        }
        let img = image::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(w, h, data)
    }

    /// Raw format: magic `RTNS`, then `c`, `h`, `w` as little-endian u32
    /// (`c` must be 3), then `c·h·w` little-endian f32 values in CHW order.
    pub fn from_raw(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
            return Err(fmt(0, "not a raw tensor file".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (c, h, w) = (u(0), u(1), u(2));
        if c != 3 {
            return Err(fmt(4, format!("expected 3 channels, got {c}")));
        }
        let want = c.checked_mul(h).and_then(|v| v.checked_mul(w)).and_then(|v| v.checked_mul(4));
        if want != Some(bytes.len() - 16) {
            return Err(fmt(16, format!("payload of {} bytes does not hold {c}x{h}x{w} floats", bytes.len() - 16)));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(w, h, data)
    }

    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(RAW_MAGIC);
        for v in [3, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Bilinear resize with half-pixel centers, then normalization, giving a
/// `(1, 3, size, size)` tensor.
pub fn preprocess(img: &Image, cfg: &PreprocessConfig) -> Result<Tensor> {
    let s = cfg.input_size;
    if s == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    let axis = |src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f32 / s as f32;
        (0..s)
            .map(|o| {
                let p = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (p.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, p - i0 as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(img.height), axis(img.width));
    let (w, plane) = (img.width, img.width * img.height);
    Tensor::new(
        (1, 3, s, s),
        (0..3)
            .flat_map(|c| {
                let src = &img.data[c * plane..(c + 1) * plane];
                let (m, sd) = (cfg.mean[c], cfg.std[c]);
                let xs = &xs;
                ys.iter().flat_map(move |&(y0, y1, ty)| {
                    xs.iter().map(move |&(x0, x1, tx)| {
                        let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                        let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                        ((top * (1.0 - ty) + bot * ty) - m) / sd
                    })
                })
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub preprocess_ms: f64,
    pub backbone_ms: f64,
    pub head_ms: f64,
    pub postprocess_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Detections {
    /// Boxes in original-image pixels, best first. Labels are class ids
    /// `1..=num_classes`.
    pub boxes: BoxList,
    pub num_proposals: usize,
    pub psroi: PsRoiStats,
    pub timing: StageTiming,
}

/// Whole-image feature maps of one forward pass, keyed by output role.
pub type FeatureMaps = BTreeMap<String, Tensor>;

/// A built detector: graphs plus weights.
pub struct Detector {
    variant: SnetVariant,
    head: HeadConfig,
    cfg: DetectorConfig,
    graph: Graph,
    rcnn: Graph,
    weights: WeightStore,
    rcnn_weights: WeightStore,
    anchors: Vec<BBox>,
    exec: ExecConfig,
}

/// Both graphs making up a detector: the whole-image graph and the per-RoI
/// R-CNN graph.
pub fn detector_graphs(variant: SnetVariant, head: &HeadConfig) -> Result<(Graph, Graph)> {
    Ok((build_detector_graph(variant, head)?, build_rcnn_graph(head)?))
}

/// Seeded random weights for every parameterized node of the detector.
pub fn random_detector_weights(variant: SnetVariant, head: &HeadConfig, seed: u64) -> Result<WeightStore> {
    let (g, r) = detector_graphs(variant, head)?;
    let mut ws = random_init(&g, seed);
    ws.extend(random_init(&r, seed));
    Ok(ws)
}

impl Detector {
    /// Checks `weights` against both graphs. Every entry must belong to a
    /// node; a missing, misshapen or unknown entry is an error.
    pub fn new(variant: SnetVariant, head: HeadConfig, weights: &WeightStore, cfg: DetectorConfig) -> Result<Self> {
        if cfg.anchors.anchors_per_location() != head.anchors_per_location {
            return Err(Error::Config(format!(
                "anchor config yields {} anchors per location, head expects {}",
                cfg.anchors.anchors_per_location(),
                head.anchors_per_location
            )));
        }
        let (graph, rcnn) = detector_graphs(variant, &head)?;
        let det_w = weights_for(&graph, weights)?;
        let rcnn_w = weights_for(&rcnn, weights)?;
        validate_weights(&graph, &det_w)?;
        validate_weights(&rcnn, &rcnn_w)?;
        if det_w.len() + rcnn_w.len() != weights.len() {
            let extra = weights
                .iter()
                .map(|(k, _)| k)
                .find(|k| det_w.get(k).is_none() && rcnn_w.get(k).is_none())
                .expect("some entry is unused");
            let node = extra.rsplit_once('.').map_or(extra.as_str(), |p| p.0);
            return Err(Error::Weight {
                node: node.to_string(),
                msg: format!("weight entry `{extra}` does not belong to {variant}"),
            });
        }
        let stride = head.feature_stride;
        let s = cfg.preprocess.input_size;
        let feat = s.div_ceil(stride);
        let anchors = generate_anchors(&cfg.anchors, feat, feat);
        Ok(Detector {
            variant,
            head,
            cfg,
            graph,
            rcnn,
            weights: det_w,
            rcnn_weights: rcnn_w,
            anchors,
            exec: ExecConfig::default(),
        })
    }

    pub fn with_random_weights(variant: SnetVariant, head: HeadConfig, seed: u64, cfg: DetectorConfig) -> Result<Self> {
        let ws = random_detector_weights(variant, &head, seed)?;
        Self::new(variant, head, &ws, cfg)
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.exec.threads = threads.max(1);
    }

    pub fn variant(&self) -> SnetVariant {
        self.variant
    }

    pub fn head(&self) -> &HeadConfig {
        &self.head
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn rcnn_graph(&self) -> &Graph {
        &self.rcnn
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    /// Runs the whole-image graph. Returns its outputs and the time spent in
    /// backbone nodes versus the rest.
    fn run_graph(&self, input: Tensor) -> Result<(FeatureMaps, f64, f64)> {
        let first_head = self
            .graph
            .nodes()
            .iter()
            .position(|n| n.id.starts_with("cem."))
            .expect("detector graph has a CEM");
        let start = Instant::now();
        let mut split = None;
        let out = Executor::new(&self.graph, &self.weights, self.exec)?.run_traced(
            BTreeMap::from([(IMAGE_INPUT.to_string(), input)]),
            |i, _| {
                if i + 1 == first_head {
                    split = Some(start.elapsed());
                }
            },
        )?;
        let total = start.elapsed();
        let split = split.unwrap_or(total);
        Ok((out, ms(split), ms(total - split)))
    }

    /// Feature maps for an already preprocessed `(1, 3, s, s)` input.
    pub fn features(&self, input: Tensor) -> Result<FeatureMaps> {
        Ok(self.run_graph(input)?.0)
    }

    /// Proposals for the given feature maps, in input-tensor pixels.
    pub fn proposals(&self, maps: &FeatureMaps) -> Result<Vec<crate::boxes::RoI>> {
        let a = self.head.anchors_per_location;
        let obj = rpn_objectness(&maps[roles::RPN_CLS], a)?;
        let deltas = rpn_anchor_deltas(&maps[roles::RPN_REG], a)?;
        if obj.len() != self.anchors.len() {
            return Err(Error::shape(format!(
                "rpn grid yields {} anchors, expected {}",
                obj.len(),
                self.anchors.len()
            )));
        }
        let s = self.cfg.preprocess.input_size as f32;
        Ok(select_proposals(&self.anchors, &obj, &deltas, (s, s), &self.cfg.proposals))
    }

    /// Detections for a preprocessed input, in input-tensor pixels.
    pub fn detect_tensor(&self, input: Tensor) -> Result<Detections> {
        let (maps, backbone_ms, graph_head_ms) = self.run_graph(input)?;
        let t = Instant::now();
        let rois = self.proposals(&maps)?;
        let mut post = ms(t.elapsed());
        let mut det = Detections {
            num_proposals: rois.len(),
            ..Detections::default()
        };
        let mut head_ms = graph_head_ms;
        if !rois.is_empty() {
            let t = Instant::now();
            let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
            let (feat, stats) = psroi_align(&maps[roles::F_SAM], &boxes, &self.head.psroi())?;
            let out = rcnn_run(&self.rcnn, &self.rcnn_weights, &feat, self.exec)?;
            head_ms += ms(t.elapsed());
            let t = Instant::now();
            let s = self.cfg.preprocess.input_size as f32;
            det.boxes = assemble_detections(
                out.class_scores.data(),
                self.head.num_labels(),
                &out.deltas(),
                &rois,
                (s, s),
                &self.cfg.detection,
            );
            det.psroi = stats;
            post += ms(t.elapsed());
        }
        det.timing = StageTiming {
            preprocess_ms: 0.0,
            backbone_ms,
            head_ms,
            postprocess_ms: post,
        };
        Ok(det)
    }

    /// Full pipeline on an image; boxes come back in its own pixel frame.
    pub fn detect(&self, img: &Image) -> Result<Detections> {
        let t = Instant::now();
        let input = preprocess(img, &self.cfg.preprocess)?;
        let pre = ms(t.elapsed());
        let mut det = self.detect_tensor(input)?;
        let t = Instant::now();
        let s = self.cfg.preprocess.input_size as f32;
        let (sx, sy) = (img.width as f32 / s, img.height as f32 / s);
        let (w, h) = (img.width as f32, img.height as f32);
        for b in &mut det.boxes.boxes {
            *b = b.scale(sx, sy).clip(w, h);
        }
        det.timing.preprocess_ms = pre;
        det.timing.postprocess_ms += ms(t.elapsed());
        Ok(det)
    }
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionRecord {
    /// `[x, y, width, height]` in image pixels.
    pub bbox: [f32; 4],
    pub score: f32,
    pub category_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionResult {
    pub image_id: String,
    pub detections: Vec<DetectionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<StageTiming>,
}

impl DetectionResult {
    pub fn new(image_id: impl Into<String>, det: &Detections, with_timing: bool) -> Self {
        DetectionResult {
            image_id: image_id.into(),
            detections: det
                .boxes
                .iter()
                .map(|(b, score, label)| DetectionRecord {
                    bbox: [b.x1, b.y1, b.width(), b.height()],
                    score,
                    category_id: label,
                })
                .collect(),
            timing: with_timing.then_some(det.timing),
        }
    }
}
