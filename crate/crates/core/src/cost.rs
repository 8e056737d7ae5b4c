//! Static cost analysis: MACs, parameters, output shapes and analytic
//! receptive fields, computed from the same graphs the executor runs.
//!
//! MACs are counted for convolutions and fully connected layers only:
//! conv `co·ci·k²·Ho·Wo`, depthwise `c·k²·Ho·Wo`, fc `in·out`, each times
//! the batch size. Everything else counts zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::{Graph, LayerSpec, Shape, Source};
use crate::error::{Error, Result};
use crate::head::{build_detector_graph, build_rcnn_graph, HeadConfig, ROI_INPUT};
use crate::snet::{build_snet, SnetOptions, SnetVariant};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub shape: [usize; 4],
    pub macs: u64,
    pub params: u64,
    /// Receptive field in input pixels.
    pub rf: f64,
    /// Distance in input pixels between adjacent output sites.
    pub jump: f64,
}

/// Component grouping. `backbone_cem` covers the backbone and CEM;
/// `head` covers SAM and all R-CNN instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DetectorGroups {
    pub backbone: u64,
    pub cem: u64,
    pub backbone_cem: u64,
    pub rpn: u64,
    pub sam: u64,
    pub rcnn: u64,
    pub rcnn_per_roi: u64,
    pub head: u64,
    pub total: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CostMeta {
    pub model: Option<String>,
    pub input_resolution: Option<[usize; 2]>,
    pub num_classes: Option<usize>,
    pub num_rois: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub meta: CostMeta,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    pub total_params: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<DetectorGroups>,
}

pub fn layer_macs(spec: &LayerSpec, out: Shape) -> u64 {
    let n = out.n as u64;
    let hw = (out.h * out.w) as u64;
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => n * (out_channels * in_channels * kernel * kernel) as u64 * hw,
        LayerSpec::DepthwiseConv2d { channels, kernel, .. } => n * (channels * kernel * kernel) as u64 * hw,
        LayerSpec::FullyConnected {
            in_features,
            out_features,
            ..
        } => n * (in_features * out_features) as u64,
        _ => 0,
    }
}

pub fn layer_params(spec: &LayerSpec) -> u64 {
    match spec.param_dims() {
        Some((w, b)) => {
            let count = |d: &[usize]| d.iter().product::<usize>() as u64;
            count(&w) + b.as_deref().map_or(0, count)
        }
        None => 0,
    }
}

pub fn count_params(g: &Graph) -> u64 {
    g.nodes().iter().map(|n| layer_params(&n.spec)).sum()
}

/// Receptive-field state after a node, given the merged state of its inputs
/// and the spatial size of its (first) input.
fn propagate_rf(spec: &LayerSpec, rf: f64, jump: f64, in_shape: Shape) -> (f64, f64) {
    match *spec {
        _ if spec.window().is_some() => {
            let (k, s) = spec.window().expect("checked");
            (rf + (k as f64 - 1.0) * jump, jump * s as f64)
        }
        // Global pooling behaves as a window spanning the whole map.
        LayerSpec::GlobalAvgPool => {
            let k = in_shape.h.max(in_shape.w) as f64;
            (rf + (k - 1.0) * jump, jump * k)
        }
        LayerSpec::UpsampleNearest2x => (rf, jump / 2.0),
        _ => (rf, jump),
    }
}

/// Per-node report for a graph at the given input shapes.
pub fn count_macs(g: &Graph, input_shapes: &BTreeMap<String, Shape>) -> Result<CostReport> {
    let shapes = g.infer_shapes(input_shapes)?;
    let mut rows: Vec<CostRow> = Vec::with_capacity(g.len());
    let in_shapes: Vec<Shape> = g.inputs().iter().map(|i| input_shapes[&i.name]).collect();
    for ((node, srcs), &shape) in g.nodes().iter().zip(g.sources()).zip(&shapes) {
        let (mut rf, mut jump) = (0.0f64, 0.0f64);
        for s in &srcs {
            let (r, j) = match *s {
                Source::Input(_) => (1.0, 1.0),
                Source::Node(i) => (rows[i].rf, rows[i].jump),
            };
            rf = rf.max(r);
            jump = jump.max(j);
        }
        let first_in = match srcs[0] {
            Source::Input(i) => in_shapes[i],
            Source::Node(i) => shapes[i],
        };
        let (rf, jump) = propagate_rf(&node.spec, rf, jump, first_in);
        rows.push(CostRow {
            name: node.id.clone(),
            kind: node.spec.kind_name(),
            shape: shape.dims(),
            macs: layer_macs(&node.spec, shape),
            params: layer_params(&node.spec),
            rf,
            jump,
        });
    }
    let meta = CostMeta {
        input_resolution: match in_shapes.as_slice() {
            [s] => Some([s.h, s.w]),
            _ => None,
        },
        ..CostMeta::default()
    };
    Ok(CostReport {
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_params: rows.iter().map(|r| r.params).sum(),
        rows,
        meta,
        groups: None,
    })
}

pub fn count_macs_single(g: &Graph, input: Shape) -> Result<CostReport> {
    let [inp] = g.inputs() else {
        return Err(Error::Graph(format!("graph has {} inputs, expected exactly one", g.inputs().len())));
    };
    count_macs(g, &BTreeMap::from([(inp.name.clone(), input)]))
}

/// Backbone report at `res × res`, optionally with the classification tail.
pub fn count_backbone_macs(variant: SnetVariant, res: usize, classification_tail: bool) -> Result<CostReport> {
    let g = build_snet(variant, SnetOptions { classification_tail, ..SnetOptions::default() });
    let mut r = count_macs_single(&g, (1, 3, res, res).into())?;
    r.meta.model = Some(variant.name().to_string());
    Ok(r)
}

/// Full detector cost: the whole-image graph once plus the R-CNN subnet
/// evaluated on `num_rois` RoIs.
pub fn count_detector_macs_with(
    variant: SnetVariant,
    input_res: usize,
    cfg: &HeadConfig,
    num_rois: usize,
) -> Result<CostReport> {
    let det = build_detector_graph(variant, cfg)?;
    let mut report = count_macs_single(&det, (1, 3, input_res, input_res).into())?;
    let rcnn = build_rcnn_graph(cfg)?;
    let roi_shape = Shape::new(num_rois, cfg.alpha, cfg.pool, cfg.pool);
    let per_roi = count_macs(&rcnn, &BTreeMap::from([(ROI_INPUT.to_string(), Shape::new(1, cfg.alpha, cfg.pool, cfg.pool))]))?.total_macs;
    let r = count_macs(&rcnn, &BTreeMap::from([(ROI_INPUT.to_string(), roi_shape)]))?;
    report.rows.extend(r.rows);
    report.total_macs += r.total_macs;
    report.total_params += r.total_params;

    let mut g = DetectorGroups {
        rcnn_per_roi: per_roi,
        ..DetectorGroups::default()
    };
    for row in &report.rows {
        let slot = match row.name.split('.').next().unwrap_or("") {
            "cem" => &mut g.cem,
            "rpn" => &mut g.rpn,
            "sam" => &mut g.sam,
            "rcnn" => &mut g.rcnn,
            _ => &mut g.backbone,
        };
        *slot += row.macs;
    }
    g.backbone_cem = g.backbone + g.cem;
    g.head = g.sam + g.rcnn;
    g.total = g.backbone_cem + g.rpn + g.head;
    debug_assert_eq!(g.total, report.total_macs);
    report.groups = Some(g);
    report.meta = CostMeta {
        model: Some(variant.name().to_string()),
        input_resolution: Some([input_res, input_res]),
        num_classes: Some(cfg.num_classes),
        num_rois: Some(num_rois),
    };
    Ok(report)
}

/// [`count_detector_macs_with`] using the default head for `num_classes`.
pub fn count_detector_macs(variant: SnetVariant, input_res: usize, num_classes: usize, num_rois: usize) -> Result<CostReport> {
    count_detector_macs_with(variant, input_res, &HeadConfig::new(num_classes), num_rois)
}

/// `(receptive field, jump)` at graph output role `output` (or node id),
/// using the composition rule `rf ← rf + (k−1)·jump`, `jump ← jump·s`.
/// Global pooling on the path is treated as a window over the whole map at
/// `input_shape`.
pub fn receptive_field(g: &Graph, input_shape: Shape, output: &str) -> Result<(f64, f64)> {
    let idx = g
        .output_index(output)
        .or_else(|| g.node_index(output))
        .ok_or_else(|| Error::Graph(format!("no output or node named `{output}`")))?;
    let r = count_macs_single(g, input_shape)?;
    Ok((r.rows[idx].rf, r.rows[idx].jump))
}

/// Receptive field and jump at C4 and C5 of a backbone.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackboneRf {
    pub model: String,
    pub dw_kernel: usize,
    pub c4_rf: f64,
    pub c4_jump: f64,
    pub c5_rf: f64,
    pub c5_jump: f64,
}

/// [`BackboneRf`] for `variant`, optionally forcing the depthwise kernel.
pub fn backbone_rf(variant: SnetVariant, dw_kernel: Option<usize>, res: usize) -> Result<BackboneRf> {
    let g = build_snet(variant, SnetOptions { dw_kernel, ..SnetOptions::default() });
    let shape = Shape::new(1, 3, res, res);
    let (c4_rf, c4_jump) = receptive_field(&g, shape, "C4")?;
    let (c5_rf, c5_jump) = receptive_field(&g, shape, "C5")?;
    Ok(BackboneRf {
        model: variant.name().to_string(),
        dw_kernel: dw_kernel.unwrap_or(variant.dw_kernel()),
        c4_rf,
        c4_jump,
        c5_rf,
        c5_jump,
    })
}

fn mega(v: u64) -> f64 {
    v as f64 / 1e6
}

impl CostReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned-column rendering: one line per layer, then the aggregates.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.meta.model {
            let _ = writeln!(out, "model: {m}");
        }
        if let Some([h, w]) = self.meta.input_resolution {
            let _ = writeln!(out, "input: {h}x{w}");
        }
        if let Some(c) = self.meta.num_classes {
            let _ = writeln!(out, "classes: {c}");
        }
        if let Some(r) = self.meta.num_rois {
            let _ = writeln!(out, "rois: {r}");
        }
        let shape = |s: &[usize; 4]| format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3]);
        let nw = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let kw = self.rows.iter().map(|r| r.kind.len()).max().unwrap_or(4).max(4);
        let sw = self.rows.iter().map(|r| shape(&r.shape).len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:<nw$}  {:<kw$}  {:<sw$}  {:>14}  {:>10}  {:>8}  {:>6}",
            "name", "kind", "shape", "macs", "params", "rf", "jump"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<nw$}  {:<kw$}  {:<sw$}  {:>14}  {:>10}  {:>8}  {:>6}",
                r.name,
                r.kind,
                shape(&r.shape),
                r.macs,
                r.params,
                r.rf,
                r.jump
            );
        }
        let _ = writeln!(out);
        if let Some(g) = &self.groups {
            for (label, v) in [
                ("backbone", g.backbone),
                ("cem", g.cem),
                ("backbone+cem", g.backbone_cem),
                ("rpn", g.rpn),
                ("sam", g.sam),
                ("rcnn", g.rcnn),
                ("head (sam+rcnn)", g.head),
            ] {
                let _ = writeln!(out, "{label:<16} {:>10.3} MMACs", mega(v));
            }
            let _ = writeln!(out, "{:<16} {:>10.3} MMACs", "rcnn per roi", mega(g.rcnn_per_roi));
        }
        let _ = writeln!(out, "{:<16} {:>10.3} MMACs", "total", mega(self.total_macs));
        let _ = writeln!(out, "{:<16} {:>10.3} M", "params", mega(self.total_params));
        out
    }
}
