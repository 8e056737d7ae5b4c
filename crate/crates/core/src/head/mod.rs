//! Detection part: context enhancement (CEM), compressed RPN, spatial
//! attention (SAM), PSRoI align and the R-CNN subnet.
//!
//! Every learned piece is an ordinary graph node, so the same definitions
//! drive execution, weight files and cost analysis.

mod psroi;

use std::collections::BTreeMap;

use crate::engine::{ExecConfig, Executor, Graph, GraphBuilder, LayerSpec, Tensor};
use crate::error::{Error, Result};
use crate::model_io::WeightStore;
use crate::snet::{build_snet_into, SnetOptions, SnetVariant, IMAGE_INPUT};

pub use psroi::{psroi_align, PsRoiConfig, PsRoiStats, RoiSampling};

/// Graph output roles of the detector graph.
pub mod roles {
    pub const C4: &str = "C4";
    pub const C5: &str = "C5";
    pub const F_CEM: &str = "F_CEM";
    pub const F_RPN: &str = "F_RPN";
    pub const RPN_CLS: &str = "rpn_cls";
    pub const RPN_REG: &str = "rpn_reg";
    pub const F_SAM: &str = "F_SAM";
    pub const CLASS_SCORES: &str = "class_scores";
    pub const BOX_DELTAS: &str = "box_deltas";
}

/// Input name of the R-CNN graph.
pub const ROI_INPUT: &str = "roi_feat";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub alpha: usize,
    pub pool: usize,
    pub rpn_channels: usize,
    pub rpn_dw_kernel: usize,
    pub rcnn_fc: usize,
    /// Foreground classes; the classifier has one more output.
    pub num_classes: usize,
    pub anchors_per_location: usize,
    pub feature_stride: usize,
}

impl HeadConfig {
    pub fn new(num_classes: usize) -> Self {
        HeadConfig {
            alpha: 5,
            pool: 7,
            rpn_channels: 256,
            rpn_dw_kernel: 5,
            rcnn_fc: 1024,
            num_classes,
            anchors_per_location: 25,
            feature_stride: 16,
        }
    }

    pub fn voc() -> Self {
        Self::new(20)
    }

    pub fn coco() -> Self {
        Self::new(80)
    }

    /// Channels of the thin feature map, `alpha · p · p`.
    pub fn thin_channels(&self) -> usize {
        self.alpha * self.pool * self.pool
    }

    pub fn num_labels(&self) -> usize {
        self.num_classes + 1
    }

    pub fn psroi(&self) -> PsRoiConfig {
        PsRoiConfig {
            alpha: self.alpha,
            pool: self.pool,
            stride: self.feature_stride as f32,
            sampling: RoiSampling::Exact,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.alpha == 0 || self.pool == 0 || self.rpn_channels == 0 || self.rcnn_fc == 0 {
            return Err(Error::Config(format!("head widths must be positive: {self:?}")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one foreground class".into()));
        }
        if self.anchors_per_location == 0 {
            return Err(Error::Config("need at least one anchor per location".into()));
        }
        Ok(())
    }
}

/// Node ids produced by [`build_head_into`].
#[derive(Clone, Debug)]
pub struct HeadNodes {
    pub cem: String,
    pub rpn: String,
    pub rpn_cls: String,
    pub rpn_reg: String,
    pub sam: String,
}

/// CEM over `c4` and `c5` (ids in `b`); returns the `F_CEM` node id.
pub fn build_cem_into(b: &mut GraphBuilder, c4: &str, c5: &str, cfg: &HeadConfig) -> Result<String> {
    let chan = |b: &GraphBuilder, id: &str| {
        b.channels(id).ok_or_else(|| Error::Graph(format!("CEM input `{id}` is undefined")))
    };
    let (c4_ch, c5_ch) = (chan(b, c4)?, chan(b, c5)?);
    let t = cfg.thin_channels();
    let lat4 = b.add("cem.c4_lat", LayerSpec::conv(c4_ch, t, 1, 1), &[c4])?;
    let lat5 = b.add("cem.c5_lat", LayerSpec::conv(c5_ch, t, 1, 1), &[c5])?;
    let up5 = b.add("cem.c5_up", LayerSpec::UpsampleNearest2x, &[&lat5])?;
    let gap = b.add("cem.gap", LayerSpec::GlobalAvgPool, &[c5])?;
    let glb = b.add("cem.glb_fc", LayerSpec::fc(c5_ch, t), &[&gap])?;
    let sum = b.add("cem.sum", LayerSpec::ElementwiseAdd, &[&lat4, &up5])?;
    b.add("cem.out", LayerSpec::BroadcastAdd, &[&sum, &glb])
}

/// Compressed RPN over the thin map; returns `(F_RPN, cls, reg)` ids.
pub fn build_rpn_into(b: &mut GraphBuilder, f_cem: &str, cfg: &HeadConfig) -> Result<(String, String, String)> {
    let t = cfg.thin_channels();
    let a = cfg.anchors_per_location;
    let dw = b.add("rpn.dw", LayerSpec::dwconv(t, cfg.rpn_dw_kernel, 1), &[f_cem])?;
    let conv = b.add("rpn.conv", LayerSpec::conv(t, cfg.rpn_channels, 1, 1), &[&dw])?;
    let relu = b.add("rpn.relu", LayerSpec::ReLU, &[&conv])?;
    let cls = b.add("rpn.cls", LayerSpec::conv(cfg.rpn_channels, 2 * a, 1, 1), &[&relu])?;
    let reg = b.add("rpn.reg", LayerSpec::conv(cfg.rpn_channels, 4 * a, 1, 1), &[&relu])?;
    Ok((relu, cls, reg))
}

/// SAM: `f_cem ⊙ sigmoid(θ(f_rpn))`; returns the `F_SAM` id.
pub fn build_sam_into(b: &mut GraphBuilder, f_cem: &str, f_rpn: &str, cfg: &HeadConfig) -> Result<String> {
    let theta = b.add("sam.theta", LayerSpec::conv(cfg.rpn_channels, cfg.thin_channels(), 1, 1), &[f_rpn])?;
    let gate = b.add("sam.sigmoid", LayerSpec::Sigmoid, &[&theta])?;
    b.add("sam.out", LayerSpec::ElementwiseMul, &[f_cem, &gate])
}

/// CEM, RPN and SAM on top of existing backbone nodes.
pub fn build_head_into(b: &mut GraphBuilder, c4: &str, c5: &str, cfg: &HeadConfig) -> Result<HeadNodes> {
    cfg.validate()?;
    let cem = build_cem_into(b, c4, c5, cfg)?;
    let (rpn, rpn_cls, rpn_reg) = build_rpn_into(b, &cem, cfg)?;
    let sam = build_sam_into(b, &cem, &rpn, cfg)?;
    Ok(HeadNodes {
        cem,
        rpn,
        rpn_cls,
        rpn_reg,
        sam,
    })
}

/// Whole-image part of the detector: backbone, CEM, RPN and SAM.
pub fn build_detector_graph(variant: SnetVariant, cfg: &HeadConfig) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    b.input(IMAGE_INPUT, 3)?;
    let bb = build_snet_into(&mut b, variant, IMAGE_INPUT, SnetOptions::default())?;
    let h = build_head_into(&mut b, &bb.c4, &bb.c5, cfg)?;
    for (role, id) in [
        (roles::C4, &bb.c4),
        (roles::C5, &bb.c5),
        (roles::F_CEM, &h.cem),
        (roles::F_RPN, &h.rpn),
        (roles::RPN_CLS, &h.rpn_cls),
        (roles::RPN_REG, &h.rpn_reg),
        (roles::F_SAM, &h.sam),
    ] {
        b.output(role, id)?;
    }
    Ok(b.finish())
}

/// Per-RoI R-CNN subnet. Input `roi_feat` is `(R, alpha, p, p)`; outputs are
/// class probabilities `(R, C+1, 1, 1)` and deltas `(R, 4, 1, 1)`.
pub fn build_rcnn_graph(cfg: &HeadConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    b.input(ROI_INPUT, cfg.alpha)?;
    let fc = b.add("rcnn.fc", LayerSpec::fc(cfg.thin_channels(), cfg.rcnn_fc), &[ROI_INPUT])?;
    let relu = b.add("rcnn.relu", LayerSpec::ReLU, &[&fc])?;
    let cls = b.add("rcnn.cls", LayerSpec::fc(cfg.rcnn_fc, cfg.num_labels()), &[&relu])?;
    let prob = b.add("rcnn.cls_prob", LayerSpec::Softmax { axis: 1 }, &[&cls])?;
    let bbox = b.add("rcnn.bbox", LayerSpec::fc(cfg.rcnn_fc, 4), &[&relu])?;
    b.output(roles::CLASS_SCORES, &prob)?;
    b.output(roles::BOX_DELTAS, &bbox)?;
    Ok(b.finish())
}

/// Weights of `graph`'s parameterized nodes, taken from a larger store.
pub fn weights_for(graph: &Graph, all: &WeightStore) -> Result<WeightStore> {
    let mut out = WeightStore::new();
    for node in graph.parameterized_nodes() {
        let (_, bias) = node.spec.param_dims().expect("parameterized");
        let mut names = vec![WeightStore::weight_name(&node.id)];
        if bias.is_some() {
            names.push(WeightStore::bias_name(&node.id));
        }
        for name in names {
            let p = all
                .get(&name)
                .ok_or_else(|| Error::Weight { node: node.id.clone(), msg: format!("missing `{name}`") })?;
            out.insert(name, p.clone());
        }
    }
    Ok(out)
}

fn run_sub(b: GraphBuilder, weights: &WeightStore, inputs: BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    let g = b.finish();
    let ws = weights_for(&g, weights)?;
    Executor::new(&g, &ws, ExecConfig::default())?.run(inputs)
}

fn check_spatial(what: &str, a: &Tensor, b: &Tensor, factor: usize) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != factor * sb.h || sa.w != factor * sb.w {
        return Err(Error::shape(format!("{what}: spatial mismatch between {sa} and {sb}")));
    }
    Ok(())
}

/// Runs the CEM alone. `C4` must be exactly twice the spatial size of `C5`.
pub fn cem_forward(c4: &Tensor, c5: &Tensor, weights: &WeightStore, cfg: &HeadConfig) -> Result<Tensor> {
    check_spatial("cem", c4, c5, 2)?;
    let mut b = GraphBuilder::new();
    b.input(roles::C4, c4.c())?;
    b.input(roles::C5, c5.c())?;
    let out = build_cem_into(&mut b, roles::C4, roles::C5, cfg)?;
    b.output(roles::F_CEM, &out)?;
    let inputs = BTreeMap::from([(roles::C4.into(), c4.clone()), (roles::C5.into(), c5.clone())]);
    Ok(run_sub(b, weights, inputs)?.remove(roles::F_CEM).expect("declared output"))
}

#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub features: Tensor,
    pub cls_logits: Tensor,
    pub reg_deltas: Tensor,
}

pub fn rpn_forward(f_cem: &Tensor, weights: &WeightStore, cfg: &HeadConfig) -> Result<RpnOutput> {
    let mut b = GraphBuilder::new();
    b.input(roles::F_CEM, cfg.thin_channels())?;
    let (rpn, cls, reg) = build_rpn_into(&mut b, roles::F_CEM, cfg)?;
    b.output(roles::F_RPN, &rpn)?;
    b.output(roles::RPN_CLS, &cls)?;
    b.output(roles::RPN_REG, &reg)?;
    let mut out = run_sub(b, weights, BTreeMap::from([(roles::F_CEM.into(), f_cem.clone())]))?;
    let mut take = |k: &str| out.remove(k).expect("declared output");
    Ok(RpnOutput {
        features: take(roles::F_RPN),
        cls_logits: take(roles::RPN_CLS),
        reg_deltas: take(roles::RPN_REG),
    })
}

pub fn sam_forward(f_cem: &Tensor, f_rpn: &Tensor, weights: &WeightStore, cfg: &HeadConfig) -> Result<Tensor> {
    check_spatial("sam", f_cem, f_rpn, 1)?;
    let mut b = GraphBuilder::new();
    b.input(roles::F_CEM, cfg.thin_channels())?;
    b.input(roles::F_RPN, cfg.rpn_channels)?;
    let out = build_sam_into(&mut b, roles::F_CEM, roles::F_RPN, cfg)?;
    b.output(roles::F_SAM, &out)?;
    let inputs = BTreeMap::from([(roles::F_CEM.into(), f_cem.clone()), (roles::F_RPN.into(), f_rpn.clone())]);
    Ok(run_sub(b, weights, inputs)?.remove(roles::F_SAM).expect("declared output"))
}

#[derive(Clone, Debug)]
pub struct RcnnOutput {
    /// `(R, C+1, 1, 1)` softmax probabilities, column 0 background.
    pub class_scores: Tensor,
    /// `(R, 4, 1, 1)`.
    pub box_deltas: Tensor,
}

impl RcnnOutput {
    pub fn deltas(&self) -> Vec<[f32; 4]> {
        self.box_deltas
            .data()
            .chunks_exact(4)
            .map(|d| [d[0], d[1], d[2], d[3]])
            .collect()
    }
}

/// Runs the R-CNN subnet with an already-built graph (see
/// [`build_rcnn_graph`]). Zero RoIs give empty outputs.
pub fn rcnn_run(graph: &Graph, weights: &WeightStore, roi_feat: &Tensor, config: ExecConfig) -> Result<RcnnOutput> {
    let mut out = Executor::new(graph, weights, config)?.run(BTreeMap::from([(ROI_INPUT.into(), roi_feat.clone())]))?;
    let mut take = |k: &str| out.remove(k).ok_or_else(|| Error::Graph(format!("r-cnn graph lacks `{k}` output")));
    Ok(RcnnOutput {
        class_scores: take(roles::CLASS_SCORES)?,
        box_deltas: take(roles::BOX_DELTAS)?,
    })
}

pub fn rcnn_forward(roi_feat: &Tensor, weights: &WeightStore, cfg: &HeadConfig) -> Result<RcnnOutput> {
    let g = build_rcnn_graph(cfg)?;
    let ws = weights_for(&g, weights)?;
    rcnn_run(&g, &ws, roi_feat, ExecConfig::default())
}

/// Foreground probability per anchor, in anchor order `(i, j, a)`.
/// Channel `2a` holds the background logit and `2a + 1` the foreground one.
pub fn rpn_objectness(cls_logits: &Tensor, anchors_per_location: usize) -> Result<Vec<f32>> {
    let s = cls_logits.shape();
    if s.n != 1 || s.c != 2 * anchors_per_location {
        return Err(Error::shape(format!(
            "rpn scores {s} do not match {anchors_per_location} anchors per location"
        )));
    }
    let mut out = Vec::with_capacity(s.h * s.w * anchors_per_location);
    for y in 0..s.h {
        for x in 0..s.w {
            for a in 0..anchors_per_location {
                let bg = cls_logits.at(0, 2 * a, y, x);
                let fg = cls_logits.at(0, 2 * a + 1, y, x);
                out.push(1.0 / (1.0 + (bg - fg).exp()));
            }
        }
    }
    Ok(out)
}

/// Box deltas per anchor, in anchor order; channel `4a + k` holds component
/// `k` of anchor `a`.
pub fn rpn_anchor_deltas(reg_deltas: &Tensor, anchors_per_location: usize) -> Result<Vec<[f32; 4]>> {
    let s = reg_deltas.shape();
    if s.n != 1 || s.c != 4 * anchors_per_location {
        return Err(Error::shape(format!(
            "rpn deltas {s} do not match {anchors_per_location} anchors per location"
        )));
    }
    let mut out = Vec::with_capacity(s.h * s.w * anchors_per_location);
    for y in 0..s.h {
        for x in 0..s.w {
            for a in 0..anchors_per_location {
                out.push(std::array::from_fn(|k| reg_deltas.at(0, 4 * a + k, y, x)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Param;
    use crate::model_io::random_init;

    fn cfg() -> HeadConfig {
        HeadConfig::coco()
    }

    fn head_weights(c4: usize, c5: usize, seed: u64) -> WeightStore {
        let mut b = GraphBuilder::new();
        b.input("c4", c4).unwrap();
        b.input("c5", c5).unwrap();
        build_head_into(&mut b, "c4", "c5", &cfg()).unwrap();
        let mut ws = random_init(&b.finish(), seed);
        ws.extend(random_init(&build_rcnn_graph(&cfg()).unwrap(), seed));
        ws
    }

    fn zero_weights(c4: usize, c5: usize) -> WeightStore {
        let mut ws = head_weights(c4, c5, 0);
        let names: Vec<String> = ws.iter().map(|(k, _)| k.clone()).collect();
        for n in names {
            ws.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        ws
    }

    fn ramp(shape: (usize, usize, usize, usize), k: f32) -> Tensor {
        Tensor::from_fn(shape, |_, c, y, x| ((c * 13 + y * 7 + x * 3) % 17) as f32 * k - 1.0)
    }

    #[test]
    fn thin_channels_and_anchor_count() {
        let c = cfg();
        assert_eq!(c.thin_channels(), 245);
        assert_eq!(c.anchors_per_location, crate::boxes::AnchorConfig::default().anchors_per_location());
    }

    #[test]
    fn detector_graph_shapes_snet146() {
        let g = build_detector_graph(SnetVariant::Snet146, &cfg()).unwrap();
        let shapes = g.infer_shapes_single((1, 3, 320, 320).into()).unwrap();
        let at = |role: &str| shapes[g.output_index(role).unwrap()].dims();
        assert_eq!(at(roles::F_CEM), [1, 245, 20, 20]);
        assert_eq!(at(roles::F_RPN), [1, 256, 20, 20]);
        assert_eq!(at(roles::RPN_CLS), [1, 50, 20, 20]);
        assert_eq!(at(roles::RPN_REG), [1, 100, 20, 20]);
        assert_eq!(at(roles::F_SAM), [1, 245, 20, 20]);
    }

    #[test]
    fn cem_zero_weights_give_zero() {
        let ws = zero_weights(8, 16);
        let out = cem_forward(&ramp((1, 8, 6, 6), 0.3), &ramp((1, 16, 3, 3), 0.2), &ws, &cfg()).unwrap();
        assert_eq!(out.shape().dims(), [1, 245, 6, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cem_constant_c5_without_c4_branch_is_spatially_constant() {
        let mut ws = head_weights(8, 16, 3);
        ws.get_mut("cem.c4_lat.weight").unwrap().data_mut().fill(0.0);
        ws.get_mut("cem.c4_lat.bias").unwrap().data_mut().fill(0.0);
        let c5 = Tensor::from_fn((1, 16, 4, 4), |_, c, _, _| c as f32 * 0.25 - 1.0);
        let out = cem_forward(&ramp((1, 8, 8, 8), 0.5), &c5, &ws, &cfg()).unwrap();
        for c in 0..245 {
            let p = out.plane(0, c);
            assert!(p.iter().all(|&v| v == p[0]), "channel {c} varies");
        }
    }

    #[test]
    fn cem_rejects_size_mismatch() {
        let ws = zero_weights(8, 16);
        let err = cem_forward(&Tensor::zeros((1, 8, 6, 6)), &Tensor::zeros((1, 16, 4, 4)), &ws, &cfg());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn rpn_zero_weights_give_half_objectness() {
        let ws = zero_weights(8, 16);
        let out = rpn_forward(&ramp((1, 245, 5, 5), 0.1), &ws, &cfg()).unwrap();
        assert_eq!(out.cls_logits.shape().dims(), [1, 50, 5, 5]);
        assert_eq!(out.reg_deltas.shape().dims(), [1, 100, 5, 5]);
        let obj = rpn_objectness(&out.cls_logits, 25).unwrap();
        assert_eq!(obj.len(), 625);
        assert!(obj.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn rpn_rejects_wrong_channels() {
        let ws = zero_weights(8, 16);
        assert!(rpn_forward(&Tensor::zeros((1, 240, 5, 5)), &ws, &cfg()).is_err());
    }

    #[test]
    fn objectness_and_delta_layout() {
        let cls = Tensor::from_fn((1, 50, 2, 3), |_, c, y, x| if c == 2 * 7 + 1 && y == 1 && x == 2 { 4.0 } else { 0.0 });
        let obj = rpn_objectness(&cls, 25).unwrap();
        let idx = (3 + 2) * 25 + 7;
        assert!((obj[idx] - 1.0 / (1.0 + (-4.0f32).exp())).abs() < 1e-7);
        assert_eq!(obj.iter().filter(|&&p| p != 0.5).count(), 1);
        let reg = Tensor::from_fn((1, 100, 2, 3), |_, c, y, x| (c * 100 + y * 10 + x) as f32);
        let d = rpn_anchor_deltas(&reg, 25).unwrap();
        assert_eq!(d[idx], [2812.0, 2912.0, 3012.0, 3112.0]);
    }

    #[test]
    fn sam_with_zero_theta_halves() {
        let ws = zero_weights(8, 16);
        let f = ramp((1, 245, 4, 4), 0.7);
        let out = sam_forward(&f, &ramp((1, 256, 4, 4), 0.1), &ws, &cfg()).unwrap();
        assert!(out.bit_eq(&f.scale(0.5)));
        let zero = sam_forward(&Tensor::zeros((1, 245, 4, 4)), &ramp((1, 256, 4, 4), 0.1), &head_weights(8, 16, 9), &cfg()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sam_attenuates() {
        let ws = head_weights(8, 16, 11);
        let f = ramp((1, 245, 4, 4), 0.7);
        let out = sam_forward(&f, &ramp((1, 256, 4, 4), 0.4), &ws, &cfg()).unwrap();
        assert!(out.data().iter().zip(f.data()).all(|(o, i)| o.abs() <= i.abs()));
    }

    #[test]
    fn sam_rejects_spatial_mismatch() {
        let ws = zero_weights(8, 16);
        assert!(sam_forward(&Tensor::zeros((1, 245, 4, 4)), &Tensor::zeros((1, 256, 4, 5)), &ws, &cfg()).is_err());
    }

    #[test]
    fn rcnn_zero_weights_uniform() {
        let ws = zero_weights(8, 16);
        let out = rcnn_forward(&ramp((3, 5, 7, 7), 0.2), &ws, &cfg()).unwrap();
        assert_eq!(out.class_scores.shape().dims(), [3, 81, 1, 1]);
        assert!(out.class_scores.data().iter().all(|&p| (p - 1.0 / 81.0).abs() < 1e-7));
        assert!(out.box_deltas.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn rcnn_softmax_rows_normalized() {
        let ws = head_weights(8, 16, 5);
        let out = rcnn_forward(&ramp((4, 5, 7, 7), 0.3), &ws, &cfg()).unwrap();
        for row in out.class_scores.data().chunks(81) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(out.deltas().len(), 4);
    }

    #[test]
    fn missing_head_weight_is_named() {
        let mut ws = zero_weights(8, 16);
        ws.remove("rpn.cls.weight");
        ws.insert("unrelated", Param::zeros(vec![1]));
        let err = rpn_forward(&Tensor::zeros((1, 245, 3, 3)), &ws, &cfg()).unwrap_err();
        assert!(err.to_string().contains("rpn.cls"), "{err}");
    }
}
