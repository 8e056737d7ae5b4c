//! SNet backbone builders.
//!
//! ```text
//! conv1   3x3 s2          (24 | 24 | 48)
//! pool    3x3 max s2
//! stage2  1 down + 3 blocks   (60 | 132 | 248)
//! stage3  1 down + 7 blocks   (120 | 264 | 496)   -> C4, 1/16
//! stage4  1 down + 3 blocks   (240 | 528 | 992)   -> C5, 1/32
//! conv5   1x1, 512 (SNet49 only)                  -> C5
//! ```
//!
//! Blocks are ShuffleNetV2 units with 5x5 depthwise kernels. ReLU follows
//! each pointwise conv; depthwise convs are linear.

use std::fmt;
use std::str::FromStr;

use crate::engine::{Graph, GraphBuilder, LayerSpec, SplitPart};
use crate::error::{Error, Result};

pub const IMAGE_INPUT: &str = "image";
pub const STAGE_REPEATS: [usize; 3] = [4, 8, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SnetVariant {
    Snet49,
    Snet146,
    Snet535,
    /// SNet146 widths with 3x3 depthwise kernels; for receptive-field and
    /// cost comparisons only.
    Snet146Dw3,
}

impl SnetVariant {
    pub const ALL: [SnetVariant; 4] = [
        SnetVariant::Snet49,
        SnetVariant::Snet146,
        SnetVariant::Snet535,
        SnetVariant::Snet146Dw3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SnetVariant::Snet49 => "snet49",
            SnetVariant::Snet146 => "snet146",
            SnetVariant::Snet535 => "snet535",
            SnetVariant::Snet146Dw3 => "snet146-3x3dw",
        }
    }

    pub fn conv1_width(self) -> usize {
        match self {
            SnetVariant::Snet535 => 48,
            _ => 24,
        }
    }

    pub fn stage_widths(self) -> [usize; 3] {
        match self {
            SnetVariant::Snet49 => [60, 120, 240],
            SnetVariant::Snet146 | SnetVariant::Snet146Dw3 => [132, 264, 528],
            SnetVariant::Snet535 => [248, 496, 992],
        }
    }

    pub fn conv5_width(self) -> Option<usize> {
        match self {
            SnetVariant::Snet49 => Some(512),
            _ => None,
        }
    }

    pub fn dw_kernel(self) -> usize {
        match self {
            SnetVariant::Snet146Dw3 => 3,
            _ => 5,
        }
    }

    /// Channel count of C4 (last stage3 output).
    pub fn c4_channels(self) -> usize {
        self.stage_widths()[1]
    }

    /// Channel count of C5 (stage4 output, or conv5 for SNet49).
    pub fn c5_channels(self) -> usize {
        self.conv5_width().unwrap_or(self.stage_widths()[2])
    }

    /// The counterpart that differs only in depthwise kernel size.
    pub fn dw3_counterpart(self) -> Option<SnetVariant> {
        match self {
            SnetVariant::Snet146 => Some(SnetVariant::Snet146Dw3),
            _ => None,
        }
    }
}

impl fmt::Display for SnetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SnetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SnetVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SnetOptions {
    /// Append global pooling and a 1000-way fc (the ImageNet head), exposed
    /// as the `logits` output.
    pub classification_tail: bool,
    /// Overrides the variant's depthwise kernel size (3 or 5).
    pub dw_kernel: Option<usize>,
}

/// Node ids of the backbone's feature maps inside a larger graph.
#[derive(Clone, Debug)]
pub struct BackboneNodes {
    pub c4: String,
    pub c5: String,
    pub logits: Option<String>,
}

/// Appends one ShuffleNetV2 unit under `prefix` and returns the id of its
/// output node.
pub fn build_block(
    b: &mut GraphBuilder,
    prefix: &str,
    input: &str,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    dw_kernel: usize,
) -> Result<String> {
    let bad = |msg: String| Error::Config(format!("block `{prefix}`: {msg}"));
    if out_ch == 0 || out_ch % 2 != 0 {
        return Err(bad(format!("output channels {out_ch} must be even")));
    }
    if !matches!(dw_kernel, 3 | 5) {
        return Err(bad(format!("depthwise kernel {dw_kernel} must be 3 or 5")));
    }
    let half = out_ch / 2;
    let id = |layer: &str| format!("{prefix}.{layer}");
    let (passthrough, branch_in, branch_in_ch) = match stride {
        1 => {
            if in_ch != out_ch {
                return Err(bad(format!(
                    "stride-1 block needs equal in/out channels, got {in_ch} -> {out_ch}"
                )));
            }
            let split = |part| LayerSpec::ChannelSplit { split: half, part };
            let l = b.add(&id("split_l"), split(SplitPart::Lower), &[input])?;
            let r = b.add(&id("split_r"), split(SplitPart::Upper), &[input])?;
            (l, r, half)
        }
        2 => {
            let dw = b.add(&id("proj_dw"), LayerSpec::dwconv(in_ch, dw_kernel, 2), &[input])?;
            let pw = b.add(&id("proj_pw"), LayerSpec::conv(in_ch, half, 1, 1), &[&dw])?;
            let relu = b.add(&id("proj_relu"), LayerSpec::ReLU, &[&pw])?;
            (relu, input.to_string(), in_ch)
        }
        s => return Err(bad(format!("stride {s} must be 1 or 2"))),
    };
    let pw1 = b.add(&id("pw1"), LayerSpec::conv(branch_in_ch, half, 1, 1), &[&branch_in])?;
    let r1 = b.add(&id("pw1_relu"), LayerSpec::ReLU, &[&pw1])?;
    let dw = b.add(&id("dw"), LayerSpec::dwconv(half, dw_kernel, stride), &[&r1])?;
    let pw2 = b.add(&id("pw2"), LayerSpec::conv(half, half, 1, 1), &[&dw])?;
    let r2 = b.add(&id("pw2_relu"), LayerSpec::ReLU, &[&pw2])?;
    let cat = b.add(&id("concat"), LayerSpec::Concat, &[&passthrough, &r2])?;
    b.add(&id("shuffle"), LayerSpec::ChannelShuffle { groups: 2 }, &[&cat])
}

/// A standalone graph holding one block, with input `x` and output `out`.
pub fn build_block_graph(in_ch: usize, out_ch: usize, stride: usize, dw_kernel: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    b.input("x", in_ch)?;
    let out = build_block(&mut b, "block", "x", in_ch, out_ch, stride, dw_kernel)?;
    b.output("out", &out)?;
    Ok(b.finish())
}

/// Appends the backbone reading from `input` (3 channels).
pub fn build_snet_into(
    b: &mut GraphBuilder,
    variant: SnetVariant,
    input: &str,
    opts: SnetOptions,
) -> Result<BackboneNodes> {
    let k = opts.dw_kernel.unwrap_or(variant.dw_kernel());
    let c1 = variant.conv1_width();
    let conv1 = b.add("conv1", LayerSpec::conv(3, c1, 3, 2), &[input])?;
    let relu1 = b.add("conv1_relu", LayerSpec::ReLU, &[&conv1])?;
    let mut x = b.add("pool", LayerSpec::MaxPool { kernel: 3, stride: 2 }, &[&relu1])?;
    let mut ch = c1;
    let mut stage_out = Vec::with_capacity(3);
    for (s, (&width, &repeats)) in variant.stage_widths().iter().zip(&STAGE_REPEATS).enumerate() {
        for blk in 0..repeats {
            let stride = if blk == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.{}", s + 2, blk);
            x = build_block(b, &prefix, &x, ch, width, stride, k)?;
            ch = width;
        }
        stage_out.push(x.clone());
    }
    let c4 = stage_out[1].clone();
    let mut c5 = stage_out[2].clone();
    if let Some(w5) = variant.conv5_width() {
        let conv5 = b.add("conv5", LayerSpec::conv(ch, w5, 1, 1), &[&c5])?;
        c5 = b.add("conv5_relu", LayerSpec::ReLU, &[&conv5])?;
        ch = w5;
    }
    let logits = if opts.classification_tail {
        let gap = b.add("gap", LayerSpec::GlobalAvgPool, &[&c5])?;
        Some(b.add("fc", LayerSpec::fc(ch, 1000), &[&gap])?)
    } else {
        None
    };
    Ok(BackboneNodes { c4, c5, logits })
}

/// Backbone graph with input `image` and outputs `C4`, `C5` (and `logits`
/// with the classification tail).
pub fn build_snet(variant: SnetVariant, opts: SnetOptions) -> Graph {
    let mut b = GraphBuilder::new();
    b.input(IMAGE_INPUT, 3).expect("fresh builder");
    let nodes = build_snet_into(&mut b, variant, IMAGE_INPUT, opts).expect("static widths are valid");
    b.output("C4", &nodes.c4).expect("c4 exists");
    b.output("C5", &nodes.c5).expect("c5 exists");
    if let Some(l) = &nodes.logits {
        b.output("logits", l).expect("logits exists");
    }
    b.finish()
}
