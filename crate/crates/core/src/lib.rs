//! Inference engine and static cost analyzer for lightweight two-stage
//! detectors built on SNet backbones.
//!
//! - [`engine`]: NCHW tensors, layer kernels, graph description and executor.
//! - [`snet`]: SNet49 / SNet146 / SNet535 backbone builders.
//! - [`head`]: context enhancement, compressed RPN, spatial attention,
//!   PSRoI align and the R-CNN subnet.
//! - [`boxes`]: anchors, box coding, proposal selection, NMS and Soft-NMS.
//! - [`cost`]: MAC / parameter / receptive-field analysis over graphs.
//! - [`model_io`]: weight files, random initialization, architecture JSON.
//! - [`detector`]: the end-to-end pipeline; [`bench`]: latency harness.

pub mod bench;
pub mod boxes;
pub mod cli;
pub mod cost;
pub mod detector;
pub mod engine;
pub mod error;
pub mod head;
pub mod model_io;
pub mod snet;

pub use error::{Error, Result};
