//! Command-line front end. [`run`] parses arguments, executes the command
//! and returns the process exit code.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
//! format error, 3 model / weight mismatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{bench_model, BenchConfig};
use crate::cost::{backbone_rf, count_backbone_macs, count_detector_macs_with, BackboneRf};
use crate::detector::{detector_graphs, random_detector_weights, DetectionResult, Detector, DetectorConfig, Image};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model_io::{export_arch, load_weights, save_weights};
use crate::snet::{build_snet, SnetOptions, SnetVariant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

/// Foreground class count: `voc` (20), `coco` (80) or a number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classes(pub usize);

impl FromStr for Classes {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "voc" => Ok(Classes(20)),
            "coco" => Ok(Classes(80)),
            n => match n.parse::<usize>() {
                Ok(v) if v > 0 => Ok(Classes(v)),
                _ => Err(format!("`{s}` is not voc, coco or a positive class count")),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphPart {
    Backbone,
    Detector,
    Rcnn,
}

fn parse_variant(s: &str) -> std::result::Result<SnetVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "snetdet", version, about = "SNet two-stage detector: inference, cost analysis and benchmarking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Backbone: snet49, snet146, snet535 (or snet146-3x3dw).
    #[arg(long, value_parser = parse_variant)]
    pub model: SnetVariant,
    /// Class regime: voc, coco or a foreground class count.
    #[arg(long, default_value = "coco")]
    pub classes: Classes,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run detection on images and write results as JSON.
    Detect {
        #[command(flatten)]
        model: ModelArgs,
        /// Weight file in TNRT format.
        #[arg(long, conflicts_with = "random_seed", required_unless_present = "random_seed")]
        weights: Option<PathBuf>,
        /// Use seeded random weights instead of a weight file.
        #[arg(long)]
        random_seed: Option<u64>,
        /// Images (PNG, JPEG or raw tensor files).
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Detector configuration JSON (preprocessing, anchors, thresholds).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Include per-stage timings in the output.
        #[arg(long)]
        timing: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print MACs, parameters, shapes and receptive fields.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 320)]
        input_res: usize,
        #[arg(long, default_value_t = 200)]
        rois: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Analyze the backbone with its ImageNet classification tail instead
        /// of the detector.
        #[arg(long)]
        classification_tail: bool,
        /// Thin feature map multiplier.
        #[arg(long, default_value_t = 5)]
        alpha: usize,
        /// Width of the R-CNN fc layer.
        #[arg(long, default_value_t = 1024)]
        rcnn_fc: usize,
    },
    /// Time repeated forward passes on a fixed random input.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        iters: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Receptive field and jump at C4 and C5, next to the 3x3-DW counterpart.
    Rf {
        #[arg(long, value_parser = parse_variant)]
        model: SnetVariant,
        #[arg(long, default_value_t = 320)]
        input_res: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Write a graph as architecture JSON.
    ExportArch {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = GraphPart::Detector)]
        part: GraphPart,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded random weights for a detector as a TNRT file.
    InitWeights {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => EXIT_IO,
        Error::Config(_) => EXIT_USAGE,
        Error::Shape(_) | Error::Graph(_) | Error::Node { .. } | Error::Weight { .. } | Error::NonFinite(_) => {
            EXIT_MISMATCH
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn image_id(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn rf_text(rows: &[BackboneRf]) -> String {
    let mut s = format!("{:<16} {:>4} {:>8} {:>8} {:>8} {:>8}\n", "model", "dw", "C4 rf", "C4 jump", "C5 rf", "C5 jump");
    for r in rows {
        s += &format!(
            "{:<16} {:>4} {:>8} {:>8} {:>8} {:>8}\n",
            r.model,
            format!("{0}x{0}", r.dw_kernel),
            r.c4_rf,
            r.c4_jump,
            r.c5_rf,
            r.c5_jump
        );
    }
    s
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Detect {
            model,
            weights,
            random_seed,
            input,
            out: out_path,
            config,
            timing,
            threads,
        } => {
            let cfg = match &config {
                Some(p) => DetectorConfig::load(p)?,
                None => DetectorConfig::default(),
            };
            let head = HeadConfig::new(model.classes.0);
            let ws = match (&weights, random_seed) {
                (Some(p), _) => load_weights(p)?,
                (None, Some(seed)) => random_detector_weights(model.model, &head, seed)?,
                (None, None) => unreachable!("clap requires one of --weights / --random-seed"),
            };
            let mut det = Detector::new(model.model, head, &ws, cfg)?;
            det.set_threads(threads);
            let mut results = Vec::with_capacity(input.len());
            for path in &input {
                let img = Image::load(path)?;
                let d = det.detect(&img)?;
                results.push(DetectionResult::new(image_id(path), &d, timing));
            }
            write_output(out_path.as_deref(), &to_json(&results), out)
        }
        Command::Analyze {
            model,
            input_res,
            rois,
            format,
            classification_tail,
            alpha,
            rcnn_fc,
        } => {
            let report = if classification_tail {
                count_backbone_macs(model.model, input_res, true)?
            } else {
                let head = HeadConfig {
                    alpha,
                    rcnn_fc,
                    ..HeadConfig::new(model.classes.0)
                };
                count_detector_macs_with(model.model, input_res, &head, rois)?
            };
            let text = match format {
                Format::Text => report.to_text(),
                Format::Json => report.to_json(),
            };
            write_output(None, &text, out)
        }
        Command::Bench {
            model,
            threads,
            warmup,
            iters,
            seed,
            format,
        } => {
            let cfg = BenchConfig {
                threads: threads.max(1),
                warmup,
                iters: iters as usize,
                seed,
            };
            let r = bench_model(model.model, HeadConfig::new(model.classes.0), DetectorConfig::default(), &cfg)?;
            let text = match format {
                Format::Text => r.to_text(),
                Format::Json => to_json(&r),
            };
            write_output(None, &text, out)
        }
        Command::Rf {
            model,
            input_res,
            format,
        } => {
            let mine = backbone_rf(model, None, input_res)?;
            let mut rows = vec![mine];
            if model.dw_kernel() != 3 {
                let mut dw3 = backbone_rf(model, Some(3), input_res)?;
                dw3.model = model.dw3_counterpart().map_or_else(|| format!("{model}-3x3dw"), |v| v.name().to_string());
                rows.push(dw3);
            }
            let text = match format {
                Format::Text => rf_text(&rows),
                Format::Json => to_json(&rows),
            };
            write_output(None, &text, out)
        }
        Command::ExportArch { model, part, out: path } => {
            let head = HeadConfig::new(model.classes.0);
            let g = match part {
                GraphPart::Backbone => build_snet(model.model, SnetOptions::default()),
                GraphPart::Detector => detector_graphs(model.model, &head)?.0,
                GraphPart::Rcnn => detector_graphs(model.model, &head)?.1,
            };
            export_arch(&g, &path)?;
            Ok(())
        }
        Command::InitWeights { model, seed, out: path } => {
            let ws = random_detector_weights(model.model, &HeadConfig::new(model.classes.0), seed)?;
            save_weights(&ws, &path)?;
            Ok(())
        }
    }
}
