//! Latency harness: repeated forward passes on a fixed random input.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::{Detector, DetectorConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::snet::SnetVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub threads: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            threads: 1,
            warmup: 10,
            iters: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub input_size: usize,
    pub threads: usize,
    pub warmup: usize,
    pub iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
}

impl BenchReport {
    /// Summarizes per-iteration latencies (milliseconds).
    pub fn from_samples(model: &str, input_size: usize, cfg: &BenchConfig, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("benchmark needs at least one iteration".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        // Nearest-rank percentile.
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(BenchReport {
            model: model.to_string(),
            input_size,
            threads: cfg.threads,
            warmup: cfg.warmup,
            iters: n,
            mean_ms: mean,
            median_ms: median,
            p95_ms: p95,
            min_ms: s[0],
            max_ms: s[n - 1],
            fps: 1000.0 / mean,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "model: {}\ninput: {}x{}\nthreads: {}\nwarmup: {}\niters: {}\n",
            self.model, self.input_size, self.input_size, self.threads, self.warmup, self.iters
        );
        for (k, v) in [
            ("mean", self.mean_ms),
            ("median", self.median_ms),
            ("p95", self.p95_ms),
            ("min", self.min_ms),
            ("max", self.max_ms),
        ] {
            out += &format!("{k}: {v:.3} ms\n");
        }
        out += &format!("fps: {:.2}\n", self.fps);
        out
    }
}

/// A seeded input tensor of the detector's input size.
pub fn random_input(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn((1, 3, size, size), |_, _, _, _| rng.random_range(-2.0f32..2.0))
}

/// Times the full detection pipeline (graph, proposals, PSRoI, R-CNN,
/// assembly) on one fixed input.
pub fn bench_detector(det: &Detector, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.iters == 0 {
        return Err(Error::Config("benchmark needs at least one iteration".into()));
    }
    let size = det.config().preprocess.input_size;
    let input = random_input(size, cfg.seed);
    for _ in 0..cfg.warmup {
        det.detect_tensor(input.clone())?;
    }
    let mut samples = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let x = input.clone();
        let t = Instant::now();
        det.detect_tensor(x)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    BenchReport::from_samples(det.variant().name(), size, cfg, &samples)
}

/// Builds a randomly initialized detector and benchmarks it.
pub fn bench_model(variant: SnetVariant, head: HeadConfig, dcfg: DetectorConfig, cfg: &BenchConfig) -> Result<BenchReport> {
    let mut det = Detector::with_random_weights(variant, head, cfg.seed, dcfg)?;
    det.set_threads(cfg.threads);
    bench_detector(&det, cfg)
}
