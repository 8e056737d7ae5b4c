//! Acceptance criteria. Prints one PASS/FAIL line per criterion (with
//! indented detail lines) and exits non-zero if any criterion fails.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snetdet::bench::{bench_model, random_input, BenchConfig};
use snetdet::boxes::{generate_anchors, iou, soft_nms, AnchorConfig, BBox, BoxList, SoftNmsConfig};
use snetdet::cost::{count_backbone_macs, count_detector_macs};
use snetdet::detector::{Detector, DetectorConfig, Image};
use snetdet::head::{psroi_align, roles, HeadConfig, PsRoiConfig};
use snetdet::snet::SnetVariant;

const FLOPS_TOL: f64 = 0.03;
const RPN_TOL: f64 = 0.02;
const GAP_TOL_MACS: f64 = 1e6;
const PSROI_TOL: f32 = 1e-3;
const PSROI_MIN_INSTANCES: usize = 100;
const PSROI_BUDGET: Duration = Duration::from_secs(10);
const SOFT_NMS_TOL: f64 = 1e-6;
const SOFT_NMS_MIN_INSTANCES: usize = 1000;
const SHAPE_BUDGET: Duration = Duration::from_secs(30);
const ANCHOR_COUNT: usize = 10_000;
const ANCHOR_AREA_REL_TOL: f64 = 1e-3;

const VARIANTS: [SnetVariant; 3] = [SnetVariant::Snet49, SnetVariant::Snet146, SnetVariant::Snet535];

/// Outcome of one criterion: pass flag and detail lines.
struct Outcome {
    ok: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { ok: true, details: Vec::new() }
    }

    fn check(&mut self, ok: bool, detail: String) {
        self.ok &= ok;
        self.details.push(format!("{} {detail}", if ok { "ok " } else { "BAD" }));
    }

    /// Relative check of a MAC count against a published figure in millions.
    fn mflops(&mut self, label: &str, macs: u64, published_m: f64, tol: f64) {
        let got = macs as f64 / 1e6;
        let rel = got / published_m - 1.0;
        self.check(
            rel.abs() <= tol,
            format!("{label}: {got:.2}M vs {published_m}M ({:+.2}%, tol ±{:.0}%)", rel * 100.0, tol * 100.0),
        );
    }
}

fn classification_flops() -> Outcome {
    let mut o = Outcome::new();
    for (v, published) in VARIANTS.into_iter().zip([49.0, 146.0, 535.0]) {
        let r = count_backbone_macs(v, 224, true).expect("analyzable");
        o.mflops(&format!("{v} @224 with classification tail"), r.total_macs, published, FLOPS_TOL);
    }
    o
}

fn detector_totals() -> Outcome {
    let mut o = Outcome::new();
    for (classes, figures, regime) in [(20, [250.0, 461.0, 1287.0], "VOC"), (80, [262.0, 473.0, 1300.0], "COCO")] {
        for (v, published) in VARIANTS.into_iter().zip(figures) {
            let r = count_detector_macs(v, 320, classes, 200).expect("analyzable");
            o.mflops(&format!("{v} {regime} ({} classes) @320", classes + 1), r.total_macs, published, FLOPS_TOL);
        }
    }
    o
}

fn component_breakdown() -> Outcome {
    let mut o = Outcome::new();
    let r = count_detector_macs(SnetVariant::Snet146, 320, 80, 200).expect("analyzable");
    let g = r.groups.expect("detector groups");
    o.mflops("backbone+CEM", g.backbone_cem, 338.0, FLOPS_TOL);
    o.mflops("RPN", g.rpn, 43.0, RPN_TOL);
    o.mflops("head (SAM + 200 R-CNN)", g.head, 92.0, FLOPS_TOL);
    o.mflops("total", g.total, 473.0, FLOPS_TOL);
    let bb = count_backbone_macs(SnetVariant::Snet146, 320, false).expect("analyzable");
    o.mflops("backbone only @320", bb.total_macs, 298.0, FLOPS_TOL);
    o
}

fn class_gap() -> Outcome {
    let mut o = Outcome::new();
    let expected = 200.0 * 1024.0 * 60.0;
    for v in VARIANTS {
        let coco = count_detector_macs(v, 320, 80, 200).expect("analyzable").total_macs;
        let voc = count_detector_macs(v, 320, 20, 200).expect("analyzable").total_macs;
        let gap = coco as f64 - voc as f64;
        o.check(
            (gap - expected).abs() <= GAP_TOL_MACS,
            format!("{v}: gap {:.3}M vs {:.3}M (tol ±1M)", gap / 1e6, expected / 1e6),
        );
    }
    o
}

fn psroi_vs_oracle() -> Outcome {
    let mut o = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let start = Instant::now();
    let (mut instances, mut worst) = (0usize, 0.0f32);
    while instances < PSROI_MIN_INSTANCES + 20 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let vals: Vec<f32> = (0..97).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = common::features(h, w, &vals);
        let rois: Vec<BBox> = (0..rng.random_range(1..=5))
            .map(|_| {
                let (x, y) = (rng.random_range(-20.0..130.0), rng.random_range(-20.0..130.0));
                BBox::new(x, y, x + rng.random_range(0.0..140.0), y + rng.random_range(0.0..140.0))
            })
            .collect();
        let (out, _) = psroi_align(&f, &rois, &PsRoiConfig::default()).expect("valid input");
        for (r, roi) in rois.iter().enumerate() {
            let want = common::oracle(&f, roi, 5, 7, 16.0);
            let got = &out.data()[r * 245..(r + 1) * 245];
            for (g, e) in got.iter().zip(&want) {
                worst = worst.max((g - e).abs());
            }
            instances += 1;
        }
    }
    let elapsed = start.elapsed();
    o.check(
        instances >= PSROI_MIN_INSTANCES && worst <= PSROI_TOL,
        format!("{instances} (feature, RoI) instances, max abs deviation {worst:.2e} (tol {PSROI_TOL:.0e})"),
    );
    o.check(elapsed < PSROI_BUDGET, format!("runtime {:.2}s (budget {}s)", elapsed.as_secs_f64(), PSROI_BUDGET.as_secs()));
    o
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
    BBox::new(x, y, x + rng.random_range(1.0..80.0), y + rng.random_range(1.0..80.0))
}

fn soft_nms_suite() -> Outcome {
    let mut o = Outcome::new();
    let cfg = SoftNmsConfig::default();
    let b = BBox::new(0.0, 0.0, 10.0, 10.0);
    let pair: BoxList = [(b, 0.9, 1), (b, 0.8, 1)].into_iter().collect();
    let out = soft_nms(&pair, &cfg);
    let want = 0.8 * (-2.0f64).exp();
    let got = out.scores[1] as f64;
    o.check(
        out.scores[0] == 0.9 && (got - want).abs() <= SOFT_NMS_TOL,
        format!("two-box closed form: {got:.9} vs 0.8·e^-2 = {want:.9} (tol {SOFT_NMS_TOL:.0e})"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut increases, mut max_lost) = (0usize, 0usize);
    for _ in 0..SOFT_NMS_MIN_INSTANCES {
        let n = rng.random_range(1..30);
        let dets: BoxList =
            (0..n).map(|_| (random_box(&mut rng), rng.random_range(0.0f32..=1.0), rng.random_range(0..3usize))).collect();
        let out = soft_nms(&dets, &cfg);
        for (bb, s, l) in out.iter() {
            let orig = dets.iter().filter(|&(ob, _, ol)| ob == bb && ol == l).map(|d| d.1).fold(f32::MIN, f32::max);
            increases += usize::from(s > orig);
        }
        let max = dets.scores.iter().copied().fold(f32::MIN, f32::max);
        if max >= cfg.score_floor && out.scores.first() != Some(&max) {
            max_lost += 1;
        }
    }
    o.check(increases == 0, format!("no score increases over {SOFT_NMS_MIN_INSTANCES} instances ({increases} violations)"));
    o.check(max_lost == 0, format!("max score preserved over {SOFT_NMS_MIN_INSTANCES} instances ({max_lost} violations)"));

    let mut changed = 0usize;
    for _ in 0..SOFT_NMS_MIN_INSTANCES {
        // Boxes on a coarse grid of disjoint cells.
        let n = rng.random_range(1..20);
        let dets: BoxList = (0..n)
            .map(|k| {
                let (cx, cy) = ((k % 5) as f32 * 100.0, (k / 5) as f32 * 100.0);
                let bb = BBox::new(cx, cy, cx + rng.random_range(1.0..99.0), cy + rng.random_range(1.0..99.0));
                (bb, rng.random_range(0.01f32..=1.0), rng.random_range(0..2usize))
            })
            .collect();
        debug_assert!(dets.boxes.iter().enumerate().all(|(i, a)| dets.boxes[..i].iter().all(|b| iou(a, b) == 0.0)));
        let mut expect = dets.clone();
        expect.sort_by_score();
        let out = soft_nms(&dets, &cfg);
        let same = out.len() == expect.len()
            && expect.iter().all(|e| out.iter().any(|d| d == e))
            && out.scores == expect.scores;
        changed += usize::from(!same);
    }
    o.check(changed == 0, format!("disjoint boxes unchanged over {SOFT_NMS_MIN_INSTANCES} instances ({changed} violations)"));
    o
}

fn shape_suite() -> Outcome {
    let mut o = Outcome::new();
    let start = Instant::now();
    for v in VARIANTS {
        let det = Detector::with_random_weights(v, HeadConfig::coco(), 1, DetectorConfig::default()).expect("builds");
        let maps = det.features(random_input(320, 3)).expect("forward");
        let dims = |role: &str| maps[role].shape().dims();
        let (c4, c5) = (dims(roles::C4), dims(roles::C5));
        o.check(c4[2..] == [20, 20], format!("{v}: C4 {:?}", c4));
        o.check(c5[2..] == [10, 10], format!("{v}: C5 {:?}", c5));
        o.check(dims(roles::F_CEM) == [1, 245, 20, 20], format!("{v}: F_CEM {:?}", dims(roles::F_CEM)));
        o.check(dims(roles::RPN_CLS) == [1, 50, 20, 20], format!("{v}: RPN cls {:?}", dims(roles::RPN_CLS)));
        o.check(dims(roles::RPN_REG) == [1, 100, 20, 20], format!("{v}: RPN reg {:?}", dims(roles::RPN_REG)));
        let rois = det.proposals(&maps).expect("proposals");
        o.check(rois.len() <= 200, format!("{v}: {} proposals", rois.len()));
        let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
        let (feat, _) = psroi_align(&maps[roles::F_SAM], &boxes, &det.head().psroi()).expect("psroi");
        let fd = feat.shape().dims();
        o.check(fd[1..] == [5, 7, 7] && fd[0] == rois.len(), format!("{v}: per-RoI features {:?}", fd));
    }
    let elapsed = start.elapsed();
    o.check(elapsed < SHAPE_BUDGET, format!("runtime {:.2}s (budget {}s)", elapsed.as_secs_f64(), SHAPE_BUDGET.as_secs()));
    o
}

fn anchor_suite() -> Outcome {
    let mut o = Outcome::new();
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(&cfg, 20, 20);
    o.check(anchors.len() == ANCHOR_COUNT, format!("{} anchors on the 20x20 grid", anchors.len()));
    let a = cfg.anchors_per_location();
    let worst = anchors
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let s = cfg.scales[(i % a) / cfg.ratios.len()] as f64;
            let area = b.width() as f64 * b.height() as f64;
            (area / (s * s) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    o.check(worst <= ANCHOR_AREA_REL_TOL, format!("max relative area error {worst:.2e} (tol {ANCHOR_AREA_REL_TOL:.0e})"));
    o
}

fn determinism() -> Outcome {
    let mut o = Outcome::new();
    let dir = tempfile::tempdir().expect("tempdir");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f32> = (0..3 * 180 * 240).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = dir.path().join("frame.rtns");
    std::fs::write(&img, Image::new(240, 180, data).expect("image").to_raw()).expect("write image");
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_snetdet"))
            .args(["detect", "--model", "snet49", "--random-seed", "7", "--classes", "voc", "--input"])
            .arg(&img)
            .arg("--out")
            .arg(&out)
            .status()
            .expect("spawn snetdet");
        o.check(status.success(), format!("run {run}: {status}"));
        outputs.push(std::fs::read(&out).unwrap_or_default());
    }
    let valid = serde_json::from_slice::<serde_json::Value>(&outputs[0]).is_ok();
    o.check(valid && outputs[0] == outputs[1], format!("two runs byte-identical ({} bytes)", outputs[0].len()));
    o
}

fn bench_monotonic() -> Outcome {
    let mut o = Outcome::new();
    let cfg = BenchConfig { threads: 1, warmup: 1, iters: 5, seed: 0 };
    let fps: Vec<f64> = VARIANTS
        .iter()
        .map(|&v| bench_model(v, HeadConfig::coco(), DetectorConfig::default(), &cfg).expect("bench").fps)
        .collect();
    o.check(
        fps[0] >= fps[1] && fps[1] >= fps[2],
        format!("fps snet49 {:.2} >= snet146 {:.2} >= snet535 {:.2}", fps[0], fps[1], fps[2]),
    );
    o
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("FLOPs, classification graphs", classification_flops),
        ("FLOPs, detector totals", detector_totals),
        ("FLOPs, component breakdown and backbone-only", component_breakdown),
        ("COCO minus VOC gap", class_gap),
        ("PSRoI align vs dense-sampling oracle", psroi_vs_oracle),
        ("Soft-NMS closed form and properties", soft_nms_suite),
        ("Shape suite, all variants at 320", shape_suite),
        ("Anchor suite", anchor_suite),
        ("Determinism of detect JSON", determinism),
        ("Bench fps monotonicity", bench_monotonic),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}", if o.ok { "PASS" } else { "FAIL" });
        for d in &o.details {
            println!("       {d}");
        }
        failed += usize::from(!o.ok);
    }
    println!(
        "NOTE mAP/AP and fps figures need trained weights and the reference hardware; covered by the suites above instead"
    );
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
