//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use condense_core::annotation::{
    parse_dataset, read_distilled, total_variation, CategoryCounts, DistilledDataset,
    ANNOTATION_FILE, IMAGE_DIR,
};
use condense_core::bbox::iou;
use condense_core::compositor::FsImageSource;
use condense_core::engine::{distill, DistillRun, EngineConfig};
use condense_core::observer::{ConstantBackend, HeuristicBackend, HeuristicParams, ObserverBackend};
use condense_core::placement::{sa_dce_extension, ObjectCandidate, PlacementConfig};
use condense_core::sampling::{build_plan, compute_ipd};
use condense_core::synthetic::{write_synthetic, SyntheticSpec};
use condense_core::theorem::{compare, inequality_grid, CompareReport, ConfidenceDist, SimConfig};
use condense_core::SourceDataset;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { name, passed, detail }
}

const SEED: u64 = 20240611;
const RATIO: f64 = 0.01;

struct Fixture {
    _dir: tempfile::TempDir,
    dataset: SourceDataset,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join("source");
    write_synthetic(&SyntheticSpec::default(), &root).expect("write synthetic dataset");
    // Ingest through the same path as real data.
    let (dataset, _) =
        parse_dataset(&root.join(ANNOTATION_FILE), &root.join(IMAGE_DIR)).expect("parse");
    Fixture { _dir: dir, dataset }
}

fn engine_cfg(eta: f64) -> EngineConfig {
    EngineConfig {
        eta,
        seed: SEED,
        workers: 8,
        ..Default::default()
    }
}

fn heuristic() -> HeuristicBackend {
    HeuristicBackend::new(HeuristicParams { seed: SEED, ..Default::default() })
}

fn run(fx: &Fixture, ratio_or_ipd: Result<f64, usize>, backend: &dyn ObserverBackend, cfg: &EngineConfig) -> DistillRun {
    let ipd = match ratio_or_ipd {
        Ok(r) => compute_ipd(fx.dataset.images.len(), r).expect("ipd"),
        Err(n) => n,
    };
    let plan = build_plan(&fx.dataset, ipd, SEED).expect("plan");
    let images = FsImageSource::for_dataset(&fx.dataset, 256 << 20);
    distill(&fx.dataset, &plan, &images, backend, cfg).expect("distill")
}

fn theorem_simulation(reports: &[CompareReport], elapsed: Duration) -> Outcome {
    let mut ok = elapsed < Duration::from_secs(30);
    let mut detail = Vec::new();
    for r in reports {
        ok &= r.trials >= 1000 && r.g2_dominates() && r.phi_monotone_trials == r.trials;
        detail.push(format!(
            "{}: G1 {:.4} G2 {:.4} lb99 {:+.4} monotone {}/{}",
            r.distribution, r.mean_g1, r.mean_g2, r.lower_bound, r.phi_monotone_trials, r.trials
        ));
    }
    detail.push(format!("{:.1}s single-threaded", elapsed.as_secs_f64()));
    check("theorem-simulation", ok, detail.join("; "))
}

fn expectation_inequality(reports: &[CompareReport]) -> Outcome {
    let steps: usize = reports.iter().map(|r| r.remove_steps).sum();
    let bad: usize = reports.iter().map(|r| r.expectation_violations).sum();
    check(
        "expectation-inequality",
        bad == 0 && steps > 0,
        format!("{bad} violations over {steps} threshold partitions"),
    )
}

fn inequality_grid_criterion() -> Outcome {
    let grid = inequality_grid();
    let bad = grid.iter().filter(|p| !p.holds).count();
    check(
        "inequality-grid",
        bad == 0 && grid.len() == 121,
        format!("{} grid points, {bad} violations (integer arithmetic)", grid.len()),
    )
}

fn synthesis_invariants(fx: &Fixture, r: &DistillRun, ipd: usize, elapsed: Duration) -> Outcome {
    let cfg = engine_cfg(0.2);
    let out = r.dataset(&fx.dataset);
    let mut problems = Vec::new();
    if !r.is_complete() {
        problems.push(format!("{} canvases failed", r.failures().count()));
    }
    if out.images.len() != ipd {
        problems.push(format!("|S| = {} != IPD {ipd}", out.images.len()));
    }
    let ids: Vec<u64> = out.images.iter().flat_map(|i| i.objects.iter().map(|o| o.source_annotation_id)).collect();
    let dups = ids.len() - ids.iter().collect::<HashSet<_>>().len();
    if dups > 0 {
        problems.push(format!("{dups} duplicate source annotation ids"));
    }
    let mut max_iou: f64 = 0.0;
    for res in r.completed() {
        let occ = &res.canvas.occupants;
        for i in 0..occ.len() {
            for j in i + 1..occ.len() {
                max_iou = max_iou.max(iou(&occ[i].placement.placed_extended, &occ[j].placement.placed_extended));
            }
        }
    }
    if max_iou >= 0.6 {
        problems.push(format!("pairwise IoU {max_iou}"));
    }
    let min_conf = ids_conf(&out);
    if min_conf < 0.2 {
        problems.push(format!("min confidence {min_conf}"));
    }
    // Extension bounds over every candidate in the dataset.
    let pcfg = PlacementConfig::default().with_area_range_of(&fx.dataset);
    let r_bar = pcfg.extension_px;
    let mut ext_ok = true;
    for (img, obj) in fx.dataset.candidate_objects() {
        let e = sa_dce_extension(obj.bbox.area(), pcfg.a_min, pcfg.a_max, r_bar);
        ext_ok &= (0.0..=r_bar).contains(&e);
        let c = ObjectCandidate::new(img, obj, &pcfg);
        ext_ok &= c.extended_box.contains(&c.tight_box);
    }
    ext_ok &= sa_dce_extension(pcfg.a_min, pcfg.a_min, pcfg.a_max, r_bar) == r_bar;
    ext_ok &= sa_dce_extension(pcfg.a_max, pcfg.a_min, pcfg.a_max, r_bar) == 0.0;
    if !ext_ok {
        problems.push("extension out of [0, r]".into());
    }
    if elapsed >= Duration::from_secs(120) {
        problems.push("slower than 2 min".into());
    }
    let objects: usize = out.images.iter().map(|i| i.objects.len()).sum();
    check(
        "synthesis-invariants",
        problems.is_empty(),
        format!(
            "IPD {ipd}, {objects} objects, max IoU {max_iou:.4} < {}, min q {min_conf:.3} >= {}, {:.1}s with {} workers{}",
            cfg.placement.tau,
            cfg.eta,
            elapsed.as_secs_f64(),
            cfg.workers,
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }
        ),
    )
}

fn ids_conf(d: &DistilledDataset) -> f64 {
    d.images
        .iter()
        .flat_map(|i| i.objects.iter().map(|o| o.confidence))
        .fold(f64::INFINITY, f64::min)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.join(IMAGE_DIR))
        .expect("image dir")
        .map(|e| {
            let p = e.expect("entry").path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).expect("read"))
        })
        .collect();
    files.sort();
    files.push((ANNOTATION_FILE.into(), std::fs::read(dir.join(ANNOTATION_FILE)).expect("read")));
    files
}

fn determinism(fx: &Fixture, first: &DistillRun) -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let images = FsImageSource::for_dataset(&fx.dataset, 256 << 20);
    let second = run(fx, Ok(RATIO), &heuristic(), &engine_cfg(0.2));
    first.emit(&fx.dataset, &images, &tmp.path().join("a")).expect("emit a");
    second.emit(&fx.dataset, &images, &tmp.path().join("b")).expect("emit b");
    let a = dir_bytes(&tmp.path().join("a"));
    let b = dir_bytes(&tmp.path().join("b"));
    let same = a == b;
    check(
        "determinism",
        same && a.len() > 1,
        format!("{} files compared byte-for-byte: {}", a.len(), if same { "identical" } else { "differ" }),
    )
}

fn round_trip(fx: &Fixture, r: &DistillRun) -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let images = FsImageSource::for_dataset(&fx.dataset, 256 << 20);
    r.emit(&fx.dataset, &images, tmp.path()).expect("emit");
    let original = r.dataset(&fx.dataset);
    let back = read_distilled(&tmp.path().join(ANNOTATION_FILE)).expect("read back");
    let mut problems = Vec::new();
    let mut max_dev: f64 = 0.0;
    if back.categories != original.categories {
        problems.push("categories differ".to_string());
    }
    if back.images.len() != original.images.len() {
        problems.push("image count differs".into());
    }
    for (a, b) in original.images.iter().zip(&back.images) {
        if (a.id, &a.file_name, a.width, a.height, a.diversity) != (b.id, &b.file_name, b.width, b.height, b.diversity)
            || a.phi != b.phi
            || a.objects.len() != b.objects.len()
        {
            problems.push(format!("image {} differs", a.id));
            continue;
        }
        for (x, y) in a.objects.iter().zip(&b.objects) {
            if (x.category_id, x.source_annotation_id, x.confidence) != (y.category_id, y.source_annotation_id, y.confidence) {
                problems.push(format!("object {} differs", x.source_annotation_id));
            }
            let dev = [x.bbox.x - y.bbox.x, x.bbox.y - y.bbox.y, x.bbox.w - y.bbox.w, x.bbox.h - y.bbox.h]
                .into_iter()
                .fold(0.0f64, |m, d| m.max(d.abs()));
            max_dev = max_dev.max(dev);
        }
    }
    if max_dev > 0.01 {
        problems.push(format!("box deviation {max_dev}"));
    }
    let objects: usize = back.images.iter().map(|i| i.objects.len()).sum();
    check(
        "round-trip",
        problems.is_empty(),
        format!("{objects} objects, max box deviation {max_dev:.4} px <= 0.01{}", if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }),
    )
}

fn distribution_preservation(fx: &Fixture) -> Outcome {
    let r = run(fx, Ok(RATIO), &ConstantBackend { score: 1.0 }, &engine_cfg(0.2));
    let out = r.dataset(&fx.dataset);
    let src = CategoryCounts::of_source(&fx.dataset);
    let dst = CategoryCounts::of_distilled(&out);
    let tv = total_variation(&src.objects, &dst.objects);
    let objects: usize = dst.objects.values().sum();
    check(
        "distribution-preservation",
        r.is_complete() && tv < 0.05,
        format!("TV {tv:.4} < 0.05 over {objects} distilled objects in {} images", out.images.len()),
    )
}

fn screening_effect(fx: &Fixture) -> Outcome {
    let mean_phi = |eta: f64| {
        let r = run(fx, Err(50), &heuristic(), &engine_cfg(eta));
        assert!(r.is_complete());
        let d = r.dataset(&fx.dataset);
        d.images.iter().map(|i| i.phi).sum::<f64>() / d.images.len() as f64
    };
    let screened = mean_phi(0.2);
    let unscreened = mean_phi(0.0);
    check(
        "screening-effect",
        screened > unscreened,
        format!("mean Φ over 50 canvases: η=0.2 {screened:.4} vs η=0 {unscreened:.4}"),
    )
}

fn main() {
    let mut outcomes = Vec::new();

    let started = Instant::now();
    let reports: Vec<CompareReport> = ConfidenceDist::defaults()
        .into_iter()
        .map(|d| {
            compare(&SimConfig {
                trials: 2000,
                t: 10,
                eta: 0.2,
                confidence: d,
                seed: SEED,
                workers: 1,
                ..Default::default()
            })
            .expect("simulation")
        })
        .collect();
    let sim_elapsed = started.elapsed();
    outcomes.push(theorem_simulation(&reports, sim_elapsed));
    outcomes.push(inequality_grid_criterion());
    outcomes.push(expectation_inequality(&reports));

    let fx = fixture();
    let ipd = compute_ipd(fx.dataset.images.len(), RATIO).expect("ipd");
    let started = Instant::now();
    let main_run = run(&fx, Ok(RATIO), &heuristic(), &engine_cfg(0.2));
    let elapsed = started.elapsed();
    outcomes.push(synthesis_invariants(&fx, &main_run, ipd, elapsed));
    outcomes.push(determinism(&fx, &main_run));
    outcomes.push(round_trip(&fx, &main_run));
    outcomes.push(distribution_preservation(&fx));
    outcomes.push(screening_effect(&fx));

    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        println!("{} {:<28} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
