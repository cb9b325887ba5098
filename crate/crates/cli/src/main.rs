mod config;
mod serve;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use condense_core::annotation::{
    parse_dataset, read_distilled, total_variation, CategoryCounts, ParseReport, ANNOTATION_FILE,
};
use condense_core::compositor::FsImageSource;
use condense_core::engine::{distill, CanvasRecord, EngineError};
use condense_core::observer::{selftest, HeuristicParams, ObserverError, ObserverSpec, TransportConfig};
use condense_core::sampling::{build_plan, compute_ipd};
use condense_core::synthetic::{write_synthetic, SyntheticSpec};
use condense_core::theorem::{
    compare, compare_tsv, grid_tsv, inequality_grid, overlap_variant, AreaDist, ConfidenceDist,
    PoolMode, SimConfig,
};

use config::{RunArgs, RunConfig, Sizing};

#[derive(Parser)]
#[command(name = "condense", version, about = "Condense an object-detection dataset into a few synthesized images")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the condensed dataset.
    Distill {
        /// Flat TOML file with keys named like the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Summarize a source annotation file.
    Inspect {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Compare category distributions of a distilled and a source dataset.
    Stats {
        /// Distilled annotation file, or the output directory holding it.
        #[arg(long)]
        distilled: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Monte-Carlo comparison of add-only and add-then-remove synthesis.
    Simulate {
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        t: u32,
        #[arg(long, default_value_t = 0.2)]
        eta: f64,
        /// uniform(a,b) | beta(a,b) | two-point(p,lo,hi); repeatable.
        #[arg(long = "distribution")]
        distributions: Vec<String>,
        /// Object area distribution, uniform(lo,hi) in px².
        #[arg(long, default_value = "uniform(400,6400)")]
        area: String,
        /// Canvas capacity in px²; defaults to the COCO canvas area.
        #[arg(long)]
        capacity: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Draw from a depleting pool of this many objects instead of i.i.d.
        #[arg(long)]
        finite_pool: Option<usize>,
        /// Also print the fragment-inequality grid.
        #[arg(long)]
        grid: bool,
        /// Run the overlap variant at P1,P2.
        #[arg(long, value_parser = parse_pair)]
        overlap: Option<(f64, f64)>,
        /// Write the TSV report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that an observer speaks the protocol.
    ObserverSelftest {
        #[arg(long)]
        observer: String,
        #[arg(long, default_value_t = 30.0)]
        timeout_secs: f64,
    },
    /// Serve the heuristic observer over stdio or HTTP.
    ObserverServe {
        #[arg(long, conflicts_with = "listen")]
        stdio: bool,
        /// Address for HTTP, e.g. 127.0.0.1:8088 (port 0 picks one).
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
    /// Write a procedurally generated dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        images: usize,
        #[arg(long, default_value_t = 6)]
        objects_per_image: usize,
        #[arg(long, default_value_t = 10)]
        categories: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected P1,P2")?;
    Ok((
        a.trim().parse().map_err(|_| format!("bad number {a:?}"))?,
        b.trim().parse().map_err(|_| format!("bad number {b:?}"))?,
    ))
}

/// Failure classes, each with its own exit status.
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Observer(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Observer(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Observer(e) => e,
        }
    }
}

type Outcome = Result<(), Failure>;

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Distill { config, args } => cmd_distill(config.as_deref(), &args),
        Command::Inspect { annotations, images } => cmd_inspect(&annotations, images),
        Command::Stats { distilled, source, json } => cmd_stats(&distilled, &source, json),
        Command::Simulate {
            trials,
            t,
            eta,
            distributions,
            area,
            capacity,
            seed,
            workers,
            finite_pool,
            grid,
            overlap,
            out,
        } => (|| {
            let area: AreaDist = area.parse().config()?;
            let dists = if distributions.is_empty() {
                ConfidenceDist::defaults().to_vec()
            } else {
                distributions
                    .iter()
                    .map(|d| d.parse::<ConfidenceDist>())
                    .collect::<Result<_, _>>()
                    .config()?
            };
            let base = SimConfig {
                trials,
                t,
                eta,
                area,
                capacity: capacity.unwrap_or(SimConfig::default().capacity),
                seed,
                workers,
                mode: finite_pool.map_or(PoolMode::WithReplacement, PoolMode::Finite),
                ..SimConfig::default()
            };
            cmd_simulate(&base, &dists, grid, overlap, out.as_deref())
        })(),
        Command::ObserverSelftest { observer, timeout_secs } => cmd_selftest(&observer, timeout_secs),
        Command::ObserverServe { stdio, listen, seed, threads } => {
            let backend = condense_core::observer::HeuristicBackend::new(HeuristicParams {
                seed,
                ..Default::default()
            });
            match (stdio, listen) {
                (_, Some(addr)) => serve::serve_http(Arc::new(backend), &addr, threads).data(),
                _ => serve::serve_stdio(&backend).data(),
            }
        }
        Command::Synth { out, images, objects_per_image, categories, seed } => (|| {
            if images == 0 || categories == 0 {
                return Err(Failure::Config(anyhow::anyhow!("--images and --categories must be positive")));
            }
            let spec = SyntheticSpec { images, objects_per_image, categories, seed, ..Default::default() };
            let ds = write_synthetic(&spec, &out).data()?;
            println!(
                "wrote {} images, {} objects to {}",
                ds.images.len(),
                ds.total_objects,
                out.display()
            );
            Ok(())
        })(),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

#[derive(Serialize)]
struct Totals {
    ipd: usize,
    canvases_complete: usize,
    canvases_failed: usize,
    objects: usize,
    placed: usize,
    removed: usize,
    mean_phi: f64,
    mean_diversity: f64,
    wall_clock_ms: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    complete: bool,
    observer: String,
    config: &'a RunArgs,
    source_images: usize,
    source_objects: usize,
    parse_report: &'a ParseReport,
    totals: Totals,
    canvases: Vec<CanvasRecord>,
}

fn cmd_distill(config_file: Option<&Path>, cli_args: &RunArgs) -> Outcome {
    let file_args = match config_file {
        Some(p) => RunArgs::from_file(p).config()?,
        None => RunArgs::default(),
    };
    let cfg = RunConfig::resolve(&cli_args.over(&file_args)).config()?;

    let (dataset, report) = parse_dataset(&cfg.annotations, &cfg.images).data()?;
    let ipd = match cfg.sizing {
        Sizing::Ratio(r) => compute_ipd(dataset.images.len(), r).config()?,
        Sizing::Ipd(n) => n,
    };
    let plan = build_plan(&dataset, ipd, cfg.engine.seed).config()?;
    let heuristic = HeuristicParams { seed: cfg.engine.seed, ..Default::default() };
    let backend = cfg
        .observer
        .build(heuristic, cfg.transport)
        .map_err(|e| Failure::Config(e.into()))?;
    log::info!(
        "{} images, {} objects -> {ipd} canvases of {}x{} with {}",
        dataset.images.len(),
        dataset.total_objects,
        cfg.engine.canvas.0,
        cfg.engine.canvas.1,
        backend.describe()
    );

    std::fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating {}", cfg.out.display()))
        .data()?;
    let echo = cfg.echo();
    std::fs::write(cfg.out.join("config.toml"), toml::to_string(&echo).config()?)
        .context("writing config echo")
        .data()?;
    plan.write_text(&cfg.out.join("plan.tsv")).context("writing plan").data()?;

    let images = FsImageSource::for_dataset(&dataset, cfg.cache_mb << 20);
    let run = distill(&dataset, &plan, &images, &backend, &cfg.engine).config()?;
    // Completed canvases are flushed even when others failed.
    let summary = run.emit(&dataset, &images, &cfg.out).data()?;

    let records = run.records();
    let done: Vec<&CanvasRecord> = records.iter().filter(|r| r.complete).collect();
    let mean = |f: &dyn Fn(&CanvasRecord) -> f64| {
        if done.is_empty() {
            0.0
        } else {
            done.iter().map(|r| f(r)).sum::<f64>() / done.len() as f64
        }
    };
    let manifest = Manifest {
        complete: run.is_complete(),
        observer: backend.describe(),
        config: &echo,
        source_images: dataset.images.len(),
        source_objects: dataset.total_objects,
        parse_report: &report,
        totals: Totals {
            ipd,
            canvases_complete: done.len(),
            canvases_failed: records.len() - done.len(),
            objects: summary.annotations_written,
            placed: records.iter().map(|r| r.placed).sum(),
            removed: records.iter().map(|r| r.removed).sum(),
            mean_phi: mean(&|r| r.phi),
            mean_diversity: mean(&|r| r.diversity as f64),
            wall_clock_ms: run.elapsed.as_millis() as u64,
        },
        canvases: records,
    };
    let manifest_path = cfg.out.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .context("writing manifest")
        .data()?;
    println!(
        "{} canvases, {} objects, mean phi {:.4} -> {}",
        manifest.totals.canvases_complete,
        manifest.totals.objects,
        manifest.totals.mean_phi,
        cfg.out.display()
    );

    let failures: Vec<(u64, &EngineError)> = run.failures().collect();
    if failures.is_empty() {
        return Ok(());
    }
    for (id, e) in &failures {
        eprintln!("canvas {id} failed: {e}");
    }
    if cfg.keep_partial {
        eprintln!("{} of {ipd} canvases incomplete; see {}", failures.len(), manifest_path.display());
        return Ok(());
    }
    let msg = anyhow::anyhow!("{} of {ipd} canvases failed; partial output in {}", failures.len(), cfg.out.display());
    if failures.iter().any(|(_, e)| e.observer_error().is_some()) {
        Err(Failure::Observer(msg))
    } else {
        Err(Failure::Data(msg))
    }
}

fn cmd_inspect(annotations: &Path, images: Option<PathBuf>) -> Outcome {
    let root = images.unwrap_or_else(|| annotations.parent().unwrap_or(Path::new(".")).join("images"));
    let (ds, report) = parse_dataset(annotations, &root).data()?;
    let counts = CategoryCounts::of_source(&ds);
    println!("images\t{}", ds.images.len());
    println!("objects\t{}", ds.total_objects);
    println!("categories\t{}", ds.categories.len());
    if let Some((lo, hi)) = ds.area_range() {
        println!("area_range\t{lo}\t{hi}");
    }
    println!("clamped\t{}\ndropped_degenerate\t{}\ncrowd\t{}", report.clamped, report.dropped_degenerate, report.crowd);
    for c in &ds.categories {
        println!(
            "category\t{}\t{}\t{}\t{}",
            c.id,
            c.name,
            counts.objects.get(&c.id).unwrap_or(&0),
            counts.images.get(&c.id).unwrap_or(&0)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CategoryRow {
    id: u64,
    name: String,
    supercategory: String,
    source_objects: usize,
    source_images: usize,
    distilled_objects: usize,
    distilled_images: usize,
}

#[derive(Serialize)]
struct StatsReport {
    categories: Vec<CategoryRow>,
    tv_objects: f64,
    tv_images: f64,
}

fn cmd_stats(distilled: &Path, source: &Path, json: bool) -> Outcome {
    let distilled = if distilled.is_dir() { distilled.join(ANNOTATION_FILE) } else { distilled.to_path_buf() };
    let dd = read_distilled(&distilled).data()?;
    let (src, _) = parse_dataset(source, source.parent().unwrap_or(Path::new("."))).data()?;
    let a = CategoryCounts::of_source(&src);
    let b = CategoryCounts::of_distilled(&dd);
    let get = |m: &std::collections::BTreeMap<u64, usize>, k: u64| *m.get(&k).unwrap_or(&0);
    let report = StatsReport {
        categories: src
            .categories
            .iter()
            .map(|c| CategoryRow {
                id: c.id,
                name: c.name.clone(),
                supercategory: c.supercategory.clone(),
                source_objects: get(&a.objects, c.id),
                source_images: get(&a.images, c.id),
                distilled_objects: get(&b.objects, c.id),
                distilled_images: get(&b.images, c.id),
            })
            .collect(),
        tv_objects: total_variation(&a.objects, &b.objects),
        tv_images: total_variation(&a.images, &b.images),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    }
    let mut out = String::from("id\tname\tsupercategory\tsource_objects\tsource_images\tdistilled_objects\tdistilled_images\n");
    for r in &report.categories {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id, r.name, r.supercategory, r.source_objects, r.source_images, r.distilled_objects, r.distilled_images
        );
    }
    let _ = writeln!(out, "# tv_objects\t{:.6}\n# tv_images\t{:.6}", report.tv_objects, report.tv_images);
    print!("{out}");
    Ok(())
}

fn cmd_simulate(
    base: &SimConfig,
    dists: &[ConfidenceDist],
    grid: bool,
    overlap: Option<(f64, f64)>,
    out: Option<&Path>,
) -> Outcome {
    let reports = dists
        .iter()
        .map(|d| compare(&SimConfig { confidence: *d, ..*base }))
        .collect::<Result<Vec<_>, _>>()
        .config()?;
    let mut text = compare_tsv(&reports);
    if grid {
        text.push('\n');
        text.push_str(&grid_tsv(&inequality_grid()));
    }
    if let Some((p1, p2)) = overlap {
        let r = overlap_variant(base, p1, p2).config()?;
        let _ = write!(
            text,
            "\np1\tp2\texamined\tresolved_analytic\tpersists_analytic\tresolved_empirical\tpersists_empirical\tmean_phi\n{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.p1, r.p2, r.examined, r.resolved_analytic, r.persists_analytic, r.resolved_empirical, r.persists_empirical, r.mean_phi
        );
    }
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())).data()?,
        None => print!("{text}"),
    }
    for r in &reports {
        if !r.g2_dominates() || r.phi_monotone_violations > 0 || r.expectation_violations > 0 {
            eprintln!("warning: {} did not show G2 >= G1 with every check passing", r.distribution);
        }
    }
    Ok(())
}

fn cmd_selftest(spec: &str, timeout_secs: f64) -> Outcome {
    let spec: ObserverSpec = spec.parse().map_err(|e: ObserverError| Failure::Config(e.into()))?;
    if !(timeout_secs > 0.0 && timeout_secs.is_finite()) {
        return Err(Failure::Config(anyhow::anyhow!("--timeout-secs must be positive")));
    }
    let transport = TransportConfig {
        timeout: std::time::Duration::from_secs_f64(timeout_secs),
        retries: 0,
        in_flight: 1,
    };
    let backend = spec
        .build(HeuristicParams::default(), transport)
        .map_err(|e| Failure::Config(e.into()))?;
    let checks = selftest(&backend);
    for c in &checks {
        println!("{}\t{}\t{}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        println!("observer {} conforms", backend.describe());
        Ok(())
    } else {
        Err(Failure::Observer(anyhow::anyhow!("observer {} failed the self-test", backend.describe())))
    }
}
