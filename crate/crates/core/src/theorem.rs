//! Monte-Carlo comparison of the add-only and add-then-remove schemes on
//! synthetic object streams.
//!
//! A canvas is a capacity in pixels². Filling draws objects one at a time
//! and keeps each one that fits in the remaining capacity, stopping after a
//! run of consecutive misfits. The add-only scheme fills `t` times; the
//! add-then-remove scheme fills and then drops every object whose
//! confidence is below `eta`. Both report `G = Φ + N` at the end, where Φ
//! is the area-weighted mean confidence and N the object count.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

/// One-sided 99% standard normal quantile.
pub const Z_99: f64 = 2.326_347_874_040_840_8;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid distribution {0:?}")]
    Distribution(String),
    #[error("invalid simulation setting: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ConfidenceDist {
    Uniform { lo: f64, hi: f64 },
    Beta { alpha: f64, beta: f64 },
    /// `lo` with probability `p`, otherwise `hi`.
    TwoPoint { p: f64, lo: f64, hi: f64 },
}

impl ConfidenceDist {
    /// The three distributions the comparison is shipped with.
    pub fn defaults() -> [ConfidenceDist; 3] {
        [
            ConfidenceDist::Uniform { lo: 0.0, hi: 1.0 },
            ConfidenceDist::Beta { alpha: 2.0, beta: 5.0 },
            ConfidenceDist::TwoPoint { p: 0.5, lo: 0.1, hi: 0.9 },
        ]
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match *self {
            ConfidenceDist::Uniform { lo, hi } => unit(lo) && unit(hi) && lo <= hi,
            ConfidenceDist::Beta { alpha, beta } => {
                alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()
            }
            ConfidenceDist::TwoPoint { p, lo, hi } => unit(p) && unit(lo) && unit(hi),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Distribution(self.to_string()))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ConfidenceDist::Uniform { lo, hi } if lo == hi => lo,
            ConfidenceDist::Uniform { lo, hi } => rng.random_range(lo..hi),
            ConfidenceDist::Beta { alpha, beta } => Beta::new(alpha, beta)
                .expect("validated parameters")
                .sample(rng),
            ConfidenceDist::TwoPoint { p, lo, hi } => {
                if rng.random_bool(p) {
                    lo
                } else {
                    hi
                }
            }
        }
    }

    /// Short tag for report rows.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ConfidenceDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfidenceDist::Uniform { lo, hi } => write!(f, "uniform({lo},{hi})"),
            ConfidenceDist::Beta { alpha, beta } => write!(f, "beta({alpha},{beta})"),
            ConfidenceDist::TwoPoint { p, lo, hi } => write!(f, "two-point({p},{lo},{hi})"),
        }
    }
}

/// Splits `name(a,b,...)` into the name and its numeric arguments.
fn call_syntax(s: &str) -> Option<(&str, Vec<f64>)> {
    let s = s.trim();
    let open = s.find('(')?;
    let inner = s[open + 1..].strip_suffix(')')?;
    let args = inner
        .split(',')
        .map(|a| a.trim().parse::<f64>().ok())
        .collect::<Option<Vec<_>>>()?;
    Some((s[..open].trim(), args))
}

impl FromStr for ConfidenceDist {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let err = || SimError::Distribution(s.to_string());
        let (name, args) = call_syntax(s).ok_or_else(err)?;
        let d = match (name, args.as_slice()) {
            ("uniform", &[lo, hi]) => ConfidenceDist::Uniform { lo, hi },
            ("beta", &[alpha, beta]) => ConfidenceDist::Beta { alpha, beta },
            ("two-point", &[p, lo, hi]) => ConfidenceDist::TwoPoint { p, lo, hi },
            _ => return Err(err()),
        };
        d.validate()?;
        Ok(d)
    }
}

impl From<ConfidenceDist> for String {
    fn from(d: ConfidenceDist) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for ConfidenceDist {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self, SimError> {
        s.parse()
    }
}

/// Object areas, uniform on `[lo, hi]` pixels².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct AreaDist {
    pub lo: f64,
    pub hi: f64,
}

impl AreaDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl fmt::Display for AreaDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "uniform({},{})", self.lo, self.hi)
    }
}

impl FromStr for AreaDist {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match call_syntax(s) {
            Some(("uniform", args)) if args.len() == 2 && args[0] > 0.0 && args[0] <= args[1] => {
                Ok(AreaDist { lo: args[0], hi: args[1] })
            }
            _ => Err(SimError::Distribution(s.to_string())),
        }
    }
}

impl From<AreaDist> for String {
    fn from(d: AreaDist) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for AreaDist {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self, SimError> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Every draw is a fresh i.i.d. object.
    WithReplacement,
    /// Draws come without replacement from a pool of this many objects
    /// generated up front; filling stops when it runs dry.
    Finite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub trials: usize,
    /// Number of add (or add-then-remove) iterations.
    pub t: u32,
    pub eta: f64,
    pub confidence: ConfidenceDist,
    pub area: AreaDist,
    /// Canvas capacity in pixels².
    pub capacity: f64,
    pub seed: u64,
    pub mode: PoolMode,
    /// Consecutive misfits that end one fill.
    pub misfit_limit: u32,
    /// Worker threads; 0 means available parallelism.
    pub workers: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trials: 2000,
            t: 10,
            eta: 0.2,
            confidence: ConfidenceDist::Uniform { lo: 0.0, hi: 1.0 },
            area: AreaDist { lo: 400.0, hi: 6400.0 },
            capacity: 484.0 * 578.0,
            seed: 0,
            mode: PoolMode::WithReplacement,
            misfit_limit: 40,
            workers: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.confidence.validate()?;
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        if !(self.area.lo > 0.0 && self.area.lo <= self.area.hi) {
            return bad("area range must be positive and ordered");
        }
        if !(self.capacity > 0.0) {
            return bad("capacity must be positive");
        }
        if self.misfit_limit == 0 {
            return bad("misfit limit must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub area: f64,
    pub confidence: f64,
    /// Set when the object shares canvas area with another one.
    pub overlap: bool,
}

/// Where fill draws come from.
enum Source {
    Iid,
    Pool(Vec<SimObject>),
}

impl Source {
    fn new(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        match cfg.mode {
            PoolMode::WithReplacement => Source::Iid,
            PoolMode::Finite(n) => {
                let mut pool: Vec<SimObject> = (0..n).map(|_| draw(cfg, rng)).collect();
                pool.shuffle(rng);
                Source::Pool(pool)
            }
        }
    }

    fn next(&mut self, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Option<SimObject> {
        match self {
            Source::Iid => Some(draw(cfg, rng)),
            Source::Pool(pool) => pool.pop(),
        }
    }
}

fn draw<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> SimObject {
    SimObject {
        area: cfg.area.sample(rng),
        confidence: cfg.confidence.sample(rng),
        overlap: false,
    }
}

/// Area-weighted mean confidence; 0 when empty.
pub fn phi(objects: &[SimObject]) -> f64 {
    let (num, den) = objects
        .iter()
        .fold((0.0, 0.0), |(n, d), o| (n + o.area * o.confidence, d + o.area));
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn mean_confidence(objects: &[SimObject]) -> f64 {
    if objects.is_empty() {
        return 0.0;
    }
    objects.iter().map(|o| o.confidence).sum::<f64>() / objects.len() as f64
}

fn fill(canvas: &mut Vec<SimObject>, source: &mut Source, cfg: &SimConfig, rng: &mut ChaCha8Rng) {
    let mut used: f64 = canvas.iter().map(|o| o.area).sum();
    let mut misfits = 0;
    while misfits < cfg.misfit_limit {
        let Some(o) = source.next(cfg, rng) else { break };
        if used + o.area <= cfg.capacity {
            used += o.area;
            canvas.push(o);
            misfits = 0;
        } else {
            misfits += 1;
        }
    }
}

/// Bookkeeping for one screening step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemoveStep {
    pub phi_before: f64,
    pub phi_after: f64,
    pub mean_all: f64,
    pub mean_survivors: f64,
    pub removed: usize,
    pub survivors: usize,
}

impl RemoveStep {
    /// Φ did not drop, checked only when something survives the threshold.
    pub fn phi_monotone(&self) -> bool {
        self.survivors == 0 || self.phi_after >= self.phi_before
    }

    /// Mean confidence of the upper group is at least the mean of all.
    pub fn expectation_holds(&self) -> bool {
        self.survivors == 0 || self.mean_survivors >= self.mean_all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub g: f64,
    pub phi: f64,
    pub n: usize,
    /// Φ after each iteration.
    pub phi_trajectory: Vec<f64>,
    pub remove_steps: Vec<RemoveStep>,
}

fn finish(canvas: &[SimObject], phi_trajectory: Vec<f64>, remove_steps: Vec<RemoveStep>) -> TrialOutcome {
    let p = phi(canvas);
    TrialOutcome {
        g: p + canvas.len() as f64,
        phi: p,
        n: canvas.len(),
        phi_trajectory,
        remove_steps,
    }
}

/// Screening: drops every object below `eta`.
pub fn remove_below(canvas: &mut Vec<SimObject>, eta: f64) -> RemoveStep {
    let phi_before = phi(canvas);
    let mean_all = mean_confidence(canvas);
    let before = canvas.len();
    canvas.retain(|o| o.confidence >= eta);
    RemoveStep {
        phi_before,
        phi_after: phi(canvas),
        mean_all,
        mean_survivors: mean_confidence(canvas),
        removed: before - canvas.len(),
        survivors: canvas.len(),
    }
}

pub fn run_add_only(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> TrialOutcome {
    let mut source = Source::new(cfg, rng);
    let mut canvas = Vec::new();
    let mut traj = Vec::with_capacity(cfg.t as usize);
    for _ in 0..cfg.t {
        fill(&mut canvas, &mut source, cfg, rng);
        traj.push(phi(&canvas));
    }
    finish(&canvas, traj, Vec::new())
}

pub fn run_add_then_remove(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> TrialOutcome {
    let mut source = Source::new(cfg, rng);
    let mut canvas = Vec::new();
    let mut traj = Vec::with_capacity(cfg.t as usize);
    let mut steps = Vec::with_capacity(cfg.t as usize);
    for _ in 0..cfg.t {
        fill(&mut canvas, &mut source, cfg, rng);
        steps.push(remove_below(&mut canvas, cfg.eta));
        traj.push(phi(&canvas));
    }
    finish(&canvas, traj, steps)
}

/// Both schemes for one trial, each from the same trial stream.
pub fn run_trial(cfg: &SimConfig, trial: u64) -> (TrialOutcome, TrialOutcome) {
    let add_only = run_add_only(cfg, &mut rng_for(&[cfg.seed, trial]));
    let add_remove = run_add_then_remove(cfg, &mut rng_for(&[cfg.seed, trial]));
    (add_only, add_remove)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub distribution: String,
    pub trials: usize,
    pub t: u32,
    pub eta: f64,
    pub mean_g1: f64,
    pub mean_g2: f64,
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// One-sided 99% lower confidence bound on mean(G2 - G1).
    pub lower_bound: f64,
    pub frac_g2_ge_g1: f64,
    pub mean_phi1: f64,
    pub mean_phi2: f64,
    pub mean_n1: f64,
    pub mean_n2: f64,
    pub remove_steps: usize,
    pub phi_monotone_violations: usize,
    /// Trials in which every screening step kept Φ from dropping.
    pub phi_monotone_trials: usize,
    pub expectation_violations: usize,
    #[serde(skip)]
    pub phi_trajectories: Vec<Vec<f64>>,
    pub elapsed_ms: u64,
}

impl CompareReport {
    pub fn g2_dominates(&self) -> bool {
        self.lower_bound >= 0.0
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    match b.build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

pub fn compare(cfg: &SimConfig) -> Result<CompareReport, SimError> {
    cfg.validate()?;
    let started = Instant::now();
    let trials: Vec<(TrialOutcome, TrialOutcome)> = with_workers(cfg.workers, || {
        (0..cfg.trials as u64)
            .into_par_iter()
            .map(|k| run_trial(cfg, k))
            .collect()
    });
    let n = trials.len() as f64;
    let diffs: Vec<f64> = trials.iter().map(|(a, b)| b.g - a.g).collect();
    let mean_diff = mean(diffs.iter().copied());
    let sd_diff = if trials.len() > 1 {
        (diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let steps = trials.iter().flat_map(|(_, b)| &b.remove_steps);
    Ok(CompareReport {
        distribution: cfg.confidence.label(),
        trials: trials.len(),
        t: cfg.t,
        eta: cfg.eta,
        mean_g1: mean(trials.iter().map(|(a, _)| a.g)),
        mean_g2: mean(trials.iter().map(|(_, b)| b.g)),
        mean_diff,
        sd_diff,
        lower_bound: mean_diff - Z_99 * sd_diff / n.sqrt(),
        frac_g2_ge_g1: diffs.iter().filter(|d| **d >= 0.0).count() as f64 / n,
        mean_phi1: mean(trials.iter().map(|(a, _)| a.phi)),
        mean_phi2: mean(trials.iter().map(|(_, b)| b.phi)),
        mean_n1: mean(trials.iter().map(|(a, _)| a.n as f64)),
        mean_n2: mean(trials.iter().map(|(_, b)| b.n as f64)),
        remove_steps: steps.clone().count(),
        phi_monotone_violations: steps.clone().filter(|s| !s.phi_monotone()).count(),
        phi_monotone_trials: trials
            .iter()
            .filter(|(_, b)| b.remove_steps.iter().all(RemoveStep::phi_monotone))
            .count(),
        expectation_violations: steps.filter(|s| !s.expectation_holds()).count(),
        phi_trajectories: trials.iter().map(|(_, b)| b.phi_trajectory.clone()).collect(),
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}

/// Probability a leftover fragment is resolved in the next iteration
/// (no overlap, or overlapped and removed) versus left in place.
pub fn fragment_probabilities(p1: f64, p2: f64) -> (f64, f64) {
    (p1 + (1.0 - p1) * p2, (1.0 - p1) * (1.0 - p2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub p1: f64,
    pub p2: f64,
    pub resolved: f64,
    pub persists: f64,
    pub holds: bool,
}

/// Evaluates the fragment inequality on `p1 = i/10`, `p2 = j/20` for
/// `i in 0..=10`, `j in 10..=20`. Both sides are scaled by 200 and compared
/// as integers, so the check is exact.
pub fn inequality_grid() -> Vec<GridPoint> {
    let mut out = Vec::with_capacity(11 * 11);
    for i in 0..=10i64 {
        for j in 10..=20i64 {
            // 200 * (p1 + (1 - p1) p2) and 200 * (1 - p1)(1 - p2).
            let lhs = 20 * i + (10 - i) * j;
            let rhs = (10 - i) * (20 - j);
            out.push(GridPoint {
                p1: i as f64 / 10.0,
                p2: j as f64 / 20.0,
                resolved: lhs as f64 / 200.0,
                persists: rhs as f64 / 200.0,
                holds: lhs >= rhs,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub p1: f64,
    pub p2: f64,
    /// Screened survivors whose overlap outcome was drawn.
    pub examined: usize,
    pub resolved_analytic: f64,
    pub persists_analytic: f64,
    pub resolved_empirical: f64,
    pub persists_empirical: f64,
    /// Mean final Φ of the add-then-remove runs.
    pub mean_phi: f64,
}

/// Add-then-remove where each newly placed object overlaps another with
/// probability `1 - p1`, and an overlapped survivor's leftover fragment is
/// removed by the following screening with probability `p2`. Reports how
/// often a fragment is resolved against how often it persists.
pub fn overlap_variant(cfg: &SimConfig, p1: f64, p2: f64) -> Result<OverlapReport, SimError> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) {
        return Err(SimError::Config(format!("p1={p1}, p2={p2} outside [0, 1]")));
    }
    let per_trial: Vec<(usize, usize, usize, f64)> = with_workers(cfg.workers, || {
        (0..cfg.trials as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng_for(&[cfg.seed, k, 0x0f]);
                let mut source = Source::new(cfg, &mut rng);
                let mut canvas: Vec<SimObject> = Vec::new();
                let (mut examined, mut resolved, mut persisted) = (0, 0, 0);
                for _ in 0..cfg.t {
                    let settled = canvas.len();
                    fill(&mut canvas, &mut source, cfg, &mut rng);
                    for o in &mut canvas[settled..] {
                        o.overlap = !rng.random_bool(p1);
                    }
                    let mut fresh = canvas.split_off(settled);
                    remove_below(&mut fresh, cfg.eta);
                    // A screened survivor that overlapped leaves a fragment;
                    // the next screening catches it with probability p2.
                    for o in fresh {
                        examined += 1;
                        if !o.overlap {
                            resolved += 1;
                            canvas.push(o);
                        } else if rng.random_bool(p2) {
                            resolved += 1;
                        } else {
                            persisted += 1;
                            canvas.push(o);
                        }
                    }
                }
                (examined, resolved, persisted, phi(&canvas))
            })
            .collect()
    });
    let examined: usize = per_trial.iter().map(|t| t.0).sum();
    let resolved: usize = per_trial.iter().map(|t| t.1).sum();
    let persisted: usize = per_trial.iter().map(|t| t.2).sum();
    let (resolved_analytic, persists_analytic) = fragment_probabilities(p1, p2);
    let frac = |k: usize| if examined > 0 { k as f64 / examined as f64 } else { 0.0 };
    Ok(OverlapReport {
        p1,
        p2,
        examined,
        resolved_analytic,
        persists_analytic,
        resolved_empirical: frac(resolved),
        persists_empirical: frac(persisted),
        mean_phi: mean(per_trial.iter().map(|t| t.3)),
    })
}

pub const COMPARE_TSV_HEADER: &str = "distribution\ttrials\tT\teta\tmean_g1\tmean_g2\tmean_diff\tsd_diff\tlower_bound_99\tfrac_g2_ge_g1\tmean_phi1\tmean_phi2\tmean_n1\tmean_n2\tremove_steps\tphi_monotone_violations\texpectation_violations\telapsed_ms";

pub fn compare_tsv(reports: &[CompareReport]) -> String {
    let mut out = String::from(COMPARE_TSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\t{:.3}\t{:.3}\t{}\t{}\t{}\t{}",
            r.distribution,
            r.trials,
            r.t,
            r.eta,
            r.mean_g1,
            r.mean_g2,
            r.mean_diff,
            r.sd_diff,
            r.lower_bound,
            r.frac_g2_ge_g1,
            r.mean_phi1,
            r.mean_phi2,
            r.mean_n1,
            r.mean_n2,
            r.remove_steps,
            r.phi_monotone_violations,
            r.expectation_violations,
            r.elapsed_ms
        );
    }
    out
}

pub fn grid_tsv(points: &[GridPoint]) -> String {
    let mut out = String::from("p1\tp2\tresolved\tpersists\tholds\n");
    for g in points {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", g.p1, g.p2, g.resolved, g.persists, g.holds);
    }
    out
}
