//! Run configuration: command-line flags layered over an optional flat TOML
//! file layered over the defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use condense_core::engine::{BackgroundMode, EngineConfig, COCO_CANVAS, VOC_CANVAS};
use condense_core::observer::{ObserverSpec, TransportConfig, DEFAULT_IOU_FLOOR};
use condense_core::placement::PlacementConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Coco,
    Voc,
}

impl Preset {
    pub fn canvas(self) -> (u32, u32) {
        match self {
            Preset::Coco => COCO_CANVAS,
            Preset::Voc => VOC_CANVAS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Segment,
    Dataset,
}

pub fn parse_canvas(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("{s:?}: expected WxH"))?;
    let w: u32 = w.trim().parse().map_err(|_| format!("{s:?}: bad width"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("{s:?}: bad height"))?;
    if w == 0 || h == 0 {
        return Err(format!("{s:?}: dimensions must be positive"));
    }
    Ok((w, h))
}

/// Flags of `distill`. Every field is optional so that unset flags fall
/// through to the config file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunArgs {
    /// Source annotation file.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Directory holding the source images.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compression ratio; IPD = max(1, round(ratio * images)).
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Explicit number of synthesized images.
    #[arg(long)]
    pub ipd: Option<usize>,
    /// IoU ceiling between extended boxes on a canvas (default 0.6)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Confidence below which placed objects are screened out (default 0.2)
    #[arg(long)]
    pub eta: Option<f64>,
    /// Placement positions tried per candidate (default 40)
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Context margin for the smallest objects, in pixels (default 20)
    #[arg(long)]
    pub extension_px: Option<f64>,
    /// Canvas size as WxH; overrides --preset.
    #[arg(long)]
    pub canvas: Option<String>,
    /// Canvas size preset: coco is 484x578, voc is 375x500
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// heuristic | constant:SCORE | exec:COMMAND | http:URL
    #[arg(long)]
    pub observer: Option<String>,
    /// Seed for the plan, placement and heuristic observer
    #[arg(long)]
    pub seed: Option<u64>,
    /// Canvas worker threads; default is available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Add/screen rounds per canvas (default 5)
    #[arg(long)]
    pub t_max: Option<u32>,
    /// Consecutive rejected candidates that declare a canvas full.
    #[arg(long)]
    pub patience: Option<u32>,
    /// Where canvas backgrounds are drawn from
    #[arg(long, value_enum)]
    pub background: Option<Background>,
    /// IoU a detection needs to be credited to a placed object.
    #[arg(long)]
    pub iou_floor: Option<f64>,
    /// Per-request observer timeout
    #[arg(long)]
    pub observer_timeout_secs: Option<f64>,
    /// Retries after a transport failure
    #[arg(long)]
    pub observer_retries: Option<u32>,
    /// Concurrent observer requests
    #[arg(long)]
    pub observer_in_flight: Option<usize>,
    /// Decoded source image cache budget.
    #[arg(long)]
    pub cache_mb: Option<usize>,
    /// Exit 0 even when some canvases failed.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub keep_partial: Option<bool>,
}

macro_rules! layer {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        RunArgs { $($f: $hi.$f.clone().or_else(|| $lo.$f.clone()),)* }
    };
}

impl RunArgs {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set here win; unset ones come from `lower`. Canvas and preset
    /// are resolved per layer first so a preset flag beats a file canvas.
    pub fn over(&self, lower: &RunArgs) -> RunArgs {
        let mut merged = layer!(self, lower;
            annotations, images, out, ratio, ipd, tau, eta, max_attempts, extension_px,
            canvas, preset, observer, seed, workers, t_max, patience, background, iou_floor,
            observer_timeout_secs, observer_retries, observer_in_flight, cache_mb, keep_partial,
        );
        if self.canvas.is_none() && self.preset.is_some() {
            merged.canvas = None;
        }
        // Sizing: a higher layer's choice of one excludes the lower layer's other.
        if self.ratio.is_some() || self.ipd.is_some() {
            merged.ratio = self.ratio;
            merged.ipd = self.ipd;
        }
        merged
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sizing {
    Ratio(f64),
    Ipd(usize),
}

/// Fully resolved settings of one distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub annotations: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
    pub sizing: Sizing,
    pub engine: EngineConfig,
    pub observer: ObserverSpec,
    pub transport: TransportConfig,
    pub cache_mb: usize,
    pub keep_partial: bool,
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> anyhow::Result<Self> {
        let annotations = args.annotations.clone().context("--annotations is required")?;
        let images = match &args.images {
            Some(p) => p.clone(),
            None => annotations
                .parent()
                .map(|p| p.join("images"))
                .context("--images is required")?,
        };
        let out = args.out.clone().context("--out is required")?;
        let sizing = match (args.ratio, args.ipd) {
            (Some(_), Some(_)) => bail!("give exactly one of --ratio and --ipd, not both"),
            (None, None) => bail!("give exactly one of --ratio and --ipd"),
            (Some(r), None) => Sizing::Ratio(r),
            (None, Some(n)) => Sizing::Ipd(n),
        };
        let canvas = match (&args.canvas, args.preset) {
            (Some(c), _) => parse_canvas(c).map_err(anyhow::Error::msg)?,
            (None, Some(p)) => p.canvas(),
            (None, None) => COCO_CANVAS,
        };
        let defaults = EngineConfig::default();
        let pdef = PlacementConfig::default();
        let engine = EngineConfig {
            eta: args.eta.unwrap_or(defaults.eta),
            t_max: args.t_max.unwrap_or(defaults.t_max),
            patience: args.patience.unwrap_or(defaults.patience),
            placement: PlacementConfig {
                tau: args.tau.unwrap_or(pdef.tau),
                max_attempts: args.max_attempts.unwrap_or(pdef.max_attempts),
                extension_px: args.extension_px.unwrap_or(pdef.extension_px),
                ..pdef
            },
            canvas,
            seed: args.seed.unwrap_or(defaults.seed),
            iou_floor: args.iou_floor.unwrap_or(DEFAULT_IOU_FLOOR),
            background: match args.background {
                Some(Background::Dataset) => BackgroundMode::Dataset,
                _ => BackgroundMode::Segment,
            },
            workers: args.workers.unwrap_or(0),
        };
        engine.validate()?;
        let observer: ObserverSpec = args
            .observer
            .as_deref()
            .unwrap_or("heuristic")
            .parse()
            .map_err(|e| anyhow::anyhow!("--observer: {e}"))?;
        let tdef = TransportConfig::default();
        let timeout = args.observer_timeout_secs.unwrap_or(tdef.timeout.as_secs_f64());
        if !(timeout > 0.0 && timeout.is_finite()) {
            bail!("--observer-timeout-secs must be positive");
        }
        let transport = TransportConfig {
            timeout: Duration::from_secs_f64(timeout),
            retries: args.observer_retries.unwrap_or(tdef.retries),
            in_flight: args.observer_in_flight.unwrap_or(tdef.in_flight).max(1),
        };
        Ok(Self {
            annotations,
            images,
            out,
            sizing,
            engine,
            observer,
            transport,
            cache_mb: args.cache_mb.unwrap_or(512),
            keep_partial: args.keep_partial.unwrap_or(false),
        })
    }

    /// Flat echo of every setting, loadable again with `--config`.
    pub fn echo(&self) -> RunArgs {
        let e = &self.engine;
        RunArgs {
            annotations: Some(self.annotations.clone()),
            images: Some(self.images.clone()),
            out: Some(self.out.clone()),
            ratio: match self.sizing {
                Sizing::Ratio(r) => Some(r),
                Sizing::Ipd(_) => None,
            },
            ipd: match self.sizing {
                Sizing::Ipd(n) => Some(n),
                Sizing::Ratio(_) => None,
            },
            tau: Some(e.placement.tau),
            eta: Some(e.eta),
            max_attempts: Some(e.placement.max_attempts),
            extension_px: Some(e.placement.extension_px),
            canvas: Some(format!("{}x{}", e.canvas.0, e.canvas.1)),
            preset: None,
            observer: Some(self.observer.to_string()),
            seed: Some(e.seed),
            workers: Some(e.workers),
            t_max: Some(e.t_max),
            patience: Some(e.patience),
            background: Some(match e.background {
                BackgroundMode::Segment => Background::Segment,
                BackgroundMode::Dataset => Background::Dataset,
            }),
            iou_floor: Some(e.iou_floor),
            observer_timeout_secs: Some(self.transport.timeout.as_secs_f64()),
            observer_retries: Some(self.transport.retries),
            observer_in_flight: Some(self.transport.in_flight),
            cache_mb: Some(self.cache_mb),
            keep_partial: Some(self.keep_partial),
        }
    }
}
