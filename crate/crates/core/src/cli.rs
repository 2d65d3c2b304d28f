//! Command-line pipeline: configuration resolution, subcommands and run
//! artifacts.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! `key=value` config file (`--config`), then explicit flags. The resolved
//! configuration is echoed into every run directory as `config.txt`, in the
//! same format the config file accepts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crf::{CrfBackend, CrfParams};
use crate::dataio::{write_label_png, DatasetManifest, LabelMap, IGNORE};
use crate::em::{
    evaluate, fit, predict, read_checkpoint, refine_proposals, target_size, write_checkpoint, ChiScope, EmConfig,
    PrototypeBank,
};
use crate::error::{Error, Result};
use crate::eval::{hungarian_match, metrics, oracle_tally, EvalTally, Matching, Metrics, OracleMode};
use crate::primaps::{AnchorMode, IterationMode, ProposalConfig, StatisticsScope};
use crate::synthetic::{generate_dataset, SynthConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.pmck";
pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG_FILE: &str = "train.log";

#[derive(Debug, Parser)]
#[command(name = "primaps", version, about = "Principal mask proposals and prototype EM over frozen dense features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit class prototypes and write a checkpoint plus training log.
    Fit,
    /// Write mask proposals per image, optionally with the oracle report.
    Primaps,
    /// Write label and color PNGs predicted by a checkpoint.
    Predict,
    /// Score a checkpoint against the manifest labels.
    Eval,
    /// Generate a synthetic dataset with known ground truth.
    Synth,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Primaps => "primaps",
            Command::Predict => "predict",
            Command::Eval => "eval",
            Command::Synth => "synth",
        }
    }
}

/// Flags shared by all subcommands. Unset flags fall back to the config
/// file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Line-oriented key=value config file; explicit flags win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Run directory; every output lands under it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint for predict and eval (default: <out>/checkpoint.pmck).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Proposal threshold; a comma-separated list sweeps it in `primaps`.
    #[arg(long, global = true)]
    pub psi: Option<String>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub ema_decay: Option<f64>,
    #[arg(long, global = true)]
    pub ema_interval: Option<u64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// EM epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub kmeans_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub crf_iters: Option<usize>,
    /// CRF backend: exact or lattice.
    #[arg(long, global = true)]
    pub backend: Option<CrfBackend>,
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Report pseudo-label quality against the labels.
    #[arg(long, global = true)]
    pub oracle: bool,
    /// Use the z-th principal component of the unmasked features in round z.
    #[arg(long, global = true)]
    pub non_iterative: bool,
    /// Threshold against the raw principal direction instead of its nearest feature.
    #[arg(long, global = true)]
    pub no_nn_anchor: bool,
    /// Number of images for `synth`.
    #[arg(long, global = true)]
    pub images: Option<usize>,
    /// Also write RGB images in `synth`.
    #[arg(long, global = true)]
    pub with_images: bool,
}

impl Flags {
    /// Explicitly given flags as config entries.
    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("manifest", self.manifest.as_ref().map(|p| p.display().to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("psi", self.psi.clone());
        put("lr", self.lr.map(|v| v.to_string()));
        put("ema-decay", self.ema_decay.map(|v| v.to_string()));
        put("ema-interval", self.ema_interval.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("kmeans-epochs", self.kmeans_epochs.map(|v| v.to_string()));
        put("crf-iters", self.crf_iters.map(|v| v.to_string()));
        put("backend", self.backend.map(|v| v.to_string()));
        put("workers", self.workers.map(|v| v.to_string()));
        put("oracle", self.oracle.then(|| "true".into()));
        put("non-iterative", self.non_iterative.then(|| "true".into()));
        put("no-nn-anchor", self.no_nn_anchor.then(|| "true".into()));
        put("synth-images", self.images.map(|v| v.to_string()));
        put("synth-with-images", self.with_images.then(|| "true".into()));
        out
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub em: EmConfig,
    pub proposal: ProposalConfig,
    /// All requested ψ values; `proposal.psi` is the first.
    pub psi_values: Vec<f64>,
    pub crf: CrfParams,
    pub backend: CrfBackend,
    pub workers: Option<usize>,
    pub oracle: bool,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let proposal = ProposalConfig::default();
        Self {
            manifest: None,
            out: PathBuf::from("primaps-run"),
            checkpoint: None,
            em: EmConfig::default(),
            proposal,
            psi_values: vec![proposal.psi],
            crf: CrfParams::default(),
            backend: CrfBackend::Lattice,
            workers: None,
            oracle: false,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key}={value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("cannot parse {key}={value} as a boolean"))),
    }
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults, then the config file named by the flags, then the flags.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
                _ => Error::IoFailure(e),
            })?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in flags.entries() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt_path = |v: &str| (!v.is_empty() && v != "-").then(|| PathBuf::from(v));
        match key {
            "manifest" => self.manifest = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "seed" => {
                self.em.seed = parse(key, v)?;
                self.synth.seed = self.em.seed;
            }
            "psi" => {
                let values = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<Vec<f64>>>()?;
                if values.is_empty() {
                    return Err(Error::InvalidConfig("psi needs at least one value".into()));
                }
                self.proposal.psi = values[0];
                self.psi_values = values;
            }
            "coverage" => self.proposal.coverage_stop = parse(key, v)?,
            "max-masks" => self.proposal.max_masks = parse(key, v)?,
            "non-iterative" => {
                self.proposal.iteration_mode = if parse_bool(key, v)? {
                    IterationMode::FixedComponents
                } else {
                    IterationMode::IterativeMasking
                }
            }
            "no-nn-anchor" => {
                self.proposal.anchor_mode = if parse_bool(key, v)? {
                    AnchorMode::RawComponent
                } else {
                    AnchorMode::NearestNeighbor
                }
            }
            "statistics" => {
                self.proposal.statistics = match v {
                    "all" => StatisticsScope::AllPositions,
                    "unassigned" => StatisticsScope::UnassignedOnly,
                    _ => return Err(Error::InvalidConfig(format!("statistics must be all or unassigned, got {v}"))),
                }
            }
            "lr" => self.em.lr = parse(key, v)?,
            "ema-decay" => self.em.ema_decay = parse(key, v)?,
            "ema-interval" => self.em.ema_interval = parse(key, v)?,
            "focal-gamma" => self.em.focal_gamma = parse(key, v)?,
            "batch" => self.em.batch_size = parse(key, v)?,
            "epochs" => self.em.em_epochs = parse(key, v)?,
            "kmeans-epochs" => self.em.kmeans_epochs = parse(key, v)?,
            "pca-budget" => self.em.pca_budget = parse(key, v)?,
            "chi-scope" => {
                self.em.chi_scope = match v {
                    "batch" => ChiScope::Batch,
                    "image" => ChiScope::Image,
                    _ => return Err(Error::InvalidConfig(format!("chi-scope must be batch or image, got {v}"))),
                }
            }
            "crf-iters" => self.crf.iterations = parse(key, v)?,
            "crf-w-appearance" => self.crf.w_appearance = parse(key, v)?,
            "crf-w-smoothness" => self.crf.w_smoothness = parse(key, v)?,
            "crf-theta-alpha" => self.crf.theta_alpha = parse(key, v)?,
            "crf-theta-beta" => self.crf.theta_beta = parse(key, v)?,
            "crf-theta-gamma" => self.crf.theta_gamma = parse(key, v)?,
            "backend" => self.backend = parse(key, v)?,
            "workers" => {
                self.workers = match v {
                    "" | "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "oracle" => self.oracle = parse_bool(key, v)?,
            "synth-images" => self.synth.images = parse(key, v)?,
            "synth-classes" => self.synth.classes = parse(key, v)?,
            "synth-channels" => self.synth.channels = parse(key, v)?,
            "synth-grid" => self.synth.grid = parse(key, v)?,
            "synth-patch" => self.synth.patch = parse(key, v)?,
            "synth-noise" => self.synth.feature_noise = parse(key, v)?,
            "synth-overlap" => self.synth.class_overlap = parse(key, v)?,
            "synth-color-noise" => self.synth.color_noise = parse(key, v)?,
            "synth-with-images" => self.synth.with_images = parse_bool(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        self.crf.validate()?;
        for &psi in &self.psi_values {
            ProposalConfig { psi, ..self.proposal }.validate()?;
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be positive".into()));
        }
        Ok(())
    }

    /// The resolved configuration in config-file syntax.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let p = &self.proposal;
        let e = &self.em;
        let c = &self.crf;
        let s = &self.synth;
        let entries: Vec<(&str, String)> = vec![
            ("manifest", path(&self.manifest)),
            ("out", self.out.display().to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("seed", e.seed.to_string()),
            ("psi", join_f64(&self.psi_values)),
            ("coverage", p.coverage_stop.to_string()),
            ("max-masks", p.max_masks.to_string()),
            ("non-iterative", (p.iteration_mode == IterationMode::FixedComponents).to_string()),
            ("no-nn-anchor", (p.anchor_mode == AnchorMode::RawComponent).to_string()),
            (
                "statistics",
                match p.statistics {
                    StatisticsScope::AllPositions => "all",
                    StatisticsScope::UnassignedOnly => "unassigned",
                }
                .into(),
            ),
            ("lr", e.lr.to_string()),
            ("ema-decay", e.ema_decay.to_string()),
            ("ema-interval", e.ema_interval.to_string()),
            ("focal-gamma", e.focal_gamma.to_string()),
            ("batch", e.batch_size.to_string()),
            ("epochs", e.em_epochs.to_string()),
            ("kmeans-epochs", e.kmeans_epochs.to_string()),
            ("pca-budget", e.pca_budget.to_string()),
            (
                "chi-scope",
                match e.chi_scope {
                    ChiScope::Batch => "batch",
                    ChiScope::Image => "image",
                }
                .into(),
            ),
            ("crf-iters", c.iterations.to_string()),
            ("crf-w-appearance", c.w_appearance.to_string()),
            ("crf-w-smoothness", c.w_smoothness.to_string()),
            ("crf-theta-alpha", c.theta_alpha.to_string()),
            ("crf-theta-beta", c.theta_beta.to_string()),
            ("crf-theta-gamma", c.theta_gamma.to_string()),
            ("backend", self.backend.to_string()),
            ("workers", self.workers.map_or("auto".into(), |w| w.to_string())),
            ("oracle", self.oracle.to_string()),
            ("synth-images", s.images.to_string()),
            ("synth-classes", s.classes.to_string()),
            ("synth-channels", s.channels.to_string()),
            ("synth-grid", s.grid.to_string()),
            ("synth-patch", s.patch.to_string()),
            ("synth-noise", s.feature_noise.to_string()),
            ("synth-overlap", s.class_overlap.to_string()),
            ("synth-color-noise", s.color_noise.to_string()),
            ("synth-with-images", s.with_images.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }

    fn load_manifest(&self) -> Result<DatasetManifest> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("--manifest is required".into()))?;
        let manifest = DatasetManifest::open(path)?;
        if manifest.is_empty() {
            return Err(Error::InvalidManifest(format!("{} lists no records", path.display())));
        }
        Ok(manifest)
    }

    fn single_psi(&self) -> Result<()> {
        if self.psi_values.len() > 1 {
            return Err(Error::InvalidConfig("a psi sweep is only supported by `primaps`".into()));
        }
        Ok(())
    }
}

/// Fixed 256-entry palette: an 8x8x4 RGB grid in a seeded order, with black
/// moved to the ignore id.
pub fn palette() -> [[u8; 3]; 256] {
    const LEVELS_RG: [u8; 8] = [0, 36, 73, 109, 146, 182, 219, 255];
    const LEVELS_B: [u8; 4] = [0, 85, 170, 255];
    let mut colors: Vec<[u8; 3]> = Vec::with_capacity(256);
    for &r in &LEVELS_RG {
        for &g in &LEVELS_RG {
            for &b in &LEVELS_B {
                colors.push([r, g, b]);
            }
        }
    }
    colors.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed_c010));
    let black = colors.iter().position(|c| *c == [0, 0, 0]).expect("grid contains black");
    colors.swap(black, usize::from(IGNORE));
    let mut out = [[0u8; 3]; 256];
    out.copy_from_slice(&colors);
    out
}

pub fn write_color_png(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let pal = palette();
    let raw: Vec<u8> = labels.ids().iter().flat_map(|&id| pal[usize::from(id)]).collect();
    let img = image::RgbImage::from_raw(labels.width() as u32, labels.height() as u32, raw)
        .ok_or_else(|| Error::DimensionMismatch("color buffer size".into()))?;
    img.save(path.as_ref())?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_config_echo(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out)?;
    std::fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    let work = || execute(cli.command, &cfg);
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    }
}

pub fn execute(command: Command, cfg: &RunConfig) -> Result<()> {
    info!("{} -> {}", command.name(), cfg.out.display());
    match command {
        Command::Fit => cmd_fit(cfg),
        Command::Primaps => cmd_primaps(cfg),
        Command::Predict => cmd_predict(cfg),
        Command::Eval => cmd_eval(cfg).map(|_| ()),
        Command::Synth => cmd_synth(cfg).map(|_| ()),
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    cfg.single_psi()?;
    let manifest = cfg.load_manifest()?;
    write_config_echo(cfg)?;
    let outcome = fit(&manifest, &cfg.em, &cfg.proposal, &cfg.crf, cfg.backend)?;
    std::fs::write(cfg.out.join(TRAIN_LOG_FILE), outcome.log.to_text())?;
    write_checkpoint(&outcome.bank, &cfg.to_text(), cfg.out.join(CHECKPOINT_FILE))?;
    if let Some(last) = outcome.log.epochs.last() {
        info!("final phase={} epoch={} loss={:.6}", last.phase, last.epoch, last.loss);
    }
    Ok(())
}

fn psi_dir(cfg: &RunConfig, psi: f64) -> PathBuf {
    if cfg.psi_values.len() > 1 {
        cfg.out.join(format!("psi_{psi}"))
    } else {
        cfg.out.clone()
    }
}

pub fn cmd_primaps(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.load_manifest()?;
    write_config_echo(cfg)?;
    let k = manifest.num_classes;
    for &psi in &cfg.psi_values {
        let pcfg = ProposalConfig { psi, ..cfg.proposal };
        let dir = psi_dir(cfg, psi);
        let masks_dir = dir.join("masks");
        create_dir(&masks_dir)?;
        let tallies: Vec<Option<(EvalTally, EvalTally)>> = manifest
            .records
            .par_iter()
            .map(|r| {
                let features = r.load_features()?;
                let image = r.load_image()?;
                let size = target_size(r, &features)?;
                let stem = r.stem();
                let (stack, regions) = refine_proposals(&features, image.as_ref(), size, &pcfg, &cfg.crf, cfg.backend)?;
                write_label_png(
                    &LabelMap::new(stack.height(), stack.width(), stack.index_bytes())?,
                    masks_dir.join(format!("{stem}_grid.png")),
                )?;
                write_label_png(
                    &LabelMap::new(size.0, size.1, regions.index_bytes())?,
                    masks_dir.join(format!("{stem}.png")),
                )?;
                info!(
                    "{stem}: psi={psi} masks={} coverage={:.4}",
                    stack.len(),
                    stack.coverage()
                );
                if !cfg.oracle {
                    return Ok(None);
                }
                match r.load_label(k)? {
                    Some(gt) => Ok(Some((
                        oracle_tally(&stack, &gt, k, OracleMode::PseudoOnly)?,
                        oracle_tally(&stack, &gt, k, OracleMode::All)?,
                    ))),
                    None => Ok(None),
                }
            })
            .collect::<Result<_>>()?;
        if cfg.oracle {
            let mut pseudo = EvalTally::new(k);
            let mut all = EvalTally::new(k);
            let mut any = false;
            for (p, a) in tallies.iter().flatten() {
                pseudo.merge(p)?;
                all.merge(a)?;
                any = true;
            }
            if !any {
                warn!("--oracle requested but the manifest has no labels");
                continue;
            }
            let id = Matching::identity(k);
            let report = oracle_report(psi, &metrics(&pseudo, &id)?, &metrics(&all, &id)?);
            print!("{report}");
            std::fs::write(dir.join("oracle.txt"), report)?;
        }
    }
    Ok(())
}

fn oracle_report(psi: f64, pseudo: &Metrics, all: &Metrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "psi={psi}");
    let _ = writeln!(out, "pseudo_acc={:.6}", pseudo.acc);
    let _ = writeln!(out, "pseudo_miou={:.6}", pseudo.miou);
    let _ = writeln!(out, "all_acc={:.6}", all.acc);
    let _ = writeln!(out, "all_miou={:.6}", all.miou);
    out
}

fn load_bank(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<PrototypeBank> {
    let (bank, _) = read_checkpoint(cfg.checkpoint_path())?;
    if bank.num_classes() != manifest.num_classes {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has K={}, manifest has K={}",
            bank.num_classes(),
            manifest.num_classes
        )));
    }
    Ok(bank)
}

fn check_channels(bank: &PrototypeBank, channels: usize, stem: &str) -> Result<()> {
    if bank.channels() != channels {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has C={}, {stem} has C={channels}",
            bank.channels()
        )));
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    cfg.single_psi()?;
    let manifest = cfg.load_manifest()?;
    let bank = load_bank(cfg, &manifest)?;
    write_config_echo(cfg)?;
    let dir = cfg.out.join("pred");
    create_dir(&dir)?;
    manifest.records.par_iter().try_for_each(|r| {
        let features = r.load_features()?;
        let stem = r.stem();
        check_channels(&bank, features.channels(), &stem)?;
        let image = r.load_image()?;
        let size = target_size(r, &features)?;
        let pred = predict(&bank, &features, image.as_ref(), Some(size), &cfg.crf, cfg.backend)?;
        write_label_png(&pred, dir.join(format!("{stem}.png")))?;
        write_color_png(&pred, dir.join(format!("{stem}_color.png")))
    })
}

/// Scores the checkpoint, writes `eval.txt`, `eval.kv` and `confusion.csv`
/// and returns the metrics.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Metrics> {
    cfg.single_psi()?;
    let manifest = cfg.load_manifest()?;
    let bank = load_bank(cfg, &manifest)?;
    if manifest.records.iter().all(|r| r.label_path.is_none()) {
        return Err(Error::InvalidManifest("eval needs labels".into()));
    }
    for r in &manifest.records {
        check_channels(&bank, r.load_features()?.channels(), &r.stem())?;
    }
    write_config_echo(cfg)?;
    let tally = evaluate(&manifest, &bank, &cfg.crf, cfg.backend)?;
    let matching = hungarian_match(&tally);
    let m = metrics(&tally, &matching)?;
    let perm = matching.perm.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut report = m.to_table();
    let _ = writeln!(report, "matching (cluster -> class): {perm}");
    let mut kv = m.to_kv();
    let _ = writeln!(kv, "matching={perm}");
    let _ = writeln!(kv, "ignored={}", tally.ignored);
    let _ = writeln!(kv, "missed={}", tally.missed.iter().sum::<u64>());
    print!("{report}");
    std::fs::write(cfg.out.join("eval.txt"), report)?;
    std::fs::write(cfg.out.join("eval.kv"), kv)?;
    std::fs::write(cfg.out.join("confusion.csv"), tally.confusion_csv(&matching))?;
    Ok(m)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<DatasetManifest> {
    let manifest = generate_dataset(&cfg.synth, &cfg.out)?;
    std::fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    info!("wrote {} synthetic records to {}", manifest.len(), cfg.out.display());
    Ok(manifest)
}
