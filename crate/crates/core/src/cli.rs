//! Command-line front end: one JSON run configuration, one subcommand per
//! stage, and a resumable `pipeline` that skips stages whose inputs,
//! settings and outputs are unchanged.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::causal::{self, CausalSummary, Period, World};
use crate::diagnostics::{self, DistanceBin};
use crate::error::{Error, Result};
use crate::extremes::{TimeIndex, N_PARAMS, PARAM_NAMES};
use crate::hotspot;
use crate::lattice::{self, Adjacency, Cell, CovariateTable, DesignMatrix, GridGraph};
use crate::maxstep::{self, CellSeries, MaxOptions};
use crate::simulate::{self, SimConfig};
use crate::smooth::{self, GibbsModel, GibbsOptions, Hyperpriors, PosteriorDraws, Schedule};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "EXTATTR_THREADS";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HotspotConfig {
    pub thresholds: Vec<f64>,
    pub alpha: f64,
    /// Averaging period of δ; the whole record when absent.
    pub period: Option<Period>,
}

impl Default for HotspotConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.35, 0.65], alpha: 0.05, period: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Quantile level of the empirical χ-measure.
    pub chi_u: f64,
    pub n_bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { chi_u: 0.95, n_bins: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// Explicit edge list; overrides lattice adjacency.
    pub adjacency: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Grid spacing in degrees; inferred from the centroids when absent.
    pub resolution: Option<f64>,
    pub adjacency_rule: Adjacency,
    /// Years used from the panel; all when absent.
    pub period: Option<Period>,
    pub max: MaxOptions,
    pub schedule: Schedule,
    pub chains: usize,
    pub seed: u64,
    pub hyperpriors: Hyperpriors,
    /// Extra sub-periods for δ summaries besides the whole record.
    pub causal_periods: Vec<Period>,
    pub hotspot: HotspotConfig,
    pub diagnostics: DiagnosticsConfig,
    pub threads: Option<usize>,
    /// When set, the pipeline generates its own panel first.
    pub simulate: Option<SimConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            panel: None,
            covariates: None,
            adjacency: None,
            output_dir: PathBuf::from("extattr-out"),
            resolution: None,
            adjacency_rule: Adjacency::Rook,
            period: None,
            max: MaxOptions::default(),
            schedule: Schedule::default(),
            chains: 4,
            seed: 2024,
            hyperpriors: Hyperpriors::default(),
            causal_periods: Vec::new(),
            hotspot: HotspotConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            threads: None,
            simulate: None,
        }
    }
}

impl RunConfig {
    /// Parse a JSON config. Relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Validation(format!("config file {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: invalid config: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.panel, &mut cfg.covariates, &mut cfg.adjacency].into_iter().flatten() {
            rebase(p);
        }
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    /// Settings-only checks; file existence is checked per stage.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.hyperpriors.validate()?;
        if self.chains == 0 {
            return Err(Error::Validation("chains must be at least 1".into()));
        }
        if let Some(r) = self.resolution {
            if !(r > 0.0) {
                return Err(Error::Validation(format!("resolution must be positive, got {r}")));
            }
        }
        for p in self.period.iter().chain(&self.causal_periods).chain(&self.hotspot.period) {
            if p.end < p.start {
                return Err(Error::Validation(format!("empty period {}", p.label())));
            }
        }
        if !(self.hotspot.alpha > 0.0 && self.hotspot.alpha < 1.0) {
            return Err(Error::Validation(format!("hotspot alpha must lie in (0, 1), got {}", self.hotspot.alpha)));
        }
        if self.hotspot.thresholds.iter().any(|u| !u.is_finite()) {
            return Err(Error::Validation("hotspot thresholds must be finite".into()));
        }
        if !(self.diagnostics.chi_u > 0.0 && self.diagnostics.chi_u < 1.0) || self.diagnostics.n_bins == 0 {
            return Err(Error::Validation("diagnostics: chi_u must lie in (0, 1) and n_bins be positive".into()));
        }
        if !(self.max.max_flagged_frac >= 0.0 && self.max.max_flagged_frac <= 1.0) {
            return Err(Error::Validation("max.max_flagged_frac must lie in [0, 1]".into()));
        }
        if let Some(s) = &self.simulate {
            s.validate().map_err(|e| Error::Validation(format!("simulate: {e}")))?;
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.output_dir.clone() }
    }

    pub fn panel_path(&self) -> Result<PathBuf> {
        match (&self.panel, &self.simulate) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(_)) => Ok(self.layout().data().join("panel.csv")),
            (None, None) => Err(Error::Validation("no panel file configured".into())),
        }
    }

    pub fn covariates_path(&self) -> Result<PathBuf> {
        match (&self.covariates, &self.simulate) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(_)) => Ok(self.layout().data().join("covariates.csv")),
            (None, None) => Err(Error::Validation("no covariate file configured".into())),
        }
    }

    /// Worker count: the configured value (or all cores), capped by
    /// `EXTATTR_THREADS`.
    pub fn worker_threads(&self) -> usize {
        let base = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
        cap.map_or(base, |c| base.min(c)).max(1)
    }
}

/// Directory layout under the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn max(&self) -> PathBuf {
        self.root.join("max")
    }
    pub fn draws(&self) -> PathBuf {
        self.root.join("draws")
    }
    pub fn causal(&self) -> PathBuf {
        self.root.join("causal")
    }
    pub fn hotspot(&self) -> PathBuf {
        self.root.join("hotspot")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics")
    }
    pub fn maps(&self) -> PathBuf {
        self.root.join("maps")
    }
    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} file {} does not exist", p.display())))
    }
}

// ---------------------------------------------------------------------------
// Shared inputs
// ---------------------------------------------------------------------------

/// Smallest positive centroid spacing.
pub fn infer_resolution(cells: &[Cell]) -> f64 {
    let spacing = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 1e-9).fold(f64::INFINITY, f64::min)
    };
    let r = spacing(cells.iter().map(|c| c.lon).collect()).min(spacing(cells.iter().map(|c| c.lat).collect()));
    if r.is_finite() {
        r
    } else {
        1.0
    }
}

/// Grid graph plus z-scored covariates in graph order.
pub fn load_grid(cfg: &RunConfig) -> Result<(GridGraph, CovariateTable)> {
    let cp = cfg.covariates_path()?;
    require_file(&cp, "covariate")?;
    let cov = CovariateTable::read_csv(&cp)?;
    let cells = cov.cells();
    let graph = match &cfg.adjacency {
        Some(a) => {
            require_file(a, "adjacency")?;
            GridGraph::from_edges(cells, &lattice::read_adjacency_csv(a)?)?
        }
        None => {
            let res = cfg
                .resolution
                .or_else(|| cfg.simulate.as_ref().map(|s| s.resolution))
                .unwrap_or_else(|| infer_resolution(&cells));
            GridGraph::build(cells, res, cfg.adjacency_rule)?
        }
    };
    let cov = cov.aligned_to(&graph)?.standardized();
    Ok((graph, cov))
}

pub fn load_panel(cfg: &RunConfig, graph: &GridGraph) -> Result<Vec<CellSeries>> {
    let p = cfg.panel_path()?;
    require_file(&p, "panel")?;
    let panel = maxstep::read_panel_csv(&p, cfg.period.map(|p| (p.start, p.end)))?;
    maxstep::align_panel(panel, graph)
}

fn time_index(panel: &[CellSeries]) -> Result<TimeIndex> {
    panel.first().map(|s| s.time.clone()).ok_or_else(|| Error::Ingestion("empty panel".into()))
}

fn chain_path(layout: &Layout, c: usize) -> PathBuf {
    layout.draws().join(format!("chain{c}.draws"))
}

pub fn load_draws(cfg: &RunConfig) -> Result<Vec<PosteriorDraws>> {
    let layout = cfg.layout();
    (0..cfg.chains)
        .map(|c| {
            let p = chain_path(&layout, c);
            require_file(&p, "posterior draws")?;
            PosteriorDraws::read(&p)
        })
        .collect()
}

fn full_period(time: &TimeIndex) -> Result<Period> {
    let lo = *time.years.iter().min().ok_or_else(|| Error::Ingestion("no years".into()))?;
    let hi = *time.years.iter().max().expect("non-empty");
    Period::new(lo, hi)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Max,
    Smooth,
    Causal,
    Hotspot,
    Diagnose,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Max => "max",
            Stage::Smooth => "smooth",
            Stage::Causal => "causal",
            Stage::Hotspot => "hotspot",
            Stage::Diagnose => "diagnose",
        }
    }

    fn output_dir(&self, l: &Layout) -> PathBuf {
        match self {
            Stage::Simulate => l.data(),
            Stage::Max => l.max(),
            Stage::Smooth => l.draws(),
            Stage::Causal => l.causal(),
            Stage::Hotspot => l.hotspot(),
            Stage::Diagnose => l.diagnostics(),
        }
    }

    /// Settings that influence this stage's numbers.
    fn settings(&self, cfg: &RunConfig) -> serde_json::Value {
        let grid = json!({ "resolution": cfg.resolution, "adjacency_rule": cfg.adjacency_rule });
        match self {
            Stage::Simulate => json!({ "simulate": cfg.simulate }),
            Stage::Max => json!({ "grid": grid, "period": cfg.period, "max": cfg.max }),
            Stage::Smooth => json!({
                "grid": grid,
                "schedule": cfg.schedule,
                "chains": cfg.chains,
                "seed": cfg.seed,
                "hyperpriors": cfg.hyperpriors,
            }),
            Stage::Causal => json!({ "grid": grid, "period": cfg.period, "causal_periods": cfg.causal_periods }),
            Stage::Hotspot => json!({ "grid": grid, "period": cfg.period, "hotspot": cfg.hotspot }),
            Stage::Diagnose => json!({ "grid": grid, "period": cfg.period, "diagnostics": cfg.diagnostics }),
        }
    }

    fn seed(&self, cfg: &RunConfig) -> Option<u64> {
        match self {
            Stage::Simulate => cfg.simulate.as_ref().map(|s| s.seed),
            Stage::Max => Some(cfg.max.seed),
            Stage::Smooth => Some(cfg.seed),
            _ => None,
        }
    }

    /// Files read by the stage (directories stand for all files inside).
    fn inputs(&self, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
        let l = cfg.layout();
        let mut grid = vec![cfg.covariates_path()?];
        grid.extend(cfg.adjacency.clone());
        let mut v = match self {
            Stage::Simulate => vec![],
            Stage::Max => vec![cfg.panel_path()?],
            Stage::Smooth => vec![l.max()],
            Stage::Causal | Stage::Hotspot => vec![cfg.panel_path()?, l.draws()],
            Stage::Diagnose => vec![cfg.panel_path()?, l.max(), l.draws()],
        };
        if *self != Stage::Simulate {
            v.extend(grid);
        }
        Ok(v)
    }

    pub fn run(&self, cfg: &RunConfig) -> Result<()> {
        let out = self.output_dir(&cfg.layout());
        if *self == Stage::Max {
            require_file(&cfg.panel_path()?, "panel")?;
            require_file(&cfg.covariates_path()?, "covariate")?;
        }
        fresh_dir(&out)?;
        match self {
            Stage::Simulate => run_simulate(cfg, &out),
            Stage::Max => run_max_stage(cfg, &out),
            Stage::Smooth => run_smooth_stage(cfg, &out),
            Stage::Causal => run_causal_stage(cfg, &out),
            Stage::Hotspot => run_hotspot_stage(cfg, &out),
            Stage::Diagnose => run_diagnose_stage(cfg, &out),
        }
    }
}

fn run_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sim = cfg.simulate.clone().unwrap_or_default();
    let files = simulate::generate_panel(&sim, out)?;
    log::info!("simulated {} cells into {}", sim.n_cells(), files.panel.display());
    Ok(())
}

fn run_max_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (graph, _) = load_grid(cfg)?;
    let panel = load_panel(cfg, &graph)?;
    let res = maxstep::run_max(&panel, &cfg.max, cfg.worker_threads())?;
    if res.n_flagged() > 0 {
        log::warn!("{} of {} cells flagged ({} failed)", res.n_flagged(), res.n_cells(), res.n_failed());
    }
    maxstep::write_max_result(out, &res, &cfg.max)
}

fn run_smooth_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (graph, cov) = load_grid(cfg)?;
    let l = cfg.layout();
    require_file(&l.max().join("max_manifest.json"), "Max-step manifest")?;
    let max = maxstep::read_max_result(&l.max())?.aligned_to(&graph)?;
    let design = DesignMatrix::build(&graph, &cov)?;
    let model = GibbsModel::new(&max, &design, &graph, cfg.hyperpriors)?;
    let threads = cfg.worker_threads();
    let opts = GibbsOptions {
        schedule: cfg.schedule,
        n_chains: cfg.chains,
        seed: cfg.seed,
        threads,
        postmortem_dir: Some(out.to_path_buf()),
    };
    log::info!(
        "sampling {} chains × {} iterations ({} retained each)",
        cfg.chains,
        cfg.schedule.iters,
        cfg.schedule.retained()
    );
    for d in smooth::run_gibbs(&model, &opts)? {
        d.write(out, &format!("chain{}", d.chain), threads)?;
    }
    Ok(())
}

fn run_causal_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (graph, _) = load_grid(cfg)?;
    let time = time_index(&load_panel(cfg, &graph)?)?;
    let chains = load_draws(cfg)?;
    let mut periods = vec![full_period(&time)?];
    for p in &cfg.causal_periods {
        if !periods.contains(p) {
            periods.push(*p);
        }
    }
    for p in periods {
        let f = causal::delta_field(&chains, p, &time)?;
        let label = format!("delta_{}", p.label());
        CausalSummary::from_field(&f, &graph, label.clone(), Some(p))?.write_csv(&out.join(format!("{label}.csv")))?;
    }
    for w in [World::Factual, World::Counterfactual, World::Difference] {
        let s = causal::trend_summary(&chains, w, &time, &graph)?;
        s.write_csv(&out.join(format!("{}.csv", s.label)))?;
    }
    Ok(())
}

/// File stem of the hotspot outputs for threshold `u`.
pub fn hotspot_stem(u: f64) -> String {
    format!("hotspot_u{u}")
}

fn run_hotspot_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (graph, _) = load_grid(cfg)?;
    let time = time_index(&load_panel(cfg, &graph)?)?;
    let chains = load_draws(cfg)?;
    let period = match cfg.hotspot.period {
        Some(p) => p,
        None => full_period(&time)?,
    };
    let field = causal::delta_field(&chains, period, &time)?;
    for &u in &cfg.hotspot.thresholds {
        let r = hotspot::estimate_region(&field, u, cfg.hotspot.alpha)?;
        log::info!("u = {u}: region holds {:.1}% of cells (ĉ = {:.4})", 100.0 * r.coverage, r.c_hat);
        r.write(out, &hotspot_stem(u))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DiagnosticsSummary {
    n_parameters: usize,
    n_flagged: usize,
    geweke_fraction_below_1_96: f64,
    max_rhat: Option<f64>,
    min_ess: Option<f64>,
}

#[derive(Debug, Serialize)]
struct VariogramRow<'a> {
    parameter: &'a str,
    lo: f64,
    hi: f64,
    distance: f64,
    value: f64,
    n_pairs: usize,
}

impl<'a> VariogramRow<'a> {
    fn new(parameter: &'a str, b: &DistanceBin) -> Self {
        Self { parameter, lo: b.lo, hi: b.hi, distance: b.distance, value: b.value, n_pairs: b.n_pairs }
    }
}

fn distance_edges(cells: &[Cell], n_bins: usize) -> Vec<f64> {
    let mut maxd: f64 = 0.0;
    for a in cells {
        for b in cells {
            maxd = maxd.max(((a.lon - b.lon).powi(2) + (a.lat - b.lat).powi(2)).sqrt());
        }
    }
    let top = if maxd > 0.0 { maxd * (1.0 + 1e-9) } else { 1.0 };
    (0..=n_bins).map(|k| top * k as f64 / n_bins as f64).collect()
}

fn run_diagnose_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let chains = load_draws(cfg)?;
    let diags = diagnostics::diagnose(&chains)?;
    diagnostics::write_diagnostics(out, &diags)?;
    let z: Vec<f64> = diags.iter().flat_map(|d| d.geweke_z.iter().copied()).filter(|v| v.is_finite()).collect();
    let summary = DiagnosticsSummary {
        n_parameters: diags.len(),
        n_flagged: diags.iter().filter(|d| d.flagged).count(),
        geweke_fraction_below_1_96: z.iter().filter(|v| v.abs() < 1.96).count() as f64 / z.len().max(1) as f64,
        max_rhat: diags.iter().map(|d| d.rhat).filter(|v| v.is_finite()).reduce(f64::max),
        min_ess: diags.iter().map(|d| d.ess).filter(|v| v.is_finite()).reduce(f64::min),
    };
    if summary.max_rhat.is_some_and(|r| r > 1.1) {
        log::warn!("largest R̂ is {:.3}", summary.max_rhat.unwrap_or(f64::NAN));
    }
    let p = out.join("summary.json");
    let s = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&p, e))?;
    std::fs::write(&p, s + "\n").map_err(|e| Error::io(&p, e))?;

    // spatial dependence of the data and of the Max-step residuals
    let (graph, cov) = load_grid(cfg)?;
    let panel = load_panel(cfg, &graph)?;
    let cent: Vec<(f64, f64)> = graph.cells.iter().map(|c| (c.lon, c.lat)).collect();
    let edges = distance_edges(&graph.cells, cfg.diagnostics.n_bins);
    if graph.len() >= 2 {
        for (name, pick) in [("factual", true), ("counterfactual", false)] {
            let series: Vec<Vec<f64>> =
                panel.iter().map(|s| if pick { s.y_f.clone() } else { s.y_cf.clone() }).collect();
            let bins = diagnostics::empirical_chi(&series, &cent, cfg.diagnostics.chi_u, &edges)?;
            diagnostics::write_bins_csv(&out.join(format!("chi_{name}.csv")), &bins)?;
        }

        let max = maxstep::read_max_result(&cfg.layout().max())?.aligned_to(&graph)?;
        let design = DesignMatrix::build(&graph, &cov)?;
        let ng = chains[0].q * N_PARAMS;
        let total: usize = chains.iter().map(|c| c.n_draws()).sum();
        let mut gbar = vec![0.0; ng];
        for ch in &chains {
            for (i, v) in ch.gamma.iter().enumerate() {
                gbar[i % ng] += v / total as f64;
            }
        }
        let fit = design.mul(&gbar);
        let usable: Vec<usize> = (0..graph.len()).filter(|&i| max.status[i].usable()).collect();
        let ucent: Vec<(f64, f64)> = usable.iter().map(|&i| cent[i]).collect();
        let p = out.join("variogram.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
        if usable.len() >= 2 {
            for (k, name) in PARAM_NAMES.iter().enumerate() {
                let r: Vec<f64> = usable.iter().map(|&i| max.eta_hat[N_PARAMS * i + k] - fit[N_PARAMS * i + k]).collect();
                for bin in diagnostics::empirical_variogram(&r, &ucent, &edges)? {
                    w.serialize(VariogramRow::new(name, &bin)).map_err(|e| Error::csv(&p, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Path → SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// Path → SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash every file under the given paths (sorted; missing paths are skipped).
fn hash_tree(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_file() {
            out.insert(p.display().to_string(), sha256_file(p)?);
        } else if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            out.extend(hash_tree(&entries)?);
        }
    }
    Ok(out)
}

fn config_hash(stage: Stage, cfg: &RunConfig) -> String {
    let v = json!({ "stage": stage.name(), "version": VERSION, "settings": stage.settings(cfg) });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn manifest_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.layout().manifests().join(format!("{}.json", stage.name()))
}

fn current_manifest(stage: Stage, cfg: &RunConfig) -> Result<StageManifest> {
    Ok(StageManifest {
        stage: stage.name().into(),
        tool_version: VERSION.into(),
        config_hash: config_hash(stage, cfg),
        seed: stage.seed(cfg),
        inputs: hash_tree(&stage.inputs(cfg)?)?,
        outputs: hash_tree(&[stage.output_dir(&cfg.layout())])?,
    })
}

fn write_manifest(stage: Stage, cfg: &RunConfig) -> Result<()> {
    let m = current_manifest(stage, cfg)?;
    let dir = cfg.layout().manifests();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = manifest_path(cfg, stage);
    let s = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&p, e))?;
    std::fs::write(&p, s + "\n").map_err(|e| Error::io(&p, e))
}

/// Whether the recorded manifest still matches settings, inputs and outputs.
pub fn is_up_to_date(stage: Stage, cfg: &RunConfig) -> Result<bool> {
    let p = manifest_path(cfg, stage);
    let Ok(text) = std::fs::read_to_string(&p) else {
        return Ok(false);
    };
    let Ok(old) = serde_json::from_str::<StageManifest>(&text) else {
        return Ok(false);
    };
    Ok(!old.outputs.is_empty() && current_manifest(stage, cfg)? == old)
}

/// Run one stage and record its manifest.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<()> {
    stage.run(cfg)?;
    write_manifest(stage, cfg)
}

/// Outcome of a pipeline run, stage by stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineReport {
    pub ran: Vec<&'static str>,
    pub skipped: Vec<&'static str>,
}

pub fn pipeline_stages(cfg: &RunConfig) -> Vec<Stage> {
    let mut v = Vec::new();
    if cfg.simulate.is_some() {
        v.push(Stage::Simulate);
    }
    v.extend([Stage::Max, Stage::Smooth, Stage::Causal, Stage::Hotspot, Stage::Diagnose]);
    v
}

/// Run every stage in order, skipping those that are up to date unless
/// `force` is set. Errors name the failing stage.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> Result<PipelineReport> {
    cfg.validate()?;
    if cfg.simulate.is_none() {
        require_file(&cfg.panel_path()?, "panel")?;
        require_file(&cfg.covariates_path()?, "covariate")?;
    }
    let mut report = PipelineReport { ran: Vec::new(), skipped: Vec::new() };
    for stage in pipeline_stages(cfg) {
        if !force && is_up_to_date(stage, cfg)? {
            println!("{}: up to date", stage.name());
            report.skipped.push(stage.name());
            continue;
        }
        log::info!("running stage {}", stage.name());
        run_stage(stage, cfg).map_err(|e| {
            eprintln!("stage `{}` failed", stage.name());
            e
        })?;
        println!("{}: done", stage.name());
        report.ran.push(stage.name());
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Map export
// ---------------------------------------------------------------------------

/// One cell of one exported field. Summary fields fill the moments, region
/// fields fill `T` and `in_region`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub field: String,
    pub cell_id: String,
    pub lon: f64,
    pub lat: f64,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub q05: Option<f64>,
    pub q50: Option<f64>,
    pub q95: Option<f64>,
    #[serde(rename = "T")]
    pub t: Option<f64>,
    pub in_region: Option<bool>,
}

pub const MAP_COLUMNS: [&str; 11] = ["field", "cell_id", "lon", "lat", "mean", "sd", "q05", "q50", "q95", "T", "in_region"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapField {
    pub name: String,
    /// `summary` or `region`.
    pub kind: String,
    pub source: String,
    pub n_rows: usize,
    pub threshold: Option<f64>,
    pub alpha: Option<f64>,
    pub c_hat: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsMetadata {
    pub format_version: u32,
    pub columns: Vec<String>,
    pub fields: Vec<MapField>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    v.sort();
    Ok(v)
}

/// Long-format `maps.csv` and `maps.json` from summary and region CSVs.
/// Cell coordinates come from the summaries, else from `cells`.
pub fn export_maps(summaries: &[PathBuf], regions: &[PathBuf], cells: &[Cell], out: &Path) -> Result<MapsMetadata> {
    if summaries.is_empty() && regions.is_empty() {
        return Err(Error::Validation("nothing to export: no summary or region files".into()));
    }
    let mut coords: BTreeMap<String, (f64, f64)> = cells.iter().map(|c| (c.id.clone(), (c.lon, c.lat))).collect();
    let mut rows = Vec::new();
    let mut fields = Vec::new();
    for p in summaries {
        require_file(p, "summary")?;
        let s = CausalSummary::read_csv(p, stem(p))?;
        for r in &s.rows {
            coords.insert(r.cell_id.clone(), (r.lon, r.lat));
            rows.push(MapRow {
                field: s.label.clone(),
                cell_id: r.cell_id.clone(),
                lon: r.lon,
                lat: r.lat,
                mean: Some(r.mean),
                sd: Some(r.sd),
                q05: Some(r.q05),
                q50: Some(r.q50),
                q95: Some(r.q95),
                t: None,
                in_region: None,
            });
        }
        fields.push(MapField {
            name: s.label,
            kind: "summary".into(),
            source: p.display().to_string(),
            n_rows: s.rows.len(),
            threshold: None,
            alpha: None,
            c_hat: None,
            coverage: None,
        });
    }
    for p in regions {
        require_file(p, "region")?;
        let name = stem(p);
        let side = p.with_extension("json");
        let meta: Option<hotspot::HotspotSummary> =
            std::fs::read_to_string(&side).ok().and_then(|t| serde_json::from_str(&t).ok());
        let recs = hotspot::read_region_csv(p)?;
        for (id, t, inside) in &recs {
            let &(lon, lat) = coords
                .get(id)
                .ok_or_else(|| Error::Ingestion(format!("{}: no coordinates for cell {id}", p.display())))?;
            rows.push(MapRow {
                field: name.clone(),
                cell_id: id.clone(),
                lon,
                lat,
                mean: None,
                sd: None,
                q05: None,
                q50: None,
                q95: None,
                t: Some(*t),
                in_region: Some(*inside),
            });
        }
        fields.push(MapField {
            name,
            kind: "region".into(),
            source: p.display().to_string(),
            n_rows: recs.len(),
            threshold: meta.as_ref().map(|m| m.u),
            alpha: meta.as_ref().map(|m| m.alpha),
            c_hat: meta.as_ref().map(|m| m.c_hat),
            coverage: meta.as_ref().map(|m| m.coverage),
        });
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("maps.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    let meta = MapsMetadata { format_version: 1, columns: MAP_COLUMNS.iter().map(|s| s.to_string()).collect(), fields };
    let p = out.join("maps.json");
    let s = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&p, e))?;
    std::fs::write(&p, s + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(meta)
}

pub fn read_maps_csv(path: &Path) -> Result<Vec<MapRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    for (i, name) in MAP_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::Ingestion(format!(
                "{}: column {} should be `{name}`, found `{}`",
                path.display(),
                i + 1,
                headers.get(i).unwrap_or("")
            )));
        }
    }
    rdr.deserialize().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "extattr", version, about = "Attribution of temperature extremes on gridded factual/counterfactual panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// First year used from the panel.
    #[arg(long)]
    pub start: Option<i32>,
    /// Last year used from the panel.
    #[arg(long)]
    pub end: Option<i32>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SmoothArgs {
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct HotspotArgs {
    /// Threshold for δ; repeat for several maps.
    #[arg(long = "threshold")]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel, covariates and truth manifest.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
        #[arg(long)]
        start_year: Option<i32>,
        #[arg(long)]
        end_year: Option<i32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-cell penalized maximum likelihood with Laplace approximation.
    Max {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Gibbs sampling of the latent Gaussian model.
    Smooth {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        smooth: SmoothArgs,
    },
    /// Posterior summaries of δ and of the trend fields.
    Causal {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Outer credible regions for the exceedance set of δ.
    Hotspot {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        hotspot: HotspotArgs,
    },
    /// Convergence diagnostics and spatial dependence summaries.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// All stages in order, skipping those already up to date.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        smooth: SmoothArgs,
        #[command(flatten)]
        hotspot: HotspotArgs,
        /// Rerun every stage.
        #[arg(long)]
        force: bool,
    },
    /// Long-format CSV of summaries and regions for plotting.
    ExportMaps {
        #[command(flatten)]
        common: CommonArgs,
        /// Summary CSV; defaults to every file of the causal stage.
        #[arg(long = "summary")]
        summaries: Vec<PathBuf>,
        /// Region CSV; defaults to every file of the hotspot stage.
        #[arg(long = "region")]
        regions: Vec<PathBuf>,
    },
}

fn build_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &common.output {
        cfg.output_dir = p.clone();
    }
    if let Some(p) = &common.panel {
        cfg.panel = Some(p.clone());
    }
    if let Some(p) = &common.covariates {
        cfg.covariates = Some(p.clone());
    }
    if let Some(p) = &common.adjacency {
        cfg.adjacency = Some(p.clone());
    }
    if common.start.is_some() || common.end.is_some() {
        let start = common.start.or(cfg.period.map(|p| p.start)).unwrap_or(i32::MIN);
        let end = common.end.or(cfg.period.map(|p| p.end)).unwrap_or(i32::MAX);
        cfg.period = Some(Period { start, end });
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    Ok(cfg)
}

fn apply_smooth(cfg: &mut RunConfig, a: &SmoothArgs) {
    if let Some(v) = a.iters {
        cfg.schedule.iters = v;
    }
    if let Some(v) = a.burnin {
        cfg.schedule.burnin = v;
    }
    if let Some(v) = a.thin {
        cfg.schedule.thin = v;
    }
    if let Some(v) = a.chains {
        cfg.chains = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
}

fn apply_hotspot(cfg: &mut RunConfig, a: &HotspotArgs) {
    if !a.thresholds.is_empty() {
        cfg.hotspot.thresholds = a.thresholds.clone();
    }
    if let Some(v) = a.alpha {
        cfg.hotspot.alpha = v;
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?
        .install(f)
}

fn single(stage: Stage, cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    with_pool(cfg.worker_threads(), || run_stage(stage, &cfg))?;
    println!("{}: done", stage.name());
    Ok(())
}

/// Execute a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, nx, ny, start_year, end_year, seed } => {
            let mut cfg = build_config(&common)?;
            let mut sim = cfg.simulate.clone().unwrap_or_default();
            sim.nx = nx.unwrap_or(sim.nx);
            sim.ny = ny.unwrap_or(sim.ny);
            sim.start_year = start_year.unwrap_or(sim.start_year);
            sim.end_year = end_year.unwrap_or(sim.end_year);
            sim.seed = seed.unwrap_or(sim.seed);
            cfg.simulate = Some(sim);
            single(Stage::Simulate, cfg)
        }
        Command::Max { common } => single(Stage::Max, build_config(&common)?),
        Command::Smooth { common, smooth } => {
            let mut cfg = build_config(&common)?;
            apply_smooth(&mut cfg, &smooth);
            single(Stage::Smooth, cfg)
        }
        Command::Causal { common } => single(Stage::Causal, build_config(&common)?),
        Command::Hotspot { common, hotspot } => {
            let mut cfg = build_config(&common)?;
            apply_hotspot(&mut cfg, &hotspot);
            single(Stage::Hotspot, cfg)
        }
        Command::Diagnose { common } => single(Stage::Diagnose, build_config(&common)?),
        Command::Pipeline { common, smooth, hotspot, force } => {
            let mut cfg = build_config(&common)?;
            apply_smooth(&mut cfg, &smooth);
            apply_hotspot(&mut cfg, &hotspot);
            with_pool(cfg.worker_threads(), || run_pipeline(&cfg, force)).map(|_| ())
        }
        Command::ExportMaps { common, summaries, regions } => {
            let cfg = build_config(&common)?;
            let l = cfg.layout();
            let (summaries, regions) = if summaries.is_empty() && regions.is_empty() {
                (csv_files(&l.causal())?, csv_files(&l.hotspot())?)
            } else {
                (summaries, regions)
            };
            let cells = if regions.is_empty() || cfg.covariates_path().is_err() {
                Vec::new()
            } else {
                let p = cfg.covariates_path()?;
                if p.is_file() {
                    CovariateTable::read_csv(&p)?.cells()
                } else {
                    Vec::new()
                }
            };
            let meta = export_maps(&summaries, &regions, &cells, &l.maps())?;
            println!("export-maps: {} fields written to {}", meta.fields.len(), l.maps().display());
            Ok(())
        }
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
