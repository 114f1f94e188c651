//! Command-line front end. Every command writes only into `--out` and leaves a
//! `manifest.json` with input hashes, seeds and the effective arguments.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::cv::{cv_spatial_kfold, cv_temporal_loo, CvResult, CvScheme};
use crate::dataset::{csv_writer, write_graph, CountsSource, PanelDataset, SdKind, OVERLAP_THRESHOLD};
use crate::error::{Error, Result};
use crate::graph::SlopeUnitGraph;
use crate::hyper::{fit_model, Fit, GridConfig};
use crate::laplace::{LatentProblem, DEFAULT_GRAD_TOL, DEFAULT_MAX_ITERS};
use crate::mcmc::{run_chain, ChainConfig};
use crate::model::{HyperState, ModelFamily, ModelSpec};
use crate::predict::{classify, ratio_maps, roc_auc, susceptibility, temporal_trend, ClassLabel, IntensityEstimator};
use crate::simulate::{sample_dataset, SimConfig};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "slope-lgcp", version, about = "Spatio-temporal Poisson models for landslide counts on slope units")]
pub struct Cli {
    /// Flat `key = value` file; command-line flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model family to the full data.
    Fit(FitArgs),
    /// Spatial k-fold or temporal leave-one-period-out cross-validation.
    Cv(CvArgs),
    /// Simulate a dataset with known latent truth.
    Simulate(SimulateArgs),
    /// Classes per cell from a fit, with optional ratio maps against a baseline fit.
    Classify(ClassifyArgs),
    /// Class-share table and optional SVG map.
    Report(ReportArgs),
    /// Compare the Laplace fit against a Metropolis chain.
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub units: PathBuf,
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub covariates: PathBuf,
    #[arg(long, required_unless_present = "overlaps", conflicts_with = "overlaps")]
    pub counts: Option<PathBuf>,
    #[arg(long, requires = "slices")]
    pub overlaps: Option<PathBuf>,
    #[arg(long, requires = "overlaps")]
    pub slices: Option<PathBuf>,
    /// Minimum landslide-area fraction for a unit to count the landslide.
    #[arg(long, default_value_t = OVERLAP_THRESHOLD)]
    pub overlap_threshold: f64,
    #[arg(long, value_enum, default_value_t = SdArg::Sample)]
    pub sd_divisor: SdArg,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SdArg {
    Sample,
    Population,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "mod1")]
    pub model: ModelFamily,
    #[arg(long)]
    pub fixed_prior_sd: Option<f64>,
    #[arg(long)]
    pub pc_sd_rate: Option<f64>,
    #[arg(long)]
    pub pc_cor_u: Option<f64>,
    #[arg(long)]
    pub pc_cor_alpha: Option<f64>,
    #[arg(long)]
    pub allow_isolated: bool,
    /// Grid half-width in steps.
    #[arg(long)]
    pub grid_k: Option<usize>,
    /// Grid step in curvature standard deviations.
    #[arg(long)]
    pub grid_h: Option<f64>,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        let mut s = ModelSpec::new(self.model);
        if let Some(v) = self.fixed_prior_sd {
            s.fixed_prior_sd = v;
        }
        if let Some(v) = self.pc_sd_rate {
            s.pc_sd_rate = v;
        }
        if let Some(v) = self.pc_cor_u {
            s.pc_cor_u = v;
        }
        if let Some(v) = self.pc_cor_alpha {
            s.pc_cor_alpha = v;
        }
        s.allow_isolated = self.allow_isolated;
        s.validate()?;
        Ok(s)
    }

    fn grid(&self) -> GridConfig {
        let mut g = GridConfig::default();
        if let Some(k) = self.grid_k {
            g.k = k;
        }
        if let Some(h) = self.grid_h {
            g.h = h;
        }
        g
    }
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value = "mean")]
    pub intensity_estimator: IntensityEstimator,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Spatial,
    Temporal,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = SchemeArg::Spatial)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "mod1")]
    pub model: ModelFamily,
    /// Regular lattice `WxH` instead of a unit/edge file pair.
    #[arg(long, conflicts_with_all = ["units", "edges"])]
    pub lattice: Option<String>,
    #[arg(long, requires = "edges")]
    pub units: Option<PathBuf>,
    #[arg(long, requires = "units")]
    pub edges: Option<PathBuf>,
    /// Unit area in m² for lattice graphs. The default keeps the log-area offset at zero.
    #[arg(long, default_value_t = 1.0)]
    pub unit_area: f64,
    #[arg(long, default_value_t = 6)]
    pub periods: usize,
    #[arg(long, default_value_t = 2)]
    pub n_covariates: usize,
    /// Global intercept; defaults to `-1 - mean(ln area)` so the baseline intensity is about e⁻¹.
    #[arg(long, allow_hyphen_values = true)]
    pub intercept: Option<f64>,
    /// Comma-separated coefficients; 0.5 each when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub coefficients: Option<String>,
    #[arg(long, default_value_t = 4.0)]
    pub tau_time: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau_spatial: f64,
    /// Stationary precision of the AR1 field.
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.6, allow_hyphen_values = true)]
    pub beta: f64,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Directory holding the `summary.csv` of a fit.
    #[arg(long)]
    pub fit: PathBuf,
    /// Directory of a baseline fit for intensity and susceptibility ratios.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding a `summary.csv` from `fit` or `simulate`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Unit table with areas in m².
    #[arg(long)]
    pub units: PathBuf,
    /// Write the class-share table; implied unless only `--centroids` output is requested.
    #[arg(long)]
    pub table3: bool,
    /// Report one period label instead of the temporal average of intensities.
    #[arg(long)]
    pub period: Option<String>,
    /// `id,x,y` centroids; enables `map.svg`.
    #[arg(long)]
    pub centroids: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 200_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 20_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    /// Also write every stored draw to `samples.csv`.
    #[arg(long)]
    pub dump_samples: bool,
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Fit(a) => &a.common,
            Command::Cv(a) => &a.common,
            Command::Simulate(a) => &a.common,
            Command::Classify(a) => &a.common,
            Command::Report(a) => &a.common,
            Command::Oracle(a) => &a.common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Cv(_) => "cv",
            Command::Simulate(_) => "simulate",
            Command::Classify(_) => "classify",
            Command::Report(_) => "report",
            Command::Oracle(_) => "oracle",
        }
    }
}

// ---------------------------------------------------------------------------
// Config file

const COMMANDS: [&str; 6] = ["fit", "cv", "simulate", "classify", "report", "oracle"];

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::BadRow {
            context: path.display().to_string(),
            row: k + 1,
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::BadRow { context: path.display().to_string(), row: k + 1, message: "empty key".into() });
        }
        out.push((key, value.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

/// Splices config-file entries after the subcommand, skipping keys the user passed as flags.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let p = it.next().ok_or_else(|| Error::Validation("--config needs a path".into()))?;
            config = Some(PathBuf::from(p));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries = parse_config(&text, &path)?;
    let at = rest.iter().position(|a| COMMANDS.contains(&a.to_string_lossy().as_ref())).map_or(rest.len(), |i| i + 1);
    let given = |k: &str| {
        rest.iter().any(|a| {
            let a = a.to_string_lossy();
            a == format!("--{k}") || a.starts_with(&format!("--{k}="))
        })
    };
    let mut injected = Vec::new();
    for (k, v) in entries {
        if given(&k) {
            continue;
        }
        match v.as_str() {
            "true" => injected.push(OsString::from(format!("--{k}"))),
            "false" => {}
            _ => injected.push(OsString::from(format!("--{k}={v}"))),
        }
    }
    rest.splice(at..at, injected);
    Ok(rest)
}

// ---------------------------------------------------------------------------
// Entry point

/// Runs the CLI and returns the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    let echo: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let jobs = cli.command.common().jobs;
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    match pool.install(|| dispatch(&cli.command, echo)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERIC }
        }
    }
}

fn dispatch(cmd: &Command, echo: Vec<String>) -> Result<()> {
    let common = cmd.common();
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let mut run = Run::new(cmd.name(), echo, common);
    match cmd {
        Command::Fit(a) => cmd_fit(a, &mut run)?,
        Command::Cv(a) => cmd_cv(a, &mut run)?,
        Command::Simulate(a) => cmd_simulate(a, &mut run)?,
        Command::Classify(a) => cmd_classify(a, &mut run)?,
        Command::Report(a) => cmd_report(a, &mut run)?,
        Command::Oracle(a) => cmd_oracle(a, &mut run)?,
    }
    run.finish()
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(serde::Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    args: Vec<String>,
    seed: u64,
    intensity_estimator: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    settings: BTreeMap<String, serde_json::Value>,
}

struct Run {
    out: PathBuf,
    manifest: Manifest,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Run {
    fn new(command: &str, args: Vec<String>, common: &CommonArgs) -> Self {
        Self {
            out: common.out.clone(),
            manifest: Manifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                args,
                seed: common.seed,
                intensity_estimator: common.intensity_estimator.to_string(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                settings: BTreeMap::new(),
            },
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    fn setting(&mut self, key: &str, value: impl serde::Serialize) {
        self.manifest.settings.insert(key.to_string(), serde_json::to_value(value).expect("serializable setting"));
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Records an output file written under `out`.
    fn output(&mut self, name: &str) -> Result<()> {
        let h = sha256_file(&self.path(name))?;
        self.manifest.outputs.insert(name.to_string(), h);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn load_data(a: &DataArgs, run: &mut Run) -> Result<PanelDataset> {
    for p in [&a.units, &a.edges, &a.covariates].into_iter().chain(a.counts.as_ref()).chain(a.overlaps.as_ref()).chain(a.slices.as_ref()) {
        run.input(p)?;
    }
    let graph = Arc::new(SlopeUnitGraph::load(&a.units, &a.edges)?);
    let source = match (&a.counts, &a.overlaps, &a.slices) {
        (Some(c), _, _) => CountsSource::Long(c),
        (None, Some(o), Some(s)) => CountsSource::Overlaps { overlaps: o, slices: s, threshold: a.overlap_threshold },
        _ => return Err(Error::Validation("either --counts or --overlaps with --slices is required".into())),
    };
    let sd = match a.sd_divisor {
        SdArg::Sample => SdKind::Sample,
        SdArg::Population => SdKind::Population,
    };
    run.setting("sd_divisor", sd);
    run.setting("overlap_threshold", a.overlap_threshold);
    PanelDataset::load(graph, &a.covariates, source, sd)
}

fn record_model(run: &mut Run, spec: &ModelSpec, grid: &GridConfig) {
    run.setting("model", spec);
    run.setting("grid", grid);
    run.setting("newton", serde_json::json!({ "max_iters": DEFAULT_MAX_ITERS, "grad_tol": DEFAULT_GRAD_TOL }));
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_rows(run: &mut Run, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let path = run.path(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv_writer(&path)?;
    w.write_record(header).map_err(|e| Error::csv(&path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    run.output(name)
}

const SUMMARY_HEADER: [&str; 8] = ["unit", "period", "eta_mean", "eta_sd", "intensity_plugin", "intensity_mean", "susceptibility", "class"];

fn summary_rows(data: &PanelDataset, eta_mean: &[f64], eta_sd: &[f64], est: IntensityEstimator) -> Result<Vec<Vec<String>>> {
    let t = data.n_periods();
    let mut rows = Vec::with_capacity(data.n_cells());
    for i in 0..data.n_units() {
        for j in 0..t {
            let c = i * t + j;
            let (m, s) = (eta_mean[c], eta_sd[c]);
            let lam = est.apply(m, s);
            rows.push(vec![
                data.graph().ids()[i].clone(),
                data.period_labels()[j].clone(),
                fmt(m),
                fmt(s),
                fmt(IntensityEstimator::Plugin.apply(m, s)),
                fmt(IntensityEstimator::Mean.apply(m, s)),
                fmt(susceptibility(lam)?),
                classify(lam).to_string(),
            ]);
        }
    }
    Ok(rows)
}

fn write_fit(run: &mut Run, data: &PanelDataset, fit: &Fit, est: IntensityEstimator) -> Result<()> {
    let s = &fit.summary;
    write_rows(run, "summary.csv", &SUMMARY_HEADER, summary_rows(data, &s.eta_mean, &s.eta_sd, est)?)?;
    let fe = |f: &crate::hyper::FixedEffectSummary| vec![f.name.clone(), fmt(f.mean), fmt(f.sd), fmt(f.q025), fmt(f.q975)];
    write_rows(run, "fixed_effects.csv", &["name", "mean", "sd", "q025", "q975"], s.fixed_effects.iter().map(fe))?;
    if fit.layout.family.has_time_intercepts() {
        write_rows(
            run,
            "time_intercepts.csv",
            &["name", "mean", "sd", "q025", "q975"],
            s.fixed_effects.iter().filter(|f| f.name.starts_with("period_")).map(fe),
        )?;
    }
    let names = HyperState::names(fit.layout.family);
    let mut header = vec!["point"];
    header.extend(names.iter().copied());
    header.extend(["log_posterior", "weight"]);
    let rows = fit.hyper.grid_points.iter().enumerate().map(|(k, p)| {
        let mut r = vec![k.to_string()];
        r.extend(p.theta.values.iter().map(|v| fmt(*v)));
        r.extend([fmt(p.log_posterior), fmt(p.weight)]);
        r
    });
    write_rows(run, "hyper_posterior.csv", &header, rows)?;
    write_rows(run, "hyper_summary.csv", &["name", "mean", "sd"], s.hyper.iter().map(|(n, m, sd)| vec![n.clone(), fmt(*m), fmt(*sd)]))?;
    if fit.layout.family.has_ar1() {
        let field = s.field_means(&fit.layout).expect("AR1 families have a field");
        let ids = data.graph().ids();
        let labels = data.period_labels();
        let traj = field.iter().enumerate().flat_map(|(i, w)| w.iter().enumerate().map(move |(j, v)| vec![ids[i].clone(), labels[j].clone(), fmt(*v)]));
        write_rows(run, "latent_trajectories.csv", &["unit", "period", "field_mean"], traj.collect::<Vec<_>>())?;
        write_rows(run, "trends.csv", &["unit", "trend"], field.iter().enumerate().map(|(i, w)| vec![ids[i].clone(), temporal_trend(w).to_string()]))?;
    }
    run.setting("log_evidence", fit.hyper.normalization);
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_fit(a: &FitArgs, run: &mut Run) -> Result<()> {
    let data = load_data(&a.data, run)?;
    let spec = a.model.spec()?;
    let grid = a.model.grid();
    record_model(run, &spec, &grid);
    let fit = fit_model(&spec, &data, None, &grid)?;
    write_fit(run, &data, &fit, a.common.intensity_estimator)
}

fn cmd_cv(a: &CvArgs, run: &mut Run) -> Result<()> {
    let data = load_data(&a.data, run)?;
    let spec = a.model.spec()?;
    let grid = a.model.grid();
    record_model(run, &spec, &grid);
    let est = a.common.intensity_estimator;
    let res: CvResult = match a.scheme {
        SchemeArg::Spatial => {
            run.setting("k", a.k);
            cv_spatial_kfold(&data, &spec, a.k, a.common.seed, &grid, est)?
        }
        SchemeArg::Temporal => cv_temporal_loo(&data, &spec, &grid, est)?,
    };
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    let ids = data.graph().ids();
    if res.scheme == CvScheme::Spatial {
        let width = (a.k - 1).to_string().len().max(2);
        for f in 0..a.k {
            let units: Vec<Vec<String>> = (0..data.n_units()).filter(|&i| res.assignment[i] == f).map(|i| vec![ids[i].clone()]).collect();
            write_rows(run, &format!("folds/fold_{f:0width$}.csv"), &["unit"], units)?;
        }
    }
    let scheme = res.scheme.to_string();
    let model = spec.family.to_string();
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt);
    let mut rows: Vec<Vec<String>> = res
        .groups
        .iter()
        .map(|g| {
            let group = match res.scheme {
                CvScheme::Spatial => g.group.to_string(),
                CvScheme::Temporal => data.period_labels()[g.group].clone(),
            };
            vec![model.clone(), scheme.clone(), group, g.n_cells.to_string(), opt(g.auc), fmt(g.coverage)]
        })
        .collect();
    rows.push(vec![model, scheme, "pooled".into(), data.n_cells().to_string(), opt(res.auc), fmt(res.coverage)]);
    write_rows(run, "metrics.csv", &["model", "scheme", "group", "n_cells", "auc", "coverage"], rows)?;
    write_rows(run, "summary.csv", &SUMMARY_HEADER, summary_rows(&data, &res.eta_mean, &res.eta_sd, est)?)?;
    let scores = res.intensities(est);
    let labels: Vec<bool> = data.counts().iter().map(|&c| c >= 1).collect();
    match roc_auc(&scores, &labels) {
        Ok((roc, _)) => write_rows(
            run,
            "roc.csv",
            &["threshold", "fpr", "tpr"],
            roc.iter().map(|p| vec![fmt(p.threshold), fmt(p.fpr), fmt(p.tpr)]),
        )?,
        Err(_) => eprintln!("warning: single-class labels, roc.csv skipped"),
    }
    Ok(())
}

fn parse_lattice(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Validation(format!("--lattice expects WxH, got '{s}'"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn cmd_simulate(a: &SimulateArgs, run: &mut Run) -> Result<()> {
    let graph = match (&a.lattice, &a.units, &a.edges) {
        (Some(l), _, _) => {
            let (w, h) = parse_lattice(l)?;
            SlopeUnitGraph::lattice(w, h, a.unit_area)
        }
        (None, Some(u), Some(e)) => {
            run.input(u)?;
            run.input(e)?;
            SlopeUnitGraph::load(u, e)?
        }
        _ => return Err(Error::Validation("simulate needs --lattice or both --units and --edges".into())),
    };
    let coefficients: Vec<f64> = match &a.coefficients {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Validation(format!("bad coefficient '{v}'"))))
            .collect::<Result<_>>()?,
        None => vec![0.5; a.n_covariates],
    };
    if coefficients.len() != a.n_covariates {
        return Err(Error::Validation(format!("{} coefficients given for {} covariates", coefficients.len(), a.n_covariates)));
    }
    let hyper = match a.model {
        ModelFamily::Mod1 => HyperState::initial(ModelFamily::Mod1),
        ModelFamily::Mod2 => HyperState::mod2(a.tau_time),
        ModelFamily::Mod3 => HyperState::mod3(a.tau_time, a.tau_spatial),
        ModelFamily::Mod4 => HyperState::mod4(a.tau_time, a.kappa, a.beta),
        ModelFamily::Mod5 => HyperState::mod5(a.tau_time, a.kappa, a.beta),
    };
    if hyper.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("precisions must be positive and |beta| < 1".into()));
    }
    let graph = Arc::new(graph);
    let mean_log_area = graph.areas().iter().map(|x| x.ln()).sum::<f64>() / graph.n_units() as f64;
    let intercept = a.intercept.unwrap_or(-1.0 - mean_log_area);
    let cfg = SimConfig::new(graph.clone(), a.periods, a.model, hyper.clone(), a.common.seed).with_fixed(intercept, coefficients.clone());
    let (data, truth) = sample_dataset(&cfg)?;
    run.setting("family", a.model);
    run.setting("hyper", hyper.natural().into_iter().collect::<BTreeMap<_, _>>());
    run.setting("intercept", intercept);
    run.setting("coefficients", &coefficients);
    run.setting("periods", a.periods);

    write_graph(&graph, &run.out)?;
    data.write_csv(&run.out)?;
    truth.write_csv(&run.path("truth.csv"))?;
    for f in ["units.csv", "edges.csv", "covariates.csv", "counts.csv", "truth.csv"] {
        run.output(f)?;
    }
    let zeros = vec![0.0; data.n_cells()];
    write_rows(run, "summary.csv", &SUMMARY_HEADER, summary_rows(&data, &truth.eta, &zeros, a.common.intensity_estimator)?)
}

struct SummaryRow {
    unit: String,
    period: String,
    eta_mean: f64,
    eta_sd: f64,
}

fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join("summary.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(&path, e))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Validation(format!("{}: missing column '{name}'", path.display())))
    };
    let (cu, cp, cm, cs) = (col("unit")?, col("period")?, col("eta_mean")?, col("eta_sd")?);
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(&path, e))?;
        let num = |c: usize| {
            rec.get(c).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::BadRow {
                context: path.display().to_string(),
                row: k + 2,
                message: "non-numeric predictor".into(),
            })
        };
        rows.push(SummaryRow { unit: rec[cu].to_string(), period: rec[cp].to_string(), eta_mean: num(cm)?, eta_sd: num(cs)? });
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

fn cmd_classify(a: &ClassifyArgs, run: &mut Run) -> Result<()> {
    let est = a.common.intensity_estimator;
    run.input(&a.fit.join("summary.csv"))?;
    let rows = read_summary(&a.fit)?;
    let lam: Vec<f64> = rows.iter().map(|r| est.apply(r.eta_mean, r.eta_sd)).collect();
    let mut out = Vec::with_capacity(rows.len());
    for (r, &l) in rows.iter().zip(&lam) {
        out.push(vec![r.unit.clone(), r.period.clone(), fmt(l), fmt(susceptibility(l)?), classify(l).to_string()]);
    }
    write_rows(run, "classes.csv", &["unit", "period", "intensity", "susceptibility", "class"], out)?;
    if let Some(base) = &a.baseline {
        run.input(&base.join("summary.csv"))?;
        let b = read_summary(base)?;
        if b.len() != rows.len() || b.iter().zip(&rows).any(|(x, y)| x.unit != y.unit || x.period != y.period) {
            return Err(Error::Validation("baseline summary covers different cells".into()));
        }
        let base_lam: Vec<f64> = b.iter().map(|r| est.apply(r.eta_mean, r.eta_sd)).collect();
        let (ir, sr, n_zero) = ratio_maps(&lam, &base_lam)?;
        if n_zero > 0 {
            eprintln!("warning: {n_zero} cells with zero intensity in both fits; ratio set to 1");
        }
        let rows_out = rows.iter().enumerate().map(|(c, r)| vec![r.unit.clone(), r.period.clone(), fmt(ir[c]), fmt(sr[c])]);
        write_rows(run, "ratios.csv", &["unit", "period", "ir", "sr"], rows_out)?;
    }
    Ok(())
}

/// One row of the class-share table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassShare {
    pub class: ClassLabel,
    pub su_count: usize,
    pub su_percent: f64,
    pub area_km2: f64,
    pub area_percent: f64,
}

/// Groups units by class with area sums.
pub fn class_shares(classes: &[ClassLabel], areas_m2: &[f64]) -> Vec<ClassShare> {
    let n = classes.len() as f64;
    let total: f64 = areas_m2.iter().sum();
    ClassLabel::ALL
        .iter()
        .map(|&class| {
            let (count, area) = classes.iter().zip(areas_m2).filter(|(c, _)| **c == class).fold((0, 0.0), |(k, s), (_, a)| (k + 1, s + a));
            ClassShare {
                class,
                su_count: count,
                su_percent: 100.0 * count as f64 / n,
                area_km2: area / 1e6,
                area_percent: if total > 0.0 { 100.0 * area / total } else { 0.0 },
            }
        })
        .collect()
}

fn class_colour(c: ClassLabel) -> &'static str {
    match c {
        ClassLabel::ClearlyStable => "#2c7bb6",
        ClassLabel::Uncertain1 => "#abd9e9",
        ClassLabel::Uncertain2 => "#fdae61",
        ClassLabel::ClearlyUnstable => "#d7191c",
    }
}

fn read_centroids(path: &Path) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = BTreeMap::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let bad = || Error::BadRow { context: path.display().to_string(), row: k + 2, message: "expected id,x,y".into() };
        let x = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let y = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        out.insert(rec.get(0).ok_or_else(bad)?.to_string(), (x, y));
    }
    Ok(out)
}

fn cmd_report(a: &ReportArgs, run: &mut Run) -> Result<()> {
    let est = a.common.intensity_estimator;
    run.input(&a.fit.join("summary.csv"))?;
    run.input(&a.units)?;
    let rows = read_summary(&a.fit)?;
    let mut area_of = BTreeMap::new();
    {
        let mut r = csv::Reader::from_path(&a.units).map_err(|e| Error::csv(&a.units, e))?;
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(&a.units, e))?;
            let area: f64 = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| Error::BadRow {
                context: a.units.display().to_string(),
                row: k + 2,
                message: "expected id,area_m2".into(),
            })?;
            area_of.insert(rec[0].to_string(), area);
        }
    }
    // Units in first-appearance order with mean intensity over the selected periods.
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        if a.period.as_ref().is_some_and(|p| *p != r.period) {
            continue;
        }
        let e = acc.entry(r.unit.clone()).or_insert_with(|| {
            order.push(r.unit.clone());
            (0.0, 0)
        });
        e.0 += est.apply(r.eta_mean, r.eta_sd);
        e.1 += 1;
    }
    if order.is_empty() {
        return Err(Error::Validation(format!("no rows for period '{}'", a.period.as_deref().unwrap_or(""))));
    }
    let mut classes = Vec::with_capacity(order.len());
    let mut areas = Vec::with_capacity(order.len());
    for u in &order {
        let (s, k) = acc[u];
        classes.push(classify(s / k as f64));
        areas.push(*area_of.get(u).ok_or_else(|| Error::Validation(format!("unit '{u}' missing from {}", a.units.display())))?);
    }
    run.setting("period", a.period.clone().unwrap_or_else(|| "average".into()));
    if a.table3 || a.centroids.is_none() {
        let shares = class_shares(&classes, &areas);
        write_rows(
            run,
            "table3.csv",
            &["class", "su_count", "su_percent", "area_km2", "area_percent"],
            shares.iter().map(|s| vec![s.class.to_string(), s.su_count.to_string(), fmt(s.su_percent), fmt(s.area_km2), fmt(s.area_percent)]),
        )?;
    }
    if let Some(cpath) = &a.centroids {
        run.input(cpath)?;
        let cent = read_centroids(cpath)?;
        let pts: Vec<(f64, f64, ClassLabel)> = order.iter().zip(&classes).filter_map(|(u, c)| cent.get(u).map(|&(x, y)| (x, y, *c))).collect();
        if pts.is_empty() {
            return Err(Error::Validation("no centroid matches a unit".into()));
        }
        let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let span = (x1 - x0).max(y1 - y0).max(1e-12);
        let size = 600.0;
        let r = (size / (pts.len() as f64).sqrt() / 2.5).clamp(1.5, 20.0);
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}">"#, w = size + 4.0 * r);
        for (x, y, c) in &pts {
            let px = 2.0 * r + (x - x0) / span * size;
            let py = 2.0 * r + (y1 - y) / span * size;
            let _ = writeln!(svg, r#"<circle cx="{px:.2}" cy="{py:.2}" r="{r:.2}" fill="{}"/>"#, class_colour(*c));
        }
        svg.push_str("</svg>\n");
        let path = run.path("map.svg");
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        run.output("map.svg")?;
    }
    Ok(())
}

fn cmd_oracle(a: &OracleArgs, run: &mut Run) -> Result<()> {
    let data = load_data(&a.data, run)?;
    let spec = a.model.spec()?;
    let grid = a.model.grid();
    record_model(run, &spec, &grid);
    let cfg = ChainConfig::new(a.iters, a.burn_in, a.thin, a.common.seed);
    run.setting("chain", &cfg);
    let fit = fit_model(&spec, &data, None, &grid)?;
    let problem = LatentProblem::new(&fit.layout, &spec, &data)?;
    let chain = run_chain(&problem, &cfg)?;
    let rows = fit.summary.fixed_effects.iter().zip(fit.layout.fixed_indices()).map(|(f, j)| {
        let (m, s) = (chain.mean(j), chain.sd(j));
        vec![f.name.clone(), fmt(f.mean), fmt(f.sd), fmt(m), fmt(s), fmt(chain.ess(j)), fmt(f.mean - m), fmt(f.sd / s)]
    });
    write_rows(
        run,
        "oracle.csv",
        &["name", "laplace_mean", "laplace_sd", "mcmc_mean", "mcmc_sd", "mcmc_ess", "mean_diff", "sd_ratio"],
        rows.collect::<Vec<_>>(),
    )?;
    write_rows(run, "acceptance.csv", &["block", "rate"], chain.acceptance.iter().map(|(n, r)| vec![n.clone(), fmt(*r)]))?;
    if a.dump_samples {
        chain.write_csv(&run.path("samples.csv"))?;
        run.output("samples.csv")?;
    }
    Ok(())
}
