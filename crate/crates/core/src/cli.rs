//! Command-line front end: `simulate`, `align`, `fit`, `cv`.
//!
//! Every command writes its outputs plus a `manifest.json` holding the parsed
//! arguments, so a run can be repeated exactly.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    align_to_event, read_event_csv, read_long_csv, standardize, write_long_csv, AlignOptions, CsvSchema,
    EventlessAnchor, MissingPolicy, PairedStudy,
};
use crate::error::{Error, Result};
use crate::lme::{mean_trajectory, LambdaMode, TimeBasis};
use crate::mm::{fit, ComponentResult, MmConfig, RhoGrid};
use crate::scca::{Init, WeightUpdate};
use crate::selection::{cv_select, default_grid, CvReport};
use crate::simulation::{simulate, SimulationConfig, SinReading, Theta};

/// Exit status when a fit finished but some component hit `--max-iter`.
pub const EXIT_NOT_CONVERGED: i32 = 2;
/// Exit status for any error.
pub const EXIT_ERROR: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "toscca-mm", version, about = "Sparse CCA for paired longitudinal data")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic paired study with known truth.
    Simulate(SimulateArgs),
    /// Re-centre measurement times on a per-subject event.
    Align(AlignArgs),
    /// Fit sparse canonical components with latent mixed models.
    Fit(FitArgs),
    /// Choose sparsity levels by subject-fold cross-validation.
    Cv(CvArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinReadingArg {
    SignedPower,
    ArgumentProduct,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 10_000)]
    pub p: usize,
    #[arg(long, default_value_t = 200)]
    pub q: usize,
    /// Measurements per subject before removal, at t = 1..n_times.
    #[arg(long, default_value_t = 10)]
    pub n_times: usize,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    #[arg(long, default_value_t = 10)]
    pub nnz_x: usize,
    #[arg(long, default_value_t = 20)]
    pub nnz_y: usize,
    #[arg(long, default_value_t = 0.2)]
    pub drop_x: f64,
    #[arg(long, default_value_t = 0.3)]
    pub drop_y: f64,
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    pub theta0: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub theta1: f64,
    #[arg(long, default_value_t = -0.2, allow_hyphen_values = true)]
    pub theta2: f64,
    #[arg(long, default_value_t = 0.25)]
    pub latent_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub feature_noise: f64,
    /// AR(1) coefficient of the time correlation of X noise.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub ar_x: f64,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub ar_y: f64,
    #[arg(long, value_enum, default_value_t = SinReadingArg::SignedPower)]
    pub sin_reading: SinReadingArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SimulateArgs {
    pub fn config(&self) -> SimulationConfig {
        SimulationConfig {
            n_subjects: self.n,
            p: self.p,
            q: self.q,
            n_times: self.n_times,
            n_components: self.components,
            nnz_x: self.nnz_x,
            nnz_y: self.nnz_y,
            drop_x: self.drop_x,
            drop_y: self.drop_y,
            theta: Theta {
                theta0: self.theta0,
                theta1: self.theta1,
                theta2: self.theta2,
            },
            latent_noise_sd: self.latent_noise,
            feature_noise_sd: self.feature_noise,
            ar_x: self.ar_x,
            ar_y: self.ar_y,
            sin_reading: match self.sin_reading {
                SinReadingArg::SignedPower => SinReading::SignedPower,
                SinReadingArg::ArgumentProduct => SinReading::ArgumentProduct,
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorArg {
    /// Last visit one bin before the origin.
    BeforeOrigin,
    /// Last visit at the origin.
    Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingArg {
    Reject,
    DropRow,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SchemaArgs {
    #[arg(long, default_value = "id")]
    pub id_column: String,
    #[arg(long, default_value = "time")]
    pub time_column: String,
    /// What to do with empty or `NA` feature cells.
    #[arg(long, value_enum, default_value_t = MissingArg::Reject)]
    pub missing: MissingArg,
}

impl SchemaArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            id_column: self.id_column.clone(),
            time_column: self.time_column.clone(),
            features: None,
            missing: match self.missing {
                MissingArg::Reject => MissingPolicy::Reject,
                MissingArg::DropRow => MissingPolicy::DropRow,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AlignArgs {
    /// Long-format CSV to realign.
    #[arg(long)]
    pub x: PathBuf,
    /// CSV with columns `id,event_time`; an empty event time means no event.
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub bin_width: f64,
    #[arg(long, value_enum, default_value_t = AnchorArg::BeforeOrigin)]
    pub eventless_anchor: AnchorArg,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateArg {
    /// `w = X' v`
    CrossProduct,
    /// `w = (X'X + ridge I)^{-1} X' v`
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoGridArg {
    X,
    Symmetric,
}

/// Model options shared by `fit` and `cv`.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// `linear`, `poly:<d>` or `changepoint:<d>[:<knot>]`.
    #[arg(long, default_value = "linear")]
    pub basis_x: TimeBasis,
    #[arg(long, default_value = "linear")]
    pub basis_y: TimeBasis,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Additional random starts per component.
    #[arg(long, default_value_t = 0)]
    pub starts: usize,
    #[arg(long, value_enum, default_value_t = UpdateArg::CrossProduct)]
    pub update: UpdateArg,
    /// Ridge term for `--update regression`.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    #[arg(long, value_enum, default_value_t = RhoGridArg::X)]
    pub rho_grid: RhoGridArg,
    /// Use the views as given instead of centring and scaling each feature.
    #[arg(long)]
    pub no_standardize: bool,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

impl ModelArgs {
    fn mm_config(&self, k: usize, px: usize, qy: usize) -> MmConfig {
        MmConfig {
            k,
            px,
            qy,
            basis_x: self.basis_x,
            basis_y: self.basis_y,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            init: Init::Sketch,
            starts: self.starts,
            update: match self.update {
                UpdateArg::CrossProduct => WeightUpdate::CrossProduct,
                UpdateArg::Regression => WeightUpdate::Regression { ridge: self.ridge },
            },
            rho_grid: match self.rho_grid {
                RhoGridArg::X => RhoGrid::X,
                RhoGridArg::Symmetric => RhoGrid::Symmetric,
            },
            lambda: LambdaMode::Profiled,
        }
    }

    fn read_study(&self) -> Result<PairedStudy> {
        let schema = self.schema.schema();
        Ok(PairedStudy::new(read_long_csv(&self.x, &schema)?, read_long_csv(&self.y, &schema)?))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of components.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Nonzero X weights per component.
    #[arg(long, required_unless_present = "from_cv")]
    pub px: Option<usize>,
    /// Nonzero Y weights per component.
    #[arg(long, required_unless_present = "from_cv")]
    pub qy: Option<usize>,
    /// Take `--px`/`--qy` from a `cv_summary.json` (explicit flags win).
    #[arg(long)]
    pub from_cv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CvArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated px levels (default 5,10,20,40,80 clipped to p).
    #[arg(long, value_delimiter = ',')]
    pub grid_px: Vec<usize>,
    /// Comma-separated qy levels (default 5,10,20,40,80 clipped to q).
    #[arg(long, value_delimiter = ',')]
    pub grid_qy: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest(command: &Command, extra: serde_json::Value) -> serde_json::Value {
    let mut m = json!({
        "tool": "toscca-mm",
        "version": env!("CARGO_PKG_VERSION"),
        "run_config": command,
    });
    if let (Some(m), serde_json::Value::Object(extra)) = (m.as_object_mut(), extra) {
        m.extend(extra);
    }
    m
}

pub fn cmd_simulate(args: &SimulateArgs, command: &Command) -> Result<i32> {
    ensure_dir(&args.out)?;
    let sim = simulate(&args.config())?;
    write_long_csv(&sim.study.x, args.out.join("x.csv"))?;
    write_long_csv(&sim.study.y, args.out.join("y.csv"))?;
    write_json(&args.out.join("truth.json"), &serde_json::to_value(&sim.truth)?)?;
    write_json(&args.out.join("manifest.json"), &manifest(command, json!({})))?;
    Ok(0)
}

pub fn cmd_align(args: &AlignArgs, command: &Command) -> Result<i32> {
    ensure_dir(&args.out)?;
    let view = read_long_csv(&args.x, &args.schema.schema())?;
    let events = read_event_csv(&args.events)?;
    let unknown = events.unknown_subjects(&view);
    for id in &unknown {
        warn!("event table subject `{id}` does not appear in the data");
    }
    let opts = AlignOptions {
        bin_width: args.bin_width,
        eventless: match args.eventless_anchor {
            AnchorArg::BeforeOrigin => EventlessAnchor::BeforeOrigin,
            AnchorArg::Origin => EventlessAnchor::Origin,
        },
    };
    let aligned = align_to_event(&view, &events, &opts)?;
    write_long_csv(&aligned, args.out.join("aligned.csv"))?;
    write_json(
        &args.out.join("manifest.json"),
        &manifest(command, json!({ "unknown_event_subjects": unknown })),
    )?;
    Ok(0)
}

/// Standardizes both views unless disabled; returns dropped feature names per view.
fn prepare(study: PairedStudy, standardize_views: bool) -> Result<(PairedStudy, Vec<String>, Vec<String>)> {
    if !standardize_views {
        return Ok((study, vec![], vec![]));
    }
    let (x, sx) = standardize(&study.x)?;
    let (y, sy) = standardize(&study.y)?;
    Ok((PairedStudy::new(x, y), sx.dropped, sy.dropped))
}

fn write_weights(path: &Path, study: &PairedStudy, raw: &PairedStudy, comps: &[ComponentResult]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["component", "view", "feature", "weight"])?;
    for c in comps {
        for (view, fitted, all, weights) in [
            ("x", &study.x, &raw.x, &c.weights.w_x),
            ("y", &study.y, &raw.y, &c.weights.w_y),
        ] {
            // Features dropped as constant are reported with weight 0.
            let names = fitted.feature_names();
            let mut k = 0;
            for name in all.feature_names() {
                let value = if names.get(k) == Some(name) {
                    k += 1;
                    weights[k - 1]
                } else {
                    0.0
                };
                w.write_record([c.weights.component.to_string(), view.into(), name.clone(), value.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_latent_paths(path: &Path, study: &PairedStudy, comps: &[ComponentResult]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record([
        "component",
        "view",
        "subject",
        "time",
        "observed_latent",
        "predicted_latent",
        "cross_predicted",
    ])?;
    for c in comps {
        let own_x = c.fit_x.predict(study.x.subject_ids(), study.x.times());
        let own_y = c.fit_y.predict(study.y.subject_ids(), study.y.times());
        for (view, v, obs, own, cross) in [
            ("x", &study.x, &c.latent_x, &own_x, &c.predicted_y_on_tx),
            ("y", &study.y, &c.latent_y, &own_y, &c.predicted_x_on_ty),
        ] {
            for r in 0..v.n_rows() {
                w.write_record([
                    c.weights.component.to_string(),
                    view.to_string(),
                    v.subject_ids()[r].clone(),
                    v.times()[r].to_string(),
                    obs[r].to_string(),
                    own[r].to_string(),
                    cross[r].to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_mean_curves(path: &Path, study: &PairedStudy, comps: &[ComponentResult]) -> Result<()> {
    let grid = study.union_times();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["component", "view", "grid_t", "value"])?;
    for c in comps {
        for (view, fit) in [("x", &c.fit_x), ("y", &c.fit_y)] {
            for (t, v) in grid.iter().zip(mean_trajectory(fit, &grid)) {
                w.write_record([c.weights.component.to_string(), view.into(), t.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_fit(args: &FitArgs, command: &Command) -> Result<i32> {
    let from_cv = args.from_cv.as_deref().map(CvReport::read_json).transpose()?;
    let selected = from_cv.as_ref().map(|r| r.selected);
    let px = args.px.or(selected.map(|s| s.0));
    let qy = args.qy.or(selected.map(|s| s.1));
    let (Some(px), Some(qy)) = (px, qy) else {
        return Err(Error::InvalidArgument("--px and --qy are required without --from-cv".into()));
    };
    ensure_dir(&args.out)?;

    let raw = args.model.read_study()?;
    let (study, dropped_x, dropped_y) = prepare(raw.clone(), !args.model.no_standardize)?;
    let cfg = args.model.mm_config(args.k, px, qy);
    let comps = fit(&study, &cfg)?;

    write_weights(&args.out.join("weights.csv"), &study, &raw, &comps)?;
    write_latent_paths(&args.out.join("latent_paths.csv"), &study, &comps)?;
    write_mean_curves(&args.out.join("mean_curves.csv"), &study, &comps)?;

    let summary: Vec<serde_json::Value> = comps
        .iter()
        .map(|c| {
            json!({
                "component": c.weights.component,
                "rho": c.rho,
                "iterations": c.iterations,
                "converged": c.converged,
                "null": c.null,
                "nnz_x": c.weights.nnz_x(),
                "nnz_y": c.weights.nnz_y(),
                "lambda_x": c.fit_x.lambda,
                "lambda_y": c.fit_y.lambda,
            })
        })
        .collect();
    let all_ok = comps.iter().all(|c| c.converged || c.null);
    write_json(
        &args.out.join("manifest.json"),
        &manifest(
            command,
            json!({
                "model": cfg,
                "selected_from_cv": selected,
                "dropped_features": { "x": dropped_x, "y": dropped_y },
                "components": summary,
                "all_converged": all_ok,
            }),
        ),
    )?;
    Ok(if all_ok { 0 } else { EXIT_NOT_CONVERGED })
}

fn levels(given: &[usize], dim: usize) -> Vec<usize> {
    if given.is_empty() {
        return default_grid(dim, 1).into_iter().map(|(a, _)| a).collect();
    }
    given.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn cmd_cv(args: &CvArgs, command: &Command) -> Result<i32> {
    ensure_dir(&args.out)?;
    if args.model.no_standardize {
        return Err(Error::InvalidArgument(
            "cross-validation always standardizes with training statistics".into(),
        ));
    }
    let raw = args.model.read_study()?;
    let xs = levels(&args.grid_px, raw.x.n_features());
    let ys = levels(&args.grid_qy, raw.y.n_features());
    let grid: Vec<(usize, usize)> = xs.iter().flat_map(|&a| ys.iter().map(move |&b| (a, b))).collect();
    let template = args.model.mm_config(1, 1, 1);
    let report = cv_select(&raw, &grid, args.folds, &template, args.model.seed)?;
    report.write_files(&args.out)?;
    write_json(
        &args.out.join("manifest.json"),
        &manifest(command, json!({ "selected": report.selected })),
    )?;
    Ok(0)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let command = cli.command;
    match &command {
        Command::Simulate(a) => cmd_simulate(a, &command),
        Command::Align(a) => cmd_align(a, &command),
        Command::Fit(a) => cmd_fit(a, &command),
        Command::Cv(a) => cmd_cv(a, &command),
    }
}

/// Entry point used by the binary: parses `args`, runs, and reports errors as
/// one JSON object on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string() });
            let _ = writeln!(std::io::stderr(), "{body}");
            EXIT_ERROR
        }
    }
}
