//! Command-line driver. Every command computes all results first and only then
//! writes its files, each through a temporary file renamed into place.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::baselines::{fit_substitution, SubstitutionRule};
use crate::bootstrap::{bootstrap_with_estimate, wald_interval};
use crate::data::{load_csv, CsvSchema, ObservationSet};
use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::gof::{export_gof_plot_data, score_process};
use crate::par;
use crate::pipeline::{fit_two_stage, TwoStageFit, TwoStageOptions};
use crate::sim::{self, Calibration, SimScenario};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "lodreg", version, about = "Regression with a covariate subject to a limit of detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-stage fit with complete-case and optional substitution fits.
    Fit(FitArgs),
    /// Bootstrap standard errors and Wald intervals for the two-stage fit.
    Bootstrap(BootArgs),
    /// Score-process goodness-of-fit test for the AFT model.
    Gof(GofArgs),
    /// Monte Carlo comparison of all estimators.
    Simulate(SimArgs),
    /// Detection limit giving a target censoring rate under the simulation design.
    Calibrate(CalArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Output directory. Not echoed, so outputs do not depend on where they are written.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; 0 uses all available cores. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Column mapping, e.g. `y=bmi,z=pcb,detect=pcb_det,x=age,x=sex`.
    #[arg(long)]
    pub schema: String,
    #[arg(long, value_parser = parse_family)]
    #[serde(serialize_with = "display")]
    pub family: GlmFamily,
    /// Detection limit on the concentration scale.
    #[arg(long)]
    pub limit: f64,
    /// Residual-scale truncation point; defaults to the largest detected residual.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Extra estimators to report (repeatable).
    #[arg(long = "method", value_parser = MethodArg::from_str)]
    #[serde(serialize_with = "display_vec")]
    pub methods: Vec<MethodArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BootArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 200)]
    pub n_boot: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GofArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub schema: String,
    #[arg(long)]
    pub limit: f64,
    /// Covariate to test (repeatable); defaults to every non-constant covariate.
    #[arg(long = "covariate")]
    pub covariates: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub n_sim: usize,
    /// Simulated paths written to each plot file.
    #[arg(long, default_value_t = 20)]
    pub plot_paths: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimArgs {
    #[arg(long, value_parser = parse_family)]
    #[serde(serialize_with = "display")]
    pub family: GlmFamily,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub n_reps: usize,
    /// Bootstrap replicates per Monte Carlo replicate; 0 skips the bootstrap.
    #[arg(long, default_value_t = 100)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0.30)]
    pub target_censoring: f64,
    #[arg(long, default_value_t = 10_000_000)]
    pub calibration_draws: usize,
    /// Also write the dataset of this replicate as CSV.
    #[arg(long)]
    pub emit_dataset: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalArgs {
    #[arg(long, default_value_t = 0.30)]
    pub target_censoring: f64,
    #[arg(long, default_value_t = 10_000_000)]
    pub calibration_draws: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

fn parse_family(s: &str) -> std::result::Result<GlmFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn display_vec<T: std::fmt::Display, S: serde::Serializer>(v: &[T], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|m| m.to_string()))
}

/// Estimator selector.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodArg {
    TwoStage,
    CompleteCase,
    Substitution(SubstitutionRule),
}

impl FromStr for MethodArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "two_stage" => MethodArg::TwoStage,
            "complete_case" => MethodArg::CompleteCase,
            "sub_L" => MethodArg::Substitution(SubstitutionRule::AT_LIMIT),
            "sub_Lsqrt2" => MethodArg::Substitution(SubstitutionRule::AT_LIMIT_OVER_SQRT2),
            "sub_zero" => MethodArg::Substitution(SubstitutionRule::AT_ZERO),
            other => match other.strip_prefix("sub_condmean=") {
                Some(v) => MethodArg::Substitution(SubstitutionRule::conditional_mean(
                    v.parse().map_err(|_| format!("`{v}` is not a number"))?,
                )),
                None => return Err(format!("unknown method `{other}`")),
            },
        })
    }
}

impl std::fmt::Display for MethodArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodArg::TwoStage => f.write_str("two_stage"),
            MethodArg::CompleteCase => f.write_str("complete_case"),
            MethodArg::Substitution(r) => match r.conditional_mean_value {
                Some(v) => write!(f, "{}={v}", r.name()),
                None => f.write_str(r.name()),
            },
        }
    }
}

/// Files produced by one command, written only after everything succeeded.
struct Output {
    dir: PathBuf,
    header: String,
    files: Vec<(String, Vec<u8>)>,
}

impl Output {
    fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<(Self, String)> {
        let echo = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        let mut header = format!("# lodreg {VERSION}\n# command: {command}\n# seed: {seed}\n");
        for line in echo.lines() {
            let _ = writeln!(header, "# config: {line}");
        }
        let meta = format!("tool = \"lodreg\"\nversion = \"{VERSION}\"\ncommand = \"{command}\"\nseed = {seed}\n\n[config]\n{echo}");
        Ok((Output { dir: PathBuf::new(), header, files: Vec::new() }, meta))
    }

    fn csv(&mut self, name: &str, extra: &[String], body: Vec<u8>) {
        let mut bytes = self.header.clone().into_bytes();
        for e in extra {
            bytes.extend(format!("# {e}\n").bytes());
        }
        bytes.extend(body);
        self.files.push((name.to_string(), bytes));
    }

    fn raw(&mut self, name: &str, body: Vec<u8>) {
        self.files.push((name.to_string(), body));
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir)?;
        let mut written = Vec::new();
        for (name, bytes) in self.files {
            let path = self.dir.join(&name);
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
            tmp.write_all(&bytes)?;
            tmp.flush()?;
            tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn load(input: &Path, schema: &str, limit: f64) -> Result<ObservationSet> {
    let schema = CsvSchema::parse(schema)?;
    load_csv(input, &schema, limit)
}

fn terms(data: &ObservationSet) -> Vec<String> {
    data.layout().term_names(data.x_names())
}

fn fmt_bool(b: bool) -> String {
    u8::from(b).to_string()
}

fn cmd_fit(a: &FitArgs) -> Result<Output> {
    let (mut out, meta) = Output::new("fit", a.common.seed, a)?;
    let data = load(&a.input.input, &a.input.schema, a.input.limit)?;
    let fam = a.input.family;
    let fit = fit_two_stage(&data, fam, TwoStageOptions { tau: a.input.tau })?;
    let names = terms(&data);

    let mut rows: Vec<[String; 3]> = Vec::new();
    let mut push = |block: &str, name: &str, v: String| rows.push([block.into(), name.into(), v]);
    for (t, v) in names.iter().zip(&fit.complete_case.theta) {
        push("complete_case", t, v.to_string());
    }
    push("complete_case", "phi", fit.complete_case.phi.to_string());
    push("complete_case", "n_used", fit.complete_case.n_used.to_string());
    for (t, v) in data.x_names().iter().zip(&fit.aft.alpha) {
        push("aft", t, v.to_string());
    }
    push("aft", "gehan_objective", fit.aft.gehan_objective.to_string());
    push("aft", "subgradient_norm", fit.aft.subgradient_norm.to_string());
    push("aft", "iterations", fit.aft.iterations.to_string());
    push("km", "n_jumps", fit.nuisance.eta_hat.len().to_string());
    push("km", "total_mass", fit.nuisance.eta_hat.total_mass().to_string());
    push("km", "tau", fit.nuisance.tau.to_string());
    for (t, v) in names.iter().zip(&fit.pseudo.theta) {
        push("two_stage", t, v.to_string());
    }
    push("two_stage", "converged", fmt_bool(fit.pseudo.converged));
    push("two_stage", "iterations", fit.pseudo.iterations.to_string());
    push("two_stage", "score_norm", fit.pseudo.score_norm.to_string());
    push("two_stage", "floored_subjects", fit.pseudo.floored_subjects.to_string());
    for m in &a.methods {
        let theta = match m {
            MethodArg::TwoStage => fit.pseudo.theta.clone(),
            MethodArg::CompleteCase => fit.complete_case.theta.clone(),
            MethodArg::Substitution(rule) => fit_substitution(&data, rule, fam)?.theta,
        };
        let block = m.to_string();
        for (t, v) in names.iter().zip(&theta) {
            push(&block, t, v.to_string());
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "term", "value"])?;
    for r in &rows {
        w.write_record(r)?;
    }
    out.csv("fit.csv", &[format!("n: {} censored: {}", data.n(), data.n() - data.n_detected())], into_bytes(w)?);
    out.csv("km_jumps.csv", &[], km_table(&fit)?);
    out.raw("run.toml", meta.into_bytes());
    Ok(out)
}

fn km_table(fit: &TwoStageFit) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["residual", "mass"])?;
    let eta = &fit.nuisance.eta_hat;
    for (t, m) in eta.jump_points().iter().zip(eta.masses()) {
        w.write_record([t.to_string(), m.to_string()])?;
    }
    into_bytes(w)
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn cmd_bootstrap(a: &BootArgs) -> Result<Output> {
    let (mut out, meta) = Output::new("bootstrap", a.common.seed, a)?;
    let data = load(&a.input.input, &a.input.schema, a.input.limit)?;
    let opts = TwoStageOptions { tau: a.input.tau };
    let fit = fit_two_stage(&data, a.input.family, opts)?;
    let res = bootstrap_with_estimate(&data, a.input.family, fit.pseudo.theta, a.n_boot, a.common.seed, opts)?;
    let names = terms(&data);
    let se = res.std_errors();
    let ci90 = wald_interval(&res, 0.90)?;
    let ci95 = wald_interval(&res, 0.95)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["term", "estimate", "std_error", "ci90_lower", "ci90_upper", "ci95_lower", "ci95_upper"])?;
    for j in 0..names.len() {
        w.write_record([
            names[j].clone(),
            res.theta_hat[j].to_string(),
            se[j].to_string(),
            ci90[j].0.to_string(),
            ci90[j].1.to_string(),
            ci95[j].0.to_string(),
            ci95[j].1.to_string(),
        ])?;
    }
    let mut extra = vec![format!("n_boot: {} failed: {}", res.n_boot, res.n_failed)];
    if let Some(warn) = &res.warning {
        extra.push(format!("warning: {warn}"));
    }
    out.csv("bootstrap.csv", &extra, into_bytes(w)?);

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["term".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (r, name) in names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend((0..names.len()).map(|s| res.boot_cov[(r, s)].to_string()));
        w.write_record(&rec)?;
    }
    out.csv("covariance.csv", &[], into_bytes(w)?);
    out.raw("run.toml", meta.into_bytes());
    Ok(out)
}

fn cmd_gof(a: &GofArgs) -> Result<Output> {
    let (mut out, meta) = Output::new("gof", a.common.seed, a)?;
    let data = load(&a.input, &a.schema, a.limit)?;
    let aft = crate::aft::fit_gehan_default(&data)?;
    let indices: Vec<usize> = if a.covariates.is_empty() {
        (0..data.p())
            .filter(|&j| {
                let col = data.x_col(j);
                col.iter().any(|&v| v != col[0])
            })
            .collect()
    } else {
        a.covariates
            .iter()
            .map(|c| {
                data.x_names()
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| Error::Usage(format!("`{c}` is not a covariate in the schema")))
            })
            .collect::<Result<_>>()?
    };
    if indices.is_empty() {
        return Err(Error::Estimation("no non-constant covariate to test".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["covariate", "sup_statistic", "p_value", "n_sim"])?;
    let mut plots = Vec::new();
    for &j in &indices {
        let proc_ = score_process(&data, &aft, j, a.n_sim, a.common.seed)?;
        w.write_record([
            proc_.covariate_name.clone(),
            proc_.observed_sup().to_string(),
            proc_.p_value.to_string(),
            a.n_sim.to_string(),
        ])?;
        let table = export_gof_plot_data(&proc_, a.plot_paths.min(a.n_sim))?;
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        plots.push((format!("gof_plot_{}.csv", proc_.covariate_name), buf));
    }
    out.csv("gof.csv", &[], into_bytes(w)?);
    for (name, buf) in plots {
        out.csv(&name, &[], buf);
    }
    out.raw("run.toml", meta.into_bytes());
    Ok(out)
}

fn scenario(a: &SimArgs) -> SimScenario {
    let mut s = SimScenario::standard(a.family);
    s.n = a.n;
    s.n_reps = a.n_reps;
    s.n_boot = a.n_boot;
    s.target_censoring = a.target_censoring;
    s.calibration_draws = a.calibration_draws;
    s.seed = a.common.seed;
    s
}

fn calibration_record(cal: &Calibration) -> String {
    format!("C: {} L: {} conditional_mean: {}", cal.c, cal.limit, cal.conditional_mean)
}

fn cmd_simulate(a: &SimArgs) -> Result<Output> {
    let (mut out, meta) = Output::new("simulate", a.common.seed, a)?;
    let sc = scenario(a);
    sc.validate()?;
    let cal = sim::calibrate(&sc)?;
    if let Some(rep) = a.emit_dataset {
        let ds = sim::generate_dataset(&sc, cal.c, rep)?;
        let mut buf = Vec::new();
        ds.observed.write_csv(&mut buf)?;
        out.csv(&format!("dataset_{rep}.csv"), &[calibration_record(&cal)], buf);
    }
    if a.n_reps > 0 {
        let report = sim::run_study(&sc, Some(cal))?;
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        out.csv("report.csv", &[calibration_record(&cal), format!("mean_censoring: {}", report.mean_censoring)], buf);
        out.raw("report.txt", report.to_text_table().into_bytes());
    }
    out.raw("run.toml", meta.into_bytes());
    Ok(out)
}

fn cmd_calibrate(a: &CalArgs) -> Result<Output> {
    let (mut out, meta) = Output::new("calibrate", a.common.seed, a)?;
    let mut sc = SimScenario::standard(GlmFamily::Gaussian);
    sc.target_censoring = a.target_censoring;
    sc.calibration_draws = a.calibration_draws;
    sc.seed = a.common.seed;
    let cal = sim::calibrate(&sc)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target_censoring", "c", "limit", "conditional_mean", "draws"])?;
    w.write_record([
        a.target_censoring.to_string(),
        cal.c.to_string(),
        cal.limit.to_string(),
        cal.conditional_mean.to_string(),
        a.calibration_draws.to_string(),
    ])?;
    out.csv("calibration.csv", &[], into_bytes(w)?);
    out.raw("run.toml", meta.into_bytes());
    Ok(out)
}

/// Runs a parsed command line and returns the files written.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let (common, job): (&Common, Box<dyn Fn() -> Result<Output> + Send + Sync + '_>) = match &cli.command {
        Command::Fit(a) => (&a.common, Box::new(move || cmd_fit(a))),
        Command::Bootstrap(a) => (&a.common, Box::new(move || cmd_bootstrap(a))),
        Command::Gof(a) => (&a.common, Box::new(move || cmd_gof(a))),
        Command::Simulate(a) => (&a.common, Box::new(move || cmd_simulate(a))),
        Command::Calibrate(a) => (&a.common, Box::new(move || cmd_calibrate(a))),
    };
    let mut out = par::with_workers(common.workers, job)?;
    out.dir = common.out.clone();
    out.commit()
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
