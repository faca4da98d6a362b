//! The `mixspline` command line: `fit`, `simulate` and `check`.
//!
//! Exit codes: 0 success, 1 failed check, 2 bad input or arguments,
//! 3 optimization or numerical failure, 4 simulation study failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::design::{BasisChoice, Dataset, GroupingFactor, ModelSpec, Tying};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, to_csv, to_json};
use crate::kernels::{CovariatePoint, KernelFamily, KernelSpec};
use crate::selection::{optimize_model, sigma_hat, Criterion, ScoreConfig, SearchBox};
use crate::sim::{replicates_csv, run_study, summary_json, SimDesign, StudyKind};
use crate::verify::{self, CheckLine};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_OPTIMIZATION: i32 = 3;
pub const EXIT_STUDY: i32 = 4;

/// Points per treatment level in `curve.csv`.
pub const CURVE_POINTS: usize = 201;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain(_)
        | Error::Argument(_)
        | Error::Rank { .. }
        | Error::Identifiability(_)
        | Error::Input(_) => EXIT_INPUT,
        Error::Numeric(_) | Error::ScoreUndefined(_) | Error::Optimization(_) => EXIT_OPTIMIZATION,
        Error::Study(_) => EXIT_STUDY,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mixspline", version, about = "Smoothing-spline mixed-effect models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a CSV file described by a JSON config.
    Fit(FitArgs),
    /// Run a simulation study of the parameter selectors.
    Simulate(SimulateArgs),
    /// Run a self-check suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: StudyKind,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated trace inflation factors.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Suite {
    Identities,
    Oracle,
    Asymptotic,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    /// Random instances for the identities and oracle suites.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_parser = parse_kind, default_value = "real")]
    pub kind: StudyKind,
    #[arg(long, value_delimiter = ',', default_value = "100,400,1600")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub replicates: usize,
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_kind(s: &str) -> std::result::Result<StudyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a.config, &a.data, a.out.as_deref()).map(|_| EXIT_OK),
        Command::Simulate(a) => cmd_simulate(&a).map(|_| EXIT_OK),
        Command::Check(a) => cmd_check(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// JSON config of `mixspline fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub kernel: KernelConfig,
    #[serde(default = "default_y")]
    pub y_column: String,
    #[serde(default = "default_x")]
    pub x_column: String,
    #[serde(default)]
    pub treatment_column: Option<String>,
    #[serde(default)]
    pub random_effects: Vec<RandomEffectConfig>,
    #[serde(default = "default_basis")]
    pub basis: BasisChoice,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub search: SearchBox,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// Upper end of the covariate domain `[0, a]`; defaults to the largest `x`.
    #[serde(default)]
    pub domain_upper: Option<f64>,
    /// ANOVA only: parallel curves without a smooth interaction.
    #[serde(default)]
    pub additive: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomEffectConfig {
    pub column: String,
    #[serde(default = "default_tying")]
    pub tying: Tying,
}

fn default_y() -> String {
    "y".into()
}
fn default_x() -> String {
    "x".into()
}
fn default_basis() -> BasisChoice {
    BasisChoice::Full
}
fn default_criterion() -> Criterion {
    Criterion::Gcv
}
fn default_alpha() -> f64 {
    1.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}
fn default_tying() -> Tying {
    Tying::Shared
}

impl FitConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            criterion: self.criterion,
            alpha: self.alpha,
        }
    }
}

/// Data table: header names and string cells, row-major.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Input(format!("data header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| Error::Input(format!("data: {e}")))
            })
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { header, rows })
    }

    fn index(&self, field: &str, column: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::Input(format!("config field `{field}`: column `{column}` not in data")))
    }

    fn strings(&self, field: &str, column: &str) -> Result<Vec<String>> {
        let j = self.index(field, column)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = &r[j];
                if v.is_empty() {
                    Err(Error::Input(format!(
                        "column `{column}` row {}: empty cell",
                        i + 1
                    )))
                } else {
                    Ok(v.clone())
                }
            })
            .collect()
    }

    fn numbers(&self, field: &str, column: &str) -> Result<Vec<f64>> {
        self.strings(field, column)?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Input(format!("column `{column}` row {}: `{v}` is not a number", i + 1))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
struct FactorLevels {
    column: String,
    tying: Tying,
    levels: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct FitParams {
    n: usize,
    kernel: KernelSpec,
    log10_lambda: f64,
    gamma: Vec<f64>,
    theta: Vec<f64>,
    tr_a: f64,
    sigma_hat: f64,
    criterion: Criterion,
    alpha: f64,
    score: f64,
    evaluations: usize,
    converged: bool,
    treatment_levels: Vec<String>,
    random_effects: Vec<FactorLevels>,
}

/// Output files of a fit, as text.
#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub fitted_csv: String,
    pub params_json: String,
    pub curve_csv: String,
}

/// Fit `config` to the CSV text `data` without touching the file system.
pub fn fit_table(config: &FitConfig, data: &str) -> Result<FitOutputs> {
    let table = Table::parse(data)?;
    let y = table.numbers("y_column", &config.y_column)?;
    let x = table.numbers("x_column", &config.x_column)?;
    if y.is_empty() {
        return Err(Error::Input("data has no rows".into()));
    }

    let mut treatment_levels = Vec::new();
    let tau = match &config.treatment_column {
        Some(col) => {
            let labels = table.strings("treatment_column", col)?;
            let (f, names) = GroupingFactor::from_labels(col.clone(), &labels, Tying::Shared);
            treatment_levels = names;
            Some(f.assignment.iter().map(|a| a + 1).collect::<Vec<_>>())
        }
        None => None,
    };

    let upper = match config.kernel.domain_upper {
        Some(a) => a,
        None => x.iter().cloned().fold(0.0, f64::max),
    };
    let kernel = match config.kernel.family {
        KernelFamily::CubicSpline => KernelSpec::cubic(upper),
        KernelFamily::ExponentialSpline => KernelSpec::exponential(upper, 1.0),
        KernelFamily::AnovaSpline => {
            if tau.is_none() {
                return Err(Error::Input(
                    "config field `treatment_column`: required by the anova_spline kernel".into(),
                ));
            }
            if config.kernel.additive {
                KernelSpec::anova_additive(upper, treatment_levels.len(), 1.0)
            } else {
                KernelSpec::anova(upper, treatment_levels.len(), 1.0, 1.0)
            }
        }
    };

    let mut spec = ModelSpec::new(kernel).with_basis(config.basis);
    let mut factors = Vec::new();
    for (k, re) in config.random_effects.iter().enumerate() {
        let labels = table.strings(&format!("random_effects[{k}].column"), &re.column)?;
        let (f, names) = GroupingFactor::from_labels(re.column.clone(), &labels, re.tying.clone());
        factors.push(FactorLevels {
            column: re.column.clone(),
            tying: re.tying.clone(),
            levels: names,
        });
        spec = spec.with_factor(f);
    }

    let mut dataset = Dataset::new(y.clone(), x.clone());
    if let Some(t) = &tau {
        dataset = dataset.with_treatment(t.clone());
    }
    let result = optimize_model(&spec, &dataset, &config.score_config(), &config.search)?;
    let fit = &result.selection.fit;

    let fitted_rows: Vec<Vec<String>> = (0..y.len())
        .map(|i| {
            vec![
                (i + 1).to_string(),
                fmt_f64(y[i]),
                fmt_f64(fit.eta_hat[i]),
                fmt_f64(fit.y_hat[i]),
                fmt_f64(fit.residuals[i]),
            ]
        })
        .collect();
    let fitted_csv = to_csv(&["row", "y", "eta_hat", "y_hat", "residual"], &fitted_rows)?;

    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let grid: Vec<f64> = (0..CURVE_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (CURVE_POINTS - 1) as f64)
        .collect();
    let mut curve_rows = Vec::new();
    let levels: Vec<(String, Option<usize>)> = if tau.is_some() {
        treatment_levels
            .iter()
            .enumerate()
            .map(|(j, l)| (l.clone(), Some(j + 1)))
            .collect()
    } else {
        vec![(String::new(), None)]
    };
    for (label, level) in &levels {
        let points: Vec<CovariatePoint> = grid.iter().map(|&x| CovariatePoint { x, tau: *level }).collect();
        let eta = result.design.eval_eta(&fit.c_hat, &points)?;
        for (x, e) in grid.iter().zip(eta) {
            curve_rows.push(vec![label.clone(), fmt_f64(*x), fmt_f64(e)]);
        }
    }
    let curve_csv = to_csv(&["level", "x", "eta_hat"], &curve_rows)?;

    let sel = &result.selection;
    let params = FitParams {
        n: y.len(),
        kernel: result.spec.kernel.clone(),
        log10_lambda: sel.params.log10_lambda,
        gamma: sel.params.gamma.clone(),
        theta: sel.params.kernel_theta.clone(),
        tr_a: fit.tr_a,
        sigma_hat: sigma_hat(fit)?,
        criterion: config.criterion,
        alpha: config.alpha,
        score: sel.score,
        evaluations: sel.evals,
        converged: sel.converged,
        treatment_levels,
        random_effects: factors,
    };
    Ok(FitOutputs {
        fitted_csv,
        params_json: to_json(&params)?,
        curve_csv,
    })
}

fn read(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_files(dir: &Path, files: &[(&str, &str)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))?;
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn cmd_fit(config_path: &Path, data_path: &Path, out: Option<&Path>) -> Result<()> {
    let config = FitConfig::from_json(&read(config_path, "config")?)?;
    let outputs = fit_table(&config, &read(data_path, "data")?)?;
    let dir = out.unwrap_or(&config.output_dir);
    write_files(
        dir,
        &[
            ("fitted.csv", &outputs.fitted_csv),
            ("params.json", &outputs.params_json),
            ("curve.csv", &outputs.curve_csv),
        ],
    )?;
    println!("wrote fitted.csv, params.json, curve.csv to {}", dir.display());
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut design = SimDesign::new(args.kind);
    if let Some(n) = args.n {
        design.n = n;
    }
    if let Some(r) = args.replicates {
        design.replicates = r;
    }
    if let Some(s) = args.seed {
        design.seed = s;
    }
    if let Some(a) = &args.alphas {
        design.alphas = a.clone();
    }
    design.validate()?;
    let study = run_study(&design, &SearchBox::default(), args.workers)?;
    write_files(
        &args.out,
        &[
            ("replicates.csv", &replicates_csv(&study.replicates)?),
            ("summary.json", &summary_json(&study.summary)?),
        ],
    )?;
    println!(
        "{} of {} replicates succeeded; wrote replicates.csv, summary.json to {}",
        study.summary.replicates_ok,
        design.replicates,
        args.out.display()
    );
    Ok(())
}

fn report(lines: &[CheckLine]) -> i32 {
    for l in lines {
        println!(
            "{}  {}  max deviation {} (tolerance {})",
            if l.passed { "PASS" } else { "FAIL" },
            l.name,
            fmt_f64(l.deviation),
            fmt_f64(l.tolerance)
        );
    }
    if lines.iter().all(|l| l.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

pub fn cmd_check(args: &CheckArgs) -> Result<i32> {
    let lines = match args.suite {
        Suite::Identities => verify::identities_suite(args.instances.unwrap_or(20), args.seed)?,
        Suite::Oracle => verify::oracle_suite(args.instances.unwrap_or(50), args.seed)?,
        Suite::Asymptotic => {
            let (rows, lines) =
                verify::asymptotic_suite(args.kind, &args.n_list, args.replicates, args.seed, args.workers)?;
            let mut by_n = BTreeMap::new();
            for r in &rows {
                by_n.insert(r.n, r);
            }
            println!("n, median ratio U, median ratio V, median loss, replicates");
            for (n, r) in by_n {
                println!(
                    "{n}, {}, {}, {}, {}",
                    fmt_f64(r.median_ratio_u),
                    fmt_f64(r.median_ratio_v),
                    fmt_f64(r.median_loss),
                    r.replicates_ok
                );
            }
            lines
        }
    };
    Ok(report(&lines))
}
