use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use margfit::efficiency::{relative_efficiency, AREConfig, LognormalScale};
use margfit::estimate::{iterative_marginal_fit, solve_score, FitResult, SolveOptions, TieMethod, VarianceMethod, WeightScheme};
use margfit::marginal::{kaplan_meier, load_external_curve, GammaPrior, ParametricFamily, StepSurvival};
use margfit::resample::{bootstrap, resample_distribution, ResampleMethod};
use margfit::simulate::{run_plan, write_plan_csv, PlanCell, StudyPlan};
use margfit::{Error, SurvivalDataset};
use serde_json::json;

const SCHEMA: u32 = 1;

#[derive(Parser)]
#[command(name = "margfit", version, about = "Marginal-survival-weighted relative-risk estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a relative-risk coefficient with a weighting scheme
    Fit(FitArgs),
    /// Run a simulation study from a JSON config
    Simulate(SimulateArgs),
    /// Tabulate asymptotic relative efficiency
    Are(AreArgs),
    /// Resampling distribution of an estimator
    Resample(ResampleArgs),
    /// Export Kaplan-Meier and fitted parametric survival curves
    KmExport(KmExportArgs),
}

#[derive(Args)]
struct SchemeArgs {
    /// Weighting scheme: pl, km, par:exponential, par:weibull,
    /// par:pwexp:c1,c2,... or curve:FILE
    #[arg(long, default_value = "pl")]
    scheme: String,
    /// Tie handling: breslow or efron
    #[arg(long, default_value = "breslow")]
    ties: TieMethod,
}

#[derive(Args)]
struct FitArgs {
    /// Data CSV with header time,status,<covariates>
    csv: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Variance estimator: auto, ag or sandwich
    #[arg(long, default_value = "auto")]
    variance: VarianceMethod,
    /// Gamma prior SHAPE,RATE on the exponential rate (par:exponential only)
    #[arg(long, value_name = "SHAPE,RATE")]
    prior: Option<String>,
    /// Write the fit as JSON to this file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON to stdout instead of the table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study config (JSON)
    config: PathBuf,
    /// Directory for <name>.csv and <name>.json
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Seed; overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, env = "MARGFIT_JOBS")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct AreArgs {
    /// Comma-separated beta0 values
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0])]
    beta0: Vec<f64>,
    /// Comma-separated lognormal censoring parameters t_c
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.5])]
    tc: Vec<f64>,
    /// Comma-separated Bernoulli probabilities p
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
    p: Vec<f64>,
    /// How t_c is read: log-sd or log-variance
    #[arg(long, default_value = "log-sd")]
    lognormal_scale: LognormalScale,
    /// Relative quadrature tolerance
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ResampleArgs {
    /// Data CSV with header time,status,<covariates>
    csv: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// random-weight or bootstrap
    #[arg(long, default_value = "random-weight")]
    method: ResampleMethod,
    /// Number of draws
    #[arg(long, default_value_t = 1000)]
    b: usize,
    /// Seed; a fresh one is generated and printed when absent
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, env = "MARGFIT_JOBS")]
    jobs: Option<usize>,
    /// Write the draws as CSV, one column per coefficient
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a JSON summary here
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct KmExportArgs {
    /// Data CSV with header time,status,<covariates>
    csv: PathBuf,
    /// Also export this fitted family on a 200-point grid
    #[arg(long)]
    family: Option<ParametricFamily>,
    /// Directory for km.csv and parametric.csv
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Are(a) => cmd_are(a),
        Command::Resample(a) => cmd_resample(a),
        Command::KmExport(a) => cmd_km_export(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::Io { path: path.display().to_string().into(), source: e })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn pretty(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("JSON values serialize");
    s.push(b'\n');
    s
}

enum SchemeSpec {
    Pl,
    Km,
    Par(ParametricFamily),
    Curve(PathBuf),
}

impl SchemeSpec {
    fn parse(s: &str) -> CliResult<Self> {
        match s {
            "pl" => Ok(SchemeSpec::Pl),
            "km" => Ok(SchemeSpec::Km),
            _ => {
                if let Some(f) = s.strip_prefix("par:") {
                    Ok(SchemeSpec::Par(f.parse()?))
                } else if let Some(p) = s.strip_prefix("curve:") {
                    Ok(SchemeSpec::Curve(PathBuf::from(p)))
                } else {
                    Err(CliError::Usage(format!(
                        "unknown scheme `{s}` (expected pl, km, par:<family> or curve:FILE)"
                    )))
                }
            }
        }
    }

    fn build(&self, data: &SurvivalDataset) -> CliResult<WeightScheme> {
        Ok(match self {
            SchemeSpec::Pl => WeightScheme::Constant,
            SchemeSpec::Km => WeightScheme::KaplanMeier,
            SchemeSpec::Par(f) => WeightScheme::Parametric(f.fit(data)?),
            SchemeSpec::Curve(p) => WeightScheme::Parametric(load_external_curve(p)?),
        })
    }
}

fn parse_prior(s: &str) -> CliResult<GammaPrior> {
    let parts: Vec<&str> = s.split(',').collect();
    let num = |x: &str| x.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad prior `{s}`")));
    match parts.as_slice() {
        [a, b] => Ok(GammaPrior { shape: num(a)?, rate: num(b)? }),
        _ => Err(CliError::Usage(format!("prior must be SHAPE,RATE, got `{s}`"))),
    }
}

fn print_fit(data: &SurvivalDataset, fit: &FitResult) {
    println!(
        "n = {}, events = {}, scheme = {}, ties = {:?}, variance = {:?}",
        data.len(),
        data.event_count(),
        fit.scheme,
        fit.ties,
        fit.variance_method
    );
    if let Some(theta) = &fit.theta_hat {
        println!("marginal: {}", serde_json::to_string(theta).unwrap_or_default());
    }
    println!("{:<12} {:>10} {:>10} {:>8}", "covariate", "coef", "se", "z");
    for (k, name) in data.covariate_names().iter().enumerate() {
        let (b, se) = (fit.beta[k], fit.std_errors[k]);
        println!("{name:<12} {b:>10.4} {:>10} {:>8.2}", format!("({se:.4})"), b / se);
    }
    println!(
        "iterations = {}, converged = {}, max |U| = {:.2e}",
        fit.iterations, fit.converged, fit.final_score_norm
    );
}

fn cmd_fit(a: FitArgs) -> CliResult {
    let data = SurvivalDataset::load_csv(&a.csv)?;
    let spec = SchemeSpec::parse(&a.scheme.scheme)?;
    let opts = SolveOptions {
        variance: a.variance,
        ..SolveOptions::default()
    };
    let prior = a.prior.as_deref().map(parse_prior).transpose()?;
    let fit = match (&spec, prior) {
        (SchemeSpec::Par(family), prior) => iterative_marginal_fit(&data, family, prior, a.scheme.ties, &opts)?,
        (_, Some(_)) => return Err(CliError::Usage("--prior needs a par: scheme".into())),
        (spec, None) => solve_score(&data, &spec.build(&data)?, a.scheme.ties, &opts)?,
    };
    let mut value = serde_json::to_value(&fit).expect("fit serializes");
    value["schema"] = json!(SCHEMA);
    value["data"] = json!({
        "file": a.csv.display().to_string(),
        "n": data.len(),
        "events": data.event_count(),
        "covariates": data.covariate_names(),
    });
    if let Some(out) = &a.out {
        write_file(out, &pretty(&value))?;
    }
    if a.json {
        io::stdout().write_all(&pretty(&value)).map_err(io_err(Path::new("stdout")))?;
    } else {
        print_fit(&data, &fit);
    }
    if !fit.converged {
        return Err(CliError::Core(Error::NoConvergence {
            what: "score solver",
            iterations: fit.iterations,
        }));
    }
    Ok(())
}

fn seed_or_fresh(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>() >> 11;
        eprintln!("no --seed given, using {s}");
        s
    })
}

fn print_plan(cells: &[PlanCell]) {
    println!(
        "{:<14} {:>6} {:>17} {:>17} {:>17} {:>8} {:>8}",
        "beta", "cens", "PL", "KM", "tilde", "E_base", "E_mc"
    );
    let cell = |m: f64, s: f64| format!("{m:.3} ({s:.3})");
    for c in cells {
        let r = &c.result;
        println!(
            "{:<14} {:>5.0}% {:>17} {:>17} {:>17} {:>8.3} {:>8.3}",
            c.beta.to_string(),
            100.0 * r.censored_fraction,
            cell(r.pl.mean, r.pl.sd),
            cell(r.km.mean, r.km.sd),
            cell(r.parametric.mean, r.parametric.sd),
            r.expected_beta_baseline,
            r.expected_beta_mc
        );
    }
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let text = fs::read_to_string(&a.config).map_err(io_err(&a.config))?;
    let plan = StudyPlan::from_json(&text)?;
    let seed = match a.seed.or(plan.seed) {
        Some(s) => s,
        None => seed_or_fresh(None),
    };
    println!("seed: {seed}");
    let cells = run_plan(&plan, seed, a.jobs)?;
    print_plan(&cells);

    let stem = a.config.file_stem().and_then(|s| s.to_str()).unwrap_or("study");
    let mut csv = Vec::new();
    write_plan_csv(&cells, &mut csv)?;
    write_file(&a.out_dir.join(format!("{stem}.csv")), &csv)?;
    let sidecar = json!({
        "schema": SCHEMA,
        "seed": seed,
        "plan": plan,
        "cells": cells,
    });
    write_file(&a.out_dir.join(format!("{stem}.json")), &pretty(&sidecar))?;
    Ok(())
}

fn cmd_are(a: AreArgs) -> CliResult {
    if a.beta0.is_empty() || a.tc.is_empty() || a.p.is_empty() {
        return Err(CliError::Usage("beta0, tc and p lists must be nonempty".into()));
    }
    let mut header = vec!["beta0".to_string(), "t_c".to_string()];
    for p in &a.p {
        header.push(format!("ratio_p{p}"));
        header.push(format!("censoring_pct_p{p}"));
    }
    let mut rows = vec![header.join(",")];
    let mut human = Vec::new();
    for &t_c in &a.tc {
        for &beta0 in &a.beta0 {
            let mut row = vec![beta0.to_string(), t_c.to_string()];
            let mut cells = Vec::new();
            for &p in &a.p {
                let cfg = AREConfig {
                    tol: a.tol,
                    scale: a.lognormal_scale,
                    ..AREConfig::new(beta0, p, t_c)
                };
                let r = relative_efficiency(&cfg)?;
                row.push(format!("{:.6}", r.ratio));
                row.push(format!("{:.3}", 100.0 * r.censoring_fraction));
                cells.push(format!("{:.3} ({:.0}%)", r.ratio, 100.0 * r.censoring_fraction));
            }
            rows.push(row.join(","));
            human.push(format!("{beta0:<6} {t_c:<6} {}", cells.join("  ")));
        }
    }
    let csv = rows.join("\n") + "\n";
    match &a.out {
        Some(out) => {
            write_file(out, csv.as_bytes())?;
            let ps: Vec<String> = a.p.iter().map(|p| format!("{:<13}", format!("p={p}"))).collect();
            println!("{:<6} {:<6} {}", "beta0", "t_c", ps.join(" "));
            for line in human {
                println!("{line}");
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_resample(a: ResampleArgs) -> CliResult {
    let data = SurvivalDataset::load_csv(&a.csv)?;
    let scheme = SchemeSpec::parse(&a.scheme.scheme)?.build(&data)?;
    let seed = seed_or_fresh(a.seed);
    let r = match a.method {
        ResampleMethod::RandomWeight => resample_distribution(&data, &scheme, a.scheme.ties, a.b, seed, a.jobs)?,
        ResampleMethod::Bootstrap => bootstrap(&data, &scheme, a.scheme.ties, a.b, seed, a.jobs)?,
    };
    println!("seed: {seed}");
    println!(
        "method = {:?}, scheme = {}, draws = {}, failures = {}",
        r.method,
        r.point.scheme,
        r.draws.len(),
        r.failures
    );
    println!("{:<12} {:>10} {:>12} {:>12}", "covariate", "coef", "analytic se", "resample se");
    for (k, name) in r.names.iter().enumerate() {
        println!(
            "{name:<12} {:>10.4} {:>12.4} {:>12.4}",
            r.point.beta[k], r.point.std_errors[k], r.se[k]
        );
    }
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        r.write_draws(&mut buf)?;
        write_file(out, &buf)?;
    }
    if let Some(path) = &a.summary {
        let value = json!({
            "schema": SCHEMA,
            "seed": seed,
            "method": r.method,
            "b": a.b,
            "failures": r.failures,
            "se": r.se,
            "point": r.point,
        });
        write_file(path, &pretty(&value))?;
    }
    Ok(())
}

fn cmd_km_export(a: KmExportArgs) -> CliResult {
    let data = SurvivalDataset::load_csv(&a.csv)?;
    let mut buf = Vec::new();
    kaplan_meier(&data).write_csv(&mut buf)?;
    write_file(&a.out_dir.join("km.csv"), &buf)?;
    println!("wrote {}", a.out_dir.join("km.csv").display());
    if let Some(family) = &a.family {
        let model = family.fit(&data)?;
        let end = data.max_time();
        let grid: Vec<f64> = (1..200).map(|k| end * k as f64 / 199.0).collect();
        let values = grid.iter().map(|&t| model.survival_at(t)).collect();
        let curve = StepSurvival::new(grid, values)?;
        let mut buf = Vec::new();
        curve.write_csv(&mut buf)?;
        write_file(&a.out_dir.join("parametric.csv"), &buf)?;
        println!(
            "wrote {} ({})",
            a.out_dir.join("parametric.csv").display(),
            serde_json::to_string(&model).unwrap_or_default()
        );
    }
    Ok(())
}
