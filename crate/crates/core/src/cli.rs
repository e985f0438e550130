//! Command-line front end: `solve`, `simulate`, `sweep` and `compare`.
//!
//! Settings come from an optional flat TOML file and are overridden by flags.
//! Results go to `--out` (or stdout); errors and warnings go to stderr as one
//! JSON object per line. Exit status: 0 success, 1 invalid input, 2 solver
//! non-convergence, 3 cross-check disagreement.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::fixedpoint::{solve_fixed_point_with, FixedPoint, SolveOptions};
use crate::metrics::{metrics_from_fixed_point, metrics_from_simulation, MetricsReport};
use crate::model::{Model, ModelConfig, DEFAULT_TRUNCATION};
use crate::simulator::{empirical_distance, simulate, SimConfig, SimReport};

pub const SWEEP_HEADER: &str =
    "lambda,d1,d2,model,mean_q,var_q,availability,failure_freq,mf_throughput,flow_imbalance,residual,trunc_err";
pub const COMPARE_HEADER: &str = "lambda,d1,d2,model,N,mean_q_mf,mean_q_sim,mean_q_hw,availability_mf,availability_sim,availability_hw,uw1_mf,uw1_sim,uw1_hw,empirical_distance";
/// Grid used by `sweep` when no axis is given.
pub const DEFAULT_SWEEP: &str = "lambda=0:6:60";

/// Largest integer that survives a round trip through an IEEE double.
const JSON_EXACT: u64 = 1 << 53;

#[derive(Debug, Parser)]
#[command(name = "smrepair", version, about = "Supermarket models with repairable servers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Solve,
    Simulate,
    Sweep,
    Compare,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the mean-field fixed point and its measures.
    Solve(Flags),
    /// Simulate the finite-N system.
    Simulate(Flags),
    /// Solve over a parameter grid and emit one row per point.
    Sweep(Flags),
    /// Fixed point against simulation, per grid point.
    Compare(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Every flag is optional so that the config file can supply it.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    #[arg(long)]
    pub model: Option<Model>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub d1: Option<u32>,
    #[arg(long)]
    pub d2: Option<u32>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// `name=a:b:n` (n interior points of (a, b)) or `name=v1,v2,...`;
    /// repeat for a product grid, first axis outermost.
    #[arg(long)]
    #[serde(default)]
    pub sweep: Vec<String>,
    /// Sampling interval of the recorded simulation trajectory.
    #[arg(long)]
    pub sample_interval: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads for grid points and replications (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Flags {
    /// Fields set here win over `base`.
    fn over(self, base: Flags) -> Flags {
        Flags {
            model: self.model.or(base.model),
            lambda: self.lambda.or(base.lambda),
            mu: self.mu.or(base.mu),
            alpha: self.alpha.or(base.alpha),
            beta: self.beta.or(base.beta),
            d1: self.d1.or(base.d1),
            d2: self.d2.or(base.d2),
            n: self.n.or(base.n),
            horizon: self.horizon.or(base.horizon),
            warmup: self.warmup.or(base.warmup),
            seed: self.seed.or(base.seed),
            replications: self.replications.or(base.replications),
            tol: self.tol.or(base.tol),
            k: self.k.or(base.k),
            sweep: if self.sweep.is_empty() { base.sweep } else { self.sweep },
            sample_interval: self.sample_interval.or(base.sample_interval),
            format: self.format.or(base.format),
            out: self.out.or(base.out),
            config: self.config,
            workers: self.workers.or(base.workers),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Lambda,
    Mu,
    Alpha,
    Beta,
    D1,
    D2,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum AxisValue {
    Real(f64),
    Int(u32),
    Model(Model),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Axis {
    pub param: Param,
    pub values: Vec<AxisValue>,
}

/// Parses `name=a:b:n` or `name=v1,v2,...`. For `d1`/`d2`, `a:b` is an
/// inclusive integer range.
pub fn parse_axis(s: &str) -> Result<Axis, Error> {
    let bad = |m: String| Error::InvalidConfig(m);
    let (name, spec) = s
        .split_once('=')
        .ok_or_else(|| bad(format!("sweep axis `{s}` is not of the form name=values")))?;
    let param = match name.trim() {
        "lambda" => Param::Lambda,
        "mu" => Param::Mu,
        "alpha" => Param::Alpha,
        "beta" => Param::Beta,
        "d1" => Param::D1,
        "d2" => Param::D2,
        "model" => Param::Model,
        other => return Err(bad(format!("unknown sweep parameter `{other}`"))),
    };
    let spec = spec.trim();
    let real = |t: &str| -> Result<f64, Error> {
        t.trim()
            .parse::<f64>()
            .map_err(|_| bad(format!("bad number `{t}` in sweep axis `{s}`")))
    };
    let int = |t: &str| -> Result<u32, Error> {
        t.trim()
            .parse::<u32>()
            .map_err(|_| bad(format!("bad integer `{t}` in sweep axis `{s}`")))
    };
    let values = match param {
        Param::Model => spec
            .split(',')
            .map(|t| t.trim().parse::<Model>().map(AxisValue::Model))
            .collect::<Result<Vec<_>, _>>()?,
        Param::D1 | Param::D2 => {
            if let Some((a, b)) = spec.split_once(':') {
                let (a, b) = (int(a)?, int(b)?);
                (a..=b).map(AxisValue::Int).collect()
            } else {
                spec.split(',').map(|t| int(t).map(AxisValue::Int)).collect::<Result<_, _>>()?
            }
        }
        _ => {
            let parts: Vec<&str> = spec.split(':').collect();
            match parts.as_slice() {
                [a, b, n] => {
                    let (a, b) = (real(a)?, real(b)?);
                    let n: usize = n
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("bad point count in sweep axis `{s}`")))?;
                    (1..=n)
                        .map(|i| AxisValue::Real(a + (b - a) * i as f64 / (n + 1) as f64))
                        .collect()
                }
                [_] => spec.split(',').map(|t| real(t).map(AxisValue::Real)).collect::<Result<_, _>>()?,
                _ => return Err(bad(format!("sweep axis `{s}` must be a:b:n or a list"))),
            }
        }
    };
    if values.is_empty() {
        return Err(bad(format!("sweep axis `{s}` has no values")));
    }
    Ok(Axis { param, values })
}

/// Fully resolved run description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSpec {
    pub command: CommandKind,
    /// Base configuration; sweep axes override its fields per point.
    /// `lambda` and `model` may be `None` only when an axis supplies them.
    pub model: Option<Model>,
    pub lambda: Option<f64>,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d1: u32,
    pub d2: u32,
    pub tol: f64,
    pub truncation: usize,
    pub sweep: Vec<Axis>,
    pub sim: Option<SimSettings>,
    pub output_path: Option<PathBuf>,
    pub output_format: Format,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimSettings {
    pub n: usize,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    pub replications: usize,
    pub sample_interval: Option<f64>,
}

/// One resolved grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Point {
    pub model: Model,
    pub config: ModelConfig,
}

impl RunSpec {
    pub fn resolve(command: CommandKind, flags: Flags) -> Result<RunSpec, Error> {
        let base = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str::<Flags>(&text)
                    .map_err(|e| Error::InvalidConfig(format!("bad config {}: {e}", path.display())))?
            }
            None => Flags::default(),
        };
        let f = flags.over(base);
        let mut sweep = f.sweep.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>, _>>()?;
        if command == CommandKind::Sweep && sweep.is_empty() {
            sweep.push(parse_axis(DEFAULT_SWEEP)?);
        }
        if command != CommandKind::Sweep && command != CommandKind::Compare && !sweep.is_empty() {
            return Err(Error::InvalidConfig("--sweep applies to sweep and compare only".into()));
        }
        let swept = |p: Param| sweep.iter().any(|a| a.param == p);
        if f.model.is_none() && !swept(Param::Model) {
            return Err(Error::InvalidConfig("--model is required".into()));
        }
        if f.lambda.is_none() && !swept(Param::Lambda) {
            return Err(Error::InvalidConfig("--lambda is required".into()));
        }
        let sim = matches!(command, CommandKind::Simulate | CommandKind::Compare).then(|| SimSettings {
            n: f.n.unwrap_or(500),
            horizon: f.horizon.unwrap_or(5000.0),
            warmup: f.warmup.unwrap_or(500.0),
            seed: f.seed.unwrap_or(1),
            replications: f.replications.unwrap_or(10),
            sample_interval: f.sample_interval,
        });
        let default_format = match command {
            CommandKind::Solve | CommandKind::Simulate => Format::Json,
            _ => Format::Csv,
        };
        if f.workers == Some(0) {
            return Err(Error::InvalidConfig("--workers must be at least 1".into()));
        }
        let tol = f.tol.unwrap_or(1e-10);
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
        }
        Ok(RunSpec {
            command,
            model: f.model,
            lambda: f.lambda,
            mu: f.mu.unwrap_or(9.0),
            alpha: f.alpha.unwrap_or(2.0),
            beta: f.beta.unwrap_or(5.0),
            d1: f.d1.unwrap_or(1),
            d2: f.d2.unwrap_or(1),
            tol,
            truncation: f.k.unwrap_or(DEFAULT_TRUNCATION),
            sweep,
            sim,
            output_path: f.out,
            output_format: f.format.unwrap_or(default_format),
            workers: f.workers,
        })
    }

    /// Grid points in output order: product of the axes, first axis
    /// outermost. Without axes, the single base point.
    pub fn points(&self) -> Vec<Point> {
        let mut points = vec![(self.model, self.lambda, self.mu, self.alpha, self.beta, self.d1, self.d2)];
        for axis in &self.sweep {
            let mut next = Vec::with_capacity(points.len() * axis.values.len());
            for p in &points {
                for v in &axis.values {
                    let mut q = *p;
                    match (axis.param, *v) {
                        (Param::Lambda, AxisValue::Real(x)) => q.1 = Some(x),
                        (Param::Mu, AxisValue::Real(x)) => q.2 = x,
                        (Param::Alpha, AxisValue::Real(x)) => q.3 = x,
                        (Param::Beta, AxisValue::Real(x)) => q.4 = x,
                        (Param::D1, AxisValue::Int(x)) => q.5 = x,
                        (Param::D2, AxisValue::Int(x)) => q.6 = x,
                        (Param::Model, AxisValue::Model(m)) => q.0 = Some(m),
                        _ => unreachable!("parse_axis pairs parameters with value kinds"),
                    }
                    next.push(q);
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|(model, lambda, mu, alpha, beta, d1, d2)| {
                let model = model.expect("model checked in resolve");
                let lambda = lambda.expect("lambda checked in resolve");
                Point {
                    model,
                    config: ModelConfig::new(model, lambda, mu, alpha, beta, d1, d2),
                }
            })
            .collect()
    }

    fn solve_options(&self) -> SolveOptions {
        let mut o = SolveOptions::new(self.tol);
        o.truncation = self.truncation;
        o
    }

    fn sim_config(&self, model: ModelConfig) -> SimConfig {
        let s = self.sim.expect("simulation settings present");
        let mut c = SimConfig::new(model, s.n, s.horizon, s.warmup, s.seed, s.replications);
        c.sample_interval = s.sample_interval;
        c.k_obs = self.truncation;
        c
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain(_) | Error::Index { .. } | Error::InvalidConfig(_) | Error::InvalidState(_) | Error::Unstable { .. } => 1,
        Error::CrossCheck { .. } => 3,
        Error::Instability { .. }
        | Error::Monotonicity { .. }
        | Error::NonConvergence { .. }
        | Error::BracketFailure { .. }
        | Error::NoRoot { .. }
        | Error::NegativeVariance(_) => 2,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Index { .. } => "index",
        Error::InvalidConfig(_) => "invalid_config",
        Error::InvalidState(_) => "invalid_state",
        Error::Unstable { .. } => "unstable",
        Error::Instability { .. } => "instability",
        Error::Monotonicity { .. } => "monotonicity",
        Error::NonConvergence { .. } => "non_convergence",
        Error::BracketFailure { .. } => "bracket_failure",
        Error::NoRoot { .. } => "no_root",
        Error::CrossCheck { .. } => "cross_check",
        Error::NegativeVariance(_) => "negative_variance",
    }
}

/// One-line JSON error record.
pub fn error_record(e: &Error, point: Option<&ModelConfig>) -> String {
    let mut v = json!({
        "level": "error",
        "code": exit_code(e),
        "kind": error_kind(e),
        "message": e.to_string(),
    });
    if let Some(p) = point {
        v["config"] = serde_json::to_value(p).expect("config serializes");
    }
    v.to_string()
}

/// Formats with 12 significant digits, plain decimal where reasonable,
/// trailing zeros removed.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mant))
    }
}

/// Replaces integers that a double cannot hold exactly by decimal strings.
fn json_safe(v: &mut Value) {
    match v {
        Value::Number(n) => {
            let big = n.as_u64().is_some_and(|u| u > JSON_EXACT) || n.as_i64().is_some_and(|i| i.unsigned_abs() > JSON_EXACT);
            if big {
                *v = Value::String(n.to_string());
            }
        }
        Value::Array(a) => a.iter_mut().for_each(json_safe),
        Value::Object(o) => o.values_mut().for_each(json_safe),
        _ => {}
    }
}

fn to_json<T: Serialize>(x: &T) -> String {
    let mut v = serde_json::to_value(x).expect("output serializes");
    json_safe(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

/// Result of a run before it is written out.
pub struct Outcome {
    pub body: String,
    /// Diagnostic lines for stderr.
    pub diagnostics: Vec<String>,
    pub code: i32,
}

impl Outcome {
    fn failed(e: &Error, point: Option<&ModelConfig>) -> Self {
        Self {
            body: String::new(),
            diagnostics: vec![error_record(e, point)],
            code: exit_code(e),
        }
    }
}

/// Runs a resolved spec on a rayon pool of the requested size.
pub fn execute(spec: &RunSpec) -> Outcome {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = spec.workers {
        builder = builder.num_threads(w);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => return Outcome::failed(&Error::InvalidConfig(format!("thread pool: {e}")), None),
    };
    pool.install(|| match spec.command {
        CommandKind::Solve => run_solve(spec),
        CommandKind::Simulate => run_simulate(spec),
        CommandKind::Sweep => run_sweep(spec),
        CommandKind::Compare => run_compare(spec),
    })
}

fn solve_point(spec: &RunSpec, cfg: &ModelConfig) -> Result<(FixedPoint, MetricsReport), Error> {
    cfg.validate()?;
    let fp = solve_fixed_point_with(cfg, &spec.solve_options())?;
    let m = metrics_from_fixed_point(&fp, cfg)?;
    Ok((fp, m))
}

fn run_solve(spec: &RunSpec) -> Outcome {
    let point = spec.points()[0];
    let cfg = point.config;
    let (fp, m) = match solve_point(spec, &cfg) {
        Ok(x) => x,
        Err(e) => return Outcome::failed(&e, Some(&cfg)),
    };
    let body = match spec.output_format {
        Format::Json => to_json(&json!({
            "model": point.model,
            "config": cfg,
            "tol": spec.tol,
            "fixed_point": fp,
            "metrics": m,
        })),
        Format::Csv => {
            let mut s = String::from("level,pi_w,pi_r\n");
            for k in 0..fp.pi_w.len() {
                let r = if k == 0 { String::new() } else { fmt_num(fp.r(k)) };
                let _ = writeln!(s, "{k},{},{r}", fmt_num(fp.w(k)));
            }
            s
        }
    };
    Outcome {
        body,
        diagnostics: Vec::new(),
        code: 0,
    }
}

fn warning_records(report: &SimReport) -> Vec<String> {
    report
        .warnings
        .iter()
        .map(|w| json!({"level": "warning", "message": w}).to_string())
        .collect()
}

fn run_simulate(spec: &RunSpec) -> Outcome {
    let point = spec.points()[0];
    let sim = spec.sim_config(point.config);
    let result = simulate(&sim).and_then(|r| {
        let m = metrics_from_simulation(&r, &point.config)?;
        Ok((r, m))
    });
    let (report, m) = match result {
        Ok(x) => x,
        Err(e) => return Outcome::failed(&e, Some(&point.config)),
    };
    let body = match spec.output_format {
        Format::Json => to_json(&json!({
            "model": point.model,
            "config": point.config,
            "simulation": sim,
            "report": report,
            "metrics": m,
        })),
        Format::Csv => {
            let mut s = String::from("level,uw_hat,uw_half_width,ur_hat,ur_half_width\n");
            for k in 0..report.uw_hat.len() {
                let (r, rh) = if k == 0 {
                    (String::new(), String::new())
                } else {
                    (fmt_num(report.ur_hat[k - 1]), fmt_num(report.half_width_r[k - 1]))
                };
                let _ = writeln!(s, "{k},{},{},{r},{rh}", fmt_num(report.uw_hat[k]), fmt_num(report.half_width_w[k]));
            }
            s
        }
    };
    Outcome {
        body,
        diagnostics: warning_records(&report),
        code: 0,
    }
}

/// Keeps the code of the first failing point in grid order.
fn first_code(results: impl Iterator<Item = Option<i32>>) -> i32 {
    results.flatten().next().unwrap_or(0)
}

fn run_sweep(spec: &RunSpec) -> Outcome {
    let points = spec.points();
    let results: Vec<Result<(FixedPoint, MetricsReport), Error>> =
        points.par_iter().map(|p| solve_point(spec, &p.config)).collect();
    let mut diagnostics = Vec::new();
    for (p, r) in points.iter().zip(&results) {
        if let Err(e) = r {
            diagnostics.push(error_record(e, Some(&p.config)));
        }
    }
    let code = first_code(results.iter().map(|r| r.as_ref().err().map(exit_code)));
    let body = match spec.output_format {
        Format::Csv => {
            let mut s = String::from(SWEEP_HEADER);
            s.push('\n');
            for (p, r) in points.iter().zip(&results) {
                let c = &p.config;
                let _ = write!(s, "{},{},{},{}", fmt_num(c.lambda), c.d1, c.d2, p.model);
                match r {
                    Ok((fp, m)) => {
                        for x in [
                            m.mean_q,
                            m.var_q,
                            m.availability,
                            m.failure_freq,
                            m.mf_throughput,
                            m.flow_imbalance,
                            fp.residual,
                            m.trunc_err,
                        ] {
                            let _ = write!(s, ",{}", fmt_num(x));
                        }
                    }
                    Err(_) => s.push_str(",,,,,,,,"),
                }
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let rows: Vec<Value> = points
                .iter()
                .zip(&results)
                .map(|(p, r)| match r {
                    Ok((fp, m)) => json!({
                        "model": p.model,
                        "config": p.config,
                        "tol": spec.tol,
                        "metrics": m,
                        "residual": fp.residual,
                        "truncation": fp.truncation,
                        "method": fp.method,
                    }),
                    Err(e) => json!({
                        "model": p.model,
                        "config": p.config,
                        "tol": spec.tol,
                        "error": e.to_string(),
                    }),
                })
                .collect();
            to_json(&rows)
        }
    };
    Outcome { body, diagnostics, code }
}

struct CompareRow {
    fp: FixedPoint,
    mf: MetricsReport,
    report: SimReport,
    sim: MetricsReport,
    distance: f64,
}

fn compare_point(spec: &RunSpec, cfg: &ModelConfig) -> Result<CompareRow, Error> {
    let (fp, mf) = solve_point(spec, cfg)?;
    let report = simulate(&spec.sim_config(*cfg))?;
    let sim = metrics_from_simulation(&report, cfg)?;
    let distance = empirical_distance(&report, &fp.state());
    Ok(CompareRow {
        fp,
        mf,
        report,
        sim,
        distance,
    })
}

fn run_compare(spec: &RunSpec) -> Outcome {
    let points = spec.points();
    let results: Vec<Result<CompareRow, Error>> = points.par_iter().map(|p| compare_point(spec, &p.config)).collect();
    let mut diagnostics = Vec::new();
    for (p, r) in points.iter().zip(&results) {
        match r {
            Err(e) => diagnostics.push(error_record(e, Some(&p.config))),
            Ok(row) => diagnostics.extend(warning_records(&row.report)),
        }
    }
    let code = first_code(results.iter().map(|r| r.as_ref().err().map(exit_code)));
    let n = spec.sim.expect("compare has simulation settings").n;
    let body = match spec.output_format {
        Format::Csv => {
            let mut s = String::from(COMPARE_HEADER);
            s.push('\n');
            for (p, r) in points.iter().zip(&results) {
                let c = &p.config;
                let _ = write!(s, "{},{},{},{},{n}", fmt_num(c.lambda), c.d1, c.d2, p.model);
                match r {
                    Ok(row) => {
                        let hw = row.sim.half_widths.expect("simulation metrics carry half-widths");
                        for x in [
                            row.mf.mean_q,
                            row.sim.mean_q,
                            hw.mean_q,
                            row.mf.availability,
                            row.sim.availability,
                            hw.availability,
                            row.fp.w(1),
                            row.report.uw_hat.get(1).copied().unwrap_or(0.0),
                            row.report.half_width_w.get(1).copied().unwrap_or(0.0),
                            row.distance,
                        ] {
                            let _ = write!(s, ",{}", fmt_num(x));
                        }
                    }
                    Err(_) => s.push_str(",,,,,,,,,,"),
                }
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let rows: Vec<Value> = points
                .iter()
                .zip(&results)
                .map(|(p, r)| {
                    let mut v = json!({
                        "model": p.model,
                        "config": p.config,
                        "simulation": spec.sim_config(p.config),
                    });
                    match r {
                        Ok(row) => {
                            v["mean_field"] = serde_json::to_value(&row.mf).expect("metrics serialize");
                            v["simulated"] = serde_json::to_value(&row.sim).expect("metrics serialize");
                            v["empirical_distance"] = json!(row.distance);
                        }
                        Err(e) => v["error"] = json!(e.to_string()),
                    }
                    v
                })
                .collect();
            to_json(&rows)
        }
    };
    Outcome { body, diagnostics, code }
}

/// Parses arguments, runs, writes the artifact and diagnostics, and returns
/// the exit status.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let err = Error::InvalidConfig(e.to_string().trim().to_string());
            let _ = writeln!(stderr, "{}", error_record(&err, None));
            return 1;
        }
    };
    let (kind, flags) = match cli.command {
        Command::Solve(f) => (CommandKind::Solve, f),
        Command::Simulate(f) => (CommandKind::Simulate, f),
        Command::Sweep(f) => (CommandKind::Sweep, f),
        Command::Compare(f) => (CommandKind::Compare, f),
    };
    let spec = match RunSpec::resolve(kind, flags) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_record(&e, None));
            return exit_code(&e);
        }
    };
    let outcome = execute(&spec);
    for d in &outcome.diagnostics {
        let _ = writeln!(stderr, "{d}");
    }
    if !outcome.body.is_empty() {
        let written = match &spec.output_path {
            Some(path) => std::fs::write(path, &outcome.body)
                .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display()))),
            None => stdout
                .write_all(outcome.body.as_bytes())
                .map_err(|e| Error::InvalidConfig(format!("cannot write output: {e}"))),
        };
        if let Err(e) = written {
            let _ = writeln!(stderr, "{}", error_record(&e, None));
            return if outcome.code == 0 { 1 } else { outcome.code };
        }
    }
    outcome.code
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(std::iter::once("smrepair").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(13.0 / 15.0), "0.866666666667");
        assert_eq!(fmt_num(2.0), "2");
        assert_eq!(fmt_num(-0.25), "-0.25");
        assert_eq!(fmt_num(123456.789), "123456.789");
        assert_eq!(fmt_num(1.5e-9), "1.5e-9");
        assert_eq!(fmt_num(2.0 / 3.0 * 1e-6), "6.66666666667e-7");
        assert_eq!(fmt_num(9.9999999999996), "10");
        assert_eq!(fmt_num(3e15), "3e15");
    }

    #[test]
    fn axis_parsing() {
        let a = parse_axis("lambda=0:6:5").unwrap();
        assert_eq!(a.values, (1..=5).map(|i| AxisValue::Real(i as f64)).collect::<Vec<_>>());
        let d = parse_axis("d1=1:3").unwrap();
        assert_eq!(d.values, vec![AxisValue::Int(1), AxisValue::Int(2), AxisValue::Int(3)]);
        let l = parse_axis("d2=2,5").unwrap();
        assert_eq!(l.values, vec![AxisValue::Int(2), AxisValue::Int(5)]);
        let m = parse_axis("model=III, IV").unwrap();
        assert_eq!(m.values, vec![AxisValue::Model(Model::III), AxisValue::Model(Model::IV)]);
        assert_eq!(parse_axis("beta=1.5,2").unwrap().values.len(), 2);
        for bad in ["lambda", "gamma=1", "d1=x", "lambda=0:1", "model=V", "lambda=0:1:n"] {
            assert!(parse_axis(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn grid_order_is_first_axis_outermost() {
        let flags = Flags {
            model: Some(Model::I),
            sweep: vec!["d1=1,2".into(), "lambda=1,2,3".into()],
            ..Flags::default()
        };
        let spec = RunSpec::resolve(CommandKind::Sweep, flags).unwrap();
        let got: Vec<(u32, f64)> = spec.points().iter().map(|p| (p.config.d1, p.config.lambda)).collect();
        assert_eq!(got, vec![(1, 1.0), (1, 2.0), (1, 3.0), (2, 1.0), (2, 2.0), (2, 3.0)]);
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "model = \"II\"\nlambda = 2.5\nd1 = 3\nN = 40\nsweep = [\"d2=1,2\"]\n").unwrap();
        let flags = Flags {
            d1: Some(2),
            config: Some(path.clone()),
            ..Flags::default()
        };
        let spec = RunSpec::resolve(CommandKind::Compare, flags).unwrap();
        assert_eq!(spec.model, Some(Model::II));
        assert_eq!(spec.lambda, Some(2.5));
        assert_eq!(spec.d1, 2);
        assert_eq!(spec.sim.unwrap().n, 40);
        assert_eq!(spec.sweep.len(), 1);
        std::fs::write(&path, "lamda = 1\n").unwrap();
        let flags = Flags {
            config: Some(path),
            ..Flags::default()
        };
        assert!(RunSpec::resolve(CommandKind::Solve, flags).is_err());
    }

    #[test]
    fn missing_inputs_are_validation_errors() {
        let (code, out, err) = run(&["solve", "--lambda", "3"]);
        assert_eq!(code, 1);
        assert!(out.is_empty());
        let rec: Value = serde_json::from_str(err.lines().next().unwrap()).unwrap();
        assert_eq!(rec["kind"], "invalid_config");
        assert_eq!(run(&["solve", "--model", "I", "--lambda", "3", "--sweep", "d1=1,2"]).0, 1);
        assert_eq!(run(&["solve", "--model", "VII", "--lambda", "3"]).0, 1);
    }

    #[test]
    fn solve_json_and_unstable_refusal() {
        let (code, out, _) = run(&["solve", "--model", "I", "--lambda", "3", "--d1", "2"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        let w = v["fixed_point"]["pi_w"].as_array().unwrap();
        assert!((w[0].as_f64().unwrap() - 13.0 / 15.0).abs() < 1e-8);
        assert!((w[1].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-8);
        assert!((v["fixed_point"]["pi_r"][0].as_f64().unwrap() - 2.0 / 15.0).abs() < 1e-8);
        assert_eq!(v["fixed_point"]["method"], "recursion");

        let (code, out, err) = run(&["solve", "--model", "III", "--lambda", "7", "--d1", "2"]);
        assert_eq!(code, 1);
        assert!(out.is_empty());
        let rec: Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(rec["kind"], "unstable");
        assert_eq!(rec["config"]["lambda"], 7.0);
    }

    #[test]
    fn nonconvergence_exit_code() {
        // no fixed point exists here under the sampling repairman
        let (code, out, err) = run(&["sweep", "--model", "II", "--d1", "1", "--d2", "3", "--sweep", "lambda=3,5.9"]);
        assert_eq!(code, 2);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert!(lines[1].starts_with("3,1,3,II,0."));
        assert_eq!(lines[2], "5.9,1,3,II,,,,,,,,");
        assert!(err.contains("non_convergence"));
    }

    #[test]
    fn large_integers_become_strings() {
        let mut v = json!({"seed": u64::MAX, "n": 5, "x": 0.5});
        json_safe(&mut v);
        assert_eq!(v["seed"], json!(u64::MAX.to_string()));
        assert_eq!(v["n"], json!(5));
    }

    #[test]
    fn simulate_csv() {
        let (code, out, err) = run(&[
            "simulate", "--model", "I", "--lambda", "1", "--N", "20", "--horizon", "50", "--warmup", "5", "--replications",
            "2", "--format", "csv", "--K", "4",
        ]);
        assert_eq!(code, 0, "{err}");
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "level,uw_hat,uw_half_width,ur_hat,ur_half_width");
        assert!(lines[1].starts_with("0,"));
        assert!(lines[1].ends_with(",,"));
        assert!(lines.len() >= 6);
    }
}
