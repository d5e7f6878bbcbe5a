//! CSV, JSON and plot-data emission.
//!
//! Numbers are written with 17 significant digits in scientific notation,
//! which round-trips every `f64` and keeps outputs byte-deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use mflow_core::diagnostics::PassRule;
use mflow_core::formula::{FormulaReport, StderrMethod};
use mflow_core::rng::RNG_SCHEME;
use serde_json::{json, Map, Value};

use crate::config::to_toml;
use crate::error::CliError;
use crate::runner::{ReportBody, RunReport};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "MFLOW_OUT";
pub const DEFAULT_OUT_DIR: &str = "mflow-out";

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn row(cells: impl IntoIterator<Item = String>) -> String {
    let mut line = cells.into_iter().collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

/// Rows `t, lhs, <terms>, residual, mc_stderr[, per_path_residual_sup]`.
pub fn formula_csv(r: &FormulaReport) -> String {
    let mut header = vec!["t".to_string(), "lhs".into()];
    header.extend(r.terms.iter().map(|t| t.name.to_string()));
    header.extend(["residual".into(), "mc_stderr".into()]);
    if r.per_path_residual_sup.is_some() {
        header.push("per_path_residual_sup".into());
    }
    let mut out = row(header);
    for i in 0..r.times.len() {
        let mut cells = vec![num(r.times[i]), num(r.lhs[i])];
        cells.extend(r.terms.iter().map(|t| num(t.values[i])));
        cells.extend([num(r.residual[i]), num(r.mc_stderr[i])]);
        if let Some(sup) = &r.per_path_residual_sup {
            cells.push(num(sup[i]));
        }
        out.push_str(&row(cells));
    }
    out
}

/// The main tabular output of a run.
pub fn csv(report: &RunReport) -> String {
    match &report.body {
        ReportBody::Formula(r) => formula_csv(r),
        ReportBody::Inequality(r) => {
            let mut out = row(["label", "lhs", "rhs", "lhs_stderr", "ratio"].map(String::from));
            for s in &r.samples {
                let ratio = s.ratio().map(num).unwrap_or_default();
                out.push_str(&row([
                    format!("\"{}\"", s.label.replace('"', "'")),
                    num(s.lhs),
                    num(s.rhs),
                    num(s.lhs_stderr),
                    ratio,
                ]));
            }
            out
        }
        ReportBody::Convergence(t) => {
            let mut out = row(["dt", "n_paths", "max_residual"].map(String::from));
            for c in &t.cells {
                out.push_str(&row([num(c.dt), c.n_paths.to_string(), num(c.max_residual)]));
            }
            out
        }
    }
}

/// Columns `t, lhs, rhs_total, residual, lower, upper` where the band is
/// `±band·mc_stderr` around zero.
pub fn emit_plot_data(report: &RunReport) -> Result<String, CliError> {
    let r = report
        .formula()
        .ok_or_else(|| CliError::Usage("plot data needs a report with time series".into()))?;
    let band = report.config.bootstrap.band;
    let rhs = r.rhs_total();
    let mut out = row(["t", "lhs", "rhs_total", "residual", "lower", "upper"].map(String::from));
    for i in 0..r.times.len() {
        let half = band * r.mc_stderr[i];
        out.push_str(&row([
            num(r.times[i]),
            num(r.lhs[i]),
            num(rhs[i]),
            num(r.residual[i]),
            num(-half),
            num(half),
        ]));
    }
    Ok(out)
}

fn finite(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// Machine-readable summary, including the config that reproduces the run.
pub fn summary_json(report: &RunReport) -> Value {
    let c = &report.config;
    let mut body = Map::new();
    match &report.body {
        ReportBody::Formula(r) => {
            body.insert("kind".into(), json!(r.kind.as_str()));
            body.insert("functional".into(), json!(r.functional));
            body.insert("max_abs_residual".into(), finite(r.max_abs_residual()));
            body.insert("band_violations".into(), json!(r.band_violations(c.bootstrap.band)));
            let method = match r.stderr_method {
                StderrMethod::ExactBootstrap => "exact_bootstrap".to_string(),
                StderrMethod::Resampling { replicates } => format!("resampling({replicates})"),
                StderrMethod::Skipped => "skipped".to_string(),
            };
            body.insert("stderr_method".into(), json!(method));
            body.insert("n_paths".into(), json!(r.n_paths));
            body.insert("seed".into(), json!(r.seed));
            body.insert("n_aux_paths".into(), json!(r.n_aux_paths));
            body.insert("aux_seed".into(), json!(r.aux_seed));
            let last = r.times.len() - 1;
            let terms: Map<String, Value> = r
                .terms
                .iter()
                .map(|t| (t.name.to_string(), finite(t.values[last])))
                .collect();
            body.insert("terms_at_horizon".into(), Value::Object(terms));
            if let Some(sup) = &r.per_path_residual_sup {
                body.insert("per_path_residual_sup_max".into(), finite(sup.iter().copied().fold(0.0, f64::max)));
            }
        }
        ReportBody::Inequality(r) => {
            body.insert("kind".into(), json!(r.name));
            body.insert("max_ratio".into(), r.max_ratio.map(finite).unwrap_or(Value::Null));
            let rule = match r.rule {
                PassRule::Exact { tolerance } => format!("lhs <= rhs + {tolerance:e}"),
                PassRule::Relative { tolerance } => format!("lhs <= rhs (1 + {tolerance:e})"),
                PassRule::Bounded => "bounded".to_string(),
                PassRule::Derived => "derived".to_string(),
            };
            body.insert("inequality_rule".into(), json!(rule));
            let values: Map<String, Value> = r.values.iter().map(|(k, v)| (k.clone(), finite(*v))).collect();
            body.insert("empirical_constants".into(), Value::Object(values));
            body.insert("samples".into(), json!(r.samples.len()));
            body.insert("inequality_notes".into(), json!(r.notes));
        }
        ReportBody::Convergence(t) => {
            body.insert("kind".into(), json!("convergence"));
            body.insert("slope_dt".into(), t.slope_dt.map(finite).unwrap_or(Value::Null));
            body.insert("slope_n_paths".into(), t.slope_n_paths.map(finite).unwrap_or(Value::Null));
            body.insert("cells".into(), json!(t.cells.len()));
        }
    }
    let validations: Vec<Value> = report
        .validations
        .iter()
        .map(|(label, v)| {
            json!({
                "model": label,
                "max_bound": finite(v.max_bound),
                "min_ellipticity": finite(v.min_ellipticity),
                "declared_bound": v.declared_bound,
                "declared_ellipticity": v.declared_ellipticity,
                "pass": v.pass(),
                "n_probes": v.n_probes,
            })
        })
        .collect();
    json!({
        "scenario": c.scenario.as_str(),
        "pass": report.pass,
        "rule": report.rule,
        "result": Value::Object(body),
        "validation": validations,
        "notes": report.notes,
        "wall_clock_seconds": report.wall_clock_seconds,
        "threads": report.threads,
        "versions": {
            "mflow": env!("CARGO_PKG_VERSION"),
            "rng_scheme": RNG_SCHEME,
        },
        "config": to_toml(c),
    })
}

/// Output directory: explicit override, then the config, then the
/// environment, then `mflow-out`.
pub fn output_dir(report: &RunReport, override_dir: Option<&Path>) -> PathBuf {
    if let Some(dir) = override_dir {
        return dir.to_path_buf();
    }
    if let Some(dir) = &report.config.output.dir {
        return PathBuf::from(dir);
    }
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, CliError> {
    fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes `<stem>.csv`, `<stem>.json` and, for time series, `<stem>.plot.csv`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let stem = report.config.stem();
    let mut written = vec![write(dir.join(format!("{stem}.csv")), &csv(report))?];
    let json = serde_json::to_string_pretty(&summary_json(report)).expect("summary is valid JSON") + "\n";
    written.push(write(dir.join(format!("{stem}.json")), &json)?);
    if report.formula().is_some() {
        written.push(write(dir.join(format!("{stem}.plot.csv")), &emit_plot_data(report)?)?);
    }
    Ok(written)
}
