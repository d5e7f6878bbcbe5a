//! Both sides of the Itô-Krylov identities along a simulated flow.
//!
//! All time integrals are left Riemann sums on the simulation grid, which
//! matches the left-endpoint coefficient convention of the scheme.
//! Standard errors come from bootstrap over paths: functionals that are
//! integrals of a fixed function against the measure use the exact
//! (infinite-replicate) bootstrap variance of a path mean, the others use
//! multinomial resampling with a seeded stream per replicate.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::TimeField;
use crate::functional::{BoundExtended, BoundFunctional, ExtendedFunctional, MeasureFunctional};
use crate::measure::EmpiricalMeasure;
use crate::numeric::{
    dot, frobenius_dot, log_log_slope, mat_vec, outer_self, CompensatedSum,
};
use crate::process::{CoefficientModel, PathBundle};
use crate::rng::{Purpose, Stream};

pub const DEFAULT_REPLICATES: usize = 200;

/// Paths per work unit; fixed so reductions do not depend on thread count.
const CHUNK: usize = 256;

pub const DRIFT_TERM: &str = "drift_term";
pub const DIFFUSION_TERM: &str = "diffusion_term";
pub const TIME_TERM: &str = "time_term";
pub const SPACE_DRIFT_TERM: &str = "space_drift_term";
pub const SPACE_DIFFUSION_TERM: &str = "space_diffusion_term";
pub const MARTINGALE_TERM: &str = "martingale_term";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FormulaOptions {
    /// Resampling replicates for nonlinear functionals; `0` skips the
    /// error estimate (all standard errors reported as zero).
    pub bootstrap_replicates: usize,
    /// Defaults to the seed of the (first) path bundle.
    pub bootstrap_seed: Option<u64>,
}

impl Default for FormulaOptions {
    fn default() -> Self {
        FormulaOptions {
            bootstrap_replicates: DEFAULT_REPLICATES,
            bootstrap_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormulaKind {
    MeasureFlow,
    Extended,
    TimeLinear,
}

impl FormulaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FormulaKind::MeasureFlow => "measure_flow",
            FormulaKind::Extended => "extended",
            FormulaKind::TimeLinear => "time_linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StderrMethod {
    /// Closed-form bootstrap variance of a mean of i.i.d. path quantities.
    ExactBootstrap,
    Resampling { replicates: usize },
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermSeries {
    pub name: &'static str,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Per-grid-time decomposition of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FormulaReport {
    pub kind: FormulaKind,
    pub functional: String,
    pub times: Vec<f64>,
    /// `u(μ_t)`, or the path average of `u(t, ξ_t, μ_t)`.
    pub value: Vec<f64>,
    pub lhs: Vec<f64>,
    pub lhs_stderr: Vec<f64>,
    pub terms: Vec<TermSeries>,
    pub residual: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    /// `max_p |residual_p(t)|` over individual paths (extended formula).
    pub per_path_residual_sup: Option<Vec<f64>>,
    pub stderr_method: StderrMethod,
    pub n_paths: usize,
    pub n_aux_paths: Option<usize>,
    pub seed: u64,
    pub aux_seed: Option<u64>,
}

impl FormulaReport {
    pub fn term(&self, name: &str) -> Option<&TermSeries> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Sum of all right-hand terms at each time.
    pub fn rhs_total(&self) -> Vec<f64> {
        (0..self.times.len())
            .map(|i| self.terms.iter().map(|t| t.values[i]).sum())
            .collect()
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Indices where `|residual| > factor * mc_stderr`.
    pub fn band_violations(&self, factor: f64) -> Vec<usize> {
        self.residual
            .iter()
            .zip(&self.mc_stderr)
            .enumerate()
            .filter(|(_, (r, s))| r.abs() > factor * **s)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn within_band(&self, factor: f64) -> bool {
        self.band_violations(factor).is_empty()
    }

    fn assemble(
        kind: FormulaKind,
        functional: String,
        times: Vec<f64>,
        value: Vec<f64>,
        lhs: Vec<f64>,
        terms: Vec<(&'static str, Vec<f64>)>,
    ) -> FormulaReport {
        let n = times.len();
        let residual = residual_of(&lhs, terms.iter().map(|(_, v)| v.as_slice()));
        FormulaReport {
            kind,
            functional,
            times,
            value,
            lhs,
            lhs_stderr: vec![0.0; n],
            terms: terms
                .into_iter()
                .map(|(name, values)| TermSeries {
                    name,
                    values,
                    stderr: vec![0.0; n],
                })
                .collect(),
            residual,
            mc_stderr: vec![0.0; n],
            per_path_residual_sup: None,
            stderr_method: StderrMethod::Skipped,
            n_paths: 0,
            n_aux_paths: None,
            seed: 0,
            aux_seed: None,
        }
    }
}

fn residual_of<'a>(lhs: &[f64], terms: impl Iterator<Item = &'a [f64]> + Clone) -> Vec<f64> {
    (0..lhs.len())
        .map(|i| {
            let rhs: f64 = terms.clone().map(|t| t[i]).sum();
            lhs[i] - rhs
        })
        .collect()
}

fn check_model(paths: &PathBundle, model: &CoefficientModel, dim: usize) -> Result<()> {
    if paths.dim() != model.dim() || paths.noise_dim() != model.noise_dim() {
        return Err(Error::invalid(format!(
            "paths ({}x{}) do not match the model ({}x{})",
            paths.dim(),
            paths.noise_dim(),
            model.dim(),
            model.noise_dim()
        )));
    }
    if dim != paths.dim() {
        return Err(Error::invalid(format!(
            "functional of dimension {dim} against paths of dimension {}",
            paths.dim()
        )));
    }
    Ok(())
}

fn non_finite(term: &str, step: usize, path: Option<usize>) -> Error {
    let detail = match path {
        Some(p) => format!("non-finite value at time index {step}, path {p}"),
        None => format!("non-finite value at time index {step}"),
    };
    Error::numeric(term, detail)
}

/// `½ Tr(H a)` with `a = σσ*`.
fn half_trace(h: &[f64], sigma: &[f64], d: usize, d1: usize, a: &mut [f64]) -> f64 {
    outer_self(sigma, d, d1, a);
    0.5 * frobenius_dot(h, a)
}

/// Per-path trajectories of a functional that is a path mean: the value
/// `φ(t_i, X_i)` at every grid time and one integrand per term at every
/// left endpoint.
struct PathTrace {
    value: Vec<f64>,
    integrands: Vec<Vec<f64>>,
}

/// Shared driver for the identities whose both sides are path means.
/// `eval` fills the trace of one path; the report carries path means and
/// the exact bootstrap standard error of each mean.
fn path_mean_report<E>(
    paths: &PathBundle,
    names: &[&'static str],
    eval: E,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)>
where
    E: Fn(usize, &mut PathTrace) + Sync,
{
    let grid = paths.grid();
    let n = grid.n_steps();
    let n_terms = names.len();
    let n_paths = paths.n_paths();
    let dts: Vec<f64> = (0..n).map(|j| grid.dt(j)).collect();
    // channels: value, lhs, terms..., residual
    let channels = 3 + n_terms;

    let trace = |p: usize, tr: &mut PathTrace, row: &mut [Vec<f64>]| -> Result<()> {
        eval(p, tr);
        for (i, v) in tr.value.iter().enumerate() {
            if !v.is_finite() {
                return Err(non_finite("functional value", i, Some(p)));
            }
        }
        for (k, ints) in tr.integrands.iter().enumerate() {
            for (j, v) in ints.iter().enumerate() {
                if !v.is_finite() {
                    return Err(non_finite(names[k], j, Some(p)));
                }
            }
        }
        let v0 = tr.value[0];
        for i in 0..=n {
            row[0][i] = tr.value[i];
            row[1][i] = tr.value[i] - v0;
        }
        for k in 0..n_terms {
            let mut acc = 0.0;
            row[2 + k][0] = 0.0;
            for j in 0..n {
                acc += dts[j] * tr.integrands[k][j];
                row[2 + k][j + 1] = acc;
            }
        }
        for i in 0..=n {
            let mut r = row[1][i];
            for k in 0..n_terms {
                r -= row[2 + k][i];
            }
            row[2 + n_terms][i] = r;
        }
        Ok(())
    };

    let n_chunks = n_paths.div_ceil(CHUNK);
    let new_trace = || PathTrace {
        value: vec![0.0; n + 1],
        integrands: vec![vec![0.0; n]; n_terms],
    };

    // Each chunk holds its trajectories and returns (count, mean, M2) per
    // channel and time; chunks merge in index order with the pairwise
    // update, so the result does not depend on scheduling.
    let partial: Vec<Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_paths);
            let width = hi - lo;
            let stride = n + 1;
            let mut tr = new_trace();
            let mut row = vec![vec![0.0; stride]; channels];
            // shifted sums about the chunk's first path
            let mut shift = vec![0.0; channels * stride];
            let mut s1 = vec![0.0; channels * stride];
            let mut s2 = vec![0.0; channels * stride];
            for p in lo..hi {
                trace(p, &mut tr, &mut row)?;
                for ch in 0..channels {
                    let base = ch * stride;
                    if p == lo {
                        shift[base..base + stride].copy_from_slice(&row[ch]);
                    }
                    for i in 0..stride {
                        let y = row[ch][i] - shift[base + i];
                        s1[base + i] += y;
                        s2[base + i] += y * y;
                    }
                }
            }
            let count = width as f64;
            let mut mean = vec![vec![0.0; stride]; channels];
            let mut m2 = vec![vec![0.0; stride]; channels];
            for ch in 0..channels {
                for i in 0..stride {
                    let k = ch * stride + i;
                    mean[ch][i] = shift[k] + s1[k] / count;
                    m2[ch][i] = (s2[k] - s1[k] * s1[k] / count).max(0.0);
                }
            }
            Ok((count, mean, m2))
        })
        .collect();
    let mut count = 0.0;
    let mut means = vec![vec![0.0; n + 1]; channels];
    let mut m2 = vec![vec![0.0; n + 1]; channels];
    for part in partial {
        let (cb, mb, qb) = part?;
        if count == 0.0 {
            (count, means, m2) = (cb, mb, qb);
            continue;
        }
        let total = count + cb;
        for ch in 0..channels {
            for i in 0..=n {
                let delta = mb[ch][i] - means[ch][i];
                means[ch][i] += delta * cb / total;
                m2[ch][i] += qb[ch][i] + delta * delta * count * cb / total;
            }
        }
        count = total;
    }
    let inv = 1.0 / n_paths as f64;
    // exact bootstrap variance of a mean: (1/N²) Σ (r_p - r̄)²
    let se: Vec<Vec<f64>> = m2
        .iter()
        .map(|s| s.iter().map(|q| q.max(0.0).sqrt() * inv).collect())
        .collect();

    let value = means[0].clone();
    let lhs = means[1].clone();
    let lhs_se = se[1].clone();
    let terms = means[2..2 + n_terms].to_vec();
    let term_se = se[2..2 + n_terms].to_vec();
    let res_se = se[2 + n_terms].clone();
    Ok((value, lhs, lhs_se, terms, term_se, res_se))
}

/// Measure-only identity `u(μ_t) = u(μ_0) + ∫ E[∂_v δu/δm · b] + ½ ∫ E[∂²_v δu/δm · a]`.
pub fn verify_measure_flow(
    f: &dyn MeasureFunctional,
    paths: &PathBundle,
    model: &CoefficientModel,
) -> Result<FormulaReport> {
    verify_measure_flow_with(f, paths, model, FormulaOptions::default())
}

pub fn verify_measure_flow_with(
    f: &dyn MeasureFunctional,
    paths: &PathBundle,
    model: &CoefficientModel,
    options: FormulaOptions,
) -> Result<FormulaReport> {
    check_model(paths, model, f.dim())?;
    let times = paths.grid().times();
    let names = [DRIFT_TERM, DIFFUSION_TERM];
    let mut report = if f.is_linear() {
        measure_flow_linear(f, paths, &names)?
    } else {
        let (value, lhs, terms) = measure_flow_series(f, paths, None)?;
        let mut report = FormulaReport::assemble(
            FormulaKind::MeasureFlow,
            f.meta().name.clone(),
            times,
            value,
            lhs,
            names.iter().copied().zip(terms).collect(),
        );
        let seed = options.bootstrap_seed.unwrap_or(paths.seed());
        attach_resampled_stderr(&mut report, options.bootstrap_replicates, |r| {
            let w = multinomial_weights(seed, r, paths.n_paths());
            let (_, lhs, terms) = measure_flow_series(f, paths, Some(&w))?;
            Ok((lhs, terms))
        })?;
        report
    };
    report.n_paths = paths.n_paths();
    report.seed = paths.seed();
    Ok(report)
}

fn measure_flow_linear(
    f: &dyn MeasureFunctional,
    paths: &PathBundle,
    names: &[&'static str],
) -> Result<FormulaReport> {
    let d = paths.dim();
    let d1 = paths.noise_dim();
    let n = paths.grid().n_steps();
    // the linear derivative of an integral functional does not depend on μ
    let bound = f.bind(&paths.marginal(0)?)?;
    let eval = |p: usize, tr: &mut PathTrace| {
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let mut a = vec![0.0; d * d];
        for i in 0..=n {
            let x = paths.state(p, i);
            tr.value[i] = f.atom_value(x).unwrap_or(f64::NAN);
            if i < n {
                bound.lin_deriv_grad(x, &mut g);
                bound.lin_deriv_hess(x, &mut h);
                tr.integrands[0][i] = dot(&g, paths.drift(p, i));
                tr.integrands[1][i] = half_trace(&h, paths.diffusion(p, i), d, d1, &mut a);
            }
        }
    };
    let (value, lhs, lhs_se, terms, term_se, res_se) = path_mean_report(paths, names, eval)?;
    let mut report = FormulaReport::assemble(
        FormulaKind::MeasureFlow,
        f.meta().name.clone(),
        paths.grid().times(),
        value,
        lhs,
        names.iter().copied().zip(terms).collect(),
    );
    report.lhs_stderr = lhs_se;
    for (t, se) in report.terms.iter_mut().zip(term_se) {
        t.stderr = se;
    }
    report.mc_stderr = res_se;
    report.stderr_method = StderrMethod::ExactBootstrap;
    Ok(report)
}

/// Weighted marginal keeping only atoms of positive weight.
fn weighted_marginal(paths: &PathBundle, i: usize, weights: Option<&[f64]>) -> Result<EmpiricalMeasure> {
    match weights {
        None => paths.marginal(i),
        Some(w) => {
            let mut pts = Vec::new();
            let mut mass = Vec::new();
            for (p, &wp) in w.iter().enumerate() {
                if wp > 0.0 {
                    pts.extend_from_slice(paths.state(p, i));
                    mass.push(wp);
                }
            }
            EmpiricalMeasure::normalized(paths.dim(), pts, mass)
        }
    }
}

type Series = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// Value, lhs and [drift, diffusion] series for a (possibly reweighted) ensemble.
fn measure_flow_series(
    f: &dyn MeasureFunctional,
    paths: &PathBundle,
    weights: Option<&[f64]>,
) -> Result<Series> {
    let grid = paths.grid();
    let n = grid.n_steps();
    let d = paths.dim();
    let d1 = paths.noise_dim();
    let n_paths = paths.n_paths();
    let uniform = 1.0 / n_paths as f64;
    let per_step: Vec<Result<(f64, f64, f64)>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mu = weighted_marginal(paths, i, weights)?;
            let bound: Box<dyn BoundFunctional> = f.bind(&mu)?;
            let value = bound.value();
            if !value.is_finite() {
                return Err(non_finite("functional value", i, None));
            }
            if i == n {
                return Ok((value, 0.0, 0.0));
            }
            let mut g = vec![0.0; d];
            let mut h = vec![0.0; d * d];
            let mut a = vec![0.0; d * d];
            let mut drift = CompensatedSum::new();
            let mut diff = CompensatedSum::new();
            for p in 0..n_paths {
                let w = weights.map_or(uniform, |w| w[p]);
                if w == 0.0 {
                    continue;
                }
                let x = paths.state(p, i);
                bound.lin_deriv_grad(x, &mut g);
                bound.lin_deriv_hess(x, &mut h);
                drift.add(w * dot(&g, paths.drift(p, i)));
                diff.add(w * half_trace(&h, paths.diffusion(p, i), d, d1, &mut a));
            }
            let (dr, df) = (drift.value(), diff.value());
            if !dr.is_finite() {
                return Err(non_finite(DRIFT_TERM, i, None));
            }
            if !df.is_finite() {
                return Err(non_finite(DIFFUSION_TERM, i, None));
            }
            Ok((value, dr, df))
        })
        .collect();
    let mut value = Vec::with_capacity(n + 1);
    let mut integrands = Vec::with_capacity(n + 1);
    for s in per_step {
        let (v, dr, df) = s?;
        value.push(v);
        integrands.push([dr, df]);
    }
    let lhs: Vec<f64> = value.iter().map(|v| v - value[0]).collect();
    let terms = (0..2)
        .map(|k| cumulative(grid, |j| integrands[j][k]))
        .collect();
    Ok((value, lhs, terms))
}

/// `Σ_{j<i} Δt_j h_j` at every grid index.
fn cumulative(grid: &crate::process::TimeGrid, h: impl Fn(usize) -> f64) -> Vec<f64> {
    let n = grid.n_steps();
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = CompensatedSum::new();
    out.push(0.0);
    for j in 0..n {
        acc.add(grid.dt(j) * h(j));
        out.push(acc.value());
    }
    out
}

/// Multinomial resampling weights `count_p / N` for one replicate.
pub fn multinomial_weights(seed: u64, replicate: usize, n: usize) -> Vec<f64> {
    let mut stream = Stream::new(seed, Purpose::Bootstrap, replicate as u64);
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[stream.below(n as u64) as usize] += 1;
    }
    let inv = 1.0 / n as f64;
    counts.into_iter().map(|c| c as f64 * inv).collect()
}

/// Sample standard deviation across replicates at every time index.
fn replicate_stderr(reps: &[Vec<f64>]) -> Vec<f64> {
    let r = reps.len();
    let n = reps[0].len();
    (0..n)
        .map(|i| {
            let mean = reps.iter().map(|s| s[i]).sum::<f64>() / r as f64;
            let ss: f64 = reps.iter().map(|s| (s[i] - mean).powi(2)).sum();
            (ss / (r as f64 - 1.0)).sqrt()
        })
        .collect()
}

/// Runs `replicate(r)` for every bootstrap replicate and stores the
/// spread of lhs, each term and the residual in the report.
fn attach_resampled_stderr<R>(report: &mut FormulaReport, replicates: usize, replicate: R) -> Result<()>
where
    R: Fn(usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> + Sync,
{
    if replicates == 0 {
        report.stderr_method = StderrMethod::Skipped;
        return Ok(());
    }
    if replicates == 1 {
        return Err(Error::invalid("bootstrap needs at least two replicates"));
    }
    let runs: Vec<Result<(Vec<f64>, Vec<Vec<f64>>)>> =
        (0..replicates).into_par_iter().map(&replicate).collect();
    let mut lhs_reps = Vec::with_capacity(replicates);
    let mut term_reps: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(replicates); report.terms.len()];
    let mut res_reps = Vec::with_capacity(replicates);
    for run in runs {
        let (lhs, terms) = run?;
        res_reps.push(residual_of(&lhs, terms.iter().map(|t| t.as_slice())));
        for (k, t) in terms.into_iter().enumerate() {
            term_reps[k].push(t);
        }
        lhs_reps.push(lhs);
    }
    report.lhs_stderr = replicate_stderr(&lhs_reps);
    for (t, reps) in report.terms.iter_mut().zip(&term_reps) {
        t.stderr = replicate_stderr(reps);
    }
    report.mc_stderr = replicate_stderr(&res_reps);
    report.stderr_method = StderrMethod::Resampling { replicates };
    Ok(())
}

/// Time-linear case `u(t, μ) = ∫ g(t, x) dμ(x)`.
pub fn verify_time_linear(
    g: &dyn TimeField,
    paths: &PathBundle,
    model: &CoefficientModel,
) -> Result<FormulaReport> {
    check_model(paths, model, paths.dim())?;
    let grid = paths.grid();
    let d = paths.dim();
    let d1 = paths.noise_dim();
    let n = grid.n_steps();
    let names = [TIME_TERM, DRIFT_TERM, DIFFUSION_TERM];
    let eval = |p: usize, tr: &mut PathTrace| {
        let mut gr = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let mut a = vec![0.0; d * d];
        for i in 0..=n {
            let t = grid.time(i);
            let x = paths.state(p, i);
            tr.value[i] = g.value(t, x);
            if i < n {
                g.grad(t, x, &mut gr);
                g.hess(t, x, &mut h);
                tr.integrands[0][i] = g.time_deriv(t, x);
                tr.integrands[1][i] = dot(&gr, paths.drift(p, i));
                tr.integrands[2][i] = half_trace(&h, paths.diffusion(p, i), d, d1, &mut a);
            }
        }
    };
    let (value, lhs, lhs_se, terms, term_se, res_se) = path_mean_report(paths, &names, eval)?;
    let mut report = FormulaReport::assemble(
        FormulaKind::TimeLinear,
        format!("time_linear:g={}", g.id()),
        grid.times(),
        value,
        lhs,
        names.iter().copied().zip(terms).collect(),
    );
    report.lhs_stderr = lhs_se;
    for (t, se) in report.terms.iter_mut().zip(term_se) {
        t.stderr = se;
    }
    report.mc_stderr = res_se;
    report.stderr_method = StderrMethod::ExactBootstrap;
    report.n_paths = paths.n_paths();
    report.seed = paths.seed();
    Ok(report)
}

const EXTENDED_NAMES: [&str; 6] = [
    TIME_TERM,
    SPACE_DRIFT_TERM,
    SPACE_DIFFUSION_TERM,
    MARTINGALE_TERM,
    DRIFT_TERM,
    DIFFUSION_TERM,
];

struct ExtendedSeries {
    value: Vec<f64>,
    lhs: Vec<f64>,
    terms: Vec<Vec<f64>>,
    per_path_sup: Vec<f64>,
}

/// Extended identity for `u(t, ξ_t, μ_t)` where `μ_t` is the law of the
/// `x_paths` process and `ξ` is simulated independently. The expectations
/// over the independent copy are nested Monte Carlo averages over the
/// whole `x_paths` ensemble.
pub fn verify_extended(
    f: &dyn ExtendedFunctional,
    xi_paths: &PathBundle,
    xi_model: &CoefficientModel,
    x_paths: &PathBundle,
    x_model: &CoefficientModel,
) -> Result<FormulaReport> {
    verify_extended_with(f, xi_paths, xi_model, x_paths, x_model, FormulaOptions::default())
}

pub fn verify_extended_with(
    f: &dyn ExtendedFunctional,
    xi_paths: &PathBundle,
    xi_model: &CoefficientModel,
    x_paths: &PathBundle,
    x_model: &CoefficientModel,
    options: FormulaOptions,
) -> Result<FormulaReport> {
    check_model(xi_paths, xi_model, f.dim())?;
    check_model(x_paths, x_model, f.dim())?;
    let (gx, gy) = (xi_paths.grid(), x_paths.grid());
    if gx.n_steps() != gy.n_steps() || gx.horizon() != gy.horizon() {
        return Err(Error::invalid("ξ and X ensembles live on different grids"));
    }
    if xi_paths.seed() == x_paths.seed() {
        return Err(Error::IndependenceViolation(format!(
            "ξ and X ensembles share seed {}",
            xi_paths.seed()
        )));
    }
    let base = extended_series(f, xi_paths, x_paths, None, None)?;
    let mut report = FormulaReport::assemble(
        FormulaKind::Extended,
        f.meta().name.clone(),
        gx.times(),
        base.value,
        base.lhs,
        EXTENDED_NAMES.iter().copied().zip(base.terms).collect(),
    );
    report.per_path_residual_sup = Some(base.per_path_sup);
    let seed = options.bootstrap_seed.unwrap_or(xi_paths.seed());
    attach_resampled_stderr(&mut report, options.bootstrap_replicates, |r| {
        // one stream per replicate drives both ensembles
        let wx = multinomial_weights(seed, 2 * r, xi_paths.n_paths());
        let wy = multinomial_weights(seed, 2 * r + 1, x_paths.n_paths());
        let s = extended_series(f, xi_paths, x_paths, Some(&wx), Some(&wy))?;
        Ok((s.lhs, s.terms))
    })?;
    report.n_paths = xi_paths.n_paths();
    report.n_aux_paths = Some(x_paths.n_paths());
    report.seed = xi_paths.seed();
    report.aux_seed = Some(x_paths.seed());
    Ok(report)
}

fn extended_series(
    f: &dyn ExtendedFunctional,
    xi: &PathBundle,
    xs: &PathBundle,
    xi_w: Option<&[f64]>,
    x_w: Option<&[f64]>,
) -> Result<ExtendedSeries> {
    let grid = xi.grid();
    let n = grid.n_steps();
    let d = xi.dim();
    let d1 = xi.noise_dim();
    let e1 = xs.noise_dim();
    let n_xi = xi.n_paths();
    let n_x = xs.n_paths();
    let ux = 1.0 / n_x as f64;
    let active: Vec<usize> = (0..n_xi)
        .filter(|&p| xi_w.is_none_or(|w| w[p] > 0.0))
        .collect();

    // per step: [value, 6 integrands (martingale as an increment)] per active ξ path
    let per_step: Vec<Result<Vec<[f64; 7]>>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let t = grid.time(i);
            let mu = weighted_marginal(xs, i, x_w)?;
            let bound: Box<dyn BoundExtended> = f.bind(t, &mu)?;
            let mut g = vec![0.0; d];
            let mut h = vec![0.0; d * d];
            let mut a = vec![0.0; d * d];
            let mut db = vec![0.0; d1];
            let mut sdb = vec![0.0; d];
            let mut out = Vec::with_capacity(active.len());
            for &p in &active {
                let x = xi.state(p, i);
                let mut row = [0.0; 7];
                row[0] = bound.value(x);
                if i < n {
                    bound.space_grad(x, &mut g);
                    bound.space_hess(x, &mut h);
                    let sigma = xi.diffusion(p, i);
                    row[1] = bound.time_deriv(x);
                    row[2] = dot(&g, xi.drift(p, i));
                    row[3] = half_trace(&h, sigma, d, d1, &mut a);
                    xi.increment(p, i, &mut db);
                    mat_vec(sigma, &db, d, d1, &mut sdb);
                    row[4] = dot(&g, &sdb);
                    let mut drift = CompensatedSum::new();
                    let mut diff = CompensatedSum::new();
                    for q in 0..n_x {
                        let w = x_w.map_or(ux, |w| w[q]);
                        if w == 0.0 {
                            continue;
                        }
                        let v = xs.state(q, i);
                        bound.lin_deriv_grad(x, v, &mut g);
                        bound.lin_deriv_hess(x, v, &mut h);
                        drift.add(w * dot(&g, xs.drift(q, i)));
                        diff.add(w * half_trace(&h, xs.diffusion(q, i), d, e1, &mut a));
                    }
                    row[5] = drift.value();
                    row[6] = diff.value();
                }
                for (k, v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        let name = if k == 0 { "functional value" } else { EXTENDED_NAMES[k - 1] };
                        return Err(non_finite(name, i, Some(p)));
                    }
                }
                out.push(row);
            }
            Ok(out)
        })
        .collect();
    let mut rows = Vec::with_capacity(n + 1);
    for s in per_step {
        rows.push(s?);
    }

    let weight = |slot: usize| -> f64 {
        let p = active[slot];
        xi_w.map_or(1.0 / n_xi as f64, |w| w[p])
    };
    let mut value = vec![CompensatedSum::new(); n + 1];
    let mut lhs = vec![CompensatedSum::new(); n + 1];
    let mut terms = vec![vec![CompensatedSum::new(); n + 1]; 6];
    let mut sup = vec![0.0f64; n + 1];
    let mut cum = [0.0f64; 6];
    for slot in 0..active.len() {
        let w = weight(slot);
        cum.iter_mut().for_each(|c| *c = 0.0);
        let v0 = rows[0][slot][0];
        for i in 0..=n {
            let row = &rows[i][slot];
            let l = row[0] - v0;
            value[i].add(w * row[0]);
            lhs[i].add(w * l);
            let mut r = l;
            for k in 0..6 {
                terms[k][i].add(w * cum[k]);
                r -= cum[k];
            }
            sup[i] = sup[i].max(r.abs());
            if i < n {
                let dt = grid.dt(i);
                for k in 0..6 {
                    // the martingale slot already holds ∂_x u · σ ΔB
                    let step = if k == 3 { row[k + 1] } else { dt * row[k + 1] };
                    cum[k] += step;
                }
            }
        }
    }
    let collapse = |v: Vec<CompensatedSum>| v.into_iter().map(|c| c.value()).collect::<Vec<_>>();
    Ok(ExtendedSeries {
        value: collapse(value),
        lhs: collapse(lhs),
        terms: terms.into_iter().map(collapse).collect(),
        per_path_sup: sup,
    })
}

/// One cell of a convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCell {
    pub dt: f64,
    pub n_paths: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub dt_list: Vec<f64>,
    pub n_paths_list: Vec<usize>,
    /// Row-major in `dt` (outer) and `n_paths` (inner).
    pub cells: Vec<ConvergenceCell>,
    /// Log-log slope of max residual against `Δt` at the largest ensemble.
    pub slope_dt: Option<f64>,
    /// Log-log slope against `n_paths` at the smallest `Δt`.
    pub slope_n_paths: Option<f64>,
}

impl ConvergenceTable {
    pub fn cell(&self, dt_index: usize, n_index: usize) -> &ConvergenceCell {
        &self.cells[dt_index * self.n_paths_list.len() + n_index]
    }
}

/// Runs `run(Δt, n_paths)` on every cell and fits the two slopes. Slopes
/// are `None` when a fitted residual is zero (log undefined) or a list has
/// a single entry.
pub fn convergence_study<R>(dt_list: &[f64], n_paths_list: &[usize], mut run: R) -> Result<ConvergenceTable>
where
    R: FnMut(f64, usize) -> Result<FormulaReport>,
{
    if dt_list.is_empty() || n_paths_list.is_empty() {
        return Err(Error::invalid("convergence lists must be nonempty"));
    }
    if dt_list.windows(2).any(|w| !(w[1] < w[0])) || dt_list.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("Δt list must be positive and strictly decreasing"));
    }
    if n_paths_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("n_paths list must be strictly increasing"));
    }
    let mut cells = Vec::with_capacity(dt_list.len() * n_paths_list.len());
    for &dt in dt_list {
        for &np in n_paths_list {
            let report = run(dt, np)?;
            cells.push(ConvergenceCell {
                dt,
                n_paths: np,
                max_residual: report.max_abs_residual(),
            });
        }
    }
    let nn = n_paths_list.len();
    let fit = |xs: Vec<f64>, ys: Vec<f64>| -> Option<f64> {
        if xs.len() < 2 || ys.iter().any(|y| !(*y > 0.0)) {
            None
        } else {
            log_log_slope(&xs, &ys).ok()
        }
    };
    let slope_dt = fit(
        dt_list.to_vec(),
        (0..dt_list.len()).map(|i| cells[i * nn + nn - 1].max_residual).collect(),
    );
    let last = dt_list.len() - 1;
    let slope_n_paths = fit(
        n_paths_list.iter().map(|&n| n as f64).collect(),
        (0..nn).map(|j| cells[last * nn + j].max_residual).collect(),
    );
    Ok(ConvergenceTable {
        dt_list: dt_list.to_vec(),
        n_paths_list: n_paths_list.to_vec(),
        cells,
        slope_dt,
        slope_n_paths,
    })
}
