//! Euler-Maruyama simulation of Itô processes with bounded, uniformly
//! elliptic coefficients, plus empirical certification of the bounds.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::numeric::{mat_vec, norm_sq, outer_self};
use crate::rng::{normal_words, Purpose, Stream, RNG_SCHEME};

/// Uniform time grid on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    step: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        Ok(TimeGrid {
            horizon,
            n_steps,
            step: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Nominal step `T / n_steps`.
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Grid point `t_i`; the last point is `T` exactly.
    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            i as f64 * self.step
        }
    }

    /// Length of step `i`, i.e. `t_{i+1} - t_i`. The last step absorbs rounding.
    #[inline]
    pub fn dt(&self, i: usize) -> f64 {
        self.time(i + 1) - self.time(i)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }
}

/// Coefficient evaluator `(t, x, aux, out)`, where `aux` is the per-path
/// auxiliary randomness drawn once at simulation start.
pub type CoefficientFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A drift or diffusion coefficient.
#[derive(Clone)]
pub enum Coefficient {
    /// Deterministic and state independent; stored once.
    Constant(Vec<f64>),
    Field(CoefficientFn),
}

impl Coefficient {
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], aux: &[f64], out: &mut [f64]) {
        match self {
            Coefficient::Constant(v) => out.copy_from_slice(v),
            Coefficient::Field(f) => f(t, x, aux, out),
        }
    }

    fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Coefficient::Field(_) => f.write_str("Field(..)"),
        }
    }
}

/// The pair `(b, σ)` with declared bound `K` and ellipticity `δ`.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    pub name: String,
    dim: usize,
    noise_dim: usize,
    aux_dim: usize,
    drift: Coefficient,
    diffusion: Coefficient,
    bound: f64,
    ellipticity: f64,
}

impl CoefficientModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        drift: Coefficient,
        diffusion: Coefficient,
        bound: f64,
        ellipticity: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if noise_dim < dim {
            return Err(Error::invalid(format!(
                "noise dimension {noise_dim} must be at least the state dimension {dim}"
            )));
        }
        if !(bound > 0.0) {
            return Err(Error::invalid(format!("bound K must be positive, got {bound}")));
        }
        if !(ellipticity > 0.0) {
            return Err(Error::invalid(format!(
                "ellipticity δ must be positive, got {ellipticity}"
            )));
        }
        if let Coefficient::Constant(b) = &drift {
            if b.len() != dim {
                return Err(Error::invalid("constant drift has wrong length"));
            }
        }
        if let Coefficient::Constant(s) = &diffusion {
            if s.len() != dim * noise_dim {
                return Err(Error::invalid("constant diffusion has wrong shape"));
            }
        }
        Ok(CoefficientModel {
            name: name.into(),
            dim,
            noise_dim,
            aux_dim: 0,
            drift,
            diffusion,
            bound,
            ellipticity,
        })
    }

    /// Requests `n` auxiliary uniforms per path, passed to the coefficients.
    pub fn with_aux(mut self, n: usize) -> Self {
        self.aux_dim = n;
        self
    }

    /// `b = β`, `σ = scale · I_d`.
    pub fn constant_drift(beta: &[f64], scale: f64) -> Result<Self> {
        let d = beta.len();
        let mut sigma = vec![0.0; d * d];
        for i in 0..d {
            sigma[i * d + i] = scale;
        }
        // the same expression validation evaluates, so the declared bound is tight
        let bound = norm_sq(beta).sqrt() + norm_sq(&sigma).sqrt();
        Self::new(
            "constant_drift",
            d,
            d,
            Coefficient::Constant(beta.to_vec()),
            Coefficient::Constant(sigma),
            bound.max(f64::MIN_POSITIVE),
            scale * scale,
        )
    }

    /// Brownian motion: `b = 0`, `σ = I_d`.
    pub fn brownian(d: usize) -> Result<Self> {
        let mut m = Self::constant_drift(&vec![0.0; d], 1.0)?;
        m.name = "brownian".into();
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    pub fn drift(&self) -> &Coefficient {
        &self.drift
    }

    pub fn diffusion(&self) -> &Coefficient {
        &self.diffusion
    }

    pub fn with_declared(mut self, bound: f64, ellipticity: f64) -> Self {
        self.bound = bound;
        self.ellipticity = ellipticity;
        self
    }
}

/// Law of `X_0`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    PointMass(Vec<f64>),
    /// Independent coordinates `N(mean_i, std^2)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    UniformBall { center: Vec<f64>, radius: f64 },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::PointMass(x) => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::UniformBall { center, .. } => center.len(),
        }
    }

    fn sample(&self, stream: &mut Stream, out: &mut [f64]) {
        match self {
            InitialLaw::PointMass(x) => out.copy_from_slice(x),
            InitialLaw::Gaussian { mean, std } => {
                stream.normals(out);
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + std * *o;
                }
            }
            InitialLaw::UniformBall { center, radius } => loop {
                for o in out.iter_mut() {
                    *o = 2.0 * stream.uniform() - 1.0;
                }
                if norm_sq(out) < 1.0 {
                    for (o, c) in out.iter_mut().zip(center) {
                        *o = c + radius * *o;
                    }
                    break;
                }
            },
        }
    }
}

/// Coefficient values cached at the left endpoint of every step.
#[derive(Debug, Clone)]
pub enum CoefficientCache {
    /// Same value for every path and step.
    Uniform(Vec<f64>),
    /// Layout `[path][step][component]`.
    PerStep { width: usize, n_steps: usize, values: Vec<f64> },
}

impl CoefficientCache {
    #[inline]
    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        match self {
            CoefficientCache::Uniform(v) => v,
            CoefficientCache::PerStep { width, n_steps, values } => {
                let start = (path * n_steps + step) * width;
                &values[start..start + width]
            }
        }
    }
}

/// Extra simulation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimulationOptions {
    /// Path `2k+1` reuses the Brownian increments of path `2k` with the
    /// opposite sign. Initial values and auxiliary draws stay independent.
    pub antithetic: bool,
}

/// Discretized trajectories of independent copies of the process.
#[derive(Debug, Clone)]
pub struct PathBundle {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    noise_dim: usize,
    states: Vec<f64>,
    drift_values: CoefficientCache,
    diffusion_values: CoefficientCache,
    aux: Vec<f64>,
    aux_dim: usize,
    seed: u64,
    options: SimulationOptions,
}

impl PathBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_scheme(&self) -> &'static str {
        RNG_SCHEME
    }

    pub fn options(&self) -> SimulationOptions {
        self.options
    }

    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * (self.grid.n_steps + 1) + step) * self.dim;
        &self.states[start..start + self.dim]
    }

    /// Whole trajectory of one path, `(n_steps + 1) * d` values.
    pub fn trajectory(&self, path: usize) -> &[f64] {
        let row = (self.grid.n_steps + 1) * self.dim;
        &self.states[path * row..(path + 1) * row]
    }

    /// `b(t_i, X_i)` as used by the scheme.
    #[inline]
    pub fn drift(&self, path: usize, step: usize) -> &[f64] {
        self.drift_values.get(path, step)
    }

    /// `σ(t_i, X_i)`, row-major `d x d1`.
    #[inline]
    pub fn diffusion(&self, path: usize, step: usize) -> &[f64] {
        self.diffusion_values.get(path, step)
    }

    pub fn aux(&self, path: usize) -> &[f64] {
        &self.aux[path * self.aux_dim..(path + 1) * self.aux_dim]
    }

    /// Regenerates the Brownian increment `ΔB_i` used for `path` at `step`.
    pub fn increment(&self, path: usize, step: usize, out: &mut [f64]) {
        brownian_increment(
            self.seed,
            path,
            step,
            self.grid.dt(step),
            self.options.antithetic,
            out,
        );
    }

    /// Uniform empirical measure of the ensemble at grid index `t_index`.
    pub fn marginal(&self, t_index: usize) -> Result<EmpiricalMeasure> {
        if t_index > self.grid.n_steps {
            return Err(Error::invalid(format!(
                "time index {t_index} outside 0..={}",
                self.grid.n_steps
            )));
        }
        let mut points = Vec::with_capacity(self.n_paths * self.dim);
        for p in 0..self.n_paths {
            points.extend_from_slice(self.state(p, t_index));
        }
        EmpiricalMeasure::uniform(self.dim, points)
    }
}

/// Increment stream of one path, positioned at `step`. Steps are read
/// sequentially afterwards: each consumes exactly `normal_words(d1)` words,
/// so the draws coincide with a fresh seek to any later step.
fn increment_stream(seed: u64, path: usize, step: usize, d1: usize, antithetic: bool) -> (Stream, f64) {
    let (stream_id, sign) = if antithetic {
        ((path / 2) as u64, if path % 2 == 0 { 1.0 } else { -1.0 })
    } else {
        (path as u64, 1.0)
    };
    let mut stream = Stream::new(seed, Purpose::Increments, stream_id);
    stream.seek(step as u64, normal_words(d1));
    (stream, sign)
}

fn next_increment(stream: &mut Stream, sign: f64, dt: f64, out: &mut [f64]) {
    stream.normals(out);
    let scale = sign * dt.sqrt();
    for w in out.iter_mut() {
        *w *= scale;
    }
}

fn brownian_increment(
    seed: u64,
    path: usize,
    step: usize,
    dt: f64,
    antithetic: bool,
    out: &mut [f64],
) {
    let (mut stream, sign) = increment_stream(seed, path, step, out.len(), antithetic);
    next_increment(&mut stream, sign, dt, out);
}

/// Euler-Maruyama with left-endpoint coefficients.
pub fn simulate_paths(
    model: &CoefficientModel,
    grid: &TimeGrid,
    n_paths: usize,
    init: &InitialLaw,
    seed: u64,
) -> Result<PathBundle> {
    simulate_paths_with(model, grid, n_paths, init, seed, SimulationOptions::default())
}

pub fn simulate_paths_with(
    model: &CoefficientModel,
    grid: &TimeGrid,
    n_paths: usize,
    init: &InitialLaw,
    seed: u64,
    options: SimulationOptions,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    if init.dim() != model.dim {
        return Err(Error::invalid(format!(
            "initial law has dimension {}, model has {}",
            init.dim(),
            model.dim
        )));
    }
    let d = model.dim;
    let d1 = model.noise_dim;
    let n_steps = grid.n_steps;
    let row = (n_steps + 1) * d;

    let mut states = vec![0.0; n_paths * row];
    let mut aux = vec![0.0; n_paths * model.aux_dim];
    let per_step_drift = !model.drift.is_constant();
    let per_step_diff = !model.diffusion.is_constant();
    let mut drift_store = vec![0.0; if per_step_drift { n_paths * n_steps * d } else { 0 }];
    let mut diff_store = vec![0.0; if per_step_diff { n_paths * n_steps * d * d1 } else { 0 }];

    let drift_chunk = if per_step_drift { n_steps * d } else { 1 };
    let diff_chunk = if per_step_diff { n_steps * d * d1 } else { 1 };
    let aux_chunk = model.aux_dim.max(1);
    let mut drift_dummy = vec![0.0; if per_step_drift { 0 } else { n_paths }];
    let mut diff_dummy = vec![0.0; if per_step_diff { 0 } else { n_paths }];
    let mut aux_dummy = vec![0.0; if model.aux_dim > 0 { 0 } else { n_paths }];

    let drift_rows = if per_step_drift { &mut drift_store } else { &mut drift_dummy };
    let diff_rows = if per_step_diff { &mut diff_store } else { &mut diff_dummy };
    let aux_rows = if model.aux_dim > 0 { &mut aux } else { &mut aux_dummy };

    let failures: Vec<Option<Error>> = states
        .par_chunks_mut(row)
        .zip(drift_rows.par_chunks_mut(drift_chunk))
        .zip(diff_rows.par_chunks_mut(diff_chunk))
        .zip(aux_rows.par_chunks_mut(aux_chunk))
        .enumerate()
        .map(|(p, (((traj, drow), srow), arow))| {
            simulate_one(
                model,
                grid,
                init,
                seed,
                options,
                p,
                traj,
                per_step_drift.then_some(drow),
                per_step_diff.then_some(srow),
                &mut arow[..model.aux_dim],
            )
            .err()
        })
        .collect();
    if let Some(err) = failures.into_iter().flatten().next() {
        return Err(err);
    }

    let drift_values = match &model.drift {
        Coefficient::Constant(v) => CoefficientCache::Uniform(v.clone()),
        Coefficient::Field(_) => CoefficientCache::PerStep {
            width: d,
            n_steps,
            values: drift_store,
        },
    };
    let diffusion_values = match &model.diffusion {
        Coefficient::Constant(v) => CoefficientCache::Uniform(v.clone()),
        Coefficient::Field(_) => CoefficientCache::PerStep {
            width: d * d1,
            n_steps,
            values: diff_store,
        },
    };

    Ok(PathBundle {
        grid: grid.clone(),
        n_paths,
        dim: d,
        noise_dim: d1,
        states,
        drift_values,
        diffusion_values,
        aux,
        aux_dim: model.aux_dim,
        seed,
        options,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    model: &CoefficientModel,
    grid: &TimeGrid,
    init: &InitialLaw,
    seed: u64,
    options: SimulationOptions,
    path: usize,
    traj: &mut [f64],
    mut drift_row: Option<&mut [f64]>,
    mut diff_row: Option<&mut [f64]>,
    aux: &mut [f64],
) -> Result<()> {
    let d = model.dim;
    let d1 = model.noise_dim;

    let mut init_stream = Stream::new(seed, Purpose::Initial, path as u64);
    init.sample(&mut init_stream, &mut traj[..d]);
    if !aux.is_empty() {
        let mut aux_stream = Stream::new(seed, Purpose::Auxiliary, path as u64);
        for a in aux.iter_mut() {
            *a = aux_stream.uniform();
        }
    }

    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d1];
    let mut dw = vec![0.0; d1];
    let mut noise = vec![0.0; d];
    let (mut stream, sign) = increment_stream(seed, path, 0, d1, options.antithetic);
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let dt = grid.dt(i);
        let (head, tail) = traj.split_at_mut((i + 1) * d);
        let x = &head[i * d..];
        model.drift.eval(t, x, aux, &mut b);
        model.diffusion.eval(t, x, aux, &mut sigma);
        if b.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "coefficient evaluation",
                format!("non-finite value at path {path}, step {i}"),
            ));
        }
        if let Some(row) = drift_row.as_deref_mut() {
            row[i * d..(i + 1) * d].copy_from_slice(&b);
        }
        if let Some(row) = diff_row.as_deref_mut() {
            row[i * d * d1..(i + 1) * d * d1].copy_from_slice(&sigma);
        }
        next_increment(&mut stream, sign, dt, &mut dw);
        mat_vec(&sigma, &dw, d, d1, &mut noise);
        for k in 0..d {
            tail[k] = x[k] + b[k] * dt + noise[k];
        }
    }
    Ok(())
}

/// One probe point for coefficient validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub direction: Vec<f64>,
    pub aux: Vec<f64>,
}

/// Probe set on `[0, T] x [-radius, radius]^d`: every canonical basis
/// vector plus random unit directions.
pub fn default_probe(
    model: &CoefficientModel,
    grid: &TimeGrid,
    n_random: usize,
    radius: f64,
    seed: u64,
) -> Vec<ProbePoint> {
    let d = model.dim;
    let mut stream = Stream::new(seed, Purpose::Probe, 0);
    let mut probe = Vec::with_capacity(n_random + d);
    let draw = |stream: &mut Stream, direction: Vec<f64>| {
        let t = grid.horizon() * stream.uniform();
        let x: Vec<f64> = (0..d).map(|_| radius * (2.0 * stream.uniform() - 1.0)).collect();
        let aux: Vec<f64> = (0..model.aux_dim).map(|_| stream.uniform()).collect();
        ProbePoint { t, x, direction, aux }
    };
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        probe.push(draw(&mut stream, e));
    }
    for _ in 0..n_random {
        let mut dir = vec![0.0; d];
        stream.normals(&mut dir);
        let n = norm_sq(&dir).sqrt();
        dir.iter_mut().for_each(|v| *v /= n);
        probe.push(draw(&mut stream, dir));
    }
    probe
}

/// Outcome of [`validate_coefficients`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// `max |b| + |σ|` over the probe (Frobenius norm for `σ`).
    pub max_bound: f64,
    /// `min (σσ*)λ·λ / |λ|²` over the probe.
    pub min_ellipticity: f64,
    pub declared_bound: f64,
    pub declared_ellipticity: f64,
    pub bound_ok: bool,
    pub ellipticity_ok: bool,
    pub n_probes: usize,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.bound_ok && self.ellipticity_ok
    }
}

/// Relative round-off allowance when comparing probed and declared constants.
pub const VALIDATION_SLACK: f64 = 1e-12;

pub fn validate_coefficients(
    model: &CoefficientModel,
    probe: &[ProbePoint],
) -> Result<ValidationReport> {
    if probe.is_empty() {
        return Err(Error::invalid("probe set is empty"));
    }
    let d = model.dim;
    let d1 = model.noise_dim;
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d1];
    let mut a = vec![0.0; d * d];
    let mut max_bound = 0.0f64;
    let mut min_ell = f64::INFINITY;
    for pt in probe {
        if pt.x.len() != d || pt.direction.len() != d {
            return Err(Error::invalid("probe point has wrong dimension"));
        }
        model.drift.eval(pt.t, &pt.x, &pt.aux, &mut b);
        model.diffusion.eval(pt.t, &pt.x, &pt.aux, &mut sigma);
        let size = norm_sq(&b).sqrt() + norm_sq(&sigma).sqrt();
        max_bound = max_bound.max(size);
        outer_self(&sigma, d, d1, &mut a);
        let lam = &pt.direction;
        let lam_sq = norm_sq(lam);
        if lam_sq > 0.0 {
            let mut quad = 0.0;
            for i in 0..d {
                for j in 0..d {
                    quad += a[i * d + j] * lam[i] * lam[j];
                }
            }
            min_ell = min_ell.min(quad / lam_sq);
        }
    }
    Ok(ValidationReport {
        max_bound,
        min_ellipticity: min_ell,
        declared_bound: model.bound,
        declared_ellipticity: model.ellipticity,
        bound_ok: max_bound <= model.bound * (1.0 + VALIDATION_SLACK),
        ellipticity_ok: min_ell >= model.ellipticity * (1.0 - VALIDATION_SLACK),
        n_probes: probe.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(3), 1.0);
        let total: f64 = (0..3).map(|i| g.dt(i)).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn brownian_terminal_mean_is_zero() {
        let model = CoefficientModel::brownian(1).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let init = InitialLaw::PointMass(vec![0.0]);
        let paths = simulate_paths(&model, &grid, 100_000, &init, 3).unwrap();
        let xs: Vec<f64> = (0..paths.n_paths()).map(|p| paths.state(p, 10)[0]).collect();
        let (m, _) = mean_and_se(&xs);
        assert!(m.abs() <= 4.0 * (1.0f64 / 1e5).sqrt());
    }

    #[test]
    fn constant_drift_terminal_mean() {
        let beta = 0.7;
        let model = CoefficientModel::constant_drift(&[beta], 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let init = InitialLaw::PointMass(vec![0.0]);
        let paths = simulate_paths(&model, &grid, 50_000, &init, 9).unwrap();
        let xs: Vec<f64> = (0..paths.n_paths()).map(|p| paths.state(p, 20)[0]).collect();
        let (m, se) = mean_and_se(&xs);
        assert!((m - beta).abs() <= 4.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn determinism_and_thread_independence() {
        let model = CoefficientModel::constant_drift(&[0.3, -0.2], 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let init = InitialLaw::Gaussian { mean: vec![1.0, 0.0], std: 1.0 };
        let a = simulate_paths(&model, &grid, 257, &init, 42).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_paths(&model, &grid, 257, &init, 42).unwrap());
        assert_eq!(a.states, b.states);
        let c = simulate_paths(&model, &grid, 257, &init, 43).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn marginal_checks() {
        let model = CoefficientModel::brownian(2).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let init = InitialLaw::PointMass(vec![0.5, -1.0]);
        let one = simulate_paths(&model, &grid, 1, &init, 1).unwrap();
        let m = one.marginal(4).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.point(0), one.state(0, 4));

        let init = InitialLaw::UniformBall { center: vec![0.0, 0.0], radius: 2.0 };
        let many = simulate_paths(&model, &grid, 50, &init, 1).unwrap();
        let m0 = many.marginal(0).unwrap();
        for p in 0..50 {
            assert_eq!(m0.point(p), many.state(p, 0));
            assert!(norm_sq(m0.point(p)) < 4.0);
        }
        assert!(many.marginal(5).is_err());
    }

    #[test]
    fn brownian_second_moment() {
        let model = CoefficientModel::brownian(1).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let paths = simulate_paths(&model, &grid, 100_000, &InitialLaw::PointMass(vec![0.0]), 5)
            .unwrap();
        let m = paths.marginal(8).unwrap();
        let sq: Vec<f64> = (0..m.len()).map(|j| m.point(j)[0].powi(2)).collect();
        let (mean, se) = mean_and_se(&sq);
        assert!((mean - 1.0).abs() <= 4.0 * se);
    }

    #[test]
    fn left_endpoint_cache_matches_coefficients() {
        let drift: CoefficientFn = Arc::new(|t, x, aux, out: &mut [f64]| {
            out[0] = (x[0] + t).sin() * aux[0];
        });
        let diff: CoefficientFn = Arc::new(|_, x, _, out: &mut [f64]| {
            out[0] = 1.0 + 0.5 * x[0].cos();
        });
        let model = CoefficientModel::new(
            "wavy",
            1,
            1,
            Coefficient::Field(drift.clone()),
            Coefficient::Field(diff.clone()),
            3.0,
            0.25,
        )
        .unwrap()
        .with_aux(1);
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let paths =
            simulate_paths(&model, &grid, 40, &InitialLaw::PointMass(vec![0.1]), 8).unwrap();
        let mut out = [0.0];
        for p in 0..40 {
            for i in 0..12 {
                drift(grid.time(i), paths.state(p, i), paths.aux(p), &mut out);
                assert_eq!(paths.drift(p, i), &out);
                diff(grid.time(i), paths.state(p, i), paths.aux(p), &mut out);
                assert_eq!(paths.diffusion(p, i), &out);
            }
        }
    }

    #[test]
    fn increments_reproduce_the_scheme() {
        let model = CoefficientModel::constant_drift(&[0.5], 2.0).unwrap();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let paths = simulate_paths(&model, &grid, 3, &InitialLaw::PointMass(vec![0.0]), 4).unwrap();
        let mut dw = [0.0];
        for p in 0..3 {
            for i in 0..5 {
                paths.increment(p, i, &mut dw);
                let expect = paths.state(p, i)[0] + 0.5 * grid.dt(i) + 2.0 * dw[0];
                assert_eq!(paths.state(p, i + 1)[0], expect);
            }
        }
    }

    #[test]
    fn antithetic_pairs_cancel() {
        let model = CoefficientModel::brownian(1).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let opts = SimulationOptions { antithetic: true };
        let paths = simulate_paths_with(&model, &grid, 4, &InitialLaw::PointMass(vec![0.0]), 2, opts)
            .unwrap();
        for i in 0..=4 {
            assert_eq!(paths.state(0, i)[0], -paths.state(1, i)[0]);
        }
    }

    #[test]
    fn invalid_arguments() {
        let model = CoefficientModel::brownian(1).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        assert!(matches!(
            simulate_paths(&model, &grid, 0, &InitialLaw::PointMass(vec![0.0]), 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(simulate_paths(&model, &grid, 2, &InitialLaw::PointMass(vec![0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn non_finite_coefficient_is_located() {
        let drift: CoefficientFn = Arc::new(|t, _, _, out: &mut [f64]| {
            out[0] = if t > 0.5 { f64::NAN } else { 0.0 };
        });
        let model = CoefficientModel::new(
            "bad",
            1,
            1,
            Coefficient::Field(drift),
            Coefficient::Constant(vec![1.0]),
            2.0,
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let err = simulate_paths(&model, &grid, 3, &InitialLaw::PointMass(vec![0.0]), 1)
            .unwrap_err();
        match err {
            Error::NumericFailure { detail, .. } => assert!(detail.contains("path 0, step 3")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_identity_diffusion() {
        let d = 3;
        let model = CoefficientModel::brownian(d).unwrap().with_declared(d as f64 + 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let probe = default_probe(&model, &grid, 50, 3.0, 1);
        let rep = validate_coefficients(&model, &probe).unwrap();
        assert!(rep.pass());
        assert!((rep.min_ellipticity - 1.0).abs() < 1e-14);
    }

    #[test]
    fn validation_degenerate_noise_fails() {
        let model = CoefficientModel::new(
            "flat",
            2,
            2,
            Coefficient::Constant(vec![0.0, 0.0]),
            Coefficient::Constant(vec![0.0; 4]),
            1.0,
            1e-6,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let rep = validate_coefficients(&model, &default_probe(&model, &grid, 20, 1.0, 2)).unwrap();
        assert!(!rep.ellipticity_ok);
        assert_eq!(rep.min_ellipticity, 0.0);
    }

    #[test]
    fn validation_rotation_is_isotropic() {
        let th: f64 = 0.7;
        let sigma = vec![th.cos(), -th.sin(), th.sin(), th.cos()];
        let model = CoefficientModel::new(
            "rotation",
            2,
            2,
            Coefficient::Constant(vec![0.0, 0.0]),
            Coefficient::Constant(sigma),
            2.0,
            1.0 - 1e-12,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let rep = validate_coefficients(&model, &default_probe(&model, &grid, 64, 1.0, 3)).unwrap();
        assert!(rep.pass());
        assert!((rep.min_ellipticity - 1.0).abs() < 1e-14);
        assert!(validate_coefficients(&model, &[]).is_err());
    }
}
