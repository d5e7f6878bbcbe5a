//! Functionals of probability measures together with their linear
//! derivative `δu/δm(μ)(v)` and its first two `v`-derivatives.
//!
//! A functional is bound to a measure once (`bind`), which precomputes the
//! measure-level quantities; the bound object then evaluates the
//! derivative channels at many points cheaply.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fields::{
    outer_field, pair_field, scalar_field, ConstantField, OuterField, PairField, ScalarField,
    SquaredNorm,
};
use crate::measure::{EmpiricalMeasure, Mollifier, NodeSet};
use crate::numeric::{compensated_sum, gauss_legendre};

/// Which distance on measures the functional's continuity is stated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceTag {
    W2,
    Dk,
}

impl DistanceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceTag::W2 => "W2",
            DistanceTag::Dk => "d_k",
        }
    }
}

/// Growth and regularity metadata. For extended functionals `k`/`alpha`
/// refer to the measure argument and `k2`/`alpha2` to the second family of
/// bounds; they are recorded, not verified.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub name: String,
    pub k: Option<f64>,
    pub alpha: Option<f64>,
    pub k2: Option<f64>,
    pub alpha2: Option<f64>,
    pub distance: DistanceTag,
    /// False for closed-form test functionals outside the Sobolev classes
    /// the theory assumes (e.g. `g(x, y) = x·y`).
    pub hypothesis_certified: bool,
    /// Polynomial degree of `μ -> δu/δm(μ)`, when polynomial.
    pub measure_degree: Option<usize>,
}

impl Metadata {
    fn new(name: impl Into<String>, distance: DistanceTag, certified: bool) -> Self {
        Metadata {
            name: name.into(),
            k: None,
            alpha: None,
            k2: None,
            alpha2: None,
            distance,
            hypothesis_certified: certified,
            measure_degree: None,
        }
    }

    fn growth(mut self, k: f64, alpha: f64) -> Self {
        self.k = Some(k);
        self.alpha = Some(alpha);
        self
    }

    fn degree(mut self, p: Option<usize>) -> Self {
        self.measure_degree = p;
        self
    }

    /// Gauss-Legendre node count that integrates the linear-derivative
    /// identity exactly (or, for non-polynomial cases, to round-off).
    pub fn identity_quadrature(&self) -> usize {
        match self.measure_degree {
            Some(p) => ((p + 2) / 2).max(2),
            None => 24,
        }
    }
}

/// A functional evaluated at a fixed measure.
pub trait BoundFunctional: Send + Sync {
    fn value(&self) -> f64;
    fn lin_deriv(&self, v: &[f64]) -> f64;
    fn lin_deriv_grad(&self, v: &[f64], out: &mut [f64]);
    fn lin_deriv_hess(&self, v: &[f64], out: &mut [f64]);
}

/// `u : P_2(R^d) -> R` with closed-form derivative data.
pub trait MeasureFunctional: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn meta(&self) -> &Metadata;
    fn bind(&self, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundFunctional>>;

    /// `φ(x)` when `u(μ) = ∫ φ dμ`; such functionals have a
    /// measure-independent linear derivative.
    fn atom_value(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn is_linear(&self) -> bool {
        false
    }

    fn value(&self, mu: &EmpiricalMeasure) -> Result<f64> {
        finite(self.bind(mu)?.value(), self.meta(), "value")
    }

    fn lin_deriv(&self, mu: &EmpiricalMeasure, v: &[f64]) -> Result<f64> {
        finite(self.bind(mu)?.lin_deriv(v), self.meta(), "linear derivative")
    }
}

fn finite(x: f64, meta: &Metadata, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(
            format!("functional {}", meta.name),
            format!("non-finite {what}"),
        ))
    }
}

fn check_dim(expected: usize, mu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim() != expected {
        return Err(Error::invalid(format!(
            "functional of dimension {expected} applied to a measure of dimension {}",
            mu.dim()
        )));
    }
    Ok(())
}

/// `u(μ) = ∫ g dμ`.
#[derive(Debug, Clone)]
pub struct Linear {
    dim: usize,
    g: Arc<dyn ScalarField>,
    meta: Metadata,
}

struct LinearBound {
    g: Arc<dyn ScalarField>,
    value: f64,
}

impl BoundFunctional for LinearBound {
    fn value(&self) -> f64 {
        self.value
    }
    fn lin_deriv(&self, v: &[f64]) -> f64 {
        self.g.value(v)
    }
    fn lin_deriv_grad(&self, v: &[f64], out: &mut [f64]) {
        self.g.grad(v, out)
    }
    fn lin_deriv_hess(&self, v: &[f64], out: &mut [f64]) {
        self.g.hess(v, out)
    }
}

impl MeasureFunctional for Linear {
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundFunctional>> {
        check_dim(self.dim, mu)?;
        let value = mu.integrate(|x| self.g.value(x));
        finite(value, &self.meta, "value")?;
        Ok(Box::new(LinearBound {
            g: self.g.clone(),
            value,
        }))
    }
    fn atom_value(&self, x: &[f64]) -> Option<f64> {
        Some(self.g.value(x))
    }
    fn is_linear(&self) -> bool {
        true
    }
}

pub fn make_linear(dim: usize, g: Arc<dyn ScalarField>) -> Result<Linear> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let meta = Metadata::new(format!("linear:g={}", g.id()), DistanceTag::Dk, g.sobolev())
        .growth(dim as f64 + 1.0, 0.0)
        .degree(Some(0));
    Ok(Linear { dim, g, meta })
}

/// `u(μ) = ∫ |x|² dμ`.
pub fn second_moment(dim: usize) -> Result<Linear> {
    let mut f = make_linear(dim, Arc::new(SquaredNorm))?;
    f.meta.name = "second_moment".into();
    Ok(f)
}

/// `u(μ) = c`.
pub fn constant(dim: usize, c: f64) -> Result<Linear> {
    let mut f = make_linear(dim, Arc::new(ConstantField(c)))?;
    f.meta.name = format!("constant:c={c}");
    f.meta.hypothesis_certified = true;
    Ok(f)
}

/// `u(μ) = |∫ x dμ|²`, the quadratic functional with `g(x, y) = x·y`
/// evaluated through the mean.
#[derive(Debug, Clone)]
pub struct MeanSquared {
    dim: usize,
    meta: Metadata,
}

struct MeanSquaredBound {
    mean: Vec<f64>,
}

impl BoundFunctional for MeanSquaredBound {
    fn value(&self) -> f64 {
        self.mean.iter().map(|m| m * m).sum()
    }
    fn lin_deriv(&self, v: &[f64]) -> f64 {
        2.0 * self.mean.iter().zip(v).map(|(m, x)| m * x).sum::<f64>()
    }
    fn lin_deriv_grad(&self, _v: &[f64], out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o = 2.0 * m;
        }
    }
    fn lin_deriv_hess(&self, _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

impl MeasureFunctional for MeanSquared {
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundFunctional>> {
        check_dim(self.dim, mu)?;
        Ok(Box::new(MeanSquaredBound { mean: mu.mean() }))
    }
}

pub fn mean_squared(dim: usize) -> Result<MeanSquared> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let meta = Metadata::new("mean_squared", DistanceTag::Dk, false)
        .growth(quadratic_k(dim), 1.0)
        .degree(Some(1));
    Ok(MeanSquared { dim, meta })
}

fn quadratic_k(dim: usize) -> f64 {
    (dim as f64 + 1.0).max(2.0 * dim as f64)
}

/// `u(μ) = ∬ g(x, y) dμ(x) dμ(y)`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    g: Arc<dyn PairField>,
    meta: Metadata,
}

struct QuadraticBound {
    g: Arc<dyn PairField>,
    mu: EmpiricalMeasure,
    value: f64,
}

impl BoundFunctional for QuadraticBound {
    fn value(&self) -> f64 {
        self.value
    }
    fn lin_deriv(&self, v: &[f64]) -> f64 {
        if self.g.symmetric() {
            2.0 * self.mu.integrate(|y| self.g.value(v, y))
        } else {
            self.mu.integrate(|y| self.g.value(v, y) + self.g.value(y, v))
        }
    }
    fn lin_deriv_grad(&self, v: &[f64], out: &mut [f64]) {
        let d = v.len();
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        accumulate(&self.mu, out, |y, o| {
            self.g.grad_x(v, y, &mut a);
            self.g.grad_y(y, v, &mut b);
            for k in 0..d {
                o[k] = a[k] + b[k];
            }
        });
    }
    fn lin_deriv_hess(&self, v: &[f64], out: &mut [f64]) {
        let d = v.len();
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d * d];
        accumulate(&self.mu, out, |y, o| {
            self.g.hess_xx(v, y, &mut a);
            self.g.hess_yy(y, v, &mut b);
            for k in 0..d * d {
                o[k] = a[k] + b[k];
            }
        });
    }
}

/// `out = Σ_j w_j term(x_j)` for vector-valued terms.
fn accumulate<F>(mu: &EmpiricalMeasure, out: &mut [f64], mut term: F)
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut buf = vec![0.0; out.len()];
    out.iter_mut().for_each(|o| *o = 0.0);
    for (y, w) in mu.atoms() {
        term(y, &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += w * b;
        }
    }
}

fn double_sum(mu: &EmpiricalMeasure, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    compensated_sum(
        mu.atoms()
            .map(|(x, wx)| wx * compensated_sum(mu.atoms().map(|(y, wy)| wy * f(x, y)))),
    )
}

impl MeasureFunctional for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundFunctional>> {
        check_dim(self.dim, mu)?;
        let value = double_sum(mu, |x, y| self.g.value(x, y));
        finite(value, &self.meta, "value")?;
        Ok(Box::new(QuadraticBound {
            g: self.g.clone(),
            mu: mu.clone(),
            value,
        }))
    }
}

pub fn make_quadratic(dim: usize, g: Arc<dyn PairField>) -> Result<Quadratic> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let meta = Metadata::new(format!("quadratic:g={}", g.id()), DistanceTag::Dk, g.sobolev())
        .growth(quadratic_k(dim), 1.0)
        .degree(Some(1));
    Ok(Quadratic { dim, g, meta })
}

/// `u(μ) = ∫ f ⋆ μ dμ`.
#[derive(Debug, Clone)]
pub struct Convolution {
    dim: usize,
    f: Arc<dyn ScalarField>,
    meta: Metadata,
}

struct ConvolutionBound {
    f: Arc<dyn ScalarField>,
    mu: EmpiricalMeasure,
    value: f64,
}

fn sub(a: &[f64], b: &[f64], out: &mut [f64]) {
    for k in 0..out.len() {
        out[k] = a[k] - b[k];
    }
}

impl BoundFunctional for ConvolutionBound {
    fn value(&self) -> f64 {
        self.value
    }
    fn lin_deriv(&self, v: &[f64]) -> f64 {
        let mut z = vec![0.0; v.len()];
        let even = self.f.even();
        self.mu.integrate(|x| {
            sub(v, x, &mut z);
            if even {
                2.0 * self.f.value(&z)
            } else {
                let a = self.f.value(&z);
                z.iter_mut().for_each(|c| *c = -*c);
                a + self.f.value(&z)
            }
        })
    }
    fn lin_deriv_grad(&self, v: &[f64], out: &mut [f64]) {
        // d/dv [f(v - x) + f(x - v)] = ∇f(v - x) - ∇f(x - v)
        let d = v.len();
        let mut z = vec![0.0; d];
        let mut a = vec![0.0; d];
        accumulate(&self.mu, out, |x, o| {
            sub(v, x, &mut z);
            self.f.grad(&z, o);
            z.iter_mut().for_each(|c| *c = -*c);
            self.f.grad(&z, &mut a);
            for k in 0..d {
                o[k] -= a[k];
            }
        });
    }
    fn lin_deriv_hess(&self, v: &[f64], out: &mut [f64]) {
        let d = v.len();
        let mut z = vec![0.0; d];
        let mut a = vec![0.0; d * d];
        accumulate(&self.mu, out, |x, o| {
            sub(v, x, &mut z);
            self.f.hess(&z, o);
            z.iter_mut().for_each(|c| *c = -*c);
            self.f.hess(&z, &mut a);
            for k in 0..d * d {
                o[k] += a[k];
            }
        });
    }
}

impl MeasureFunctional for Convolution {
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundFunctional>> {
        check_dim(self.dim, mu)?;
        let mut z = vec![0.0; self.dim];
        let value = compensated_sum(mu.atoms().map(|(x, wx)| {
            wx * compensated_sum(mu.atoms().map(|(y, wy)| {
                sub(x, y, &mut z);
                wy * self.f.value(&z)
            }))
        }));
        finite(value, &self.meta, "value")?;
        Ok(Box::new(ConvolutionBound {
            f: self.f.clone(),
            mu: mu.clone(),
            value,
        }))
    }
}

pub fn make_convolution(dim: usize, f: Arc<dyn ScalarField>) -> Result<Convolution> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let meta = Metadata::new(format!("convolution:f={}", f.id()), DistanceTag::Dk, f.sobolev())
        .growth(quadratic_k(dim), 1.0)
        .degree(Some(1));
    Ok(Convolution { dim, f, meta })
}

/// `u^n(μ) = u(μ ⋆ ρ_n)` with the convolution realized by a fixed
/// quadrature node set of `ρ_n`.
#[derive(Debug, Clone)]
pub struct Mollified {
    inner: Arc<dyn MeasureFunctional>,
    mollifier: Mollifier,
    nodes: NodeSet,
    meta: Metadata,
}

struct MollifiedBound {
    inner: Box<dyn BoundFunctional>,
    nodes: NodeSet,
}

impl MollifiedBound {
    fn shifted<F: FnMut(&[f64], f64)>(&self, v: &[f64], mut f: F) {
        let mut z = vec![0.0; v.len()];
        for (offset, w) in self.nodes.iter() {
            sub(v, offset, &mut z);
            f(&z, w);
        }
    }
}

impl BoundFunctional for MollifiedBound {
    fn value(&self) -> f64 {
        self.inner.value()
    }
    fn lin_deriv(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.shifted(v, |z, w| acc += w * self.inner.lin_deriv(z));
        acc
    }
    fn lin_deriv_grad(&self, v: &[f64], out: &mut [f64]) {
        let mut buf = vec![0.0; out.len()];
        out.iter_mut().for_each(|o| *o = 0.0);
        self.shifted(v, |z, w| {
            self.inner.lin_deriv_grad(z, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        });
    }
    fn lin_deriv_hess(&self, v: &[f64], out: &mut [f64]) {
        let mut buf = vec![0.0; out.len()];
        out.iter_mut().for_each(|o| *o = 0.0);
        self.shifted(v, |z, w| {
            self.inner.lin_deriv_hess(z, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        });
    }
}

impl Mollified {
    pub fn inner(&self) -> &Arc<dyn MeasureFunctional> {
        &self.inner
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }

    pub fn nodes(&self) -> &NodeSet {
        &self.nodes
    }
}

impl MeasureFunctional for Mollified {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundFunctional>> {
        check_dim(self.dim(), mu)?;
        let expanded = mu.expand_with_nodes(&self.nodes)?;
        Ok(Box::new(MollifiedBound {
            inner: self.inner.bind(&expanded)?,
            nodes: self.nodes.clone(),
        }))
    }
    fn atom_value(&self, x: &[f64]) -> Option<f64> {
        if !self.inner.is_linear() {
            return None;
        }
        let mut z = vec![0.0; x.len()];
        let mut acc = 0.0;
        for (offset, w) in self.nodes.iter() {
            for k in 0..z.len() {
                z[k] = x[k] + offset[k];
            }
            acc += w * self.inner.atom_value(&z)?;
        }
        Some(acc)
    }
    fn is_linear(&self) -> bool {
        self.inner.is_linear()
    }
}

/// Wraps `inner` as `μ -> inner(μ ⋆ ρ_n)`; `mc_nodes` Gauss-Legendre nodes
/// per axis discretize `ρ_n`.
pub fn mollified(
    inner: Arc<dyn MeasureFunctional>,
    rho: &Mollifier,
    mc_nodes: usize,
) -> Result<Mollified> {
    if rho.dim() != inner.dim() {
        return Err(Error::invalid("mollifier and functional dimensions differ"));
    }
    let nodes = rho.nodes(mc_nodes)?;
    let mut meta = inner.meta().clone();
    meta.name = format!("mollified(n={},nodes={})[{}]", rho.index(), mc_nodes, meta.name);
    Ok(Mollified {
        inner,
        mollifier: rho.clone(),
        nodes,
        meta,
    })
}

/// `|u(μ) - u(ν) - ∫_0^1 ∫ δu/δm(tμ + (1-t)ν)(v) d(μ - ν)(v) dt|` with the
/// time integral by Gauss-Legendre and the space integral exact.
pub fn check_linear_derivative_identity(
    f: &dyn MeasureFunctional,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_quad: usize,
) -> Result<f64> {
    let rule = gauss_legendre(n_quad, 0.0, 1.0)?;
    let mut integral = 0.0;
    for (t, w) in rule {
        let bound = f.bind(&EmpiricalMeasure::mixture(t, mu, nu)?)?;
        let a = mu.integrate(|v| bound.lin_deriv(v));
        let b = nu.integrate(|v| bound.lin_deriv(v));
        integral += w * (a - b);
    }
    let lhs = f.value(mu)? - f.value(nu)?;
    Ok((lhs - integral).abs())
}

/// Central differences of `v -> δu/δm(μ)(v)`: gradient and row-major Hessian.
pub fn finite_difference_oracle(
    f: &dyn MeasureFunctional,
    mu: &EmpiricalMeasure,
    v: &[f64],
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let bound = f.bind(mu)?;
    Ok(fd_derivatives(|z| bound.lin_deriv(z), v, h))
}

pub(crate) fn fd_derivatives(
    f: impl Fn(&[f64]) -> f64,
    v: &[f64],
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let d = v.len();
    let mut p = v.to_vec();
    let mut grad = vec![0.0; d];
    for k in 0..d {
        p[k] = v[k] + h;
        let fp = f(&p);
        p[k] = v[k] - h;
        let fm = f(&p);
        p[k] = v[k];
        grad[k] = (fp - fm) / (2.0 * h);
    }
    let f0 = f(v);
    let mut hess = vec![0.0; d * d];
    for k in 0..d {
        for l in k..d {
            let value = if k == l {
                p[k] = v[k] + h;
                let fp = f(&p);
                p[k] = v[k] - h;
                let fm = f(&p);
                p[k] = v[k];
                (fp - 2.0 * f0 + fm) / (h * h)
            } else {
                let mut corner = |sk: f64, sl: f64| {
                    p[k] = v[k] + sk * h;
                    p[l] = v[l] + sl * h;
                    let r = f(&p);
                    p[k] = v[k];
                    p[l] = v[l];
                    r
                };
                (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                    / (4.0 * h * h)
            };
            hess[k * d + l] = value;
            hess[l * d + k] = value;
        }
    }
    (grad, hess)
}

/// `u(t, x, μ)` bound at a fixed `(t, μ)`.
pub trait BoundExtended: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn time_deriv(&self, x: &[f64]) -> f64;
    fn space_grad(&self, x: &[f64], out: &mut [f64]);
    fn space_hess(&self, x: &[f64], out: &mut [f64]);
    fn lin_deriv(&self, x: &[f64], v: &[f64]) -> f64;
    fn lin_deriv_grad(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    fn lin_deriv_hess(&self, x: &[f64], v: &[f64], out: &mut [f64]);
}

/// `u : [0, T] x R^d x P_2(R^d) -> R` with closed-form derivative data.
pub trait ExtendedFunctional: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn meta(&self) -> &Metadata;
    fn bind(&self, t: f64, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundExtended>>;
}

/// `u(x, μ) = ∫ g(x, y) dμ(y)`.
#[derive(Debug, Clone)]
pub struct Bilinear {
    dim: usize,
    g: Arc<dyn PairField>,
    meta: Metadata,
}

struct BilinearBound {
    g: Arc<dyn PairField>,
    mu: EmpiricalMeasure,
    /// Set when `g` is linear in `y`: integrals collapse onto the mean.
    mean: Option<Vec<f64>>,
}

impl BoundExtended for BilinearBound {
    fn value(&self, x: &[f64]) -> f64 {
        match &self.mean {
            Some(m) => self.g.value(x, m),
            None => self.mu.integrate(|y| self.g.value(x, y)),
        }
    }
    fn time_deriv(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn space_grad(&self, x: &[f64], out: &mut [f64]) {
        match &self.mean {
            Some(m) => self.g.grad_x(x, m, out),
            None => accumulate(&self.mu, out, |y, o| self.g.grad_x(x, y, o)),
        }
    }
    fn space_hess(&self, x: &[f64], out: &mut [f64]) {
        match &self.mean {
            Some(m) => self.g.hess_xx(x, m, out),
            None => accumulate(&self.mu, out, |y, o| self.g.hess_xx(x, y, o)),
        }
    }
    fn lin_deriv(&self, x: &[f64], v: &[f64]) -> f64 {
        self.g.value(x, v)
    }
    fn lin_deriv_grad(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.g.grad_y(x, v, out)
    }
    fn lin_deriv_hess(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.g.hess_yy(x, v, out)
    }
}

impl ExtendedFunctional for Bilinear {
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, _t: f64, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundExtended>> {
        check_dim(self.dim, mu)?;
        let mean = self.g.linear_in_y().then(|| mu.mean());
        Ok(Box::new(BilinearBound {
            g: self.g.clone(),
            mu: mu.clone(),
            mean,
        }))
    }
}

pub fn make_bilinear(dim: usize, g: Arc<dyn PairField>) -> Result<Bilinear> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let d = dim as f64;
    let mut meta = Metadata::new(format!("bilinear:g={}", g.id()), DistanceTag::Dk, g.sobolev())
        .growth(5.0 * d, 1.0)
        .degree(Some(0));
    meta.k2 = Some(5.0 * d);
    meta.alpha2 = Some(0.0);
    Ok(Bilinear { dim, g, meta })
}

/// `u(x, μ) = F(x, ∫ g dμ)`.
#[derive(Debug, Clone)]
pub struct Composite {
    dim: usize,
    outer: Arc<dyn OuterField>,
    g: Arc<dyn ScalarField>,
    meta: Metadata,
}

struct CompositeBound {
    outer: Arc<dyn OuterField>,
    g: Arc<dyn ScalarField>,
    y: f64,
}

impl BoundExtended for CompositeBound {
    fn value(&self, x: &[f64]) -> f64 {
        self.outer.value(x, self.y)
    }
    fn time_deriv(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn space_grad(&self, x: &[f64], out: &mut [f64]) {
        self.outer.grad_x(x, self.y, out)
    }
    fn space_hess(&self, x: &[f64], out: &mut [f64]) {
        self.outer.hess_x(x, self.y, out)
    }
    fn lin_deriv(&self, x: &[f64], v: &[f64]) -> f64 {
        self.g.value(v) * self.outer.d_y(x, self.y)
    }
    fn lin_deriv_grad(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.g.grad(v, out);
        let s = self.outer.d_y(x, self.y);
        out.iter_mut().for_each(|o| *o *= s);
    }
    fn lin_deriv_hess(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.g.hess(v, out);
        let s = self.outer.d_y(x, self.y);
        out.iter_mut().for_each(|o| *o *= s);
    }
}

impl ExtendedFunctional for Composite {
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, _t: f64, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundExtended>> {
        check_dim(self.dim, mu)?;
        let y = mu.integrate(|x| self.g.value(x));
        finite(y, &self.meta, "inner integral")?;
        Ok(Box::new(CompositeBound {
            outer: self.outer.clone(),
            g: self.g.clone(),
            y,
        }))
    }
}

pub fn make_composite(
    dim: usize,
    outer: Arc<dyn OuterField>,
    g: Arc<dyn ScalarField>,
) -> Result<Composite> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let degree = outer.y_degree().map(|p| p.saturating_sub(1));
    let meta = Metadata::new(
        format!("composite:F={},g={}", outer.id(), g.id()),
        DistanceTag::W2,
        g.bounded(),
    )
    .degree(degree);
    Ok(Composite {
        dim,
        outer,
        g,
        meta,
    })
}

/// A measure functional viewed as `u(t, x, μ) = u(μ)`.
#[derive(Debug, Clone)]
pub struct Lifted {
    inner: Arc<dyn MeasureFunctional>,
    meta: Metadata,
}

struct LiftedBound {
    inner: Box<dyn BoundFunctional>,
}

impl BoundExtended for LiftedBound {
    fn value(&self, _x: &[f64]) -> f64 {
        self.inner.value()
    }
    fn time_deriv(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn space_grad(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn space_hess(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn lin_deriv(&self, _x: &[f64], v: &[f64]) -> f64 {
        self.inner.lin_deriv(v)
    }
    fn lin_deriv_grad(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner.lin_deriv_grad(v, out)
    }
    fn lin_deriv_hess(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner.lin_deriv_hess(v, out)
    }
}

impl ExtendedFunctional for Lifted {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, _t: f64, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundExtended>> {
        Ok(Box::new(LiftedBound {
            inner: self.inner.bind(mu)?,
        }))
    }
}

pub fn lift(inner: Arc<dyn MeasureFunctional>) -> Lifted {
    let mut meta = inner.meta().clone();
    meta.name = format!("lift:{}", meta.name);
    Lifted { inner, meta }
}

/// `u(t, x, μ) = h(x)`.
#[derive(Debug, Clone)]
pub struct SpaceOnly {
    dim: usize,
    h: Arc<dyn ScalarField>,
    meta: Metadata,
}

struct SpaceOnlyBound {
    h: Arc<dyn ScalarField>,
}

impl BoundExtended for SpaceOnlyBound {
    fn value(&self, x: &[f64]) -> f64 {
        self.h.value(x)
    }
    fn time_deriv(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn space_grad(&self, x: &[f64], out: &mut [f64]) {
        self.h.grad(x, out)
    }
    fn space_hess(&self, x: &[f64], out: &mut [f64]) {
        self.h.hess(x, out)
    }
    fn lin_deriv(&self, _x: &[f64], _v: &[f64]) -> f64 {
        0.0
    }
    fn lin_deriv_grad(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn lin_deriv_hess(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

impl ExtendedFunctional for SpaceOnly {
    fn dim(&self) -> usize {
        self.dim
    }
    fn meta(&self) -> &Metadata {
        &self.meta
    }
    fn bind(&self, _t: f64, mu: &EmpiricalMeasure) -> Result<Box<dyn BoundExtended>> {
        check_dim(self.dim, mu)?;
        Ok(Box::new(SpaceOnlyBound { h: self.h.clone() }))
    }
}

pub fn space_only(dim: usize, h: Arc<dyn ScalarField>) -> Result<SpaceOnly> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let meta = Metadata::new(format!("space:h={}", h.id()), DistanceTag::W2, h.bounded())
        .degree(Some(0));
    Ok(SpaceOnly { dim, h, meta })
}

/// Extended analogue of [`check_linear_derivative_identity`] at fixed `(t, x)`.
pub fn check_extended_linear_derivative_identity(
    f: &dyn ExtendedFunctional,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_quad: usize,
) -> Result<f64> {
    let rule = gauss_legendre(n_quad, 0.0, 1.0)?;
    let mut integral = 0.0;
    for (s, w) in rule {
        let bound = f.bind(t, &EmpiricalMeasure::mixture(s, mu, nu)?)?;
        let a = mu.integrate(|v| bound.lin_deriv(x, v));
        let b = nu.integrate(|v| bound.lin_deriv(x, v));
        integral += w * (a - b);
    }
    let lhs = f.bind(t, mu)?.value(x) - f.bind(t, nu)?.value(x);
    Ok((lhs - integral).abs())
}

/// Central differences of `v -> δu/δm(t, x, μ)(v)`.
pub fn extended_finite_difference_oracle(
    f: &dyn ExtendedFunctional,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    v: &[f64],
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let bound = f.bind(t, mu)?;
    Ok(fd_derivatives(|z| bound.lin_deriv(x, z), v, h))
}

fn parse_params<'a>(
    id: &str,
    rest: &'a str,
    allowed: &[&str],
) -> Result<BTreeMap<&'a str, &'a str>> {
    let mut out = BTreeMap::new();
    if rest.is_empty() {
        return Ok(out);
    }
    for part in rest.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("'{id}': parameter '{part}' is not key=value")))?;
        if !allowed.contains(&k) {
            return Err(Error::invalid(format!("'{id}': unknown parameter '{k}'")));
        }
        if out.insert(k, v).is_some() {
            return Err(Error::invalid(format!("'{id}': repeated parameter '{k}'")));
        }
    }
    Ok(out)
}

fn required<'a>(id: &str, params: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    params
        .get(key)
        .copied()
        .ok_or_else(|| Error::invalid(format!("'{id}': missing parameter '{key}'")))
}

/// Built-in measure functionals by id:
///
/// * `second_moment`, `mean_squared`
/// * `constant` or `constant:c=<real>` (default `c = 1`)
/// * `linear:g=<scalar field>`
/// * `quadratic:g=<pair field>`
/// * `convolution:f=<scalar field>`
///
/// Scalar fields: `sq`, `gauss`, `sin1`, `coord<k>`, `const<c>`.
/// Pair fields: `dot`, `gauss2`, `gauss_diff`.
pub fn measure_functional(id: &str, dim: usize) -> Result<Arc<dyn MeasureFunctional>> {
    let (head, rest) = id.split_once(':').unwrap_or((id, ""));
    let f: Arc<dyn MeasureFunctional> = match head {
        "second_moment" if rest.is_empty() => Arc::new(second_moment(dim)?),
        "mean_squared" if rest.is_empty() => Arc::new(mean_squared(dim)?),
        "constant" => {
            let p = parse_params(id, rest, &["c"])?;
            let c = match p.get("c") {
                Some(c) => c
                    .parse()
                    .map_err(|_| Error::invalid(format!("'{id}': c must be a real")))?,
                None => 1.0,
            };
            Arc::new(constant(dim, c)?)
        }
        "linear" => {
            let p = parse_params(id, rest, &["g"])?;
            Arc::new(make_linear(dim, scalar_field(required(id, &p, "g")?, dim)?)?)
        }
        "quadratic" => {
            let p = parse_params(id, rest, &["g"])?;
            Arc::new(make_quadratic(dim, pair_field(required(id, &p, "g")?)?)?)
        }
        "convolution" => {
            let p = parse_params(id, rest, &["f"])?;
            Arc::new(make_convolution(dim, scalar_field(required(id, &p, "f")?, dim)?)?)
        }
        _ => return Err(Error::invalid(format!("unknown functional '{id}'"))),
    };
    Ok(f)
}

/// Built-in extended functionals by id:
///
/// * `bilinear:g=<pair field>`
/// * `composite:F=<outer>,g=<scalar field>` with outer one of `y`, `y2`,
///   `x1_plus_y`, `x1_times_y`, `sin_y`
/// * `space:h=<scalar field>`
/// * `lift:<measure functional id>`
pub fn extended_functional(id: &str, dim: usize) -> Result<Arc<dyn ExtendedFunctional>> {
    if let Some(inner) = id.strip_prefix("lift:") {
        return Ok(Arc::new(lift(measure_functional(inner, dim)?)));
    }
    let (head, rest) = id.split_once(':').unwrap_or((id, ""));
    let f: Arc<dyn ExtendedFunctional> = match head {
        "bilinear" => {
            let p = parse_params(id, rest, &["g"])?;
            Arc::new(make_bilinear(dim, pair_field(required(id, &p, "g")?)?)?)
        }
        "composite" => {
            let p = parse_params(id, rest, &["F", "g"])?;
            Arc::new(make_composite(
                dim,
                Arc::new(outer_field(required(id, &p, "F")?)?),
                scalar_field(required(id, &p, "g")?, dim)?,
            )?)
        }
        "space" => {
            let p = parse_params(id, rest, &["h"])?;
            Arc::new(space_only(dim, scalar_field(required(id, &p, "h")?, dim)?)?)
        }
        _ => return Err(Error::invalid(format!("unknown extended functional '{id}'"))),
    };
    Ok(f)
}

/// Every measure-functional id the registry accepts for a given dimension,
/// with one representative per parameter choice.
pub fn builtin_measure_ids() -> Vec<&'static str> {
    vec![
        "second_moment",
        "mean_squared",
        "constant",
        "linear:g=gauss",
        "linear:g=sin1",
        "quadratic:g=dot",
        "quadratic:g=gauss2",
        "quadratic:g=gauss_diff",
        "convolution:f=gauss",
    ]
}

pub fn builtin_extended_ids() -> Vec<&'static str> {
    vec![
        "bilinear:g=dot",
        "bilinear:g=gauss2",
        "bilinear:g=gauss_diff",
        "composite:F=y,g=gauss",
        "composite:F=y2,g=sin1",
        "composite:F=x1_plus_y,g=coord1",
        "composite:F=x1_times_y,g=gauss",
        "composite:F=sin_y,g=gauss",
        "space:h=sq",
        "lift:quadratic:g=gauss2",
    ]
}
