//! Smooth test fields with closed-form first and second derivatives.
//!
//! Matrices are written row-major into caller-supplied buffers of length
//! `d * d`; gradients into buffers of length `d`.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `g : R^d -> R`.
pub trait ScalarField: Send + Sync + Debug {
    fn id(&self) -> String;
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64], out: &mut [f64]);
    fn hess(&self, x: &[f64], out: &mut [f64]);
    /// Whether `g` is bounded with bounded derivatives up to order two.
    fn bounded(&self) -> bool;
    /// Whether `g` and its derivatives up to order two lie in every `L^k`.
    fn sobolev(&self) -> bool {
        false
    }
    /// Whether `g(-x) = g(x)`.
    fn even(&self) -> bool {
        false
    }
}

/// `g : R^d x R^d -> R`.
pub trait PairField: Send + Sync + Debug {
    fn id(&self) -> String;
    fn value(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_x(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn grad_y(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn hess_xx(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn hess_yy(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn symmetric(&self) -> bool;
    fn bounded(&self) -> bool;
    fn sobolev(&self) -> bool {
        false
    }
    /// Whether `y -> g(x, y)` is linear for every `x`, so that integrals
    /// in `y` reduce to evaluation at the mean.
    fn linear_in_y(&self) -> bool {
        false
    }
}

/// `F : R^d x R -> R`, the outer function of `F(x, ∫g dμ)`.
pub trait OuterField: Send + Sync + Debug {
    fn id(&self) -> String;
    fn value(&self, x: &[f64], y: f64) -> f64;
    fn grad_x(&self, x: &[f64], y: f64, out: &mut [f64]);
    fn hess_x(&self, x: &[f64], y: f64, out: &mut [f64]);
    fn d_y(&self, x: &[f64], y: f64) -> f64;
    /// Degree of `F` in `y` when polynomial.
    fn y_degree(&self) -> Option<usize>;
}

/// `g : [0, T] x R^d -> R`.
pub trait TimeField: Send + Sync + Debug {
    fn id(&self) -> String;
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn time_deriv(&self, t: f64, x: &[f64]) -> f64;
    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn hess(&self, t: f64, x: &[f64], out: &mut [f64]);
}

fn zero(out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
}

fn identity_scaled(out: &mut [f64], d: usize, s: f64) {
    zero(out);
    for k in 0..d {
        out[k * d + k] = s;
    }
}

/// `|x|²`.
#[derive(Debug, Clone, Copy)]
pub struct SquaredNorm;

impl ScalarField for SquaredNorm {
    fn id(&self) -> String {
        "sq".into()
    }
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = 2.0 * v;
        }
    }
    fn hess(&self, x: &[f64], out: &mut [f64]) {
        identity_scaled(out, x.len(), 2.0);
    }
    fn bounded(&self) -> bool {
        false
    }
    fn even(&self) -> bool {
        true
    }
}

/// `x_k` (zero-based index).
#[derive(Debug, Clone, Copy)]
pub struct Coordinate(pub usize);

impl ScalarField for Coordinate {
    fn id(&self) -> String {
        format!("coord{}", self.0 + 1)
    }
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0]
    }
    fn grad(&self, _x: &[f64], out: &mut [f64]) {
        zero(out);
        out[self.0] = 1.0;
    }
    fn hess(&self, _x: &[f64], out: &mut [f64]) {
        zero(out);
    }
    fn bounded(&self) -> bool {
        false
    }
}

/// `a·x + c`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl ScalarField for Affine {
    fn id(&self) -> String {
        "affine".into()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.offset + self.slope.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
    }
    fn grad(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.slope);
    }
    fn hess(&self, _x: &[f64], out: &mut [f64]) {
        zero(out);
    }
    fn bounded(&self) -> bool {
        false
    }
}

/// `exp(-|x|²)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianBump;

impl ScalarField for GaussianBump {
    fn id(&self) -> String {
        "gauss".into()
    }
    fn value(&self, x: &[f64]) -> f64 {
        (-SquaredNorm.value(x)).exp()
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let e = self.value(x);
        for (o, v) in out.iter_mut().zip(x) {
            *o = -2.0 * v * e;
        }
    }
    fn hess(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let e = self.value(x);
        for i in 0..d {
            for j in 0..d {
                let delta = if i == j { 1.0 } else { 0.0 };
                out[i * d + j] = (4.0 * x[i] * x[j] - 2.0 * delta) * e;
            }
        }
    }
    fn bounded(&self) -> bool {
        true
    }
    fn sobolev(&self) -> bool {
        true
    }
    fn even(&self) -> bool {
        true
    }
}

/// `sin(x_1)`.
#[derive(Debug, Clone, Copy)]
pub struct SineFirst;

impl ScalarField for SineFirst {
    fn id(&self) -> String {
        "sin1".into()
    }
    fn value(&self, x: &[f64]) -> f64 {
        x[0].sin()
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        zero(out);
        out[0] = x[0].cos();
    }
    fn hess(&self, x: &[f64], out: &mut [f64]) {
        zero(out);
        out[0] = -x[0].sin();
    }
    fn bounded(&self) -> bool {
        true
    }
}

/// A constant.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub f64);

impl ScalarField for ConstantField {
    fn id(&self) -> String {
        format!("const{}", self.0)
    }
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn grad(&self, _x: &[f64], out: &mut [f64]) {
        zero(out);
    }
    fn hess(&self, _x: &[f64], out: &mut [f64]) {
        zero(out);
    }
    fn bounded(&self) -> bool {
        true
    }
    fn even(&self) -> bool {
        true
    }
}

/// `x·y`.
#[derive(Debug, Clone, Copy)]
pub struct DotPair;

impl PairField for DotPair {
    fn id(&self) -> String {
        "dot".into()
    }
    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| a * b).sum()
    }
    fn grad_x(&self, _x: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
    fn grad_y(&self, x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn hess_xx(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        zero(out);
    }
    fn hess_yy(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        zero(out);
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn bounded(&self) -> bool {
        false
    }
    fn linear_in_y(&self) -> bool {
        true
    }
}

/// `exp(-|x|² - |y|²)`.
#[derive(Debug, Clone, Copy)]
pub struct ProductGaussian;

impl PairField for ProductGaussian {
    fn id(&self) -> String {
        "gauss2".into()
    }
    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        GaussianBump.value(x) * GaussianBump.value(y)
    }
    fn grad_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        GaussianBump.grad(x, out);
        let s = GaussianBump.value(y);
        out.iter_mut().for_each(|o| *o *= s);
    }
    fn grad_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.grad_x(y, x, out);
    }
    fn hess_xx(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        GaussianBump.hess(x, out);
        let s = GaussianBump.value(y);
        out.iter_mut().for_each(|o| *o *= s);
    }
    fn hess_yy(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.hess_xx(y, x, out);
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn bounded(&self) -> bool {
        true
    }
    fn sobolev(&self) -> bool {
        true
    }
}

/// `exp(-|x - y|²)`.
#[derive(Debug, Clone, Copy)]
pub struct DifferenceGaussian;

impl DifferenceGaussian {
    fn diff(x: &[f64], y: &[f64]) -> Vec<f64> {
        x.iter().zip(y).map(|(a, b)| a - b).collect()
    }
}

impl PairField for DifferenceGaussian {
    fn id(&self) -> String {
        "gauss_diff".into()
    }
    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        GaussianBump.value(&Self::diff(x, y))
    }
    fn grad_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        GaussianBump.grad(&Self::diff(x, y), out);
    }
    fn grad_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        GaussianBump.grad(&Self::diff(x, y), out);
        out.iter_mut().for_each(|o| *o = -*o);
    }
    fn hess_xx(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        GaussianBump.hess(&Self::diff(x, y), out);
    }
    fn hess_yy(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        GaussianBump.hess(&Self::diff(x, y), out);
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn bounded(&self) -> bool {
        true
    }
}

/// Outer functions `F(x, y)` for the composite functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outer {
    /// `y`
    Y,
    /// `y²`
    YSquared,
    /// `x_1 + y`
    FirstPlusY,
    /// `x_1 y`
    FirstTimesY,
    /// `sin(y)`
    SinY,
}

impl OuterField for Outer {
    fn id(&self) -> String {
        match self {
            Outer::Y => "y",
            Outer::YSquared => "y2",
            Outer::FirstPlusY => "x1_plus_y",
            Outer::FirstTimesY => "x1_times_y",
            Outer::SinY => "sin_y",
        }
        .into()
    }
    fn value(&self, x: &[f64], y: f64) -> f64 {
        match self {
            Outer::Y => y,
            Outer::YSquared => y * y,
            Outer::FirstPlusY => x[0] + y,
            Outer::FirstTimesY => x[0] * y,
            Outer::SinY => y.sin(),
        }
    }
    fn grad_x(&self, _x: &[f64], y: f64, out: &mut [f64]) {
        zero(out);
        match self {
            Outer::FirstPlusY => out[0] = 1.0,
            Outer::FirstTimesY => out[0] = y,
            _ => {}
        }
    }
    fn hess_x(&self, _x: &[f64], _y: f64, out: &mut [f64]) {
        zero(out);
    }
    fn d_y(&self, x: &[f64], y: f64) -> f64 {
        match self {
            Outer::Y | Outer::FirstPlusY => 1.0,
            Outer::YSquared => 2.0 * y,
            Outer::FirstTimesY => x[0],
            Outer::SinY => y.cos(),
        }
    }
    fn y_degree(&self) -> Option<usize> {
        match self {
            Outer::Y | Outer::FirstPlusY | Outer::FirstTimesY => Some(1),
            Outer::YSquared => Some(2),
            Outer::SinY => None,
        }
    }
}

/// Time-dependent fields for the time-linear functional `∫ g(t, x) dμ(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeProfile {
    /// `t`
    Time,
    /// `t x_1`
    TimeFirst,
    /// `|x|²`
    Squared,
    /// `exp(-t) |x|²`
    DecayingSquared,
    /// `cos(t) sin(x_1)`
    Wave,
}

impl TimeField for TimeProfile {
    fn id(&self) -> String {
        match self {
            TimeProfile::Time => "t",
            TimeProfile::TimeFirst => "t_x1",
            TimeProfile::Squared => "sq",
            TimeProfile::DecayingSquared => "decay_sq",
            TimeProfile::Wave => "wave",
        }
        .into()
    }
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            TimeProfile::Time => t,
            TimeProfile::TimeFirst => t * x[0],
            TimeProfile::Squared => SquaredNorm.value(x),
            TimeProfile::DecayingSquared => (-t).exp() * SquaredNorm.value(x),
            TimeProfile::Wave => t.cos() * x[0].sin(),
        }
    }
    fn time_deriv(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            TimeProfile::Time => 1.0,
            TimeProfile::TimeFirst => x[0],
            TimeProfile::Squared => 0.0,
            TimeProfile::DecayingSquared => -(-t).exp() * SquaredNorm.value(x),
            TimeProfile::Wave => -t.sin() * x[0].sin(),
        }
    }
    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        zero(out);
        match self {
            TimeProfile::Time => {}
            TimeProfile::TimeFirst => out[0] = t,
            TimeProfile::Squared => SquaredNorm.grad(x, out),
            TimeProfile::DecayingSquared => {
                SquaredNorm.grad(x, out);
                out.iter_mut().for_each(|o| *o *= (-t).exp());
            }
            TimeProfile::Wave => out[0] = t.cos() * x[0].cos(),
        }
    }
    fn hess(&self, t: f64, x: &[f64], out: &mut [f64]) {
        zero(out);
        let d = x.len();
        match self {
            TimeProfile::Time | TimeProfile::TimeFirst => {}
            TimeProfile::Squared => identity_scaled(out, d, 2.0),
            TimeProfile::DecayingSquared => identity_scaled(out, d, 2.0 * (-t).exp()),
            TimeProfile::Wave => out[0] = -t.cos() * x[0].sin(),
        }
    }
}

/// Looks up a scalar field by registry id: `sq`, `gauss`, `sin1`,
/// `coord<k>` (one-based), `const<c>`.
pub fn scalar_field(id: &str, dim: usize) -> Result<Arc<dyn ScalarField>> {
    let field: Arc<dyn ScalarField> = match id {
        "sq" => Arc::new(SquaredNorm),
        "gauss" => Arc::new(GaussianBump),
        "sin1" => Arc::new(SineFirst),
        _ => {
            if let Some(k) = id.strip_prefix("coord") {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad coordinate field '{id}'")))?;
                if k == 0 || k > dim {
                    return Err(Error::invalid(format!("coordinate {k} outside 1..={dim}")));
                }
                Arc::new(Coordinate(k - 1))
            } else if let Some(c) = id.strip_prefix("const") {
                let c: f64 = c
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad constant field '{id}'")))?;
                Arc::new(ConstantField(c))
            } else {
                return Err(Error::invalid(format!("unknown scalar field '{id}'")));
            }
        }
    };
    Ok(field)
}

/// Pair fields: `dot`, `gauss2`, `gauss_diff`.
pub fn pair_field(id: &str) -> Result<Arc<dyn PairField>> {
    match id {
        "dot" => Ok(Arc::new(DotPair)),
        "gauss2" => Ok(Arc::new(ProductGaussian)),
        "gauss_diff" => Ok(Arc::new(DifferenceGaussian)),
        _ => Err(Error::invalid(format!("unknown pair field '{id}'"))),
    }
}

pub fn outer_field(id: &str) -> Result<Outer> {
    [
        Outer::Y,
        Outer::YSquared,
        Outer::FirstPlusY,
        Outer::FirstTimesY,
        Outer::SinY,
    ]
    .into_iter()
    .find(|o| o.id() == id)
    .ok_or_else(|| Error::invalid(format!("unknown outer function '{id}'")))
}

pub fn time_field(id: &str) -> Result<TimeProfile> {
    [
        TimeProfile::Time,
        TimeProfile::TimeFirst,
        TimeProfile::Squared,
        TimeProfile::DecayingSquared,
        TimeProfile::Wave,
    ]
    .into_iter()
    .find(|o| o.id() == id)
    .ok_or_else(|| Error::invalid(format!("unknown time field '{id}'")))
}
