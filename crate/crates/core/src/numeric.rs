//! Small numerical kernels shared across modules: compensated sums,
//! Gauss-Legendre rules, log-log slope fits, matrix scalar products.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

/// Neumaier-compensated accumulator. Sums of ensemble statistics go
/// through this so that tolerances in tests are not eaten by round-off.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Folds another accumulator in (used to combine per-chunk partials).
    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.carry);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Gauss-Legendre nodes and weights mapped to `[a, b]`, returned in
/// increasing node order. The rule is symmetrized about the midpoint so
/// odd moments of a symmetric weight vanish to round-off.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<Vec<(f64, f64)>> {
    let degree = NonZeroUsize::new(n)
        .ok_or_else(|| Error::invalid("Gauss-Legendre rule needs at least one node"))?;
    let rule = GaussLegendre::new(degree);
    let mut pairs: Vec<(f64, f64)> = rule.iter().map(|&(x, w)| (x, w)).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    for k in 0..n / 2 {
        let x = 0.5 * (pairs[n - 1 - k].0 - pairs[k].0);
        let w = 0.5 * (pairs[n - 1 - k].1 + pairs[k].1);
        pairs[k] = (-x, w);
        pairs[n - 1 - k] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    Ok(pairs
        .into_iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .collect())
}

/// Adaptive double-exponential quadrature on `[a, b]`; tolerates
/// integrable endpoint singularities.
pub fn integrate_de<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    let out = quadrature::double_exponential::integrate(f, a, b, abs_tol);
    if !out.integral.is_finite() {
        return Err(Error::numeric("double-exponential quadrature", "non-finite integral"));
    }
    if out.error_estimate > 1e3 * abs_tol.max(f64::EPSILON) {
        return Err(Error::numeric(
            "double-exponential quadrature",
            format!("error estimate {:e} above tolerance {:e}", out.error_estimate, abs_tol),
        ));
    }
    Ok(out.integral)
}

/// Ordinary least-squares fit `y = intercept + slope * x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("linear fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = compensated_sum(xs.iter().copied()) / n;
    let my = compensated_sum(ys.iter().copied()) / n;
    let sxx = compensated_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let sxy = compensated_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    if sxx <= 0.0 {
        return Err(Error::invalid("linear fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    Ok((my - slope * mx, slope))
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("log-log fit needs strictly positive data"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Ok(linear_fit(&lx, &ly)?.1)
}

/// `A · B = Tr(A^T B)` for row-major square matrices of equal size.
#[inline]
pub fn frobenius_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `a = σ σ^T` for `σ` row-major `d x d1`; `out` is row-major `d x d`.
pub fn outer_self(sigma: &[f64], d: usize, d1: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d1 {
                s += sigma[i * d1 + k] * sigma[j * d1 + k];
            }
            out[i * d + j] = s;
        }
    }
}

/// `out = σ w` for `σ` row-major `d x d1`.
#[inline]
pub fn mat_vec(sigma: &[f64], w: &[f64], d: usize, d1: usize, out: &mut [f64]) {
    for i in 0..d {
        let row = &sigma[i * d1..(i + 1) * d1];
        out[i] = dot(row, w);
    }
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::new();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 1000.0);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let rule = gauss_legendre(3, 0.0, 2.0).unwrap();
        let q: f64 = rule.iter().map(|(x, w)| w * x.powi(5)).sum();
        assert!((q - 64.0 / 6.0).abs() < 1e-12);
        let sym = gauss_legendre(4, -1.0, 1.0).unwrap();
        assert_eq!(sym[0].0, -sym[3].0);
        assert_eq!(sym[1].1, sym[2].1);
    }

    #[test]
    fn gauss_legendre_rejects_zero_nodes() {
        assert!(gauss_legendre(0, 0.0, 1.0).is_err());
    }

    #[test]
    fn de_quadrature_smooth_and_flat_integrands() {
        let v = integrate_de(f64::exp, 0.0, 1.0, 1e-14).unwrap();
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
        // bump profile with all derivatives vanishing at the ends
        let v = integrate_de(|s| (-1.0 / (1.0 - s * s)).exp(), -1.0, 1.0, 1e-15).unwrap();
        assert!((v - 0.443_993_816_168_079_4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-12);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
    }
}
