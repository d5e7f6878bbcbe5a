//! Empirical measures, mollification and the two distances used on
//! measures with densities: exact `W₂` and the `L^{k'}` density distance.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, gauss_legendre, integrate_de, norm_sq, unit_ball_volume};
use crate::rng::Stream;
use crate::transport::{solve_assignment, solve_transport};

/// Largest ensemble handed to the dense assignment / transport solver when `d >= 2`.
pub const ASSIGNMENT_CAP: usize = 512;
/// Largest ensemble for the one-dimensional quantile coupling.
pub const QUANTILE_CAP: usize = 100_000;
/// Largest number of atoms a finite convolution or node expansion may produce.
pub const CONVOLUTION_ATOM_CAP: usize = 1_000_000;

const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Weighted particle cloud `Σ_j w_j δ_{x_j}` on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Equal weights on the given atoms (row-major `N x d`).
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::invalid("points must be a nonempty N x d array"));
        }
        let n = points.len() / dim;
        Self::weighted(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() != weights.len() * dim {
            return Err(Error::invalid("points must be N x d with N weights"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("atoms must be finite"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("weights must be nonnegative"));
        }
        let total = compensated_sum(weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(EmpiricalMeasure { dim, points, weights })
    }

    /// Rescales nonnegative masses to a probability vector.
    pub fn normalized(dim: usize, points: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let total = compensated_sum(masses.iter().copied());
        if !(total > 0.0) {
            return Err(Error::invalid("total mass must be positive"));
        }
        let weights = masses.into_iter().map(|m| m / total).collect();
        Self::weighted(dim, points, weights)
    }

    pub fn point_mass(x: &[f64]) -> Result<Self> {
        Self::uniform(x.len(), x.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points.chunks(self.dim).zip(self.weights.iter().copied())
    }

    /// `∫ f dμ`, compensated.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        compensated_sum(self.atoms().map(|(x, w)| w * f(x)))
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|k| self.integrate(|x| x[k]))
            .collect()
    }

    /// `t μ + (1 - t) ν` as a single atom list.
    pub fn mixture(t: f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Self> {
        if mu.dim != nu.dim {
            return Err(Error::invalid("mixture of measures with different dimensions"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("mixture parameter must lie in [0, 1]"));
        }
        let mut points = mu.points.clone();
        points.extend_from_slice(&nu.points);
        let mut weights: Vec<f64> = mu.weights.iter().map(|w| t * w).collect();
        weights.extend(nu.weights.iter().map(|w| (1.0 - t) * w));
        Self::normalized(mu.dim, points, weights)
    }

    /// Exact convolution `μ ⋆ m`: all pairwise sums of atoms with product weights.
    pub fn convolve(&self, other: &EmpiricalMeasure) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::invalid("convolution of measures with different dimensions"));
        }
        let count = self.len() * other.len();
        if count > CONVOLUTION_ATOM_CAP {
            return Err(Error::CapacityExceeded {
                what: "finite convolution atoms",
                requested: count,
                cap: CONVOLUTION_ATOM_CAP,
            });
        }
        let d = self.dim;
        let mut points = Vec::with_capacity(count * d);
        let mut weights = Vec::with_capacity(count);
        for (x, w) in self.atoms() {
            for (y, v) in other.atoms() {
                points.extend(x.iter().zip(y).map(|(a, b)| a + b));
                weights.push(w * v);
            }
        }
        Self::normalized(d, points, weights)
    }

    /// Each atom replaced by the atom shifted by every node, weights multiplied.
    pub fn expand_with_nodes(&self, nodes: &NodeSet) -> Result<Self> {
        if nodes.dim != self.dim {
            return Err(Error::invalid("node set dimension mismatch"));
        }
        let count = self.len() * nodes.len();
        if count > CONVOLUTION_ATOM_CAP {
            return Err(Error::CapacityExceeded {
                what: "mollifier node expansion atoms",
                requested: count,
                cap: CONVOLUTION_ATOM_CAP,
            });
        }
        let d = self.dim;
        let mut points = Vec::with_capacity(count * d);
        let mut weights = Vec::with_capacity(count);
        for (x, w) in self.atoms() {
            for (z, v) in nodes.iter() {
                points.extend(x.iter().zip(z).map(|(a, b)| a + b));
                weights.push(w * v);
            }
        }
        Self::normalized(d, points, weights)
    }

    fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-15 * w0.max(1e-300))
    }
}

/// Exact 2-Wasserstein distance between two empirical measures.
///
/// `d = 1` uses the sorted quantile coupling for any weights; `d >= 2`
/// solves an assignment problem when both measures are uniform with the
/// same number of atoms and a min-cost transport otherwise.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(Error::invalid(format!(
            "W2 between dimensions {} and {}",
            mu.dim, nu.dim
        )));
    }
    let cost = if mu.dim == 1 {
        let n = mu.len().max(nu.len());
        if n > QUANTILE_CAP {
            return Err(Error::CapacityExceeded {
                what: "one-dimensional W2 atoms",
                requested: n,
                cap: QUANTILE_CAP,
            });
        }
        quantile_cost(mu, nu)
    } else {
        let n = mu.len().max(nu.len());
        if n > ASSIGNMENT_CAP {
            return Err(Error::CapacityExceeded {
                what: "exact W2 solver atoms",
                requested: n,
                cap: ASSIGNMENT_CAP,
            });
        }
        let rows = mu.len();
        let cols = nu.len();
        let mut cost = Vec::with_capacity(rows * cols);
        for x in mu.points.chunks(mu.dim) {
            for y in nu.points.chunks(nu.dim) {
                cost.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            }
        }
        if rows == cols && mu.is_uniform() && nu.is_uniform() {
            solve_assignment(&cost, rows)?.1 / rows as f64
        } else {
            solve_transport(&mu.weights, &nu.weights, &cost)?
        }
    };
    Ok(cost.max(0.0).sqrt())
}

fn quantile_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let sorted = |m: &EmpiricalMeasure| {
        let mut v: Vec<(f64, f64)> = m.points.iter().copied().zip(m.weights.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let a = sorted(mu);
    let b = sorted(nu);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = crate::numeric::CompensatedSum::new();
    while i < a.len() && j < b.len() {
        let mass = ra.min(rb);
        let gap = a[i].0 - b[j].0;
        total.add(mass * gap * gap);
        ra -= mass;
        rb -= mass;
        // the smaller residue is now exactly zero
        if ra == 0.0 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb == 0.0 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    total.value()
}

/// Tensor quadrature nodes carrying a probability vector (a discrete
/// stand-in for a density).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    dim: usize,
    offsets: Vec<f64>,
    weights: Vec<f64>,
}

impl NodeSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.offsets.chunks(self.dim).zip(self.weights.iter().copied())
    }

    /// The node set viewed as a measure centred at the origin.
    pub fn as_measure(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::normalized(self.dim, self.offsets.clone(), self.weights.clone())
    }
}

/// `ρ_n(x) = c_n exp(-1 / (1 - |n x|²))` on `|x| < 1/n`, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Mollifier {
    index: usize,
    dim: usize,
    normalization: f64,
}

impl Mollifier {
    pub fn new(index: usize, dim: usize) -> Result<Self> {
        if index == 0 || dim == 0 {
            return Err(Error::invalid("mollifier needs n >= 1 and d >= 1"));
        }
        // ∫ρ = c |S^{d-1}| n^{-d} ∫_0^1 s^{d-1} e^{-1/(1-s²)} ds
        let radial = integrate_de(
            |s| {
                if s >= 1.0 {
                    0.0
                } else {
                    s.powi(dim as i32 - 1) * (-1.0 / (1.0 - s * s)).exp()
                }
            },
            0.0,
            1.0,
            1e-15,
        )?;
        let sphere = dim as f64 * unit_ball_volume(dim);
        let mass = sphere * radial / (index as f64).powi(dim as i32);
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::numeric("mollifier normalization", format!("mass {mass}")));
        }
        Ok(Mollifier {
            index,
            dim,
            normalization: 1.0 / mass,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        1.0 / self.index as f64
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.index as f64;
        let r2 = norm_sq(x) * n * n;
        if r2 >= 1.0 {
            0.0
        } else {
            self.normalization * (-1.0 / (1.0 - r2)).exp()
        }
    }

    /// Draws from `ρ_n` by rejection from the uniform law on the ball.
    pub fn sample(&self, stream: &mut Stream, out: &mut [f64]) {
        let r = self.radius();
        loop {
            for o in out.iter_mut() {
                *o = 2.0 * stream.uniform() - 1.0;
            }
            let s2 = norm_sq(out);
            if s2 >= 1.0 {
                continue;
            }
            // Envelope: the profile peaks at e^{-1} in the centre.
            let accept = (1.0 - 1.0 / (1.0 - s2)).exp();
            if stream.uniform() < accept {
                out.iter_mut().for_each(|o| *o *= r);
                return;
            }
        }
    }

    /// Tensor Gauss-Legendre nodes on `[-1/n, 1/n]^d` (`per_axis` per
    /// axis) weighted by `ρ_n`, zero-weight corners dropped, weights
    /// normalized to one. The set is symmetric under `z -> -z`.
    pub fn nodes(&self, per_axis: usize) -> Result<NodeSet> {
        if per_axis == 0 {
            return Err(Error::invalid("mollifier node count must be positive"));
        }
        let r = self.radius();
        let rule = gauss_legendre(per_axis, -r, r)?;
        let d = self.dim;
        let total = per_axis.pow(d as u32);
        let mut offsets = Vec::new();
        let mut masses = Vec::new();
        let mut z = vec![0.0; d];
        for flat in 0..total {
            let mut rem = flat;
            let mut w = 1.0;
            for zk in z.iter_mut() {
                let (x, wx) = rule[rem % per_axis];
                rem /= per_axis;
                *zk = x;
                w *= wx;
            }
            let mass = w * self.eval(&z);
            if mass > 0.0 {
                offsets.extend_from_slice(&z);
                masses.push(mass);
            }
        }
        if masses.is_empty() {
            return Err(Error::numeric("mollifier nodes", "no node inside the support"));
        }
        let sum = compensated_sum(masses.iter().copied());
        Ok(NodeSet {
            dim: d,
            offsets,
            weights: masses.into_iter().map(|m| m / sum).collect(),
        })
    }
}

/// `μ ⋆ ρ_n`, represented by its atoms and the mollifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifiedMeasure {
    base: EmpiricalMeasure,
    mollifier: Mollifier,
}

pub fn mollify(mu: &EmpiricalMeasure, rho: &Mollifier) -> Result<MollifiedMeasure> {
    if mu.dim() != rho.dim() {
        return Err(Error::invalid("measure and mollifier dimensions differ"));
    }
    Ok(MollifiedMeasure {
        base: mu.clone(),
        mollifier: rho.clone(),
    })
}

impl MollifiedMeasure {
    pub fn base(&self) -> &EmpiricalMeasure {
        &self.base
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    /// `Σ_j w_j ρ_n(x - x_j)`.
    pub fn density(&self, x: &[f64]) -> f64 {
        let mut diff = vec![0.0; self.dim()];
        let mut acc = 0.0;
        for (y, w) in self.base.atoms() {
            for k in 0..diff.len() {
                diff[k] = x[k] - y[k];
            }
            acc += w * self.mollifier.eval(&diff);
        }
        acc
    }

    /// One draw: atom `j` with probability `w_j`, plus an independent
    /// `ρ_n` perturbation. Returns the atom index.
    pub fn sample(&self, stream: &mut Stream, out: &mut [f64]) -> usize {
        let u = stream.uniform();
        let mut acc = 0.0;
        let mut j = self.base.len() - 1;
        for (k, w) in self.base.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = k;
                break;
            }
        }
        self.mollifier.sample(stream, out);
        for (o, x) in out.iter_mut().zip(self.base.point(j)) {
            *o += x;
        }
        j
    }

    /// Deterministic discretization of `μ ⋆ ρ_n` through mollifier nodes.
    pub fn node_expansion(&self, per_axis: usize) -> Result<EmpiricalMeasure> {
        self.base.expand_with_nodes(&self.mollifier.nodes(per_axis)?)
    }
}

/// `‖ d(μ⋆ρ_n)/dx ‖_{L^q}` by adaptive tensor quadrature over the atom balls.
pub fn density_norm(m: &MollifiedMeasure, q: f64) -> Result<f64> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::invalid(format!("exponent must be finite and >= 1, got {q}")));
    }
    let integral = support_integral(&[m], |dens| dens[0].abs().powf(q))?;
    Ok(integral.powf(1.0 / q))
}

/// `d_k(μ, ν) = ‖dμ/dx - dν/dx‖_{L^{k'}}` with `1/k + 1/k' = 1`.
pub fn dk_distance(mu: &MollifiedMeasure, nu: &MollifiedMeasure, k: f64) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("d_k between measures of different dimensions"));
    }
    let d = mu.dim() as f64;
    if !(k >= d + 1.0) || !k.is_finite() {
        return Err(Error::invalid(format!("d_k needs finite k >= d + 1, got {k}")));
    }
    let kp = conjugate_exponent(k);
    let integral = support_integral(&[mu, nu], |dens| (dens[0] - dens[1]).abs().powf(kp))?;
    Ok(integral.powf(1.0 / kp))
}

/// `p' = p / (p - 1)`.
pub fn conjugate_exponent(p: f64) -> f64 {
    p / (p - 1.0)
}

const QUAD_ORDER: usize = 6;
const QUAD_REL_TOL: f64 = 1e-9;

/// Adaptive integral of `g(densities)` over the union of atom balls. The
/// union is covered by axis-aligned cells of side equal to the smallest
/// mollifier radius; every cell is refined uniformly until two successive
/// levels agree.
fn support_integral<G>(measures: &[&MollifiedMeasure], g: G) -> Result<f64>
where
    G: Fn(&[f64]) -> f64,
{
    let d = measures[0].dim();
    let h = measures
        .iter()
        .map(|m| m.mollifier.radius())
        .fold(f64::INFINITY, f64::min);
    // cell -> per-measure candidate atoms
    let mut cells: BTreeMap<Vec<i64>, Vec<Vec<usize>>> = BTreeMap::new();
    for (mi, m) in measures.iter().enumerate() {
        let r = m.mollifier.radius();
        for (j, (x, w)) in m.base.atoms().enumerate() {
            if w == 0.0 {
                continue;
            }
            let lo: Vec<i64> = x.iter().map(|c| ((c - r) / h).floor() as i64).collect();
            let hi: Vec<i64> = x.iter().map(|c| ((c + r) / h).floor() as i64).collect();
            let mut idx = lo.clone();
            loop {
                let entry = cells
                    .entry(idx.clone())
                    .or_insert_with(|| vec![Vec::new(); measures.len()]);
                entry[mi].push(j);
                let mut k = 0;
                loop {
                    if k == d {
                        break;
                    }
                    idx[k] += 1;
                    if idx[k] <= hi[k] {
                        break;
                    }
                    idx[k] = lo[k];
                    k += 1;
                }
                if k == d {
                    break;
                }
            }
        }
    }
    let max_level = match d {
        1 => 12,
        2 => 6,
        _ => 3,
    };
    let mut previous: Option<f64> = None;
    for level in 0..=max_level {
        let split = 1usize << level;
        let sub = h / split as f64;
        let rule = gauss_legendre(QUAD_ORDER, 0.0, sub)?;
        let mut total = crate::numeric::CompensatedSum::new();
        let mut x = vec![0.0; d];
        let mut dens = vec![0.0; measures.len()];
        let mut diff = vec![0.0; d];
        let pts_per_cell = (split * QUAD_ORDER).pow(d as u32);
        for (key, cands) in &cells {
            for flat in 0..pts_per_cell {
                let mut rem = flat;
                let mut weight = 1.0;
                for k in 0..d {
                    let pos = rem % (split * QUAD_ORDER);
                    rem /= split * QUAD_ORDER;
                    let (node, w) = rule[pos % QUAD_ORDER];
                    x[k] = key[k] as f64 * h + (pos / QUAD_ORDER) as f64 * sub + node;
                    weight *= w;
                }
                for (mi, m) in measures.iter().enumerate() {
                    let mut acc = 0.0;
                    for &j in &cands[mi] {
                        let y = m.base.point(j);
                        for k in 0..d {
                            diff[k] = x[k] - y[k];
                        }
                        acc += m.base.weights[j] * m.mollifier.eval(&diff);
                    }
                    dens[mi] = acc;
                }
                total.add(weight * g(&dens));
            }
        }
        let value = total.value();
        if !value.is_finite() {
            return Err(Error::numeric("support quadrature", "non-finite integral"));
        }
        if let Some(prev) = previous {
            if (value - prev).abs() <= QUAD_REL_TOL * value.abs().max(1e-300) || value == 0.0 && prev == 0.0 {
                return Ok(value);
            }
        }
        previous = Some(value);
    }
    Err(Error::numeric(
        "support quadrature",
        format!("no convergence after {max_level} refinements"),
    ))
}

/// Cells of a cover, exposed for diagnostics that want to reuse the grid.
pub fn support_cells(m: &MollifiedMeasure) -> BTreeSet<Vec<i64>> {
    let h = m.mollifier.radius();
    let mut out = BTreeSet::new();
    for (x, _) in m.base.atoms() {
        out.insert(x.iter().map(|c| (c / h).floor() as i64).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn random_measure(s: &mut Stream, n: usize, d: usize, uniform: bool) -> EmpiricalMeasure {
        let pts: Vec<f64> = (0..n * d).map(|_| 4.0 * s.uniform() - 2.0).collect();
        if uniform {
            EmpiricalMeasure::uniform(d, pts).unwrap()
        } else {
            let m: Vec<f64> = (0..n).map(|_| 0.1 + s.uniform()).collect();
            EmpiricalMeasure::normalized(d, pts, m).unwrap()
        }
    }

    #[test]
    fn weights_are_validated() {
        assert!(EmpiricalMeasure::weighted(1, vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(EmpiricalMeasure::weighted(1, vec![0.0, 1.0], vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::uniform(2, vec![0.0, 1.0, 2.0]).is_err());
        assert!(EmpiricalMeasure::uniform(1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn mollifier_properties() {
        for d in 1..=3 {
            for n in [1, 4, 16] {
                let rho = Mollifier::new(n, d).unwrap();
                let r = rho.radius();
                // independent radial midpoint rule with hard-coded sphere areas
                let area = [2.0, 2.0 * std::f64::consts::PI, 4.0 * std::f64::consts::PI][d - 1];
                let steps = 200_000;
                let h = r / steps as f64;
                let mut total = 0.0;
                let mut z = vec![0.0; d];
                for i in 0..steps {
                    let s = (i as f64 + 0.5) * h;
                    z[0] = s;
                    total += area * s.powi(d as i32 - 1) * rho.eval(&z) * h;
                }
                assert!((total - 1.0).abs() < 1e-8, "d={d} n={n}: {total}");
                let mut edge = vec![0.0; d];
                edge[0] = r;
                assert_eq!(rho.eval(&edge), 0.0);
                edge[0] = 1.5 * r;
                assert_eq!(rho.eval(&edge), 0.0);
                let x: Vec<f64> = (0..d).map(|k| 0.3 * r / (k + 1) as f64).collect();
                let mx: Vec<f64> = x.iter().map(|v| -v).collect();
                assert_eq!(rho.eval(&x), rho.eval(&mx));
            }
        }
        assert!(Mollifier::new(0, 1).is_err());
    }

    #[test]
    fn mollifier_nodes_are_symmetric_probabilities() {
        let rho = Mollifier::new(8, 2).unwrap();
        let nodes = rho.nodes(6).unwrap();
        let total: f64 = nodes.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-14);
        let mean: Vec<f64> = (0..2)
            .map(|k| nodes.iter().map(|(z, w)| w * z[k]).sum::<f64>())
            .collect();
        assert!(mean.iter().all(|m| m.abs() < 1e-16));
        assert!(nodes.iter().all(|(z, _)| norm_sq(z).sqrt() < rho.radius()));
    }

    #[test]
    fn w2_closed_cases() {
        let a = EmpiricalMeasure::point_mass(&[0.0]).unwrap();
        let b = EmpiricalMeasure::point_mass(&[3.0]).unwrap();
        assert_eq!(wasserstein2(&a, &b).unwrap(), 3.0);
        let mu = EmpiricalMeasure::uniform(1, vec![0.0, 2.0]).unwrap();
        let nu = EmpiricalMeasure::uniform(1, vec![3.0, 1.0]).unwrap();
        assert!((wasserstein2(&mu, &nu).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein2(&mu, &mu).unwrap(), 0.0);
        let c = EmpiricalMeasure::point_mass(&[0.0, 0.0]).unwrap();
        assert!(matches!(wasserstein2(&a, &c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn w2_capacity() {
        let pts = vec![0.0; 2 * (ASSIGNMENT_CAP + 1)];
        let big = EmpiricalMeasure::uniform(2, pts).unwrap();
        assert!(matches!(
            wasserstein2(&big, &big),
            Err(Error::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn w2_one_dimensional_weights_match_transport() {
        let mut s = Stream::new(3, Purpose::Probe, 0);
        for _ in 0..30 {
            let n = 1 + s.below(7) as usize;
            let m = 1 + s.below(7) as usize;
            let mu = random_measure(&mut s, n, 1, false);
            let nu = random_measure(&mut s, m, 1, false);
            let cost: Vec<f64> = mu
                .points()
                .iter()
                .flat_map(|x| nu.points().iter().map(move |y| (x - y) * (x - y)))
                .collect();
            let exact = solve_transport(mu.weights(), nu.weights(), &cost).unwrap().sqrt();
            let w = wasserstein2(&mu, &nu).unwrap();
            assert!((w - exact).abs() < 1e-10, "{w} vs {exact}");
        }
    }

    #[test]
    fn w2_metric_axioms() {
        let mut s = Stream::new(4, Purpose::Probe, 0);
        for _ in 0..25 {
            let d = 1 + s.below(3) as usize;
            let n = 1 + s.below(6) as usize;
            let a = random_measure(&mut s, n, d, true);
            let b = random_measure(&mut s, n, d, true);
            let uni = s.uniform() < 0.5;
            let c = random_measure(&mut s, n, d, uni);
            let ab = wasserstein2(&a, &b).unwrap();
            assert!((ab - wasserstein2(&b, &a).unwrap()).abs() <= 1e-12 * ab.max(1.0));
            let ac = wasserstein2(&a, &c).unwrap();
            let cb = wasserstein2(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-9);
            assert!(wasserstein2(&a, &a).unwrap() < 1e-12);
        }
    }

    #[test]
    fn finite_convolution_caps() {
        let pts = vec![0.0; 1001];
        let m = EmpiricalMeasure::uniform(1, pts).unwrap();
        let big = EmpiricalMeasure::uniform(1, vec![0.0; 1000]).unwrap();
        assert!(matches!(m.convolve(&big), Err(Error::CapacityExceeded { .. })));
    }

    #[test]
    fn mollify_point_mass_density_is_the_bump() {
        let rho = Mollifier::new(4, 2).unwrap();
        let m = mollify(&EmpiricalMeasure::point_mass(&[0.0, 0.0]).unwrap(), &rho).unwrap();
        for x in [[0.0, 0.0], [0.1, -0.05], [0.2, 0.2]] {
            assert_eq!(m.density(&x), rho.eval(&x));
        }
        // far from every atom
        assert_eq!(m.density(&[1.0, 1.0]), 0.0);
    }

    #[test]
    fn mollified_samples_stay_within_radius() {
        let mut s = Stream::new(5, Purpose::Mollifier, 0);
        let mu = random_measure(&mut s, 6, 2, true);
        let rho = Mollifier::new(5, 2).unwrap();
        let m = mollify(&mu, &rho).unwrap();
        let mut out = [0.0; 2];
        let mut shifted = Vec::new();
        let mut matched = Vec::new();
        for _ in 0..12 {
            let j = m.sample(&mut s, &mut out);
            let gap: Vec<f64> = out.iter().zip(mu.point(j)).map(|(a, b)| a - b).collect();
            assert!(norm_sq(&gap).sqrt() < rho.radius());
            shifted.extend_from_slice(&out);
            matched.extend_from_slice(mu.point(j));
        }
        let a = EmpiricalMeasure::uniform(2, shifted).unwrap();
        let b = EmpiricalMeasure::uniform(2, matched).unwrap();
        assert!(wasserstein2(&a, &b).unwrap() <= rho.radius());
    }

    #[test]
    fn density_norm_of_probability_is_one() {
        let rho = Mollifier::new(3, 1).unwrap();
        let mu = EmpiricalMeasure::uniform(1, vec![0.0, 0.2, 1.5]).unwrap();
        let m = mollify(&mu, &rho).unwrap();
        assert!((density_norm(&m, 1.0).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn density_norm_point_mass_matches_direct_quadrature() {
        for d in [1usize, 2] {
            let rho = Mollifier::new(2, d).unwrap();
            let zero = vec![0.0; d];
            let m = mollify(&EmpiricalMeasure::point_mass(&zero).unwrap(), &rho).unwrap();
            let q = 2.5;
            // radial oracle: ‖ρ‖_q^q = |S^{d-1}| ∫_0^r s^{d-1} ρ(s)^q ds
            let r = rho.radius();
            let radial = integrate_de(
                |s| {
                    let mut x = vec![0.0; d];
                    x[0] = s;
                    s.powi(d as i32 - 1) * rho.eval(&x).powf(q)
                },
                0.0,
                r,
                1e-14,
            )
            .unwrap();
            let oracle = (d as f64 * unit_ball_volume(d) * radial).powf(1.0 / q);
            let got = density_norm(&m, q).unwrap();
            assert!((got - oracle).abs() <= 1e-6 * oracle, "d={d}: {got} vs {oracle}");
        }
    }

    #[test]
    fn density_norm_disjoint_atoms_add() {
        let rho = Mollifier::new(4, 1).unwrap();
        let q = 3.0;
        let single = mollify(&EmpiricalMeasure::point_mass(&[0.0]).unwrap(), &rho).unwrap();
        let two = mollify(&EmpiricalMeasure::uniform(1, vec![0.0, 0.6]).unwrap(), &rho).unwrap();
        let base = density_norm(&single, q).unwrap().powf(q);
        let expect = 2.0 * 0.5f64.powf(q) * base;
        let got = density_norm(&two, q).unwrap().powf(q);
        assert!((got - expect).abs() <= 1e-6 * expect);
    }

    #[test]
    fn dk_distance_cases() {
        let rho = Mollifier::new(4, 1).unwrap();
        let k = 3.0;
        let kp = conjugate_exponent(k);
        assert_eq!(1.0 / k + 1.0 / kp, 1.0);
        let a = mollify(&EmpiricalMeasure::point_mass(&[0.0]).unwrap(), &rho).unwrap();
        assert_eq!(dk_distance(&a, &a, k).unwrap(), 0.0);

        let b = mollify(&EmpiricalMeasure::point_mass(&[1.0]).unwrap(), &rho).unwrap();
        let na = density_norm(&a, kp).unwrap();
        let nb = density_norm(&b, kp).unwrap();
        let expect = (na.powf(kp) + nb.powf(kp)).powf(1.0 / kp);
        let got = dk_distance(&a, &b, k).unwrap();
        assert!((got - expect).abs() <= 1e-6 * expect);

        // overlapping translate against a fine midpoint-rule oracle
        let shift = 0.1;
        let c = mollify(&EmpiricalMeasure::point_mass(&[shift]).unwrap(), &rho).unwrap();
        let got = dk_distance(&a, &c, k).unwrap();
        let (lo, hi) = (-0.25, 0.35);
        let steps = 2_000_000;
        let h = (hi - lo) / steps as f64;
        let mut acc = 0.0;
        for i in 0..steps {
            let x = lo + (i as f64 + 0.5) * h;
            acc += (rho.eval(&[x]) - rho.eval(&[x - shift])).abs().powf(kp) * h;
        }
        let oracle = acc.powf(1.0 / kp);
        assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");

        assert!(dk_distance(&a, &c, 1.5).is_err());
    }
}
