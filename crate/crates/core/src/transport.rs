//! Exact optimal transport solvers behind [`crate::measure::wasserstein2`].

use crate::error::{Error, Result};

/// Dense assignment (Jonker-Volgenant style shortest augmenting paths).
/// `cost` is row-major `n x n`; returns `assign[row] = col` and the total.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != n * n {
        return Err(Error::invalid("assignment cost matrix must be square"));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // 1-based potentials, column 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(r - 1) * n + (j - 1)] - u[r] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            if !delta.is_finite() {
                return Err(Error::numeric("assignment", "non-finite reduced cost"));
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((assign, total))
}

/// Exact discrete transport between weighted supports by successive
/// shortest paths with Johnson potentials. `cost` is row-major `n x m`.
/// Returns the minimal total cost.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<f64> {
    let n = supply.len();
    let m = demand.len();
    if cost.len() != n * m {
        return Err(Error::invalid("transport cost matrix has wrong shape"));
    }
    // Relative mass below this is treated as exhausted.
    let eps = 1e-15;
    let mut remaining_supply = supply.to_vec();
    let mut remaining_demand = demand.to_vec();
    let mut flow = vec![0.0f64; n * m];
    // Potentials for sources (0..n) and sinks (n..n+m). Costs are
    // nonnegative, so zero potentials are feasible initially.
    let mut pot = vec![0.0f64; n + m];
    let nodes = n + m;

    loop {
        let total_left: f64 = remaining_supply.iter().sum();
        if total_left <= eps {
            break;
        }
        // Dijkstra from all sources with remaining supply.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..n {
            if remaining_supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for k in 0..nodes {
                if !done[k] && dist[k] < best_d {
                    best_d = dist[k];
                    best = k;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                let i = best;
                for j in 0..m {
                    let node = n + j;
                    if done[node] {
                        continue;
                    }
                    let rc = (cost[i * m + j] + pot[i] - pot[node]).max(0.0);
                    let nd = best_d + rc;
                    if nd < dist[node] {
                        dist[node] = nd;
                        prev[node] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= eps {
                        continue;
                    }
                    let rc = (-cost[i * m + j] + pot[best] - pot[i]).max(0.0);
                    let nd = best_d + rc;
                    if nd < dist[i] {
                        dist[i] = nd;
                        prev[i] = best;
                    }
                }
            }
        }
        // Closest sink that still has demand.
        let mut target = usize::MAX;
        let mut target_d = f64::INFINITY;
        for j in 0..m {
            if remaining_demand[j] > eps && dist[n + j] < target_d {
                target_d = dist[n + j];
                target = n + j;
            }
        }
        if target == usize::MAX {
            return Err(Error::numeric("transport", "no augmenting path with residual mass"));
        }
        for k in 0..nodes {
            let dk = if dist[k].is_finite() { dist[k] } else { target_d };
            pot[k] += dk.min(target_d);
        }
        // Bottleneck along the path.
        let mut amount = remaining_demand[target - n];
        let mut node = target;
        loop {
            let p = prev[node];
            if node >= n {
                if p == usize::MAX {
                    break;
                }
            } else {
                if p == usize::MAX {
                    amount = amount.min(remaining_supply[node]);
                    break;
                }
                let j = p - n;
                amount = amount.min(flow[node * m + j]);
            }
            node = p;
        }
        if !(amount > 0.0) {
            return Err(Error::numeric("transport", "zero bottleneck"));
        }
        node = target;
        remaining_demand[target - n] -= amount;
        loop {
            let p = prev[node];
            if node >= n {
                let j = node - n;
                flow[p * m + j] += amount;
            } else {
                if p == usize::MAX {
                    remaining_supply[node] -= amount;
                    break;
                }
                let j = p - n;
                flow[node * m + j] -= amount;
            }
            node = p;
        }
    }
    Ok(flow.iter().zip(cost).map(|(f, c)| f * c).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + rec(cost, n, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, n, 0, &mut vec![false; n])
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut s = crate::rng::Stream::new(1, crate::rng::Purpose::Probe, 0);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| s.uniform() * 10.0).collect();
                let (assign, total) = solve_assignment(&cost, n).unwrap();
                let mut seen = assign.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((total - brute_force_assignment(&cost, n)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transport_equals_assignment_on_uniform_masses() {
        let mut s = crate::rng::Stream::new(2, crate::rng::Purpose::Probe, 0);
        for n in 1..=7 {
            let cost: Vec<f64> = (0..n * n).map(|_| s.uniform()).collect();
            let w = vec![1.0 / n as f64; n];
            let t = solve_transport(&w, &w, &cost).unwrap();
            let (_, a) = solve_assignment(&cost, n).unwrap();
            assert!((t - a / n as f64).abs() < 1e-12, "n={n}: {t} vs {}", a / n as f64);
        }
    }

    #[test]
    fn transport_splits_mass() {
        // One source of mass 1 to two sinks: cost is the weighted average.
        let t = solve_transport(&[1.0], &[0.25, 0.75], &[4.0, 1.0]).unwrap();
        assert!((t - 1.75).abs() < 1e-15);
        // Two sources, one sink.
        let t = solve_transport(&[0.5, 0.5], &[1.0], &[2.0, 6.0]).unwrap();
        assert!((t - 4.0).abs() < 1e-15);
    }
}
