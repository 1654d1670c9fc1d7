//! Social optimum of the allocation problem
//!
//! ```text
//! minimise   sum_i f_i(x_i1, ..., x_im)
//! subject to sum_i x_ij = C_j,  x_ij >= 0
//! ```
//!
//! solved by projected gradient over the product of scaled simplexes, plus an
//! exhaustive grid search used to validate the solver on tiny instances.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CostFunction, ResourceConfig};

/// Optimal allocation, indexed `[agent][resource]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalAllocation {
    pub x_star: Vec<Vec<f64>>,
    pub total_cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-6,
            max_iterations: 200_000,
        }
    }
}

fn check_instance(costs: &[CostFunction], resources: &[ResourceConfig]) -> Result<()> {
    if costs.is_empty() {
        return Err(Error::config("agents", "at least one agent is required"));
    }
    if resources.is_empty() {
        return Err(Error::config(
            "resources",
            "at least one resource is required",
        ));
    }
    for (i, f) in costs.iter().enumerate() {
        f.validate(&format!("agents[{i}].cost"))?;
        if f.dim() != resources.len() {
            return Err(Error::Dimension {
                expected: resources.len(),
                got: f.dim(),
            });
        }
    }
    for (j, r) in resources.iter().enumerate() {
        if !(r.capacity.is_finite() && r.capacity > 0.0) {
            return Err(Error::config(
                format!("resources[{j}].capacity"),
                "must be > 0",
            ));
        }
    }
    Ok(())
}

fn total_cost(costs: &[CostFunction], x: &[Vec<f64>]) -> f64 {
    costs
        .iter()
        .zip(x)
        .map(|(f, xi)| f.cost_unchecked(xi))
        .sum()
}

fn gradient(costs: &[CostFunction], x: &[Vec<f64>], out: &mut [Vec<f64>]) {
    for ((f, xi), gi) in costs.iter().zip(x).zip(out.iter_mut()) {
        for (j, g) in gi.iter_mut().enumerate() {
            *g = f.partial_unchecked(xi, j);
        }
    }
}

/// Euclidean projection of `v` onto `{y >= 0, sum y = total}`.
pub fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - total) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&vi| (vi - theta).max(0.0)).collect()
}

fn project(x: &mut [Vec<f64>], capacities: &[f64]) {
    for (j, &cap) in capacities.iter().enumerate() {
        let column: Vec<f64> = x.iter().map(|xi| xi[j]).collect();
        for (xi, p) in x.iter_mut().zip(project_simplex(&column, cap)) {
            xi[j] = p;
        }
    }
}

/// First-order optimality gap: per resource, the spread of partial
/// derivatives over agents holding a positive share, plus how far any
/// zero-share agent's derivative falls below the smallest active one, both
/// relative to the largest derivative magnitude (floored at 1), plus the
/// relative capacity violation; the max over resources.
pub fn kkt_residual(costs: &[CostFunction], capacities: &[f64], x: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (j, &cap) in capacities.iter().enumerate() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut inactive_min = f64::INFINITY;
        let mut magnitude: f64 = 1.0;
        let mut sum = 0.0;
        for (f, xi) in costs.iter().zip(x) {
            let g = f.partial_unchecked(xi, j);
            magnitude = magnitude.max(g.abs());
            sum += xi[j];
            if xi[j] > 0.0 {
                lo = lo.min(g);
                hi = hi.max(g);
            } else {
                inactive_min = inactive_min.min(g);
            }
        }
        let spread = if hi >= lo { hi - lo } else { 0.0 };
        let complementarity = if inactive_min < lo {
            lo - inactive_min
        } else {
            0.0
        };
        let feasibility = (sum - cap).abs() / cap.max(1.0);
        worst = worst.max((spread + complementarity) / magnitude + feasibility);
    }
    worst
}

pub fn solve_optimum(
    costs: &[CostFunction],
    resources: &[ResourceConfig],
) -> Result<OptimalAllocation> {
    solve_optimum_with(costs, resources, SolverOptions::default())
}

/// Projected gradient with Barzilai-Borwein trial steps and Armijo
/// backtracking, started from the equal split.
pub fn solve_optimum_with(
    costs: &[CostFunction],
    resources: &[ResourceConfig],
    options: SolverOptions,
) -> Result<OptimalAllocation> {
    check_instance(costs, resources)?;
    let n = costs.len();
    let m = resources.len();
    let capacities: Vec<f64> = resources.iter().map(|r| r.capacity).collect();

    let mut x: Vec<Vec<f64>> = vec![capacities.iter().map(|&c| c / n as f64).collect(); n];
    let mut g = vec![vec![0.0; m]; n];
    gradient(costs, &x, &mut g);
    let mut value = total_cost(costs, &x);
    let mut step = 1e-2;
    let mut residual = kkt_residual(costs, &capacities, &x);
    let mut trial = x.clone();
    let mut g_new = g.clone();

    for iteration in 0..options.max_iterations {
        if residual <= options.tolerance {
            return Ok(OptimalAllocation {
                total_cost: value,
                x_star: x,
                kkt_residual: residual,
                iterations: iteration,
            });
        }
        let mut t = step;
        let accepted = loop {
            for i in 0..n {
                for j in 0..m {
                    trial[i][j] = x[i][j] - t * g[i][j];
                }
            }
            project(&mut trial, &capacities);
            let directional: f64 = (0..n)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .map(|(i, j)| g[i][j] * (trial[i][j] - x[i][j]))
                .sum();
            let candidate = total_cost(costs, &trial);
            // Cost differences below the rounding noise of the total are
            // not evidence against the step.
            let slack = 64.0 * f64::EPSILON * value.abs().max(1.0);
            if candidate <= value + 1e-4 * directional + slack || directional.abs() < 1e-300 {
                break Some(candidate);
            }
            t *= 0.5;
            if t < 1e-20 {
                break None;
            }
        };
        let Some(candidate) = accepted else {
            // No descent left at machine precision.
            break;
        };
        gradient(costs, &trial, &mut g_new);
        // Barzilai-Borwein length for the next trial step.
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..m {
                let s = trial[i][j] - x[i][j];
                ss += s * s;
                sy += s * (g_new[i][j] - g[i][j]);
            }
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e6)
        } else {
            (t * 2.0).min(1e6)
        };
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
        value = candidate;
        residual = kkt_residual(costs, &capacities, &x);
    }
    if residual <= options.tolerance {
        return Ok(OptimalAllocation {
            total_cost: value,
            x_star: x,
            kkt_residual: residual,
            iterations: options.max_iterations,
        });
    }
    Err(Error::NoConvergence {
        iterations: options.max_iterations,
        residual,
    })
}

/// Largest grid the oracle will enumerate.
pub const MAX_GRID_POINTS: u128 = 10_000_000;

/// All splits of `total` among `n` agents where the first `n - 1` shares
/// are multiples of `resolution` and the last takes the remainder.
fn compositions(n: usize, total: f64, resolution: f64) -> Vec<Vec<f64>> {
    let units = (total / resolution + 1e-9).floor() as u64;
    let mut out = Vec::new();
    let mut current = vec![0u64; n.saturating_sub(1)];
    fn rec(
        pos: usize,
        remaining: u64,
        current: &mut Vec<u64>,
        total: f64,
        resolution: f64,
        out: &mut Vec<Vec<f64>>,
    ) {
        if pos == current.len() {
            let mut split: Vec<f64> = current.iter().map(|&u| u as f64 * resolution).collect();
            let used: f64 = split.iter().sum();
            split.push((total - used).max(0.0));
            out.push(split);
            return;
        }
        for u in 0..=remaining {
            current[pos] = u;
            rec(pos + 1, remaining - u, current, total, resolution, out);
        }
    }
    rec(0, units, &mut current, total, resolution, &mut out);
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Exhaustive minimiser over the discretised feasible set. Only for tiny
/// instances: `n * m <= 4` and at most [`MAX_GRID_POINTS`] points.
pub fn solve_grid_oracle(
    costs: &[CostFunction],
    resources: &[ResourceConfig],
    resolution: f64,
) -> Result<OptimalAllocation> {
    check_instance(costs, resources)?;
    let n = costs.len();
    let m = resources.len();
    if n * m > 4 {
        return Err(Error::OracleRefused(format!("n*m = {} exceeds 4", n * m)));
    }
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(Error::OracleRefused(format!(
            "resolution must be > 0, got {resolution}"
        )));
    }
    let mut points: u128 = 1;
    for r in resources {
        if resolution > r.capacity {
            return Err(Error::OracleRefused(format!(
                "resolution {resolution} is coarser than capacity {}",
                r.capacity
            )));
        }
        let units = (r.capacity / resolution + 1e-9).floor() as u128;
        points = points.saturating_mul(binomial(units + n as u128 - 1, n as u128 - 1));
        if points > MAX_GRID_POINTS {
            return Err(Error::OracleRefused(format!(
                "grid has more than {MAX_GRID_POINTS} points"
            )));
        }
    }

    let per_resource: Vec<Vec<Vec<f64>>> = resources
        .iter()
        .map(|r| compositions(n, r.capacity, resolution))
        .collect();
    let mut index = vec![0usize; m];
    let mut x = vec![vec![0.0; m]; n];
    let mut best = (f64::INFINITY, x.clone());
    'outer: loop {
        for (j, &k) in index.iter().enumerate() {
            for (i, xi) in x.iter_mut().enumerate() {
                xi[j] = per_resource[j][k][i];
            }
        }
        let value = total_cost(costs, &x);
        if value < best.0 {
            best = (value, x.clone());
        }
        for j in 0..m {
            index[j] += 1;
            if index[j] < per_resource[j].len() {
                continue 'outer;
            }
            index[j] = 0;
        }
        break;
    }
    let capacities: Vec<f64> = resources.iter().map(|r| r.capacity).collect();
    let kkt = kkt_residual(costs, &capacities, &best.1);
    Ok(OptimalAllocation {
        x_star: best.1,
        total_cost: best.0,
        kkt_residual: kkt,
        iterations: 0,
    })
}
