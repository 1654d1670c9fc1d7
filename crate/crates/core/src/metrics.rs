//! Quantities derived from a run: allocation error against the optimum,
//! cost ratio at the last capacity events, derivative consensus, sensitivity
//! evolution and communication cost.

use serde::Serialize;

use crate::baseline::OptimalAllocation;
use crate::engine::{RunStats, StepOutcome};
use crate::model::CostFunction;

/// Derivative spread across agents at one capacity event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpreadPoint {
    pub step: u64,
    pub event: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl SpreadPoint {
    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesPoint<T> {
    pub step: u64,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub final_xbar: Vec<Vec<f64>>,
    pub x_star: Vec<Vec<f64>>,
    pub abs_error: Vec<Vec<f64>>,
    /// Largest `|xbar - x*| / x*` over entries with `x* > 0`.
    pub max_rel_error: f64,
    pub optimal_cost: f64,
    /// Total cost at the averages as of each resource's last event.
    pub achieved_cost: Option<f64>,
    pub cost_ratio: Option<f64>,
    pub event_counts: Vec<u64>,
    pub total_bits: u64,
    pub max_bits_per_step: u64,
    pub noise_scales: Vec<Vec<f64>>,
    pub pilot_sensitivity: Option<Vec<Vec<f64>>>,
    pub final_sensitivity: Vec<f64>,
    pub comm_bits_cumulative: Vec<SeriesPoint<u64>>,
    /// Running sensitivity after each event, per resource.
    pub sensitivity_series: Vec<Vec<SeriesPoint<f64>>>,
    pub derivative_spread_series: Vec<Vec<SpreadPoint>>,
}

impl RunSummary {
    /// Copy with every series reduced to at most `max_points` evenly spaced
    /// points (first and last kept).
    pub fn thinned(&self, max_points: usize) -> RunSummary {
        let mut out = self.clone();
        out.comm_bits_cumulative = thin(&self.comm_bits_cumulative, max_points);
        out.sensitivity_series = self
            .sensitivity_series
            .iter()
            .map(|s| thin(s, max_points))
            .collect();
        out.derivative_spread_series = self
            .derivative_spread_series
            .iter()
            .map(|s| thin(s, max_points))
            .collect();
        out
    }
}

fn thin<T: Clone>(series: &[T], max_points: usize) -> Vec<T> {
    if series.len() <= max_points || max_points < 2 {
        return series.to_vec();
    }
    let last = series.len() - 1;
    (0..max_points)
        .map(|k| series[k * last / (max_points - 1)].clone())
        .collect()
}

/// Streaming accumulator; feed it every [`StepOutcome`] of a run.
#[derive(Debug, Clone)]
pub struct MetricsRecorder {
    last_event_xbar: Vec<Option<Vec<f64>>>,
    comm: Vec<SeriesPoint<u64>>,
    max_bits_per_step: u64,
    sensitivity: Vec<Vec<SeriesPoint<f64>>>,
    spread: Vec<Vec<SpreadPoint>>,
}

impl MetricsRecorder {
    pub fn new(n_resources: usize) -> Self {
        MetricsRecorder {
            last_event_xbar: vec![None; n_resources],
            comm: Vec::new(),
            max_bits_per_step: 0,
            sensitivity: vec![Vec::new(); n_resources],
            spread: vec![Vec::new(); n_resources],
        }
    }

    pub fn observe(&mut self, outcome: &StepOutcome) {
        self.comm.push(SeriesPoint {
            step: outcome.step,
            value: outcome.cumulative_bits,
        });
        self.max_bits_per_step = self.max_bits_per_step.max(outcome.bits);
        for (j, &fired) in outcome.event_bits.iter().enumerate() {
            if !fired {
                continue;
            }
            let column: Vec<f64> = outcome.xbar.iter().map(|row| row[j]).collect();
            self.last_event_xbar[j] = Some(column);
            self.sensitivity[j].push(SeriesPoint {
                step: outcome.step,
                value: outcome.sensitivity[j],
            });
            let event = self.spread[j].len() as u64;
            if let Some(point) = spread_at(outcome, j, event) {
                self.spread[j].push(point);
            }
        }
    }

    /// Allocation vector per agent built from each resource's last event.
    pub fn last_event_allocation(&self) -> Option<Vec<Vec<f64>>> {
        let columns: Option<Vec<&Vec<f64>>> =
            self.last_event_xbar.iter().map(Option::as_ref).collect();
        let columns = columns?;
        let n = columns.first().map_or(0, |c| c.len());
        Some(
            (0..n)
                .map(|i| columns.iter().map(|c| c[i]).collect())
                .collect(),
        )
    }

    pub fn finish(
        self,
        costs: &[CostFunction],
        optimum: &OptimalAllocation,
        stats: &RunStats,
    ) -> RunSummary {
        let final_xbar = stats.final_xbar.clone();
        let abs_error: Vec<Vec<f64>> = final_xbar
            .iter()
            .zip(&optimum.x_star)
            .map(|(xb, xs)| xb.iter().zip(xs).map(|(a, b)| (a - b).abs()).collect())
            .collect();
        let max_rel_error = abs_error
            .iter()
            .flatten()
            .zip(optimum.x_star.iter().flatten())
            .filter(|(_, &xs)| xs > 0.0)
            .map(|(e, xs)| e / xs)
            .fold(0.0, f64::max);
        let achieved_cost = self.last_event_allocation().map(|x| social_cost(costs, &x));
        RunSummary {
            steps: stats.steps,
            x_star: optimum.x_star.clone(),
            abs_error,
            max_rel_error,
            optimal_cost: optimum.total_cost,
            achieved_cost,
            cost_ratio: achieved_cost.map(|c| c / optimum.total_cost),
            event_counts: stats.event_counts.clone(),
            total_bits: stats.broadcast_bits_total,
            max_bits_per_step: self.max_bits_per_step,
            noise_scales: stats.scales.clone(),
            pilot_sensitivity: stats.pilot_sensitivity.clone(),
            final_sensitivity: stats.sensitivity.clone(),
            comm_bits_cumulative: self.comm,
            sensitivity_series: self.sensitivity,
            derivative_spread_series: self.spread,
            final_xbar,
        }
    }
}

fn spread_at(outcome: &StepOutcome, j: usize, event: u64) -> Option<SpreadPoint> {
    let values: Vec<f64> = outcome.derivative.iter().filter_map(|row| row[j]).collect();
    if values.is_empty() {
        return None;
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(SpreadPoint {
        step: outcome.step,
        event,
        min,
        max,
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}

pub fn social_cost(costs: &[CostFunction], x: &[Vec<f64>]) -> f64 {
    costs
        .iter()
        .zip(x)
        .map(|(f, xi)| f.cost_unchecked(xi))
        .sum()
}

/// Cost at the averages as of each resource's last capacity event divided
/// by the optimal cost; `None` if some resource never had an event.
pub fn cost_ratio(
    trace: &[StepOutcome],
    costs: &[CostFunction],
    optimum: &OptimalAllocation,
) -> Option<f64> {
    let m = trace.first()?.n_resources();
    let mut rec = MetricsRecorder::new(m);
    for o in trace {
        rec.observe(o);
    }
    let x = rec.last_event_allocation()?;
    Some(social_cost(costs, &x) / optimum.total_cost)
}

/// Per resource, the spread of noiseless partial derivatives across agents
/// at every capacity event.
pub fn derivative_spread(trace: &[StepOutcome]) -> Vec<Vec<SpreadPoint>> {
    let Some(first) = trace.first() else {
        return Vec::new();
    };
    let mut rec = MetricsRecorder::new(first.n_resources());
    for o in trace {
        rec.observe(o);
    }
    rec.spread
}

/// Cumulative broadcast bits after each step.
pub fn comm_cost_series(trace: &[StepOutcome]) -> Vec<u64> {
    let mut total = 0;
    trace
        .iter()
        .map(|o| {
            total += o.event_bits.iter().filter(|&&b| b).count() as u64;
            total
        })
        .collect()
}

/// Coefficient of determination of the least-squares line through
/// `(x_k, y_k)`.
pub fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return 1.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Mean of `values[from..to]` for fractional bounds in `[0, 1]`.
pub fn window_mean(values: &[f64], from: f64, to: f64) -> Option<f64> {
    let len = values.len();
    let a = (from * len as f64).floor() as usize;
    let b = ((to * len as f64).ceil() as usize).min(len);
    (b > a).then(|| values[a..b].iter().sum::<f64>() / (b - a) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(step: u64, bits: Vec<bool>, total: u64) -> StepOutcome {
        let m = bits.len();
        StepOutcome {
            step,
            aggregate: vec![0.0; m],
            bits: bits.iter().filter(|&&b| b).count() as u64,
            event_bits: bits,
            x: vec![vec![1.0; m]],
            xbar: vec![vec![1.0; m]],
            derivative: vec![vec![None; m]],
            noisy_derivative: vec![vec![None; m]],
            lambda_hat: vec![vec![None; m]],
            sensitivity: vec![0.0; m],
            cumulative_bits: total,
        }
    }

    #[test]
    fn comm_series_steps() {
        let trace: Vec<StepOutcome> = (0..25u64)
            .map(|s| outcome(s, vec![s == 10 || s == 20], 0))
            .collect();
        let series = comm_cost_series(&trace);
        assert!(series[..10].iter().all(|&b| b == 0));
        assert!(series[10..20].iter().all(|&b| b == 1));
        assert!(series[20..].iter().all(|&b| b == 2));
    }

    #[test]
    fn comm_series_simultaneous_events() {
        let trace = vec![outcome(0, vec![false; 3], 0), outcome(1, vec![true; 3], 3)];
        assert_eq!(comm_cost_series(&trace), vec![0, 3]);
    }

    #[test]
    fn cost_ratio_absent_without_events() {
        let trace = vec![outcome(0, vec![false], 0)];
        let opt = OptimalAllocation {
            x_star: vec![vec![1.0]],
            total_cost: 1.0,
            kkt_residual: 0.0,
            iterations: 0,
        };
        let f = CostFunction::new(vec![crate::model::Term {
            coefficient: 1.0,
            exponents: vec![2],
        }])
        .unwrap();
        assert_eq!(cost_ratio(&trace, std::slice::from_ref(&f), &opt), None);
        let trace = vec![outcome(0, vec![true], 1)];
        assert_eq!(cost_ratio(&trace, &[f], &opt), Some(1.0));
    }

    #[test]
    fn single_agent_spread_is_zero() {
        let mut o = outcome(3, vec![true], 1);
        o.derivative[0][0] = Some(4.0);
        let s = derivative_spread(&[o]);
        assert_eq!(s[0].len(), 1);
        assert_eq!(s[0][0].spread(), 0.0);
        assert_eq!(s[0][0].mean, 4.0);
    }

    #[test]
    fn r2_of_line_and_noise() {
        let xs: Vec<f64> = (0..100).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        assert!((linear_fit_r2(&xs, &ys) - 1.0).abs() < 1e-12);
        let zig: Vec<f64> = xs
            .iter()
            .map(|x| if *x as i64 % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert!(linear_fit_r2(&xs, &zig) < 0.01);
    }

    #[test]
    fn thinning_keeps_ends() {
        let series: Vec<u32> = (0..1000).collect();
        let t = thin(&series, 11);
        assert_eq!(t.len(), 11);
        assert_eq!(t[0], 0);
        assert_eq!(t[10], 999);
    }

    #[test]
    fn window_means() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(window_mean(&v, 0.0, 0.1), Some(1.0));
        assert_eq!(window_mean(&v, 0.9, 1.0), Some(10.0));
        assert_eq!(window_mean(&[], 0.0, 1.0), None);
    }
}
