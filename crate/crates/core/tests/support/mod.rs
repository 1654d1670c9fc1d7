//! Strategies and invariant checks shared by the property tests and the
//! acceptance runner. Each check returns `Err(description)` on violation.
#![allow(dead_code)]

use ldp_aimd::baseline::{solve_grid_oracle, solve_optimum};
use ldp_aimd::dp::{NoiseKind, NoiseSpec, ScaleMode, SensitivityScope};
use ldp_aimd::engine::{self, StepOutcome, LAMBDA_MIN};
use ldp_aimd::experiment::ExperimentFile;
use ldp_aimd::model::{AgentSpec, CostFunction, ReferenceForm, ResourceConfig, SystemConfig, Term};
use proptest::prelude::*;

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// A separable convex cost over `m` resources: per resource a power term
/// and an optional linear term.
pub fn cost_strategy(m: usize) -> impl Strategy<Value = CostFunction> {
    prop::collection::vec((0.5f64..30.0, 2u32..=4, prop::option::of(0.1f64..5.0)), m).prop_map(
        move |parts| {
            let mut terms = Vec::new();
            for (j, (c, e, lin)) in parts.into_iter().enumerate() {
                let mut exps = vec![0; m];
                exps[j] = e;
                terms.push(Term {
                    coefficient: c,
                    exponents: exps.clone(),
                });
                if let Some(l) = lin {
                    exps[j] = 1;
                    terms.push(Term {
                        coefficient: l,
                        exponents: exps,
                    });
                }
            }
            CostFunction::new(terms).unwrap()
        },
    )
}

pub fn resource_strategy() -> impl Strategy<Value = ResourceConfig> {
    (0.5f64..10.0, 0.001f64..0.05, 0.1f64..0.95, 1e-4f64..1e-2).prop_map(
        |(capacity, alpha, beta, gamma)| ResourceConfig {
            capacity,
            alpha,
            beta,
            gamma,
        },
    )
}

pub fn noise_strategy() -> impl Strategy<Value = NoiseSpec> {
    prop_oneof![
        Just(NoiseSpec::none()),
        (0.01f64..50.0).prop_map(|s| NoiseSpec::laplace(0.5, ScaleMode::Fixed(s), None)),
        (0.01f64..50.0).prop_map(|s| NoiseSpec::gaussian(0.5, 0.01, ScaleMode::Fixed(s), None)),
        (0.1f64..5.0).prop_map(|dq| NoiseSpec::gaussian(
            0.5,
            0.01,
            ScaleMode::Calibrated,
            Some(dq)
        )),
    ]
}

/// Small random systems with distinct, non-positional agent ids.
pub fn system_strategy() -> impl Strategy<Value = SystemConfig> {
    (1usize..=4, 1usize..=3)
        .prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(cost_strategy(m), n),
                prop::collection::vec(resource_strategy(), m),
                prop::collection::vec(noise_strategy(), m),
                prop::collection::btree_set(1u64..1000, n),
                200u64..1500,
                any::<u64>(),
                prop::bool::ANY,
            )
        })
        .prop_filter("ids must be distinct", |t| t.3.len() == t.0.len())
        .prop_map(
            |(costs, resources, noise, ids, steps, seed, per_agent)| SystemConfig {
                agents: ids
                    .into_iter()
                    .zip(costs)
                    .map(|(id, cost)| AgentSpec { id, cost })
                    .collect(),
                resources,
                noise,
                steps,
                seed,
                burn_in_events: 5,
                sensitivity_scope: if per_agent {
                    SensitivityScope::PerAgent
                } else {
                    SensitivityScope::PerResource
                },
            },
        )
}

/// Post-MD strict decrease, bounded overshoot, bit accounting, mean
/// exactness of the averages, clamp range of the scaling factor and
/// monotone sensitivity, all checked against one trace.
pub fn check_run_invariants(config: &SystemConfig) -> Check {
    let n = config.agents.len();
    let m = config.resources.len();
    let mut trace = Vec::new();
    let stats = engine::run_with(config, |o| trace.push(o.clone())).map_err(|e| e.to_string())?;

    let mut prev_x = vec![vec![0.0; m]; n];
    let mut sums = vec![vec![0.0f64; m]; n];
    let mut counts = vec![vec![0u64; m]; n];
    let mut prev_dq = vec![0.0; m];
    let mut bits_total = 0u64;
    let mut event_counts = vec![0u64; m];
    for o in &trace {
        ensure(o.bits as usize <= m, || {
            format!("step {}: {} bits broadcast", o.step, o.bits)
        })?;
        bits_total += o.bits;
        ensure(o.cumulative_bits == bits_total, || {
            format!("step {}: cumulative bits drifted", o.step)
        })?;
        for j in 0..m {
            let r = &config.resources[j];
            let aggregate: f64 = prev_x.iter().map(|x| x[j]).sum();
            let bound = r.capacity + n as f64 * r.alpha;
            ensure(aggregate <= bound + 1e-9 * bound, || {
                format!("step {}: aggregate {aggregate} exceeds {bound}", o.step)
            })?;
            ensure(o.event_bits[j] == (aggregate >= r.capacity), || {
                format!(
                    "step {}: event bit {} for aggregate {aggregate}",
                    o.step, o.event_bits[j]
                )
            })?;
            if o.event_bits[j] {
                event_counts[j] += 1;
            }
            for i in 0..n {
                let before = prev_x[i][j];
                let after = o.x[i][j];
                if o.event_bits[j] {
                    sums[i][j] += before;
                    counts[i][j] += 1;
                    let mean = sums[i][j] / counts[i][j] as f64;
                    ensure(
                        (o.xbar[i][j] - mean).abs() <= 1e-12 * mean.abs().max(1.0),
                        || {
                            format!(
                                "step {}: xbar {} but mean of samples {mean}",
                                o.step, o.xbar[i][j]
                            )
                        },
                    )?;
                    let lambda = o.lambda_hat[i][j];
                    ensure(o.noisy_derivative[i][j].is_some(), || {
                        format!("step {}: missing noisy derivative", o.step)
                    })?;
                    if before > 0.0 {
                        let l = lambda.ok_or_else(|| {
                            format!("step {}: no scaling factor with x > 0", o.step)
                        })?;
                        ensure((LAMBDA_MIN..=1.0).contains(&l), || {
                            format!("step {}: lambda {l} out of range", o.step)
                        })?;
                        ensure(after < before, || {
                            format!(
                                "step {}: demand {before} -> {after} did not decrease",
                                o.step
                            )
                        })?;
                    }
                } else {
                    ensure(
                        o.lambda_hat[i][j].is_none() && o.noisy_derivative[i][j].is_none(),
                        || format!("step {}: per-event field set without an event", o.step),
                    )?;
                    ensure(after == before + r.alpha, || {
                        format!("step {}: additive increase broken", o.step)
                    })?;
                }
            }
            ensure(o.sensitivity[j] >= prev_dq[j], || {
                format!("step {}: sensitivity decreased", o.step)
            })?;
            prev_dq[j] = o.sensitivity[j];
        }
        prev_x = o.x.clone();
    }
    ensure(stats.event_counts == event_counts, || {
        "event counts differ from the trace".into()
    })?;
    ensure(
        stats.broadcast_bits_total == event_counts.iter().sum::<u64>(),
        || "broadcast bits differ from the sum of event counts".into(),
    )?;
    for (j, spec) in config.noise.iter().enumerate() {
        if spec.kind == NoiseKind::Gaussian && spec.scale == ScaleMode::Calibrated {
            for (i, row) in stats.scales.iter().enumerate() {
                let dq = match (spec.sensitivity, &stats.pilot_sensitivity) {
                    (Some(dq), _) => dq,
                    (None, Some(pilot)) => pilot[i][j],
                    (None, None) => return Err("calibrated scale without a sensitivity".into()),
                };
                let floor =
                    ldp_aimd::gaussian_sigma(dq, spec.epsilon.unwrap(), spec.delta.unwrap())
                        .map_err(|e| e.to_string())?;
                ensure(row[j] >= floor * (1.0 - 1e-12), || {
                    format!("sigma {} below {floor}", row[j])
                })?;
            }
        }
    }
    Ok(())
}

pub fn check_determinism(config: &SystemConfig) -> Check {
    let a = engine::run(config).map_err(|e| e.to_string())?;
    let b = engine::run(config).map_err(|e| e.to_string())?;
    ensure(a == b, || "two runs with the same seed differ".into())
}

/// Reversing the agent list reverses every per-agent output.
pub fn check_symmetry(config: &SystemConfig) -> Check {
    let mut reversed = config.clone();
    reversed.agents.reverse();
    let a = engine::run(config).map_err(|e| e.to_string())?;
    let b = engine::run(&reversed).map_err(|e| e.to_string())?;
    let flip = |o: &StepOutcome| {
        let mut o = o.clone();
        o.x.reverse();
        o.xbar.reverse();
        o.derivative.reverse();
        o.noisy_derivative.reverse();
        o.lambda_hat.reverse();
        o
    };
    for (x, y) in a.iter().zip(&b) {
        let mut y = flip(y);
        // Aggregates are summed in agent order.
        y.aggregate = x.aggregate.clone();
        ensure(*x == y, || {
            format!("step {}: outputs depend on agent order", x.step)
        })?;
    }
    Ok(())
}

pub fn check_finite_difference(f: &CostFunction, points: &[Vec<f64>]) -> Check {
    for x in points {
        for j in 0..f.dim() {
            let h = 1e-5 * x[j].abs().max(1.0);
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += h;
            lo[j] -= h;
            let fd = (f.eval_cost(&hi).unwrap() - f.eval_cost(&lo).unwrap()) / (2.0 * h);
            let exact = f.eval_partial(x, j).unwrap();
            let scale = exact
                .abs()
                .max(1e-6 * f.eval_cost(x).unwrap().abs())
                .max(1e-8);
            ensure((fd - exact).abs() <= 1e-4 * scale, || {
                format!("partial {j} at {x:?}: analytic {exact}, finite difference {fd}")
            })?;
        }
    }
    Ok(())
}

pub fn check_term_order(f: &CostFunction, x: &[f64]) -> Check {
    let mut g = f.clone();
    g.terms.reverse();
    let a = f.eval_cost(x).unwrap();
    let b = g.eval_cost(x).unwrap();
    ensure((a - b).abs() <= 1e-12 * a.abs().max(1.0), || {
        format!("cost {a} vs reordered {b}")
    })
}

/// Partials of the reference forms are strictly increasing along each
/// coordinate over a grid of `[0, C]^2`.
pub fn check_reference_convexity(form: ReferenceForm, a: f64, b: f64) -> Check {
    let f = CostFunction::reference_form(form, a, b);
    let caps = [5.0, 6.0];
    for j in 0..2 {
        for other in 0..=10 {
            let mut last = f64::NEG_INFINITY;
            for k in 0..=50 {
                let mut x = [0.0; 2];
                x[j] = caps[j] * k as f64 / 50.0;
                x[1 - j] = caps[1 - j] * other as f64 / 10.0;
                let d = f.eval_partial(&x, j).unwrap();
                ensure(d > last, || {
                    format!("{form:?}: partial {j} not increasing at {x:?}")
                })?;
                last = d;
            }
        }
    }
    Ok(())
}

/// Stationarity across active agents and feasibility of the solver output.
pub fn check_kkt(costs: &[CostFunction], resources: &[ResourceConfig]) -> Check {
    let opt = solve_optimum(costs, resources).map_err(|e| e.to_string())?;
    for (j, r) in resources.iter().enumerate() {
        let sum: f64 = opt.x_star.iter().map(|x| x[j]).sum();
        ensure((sum - r.capacity).abs() <= 1e-8, || {
            format!("resource {j}: column sum {sum} != {}", r.capacity)
        })?;
        let active: Vec<f64> = costs
            .iter()
            .zip(&opt.x_star)
            .filter(|(_, x)| x[j] > 1e-6)
            .map(|(f, x)| f.eval_partial(x, j).unwrap())
            .collect();
        let lo = active.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = active.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure(
            active.is_empty() || hi - lo <= 1e-5 * hi.abs().max(1e-12),
            || format!("resource {j}: active partials spread over [{lo}, {hi}]"),
        )?;
    }
    Ok(())
}

pub fn check_grid_agreement(
    costs: &[CostFunction],
    resources: &[ResourceConfig],
    resolution: f64,
) -> Check {
    let opt = solve_optimum(costs, resources).map_err(|e| e.to_string())?;
    let grid = solve_grid_oracle(costs, resources, resolution).map_err(|e| e.to_string())?;
    let gap = opt
        .x_star
        .iter()
        .flatten()
        .zip(grid.x_star.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(gap <= 2.0 * resolution, || {
        format!(
            "solver {:?} vs grid {:?} (gap {gap})",
            opt.x_star, grid.x_star
        )
    })
}

pub fn check_config_round_trip(system: &SystemConfig) -> Check {
    let file = ExperimentFile {
        schema_version: 1,
        system: system.clone(),
        sweep: vec![],
        output_dir: None,
    };
    let text = file.to_json().map_err(|e| e.to_string())?;
    let back =
        ExperimentFile::from_json(&text, "roundtrip.json".as_ref()).map_err(|e| e.to_string())?;
    ensure(back == file, || "parse(serialize(config)) differs".into())?;
    let again = back.to_json().map_err(|e| e.to_string())?;
    ensure(again == text, || "serialization is not stable".into())
}
