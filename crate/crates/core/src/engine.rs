//! The synchronous step loop.
//!
//! Each step the server compares the aggregate demand of every resource
//! (summed from the demands left by the previous step) against capacity and
//! broadcasts one bit per resource. Agents that see a bit sample their demand
//! into the running event average, evaluate their partial derivative at the
//! average vector, perturb it with mechanism noise and back off by the noisy
//! scaling factor; agents that see no bit increase additively.

use serde::Serialize;

use crate::dp::{sample_noise, NoiseKind, SensitivityScope, SensitivityTracker};
use crate::error::{Error, Result};
use crate::model::SystemConfig;
use crate::rng::{self, Domain, Stream};

/// Lower clamp of the scaling factor, keeping every decrease strict.
pub const LAMBDA_MIN: f64 = 1e-9;

/// Capacity detection on the server side.
#[derive(Debug, Clone)]
pub struct ServerState {
    capacities: Vec<f64>,
    event_bits: Vec<bool>,
    event_counts: Vec<u64>,
    broadcast_bits_total: u64,
}

impl ServerState {
    pub fn new(capacities: Vec<f64>) -> Self {
        let m = capacities.len();
        ServerState {
            capacities,
            event_bits: vec![false; m],
            event_counts: vec![0; m],
            broadcast_bits_total: 0,
        }
    }

    /// Sets `S_j = 1` iff `aggregate_j >= C_j` and returns the bits.
    pub fn step(&mut self, aggregates: &[f64]) -> &[bool] {
        debug_assert_eq!(aggregates.len(), self.capacities.len());
        for (j, (&total, &cap)) in aggregates.iter().zip(&self.capacities).enumerate() {
            let fired = total >= cap;
            self.event_bits[j] = fired;
            if fired {
                self.event_counts[j] += 1;
                self.broadcast_bits_total += 1;
            }
        }
        &self.event_bits
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    pub fn event_bits(&self) -> &[bool] {
        &self.event_bits
    }

    /// Lifetime capacity events per resource.
    pub fn event_counts(&self) -> &[u64] {
        &self.event_counts
    }

    pub fn broadcast_bits_total(&self) -> u64 {
        self.broadcast_bits_total
    }
}

pub fn additive_increase(x: f64, alpha: f64) -> f64 {
    x + alpha
}

/// Noisy scaling factor `gamma * |derivative + noise| / xbar`, clamped to
/// `[LAMBDA_MIN, 1]`. `None` when `xbar` is zero: the decrease is skipped.
pub fn compute_lambda_hat(gamma: f64, derivative: f64, noise: f64, xbar: f64) -> Option<f64> {
    if xbar <= 0.0 {
        return None;
    }
    let raw = gamma * (derivative + noise).abs() / xbar;
    Some(raw.clamp(LAMBDA_MIN, 1.0))
}

pub fn multiplicative_decrease(x: f64, lambda_hat: f64, beta: f64) -> f64 {
    (lambda_hat * beta + (1.0 - lambda_hat)) * x
}

/// Folds one more sample into an event average. `index` is the number of
/// samples already in `sum`; returns the mean of all `index + 1`.
pub fn update_average(sum: &mut f64, index: u64, sample: f64) -> f64 {
    *sum += sample;
    *sum / (index + 1) as f64
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: u64,
    /// Current demand per resource.
    pub x: Vec<f64>,
    /// Mean of the demands sampled at this resource's capacity events.
    pub xbar: Vec<f64>,
    /// Capacity events seen per resource.
    pub k: Vec<u64>,
    pub sum_at_events: Vec<f64>,
    rng: Stream,
}

impl AgentState {
    fn new(id: u64, m: usize, seed: u64) -> Self {
        AgentState {
            id,
            x: vec![0.0; m],
            xbar: vec![0.0; m],
            k: vec![0; m],
            sum_at_events: vec![0.0; m],
            rng: rng::stream(seed, Domain::Noise, id),
        }
    }
}

/// Observables of one step, indexed `[agent][resource]`.
///
/// Demands and averages are the values after the step's update; the
/// per-event fields are `Some` exactly where the agent backed off.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutcome {
    pub step: u64,
    /// Aggregate demand the server compared against capacity.
    pub aggregate: Vec<f64>,
    pub event_bits: Vec<bool>,
    pub x: Vec<Vec<f64>>,
    pub xbar: Vec<Vec<f64>>,
    /// Noiseless partial derivative at the average vector.
    pub derivative: Vec<Vec<Option<f64>>>,
    pub noisy_derivative: Vec<Vec<Option<f64>>>,
    pub lambda_hat: Vec<Vec<Option<f64>>>,
    /// Running sensitivity per resource after this step.
    pub sensitivity: Vec<f64>,
    pub bits: u64,
    pub cumulative_bits: u64,
}

impl StepOutcome {
    fn new(n: usize, m: usize) -> Self {
        StepOutcome {
            step: 0,
            aggregate: vec![0.0; m],
            event_bits: vec![false; m],
            x: vec![vec![0.0; m]; n],
            xbar: vec![vec![0.0; m]; n],
            derivative: vec![vec![None; m]; n],
            noisy_derivative: vec![vec![None; m]; n],
            lambda_hat: vec![vec![None; m]; n],
            sensitivity: vec![0.0; m],
            bits: 0,
            cumulative_bits: 0,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.x.len()
    }

    pub fn n_resources(&self) -> usize {
        self.event_bits.len()
    }
}

/// Noise scale per (agent, resource), plus the pilot sensitivities when a
/// pilot run was needed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseScales {
    n: usize,
    m: usize,
    values: Vec<f64>,
    pub pilot_sensitivity: Option<Vec<Vec<f64>>>,
}

impl NoiseScales {
    pub fn get(&self, agent: usize, resource: usize) -> f64 {
        self.values[agent * self.m + resource]
    }

    /// Scales as a `[agent][resource]` table.
    pub fn table(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.m).map(<[f64]>::to_vec).collect()
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }
}

/// Resolves every noise scale, running a noiseless pilot of the same config
/// when some resource calibrates from a measured sensitivity.
pub fn calibrate(config: &SystemConfig) -> Result<NoiseScales> {
    config.validate_model()?;
    let n = config.n_agents();
    let m = config.n_resources();
    let pilot = if config.noise.iter().any(|s| s.needs_pilot()) {
        let mut quiet = config.clone();
        for spec in &mut quiet.noise {
            spec.kind = NoiseKind::None;
        }
        let norms = config.noise.iter().map(|s| s.kind.norm()).collect();
        let mut sim = Simulation::with_scales(&quiet, vec![0.0; n * m], norms)?;
        while sim.step_index() < quiet.steps {
            sim.step()?;
        }
        let table: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| match config.sensitivity_scope {
                        SensitivityScope::PerResource => sim.tracker.sensitivity(j),
                        SensitivityScope::PerAgent => sim.tracker.agent_sensitivity(i, j),
                    })
                    .collect()
            })
            .collect();
        Some(table)
    } else {
        None
    };
    let mut values = Vec::with_capacity(n * m);
    for i in 0..n {
        for (j, spec) in config.noise.iter().enumerate() {
            let measured = pilot.as_ref().map(|t| t[i][j]);
            let scale = spec.resolve_scale(measured).map_err(|e| {
                Error::config(
                    format!("noise[{j}]"),
                    format!("cannot calibrate scale: {e}"),
                )
            })?;
            values.push(scale);
        }
    }
    Ok(NoiseScales {
        n,
        m,
        values,
        pilot_sensitivity: pilot,
    })
}

/// A run in progress.
pub struct Simulation<'a> {
    config: &'a SystemConfig,
    scales: Vec<f64>,
    kinds: Vec<NoiseKind>,
    server: ServerState,
    agents: Vec<AgentState>,
    tracker: SensitivityTracker,
    outcome: StepOutcome,
    next_step: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(config: &'a SystemConfig, scales: &NoiseScales) -> Result<Self> {
        config.validate_model()?;
        let norms = config.noise.iter().map(|s| s.kind.norm()).collect();
        Self::with_scales(config, scales.values.clone(), norms)
    }

    fn with_scales(
        config: &'a SystemConfig,
        scales: Vec<f64>,
        norms: Vec<crate::dp::NormOrder>,
    ) -> Result<Self> {
        let n = config.n_agents();
        let m = config.n_resources();
        if scales.len() != n * m {
            return Err(Error::Dimension {
                expected: n * m,
                got: scales.len(),
            });
        }
        Ok(Simulation {
            config,
            scales,
            kinds: config.noise.iter().map(|s| s.kind).collect(),
            server: ServerState::new(config.resources.iter().map(|r| r.capacity).collect()),
            agents: config
                .agents
                .iter()
                .map(|a| AgentState::new(a.id, m, config.seed))
                .collect(),
            tracker: SensitivityTracker::new(n, norms, config.burn_in_events),
            outcome: StepOutcome::new(n, m),
            next_step: 0,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.next_step
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn tracker(&self) -> &SensitivityTracker {
        &self.tracker
    }

    /// Advances one step and returns its observables.
    pub fn step(&mut self) -> Result<&StepOutcome> {
        let step = self.next_step;
        let m = self.config.n_resources();
        let out = &mut self.outcome;
        out.step = step;

        for j in 0..m {
            out.aggregate[j] = self.agents.iter().map(|a| a.x[j]).sum();
        }
        let bits = self.server.step(&out.aggregate);
        out.event_bits.copy_from_slice(bits);
        let fired = out.event_bits.iter().filter(|&&b| b).count() as u64;
        out.bits = fired;
        out.cumulative_bits = self.server.broadcast_bits_total();

        for (i, (agent, spec)) in self.agents.iter_mut().zip(&self.config.agents).enumerate() {
            // Averages first, so every derivative this step sees all of
            // this step's samples.
            for j in 0..m {
                if out.event_bits[j] {
                    let index = agent.k[j];
                    agent.xbar[j] = update_average(&mut agent.sum_at_events[j], index, agent.x[j]);
                    agent.k[j] += 1;
                }
            }
            for j in 0..m {
                let res = &self.config.resources[j];
                out.derivative[i][j] = None;
                out.noisy_derivative[i][j] = None;
                out.lambda_hat[i][j] = None;
                if !out.event_bits[j] {
                    agent.x[j] = additive_increase(agent.x[j], res.alpha);
                } else {
                    let derivative = spec.cost.partial_unchecked(&agent.xbar, j);
                    self.tracker
                        .update(i, j, derivative)
                        .map_err(|e| Error::Numeric {
                            step,
                            message: e.to_string(),
                        })?;
                    let noise =
                        sample_noise(self.kinds[j], self.scales[i * m + j], &mut agent.rng).value;
                    out.derivative[i][j] = Some(derivative);
                    out.noisy_derivative[i][j] = Some(derivative + noise);
                    if let Some(lambda) =
                        compute_lambda_hat(res.gamma, derivative, noise, agent.xbar[j])
                    {
                        if lambda.is_nan() {
                            return Err(Error::Numeric {
                                step,
                                message: format!("scaling factor is NaN for agent {}", agent.id),
                            });
                        }
                        out.lambda_hat[i][j] = Some(lambda);
                        agent.x[j] = multiplicative_decrease(agent.x[j], lambda, res.beta);
                    }
                }
                if !agent.x[j].is_finite() {
                    return Err(Error::Numeric {
                        step,
                        message: format!(
                            "demand of agent {} on resource {j} is {}",
                            agent.id, agent.x[j]
                        ),
                    });
                }
                out.x[i][j] = agent.x[j];
                out.xbar[i][j] = agent.xbar[j];
            }
        }
        out.sensitivity
            .copy_from_slice(self.tracker.sensitivities());
        self.next_step += 1;
        Ok(&self.outcome)
    }
}

/// Final state of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub steps: u64,
    pub scales: Vec<Vec<f64>>,
    pub pilot_sensitivity: Option<Vec<Vec<f64>>>,
    pub event_counts: Vec<u64>,
    pub broadcast_bits_total: u64,
    pub final_x: Vec<Vec<f64>>,
    pub final_xbar: Vec<Vec<f64>>,
    pub sensitivity: Vec<f64>,
}

/// Runs the configured number of steps, handing every step's observables
/// to `sink`.
pub fn run_with<F>(config: &SystemConfig, mut sink: F) -> Result<RunStats>
where
    F: FnMut(&StepOutcome),
{
    let scales = calibrate(config)?;
    let mut sim = Simulation::new(config, &scales)?;
    while sim.step_index() < config.steps {
        sink(sim.step()?);
    }
    Ok(RunStats {
        steps: config.steps,
        scales: scales.table(),
        pilot_sensitivity: scales.pilot_sensitivity,
        event_counts: sim.server.event_counts().to_vec(),
        broadcast_bits_total: sim.server.broadcast_bits_total(),
        final_x: sim.agents.iter().map(|a| a.x.clone()).collect(),
        final_xbar: sim.agents.iter().map(|a| a.xbar.clone()).collect(),
        sensitivity: sim.tracker.sensitivities().to_vec(),
    })
}

/// Runs and collects the full trace.
pub fn run(config: &SystemConfig) -> Result<Vec<StepOutcome>> {
    let mut trace = Vec::with_capacity(config.steps.min(1 << 20) as usize);
    run_with(config, |o| trace.push(o.clone()))?;
    Ok(trace)
}
