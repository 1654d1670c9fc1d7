//! Sensitivity tracking, noise calibration and the Laplace/Gaussian
//! mechanisms applied to partial derivatives before they reach the
//! multiplicative-decrease step.
//!
//! Every agent perturbs each partial derivative it uses with additive noise
//! `d`. With Laplace noise of scale `dq / eps` the released value is
//! `eps`-LDP; with Gaussian noise of standard deviation
//! `(dq / eps) * sqrt(2 ln(1.25 / delta))` it is `(eps, delta)`-LDP. Over `m`
//! resources the per-resource budgets add up.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Laplace,
    Gaussian,
}

impl NoiseKind {
    /// Norm order whose sensitivity the mechanism's calibration consumes.
    pub fn norm(self) -> NormOrder {
        match self {
            NoiseKind::Laplace => NormOrder::L1,
            NoiseKind::None | NoiseKind::Gaussian => NormOrder::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Use this scale (Laplace `b` or Gaussian `sigma`) as given.
    Fixed(f64),
    /// Derive the scale from a sensitivity: the configured override, or the
    /// value measured by a noiseless pilot run.
    #[default]
    Calibrated,
}

/// Noise configuration for one resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub scale: ScaleMode,
    /// Sensitivity used by calibration instead of a pilot measurement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            epsilon: None,
            delta: None,
            scale: ScaleMode::Calibrated,
            sensitivity: None,
        }
    }

    pub fn laplace(epsilon: f64, scale: ScaleMode, sensitivity: Option<f64>) -> Self {
        NoiseSpec {
            kind: NoiseKind::Laplace,
            epsilon: Some(epsilon),
            delta: None,
            scale,
            sensitivity,
        }
    }

    pub fn gaussian(epsilon: f64, delta: f64, scale: ScaleMode, sensitivity: Option<f64>) -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            epsilon: Some(epsilon),
            delta: Some(delta),
            scale,
            sensitivity,
        }
    }

    pub(crate) fn validate(&self, field: &str) -> Result<()> {
        if self.kind == NoiseKind::None {
            return Ok(());
        }
        match self.epsilon {
            Some(e) if e.is_finite() && e > 0.0 => {}
            Some(e) => {
                return Err(Error::config(
                    format!("{field}.epsilon"),
                    format!("must be > 0, got {e}"),
                ))
            }
            None => {
                return Err(Error::config(
                    format!("{field}.epsilon"),
                    "required for laplace and gaussian noise",
                ))
            }
        }
        if self.kind == NoiseKind::Gaussian {
            match self.delta {
                Some(d) if d > 0.0 && d < 1.0 => {}
                Some(d) => {
                    return Err(Error::config(
                        format!("{field}.delta"),
                        format!("must be in (0, 1), got {d}"),
                    ))
                }
                None => {
                    return Err(Error::config(
                        format!("{field}.delta"),
                        "required for gaussian noise",
                    ))
                }
            }
        }
        if let ScaleMode::Fixed(v) = self.scale {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    format!("{field}.scale"),
                    format!("fixed scale must be > 0, got {v}"),
                ));
            }
        }
        if let Some(s) = self.sensitivity {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config(
                    format!("{field}.sensitivity"),
                    format!("must be > 0, got {s}"),
                ));
            }
        }
        Ok(())
    }

    /// True when the scale can only be known after a pilot run.
    pub fn needs_pilot(&self) -> bool {
        self.kind != NoiseKind::None
            && self.scale == ScaleMode::Calibrated
            && self.sensitivity.is_none()
    }

    /// Scale actually used by the sampler: `b` for Laplace, `sigma` for
    /// Gaussian, 0 for no noise. `measured` is the pilot sensitivity.
    pub fn resolve_scale(&self, measured: Option<f64>) -> Result<f64> {
        if self.kind == NoiseKind::None {
            return Ok(0.0);
        }
        if let ScaleMode::Fixed(v) = self.scale {
            return Ok(v);
        }
        let dq = self.sensitivity.or(measured).ok_or_else(|| {
            Error::InvalidParameter("calibrated noise needs a sensitivity".to_string())
        })?;
        // validate() guarantees epsilon (and delta for gaussian).
        let eps = self.epsilon.unwrap_or(f64::NAN);
        match self.kind {
            NoiseKind::Laplace => laplace_scale(dq, eps),
            NoiseKind::Gaussian => gaussian_sigma(dq, eps, self.delta.unwrap_or(f64::NAN)),
            NoiseKind::None => unreachable!(),
        }
    }
}

/// Whether noise sensitivities are pooled across agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityScope {
    /// One sensitivity per resource: the max over agents.
    #[default]
    PerResource,
    /// One sensitivity per (agent, resource).
    PerAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    L1,
    L2,
}

impl NormOrder {
    /// p-norm of the difference of two scalars; every order reduces to the
    /// absolute difference.
    pub fn distance(self, a: f64, b: f64) -> f64 {
        match self {
            NormOrder::L1 => (a - b).abs(),
            NormOrder::L2 => ((a - b) * (a - b)).sqrt(),
        }
    }
}

/// Running sensitivity of consecutive event derivatives.
///
/// For each (agent, resource) the tracker keeps the previous derivative;
/// each new one contributes `|new - previous|` to the running maximum,
/// unless its zero-based event index is below `burn_in_events`.
#[derive(Debug, Clone)]
pub struct SensitivityTracker {
    norms: Vec<NormOrder>,
    burn_in_events: u64,
    n: usize,
    m: usize,
    last: Vec<Option<f64>>,
    events_seen: Vec<u64>,
    agent_max: Vec<f64>,
    running_max: Vec<f64>,
}

impl SensitivityTracker {
    pub fn new(n_agents: usize, norms: Vec<NormOrder>, burn_in_events: u64) -> Self {
        let m = norms.len();
        SensitivityTracker {
            norms,
            burn_in_events,
            n: n_agents,
            m,
            last: vec![None; n_agents * m],
            events_seen: vec![0; n_agents * m],
            agent_max: vec![0.0; n_agents * m],
            running_max: vec![0.0; m],
        }
    }

    /// Records the derivative agent `i` used at its latest event on resource
    /// `j` and returns the resource's current sensitivity.
    pub fn update(&mut self, i: usize, j: usize, derivative: f64) -> Result<f64> {
        if !derivative.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite derivative {derivative} for agent {i}, resource {j}"
            )));
        }
        let cell = i * self.m + j;
        let index = self.events_seen[cell];
        self.events_seen[cell] += 1;
        if let Some(prev) = self.last[cell].replace(derivative) {
            if index >= self.burn_in_events {
                let change = self.norms[j].distance(derivative, prev);
                if change > self.agent_max[cell] {
                    self.agent_max[cell] = change;
                }
                if change > self.running_max[j] {
                    self.running_max[j] = change;
                }
            }
        }
        Ok(self.running_max[j])
    }

    pub fn sensitivity(&self, j: usize) -> f64 {
        self.running_max[j]
    }

    pub fn agent_sensitivity(&self, i: usize, j: usize) -> f64 {
        self.agent_max[i * self.m + j]
    }

    pub fn sensitivities(&self) -> &[f64] {
        &self.running_max
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }
}

/// Minimal Gaussian standard deviation for `(epsilon, delta)`-LDP at
/// sensitivity `dq`.
pub fn gaussian_sigma(dq: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(dq.is_finite() && dq > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity must be > 0, got {dq}"
        )));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    Ok(dq / epsilon * (2.0 * (1.25 / delta).ln()).sqrt())
}

/// Laplace scale `b = dq / epsilon`.
pub fn laplace_scale(dq: f64, epsilon: f64) -> Result<f64> {
    if !(dq.is_finite() && dq > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity must be > 0, got {dq}"
        )));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    Ok(dq / epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub value: f64,
    pub kind: NoiseKind,
    pub scale: f64,
}

/// One draw of mechanism noise. Laplace draws have location 0 and scale
/// `scale` (variance `2 scale^2`); Gaussian draws have mean 0 and standard
/// deviation `scale`.
pub fn sample_noise<R: Rng + ?Sized>(kind: NoiseKind, scale: f64, rng: &mut R) -> NoiseDraw {
    let value = match kind {
        NoiseKind::None => 0.0,
        NoiseKind::Laplace => {
            let e: f64 = rng.sample(Exp1);
            if rng.random::<bool>() {
                scale * e
            } else {
                -scale * e
            }
        }
        NoiseKind::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        }
    };
    NoiseDraw { value, kind, scale }
}

/// Histogram comparison of a mechanism's output at two inputs `sensitivity`
/// apart.
///
/// Fine bins are uniform over `[-3w, sensitivity + 3w]` (`w` is the noise
/// scale, or the sensitivity when there is no noise) with one open bin on
/// each side. Adjacent fine bins are merged left to right until a merged
/// bin holds at least `2 * min_count` samples across both histograms, so the
/// log-ratio of every reported bin has bounded sampling error.
#[derive(Debug, Clone)]
pub struct DpAudit {
    pub kind: NoiseKind,
    pub scale: f64,
    pub sensitivity: f64,
    pub inner_bins: usize,
    pub samples: usize,
    pub min_count: u64,
}

/// Bin floor below which no log-ratio is reported.
pub const MIN_BIN_COUNT: u64 = 50;

#[derive(Debug, Clone)]
pub struct AuditHistograms {
    pub edges: Vec<f64>,
    pub at_input: Vec<u64>,
    pub at_neighbour: Vec<u64>,
    pub min_count: u64,
}

impl DpAudit {
    pub fn new(kind: NoiseKind, scale: f64, sensitivity: f64, samples: usize) -> Self {
        DpAudit {
            kind,
            scale,
            sensitivity,
            inner_bins: 64,
            samples,
            min_count: MIN_BIN_COUNT,
        }
    }

    pub fn with_min_count(mut self, min_count: u64) -> Self {
        self.min_count = min_count.max(MIN_BIN_COUNT);
        self
    }

    fn edges(&self) -> Vec<f64> {
        let w = if self.kind == NoiseKind::None || self.scale <= 0.0 {
            self.sensitivity.max(1.0)
        } else {
            self.scale
        };
        let lo = -3.0 * w;
        let hi = self.sensitivity + 3.0 * w;
        let bins = self.inner_bins.max(1);
        (0..=bins)
            .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
            .collect()
    }

    pub fn run<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<AuditHistograms> {
        if self.samples < 100_000 {
            return Err(Error::InvalidParameter(format!(
                "audit needs at least 1e5 samples, got {}",
                self.samples
            )));
        }
        let edges = self.edges();
        let mut at_input = vec![0u64; edges.len() + 1];
        let mut at_neighbour = vec![0u64; edges.len() + 1];
        let bin_of = |v: f64| edges.partition_point(|&e| e < v);
        for _ in 0..self.samples {
            let d = sample_noise(self.kind, self.scale, rng).value;
            at_input[bin_of(d)] += 1;
            let d = sample_noise(self.kind, self.scale, rng).value;
            at_neighbour[bin_of(self.sensitivity + d)] += 1;
        }
        Ok(AuditHistograms {
            edges,
            at_input,
            at_neighbour,
            min_count: self.min_count,
        })
    }
}

impl AuditHistograms {
    /// Merged bins as `(count at input, count at neighbour)`.
    pub fn merged(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = Vec::new();
        let (mut a, mut b) = (0u64, 0u64);
        for (&ca, &cb) in self.at_input.iter().zip(&self.at_neighbour) {
            a += ca;
            b += cb;
            if a + b >= 2 * self.min_count {
                out.push((a, b));
                a = 0;
                b = 0;
            }
        }
        if a + b > 0 {
            match out.last_mut() {
                Some(last) => {
                    last.0 += a;
                    last.1 += b;
                }
                None => out.push((a, b)),
            }
        }
        out
    }

    /// Largest `|ln(P(bin | input) / P(bin | neighbour))|` over merged bins.
    /// Infinite when some bin is reachable from one input only.
    pub fn max_abs_log_ratio(&self) -> f64 {
        let na: u64 = self.at_input.iter().sum();
        let nb: u64 = self.at_neighbour.iter().sum();
        self.merged()
            .into_iter()
            .map(|(a, b)| match (a, b) {
                (0, 0) => 0.0,
                (0, _) | (_, 0) => f64::INFINITY,
                _ => ((a as f64 / na as f64) / (b as f64 / nb as f64)).ln().abs(),
            })
            .fold(0.0, f64::max)
    }

    /// Probability mass sitting in fine bins where one input's probability
    /// exceeds `exp(epsilon)` times the other's; the larger direction.
    pub fn violating_mass(&self, epsilon: f64) -> f64 {
        let na = self.at_input.iter().sum::<u64>() as f64;
        let nb = self.at_neighbour.iter().sum::<u64>() as f64;
        let bound = epsilon.exp();
        let mut forward = 0.0;
        let mut backward = 0.0;
        for (&a, &b) in self.at_input.iter().zip(&self.at_neighbour) {
            let pa = a as f64 / na;
            let pb = b as f64 / nb;
            if pa > bound * pb {
                forward += pa;
            }
            if pb > bound * pa {
                backward += pb;
            }
        }
        f64::max(forward, backward)
    }
}

/// Max binned `|log density ratio|` of the mechanism at two inputs
/// `sensitivity` apart; bins with fewer than [`MIN_BIN_COUNT`] samples are
/// merged into their neighbours.
pub fn empirical_dp_ratio<R: Rng + ?Sized>(
    kind: NoiseKind,
    scale: f64,
    sensitivity: f64,
    inner_bins: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut audit = DpAudit::new(kind, scale, sensitivity, samples);
    audit.inner_bins = inner_bins;
    Ok(audit.run(rng)?.max_abs_log_ratio())
}
