//! Agents, resources and their polynomial cost functions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{NoiseSpec, SensitivityScope};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// One monomial `coefficient * prod_j x_j^exponents[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coefficient: f64,
    pub exponents: Vec<u32>,
}

/// A cost as a sum of positive-coefficient monomials over `m` resources.
///
/// Costs are convex and increasing on the non-negative orthant only when
/// the caller picks terms that make them so; [`CostFunction::new`] checks
/// the structural part (positive coefficients, every term depends on some
/// variable, consistent dimension).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFunction {
    pub terms: Vec<Term>,
}

impl CostFunction {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let f = CostFunction { terms };
        f.validate("cost")?;
        Ok(f)
    }

    pub(crate) fn validate(&self, field: &str) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::config(
                format!("{field}.terms"),
                "at least one term is required",
            ));
        }
        let dim = self.terms[0].exponents.len();
        if dim == 0 {
            return Err(Error::config(
                format!("{field}.terms[0].exponents"),
                "exponent vector must not be empty",
            ));
        }
        for (t, term) in self.terms.iter().enumerate() {
            if !(term.coefficient.is_finite() && term.coefficient > 0.0) {
                return Err(Error::config(
                    format!("{field}.terms[{t}].coefficient"),
                    format!("must be finite and > 0, got {}", term.coefficient),
                ));
            }
            if term.exponents.len() != dim {
                return Err(Error::config(
                    format!("{field}.terms[{t}].exponents"),
                    format!("expected {dim} exponents, got {}", term.exponents.len()),
                ));
            }
            if term.exponents.iter().all(|&e| e == 0) {
                return Err(Error::config(
                    format!("{field}.terms[{t}].exponents"),
                    "every term needs at least one positive exponent",
                ));
            }
        }
        Ok(())
    }

    /// Number of resources the cost is defined over.
    pub fn dim(&self) -> usize {
        self.terms.first().map_or(0, |t| t.exponents.len())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval_cost(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.cost_unchecked(x))
    }

    /// Analytic `d cost / d x_j`.
    pub fn eval_partial(&self, x: &[f64], j: usize) -> Result<f64> {
        self.check_point(x)?;
        if j >= self.dim() {
            return Err(Error::InvalidParameter(format!(
                "resource index {j} out of range for {} resources",
                self.dim()
            )));
        }
        Ok(self.partial_unchecked(x, j))
    }

    pub(crate) fn cost_unchecked(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.exponents
                    .iter()
                    .zip(x)
                    .fold(t.coefficient, |acc, (&e, &xj)| acc * pow(xj, e))
            })
            .sum()
    }

    pub(crate) fn partial_unchecked(&self, x: &[f64], j: usize) -> f64 {
        let mut total = 0.0;
        for t in &self.terms {
            let ej = t.exponents[j];
            if ej == 0 {
                continue;
            }
            let mut v = t.coefficient * f64::from(ej);
            for (l, (&e, &xl)) in t.exponents.iter().zip(x).enumerate() {
                let e = if l == j { e - 1 } else { e };
                v *= pow(xl, e);
            }
            total += v;
        }
        total
    }

    /// The three concrete forms used by the reference six-agent setup,
    /// parameterised by the integer draws `a` and `b`.
    pub fn reference_form(form: ReferenceForm, a: f64, b: f64) -> Self {
        let term = |coefficient: f64, e1: u32, e2: u32| Term {
            coefficient,
            exponents: vec![e1, e2],
        };
        let terms = match form {
            ReferenceForm::QuadQuartic => vec![
                term(0.5 * a, 2, 0),
                term(0.25 * b, 4, 0),
                term(0.5 * b, 0, 2),
                term(0.25 * a, 0, 4),
            ],
            ReferenceForm::Quadratic => vec![term(0.5 * b, 2, 0), term(0.25 * b, 0, 2)],
            ReferenceForm::Quartic => vec![term(0.5 * b, 4, 0), term(b / 3.0, 0, 4)],
        };
        CostFunction { terms }
    }
}

#[inline]
fn pow(x: f64, e: u32) -> f64 {
    match e {
        0 => 1.0,
        1 => x,
        2 => x * x,
        _ => x.powi(e as i32),
    }
}

/// Cost shapes of the reference experiment (two resources).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceForm {
    /// `a/2 x1^2 + b/4 x1^4 + b/2 x2^2 + a/4 x2^4`
    QuadQuartic,
    /// `b/2 x1^2 + b/4 x2^2`
    Quadratic,
    /// `b/2 x1^4 + b/3 x2^4`
    Quartic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConfig {
    pub capacity: f64,
    /// Additive increase step, in `(0, capacity]`.
    pub alpha: f64,
    /// Multiplicative decrease factor, in `[0, 1)`.
    pub beta: f64,
    /// Normalisation of the scaling factor, `> 0`.
    pub gamma: f64,
}

impl ResourceConfig {
    pub(crate) fn validate(&self, field: &str) -> Result<()> {
        let bad = |name: &str, msg: String| Err(Error::config(format!("{field}.{name}"), msg));
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return bad("capacity", format!("must be > 0, got {}", self.capacity));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.capacity) {
            return bad(
                "alpha",
                format!(
                    "must be in (0, capacity={}], got {}",
                    self.capacity, self.alpha
                ),
            );
        }
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return bad("beta", format!("must be in [0, 1), got {}", self.beta));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma", format!("must be > 0, got {}", self.gamma));
        }
        Ok(())
    }
}

/// An agent is identified by `id`; random streams are keyed by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: u64,
    pub cost: CostFunction,
}

fn default_burn_in() -> u64 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub agents: Vec<AgentSpec>,
    pub resources: Vec<ResourceConfig>,
    /// One entry per resource.
    pub noise: Vec<NoiseSpec>,
    pub steps: u64,
    pub seed: u64,
    /// Capacity events excluded from sensitivity tracking.
    #[serde(default = "default_burn_in")]
    pub burn_in_events: u64,
    #[serde(default)]
    pub sensitivity_scope: SensitivityScope,
}

impl SystemConfig {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_resources(&self) -> usize {
        self.resources.len()
    }

    pub fn costs(&self) -> Vec<CostFunction> {
        self.agents.iter().map(|a| a.cost.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_model()?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        Ok(())
    }

    /// Everything except the step count; a zero-step run is an empty trace.
    pub(crate) fn validate_model(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::config("agents", "at least one agent is required"));
        }
        if self.resources.is_empty() {
            return Err(Error::config(
                "resources",
                "at least one resource is required",
            ));
        }
        let m = self.resources.len();
        for (r, res) in self.resources.iter().enumerate() {
            res.validate(&format!("resources[{r}]"))?;
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, agent) in self.agents.iter().enumerate() {
            let field = format!("agents[{i}].cost");
            agent.cost.validate(&field)?;
            if agent.cost.dim() != m {
                return Err(Error::config(
                    format!("{field}.terms"),
                    format!(
                        "cost is over {} resources but {m} are configured",
                        agent.cost.dim()
                    ),
                ));
            }
            if !ids.insert(agent.id) {
                return Err(Error::config(
                    format!("agents[{i}].id"),
                    format!("duplicate agent id {}", agent.id),
                ));
            }
        }
        if self.noise.len() != m {
            return Err(Error::config(
                "noise",
                format!(
                    "expected {m} noise entries (one per resource), got {}",
                    self.noise.len()
                ),
            ));
        }
        for (r, spec) in self.noise.iter().enumerate() {
            spec.validate(&format!("noise[{r}]"))?;
        }
        Ok(())
    }
}

/// Six agents sharing two resources: agents 1-2 use
/// [`ReferenceForm::QuadQuartic`], 3-4 [`ReferenceForm::Quadratic`] and 5-6
/// [`ReferenceForm::Quartic`], with `a ~ U{10..=30}` and `b ~ U{15..=35}`
/// drawn from one stream per agent.
pub fn reference_agents(seed: u64) -> Vec<AgentSpec> {
    (0..6u64)
        .map(|i| {
            let mut rng = rng::stream(seed, Domain::Coefficients, i);
            let a = f64::from(rng.random_range(10..=30u32));
            let b = f64::from(rng.random_range(15..=35u32));
            let form = match i {
                0 | 1 => ReferenceForm::QuadQuartic,
                2 | 3 => ReferenceForm::Quadratic,
                _ => ReferenceForm::Quartic,
            };
            AgentSpec {
                id: i + 1,
                cost: CostFunction::reference_form(form, a, b),
            }
        })
        .collect()
}

/// Capacities, increase/decrease factors and normalisation of the reference
/// two-resource experiment.
pub fn reference_resources() -> Vec<ResourceConfig> {
    vec![
        ResourceConfig {
            capacity: 5.0,
            alpha: 0.01,
            beta: 0.70,
            gamma: 1.0 / 1000.0,
        },
        ResourceConfig {
            capacity: 6.0,
            alpha: 0.0125,
            beta: 0.6,
            gamma: 1.0 / 1000.0,
        },
    ]
}

/// The reference setup with the given noise and step count; cost
/// coefficients are drawn from `seed`.
pub fn reference_config(noise: Vec<NoiseSpec>, steps: u64, seed: u64) -> SystemConfig {
    SystemConfig {
        agents: reference_agents(seed),
        resources: reference_resources(),
        noise,
        steps,
        seed,
        burn_in_events: default_burn_in(),
        sensitivity_scope: SensitivityScope::default(),
    }
}
