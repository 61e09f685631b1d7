//! Agent dynamics, uncertainty envelopes, and the fault model.
//!
//! Every follower integrates
//!
//! ```text
//! dx_p/dt = phi_p(x_p) + u_p + eta_p(x_p, t) + fault_p(x, u, t)
//! ```
//!
//! componentwise. The known part `phi`, the unknown disturbance `eta`, and
//! its envelope `eta_bar` come from the registry; the envelope must dominate
//! the disturbance pointwise or every residual threshold downstream loses
//! its guarantee.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{FaultBasis, Field};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("{what} declares {got} components, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("state dimension must be positive")]
    EmptyState,
}

/// Where a fault enters the dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Additive term `theta_p * g(x_p)` on the state equation.
    Process,
    /// Input scaling `(1 + theta_p) * u_p`, with `theta_p` in `(-1, 0]`.
    Actuator,
}

/// Admissible set for one scalar fault parameter, shared by all components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSet {
    /// Closed ball `|theta - center| <= radius`.
    Sphere { center: f64, radius: f64 },
    /// Closed interval `[lower, 0]`, the natural set for effectiveness loss.
    Interval { lower: f64 },
}

impl ParamSet {
    /// Center and radius of the smallest ball containing the set. Threshold
    /// inflation uses this even when projection uses the exact set.
    pub fn enclosing_ball(&self) -> (f64, f64) {
        match *self {
            ParamSet::Sphere { center, radius } => (center, radius),
            ParamSet::Interval { lower } => (0.5 * lower, 0.5 * lower.abs()),
        }
    }

    /// Nearest point of the set. Idempotent, and the identity inside.
    pub fn project(&self, value: f64) -> f64 {
        match *self {
            ParamSet::Sphere { center, radius } => {
                let offset = value - center;
                if offset.abs() > radius {
                    center + radius * offset.signum()
                } else {
                    value
                }
            }
            ParamSet::Interval { lower } => value.clamp(lower, 0.0),
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        match *self {
            ParamSet::Sphere { center, radius } => (value - center).abs() <= radius,
            ParamSet::Interval { lower } => (lower..=0.0).contains(&value),
        }
    }
}

/// One entry of the fault class: a hypothesis the isolation logic can test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultCandidate {
    pub kind: FaultKind,
    pub basis: FaultBasis,
    pub params: ParamSet,
}

/// A concrete fault injected into one agent at a fixed time.
#[derive(Clone, Debug)]
pub struct FaultSpec {
    /// 0-based follower index.
    pub agent: usize,
    pub kind: FaultKind,
    pub basis: FaultBasis,
    /// One parameter per state component.
    pub theta: Vec<f64>,
    pub occurrence_time: f64,
    /// Position of the matching candidate in the scenario's fault class.
    pub class_index: usize,
}

impl FaultSpec {
    /// Hard on-switch: the fault contributes from `occurrence_time` on.
    pub fn active(&self, t: f64) -> bool {
        t >= self.occurrence_time
    }
}

/// Componentwise dynamics shared by all followers in a scenario.
#[derive(Clone, Debug)]
pub struct PlantModel {
    state_dim: usize,
    known: Vec<Field>,
    uncertainty: Vec<Field>,
    uncertainty_bound: Vec<Field>,
}

impl PlantModel {
    pub fn new(
        state_dim: usize,
        known: Vec<Field>,
        uncertainty: Vec<Field>,
        uncertainty_bound: Vec<Field>,
    ) -> Result<Self, PlantError> {
        if state_dim == 0 {
            return Err(PlantError::EmptyState);
        }
        for (what, len) in [
            ("known dynamics", known.len()),
            ("uncertainty", uncertainty.len()),
            ("uncertainty bound", uncertainty_bound.len()),
        ] {
            if len != state_dim {
                return Err(PlantError::DimensionMismatch {
                    what,
                    got: len,
                    expected: state_dim,
                });
            }
        }
        Ok(PlantModel {
            state_dim,
            known,
            uncertainty,
            uncertainty_bound,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn known_at(&self, p: usize, x_p: f64) -> f64 {
        self.known[p].eval(x_p, 0.0)
    }

    pub fn uncertainty_at(&self, p: usize, x_p: f64, t: f64) -> f64 {
        self.uncertainty[p].eval(x_p, t)
    }

    pub fn bound_at(&self, p: usize, x_p: f64, t: f64) -> f64 {
        self.uncertainty_bound[p].eval(x_p, t)
    }

    /// Right-hand side of the true dynamics, fault included when active.
    pub fn derivative(
        &self,
        fault: Option<&FaultSpec>,
        x: &[f64],
        u: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, PlantError> {
        if x.len() != self.state_dim {
            return Err(PlantError::DimensionMismatch {
                what: "state",
                got: x.len(),
                expected: self.state_dim,
            });
        }
        if u.len() != self.state_dim {
            return Err(PlantError::DimensionMismatch {
                what: "input",
                got: u.len(),
                expected: self.state_dim,
            });
        }
        let active = fault.filter(|f| f.active(t));
        let mut dx = vec![0.0; self.state_dim];
        for p in 0..self.state_dim {
            let input = match active {
                Some(f) if f.kind == FaultKind::Actuator => (1.0 + f.theta[p]) * u[p],
                _ => u[p],
            };
            dx[p] = self.known_at(p, x[p]) + input + self.uncertainty_at(p, x[p], t);
            if let Some(f) = active {
                if f.kind == FaultKind::Process {
                    dx[p] += f.theta[p] * f.basis.eval(x[p], u[p]);
                }
            }
        }
        Ok(dx)
    }
}
