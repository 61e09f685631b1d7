//! Scenario files: the single source of truth for a run.
//!
//! A scenario is a TOML document that fully determines a simulation, from
//! network shape to integration step. Loading validates everything up
//! front so a run that starts never dies on a malformed configuration, and
//! every validation failure names the offending key.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Topology;
use crate::plant::{FaultCandidate, FaultKind, ParamSet, PlantModel};
use crate::registry::{Field, Signal};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario at {key}: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub followers: usize,
    /// Undirected weighted edges as `[i, j, weight]`, 1-based.
    #[serde(default)]
    pub edges: Vec<(usize, usize, f64)>,
    /// Directed leader-to-follower links as `[i, weight]`, 1-based.
    pub leader_links: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub state_dim: usize,
    /// Known componentwise dynamics; state-dependent only.
    pub known: Vec<Field>,
    /// Modeling uncertainty actually applied to the plant.
    pub uncertainty: Vec<Field>,
    /// Envelope assumed by every residual threshold. Must dominate the
    /// uncertainty along all trajectories of the run.
    pub uncertainty_bound: Vec<Field>,
    /// One initial state per follower.
    pub initial_states: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSection {
    pub trajectory: Vec<Signal>,
    /// Componentwise bound on the reference slew rate, added to the
    /// switching gain.
    pub kappa: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    /// 1-based follower index.
    pub agent: usize,
    /// 1-based index into `fault_classes`.
    pub class: usize,
    /// True parameter per state component; must lie in the class set.
    pub theta: Vec<f64>,
    pub occurrence_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsSection {
    /// Detection observer pole.
    pub detection_observer: f64,
    /// Isolation observer pole.
    pub isolation_observer: f64,
    /// Learning rate of the isolation estimators.
    pub isolation_adaptation: f64,
    /// Learning rate of the accommodation approximator weights.
    pub approximator_adaptation: f64,
    /// Learning rate of the residual-bound estimate.
    pub bounding_adaptation: f64,
    /// Learning rate of the effectiveness estimate.
    pub effectiveness_adaptation: f64,
    /// Learning rate of the post-isolation process-fault estimate.
    pub post_isolation_adaptation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfSection {
    pub neurons: usize,
    pub center_min: f64,
    pub center_max: f64,
    pub variance: f64,
    /// Componentwise bound on the irreducible approximation error.
    pub approximation_error_bound: Vec<Field>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    pub dt_s: f64,
    pub t_end_s: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Boundary layer of the switching terms; zero selects the exact sign.
    #[serde(default)]
    pub sgn_layer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TogglesSection {
    /// Freeze the control law at baseline regardless of diagnosis.
    pub disable_ftc: bool,
    /// Record the stability monitor columns.
    pub lyapunov_monitor: bool,
}

impl Default for TogglesSection {
    fn default() -> Self {
        TogglesSection {
            disable_ftc: false,
            lyapunov_monitor: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub topology: TopologySection,
    pub plant: PlantSection,
    pub leader: LeaderSection,
    #[serde(default)]
    pub fault_classes: Vec<FaultCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultSection>,
    pub gains: GainsSection,
    pub rbf: RbfSection,
    pub integration: IntegrationSection,
    #[serde(default)]
    pub toggles: TogglesSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Reads, parses, and validates.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let scenario = Self::from_toml_str(&text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn build_topology(&self) -> Result<Topology, ScenarioError> {
        Topology::new(
            self.topology.followers,
            &self.topology.edges,
            &self.topology.leader_links,
        )
        .map_err(|e| invalid("topology", e.to_string()))
    }

    pub fn build_plant(&self) -> Result<PlantModel, ScenarioError> {
        PlantModel::new(
            self.plant.state_dim,
            self.plant.known.clone(),
            self.plant.uncertainty.clone(),
            self.plant.uncertainty_bound.clone(),
        )
        .map_err(|e| invalid("plant", e.to_string()))
    }

    /// Number of integration steps; `t_end` must sit on the step grid.
    pub fn steps(&self) -> usize {
        (self.integration.t_end_s / self.integration.dt_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.build_topology()?;
        let n = self.plant.state_dim;
        self.build_plant()?;

        for (p, field) in self.plant.known.iter().enumerate() {
            if matches!(field, Field::Sinusoid { .. }) {
                return Err(invalid(
                    &format!("plant.known[{p}]"),
                    "known dynamics must not depend on time",
                ));
            }
        }
        if self.plant.initial_states.len() != self.topology.followers {
            return Err(invalid(
                "plant.initial_states",
                format!(
                    "{} initial states for {} followers",
                    self.plant.initial_states.len(),
                    self.topology.followers
                ),
            ));
        }
        for (i, x0) in self.plant.initial_states.iter().enumerate() {
            if x0.len() != n {
                return Err(invalid(
                    &format!("plant.initial_states[{i}]"),
                    format!("{} components, expected {n}", x0.len()),
                ));
            }
        }

        if self.leader.trajectory.len() != n {
            return Err(invalid(
                "leader.trajectory",
                format!("{} components, expected {n}", self.leader.trajectory.len()),
            ));
        }
        if self.leader.kappa.len() != n {
            return Err(invalid(
                "leader.kappa",
                format!("{} components, expected {n}", self.leader.kappa.len()),
            ));
        }
        // The switching gain must dominate the reference rate; sample the
        // analytic derivative across the run to catch understated bounds.
        for (p, signal) in self.leader.trajectory.iter().enumerate() {
            let mut peak = 0.0_f64;
            let samples = 2000;
            for k in 0..=samples {
                let t = self.integration.t_end_s * k as f64 / samples as f64;
                peak = peak.max(signal.derivative(t).abs());
            }
            if self.leader.kappa[p] < peak {
                return Err(invalid(
                    &format!("leader.kappa[{p}]"),
                    format!(
                        "bound {} below sampled reference rate {peak:.6}",
                        self.leader.kappa[p]
                    ),
                ));
            }
        }

        for (s, candidate) in self.fault_classes.iter().enumerate() {
            let key = format!("fault_classes[{s}]");
            match candidate.kind {
                FaultKind::Actuator => {
                    if !candidate.basis.uses_input() {
                        return Err(invalid(
                            &key,
                            "actuator hypotheses use the input regressor",
                        ));
                    }
                    let (center, radius) = candidate.params.enclosing_ball();
                    let (lo, hi) = (center - radius, center + radius);
                    if lo <= -1.0 || hi > 0.0 {
                        return Err(invalid(
                            &key,
                            format!("effectiveness set [{lo}, {hi}] must lie within (-1, 0]"),
                        ));
                    }
                }
                FaultKind::Process => {
                    if candidate.basis.uses_input() {
                        return Err(invalid(
                            &key,
                            "process hypotheses use a state regressor",
                        ));
                    }
                }
            }
            match candidate.params {
                ParamSet::Sphere { radius, .. } => {
                    if !(radius > 0.0) {
                        return Err(invalid(&key, "parameter sphere needs a positive radius"));
                    }
                }
                ParamSet::Interval { lower } => {
                    if !(lower < 0.0) {
                        return Err(invalid(&key, "parameter interval needs a negative lower edge"));
                    }
                }
            }
        }

        if let Some(fault) = &self.fault {
            if fault.agent < 1 || fault.agent > self.topology.followers {
                return Err(invalid(
                    "fault.agent",
                    format!(
                        "agent {} outside 1..={}",
                        fault.agent, self.topology.followers
                    ),
                ));
            }
            if fault.class < 1 || fault.class > self.fault_classes.len() {
                return Err(invalid(
                    "fault.class",
                    format!(
                        "class {} outside 1..={}",
                        fault.class,
                        self.fault_classes.len()
                    ),
                ));
            }
            if fault.theta.len() != n {
                return Err(invalid(
                    "fault.theta",
                    format!("{} components, expected {n}", fault.theta.len()),
                ));
            }
            let class = &self.fault_classes[fault.class - 1];
            for (p, theta) in fault.theta.iter().enumerate() {
                if !class.params.contains(*theta) {
                    return Err(invalid(
                        &format!("fault.theta[{p}]"),
                        format!("{theta} outside the class parameter set"),
                    ));
                }
            }
            if !(fault.occurrence_time_s >= 0.0) {
                return Err(invalid("fault.occurrence_time_s", "must be nonnegative"));
            }
        }

        let gains = [
            ("gains.detection_observer", self.gains.detection_observer),
            ("gains.isolation_observer", self.gains.isolation_observer),
            ("gains.isolation_adaptation", self.gains.isolation_adaptation),
            (
                "gains.approximator_adaptation",
                self.gains.approximator_adaptation,
            ),
            ("gains.bounding_adaptation", self.gains.bounding_adaptation),
            (
                "gains.effectiveness_adaptation",
                self.gains.effectiveness_adaptation,
            ),
            (
                "gains.post_isolation_adaptation",
                self.gains.post_isolation_adaptation,
            ),
        ];
        for (key, value) in gains {
            if !(value > 0.0) {
                return Err(invalid(key, format!("must be positive, got {value}")));
            }
        }

        if self.rbf.neurons == 0 {
            return Err(invalid("rbf.neurons", "at least one neuron"));
        }
        if self.rbf.neurons > 1 && !(self.rbf.center_max > self.rbf.center_min) {
            return Err(invalid("rbf.center_max", "center range is empty"));
        }
        if !(self.rbf.variance > 0.0) {
            return Err(invalid("rbf.variance", "must be positive"));
        }
        if self.rbf.approximation_error_bound.len() != n {
            return Err(invalid(
                "rbf.approximation_error_bound",
                format!(
                    "{} components, expected {n}",
                    self.rbf.approximation_error_bound.len()
                ),
            ));
        }

        let dt = self.integration.dt_s;
        let t_end = self.integration.t_end_s;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("integration.dt_s", "must be positive and finite"));
        }
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(invalid("integration.t_end_s", "must be positive and finite"));
        }
        let steps = self.steps();
        if steps == 0 || (steps as f64 * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
            return Err(invalid(
                "integration.t_end_s",
                format!("{t_end} is not a whole number of {dt} steps"),
            ));
        }
        if self.integration.sgn_layer < 0.0 {
            return Err(invalid("integration.sgn_layer", "must be nonnegative"));
        }
        if self.integration.scheme == Scheme::Rk4 && !(self.integration.sgn_layer > 0.0) {
            return Err(invalid(
                "integration.sgn_layer",
                "the multi-stage scheme needs smooth switching; set a positive layer",
            ));
        }
        Ok(())
    }
}
