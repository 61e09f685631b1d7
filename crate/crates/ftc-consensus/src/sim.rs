//! The closed-loop simulation engine.
//!
//! One step proceeds in a strict order: snapshot all states, compute every
//! control from the snapshot, record the trace row, advance plant and
//! estimators with time-k values, then evaluate diagnosis decisions on the
//! advanced states. Controls never see a neighbor state from the current
//! step's updates, so results are independent of agent update order, and
//! everything downstream of the scenario is deterministic to the bit.
//!
//! Mode changes decided at step k take effect at step k+1. In particular
//! exclusion tests start one step after the isolation bank activates, so an
//! isolation verdict always lands strictly after the detection instant.

use ndarray::Array2;
use thiserror::Error;

use crate::control::{
    AccommodationController, AccommodationRates, ActuatorFtc, ControlError, ControlLaw,
    LawContext, ProcessFtc, RbfNetwork, consensus_error,
};
use crate::diagnosis::{
    BankVerdict, DiagnosisError, DiagnosisPhase, FaultDetector, IsolationBank,
};
use crate::graph::{GraphError, Topology, laplacians};
use crate::plant::{FaultCandidate, FaultKind, FaultSpec, PlantError, PlantModel};
use crate::registry::{Field, Signal};
use crate::scenario::{GainsSection, Scenario, ScenarioError, Scheme};
use crate::trace::{Event, EventKind, EventLog, Trace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("update order must be a permutation of 0..{0}")]
    BadUpdateOrder(usize),
}

/// Leader trajectory with its exact velocity, evaluated analytically so the
/// reference never accumulates integration error.
#[derive(Clone, Debug)]
pub struct LeaderReference {
    trajectory: Vec<Signal>,
    pub kappa: Vec<f64>,
}

impl LeaderReference {
    pub fn new(trajectory: Vec<Signal>, kappa: Vec<f64>) -> Self {
        LeaderReference { trajectory, kappa }
    }

    pub fn position(&self, t: f64) -> Vec<f64> {
        self.trajectory.iter().map(|s| s.eval(t)).collect()
    }

    pub fn velocity(&self, t: f64) -> Vec<f64> {
        self.trajectory.iter().map(|s| s.derivative(t)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct RbfParams {
    neurons: usize,
    lo: f64,
    hi: f64,
    variance: f64,
}

struct AgentState {
    x: Vec<f64>,
    detector: FaultDetector,
    bank: Option<IsolationBank>,
    law: ControlLaw,
    phase: DiagnosisPhase,
}

/// Everything a finished run leaves behind.
pub struct RunOutput {
    pub trace: Trace,
    pub events: EventLog,
    /// Smallest observed value of `envelope - |disturbance|` across the
    /// run. Negative means the scenario violated its own uncertainty bound
    /// and no threshold guarantee held.
    pub bound_margin: f64,
}

pub struct Simulation {
    dt: f64,
    steps: usize,
    layer: f64,
    scheme: Scheme,
    disable_ftc: bool,
    monitor: bool,
    plant: PlantModel,
    topology: Topology,
    /// Laplacian of the undirected augmented graph, the monitor weight.
    psi: Array2<f64>,
    leader: LeaderReference,
    candidates: Vec<FaultCandidate>,
    fault: Option<FaultSpec>,
    gains: GainsSection,
    rbf: RbfParams,
    error_bound: Vec<Field>,
    /// Lowest admissible effectiveness over all actuator hypotheses; the
    /// accommodation clamp floor. Zero when no actuator hypothesis exists.
    effectiveness_floor: f64,
    agents: Vec<AgentState>,
    update_order: Vec<usize>,
    k: usize,
    fault_announced: bool,
    bound_margin: f64,
    trace: Trace,
    events: EventLog,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let topology = scenario.build_topology()?;
        let plant = scenario.build_plant()?;
        let n = plant.state_dim();
        let m = topology.follower_count();
        let psi = laplacians(&topology).undirected;
        let leader = LeaderReference::new(
            scenario.leader.trajectory.clone(),
            scenario.leader.kappa.clone(),
        );
        let candidates = scenario.fault_classes.clone();
        let fault = scenario.fault.as_ref().map(|f| {
            let class = &candidates[f.class - 1];
            FaultSpec {
                agent: f.agent - 1,
                kind: class.kind,
                basis: class.basis,
                theta: f.theta.clone(),
                occurrence_time: f.occurrence_time_s,
                class_index: f.class - 1,
            }
        });
        let effectiveness_floor = candidates
            .iter()
            .filter(|c| c.kind == FaultKind::Actuator)
            .map(|c| {
                let (center, radius) = c.params.enclosing_ball();
                center - radius
            })
            .fold(0.0_f64, f64::min);

        let agents = scenario
            .plant
            .initial_states
            .iter()
            .map(|x0| AgentState {
                x: x0.clone(),
                // The observer starts on the measurement, so the initial
                // estimation envelope is zero.
                detector: FaultDetector::new(
                    scenario.gains.detection_observer,
                    x0,
                    &vec![0.0; n],
                ),
                bank: None,
                law: ControlLaw::Baseline,
                phase: DiagnosisPhase::Monitoring,
            })
            .collect();

        let monitor = scenario.toggles.lyapunov_monitor;
        let trace = Trace::new(trace_columns(m, n, candidates.len(), monitor));

        Ok(Simulation {
            dt: scenario.integration.dt_s,
            steps: scenario.steps(),
            layer: scenario.integration.sgn_layer,
            scheme: scenario.integration.scheme,
            disable_ftc: scenario.toggles.disable_ftc,
            monitor,
            plant,
            topology,
            psi,
            leader,
            candidates,
            fault,
            gains: scenario.gains,
            rbf: RbfParams {
                neurons: scenario.rbf.neurons,
                lo: scenario.rbf.center_min,
                hi: scenario.rbf.center_max,
                variance: scenario.rbf.variance,
            },
            error_bound: scenario.rbf.approximation_error_bound.clone(),
            effectiveness_floor,
            agents,
            update_order: (0..m).collect(),
            k: 0,
            fault_announced: false,
            bound_margin: f64::INFINITY,
            trace,
            events: EventLog::new(),
        })
    }

    /// Overrides the order agents are visited in during control and update
    /// passes. Results must not depend on it; tests exercise exactly that.
    pub fn set_update_order(&mut self, order: Vec<usize>) -> Result<(), SimError> {
        let m = self.agents.len();
        let mut seen = vec![false; m];
        if order.len() != m {
            return Err(SimError::BadUpdateOrder(m));
        }
        for &i in &order {
            if i >= m || seen[i] {
                return Err(SimError::BadUpdateOrder(m));
            }
            seen[i] = true;
        }
        self.update_order = order;
        Ok(())
    }

    pub fn t(&self) -> f64 {
        self.k as f64 * self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Runs all steps and appends the closing row at the final time.
    pub fn run_to_completion(&mut self) -> Result<(), SimError> {
        for _ in 0..self.steps {
            self.step()?;
        }
        let t = self.t();
        let xr = self.leader.position(t);
        let snapshot: Vec<Vec<f64>> = self.agents.iter().map(|a| a.x.clone()).collect();
        let (controls, _) = self.control_pass(t, &snapshot, &xr);
        self.record_row(t, &xr, &snapshot, &controls);
        Ok(())
    }

    pub fn into_output(self) -> RunOutput {
        RunOutput {
            trace: self.trace,
            events: self.events,
            bound_margin: self.bound_margin,
        }
    }

    /// Convenience: build, run, return outputs.
    pub fn run(scenario: &Scenario) -> Result<RunOutput, SimError> {
        let mut sim = Simulation::new(scenario)?;
        sim.run_to_completion()?;
        Ok(sim.into_output())
    }

    pub fn step(&mut self) -> Result<(), SimError> {
        match self.scheme {
            Scheme::Euler => self.step_euler(),
            Scheme::Rk4 => self.step_rk4(),
        }
    }

    /// Controls and consensus errors for all agents from a common snapshot.
    fn control_pass(
        &self,
        t: f64,
        snapshot: &[Vec<f64>],
        xr: &[f64],
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.plant.state_dim();
        let m = self.agents.len();
        let mut controls = vec![vec![0.0; n]; m];
        let mut errors = vec![vec![0.0; n]; m];
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for &i in &self.update_order {
            let neighbors = self.topology.neighbors(i);
            for p in 0..n {
                let own = snapshot[i][p];
                pairs.clear();
                pairs.extend(neighbors.iter().map(|&(j, w)| {
                    let other = if j == m { xr[p] } else { snapshot[j][p] };
                    (w, other)
                }));
                let e = consensus_error(own, &pairs);
                let ctx = LawContext {
                    e,
                    x: own,
                    phi: self.plant.known_at(p, own),
                    robust_gain: self.plant.bound_at(p, own, t) + self.leader.kappa[p],
                    error_bound: self.error_bound[p].eval(own, t),
                    layer: self.layer,
                };
                controls[i][p] = self.agents[i].law.control(p, &ctx);
                errors[i][p] = e;
            }
        }
        (controls, errors)
    }

    fn step_euler(&mut self) -> Result<(), SimError> {
        let t = self.t();
        let dt = self.dt;
        let n = self.plant.state_dim();
        let xr = self.leader.position(t);
        let snapshot: Vec<Vec<f64>> = self.agents.iter().map(|a| a.x.clone()).collect();
        self.announce_fault(t);
        let (controls, errors) = self.control_pass(t, &snapshot, &xr);
        self.record_row(t, &xr, &snapshot, &controls);

        for idx in 0..self.update_order.len() {
            let i = self.update_order[idx];
            self.track_bound_margin(&snapshot[i], t);
            let fault = self.fault.as_ref().filter(|f| f.agent == i);
            let dx = self.plant.derivative(fault, &snapshot[i], &controls[i], t)?;
            let agent = &mut self.agents[i];
            agent
                .detector
                .step(&self.plant, &snapshot[i], &controls[i], t, dt);
            if let Some(bank) = agent.bank.as_mut() {
                bank.step(&self.plant, &snapshot[i], &controls[i], t, dt);
            }
            for p in 0..n {
                let own = snapshot[i][p];
                let ctx = LawContext {
                    e: errors[i][p],
                    x: own,
                    phi: self.plant.known_at(p, own),
                    robust_gain: self.plant.bound_at(p, own, t) + self.leader.kappa[p],
                    error_bound: self.error_bound[p].eval(own, t),
                    layer: self.layer,
                };
                agent.law.adapt(p, &ctx, controls[i][p], dt);
                agent.x[p] = own + dt * dx[p];
            }
        }

        let t_next = (self.k + 1) as f64 * self.dt;
        self.decide(t_next)?;
        self.k += 1;
        Ok(())
    }

    fn announce_fault(&mut self, t: f64) {
        if let Some(f) = &self.fault {
            if !self.fault_announced && f.active(t) {
                self.events.push(Event {
                    t,
                    agent: f.agent,
                    kind: EventKind::FaultInjected,
                });
                self.fault_announced = true;
            }
        }
    }

    fn track_bound_margin(&mut self, x: &[f64], t: f64) {
        for p in 0..x.len() {
            let margin =
                self.plant.bound_at(p, x[p], t) - self.plant.uncertainty_at(p, x[p], t).abs();
            if margin < self.bound_margin {
                self.bound_margin = margin;
            }
        }
    }

    /// Diagnosis decisions on the just-advanced states. Detection arms the
    /// isolation bank; exclusion sweeps start on the following step, which
    /// keeps the isolation instant strictly later than detection.
    fn decide(&mut self, t_next: f64) -> Result<(), SimError> {
        let n = self.plant.state_dim();
        for i in 0..self.agents.len() {
            let agent = &mut self.agents[i];
            match agent.phase {
                DiagnosisPhase::Monitoring => {
                    if let Some(component) = agent.detector.first_breach(&agent.x) {
                        agent.phase = DiagnosisPhase::Detected {
                            at: t_next,
                            component,
                        };
                        self.events.push(Event {
                            t: t_next,
                            agent: i,
                            kind: EventKind::Detected { component },
                        });
                        agent.bank = Some(IsolationBank::activate(
                            &self.candidates,
                            &agent.x,
                            t_next,
                            self.gains.isolation_observer,
                            self.gains.isolation_adaptation,
                        )?);
                        if !self.disable_ftc {
                            let net = RbfNetwork::uniform(
                                self.rbf.neurons,
                                self.rbf.lo,
                                self.rbf.hi,
                                self.rbf.variance,
                                n,
                            )?;
                            agent.law = ControlLaw::Accommodation(AccommodationController::new(
                                net,
                                n,
                                self.effectiveness_floor,
                                AccommodationRates {
                                    weights: self.gains.approximator_adaptation,
                                    bound: self.gains.bounding_adaptation,
                                    effectiveness: self.gains.effectiveness_adaptation,
                                },
                            ));
                        }
                    }
                }
                DiagnosisPhase::Detected { at: detected_at, .. } => {
                    let bank = agent.bank.as_mut().expect("bank exists once detected");
                    for (candidate, component) in bank.sweep_exclusions(&agent.x, t_next) {
                        self.events.push(Event {
                            t: t_next,
                            agent: i,
                            kind: EventKind::CandidateExcluded {
                                candidate,
                                component,
                            },
                        });
                    }
                    match bank.verdict() {
                        BankVerdict::Pending => {}
                        BankVerdict::Isolated(candidate) => {
                            agent.phase = DiagnosisPhase::Isolated {
                                at: t_next,
                                candidate,
                                detected_at,
                            };
                            self.events.push(Event {
                                t: t_next,
                                agent: i,
                                kind: EventKind::Isolated { candidate },
                            });
                            if !self.disable_ftc {
                                let hypothesis = &self.candidates[candidate];
                                agent.law = match hypothesis.kind {
                                    FaultKind::Process => {
                                        ControlLaw::IsolatedProcess(ProcessFtc::new(
                                            hypothesis.basis,
                                            n,
                                            self.gains.post_isolation_adaptation,
                                        )?)
                                    }
                                    FaultKind::Actuator => {
                                        ControlLaw::IsolatedActuator(ActuatorFtc::new(
                                            hypothesis.params,
                                            n,
                                            self.gains.effectiveness_adaptation,
                                        ))
                                    }
                                };
                            }
                        }
                        BankVerdict::Exhausted => {
                            agent.phase = DiagnosisPhase::Unresolved {
                                at: t_next,
                                detected_at,
                            };
                            self.events.push(Event {
                                t: t_next,
                                agent: i,
                                kind: EventKind::Unresolved,
                            });
                            // No hypothesis survived; accommodation stays,
                            // being the broadest hedge available.
                        }
                    }
                }
                DiagnosisPhase::Isolated { .. } | DiagnosisPhase::Unresolved { .. } => {
                    // Terminal for the controller, but the bank keeps
                    // integrating so a late breach still goes on record.
                    if let Some(bank) = agent.bank.as_mut() {
                        for (candidate, component) in bank.sweep_exclusions(&agent.x, t_next) {
                            self.events.push(Event {
                                t: t_next,
                                agent: i,
                                kind: EventKind::CandidateExcluded {
                                    candidate,
                                    component,
                                },
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn record_row(&mut self, t: f64, xr: &[f64], snapshot: &[Vec<f64>], controls: &[Vec<f64>]) {
        let n = self.plant.state_dim();
        let r = self.candidates.len();
        let mut row = Vec::with_capacity(self.trace.columns().len());
        row.push(t);
        row.extend_from_slice(xr);
        for (i, agent) in self.agents.iter().enumerate() {
            row.extend_from_slice(&snapshot[i]);
            for p in 0..n {
                row.push(snapshot[i][p] - xr[p]);
            }
            row.extend_from_slice(&controls[i]);
            for p in 0..n {
                row.push(agent.detector.residual(&snapshot[i], p));
            }
            for p in 0..n {
                row.push(agent.detector.threshold(p));
            }
            for s in 0..r {
                match agent.bank.as_ref() {
                    Some(bank) => {
                        let est = &bank.estimators()[s];
                        for p in 0..n {
                            row.push(est.residual(&snapshot[i], p));
                        }
                        for p in 0..n {
                            row.push(est.threshold(p));
                        }
                        for p in 0..n {
                            row.push(est.theta_hat(p));
                        }
                    }
                    None => row.extend(std::iter::repeat(f64::NAN).take(3 * n)),
                }
            }
            row.push(agent.phase.index() as f64);
            for p in 0..n {
                row.push(agent.law.weight_norm(p).unwrap_or(f64::NAN));
            }
            for p in 0..n {
                row.push(agent.law.alpha_hat(p).unwrap_or(f64::NAN));
            }
            for p in 0..n {
                row.push(agent.law.theta_hat(p).unwrap_or(f64::NAN));
            }
        }
        if self.monitor {
            let values = self.monitor_values(t, snapshot, xr);
            row.extend(values);
        }
        self.trace.push_row(row);
    }

    /// Componentwise stability certificate: the quadratic form of the
    /// augmented disagreement vector under the undirected Laplacian, plus
    /// parameter estimation error terms in modes where the monitor knows
    /// the true parameter. Diagnostic only; never fed back.
    fn monitor_values(&self, t: f64, snapshot: &[Vec<f64>], xr: &[f64]) -> Vec<f64> {
        let n = self.plant.state_dim();
        let m = self.agents.len();
        let mut out = Vec::with_capacity(n);
        for p in 0..n {
            let mut value = 0.0;
            for a in 0..=m {
                let va = if a == m { xr[p] } else { snapshot[a][p] };
                for b in 0..=m {
                    let vb = if b == m { xr[p] } else { snapshot[b][p] };
                    value += self.psi[[a, b]] * va * vb;
                }
            }
            if let Some(fault) = self.fault.as_ref().filter(|f| f.active(t)) {
                let law = &self.agents[fault.agent].law;
                let term = match (law, fault.kind) {
                    (ControlLaw::IsolatedProcess(ftc), FaultKind::Process) => {
                        let err = fault.theta[p] - ftc.theta_hat(p);
                        Some(err * err / self.gains.post_isolation_adaptation)
                    }
                    (ControlLaw::IsolatedActuator(ftc), FaultKind::Actuator) => {
                        let err = fault.theta[p] - ftc.theta_hat(p);
                        Some(err * err / self.gains.effectiveness_adaptation)
                    }
                    (ControlLaw::Accommodation(acc), FaultKind::Actuator) => {
                        let err = fault.theta[p] - acc.theta_hat(p);
                        Some(err * err / self.gains.effectiveness_adaptation)
                    }
                    _ => None,
                };
                if let Some(term) = term {
                    value += term;
                }
            }
            out.push(value);
        }
        out
    }

    /// Four-stage step with all agents advanced stage-synchronously against
    /// common stage snapshots. Threshold filters keep their hold update over
    /// the full step; projections and clamps apply once at step end, the
    /// same granularity as the one-stage path.
    fn step_rk4(&mut self) -> Result<(), SimError> {
        let t = self.t();
        let dt = self.dt;
        let xr = self.leader.position(t);
        let snapshot: Vec<Vec<f64>> = self.agents.iter().map(|a| a.x.clone()).collect();
        self.announce_fault(t);
        let (controls, _) = self.control_pass(t, &snapshot, &xr);
        self.record_row(t, &xr, &snapshot, &controls);

        for &i in &self.update_order.clone() {
            self.track_bound_margin(&snapshot[i], t);
            let agent = &mut self.agents[i];
            agent
                .detector
                .advance_threshold(&self.plant, &snapshot[i], t, dt);
            if let Some(bank) = agent.bank.as_mut() {
                bank.advance_thresholds(&self.plant, &snapshot[i], &controls[i], t, dt);
            }
        }

        let w0 = self.pack_world();
        let k1 = self.world_rhs(t, &w0)?;
        let w_mid1: Vec<f64> = w0
            .iter()
            .zip(&k1)
            .map(|(w, k)| w + 0.5 * dt * k)
            .collect();
        let k2 = self.world_rhs(t + 0.5 * dt, &w_mid1)?;
        let w_mid2: Vec<f64> = w0
            .iter()
            .zip(&k2)
            .map(|(w, k)| w + 0.5 * dt * k)
            .collect();
        let k3 = self.world_rhs(t + 0.5 * dt, &w_mid2)?;
        let w_end: Vec<f64> = w0.iter().zip(&k3).map(|(w, k)| w + dt * k).collect();
        let k4 = self.world_rhs(t + dt, &w_end)?;
        let w1: Vec<f64> = (0..w0.len())
            .map(|j| w0[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        self.unpack_world(&w1);

        let t_next = (self.k + 1) as f64 * self.dt;
        self.decide(t_next)?;
        self.k += 1;
        Ok(())
    }

    /// Continuous state of the whole network in one flat vector. Layout per
    /// agent: plant state, detector estimate, per-candidate estimator state
    /// and parameter (excluded candidates included, held constant), then
    /// the active law's adaptive state.
    fn pack_world(&self) -> Vec<f64> {
        let mut w = Vec::new();
        for agent in &self.agents {
            w.extend_from_slice(&agent.x);
            w.extend_from_slice(&agent.detector.x_hat);
            if let Some(bank) = agent.bank.as_ref() {
                for est in bank.estimators() {
                    w.extend_from_slice(&est.x_hat);
                    w.extend_from_slice(&est.theta_hat);
                }
            }
            match &agent.law {
                ControlLaw::Baseline => {}
                ControlLaw::Accommodation(acc) => {
                    for weights in &acc.net.weights {
                        w.extend_from_slice(weights);
                    }
                    w.extend_from_slice(&acc.alpha_hat);
                    w.extend_from_slice(&acc.theta_hat);
                }
                ControlLaw::IsolatedProcess(ftc) => w.extend_from_slice(&ftc.theta_hat),
                ControlLaw::IsolatedActuator(ftc) => w.extend_from_slice(&ftc.theta_hat),
            }
        }
        w
    }

    fn unpack_world(&mut self, w: &[f64]) {
        let mut cursor = 0;
        let mut take = |len: usize| {
            let slice = &w[cursor..cursor + len];
            cursor += len;
            slice
        };
        let n = self.plant.state_dim();
        for agent in &mut self.agents {
            agent.x.copy_from_slice(take(n));
            agent.detector.x_hat.copy_from_slice(take(n));
            if let Some(bank) = agent.bank.as_mut() {
                for est in bank.estimators_mut() {
                    let x_hat = take(n);
                    let theta = take(n);
                    if est.excluded().is_none() {
                        est.x_hat.copy_from_slice(x_hat);
                        for p in 0..n {
                            est.theta_hat[p] = est.params.project(theta[p]);
                        }
                    }
                }
            }
            match &mut agent.law {
                ControlLaw::Baseline => {}
                ControlLaw::Accommodation(acc) => {
                    for p in 0..acc.net.weights.len() {
                        let count = acc.net.weights[p].len();
                        acc.net.weights[p].copy_from_slice(take(count));
                    }
                    acc.alpha_hat.copy_from_slice(take(n));
                    let floor = acc.clamp_lower;
                    for (p, value) in take(n).iter().enumerate() {
                        acc.theta_hat[p] = value.clamp(floor, 0.0);
                    }
                }
                ControlLaw::IsolatedProcess(ftc) => ftc.theta_hat.copy_from_slice(take(n)),
                ControlLaw::IsolatedActuator(ftc) => {
                    for (p, value) in take(n).iter().enumerate() {
                        ftc.theta_hat[p] = ftc.params.project(*value);
                    }
                }
            }
        }
        debug_assert_eq!(cursor, w.len());
    }

    /// Time derivative of the packed vector at stage time `t`. Controls are
    /// recomputed from the stage state, including stage values of every
    /// adaptive parameter; constrained parameters are clamped for control
    /// evaluation but integrated raw.
    fn world_rhs(&self, t: f64, w: &[f64]) -> Result<Vec<f64>, SimError> {
        let n = self.plant.state_dim();
        let m = self.agents.len();
        let xr = self.leader.position(t);

        // Stage views: per-agent offset of each block in the flat vector.
        let mut x_off = vec![0usize; m];
        let mut cursor = 0;
        for (i, agent) in self.agents.iter().enumerate() {
            x_off[i] = cursor;
            cursor += 2 * n;
            if let Some(bank) = agent.bank.as_ref() {
                cursor += 2 * n * bank.estimators().len();
            }
            cursor += match &agent.law {
                ControlLaw::Baseline => 0,
                ControlLaw::Accommodation(acc) => n * acc.net.neuron_count() + 2 * n,
                ControlLaw::IsolatedProcess(_) | ControlLaw::IsolatedActuator(_) => n,
            };
        }
        debug_assert_eq!(cursor, w.len());

        // Stage laws: clone the structure, load stage parameter values.
        let mut stage_laws: Vec<ControlLaw> = Vec::with_capacity(m);
        for (i, agent) in self.agents.iter().enumerate() {
            let mut law = agent.law.clone();
            let mut at = x_off[i] + 2 * n;
            if let Some(bank) = agent.bank.as_ref() {
                at += 2 * n * bank.estimators().len();
            }
            match &mut law {
                ControlLaw::Baseline => {}
                ControlLaw::Accommodation(acc) => {
                    let count = acc.net.neuron_count();
                    for p in 0..n {
                        acc.net.weights[p].copy_from_slice(&w[at..at + count]);
                        at += count;
                    }
                    acc.alpha_hat.copy_from_slice(&w[at..at + n]);
                    at += n;
                    for p in 0..n {
                        acc.theta_hat[p] = w[at + p].clamp(acc.clamp_lower, 0.0);
                    }
                }
                ControlLaw::IsolatedProcess(ftc) => {
                    ftc.theta_hat.copy_from_slice(&w[at..at + n]);
                }
                ControlLaw::IsolatedActuator(ftc) => {
                    for p in 0..n {
                        ftc.theta_hat[p] = ftc.params.project(w[at + p]);
                    }
                }
            }
            stage_laws.push(law);
        }

        // Stage controls from stage states.
        let mut controls = vec![vec![0.0; n]; m];
        let mut errors = vec![vec![0.0; n]; m];
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for i in 0..m {
            let neighbors = self.topology.neighbors(i);
            for p in 0..n {
                let own = w[x_off[i] + p];
                pairs.clear();
                pairs.extend(neighbors.iter().map(|&(j, weight)| {
                    let other = if j == m { xr[p] } else { w[x_off[j] + p] };
                    (weight, other)
                }));
                let e = consensus_error(own, &pairs);
                let ctx = LawContext {
                    e,
                    x: own,
                    phi: self.plant.known_at(p, own),
                    robust_gain: self.plant.bound_at(p, own, t) + self.leader.kappa[p],
                    error_bound: self.error_bound[p].eval(own, t),
                    layer: self.layer,
                };
                controls[i][p] = stage_laws[i].control(p, &ctx);
                errors[i][p] = e;
            }
        }

        // Derivatives, walking the same layout.
        let mut dw = vec![0.0; w.len()];
        let mut at = 0;
        for i in 0..m {
            let agent = &self.agents[i];
            let x = &w[at..at + n];
            let fault = self.fault.as_ref().filter(|f| f.agent == i);
            let dx = self.plant.derivative(fault, x, &controls[i], t)?;
            dw[at..at + n].copy_from_slice(&dx);
            at += n;
            let gain = agent.detector.gain;
            for p in 0..n {
                let x_hat = w[at + p];
                dw[at + p] =
                    self.plant.known_at(p, x[p]) + controls[i][p] + gain * (x[p] - x_hat);
            }
            at += n;
            if let Some(bank) = agent.bank.as_ref() {
                for est in bank.estimators() {
                    if est.excluded().is_some() {
                        at += 2 * n;
                        continue;
                    }
                    let lambda = est.observer_gain;
                    let rate = est.learning_rate;
                    for p in 0..n {
                        let g = est.regressor(x[p], controls[i][p]);
                        let residual = x[p] - w[at + p];
                        dw[at + p] = self.plant.known_at(p, x[p])
                            + controls[i][p]
                            + lambda * residual
                            + w[at + n + p] * g;
                        dw[at + n + p] = rate * g * residual;
                    }
                    at += 2 * n;
                }
            }
            match &stage_laws[i] {
                ControlLaw::Baseline => {}
                ControlLaw::Accommodation(acc) => {
                    let count = acc.net.neuron_count();
                    for p in 0..n {
                        for j in 0..count {
                            dw[at + j] =
                                acc.rates.weights * errors[i][p] * acc.net.basis(j, x[p]);
                        }
                        at += count;
                    }
                    for p in 0..n {
                        let bound = self.error_bound[p].eval(x[p], t);
                        dw[at + p] = acc.rates.bound * errors[i][p].abs() * bound;
                    }
                    at += n;
                    for p in 0..n {
                        dw[at + p] = acc.rates.effectiveness * errors[i][p] * controls[i][p];
                    }
                    at += n;
                }
                ControlLaw::IsolatedProcess(ftc) => {
                    for p in 0..n {
                        dw[at + p] =
                            ftc.rate * errors[i][p] * ftc.basis.eval(x[p], 0.0);
                    }
                    at += n;
                }
                ControlLaw::IsolatedActuator(ftc) => {
                    for p in 0..n {
                        dw[at + p] = ftc.rate * errors[i][p] * controls[i][p];
                    }
                    at += n;
                }
            }
        }
        debug_assert_eq!(at, w.len());
        Ok(dw)
    }
}

fn trace_columns(m: usize, n: usize, r: usize, monitor: bool) -> Vec<String> {
    let mut cols = Vec::new();
    cols.push("t".to_string());
    for p in 1..=n {
        cols.push(format!("xr_{p}"));
    }
    for i in 1..=m {
        for p in 1..=n {
            cols.push(format!("x_{i}_{p}"));
        }
        for p in 1..=n {
            cols.push(format!("err_{i}_{p}"));
        }
        for p in 1..=n {
            cols.push(format!("u_{i}_{p}"));
        }
        for p in 1..=n {
            cols.push(format!("eps_{i}_{p}"));
        }
        for p in 1..=n {
            cols.push(format!("nu_{i}_{p}"));
        }
        for s in 1..=r {
            for p in 1..=n {
                cols.push(format!("fie{s}_eps_{i}_{p}"));
            }
            for p in 1..=n {
                cols.push(format!("fie{s}_mu_{i}_{p}"));
            }
            for p in 1..=n {
                cols.push(format!("fie{s}_theta_{i}_{p}"));
            }
        }
        cols.push(format!("mode_{i}"));
        for p in 1..=n {
            cols.push(format!("vartheta_norm_{i}_{p}"));
        }
        for p in 1..=n {
            cols.push(format!("alpha_hat_{i}_{p}"));
        }
        for p in 1..=n {
            cols.push(format!("theta_hat_{i}_{p}"));
        }
    }
    if monitor {
        for p in 1..=n {
            cols.push(format!("V_{p}"));
        }
    }
    cols
}
