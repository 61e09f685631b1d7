//! Residual-based fault detection and isolation.
//!
//! Each agent runs one detection observer from the start of the run and, on
//! its first residual breach, activates a bank of isolation estimators, one
//! per fault candidate. Every residual is compared against an adaptive
//! threshold built so that no breach can occur while the hypothesis the
//! filter encodes is true: detection thresholds assume the healthy model,
//! isolation thresholds assume the candidate fault with its parameter
//! anywhere in the admissible set.
//!
//! Threshold filters advance by exact discretization of the scalar relation
//! `dz/dt = -a z + w` under a zero-order hold on `w`:
//!
//! ```text
//! z(t+dt) = exp(-a dt) z(t) + (1 - exp(-a dt)) / a * w(t)
//! ```
//!
//! A forward-Euler threshold would sit about `a*dt/2` relative below the
//! true filter response and silently erode the no-false-alarm margin; the
//! hold form matches the continuous filter exactly for piecewise constant
//! drive, so thresholds stay conservative at any step size.

use thiserror::Error;

use crate::plant::{FaultCandidate, FaultKind, ParamSet, PlantModel};
use crate::registry::FaultBasis;

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("fault class is empty, nothing to isolate")]
    EmptyFaultClass,
    #[error("state has {got} components, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Decay factor and drive gain of the exact hold discretization.
fn hold_coefficients(gain: f64, dt: f64) -> (f64, f64) {
    let decay = (-gain * dt).exp();
    (decay, (1.0 - decay) / gain)
}

/// Detection observer with componentwise adaptive thresholds.
///
/// The observer copies the known dynamics and pulls its state toward the
/// measurement; the threshold integrates the disturbance envelope through
/// the same filter pole, so `|x - x_hat| <= nu` holds for every healthy
/// trajectory regardless of the control input.
#[derive(Clone, Debug)]
pub struct FaultDetector {
    pub(crate) gain: f64,
    pub(crate) x_hat: Vec<f64>,
    threshold: Vec<f64>,
}

impl FaultDetector {
    /// `initial_spread` bounds `|x(0) - x_hat(0)|` componentwise; it seeds
    /// the threshold so the initial estimation error decays inside it.
    pub fn new(gain: f64, x0: &[f64], initial_spread: &[f64]) -> Self {
        FaultDetector {
            gain,
            x_hat: x0.to_vec(),
            threshold: initial_spread.to_vec(),
        }
    }

    pub fn residual(&self, x: &[f64], p: usize) -> f64 {
        x[p] - self.x_hat[p]
    }

    pub fn threshold(&self, p: usize) -> f64 {
        self.threshold[p]
    }

    /// First component whose residual strictly exceeds its threshold.
    pub fn first_breach(&self, x: &[f64]) -> Option<usize> {
        (0..self.x_hat.len()).find(|&p| self.residual(x, p).abs() > self.threshold[p])
    }

    /// Advances observer and threshold one step using time-`t` values.
    pub fn step(&mut self, plant: &PlantModel, x: &[f64], u: &[f64], t: f64, dt: f64) {
        self.advance_threshold(plant, x, t, dt);
        self.advance_observer(plant, x, u, dt);
    }

    /// Threshold filter only; the multi-stage integrator drives the observer
    /// separately but holds threshold drives over the whole step.
    pub(crate) fn advance_threshold(&mut self, plant: &PlantModel, x: &[f64], t: f64, dt: f64) {
        let (decay, drive) = hold_coefficients(self.gain, dt);
        for p in 0..self.x_hat.len() {
            let envelope = plant.bound_at(p, x[p], t);
            self.threshold[p] = decay * self.threshold[p] + drive * envelope;
        }
    }

    fn advance_observer(&mut self, plant: &PlantModel, x: &[f64], u: &[f64], dt: f64) {
        for p in 0..self.x_hat.len() {
            let rhs = plant.known_at(p, x[p]) + u[p] + self.gain * (x[p] - self.x_hat[p]);
            self.x_hat[p] += dt * rhs;
        }
    }
}

/// Why and when an isolation estimator dropped out of the running.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exclusion {
    pub t: f64,
    pub component: usize,
}

/// Adaptive observer testing one fault hypothesis.
///
/// While the hypothesis matches the actual fault, the parameter estimate
/// converges inside the admissible set and the residual stays below the
/// threshold; a mismatched hypothesis eventually drives the residual out.
#[derive(Clone, Debug)]
pub struct IsolationEstimator {
    kind: FaultKind,
    basis: FaultBasis,
    pub(crate) params: ParamSet,
    ball_center: f64,
    ball_radius: f64,
    pub(crate) observer_gain: f64,
    pub(crate) learning_rate: f64,
    pub(crate) x_hat: Vec<f64>,
    pub(crate) theta_hat: Vec<f64>,
    threshold: Vec<f64>,
    excluded: Option<Exclusion>,
}

impl IsolationEstimator {
    fn activate(candidate: &FaultCandidate, x: &[f64], observer_gain: f64, learning_rate: f64) -> Self {
        let (ball_center, ball_radius) = candidate.params.enclosing_ball();
        IsolationEstimator {
            kind: candidate.kind,
            basis: candidate.basis,
            params: candidate.params,
            ball_center,
            ball_radius,
            observer_gain,
            learning_rate,
            // Estimator state snaps to the measurement at activation, so the
            // threshold starts from zero rather than from an initial spread.
            x_hat: x.to_vec(),
            theta_hat: vec![ball_center; x.len()],
            threshold: vec![0.0; x.len()],
            excluded: None,
        }
    }

    pub fn kind(&self) -> FaultKind {
        self.kind
    }

    pub fn residual(&self, x: &[f64], p: usize) -> f64 {
        x[p] - self.x_hat[p]
    }

    pub fn threshold(&self, p: usize) -> f64 {
        self.threshold[p]
    }

    pub fn theta_hat(&self, p: usize) -> f64 {
        self.theta_hat[p]
    }

    pub fn excluded(&self) -> Option<Exclusion> {
        self.excluded
    }

    fn first_breach(&self, x: &[f64]) -> Option<usize> {
        (0..self.x_hat.len()).find(|&p| self.residual(x, p).abs() > self.threshold[p])
    }

    /// The regressor this hypothesis applies to the plant input.
    pub(crate) fn regressor(&self, x_p: f64, u_p: f64) -> f64 {
        match self.kind {
            FaultKind::Process => self.basis.eval(x_p, u_p),
            // Effectiveness loss enters as theta * u on the input channel.
            FaultKind::Actuator => u_p,
        }
    }

    /// One estimator step from time-`t` values. Threshold first (it needs
    /// the pre-update parameter distance), then observer, then adaptation
    /// with projection back onto the admissible set.
    fn step(&mut self, plant: &PlantModel, x: &[f64], u: &[f64], t: f64, dt: f64) {
        self.advance_threshold(plant, x, u, t, dt);
        self.advance_estimates(plant, x, u, dt);
    }

    /// Threshold filter only, driven by pre-update parameter distance.
    pub(crate) fn advance_threshold(&mut self, plant: &PlantModel, x: &[f64], u: &[f64], t: f64, dt: f64) {
        let (decay, drive) = hold_coefficients(self.observer_gain, dt);
        for p in 0..self.x_hat.len() {
            let g = self.regressor(x[p], u[p]);
            let spread = self.ball_radius + (self.theta_hat[p] - self.ball_center).abs();
            let envelope = plant.bound_at(p, x[p], t);
            self.threshold[p] = decay * self.threshold[p] + drive * (envelope + spread * g.abs());
        }
    }

    fn advance_estimates(&mut self, plant: &PlantModel, x: &[f64], u: &[f64], dt: f64) {
        for p in 0..self.x_hat.len() {
            let g = self.regressor(x[p], u[p]);
            let residual = x[p] - self.x_hat[p];
            let rhs = plant.known_at(p, x[p])
                + u[p]
                + self.observer_gain * residual
                + self.theta_hat[p] * g;
            self.x_hat[p] += dt * rhs;
            self.theta_hat[p] = self
                .params
                .project(self.theta_hat[p] + dt * self.learning_rate * g * residual);
        }
    }
}

/// Outcome of the exclusion process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankVerdict {
    /// More than one hypothesis still alive.
    Pending,
    /// Exactly one hypothesis left; its index in the candidate list.
    Isolated(usize),
    /// Every hypothesis excluded: the fault lies outside the class.
    Exhausted,
}

/// Bank of isolation estimators activated at detection time.
#[derive(Clone, Debug)]
pub struct IsolationBank {
    activated_at: f64,
    estimators: Vec<IsolationEstimator>,
}

impl IsolationBank {
    pub fn activate(
        candidates: &[FaultCandidate],
        x: &[f64],
        t: f64,
        observer_gain: f64,
        learning_rate: f64,
    ) -> Result<Self, DiagnosisError> {
        if candidates.is_empty() {
            return Err(DiagnosisError::EmptyFaultClass);
        }
        Ok(IsolationBank {
            activated_at: t,
            estimators: candidates
                .iter()
                .map(|c| IsolationEstimator::activate(c, x, observer_gain, learning_rate))
                .collect(),
        })
    }

    pub fn activated_at(&self) -> f64 {
        self.activated_at
    }

    pub fn estimators(&self) -> &[IsolationEstimator] {
        &self.estimators
    }

    /// Advances the still-alive estimators; excluded ones stay frozen so a
    /// trace shows the state they were excluded in.
    pub fn step(&mut self, plant: &PlantModel, x: &[f64], u: &[f64], t: f64, dt: f64) {
        for estimator in &mut self.estimators {
            if estimator.excluded.is_none() {
                estimator.step(plant, x, u, t, dt);
            }
        }
    }

    /// Threshold filters only, for integrators that advance the estimates
    /// elsewhere.
    pub(crate) fn advance_thresholds(&mut self, plant: &PlantModel, x: &[f64], u: &[f64], t: f64, dt: f64) {
        for estimator in &mut self.estimators {
            if estimator.excluded.is_none() {
                estimator.advance_threshold(plant, x, u, t, dt);
            }
        }
    }

    pub(crate) fn estimators_mut(&mut self) -> &mut [IsolationEstimator] {
        &mut self.estimators
    }

    /// Excludes every alive estimator whose residual strictly exceeds its
    /// threshold, returning `(candidate, component)` per new exclusion.
    pub fn sweep_exclusions(&mut self, x: &[f64], t: f64) -> Vec<(usize, usize)> {
        let mut fired = Vec::new();
        for (s, estimator) in self.estimators.iter_mut().enumerate() {
            if estimator.excluded.is_none() {
                if let Some(component) = estimator.first_breach(x) {
                    estimator.excluded = Some(Exclusion { t, component });
                    fired.push((s, component));
                }
            }
        }
        fired
    }

    pub fn verdict(&self) -> BankVerdict {
        let alive: Vec<usize> = self
            .estimators
            .iter()
            .enumerate()
            .filter(|(_, e)| e.excluded.is_none())
            .map(|(s, _)| s)
            .collect();
        match alive.len() {
            0 => BankVerdict::Exhausted,
            1 => BankVerdict::Isolated(alive[0]),
            _ => BankVerdict::Pending,
        }
    }
}

/// Per-agent diagnosis state machine. Phases only ever move forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DiagnosisPhase {
    Monitoring,
    Detected {
        at: f64,
        component: usize,
    },
    Isolated {
        at: f64,
        candidate: usize,
        detected_at: f64,
    },
    Unresolved {
        at: f64,
        detected_at: f64,
    },
}

impl DiagnosisPhase {
    /// Numeric encoding used in trace files: 0 monitoring, 1 detected,
    /// 2 isolated, 3 unresolved.
    pub fn index(&self) -> u8 {
        match self {
            DiagnosisPhase::Monitoring => 0,
            DiagnosisPhase::Detected { .. } => 1,
            DiagnosisPhase::Isolated { .. } => 2,
            DiagnosisPhase::Unresolved { .. } => 3,
        }
    }

    pub fn detection_time(&self) -> Option<f64> {
        match *self {
            DiagnosisPhase::Monitoring => None,
            DiagnosisPhase::Detected { at, .. } => Some(at),
            DiagnosisPhase::Isolated { detected_at, .. } => Some(detected_at),
            DiagnosisPhase::Unresolved { detected_at, .. } => Some(detected_at),
        }
    }

    pub fn isolation_time(&self) -> Option<f64> {
        match *self {
            DiagnosisPhase::Isolated { at, .. } => Some(at),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::FaultSpec;
    use crate::registry::Field;

    fn integrator_with_bound(bound: f64) -> PlantModel {
        PlantModel::new(
            1,
            vec![Field::Zero],
            vec![Field::Zero],
            vec![Field::Constant { value: bound }],
        )
        .unwrap()
    }

    #[test]
    fn threshold_decay_matches_closed_form_exactly() {
        // Zero envelope, unit initial spread: nu(t) = exp(-2 t).
        let plant = integrator_with_bound(0.0);
        let mut det = FaultDetector::new(2.0, &[0.0], &[1.0]);
        let dt = 1e-3;
        for k in 0..1000 {
            det.step(&plant, &[0.0], &[0.0], k as f64 * dt, dt);
        }
        let expected = (-2.0_f64).exp();
        assert!((det.threshold(0) - expected).abs() < 1e-12);
        assert!((expected - 0.1353352832366127).abs() < 1e-15);
    }

    #[test]
    fn threshold_rise_matches_closed_form_exactly() {
        // Constant envelope 0.6, zero spread: nu(t) = 0.3 (1 - exp(-2 t)).
        let plant = integrator_with_bound(0.6);
        let mut det = FaultDetector::new(2.0, &[0.0], &[0.0]);
        let dt = 1e-3;
        for k in 0..5000 {
            let t = k as f64 * dt;
            let expected = 0.3 * (1.0 - (-2.0 * t).exp());
            assert!(
                (det.threshold(0) - expected).abs() <= 1e-12 + 1e-9 * expected,
                "t={t}: {} vs {expected}",
                det.threshold(0)
            );
            det.step(&plant, &[0.0], &[0.0], t, dt);
        }
        // Steady state of the filter is envelope / gain.
        assert!((det.threshold(0) - 0.3).abs() < 2e-5);
    }

    #[test]
    fn detection_requires_a_strict_crossing() {
        let plant = integrator_with_bound(0.6);
        let mut det = FaultDetector::new(2.0, &[0.0], &[0.0]);
        for k in 0..3000 {
            det.step(&plant, &[0.0], &[0.0], k as f64 * 1e-3, 1e-3);
        }
        // Residual below, at, and just above the threshold.
        let nu = det.threshold(0);
        assert!(det.first_breach(&[0.29_f64.min(nu * 0.97)]).is_none());
        assert!(det.first_breach(&[nu]).is_none());
        assert!(det.first_breach(&[nu * (1.0 + 1e-9)]).is_some());
    }

    #[test]
    fn healthy_run_never_breaches_detector_threshold() {
        // Disturbance strictly inside its envelope, arbitrary input.
        let plant = PlantModel::new(
            1,
            vec![Field::Zero],
            vec![Field::Sinusoid {
                amp: 0.5,
                omega: 1.0,
                phase: 0.4,
            }],
            vec![Field::Constant { value: 0.6 }],
        )
        .unwrap();
        let mut det = FaultDetector::new(2.0, &[0.3], &[0.0]);
        let mut x = [0.3];
        let dt = 1e-3;
        for k in 0..20_000 {
            let t = k as f64 * dt;
            let u = [(0.7 * t).cos()];
            det.step(&plant, &x, &u, t, dt);
            let dx = plant.derivative(None, &x, &u, t).unwrap();
            x[0] += dt * dx[0];
            assert!(det.first_breach(&x).is_none(), "false alarm at t={t}");
        }
    }

    fn process_candidate() -> FaultCandidate {
        FaultCandidate {
            kind: FaultKind::Process,
            basis: FaultBasis::X2CosX,
            params: ParamSet::Sphere {
                center: 0.5,
                radius: 0.5,
            },
        }
    }

    fn actuator_candidate() -> FaultCandidate {
        FaultCandidate {
            kind: FaultKind::Actuator,
            basis: FaultBasis::Input,
            params: ParamSet::Sphere {
                center: -0.4,
                radius: 0.4,
            },
        }
    }

    #[test]
    fn empty_candidate_list_is_rejected() {
        assert!(matches!(
            IsolationBank::activate(&[], &[0.0], 1.0, 10.0, 2.0),
            Err(DiagnosisError::EmptyFaultClass)
        ));
    }

    #[test]
    fn isolation_threshold_steady_state_under_zero_regressor() {
        // At x = 0 and u = 0 both benchmark regressors vanish, so the
        // threshold settles at envelope / gain = 0.6 / 10.
        let plant = integrator_with_bound(0.6);
        let bank_x = [0.0];
        let mut bank =
            IsolationBank::activate(&[process_candidate()], &bank_x, 0.0, 10.0, 2.0).unwrap();
        for k in 0..3000 {
            bank.step(&plant, &[0.0], &[0.0], k as f64 * 1e-3, 1e-3);
        }
        let mu = bank.estimators()[0].threshold(0);
        assert!((mu - 0.06).abs() < 1e-9, "mu = {mu}");
    }

    #[test]
    fn matched_estimator_stays_alive_mismatched_is_excluded() {
        // True fault: effectiveness loss theta = -0.8 from t = 0 on a plant
        // whose disturbance sits strictly inside the envelope. The actuator
        // hypothesis must survive; the process hypothesis must go.
        let plant = PlantModel::new(
            1,
            vec![Field::Zero],
            vec![Field::Sinusoid {
                amp: 0.5,
                omega: 1.0,
                phase: 0.0,
            }],
            vec![Field::Constant { value: 0.6 }],
        )
        .unwrap();
        let fault = FaultSpec {
            agent: 0,
            kind: FaultKind::Actuator,
            basis: FaultBasis::Input,
            theta: vec![-0.8],
            occurrence_time: 0.0,
            class_index: 1,
        };
        let mut x = [2.0];
        let mut bank = IsolationBank::activate(
            &[process_candidate(), actuator_candidate()],
            &x,
            0.0,
            10.0,
            2.0,
        )
        .unwrap();
        let dt = 1e-3;
        let mut excluded = Vec::new();
        for k in 0..6000 {
            let t = k as f64 * dt;
            // Stabilizing input keeps the trajectory interesting.
            let u = [-2.0 * x[0] + 3.0 * (1.3 * t).cos()];
            bank.step(&plant, &x, &u, t, dt);
            let dx = plant.derivative(Some(&fault), &x, &u, t).unwrap();
            x[0] += dt * dx[0];
            excluded.extend(bank.sweep_exclusions(&x, t + dt));
        }
        assert_eq!(excluded.len(), 1);
        assert_eq!(excluded[0].0, 0, "process hypothesis should be excluded");
        assert_eq!(bank.verdict(), BankVerdict::Isolated(1));
        // Matched estimator's parameter estimate stays in its set.
        let theta = bank.estimators()[1].theta_hat(0);
        assert!((-0.8..=0.0).contains(&theta));
    }

    #[test]
    fn exclusions_are_permanent_and_frozen() {
        let plant = integrator_with_bound(0.0);
        let mut bank =
            IsolationBank::activate(&[process_candidate()], &[1.0], 0.0, 10.0, 2.0).unwrap();
        // Force a breach by teleporting the measurement.
        let fired = bank.sweep_exclusions(&[5.0], 0.5);
        assert_eq!(fired, vec![(0, 0)]);
        assert_eq!(bank.verdict(), BankVerdict::Exhausted);
        let frozen = bank.estimators()[0].x_hat[0];
        // Further steps and sweeps change nothing.
        bank.step(&plant, &[9.0], &[0.0], 0.5, 1e-3);
        assert!(bank.sweep_exclusions(&[9.0], 0.6).is_empty());
        assert_eq!(bank.estimators()[0].x_hat[0], frozen);
        assert_eq!(bank.estimators()[0].excluded().unwrap().t, 0.5);
    }

    #[test]
    fn singleton_class_isolates_vacuously() {
        let bank = IsolationBank::activate(&[process_candidate()], &[0.0], 1.0, 10.0, 2.0).unwrap();
        assert_eq!(bank.verdict(), BankVerdict::Isolated(0));
    }

    #[test]
    fn adaptation_respects_projection() {
        // Huge learning rate slams the estimate against the set boundary;
        // projection must hold it exactly on the sphere.
        let plant = integrator_with_bound(0.6);
        let mut bank =
            IsolationBank::activate(&[process_candidate()], &[2.0], 0.0, 10.0, 500.0).unwrap();
        let mut x = [2.0];
        for k in 0..200 {
            let t = k as f64 * 1e-3;
            bank.step(&plant, &x, &[1.0], t, 1e-3);
            x[0] += 1e-3 * (x[0] * x[0] * x[0].cos());
            let theta = bank.estimators()[0].theta_hat(0);
            assert!((theta - 0.5).abs() <= 0.5 + 1e-15, "theta = {theta}");
        }
    }

    #[test]
    fn phase_indices_are_ordered() {
        let phases = [
            DiagnosisPhase::Monitoring,
            DiagnosisPhase::Detected {
                at: 1.0,
                component: 0,
            },
            DiagnosisPhase::Isolated {
                at: 2.0,
                candidate: 0,
                detected_at: 1.0,
            },
            DiagnosisPhase::Unresolved {
                at: 2.0,
                detected_at: 1.0,
            },
        ];
        for pair in phases.windows(2) {
            assert!(pair[0].index() < pair[1].index());
        }
        assert_eq!(phases[2].detection_time(), Some(1.0));
        assert_eq!(phases[2].isolation_time(), Some(2.0));
        assert_eq!(phases[0].detection_time(), None);
    }
}
