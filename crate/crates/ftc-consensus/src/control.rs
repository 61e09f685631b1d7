//! Control laws: baseline cooperative tracking, adaptive accommodation
//! after detection, and the two specialized post-isolation laws.
//!
//! All four laws share one core expression
//!
//! ```text
//! u = -e - phi - cancel - robust_gain * sgn(e)
//! ```
//!
//! and differ only in the cancellation term and an optional input rescale.
//! Writing them through the same helper makes the degenerate cases reduce
//! to the baseline law bit for bit, which the tests pin down.

use thiserror::Error;

use crate::plant::ParamSet;
use crate::registry::FaultBasis;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("approximator needs at least one neuron")]
    NoNeurons,
    #[error("center range is empty: [{0}, {1}]")]
    EmptyCenterRange(f64, f64),
    #[error("radial variance must be positive, got {0}")]
    NonpositiveVariance(f64),
    #[error("input-driven regressor cannot cancel a process fault")]
    InputBasisInProcessLaw,
}

/// Signum with an optional boundary layer.
///
/// `layer == 0` gives the exact sign, with `sgn(0) = 0` so the control never
/// injects effort at equilibrium. A positive layer smooths the switch into
/// `z / (|z| + layer)` for chattering-free integration.
pub fn sgn(z: f64, layer: f64) -> f64 {
    if layer > 0.0 {
        z / (z.abs() + layer)
    } else if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted disagreement with the listed neighbors: `sum w * (own - other)`.
/// Neighbor order is fixed by the caller; keep it deterministic.
pub fn consensus_error(own: f64, neighbors: &[(f64, f64)]) -> f64 {
    let mut e = 0.0;
    for &(weight, other) in neighbors {
        e += weight * (own - other);
    }
    e
}

/// Shared core of every law. `cancel` is whatever the mode subtracts beyond
/// the known dynamics: zero for baseline, the approximator plus the bounding
/// term during accommodation, the learned fault term after isolation.
fn robust_law(e: f64, phi: f64, cancel: f64, robust_gain: f64, layer: f64) -> f64 {
    -e - phi - cancel - robust_gain * sgn(e, layer)
}

pub fn baseline_control(e: f64, phi: f64, robust_gain: f64, layer: f64) -> f64 {
    robust_law(e, phi, 0.0, robust_gain, layer)
}

/// Gaussian radial network, one scalar input per state component.
#[derive(Clone, Debug)]
pub struct RbfNetwork {
    centers: Vec<f64>,
    variance: f64,
    /// `weights[p][j]` multiplies basis `j` for component `p`.
    pub(crate) weights: Vec<Vec<f64>>,
}

impl RbfNetwork {
    /// Evenly spaced centers over `[lo, hi]`, zero initial weights.
    pub fn uniform(
        count: usize,
        lo: f64,
        hi: f64,
        variance: f64,
        components: usize,
    ) -> Result<Self, ControlError> {
        if count == 0 {
            return Err(ControlError::NoNeurons);
        }
        if count > 1 && !(hi > lo) {
            return Err(ControlError::EmptyCenterRange(lo, hi));
        }
        if !(variance > 0.0) {
            return Err(ControlError::NonpositiveVariance(variance));
        }
        let centers = if count == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            let spacing = (hi - lo) / (count - 1) as f64;
            (0..count).map(|j| lo + j as f64 * spacing).collect()
        };
        Ok(RbfNetwork {
            centers,
            variance,
            weights: vec![vec![0.0; count]; components],
        })
    }

    pub fn basis(&self, j: usize, z: f64) -> f64 {
        let d = z - self.centers[j];
        (-d * d / (2.0 * self.variance)).exp()
    }

    pub fn eval(&self, p: usize, z: f64) -> f64 {
        let mut out = 0.0;
        for j in 0..self.centers.len() {
            out += self.weights[p][j] * self.basis(j, z);
        }
        out
    }

    /// Gradient step `w_pj += scale * basis_j(z)` for all `j`.
    pub fn adapt(&mut self, p: usize, z: f64, scale: f64) {
        for j in 0..self.centers.len() {
            self.weights[p][j] += scale * self.basis(j, z);
        }
    }

    pub fn weight_norm(&self, p: usize) -> f64 {
        self.weights[p].iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn neuron_count(&self) -> usize {
        self.centers.len()
    }
}

/// Adaptation gains of the accommodation law.
#[derive(Clone, Copy, Debug)]
pub struct AccommodationRates {
    /// Approximator weight learning rate.
    pub weights: f64,
    /// Residual-bound estimate learning rate.
    pub bound: f64,
    /// Effectiveness estimate learning rate.
    pub effectiveness: f64,
}

/// Control law used between detection and isolation.
///
/// The fault is suspected but unclassified, so the law hedges: a radial
/// network learns whatever state-dependent term the residual reveals, a
/// bounding estimate soaks up the approximation error, and an effectiveness
/// estimate pre-divides the input in case the fault turns out to be an
/// actuator one. The effectiveness estimate lives in `[clamp_lower, 0]`
/// which keeps the rescale denominator strictly positive.
#[derive(Clone, Debug)]
pub struct AccommodationController {
    pub(crate) net: RbfNetwork,
    pub(crate) alpha_hat: Vec<f64>,
    pub(crate) theta_hat: Vec<f64>,
    pub(crate) clamp_lower: f64,
    pub(crate) rates: AccommodationRates,
}

impl AccommodationController {
    pub fn new(net: RbfNetwork, components: usize, clamp_lower: f64, rates: AccommodationRates) -> Self {
        debug_assert!((-1.0..=0.0).contains(&clamp_lower));
        AccommodationController {
            net,
            alpha_hat: vec![0.0; components],
            theta_hat: vec![0.0; components],
            clamp_lower,
            rates,
        }
    }

    pub fn control(
        &self,
        p: usize,
        e: f64,
        x: f64,
        phi: f64,
        error_bound: f64,
        robust_gain: f64,
        layer: f64,
    ) -> f64 {
        let learned = self.net.eval(p, x);
        let bounding = self.alpha_hat[p] * error_bound * sgn(e, layer);
        let unscaled = robust_law(e, phi, learned + bounding, robust_gain, layer);
        let denominator = 1.0 + self.theta_hat[p];
        assert!(denominator > 0.0, "effectiveness estimate left its range");
        unscaled / denominator
    }

    /// Gradient updates from time-k values; the effectiveness estimate is
    /// clamped back into its admissible interval after the step.
    pub fn adapt(&mut self, p: usize, e: f64, x: f64, u: f64, error_bound: f64, dt: f64) {
        self.net.adapt(p, x, dt * self.rates.weights * e);
        self.alpha_hat[p] += dt * self.rates.bound * e.abs() * error_bound;
        self.theta_hat[p] =
            (self.theta_hat[p] + dt * self.rates.effectiveness * e * u).clamp(self.clamp_lower, 0.0);
    }

    pub fn weight_norm(&self, p: usize) -> f64 {
        self.net.weight_norm(p)
    }

    pub fn alpha_hat(&self, p: usize) -> f64 {
        self.alpha_hat[p]
    }

    pub fn theta_hat(&self, p: usize) -> f64 {
        self.theta_hat[p]
    }
}

/// Post-isolation law for a process fault: cancel the identified term with
/// a dedicated estimate, adapted without projection.
#[derive(Clone, Debug)]
pub struct ProcessFtc {
    pub(crate) basis: FaultBasis,
    pub(crate) theta_hat: Vec<f64>,
    pub(crate) rate: f64,
}

impl ProcessFtc {
    pub fn new(basis: FaultBasis, components: usize, rate: f64) -> Result<Self, ControlError> {
        if basis.uses_input() {
            return Err(ControlError::InputBasisInProcessLaw);
        }
        Ok(ProcessFtc {
            basis,
            theta_hat: vec![0.0; components],
            rate,
        })
    }

    pub fn control(&self, p: usize, e: f64, x: f64, phi: f64, robust_gain: f64, layer: f64) -> f64 {
        let cancel = self.theta_hat[p] * self.basis.eval(x, 0.0);
        robust_law(e, phi, cancel, robust_gain, layer)
    }

    pub fn adapt(&mut self, p: usize, e: f64, x: f64, dt: f64) {
        self.theta_hat[p] += dt * self.rate * e * self.basis.eval(x, 0.0);
    }

    pub fn theta_hat(&self, p: usize) -> f64 {
        self.theta_hat[p]
    }
}

/// Post-isolation law for an actuator fault: baseline law rescaled by the
/// estimated effectiveness, with the estimate projected onto its set.
#[derive(Clone, Debug)]
pub struct ActuatorFtc {
    pub(crate) params: ParamSet,
    pub(crate) theta_hat: Vec<f64>,
    pub(crate) rate: f64,
}

impl ActuatorFtc {
    /// Starts the estimate at the center of the admissible set.
    pub fn new(params: ParamSet, components: usize, rate: f64) -> Self {
        let (center, _) = params.enclosing_ball();
        ActuatorFtc {
            params,
            theta_hat: vec![center; components],
            rate,
        }
    }

    pub fn control(&self, p: usize, e: f64, phi: f64, robust_gain: f64, layer: f64) -> f64 {
        let unscaled = robust_law(e, phi, 0.0, robust_gain, layer);
        let denominator = 1.0 + self.theta_hat[p];
        assert!(denominator > 0.0, "effectiveness estimate left its range");
        unscaled / denominator
    }

    pub fn adapt(&mut self, p: usize, e: f64, u: f64, dt: f64) {
        self.theta_hat[p] = self
            .params
            .project(self.theta_hat[p] + dt * self.rate * e * u);
    }

    pub fn theta_hat(&self, p: usize) -> f64 {
        self.theta_hat[p]
    }
}

/// Everything a law needs at one component of one agent.
#[derive(Clone, Copy, Debug)]
pub struct LawContext {
    pub e: f64,
    pub x: f64,
    pub phi: f64,
    /// Envelope plus leader-rate margin multiplying the switching term.
    pub robust_gain: f64,
    /// Approximation error bound fed to the bounding estimator.
    pub error_bound: f64,
    pub layer: f64,
}

/// Mode-dependent control law of one agent.
#[derive(Clone, Debug)]
pub enum ControlLaw {
    Baseline,
    Accommodation(AccommodationController),
    IsolatedProcess(ProcessFtc),
    IsolatedActuator(ActuatorFtc),
}

impl ControlLaw {
    pub fn control(&self, p: usize, ctx: &LawContext) -> f64 {
        match self {
            ControlLaw::Baseline => baseline_control(ctx.e, ctx.phi, ctx.robust_gain, ctx.layer),
            ControlLaw::Accommodation(law) => law.control(
                p,
                ctx.e,
                ctx.x,
                ctx.phi,
                ctx.error_bound,
                ctx.robust_gain,
                ctx.layer,
            ),
            ControlLaw::IsolatedProcess(law) => {
                law.control(p, ctx.e, ctx.x, ctx.phi, ctx.robust_gain, ctx.layer)
            }
            ControlLaw::IsolatedActuator(law) => {
                law.control(p, ctx.e, ctx.phi, ctx.robust_gain, ctx.layer)
            }
        }
    }

    /// Advances the law's adaptive state using time-k values, `u` being the
    /// control actually applied at this step.
    pub fn adapt(&mut self, p: usize, ctx: &LawContext, u: f64, dt: f64) {
        match self {
            ControlLaw::Baseline => {}
            ControlLaw::Accommodation(law) => {
                law.adapt(p, ctx.e, ctx.x, u, ctx.error_bound, dt)
            }
            ControlLaw::IsolatedProcess(law) => law.adapt(p, ctx.e, ctx.x, dt),
            ControlLaw::IsolatedActuator(law) => law.adapt(p, ctx.e, u, dt),
        }
    }

    pub fn theta_hat(&self, p: usize) -> Option<f64> {
        match self {
            ControlLaw::Baseline => None,
            ControlLaw::Accommodation(law) => Some(law.theta_hat(p)),
            ControlLaw::IsolatedProcess(law) => Some(law.theta_hat(p)),
            ControlLaw::IsolatedActuator(law) => Some(law.theta_hat(p)),
        }
    }

    pub fn alpha_hat(&self, p: usize) -> Option<f64> {
        match self {
            ControlLaw::Accommodation(law) => Some(law.alpha_hat(p)),
            _ => None,
        }
    }

    pub fn weight_norm(&self, p: usize) -> Option<f64> {
        match self {
            ControlLaw::Accommodation(law) => Some(law.weight_norm(p)),
            _ => None,
        }
    }
}
