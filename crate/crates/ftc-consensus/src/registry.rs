//! Named closed-form functions referenced by scenario files.
//!
//! Scenario files never carry code. They pick entries from this registry by
//! name and parameter set, which keeps runs serializable and repeatable.

use serde::{Deserialize, Serialize};

/// Reference signal with an analytic time derivative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Signal {
    Constant {
        value: f64,
    },
    /// `offset + amp * sin(omega * t + phase)`
    Sinusoid {
        offset: f64,
        amp: f64,
        omega: f64,
        phase: f64,
    },
}

impl Signal {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Signal::Constant { value } => value,
            Signal::Sinusoid {
                offset,
                amp,
                omega,
                phase,
            } => offset + amp * (omega * t + phase).sin(),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            Signal::Constant { .. } => 0.0,
            Signal::Sinusoid {
                amp, omega, phase, ..
            } => amp * omega * (omega * t + phase).cos(),
        }
    }
}

/// Scalar field over one state component and time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Field {
    Zero,
    Constant {
        value: f64,
    },
    /// `gain * x`
    Linear {
        gain: f64,
    },
    /// `amp * sin(omega * t + phase)`, a pure time signal
    Sinusoid {
        amp: f64,
        omega: f64,
        phase: f64,
    },
}

impl Field {
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        match *self {
            Field::Zero => 0.0,
            Field::Constant { value } => value,
            Field::Linear { gain } => gain * x,
            Field::Sinusoid { amp, omega, phase } => amp * (omega * t + phase).sin(),
        }
    }
}

/// Regressor shape multiplying a scalar fault parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum FaultBasis {
    /// `x^2 cos(x)` of the affected component.
    #[serde(rename = "x2cosx")]
    X2CosX,
    /// Commanded input of the affected channel. Models actuator
    /// effectiveness loss, where the fault term is `theta * u`.
    Input,
    /// The affected component itself.
    State,
}

impl FaultBasis {
    /// Evaluates the regressor on one component. `u` is only read by
    /// input-driven bases.
    pub fn eval(&self, x: f64, u: f64) -> f64 {
        match self {
            FaultBasis::X2CosX => x * x * x.cos(),
            FaultBasis::Input => u,
            FaultBasis::State => x,
        }
    }

    pub fn uses_input(&self) -> bool {
        matches!(self, FaultBasis::Input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_matches_hand_values() {
        let s = Signal::Sinusoid {
            offset: 5.0,
            amp: 1.0,
            omega: 1.0,
            phase: 0.0,
        };
        assert_eq!(s.eval(0.0), 5.0);
        assert!((s.eval(std::f64::consts::FRAC_PI_2) - 6.0).abs() < 1e-15);
        assert_eq!(s.derivative(0.0), 1.0);
    }

    #[test]
    fn constant_signal_has_zero_slope() {
        let s = Signal::Constant { value: 3.5 };
        assert_eq!(s.eval(17.0), 3.5);
        assert_eq!(s.derivative(17.0), 0.0);
    }

    #[test]
    fn fields_evaluate_pointwise() {
        assert_eq!(Field::Zero.eval(2.0, 3.0), 0.0);
        assert_eq!(Field::Constant { value: 0.6 }.eval(-1.0, 9.0), 0.6);
        assert_eq!(Field::Linear { gain: -2.0 }.eval(3.0, 0.0), -6.0);
        let f = Field::Sinusoid {
            amp: 0.5,
            omega: 1.0,
            phase: 0.0,
        };
        assert!((f.eval(123.0, std::f64::consts::FRAC_PI_2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_cosine_basis_hand_value() {
        // 4 cos(2) = -1.6645873461885696
        let g = FaultBasis::X2CosX.eval(2.0, 0.0);
        assert!((g - 4.0 * 2.0_f64.cos()).abs() < 1e-15);
        assert!((g + 1.6645873461885696).abs() < 1e-12);
    }

    #[test]
    fn basis_vanishes_at_origin() {
        assert_eq!(FaultBasis::X2CosX.eval(0.0, 7.0), 0.0);
        assert_eq!(FaultBasis::State.eval(0.0, 7.0), 0.0);
    }

    #[test]
    fn input_basis_returns_commanded_input() {
        assert_eq!(FaultBasis::Input.eval(99.0, -1.0), -1.0);
        assert!(FaultBasis::Input.uses_input());
        assert!(!FaultBasis::X2CosX.uses_input());
    }
}
