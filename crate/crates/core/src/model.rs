//! The gripper-suspended mass: dynamics, load-cell output and their analytic
//! derivatives.
//!
//! State layout is `(xB, vB, phi, phidot)`: gripper position and velocity along
//! the horizontal axis, string angle from the downward vertical and its rate.
//! The only control is the gripper's horizontal acceleration. The uncertain
//! parameter is the string length, passed as a one-element vector so that the
//! derivative plumbing does not assume a scalar.

use nalgebra::{Matrix4, RowVector4, Vector1, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type State = Vector4<f64>;
pub type Theta = Vector1<f64>;
/// Gripper horizontal acceleration, m/s².
pub type Control = f64;

pub const XB: usize = 0;
pub const VB: usize = 1;
pub const PHI: usize = 2;
pub const PHIDOT: usize = 3;

pub const DEFAULT_MASS: f64 = 0.05;
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// String length, m.
    pub ell: f64,
    /// Suspended mass, kg.
    pub mass: f64,
    /// m/s².
    pub gravity: f64,
}

impl Params {
    pub fn new(ell: f64, mass: f64, gravity: f64) -> Result<Self> {
        let p = Self { ell, mass, gravity };
        p.validate()?;
        Ok(p)
    }

    pub fn with_length(ell: f64) -> Self {
        Self {
            ell,
            mass: DEFAULT_MASS,
            gravity: GRAVITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ell", self.ell), ("mass", self.mass), ("gravity", self.gravity)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn theta(&self) -> Theta {
        Theta::new(self.ell)
    }
}

/// Which expression is used for the load-cell force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForceModel {
    /// `m g cos(phi) - m l phidot^2 - u sin(phi)`
    #[default]
    Reference,
    /// String tension `m (g cos(phi) + l phidot^2 - u sin(phi))`.
    DerivedTension,
}

impl std::str::FromStr for ForceModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "derived-tension" => Ok(Self::DerivedTension),
            other => Err(Error::Config(format!("unknown force model `{other}`"))),
        }
    }
}

fn check_finite(s: &State, u: Control) -> Result<()> {
    if s.iter().all(|v| v.is_finite()) && u.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite state or control: {s:?}, u = {u}")))
    }
}

/// Time derivative of the state.
pub fn dynamics(s: &State, u: Control, p: &Params) -> Result<State> {
    p.validate()?;
    check_finite(s, u)?;
    Ok(rhs(s, u, p.ell, p.gravity))
}

#[inline]
fn rhs(s: &State, u: f64, ell: f64, g: f64) -> State {
    let (sin, cos) = s[PHI].sin_cos();
    Vector4::new(s[VB], u, s[PHIDOT], (u * cos - g * sin) / ell)
}

/// Load-cell force, N.
pub fn output_force(s: &State, u: Control, p: &Params, model: ForceModel) -> Result<f64> {
    p.validate()?;
    check_finite(s, u)?;
    Ok(force(s, u, p.ell, p.mass, p.gravity, model))
}

#[inline]
fn force(s: &State, u: f64, ell: f64, m: f64, g: f64, model: ForceModel) -> f64 {
    let (sin, cos) = s[PHI].sin_cos();
    let w = s[PHIDOT];
    match model {
        ForceModel::Reference => m * g * cos - m * ell * w * w - u * sin,
        ForceModel::DerivedTension => m * (g * cos + ell * w * w - u * sin),
    }
}

/// Physical string tension regardless of the configured force model; used to
/// flag excursions outside the taut-string envelope.
pub fn string_tension(s: &State, u: Control, p: &Params) -> f64 {
    force(s, u, p.ell, p.mass, p.gravity, ForceModel::DerivedTension)
}

/// First derivatives of the dynamics `f` and output `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobians {
    pub f_x: Matrix4<f64>,
    pub f_theta: Vector4<f64>,
    pub f_u: Vector4<f64>,
    pub y_x: RowVector4<f64>,
    pub y_theta: f64,
    pub y_u: f64,
}

/// Second derivatives needed by the sensitivity adjoint.
///
/// `f_xx[i]` is the state Hessian of `f_i`; row `i` of `f_xtheta` / `f_xu` is
/// the gradient of `∂f_i/∂θ` / `∂f_i/∂u` with respect to the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondDerivatives {
    pub f_xx: [Matrix4<f64>; 4],
    pub f_xtheta: Matrix4<f64>,
    pub f_xu: Matrix4<f64>,
    pub f_thetau: Vector4<f64>,
    pub y_xx: Matrix4<f64>,
    pub y_xtheta: Vector4<f64>,
}

const FD_STEP: f64 = 1e-6;
const FD_STEP_2ND: f64 = 1e-5;

/// A single-output model with one uncertain parameter.
///
/// Only `rhs` and `output` are required; derivatives fall back to central
/// finite differences.
pub trait SensitivityModel: Sync {
    fn rhs(&self, x: &State, u: Control, theta: &Theta) -> State;

    fn output(&self, x: &State, u: Control, theta: &Theta) -> f64;

    fn jacobians(&self, x: &State, u: Control, theta: &Theta) -> Jacobians {
        fd_jacobians(self, x, u, theta)
    }

    fn second_derivatives(&self, x: &State, u: Control, theta: &Theta) -> SecondDerivatives {
        fd_second_derivatives(self, x, u, theta)
    }
}

pub fn fd_jacobians<M: SensitivityModel + ?Sized>(model: &M, x: &State, u: f64, theta: &Theta) -> Jacobians {
    let h = FD_STEP;
    let mut f_x = Matrix4::zeros();
    let mut y_x = RowVector4::zeros();
    for j in 0..4 {
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        f_x.set_column(j, &((model.rhs(&xp, u, theta) - model.rhs(&xm, u, theta)) / (2.0 * h)));
        y_x[j] = (model.output(&xp, u, theta) - model.output(&xm, u, theta)) / (2.0 * h);
    }
    let tp = theta + Theta::new(h);
    let tm = theta - Theta::new(h);
    Jacobians {
        f_x,
        f_theta: (model.rhs(x, u, &tp) - model.rhs(x, u, &tm)) / (2.0 * h),
        f_u: (model.rhs(x, u + h, theta) - model.rhs(x, u - h, theta)) / (2.0 * h),
        y_x,
        y_theta: (model.output(x, u, &tp) - model.output(x, u, &tm)) / (2.0 * h),
        y_u: (model.output(x, u + h, theta) - model.output(x, u - h, theta)) / (2.0 * h),
    }
}

pub fn fd_second_derivatives<M: SensitivityModel + ?Sized>(
    model: &M,
    x: &State,
    u: f64,
    theta: &Theta,
) -> SecondDerivatives {
    let h = FD_STEP_2ND;
    let mut f_xx = [Matrix4::zeros(); 4];
    let mut y_xx = Matrix4::zeros();
    for j in 0..4 {
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        let jp = model.jacobians(&xp, u, theta);
        let jm = model.jacobians(&xm, u, theta);
        let dfx = (jp.f_x - jm.f_x) / (2.0 * h);
        for (i, hess) in f_xx.iter_mut().enumerate() {
            hess.set_column(j, &dfx.row(i).transpose());
        }
        y_xx.set_column(j, &((jp.y_x - jm.y_x) / (2.0 * h)).transpose());
    }
    let tp = theta + Theta::new(h);
    let tm = theta - Theta::new(h);
    let jtp = model.jacobians(x, u, &tp);
    let jtm = model.jacobians(x, u, &tm);
    let jup = model.jacobians(x, u + h, theta);
    let jum = model.jacobians(x, u - h, theta);
    SecondDerivatives {
        f_xx,
        f_xtheta: (jtp.f_x - jtm.f_x) / (2.0 * h),
        f_xu: (jup.f_x - jum.f_x) / (2.0 * h),
        f_thetau: (jup.f_theta - jum.f_theta) / (2.0 * h),
        y_xx,
        y_xtheta: ((jtp.y_x - jtm.y_x) / (2.0 * h)).transpose(),
    }
}

/// The suspended-mass system with `theta = [ell]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuspendedMass {
    pub mass: f64,
    pub gravity: f64,
    pub force_model: ForceModel,
}

impl Default for SuspendedMass {
    fn default() -> Self {
        Self {
            mass: DEFAULT_MASS,
            gravity: GRAVITY,
            force_model: ForceModel::Reference,
        }
    }
}

impl SuspendedMass {
    pub fn params(&self, ell: f64) -> Params {
        Params {
            ell,
            mass: self.mass,
            gravity: self.gravity,
        }
    }

    pub fn from_params(p: &Params, force_model: ForceModel) -> Self {
        Self {
            mass: p.mass,
            gravity: p.gravity,
            force_model,
        }
    }
}

impl SensitivityModel for SuspendedMass {
    #[inline]
    fn rhs(&self, x: &State, u: f64, theta: &Theta) -> State {
        rhs(x, u, theta[0], self.gravity)
    }

    #[inline]
    fn output(&self, x: &State, u: f64, theta: &Theta) -> f64 {
        force(x, u, theta[0], self.mass, self.gravity, self.force_model)
    }

    fn jacobians(&self, x: &State, u: f64, theta: &Theta) -> Jacobians {
        let ell = theta[0];
        let (m, g) = (self.mass, self.gravity);
        let (sin, cos) = x[PHI].sin_cos();
        let w = x[PHIDOT];

        let mut f_x = Matrix4::zeros();
        f_x[(XB, VB)] = 1.0;
        f_x[(PHI, PHIDOT)] = 1.0;
        f_x[(PHIDOT, PHI)] = (-u * sin - g * cos) / ell;

        // The two outputs differ by the centripetal sign and the
        // mass factor on the control term.
        let (cent, um) = match self.force_model {
            ForceModel::Reference => (-1.0, 1.0),
            ForceModel::DerivedTension => (1.0, m),
        };
        Jacobians {
            f_x,
            f_theta: Vector4::new(0.0, 0.0, 0.0, -(u * cos - g * sin) / (ell * ell)),
            f_u: Vector4::new(0.0, 1.0, 0.0, cos / ell),
            y_x: RowVector4::new(0.0, 0.0, -m * g * sin - um * u * cos, cent * 2.0 * m * ell * w),
            y_theta: cent * m * w * w,
            y_u: -um * sin,
        }
    }

    fn second_derivatives(&self, x: &State, u: f64, theta: &Theta) -> SecondDerivatives {
        let ell = theta[0];
        let (m, g) = (self.mass, self.gravity);
        let (sin, cos) = x[PHI].sin_cos();
        let w = x[PHIDOT];
        let (cent, um) = match self.force_model {
            ForceModel::Reference => (-1.0, 1.0),
            ForceModel::DerivedTension => (1.0, m),
        };

        let mut f_xx = [Matrix4::zeros(); 4];
        f_xx[PHIDOT][(PHI, PHI)] = (-u * cos + g * sin) / ell;
        let mut f_xtheta = Matrix4::zeros();
        f_xtheta[(PHIDOT, PHI)] = (u * sin + g * cos) / (ell * ell);
        let mut f_xu = Matrix4::zeros();
        f_xu[(PHIDOT, PHI)] = -sin / ell;

        let mut y_xx = Matrix4::zeros();
        y_xx[(PHI, PHI)] = -m * g * cos + um * u * sin;
        y_xx[(PHIDOT, PHIDOT)] = cent * 2.0 * m * ell;

        SecondDerivatives {
            f_xx,
            f_xtheta,
            f_xu,
            f_thetau: Vector4::new(0.0, 0.0, 0.0, -cos / (ell * ell)),
            y_xx,
            y_xtheta: Vector4::new(0.0, 0.0, 0.0, cent * 2.0 * m * w),
        }
    }
}

/// Analytic first derivatives of the suspended-mass model at `p`.
pub fn jacobians(s: &State, u: Control, p: &Params, force_model: ForceModel) -> Jacobians {
    SuspendedMass::from_params(p, force_model).jacobians(s, u, &p.theta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const ELL: f64 = 0.368;

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let p = Params::with_length(ELL);
        assert_eq!(dynamics(&State::zeros(), 0.0, &p).unwrap(), State::zeros());
    }

    #[test]
    fn horizontal_string_accelerates_back() {
        let p = Params::with_length(ELL);
        let s = State::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0);
        let d = dynamics(&s, 0.0, &p).unwrap();
        assert_relative_eq!(d[PHIDOT], -26.658, epsilon = 5e-4);
    }

    #[test]
    fn gripper_acceleration_drives_angle() {
        let p = Params::with_length(ELL);
        let d = dynamics(&State::zeros(), 1.0, &p).unwrap();
        assert_relative_eq!(d[PHIDOT], 2.7174, epsilon = 5e-5);
        assert_eq!(d[VB], 1.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = Params::with_length(ELL);
        let s = State::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(dynamics(&s, 0.0, &p), Err(Error::InvalidArgument(_))));
        assert!(dynamics(&State::zeros(), f64::INFINITY, &p).is_err());
        assert!(Params::new(-0.1, 0.05, 9.81).is_err());
    }

    #[test]
    fn force_examples() {
        let p = Params::with_length(ELL);
        let f = |s: State, u| output_force(&s, u, &p, ForceModel::Reference).unwrap();
        assert_relative_eq!(f(State::zeros(), 0.0), 0.4905, epsilon = 1e-12);
        assert_relative_eq!(f(State::new(0.0, 0.0, 0.0, 1.0), 0.0), 0.4905 - 0.0184, epsilon = 1e-12);
        assert_relative_eq!(f(State::zeros(), 2.0), 0.4905, epsilon = 1e-12);
        let t = output_force(&State::new(0.0, 0.0, 0.0, 1.0), 0.0, &p, ForceModel::DerivedTension).unwrap();
        assert_relative_eq!(t, 0.4905 + 0.0184, epsilon = 1e-12);
    }

    #[test]
    fn theta_derivatives_at_rest_and_spinning() {
        let p = Params::with_length(ELL);
        let j = jacobians(&State::zeros(), 0.0, &p, ForceModel::Reference);
        assert_eq!(j.f_theta, Vector4::zeros());
        let j = jacobians(&State::new(0.0, 0.0, 0.0, 1.0), 0.0, &p, ForceModel::Reference);
        assert_relative_eq!(j.y_theta, -0.05, epsilon = 1e-15);
    }

    #[test]
    fn analytic_derivatives_match_fallback() {
        let theta = Theta::new(0.41);
        let s = State::new(0.1, -0.3, 0.7, -1.3);
        for force_model in [ForceModel::Reference, ForceModel::DerivedTension] {
            let model = SuspendedMass {
                force_model,
                ..Default::default()
            };
            let a = model.jacobians(&s, 1.7, &theta);
            let n = fd_jacobians(&model, &s, 1.7, &theta);
            assert_relative_eq!(a.f_x, n.f_x, epsilon = 1e-7);
            assert_relative_eq!(a.f_theta, n.f_theta, epsilon = 1e-6);
            assert_relative_eq!(a.f_u, n.f_u, epsilon = 1e-7);
            assert_relative_eq!(a.y_x, n.y_x, epsilon = 1e-8);
            assert_relative_eq!(a.y_theta, n.y_theta, epsilon = 1e-8);
            assert_relative_eq!(a.y_u, n.y_u, epsilon = 1e-8);

            let a = model.second_derivatives(&s, 1.7, &theta);
            let n = fd_second_derivatives(&model, &s, 1.7, &theta);
            for i in 0..4 {
                assert_relative_eq!(a.f_xx[i], n.f_xx[i], epsilon = 1e-5);
            }
            assert_relative_eq!(a.f_xtheta, n.f_xtheta, epsilon = 1e-5);
            assert_relative_eq!(a.f_xu, n.f_xu, epsilon = 1e-6);
            assert_relative_eq!(a.f_thetau, n.f_thetau, epsilon = 1e-5);
            assert_relative_eq!(a.y_xx, n.y_xx, epsilon = 1e-6);
            assert_relative_eq!(a.y_xtheta, n.y_xtheta, epsilon = 1e-6);
        }
    }

    #[test]
    fn pure_functions_are_bit_identical() {
        let p = Params::with_length(0.3);
        let s = State::new(0.2, 0.1, -0.4, 0.9);
        assert_eq!(
            dynamics(&s, 0.3, &p).unwrap().as_slice(),
            dynamics(&s, 0.3, &p).unwrap().as_slice()
        );
        assert_eq!(
            output_force(&s, 0.3, &p, ForceModel::Reference).unwrap().to_bits(),
            output_force(&s, 0.3, &p, ForceModel::Reference).unwrap().to_bits()
        );
    }
}
