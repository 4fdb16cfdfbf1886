//! Parameter sensitivity of the state (`psi = dx/dθ`), output sensitivity and
//! Fisher information.

use nalgebra::{SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Control, SensitivityModel, State, Theta};

/// `(x, psi)` stacked into one vector.
pub type ExtendedState = SVector<f64, 8>;
pub type ExtendedMatrix = SMatrix<f64, 8, 8>;

pub fn split(xs: &ExtendedState) -> (State, Vector4<f64>) {
    (xs.fixed_rows::<4>(0).into_owned(), xs.fixed_rows::<4>(4).into_owned())
}

pub fn extend(x: &State, psi: &Vector4<f64>) -> ExtendedState {
    let mut xs = ExtendedState::zeros();
    xs.fixed_rows_mut::<4>(0).copy_from(x);
    xs.fixed_rows_mut::<4>(4).copy_from(psi);
    xs
}

/// Scalar Gaussian output noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Variance, N².
    pub sigma2: f64,
}

impl NoiseModel {
    pub fn from_std(sigma: f64) -> Self {
        Self { sigma2: sigma * sigma }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma2.is_finite() && self.sigma2 > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("noise variance must be positive, got {}", self.sigma2)))
        }
    }
}

/// State dynamics stacked with the sensitivity equation
/// `psi' = D_x f psi + D_θ f`.
pub fn extended_rhs<M: SensitivityModel + ?Sized>(model: &M, xs: &ExtendedState, u: Control, theta: &Theta) -> ExtendedState {
    let (x, psi) = split(xs);
    let j = model.jacobians(&x, u, theta);
    extend(&model.rhs(&x, u, theta), &(j.f_x * psi + j.f_theta))
}

/// Jacobian of [`extended_rhs`] with respect to the extended state, and its
/// derivative with respect to the control (the extended control field).
pub fn extended_jacobian<M: SensitivityModel + ?Sized>(
    model: &M,
    xs: &ExtendedState,
    u: Control,
    theta: &Theta,
) -> (ExtendedMatrix, ExtendedState) {
    let (x, psi) = split(xs);
    let j = model.jacobians(&x, u, theta);
    let h = model.second_derivatives(&x, u, theta);

    // d/dx (D_x f psi + D_θ f), row i = psi^T H_i + d(D_θ f_i)/dx
    let mut lower_left = h.f_xtheta;
    for (i, hess) in h.f_xx.iter().enumerate() {
        let contrib = hess * psi;
        for k in 0..4 {
            lower_left[(i, k)] += contrib[k];
        }
    }
    let mut a = ExtendedMatrix::zeros();
    a.fixed_view_mut::<4, 4>(0, 0).copy_from(&j.f_x);
    a.fixed_view_mut::<4, 4>(4, 0).copy_from(&lower_left);
    a.fixed_view_mut::<4, 4>(4, 4).copy_from(&j.f_x);

    let control_field = extend(&j.f_u, &(h.f_xu * psi + h.f_thetau));
    (a, control_field)
}

/// Total derivative of the output with respect to θ: `D_x y psi + D_θ y`.
pub fn gamma_theta<M: SensitivityModel + ?Sized>(model: &M, xs: &ExtendedState, u: Control, theta: &Theta) -> f64 {
    let (x, psi) = split(xs);
    let j = model.jacobians(&x, u, theta);
    (j.y_x * psi)[0] + j.y_theta
}

/// Gradient of [`gamma_theta`] with respect to the extended state.
pub fn gamma_gradient<M: SensitivityModel + ?Sized>(model: &M, xs: &ExtendedState, u: Control, theta: &Theta) -> ExtendedState {
    let (x, psi) = split(xs);
    let j = model.jacobians(&x, u, theta);
    let h = model.second_derivatives(&x, u, theta);
    let d_x: Vector4<f64> = h.y_xx * psi + h.y_xtheta;
    extend(&d_x, &j.y_x.transpose())
}

/// Fisher information of a set of output sensitivities, `Σ Γ² / σ²`.
pub fn fisher_information(samples: &[f64], noise: &NoiseModel) -> f64 {
    samples.iter().map(|g| g * g).sum::<f64>() / noise.sigma2
}
