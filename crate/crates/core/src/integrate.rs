//! Fixed-step fourth-order Runge-Kutta with zero-order-hold controls.

use nalgebra::{SMatrix, SVector};
use crate::error::{Error, Result};

/// States and controls on a uniform grid. `controls[k]` is held over
/// `[t_k, t_{k+1})`, so there is one fewer control than states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const N: usize> {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<SVector<f64, N>>,
    pub controls: Vec<f64>,
}

impl<const N: usize> Trajectory<N> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::GridMismatch(format!("dt must be positive, got {}", self.dt)));
        }
        if self.states.len() != self.controls.len() + 1 {
            return Err(Error::GridMismatch(format!(
                "{} states for {} controls",
                self.states.len(),
                self.controls.len()
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn t_final(&self) -> f64 {
        self.time(self.steps())
    }

    pub fn last(&self) -> &SVector<f64, N> {
        self.states.last().expect("trajectory has at least one state")
    }
}

#[inline]
pub fn rk4_step<const N: usize, F>(rhs: &F, x: &SVector<f64, N>, u: f64, dt: f64) -> SVector<f64, N>
where
    F: Fn(&SVector<f64, N>, f64) -> SVector<f64, N>,
{
    let k1 = rhs(x, u);
    let k2 = rhs(&(x + k1 * (0.5 * dt)), u);
    let k3 = rhs(&(x + k2 * (0.5 * dt)), u);
    let k4 = rhs(&(x + k3 * dt), u);
    x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
}

/// One RK4 step together with its exact Jacobians with respect to the start
/// state and the held control. `jac` returns `(∂f/∂x, ∂f/∂u)`.
pub fn rk4_step_linearized<const N: usize, F, J>(
    rhs: &F,
    jac: &J,
    x: &SVector<f64, N>,
    u: f64,
    dt: f64,
) -> (SVector<f64, N>, SMatrix<f64, N, N>, SVector<f64, N>)
where
    F: Fn(&SVector<f64, N>, f64) -> SVector<f64, N>,
    J: Fn(&SVector<f64, N>, f64) -> (SMatrix<f64, N, N>, SVector<f64, N>),
{
    let eye = SMatrix::<f64, N, N>::identity();
    let half = 0.5 * dt;

    let k1 = rhs(x, u);
    let (a1, b1) = jac(x, u);
    let (dk1x, dk1u) = (a1, b1);

    let x2 = x + k1 * half;
    let k2 = rhs(&x2, u);
    let (a2, b2) = jac(&x2, u);
    let dk2x = a2 * (eye + dk1x * half);
    let dk2u = a2 * (dk1u * half) + b2;

    let x3 = x + k2 * half;
    let k3 = rhs(&x3, u);
    let (a3, b3) = jac(&x3, u);
    let dk3x = a3 * (eye + dk2x * half);
    let dk3u = a3 * (dk2u * half) + b3;

    let x4 = x + k3 * dt;
    let k4 = rhs(&x4, u);
    let (a4, b4) = jac(&x4, u);
    let dk4x = a4 * (eye + dk3x * dt);
    let dk4u = a4 * (dk3u * dt) + b4;

    let w = dt / 6.0;
    let next = x + (k1 + (k2 + k3) * 2.0 + k4) * w;
    let a = eye + (dk1x + (dk2x + dk3x) * 2.0 + dk4x) * w;
    let b = (dk1u + (dk2u + dk3u) * 2.0 + dk4u) * w;
    (next, a, b)
}

/// Integrates `rhs` from `initial`, one step per control.
pub fn integrate<const N: usize, F>(
    rhs: F,
    initial: &SVector<f64, N>,
    controls: &[f64],
    dt: f64,
    t0: f64,
) -> Result<Trajectory<N>>
where
    F: Fn(&SVector<f64, N>, f64) -> SVector<f64, N>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*initial);
    let mut x = *initial;
    for (k, &u) in controls.iter().enumerate() {
        x = rk4_step(&rhs, &x, u, dt);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                step: k,
                time: t0 + k as f64 * dt,
            });
        }
        states.push(x);
    }
    Ok(Trajectory {
        t0,
        dt,
        states,
        controls: controls.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Params, SensitivityModel, State, SuspendedMass, PHI, PHIDOT};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, Vector2};

    #[test]
    fn zero_dynamics_give_constant_trajectory() {
        let x0 = State::new(1.0, -2.0, 0.3, 4.0);
        let traj = integrate(|_: &State, _| State::zeros(), &x0, &[1.0; 50], 0.01, 0.0).unwrap();
        assert!(traj.states.iter().all(|x| *x == x0));
        assert_eq!(traj.states.len(), 51);
        traj.validate().unwrap();
    }

    #[test]
    fn rejects_bad_step() {
        let x0 = State::zeros();
        assert!(integrate(|_: &State, _| State::zeros(), &x0, &[0.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let x0 = Vector2::new(1.0, 0.0);
        let err = integrate(|x: &Vector2<f64>, _| x * 1e200, &x0, &[0.0; 10], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    }

    fn pendulum_energy(x: &State, p: &Params) -> f64 {
        // Mass at (xB + l sin phi, -l cos phi) with the gripper at rest.
        let vx = x[1] + p.ell * x[PHIDOT] * x[PHI].cos();
        let vz = p.ell * x[PHIDOT] * x[PHI].sin();
        0.5 * p.mass * (vx * vx + vz * vz) - p.mass * p.gravity * p.ell * x[PHI].cos()
    }

    #[test]
    fn unforced_pendulum_conserves_energy() {
        let model = SuspendedMass::default();
        let p = model.params(0.368);
        let theta = p.theta();
        let x0 = State::new(0.0, 0.0, 0.3, 0.0);
        let traj = integrate(|x: &State, u| model.rhs(x, u, &theta), &x0, &[0.0; 500], 0.01, 0.0).unwrap();
        let e0 = pendulum_energy(&x0, &p);
        let drift = traj
            .states
            .iter()
            .map(|x| ((pendulum_energy(x, &p) - e0) / e0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "relative energy drift {drift:e}");
    }

    #[test]
    fn fourth_order_convergence() {
        let model = SuspendedMass::default();
        let theta = model.params(0.368).theta();
        let rhs = |x: &State, u: f64| model.rhs(x, u, &theta);
        let x0 = State::new(0.0, 0.0, 0.3, 0.0);
        let run = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            *integrate(rhs, &x0, &vec![0.5; n], dt, 0.0).unwrap().last()
        };
        let reference = run(1e-4);
        let e1 = (run(0.02) - reference).norm();
        let e2 = (run(0.01) - reference).norm();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn linearized_step_matches_finite_differences() {
        let a = Matrix2::new(0.0, 1.0, -4.0, -0.3);
        let rhs = |x: &Vector2<f64>, u: f64| Vector2::new(x[1], -4.0 * x[0].sin() - 0.3 * x[1] + u * x[0].cos());
        let jac = |x: &Vector2<f64>, u: f64| {
            let mut m = a;
            m[(1, 0)] = -4.0 * x[0].cos() - u * x[0].sin();
            (m, Vector2::new(0.0, x[0].cos()))
        };
        let x = Vector2::new(0.4, -0.2);
        let (next, da, db) = rk4_step_linearized(&rhs, &jac, &x, 0.7, 0.05);
        assert_eq!(next, rk4_step(&rhs, &x, 0.7, 0.05));
        let h = 1e-6;
        for j in 0..2 {
            let mut p = x;
            let mut q = x;
            p[j] += h;
            q[j] -= h;
            let col = (rk4_step(&rhs, &p, 0.7, 0.05) - rk4_step(&rhs, &q, 0.7, 0.05)) / (2.0 * h);
            assert_relative_eq!(da.column(j).into_owned(), col, epsilon = 1e-8);
        }
        let col = (rk4_step(&rhs, &x, 0.7 + h, 0.05) - rk4_step(&rhs, &x, 0.7 - h, 0.05)) / (2.0 * h);
        assert_relative_eq!(db, col, epsilon = 1e-8);
    }
}
