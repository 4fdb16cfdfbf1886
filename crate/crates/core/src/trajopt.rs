//! Projection-operator trajectory optimization of the swing task.
//!
//! The task is posed on the fixed RK4 grid in minimal coordinates
//! `(xB, vB, phi, phidot)`; the terminal cost is evaluated on the mass's
//! Cartesian position and velocity through [`mass_kinematics`]. Each iteration
//! solves a time-varying LQ problem (backward Riccati recursion) for a descent
//! direction, then maps the perturbed curve back onto the dynamics with the LQ
//! feedback gains. Every iterate is therefore a simulated, feasible
//! trajectory.

use nalgebra::{Matrix4, RowVector4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{rk4_step, rk4_step_linearized, Trajectory};
use crate::model::{Params, SensitivityModel, State, Theta, PHI, PHIDOT, VB, XB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Terminal weight on `(x_m, z_m, vx_m, vz_m)` errors, row-major.
    pub p_tau: [[f64; 4]; 4],
    pub r_tau: f64,
    /// Desired terminal mass position (m) and velocity (m/s).
    pub x_desired: [f64; 4],
    pub t_f: f64,
    pub dt: f64,
    /// Stop when `|DJ·ζ|` drops below this.
    pub tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Running state weight of the LQ descent metric.
    pub q_reg: f64,
    /// Regulator weights for the projection feedback gains.
    pub proj_q: f64,
    pub proj_r: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let mut p = [[0.0; 4]; 4];
        for (i, w) in [200.0, 200.0, 20.0, 20.0].into_iter().enumerate() {
            p[i][i] = w;
        }
        Self {
            p_tau: p,
            r_tau: 0.1,
            x_desired: [-0.45, -0.26, 0.0, 0.0],
            t_f: 5.0,
            dt: 0.01,
            tol: 1e-6,
            max_iters: 200,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 30,
            q_reg: 0.0,
            proj_q: 1.0,
            proj_r: 1.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("task: {msg}")));
        let p = self.p_matrix();
        if (p - p.transpose()).amax() > 1e-12 || p.symmetric_eigenvalues().min() < -1e-12 {
            return bad("p_tau must be symmetric positive semidefinite");
        }
        if !(self.r_tau > 0.0) {
            return bad("r_tau must be positive");
        }
        if !(self.t_f > 0.0 && self.dt > 0.0 && self.dt <= self.t_f) {
            return bad("need 0 < dt <= t_f");
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return bad("need tol > 0 and max_iters >= 1");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0 && self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("armijo_c and shrink must lie in (0, 1)");
        }
        if !(self.q_reg >= 0.0) {
            return bad("q_reg must be non-negative");
        }
        if !(self.proj_q >= 0.0 && self.proj_r > 0.0) {
            return bad("need proj_q >= 0 and proj_r > 0");
        }
        Ok(())
    }

    pub fn p_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.p_tau[i][j])
    }

    pub fn steps(&self) -> usize {
        (self.t_f / self.dt).round() as usize
    }

    pub fn target(&self) -> Vector4<f64> {
        Vector4::from(self.x_desired)
    }
}

/// Mass position and velocity `(x_m, z_m, vx_m, vz_m)`; z points up from the
/// gripper line.
pub fn mass_kinematics(s: &State, ell: f64) -> Vector4<f64> {
    let (sin, cos) = s[PHI].sin_cos();
    let w = s[PHIDOT];
    Vector4::new(s[XB] + ell * sin, -ell * cos, s[VB] + ell * cos * w, ell * sin * w)
}

/// Jacobian of [`mass_kinematics`] with respect to the state.
pub fn mass_kinematics_jacobian(s: &State, ell: f64) -> Matrix4<f64> {
    let (sin, cos) = s[PHI].sin_cos();
    let w = s[PHIDOT];
    Matrix4::new(
        1.0, 0.0, ell * cos, 0.0, //
        0.0, 0.0, ell * sin, 0.0, //
        0.0, 1.0, -ell * sin * w, ell * cos, //
        0.0, 0.0, ell * cos * w, ell * sin,
    )
}

/// A feasible task trajectory with its mass channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrajectory {
    pub ell: f64,
    pub trajectory: Trajectory<4>,
    pub mass: Vec<Vector4<f64>>,
}

impl TaskTrajectory {
    pub fn from_trajectory(trajectory: Trajectory<4>, ell: f64) -> Self {
        let mass = trajectory.states.iter().map(|s| mass_kinematics(s, ell)).collect();
        Self { ell, trajectory, mass }
    }

    pub fn terminal_mass(&self) -> Vector4<f64> {
        *self.mass.last().expect("non-empty trajectory")
    }

    pub fn controls(&self) -> &[f64] {
        &self.trajectory.controls
    }
}

/// Terminal Cartesian error plus integrated control effort.
pub fn task_cost(xi: &TaskTrajectory, cfg: &TaskConfig) -> Result<f64> {
    let traj = &xi.trajectory;
    traj.validate()?;
    if (traj.dt - cfg.dt).abs() > 1e-12 || traj.steps() != cfg.steps() {
        return Err(Error::GridMismatch(format!(
            "trajectory has {} steps of {} s, config expects {} of {} s",
            traj.steps(),
            traj.dt,
            cfg.steps(),
            cfg.dt
        )));
    }
    Ok(cost_unchecked(xi, cfg))
}

fn cost_unchecked(xi: &TaskTrajectory, cfg: &TaskConfig) -> f64 {
    let e = xi.terminal_mass() - cfg.target();
    let terminal = (e.transpose() * cfg.p_matrix() * e)[0];
    let effort: f64 = xi.trajectory.controls.iter().map(|u| u * u).sum::<f64>() * cfg.r_tau * cfg.dt;
    terminal + effort
}

/// Continuous-time `(∂f/∂x, ∂f/∂u)` at each grid node.
pub fn linearize<M: SensitivityModel + ?Sized>(
    model: &M,
    xi: &TaskTrajectory,
) -> Vec<(Matrix4<f64>, Vector4<f64>)> {
    let theta = Theta::new(xi.ell);
    let traj = &xi.trajectory;
    traj.controls
        .iter()
        .enumerate()
        .map(|(k, &u)| {
            let j = model.jacobians(&traj.states[k], u, &theta);
            (j.f_x, j.f_u)
        })
        .collect()
}

/// A descent direction `ζ = (z, v)` with its directional derivative and the
/// projection gains computed along the same linearization.
#[derive(Debug, Clone)]
pub struct Descent {
    pub z: Vec<Vector4<f64>>,
    pub v: Vec<f64>,
    pub gains: Vec<RowVector4<f64>>,
    /// `DJ(ξ)·ζ`, never positive.
    pub slope: f64,
}

/// Exact Jacobians `(A_k, B_k)` of the RK4 step map along `xi`.
pub fn step_jacobians<M: SensitivityModel + ?Sized>(model: &M, xi: &TaskTrajectory) -> Vec<(Matrix4<f64>, Vector4<f64>)> {
    let theta = Theta::new(xi.ell);
    let traj = &xi.trajectory;
    let rhs = |x: &State, u: f64| model.rhs(x, u, &theta);
    let jac = |x: &State, u: f64| {
        let j = model.jacobians(x, u, &theta);
        (j.f_x, j.f_u)
    };
    (0..traj.steps())
        .map(|k| {
            let (_, a, b) = rk4_step_linearized(&rhs, &jac, &traj.states[k], traj.controls[k], traj.dt);
            (a, b)
        })
        .collect()
}

/// Solves the LQ subproblem around `xi` by backward Riccati recursion.
///
/// The quadratic model is the Gauss-Newton expansion of the task cost on the
/// exactly linearized RK4 map: terminal `2 Mᵀ P M`, control `2 R dt`
/// and an optional running `q_reg I`. The projection gains come from a
/// separate regulator pass with weights `proj_q I` and `proj_r`.
pub fn lq_descent<M: SensitivityModel + ?Sized>(
    model: &M,
    xi: &TaskTrajectory,
    cfg: &TaskConfig,
) -> Result<Descent> {
    let steps = step_jacobians(model, xi);
    let mut descent = lq_solve(&steps, xi, cfg)?;
    descent.gains = regulator_gains(&steps, cfg.proj_q, cfg.proj_r)?;
    Ok(descent)
}

fn lq_solve(
    steps: &[(Matrix4<f64>, Vector4<f64>)],
    xi: &TaskTrajectory,
    cfg: &TaskConfig,
) -> Result<Descent> {
    let n = steps.len();
    let p2 = cfg.p_matrix() + cfg.p_matrix().transpose();
    let xn = xi.trajectory.last();
    let m = mass_kinematics_jacobian(xn, xi.ell);
    let terminal_grad = m.transpose() * p2 * (mass_kinematics(xn, xi.ell) - cfg.target());
    let r = 2.0 * cfg.r_tau * cfg.dt;
    let q = Matrix4::identity() * cfg.q_reg;

    let mut s_mat = m.transpose() * p2 * m;
    let mut s_vec = terminal_grad;
    let mut gains = vec![RowVector4::zeros(); n];
    let mut feedforward = vec![0.0; n];
    for k in (0..n).rev() {
        let (a, b) = &steps[k];
        let sb = s_mat * b;
        let quu = r + b.dot(&sb);
        let qux = sb.transpose() * a;
        let qu = r * xi.trajectory.controls[k] + b.dot(&s_vec);
        let gain = -qux / quu;
        let ff = -qu / quu;
        s_vec = a.transpose() * s_vec + qux.transpose() * ff;
        s_mat = q + a.transpose() * s_mat * a - qux.transpose() * qux / quu;
        s_mat = (s_mat + s_mat.transpose()) * 0.5;
        if !(quu.is_finite() && s_mat.iter().all(|v| v.is_finite()) && s_vec.iter().all(|v| v.is_finite())) {
            return Err(Error::RiccatiBlowup(k));
        }
        gains[k] = gain;
        feedforward[k] = ff;
    }

    let mut z = Vec::with_capacity(n + 1);
    let mut v = Vec::with_capacity(n);
    z.push(Vector4::zeros());
    for k in 0..n {
        let (a, b) = &steps[k];
        let vk = (gains[k] * z[k])[0] + feedforward[k];
        v.push(vk);
        z.push(a * z[k] + b * vk);
    }
    let slope = terminal_grad.dot(&z[n])
        + v.iter().zip(&xi.trajectory.controls).map(|(vk, uk)| r * uk * vk).sum::<f64>();
    Ok(Descent { z, v, gains, slope })
}

/// Time-varying LQR gains along the linearized steps with running weights
/// `q I` and `r`, in the sign convention of [`project`].
pub fn regulator_gains(steps: &[(Matrix4<f64>, Vector4<f64>)], q: f64, r: f64) -> Result<Vec<RowVector4<f64>>> {
    let qm = Matrix4::identity() * q;
    let mut s_mat = qm;
    let mut gains = vec![RowVector4::zeros(); steps.len()];
    for (k, (a, b)) in steps.iter().enumerate().rev() {
        let sb = s_mat * b;
        let quu = r + b.dot(&sb);
        let qux = sb.transpose() * a;
        gains[k] = qux / quu;
        s_mat = qm + a.transpose() * s_mat * a - qux.transpose() * qux / quu;
        s_mat = (s_mat + s_mat.transpose()) * 0.5;
        if !s_mat.iter().all(|v| v.is_finite()) {
            return Err(Error::RiccatiBlowup(k));
        }
    }
    Ok(gains)
}

/// Maps a state/control curve onto the dynamics with the feedback law
/// `u_k = mu_k + K_k (alpha_k - x_k)`, starting from `alpha_0`.
pub fn project<M: SensitivityModel + ?Sized>(
    model: &M,
    alpha: &[Vector4<f64>],
    mu: &[f64],
    gains: &[RowVector4<f64>],
    ell: f64,
    dt: f64,
) -> Result<TaskTrajectory> {
    let n = mu.len();
    if alpha.len() != n + 1 || gains.len() != n {
        return Err(Error::GridMismatch(format!(
            "projection needs {} states and gains for {n} controls, got {} and {}",
            n + 1,
            alpha.len(),
            gains.len()
        )));
    }
    let theta = Theta::new(ell);
    let rhs = |x: &State, u: f64| model.rhs(x, u, &theta);
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut x = alpha[0];
    states.push(x);
    for k in 0..n {
        let u = mu[k] + (gains[k] * (alpha[k] - x))[0];
        x = rk4_step(&rhs, &x, u, dt);
        if !(u.is_finite() && x.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence { step: k, time: k as f64 * dt });
        }
        controls.push(u);
        states.push(x);
    }
    Ok(TaskTrajectory::from_trajectory(
        Trajectory {
            t0: 0.0,
            dt,
            states,
            controls,
        },
        ell,
    ))
}

/// Result of a converged optimization.
#[derive(Debug, Clone)]
pub struct TaskPlan {
    pub trajectory: TaskTrajectory,
    pub iterations: usize,
    pub cost: f64,
    /// `|DJ·ζ|` at termination.
    pub slope: f64,
    /// Cost of every iterate, starting with the initial trajectory.
    pub cost_history: Vec<f64>,
}

/// The zero-control trajectory from rest.
pub fn stationary_trajectory(ell: f64, cfg: &TaskConfig) -> TaskTrajectory {
    let n = cfg.steps();
    TaskTrajectory::from_trajectory(
        Trajectory {
            t0: 0.0,
            dt: cfg.dt,
            states: vec![State::zeros(); n + 1],
            controls: vec![0.0; n],
        },
        ell,
    )
}

/// Plans the swing at string length `theta_hat`, starting from the
/// stationary zero-control trajectory.
pub fn optimize_task<M: SensitivityModel + ?Sized>(model: &M, theta_hat: f64, cfg: &TaskConfig) -> Result<TaskPlan> {
    cfg.validate()?;
    Params {
        ell: theta_hat,
        mass: 1.0,
        gravity: 1.0,
    }
    .validate()?;
    let mut xi = stationary_trajectory(theta_hat, cfg);
    let mut cost = cost_unchecked(&xi, cfg);
    let mut history = vec![cost];
    let mut slope = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let descent = lq_descent(model, &xi, cfg)?;
        slope = descent.slope;
        if slope.abs() < cfg.tol {
            return Ok(TaskPlan {
                trajectory: xi,
                iterations: history.len() - 1,
                cost,
                slope: slope.abs(),
                cost_history: history,
            });
        }
        let mut gamma = 1.0;
        let mut next = None;
        for _ in 0..=cfg.max_backtracks {
            let alpha: Vec<_> = xi.trajectory.states.iter().zip(&descent.z).map(|(x, z)| x + z * gamma).collect();
            let mu: Vec<_> = xi.trajectory.controls.iter().zip(&descent.v).map(|(u, v)| u + v * gamma).collect();
            if let Ok(candidate) = project(model, &alpha, &mu, &descent.gains, theta_hat, cfg.dt) {
                let c = cost_unchecked(&candidate, cfg);
                if c <= cost + cfg.armijo_c * gamma * slope {
                    next = Some((candidate, c));
                    break;
                }
            }
            gamma *= cfg.shrink;
        }
        match next {
            Some((candidate, c)) => {
                xi = candidate;
                cost = c;
                history.push(c);
            }
            None => break,
        }
    }
    let iterations = history.len() - 1;
    Err(Error::NotConverged {
        iterations,
        slope: slope.abs(),
        last: Box::new(xi),
    })
}

/// Applies a planned control sequence open-loop from rest on a plant with
/// string length `ell`.
pub fn rollout<M: SensitivityModel + ?Sized>(model: &M, controls: &[f64], ell: f64, dt: f64) -> Result<TaskTrajectory> {
    let theta = Theta::new(ell);
    let traj = crate::integrate::integrate(|x: &State, u| model.rhs(x, u, &theta), &State::zeros(), controls, dt, 0.0)?;
    Ok(TaskTrajectory::from_trajectory(traj, ell))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SuspendedMass;
    use approx::assert_relative_eq;

    #[test]
    fn kinematics_examples() {
        assert_relative_eq!(mass_kinematics(&State::zeros(), 0.368), Vector4::new(0.0, -0.368, 0.0, 0.0));
        let m = mass_kinematics(&State::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0), 0.368);
        assert_relative_eq!(m[0], 0.368, epsilon = 1e-15);
        assert_relative_eq!(m[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kinematics_jacobian_matches_finite_differences() {
        let s = State::new(0.2, -0.4, 0.7, 1.9);
        let jm = mass_kinematics_jacobian(&s, 0.33);
        let h = 1e-6;
        for j in 0..4 {
            let mut p = s;
            let mut q = s;
            p[j] += h;
            q[j] -= h;
            let col = (mass_kinematics(&p, 0.33) - mass_kinematics(&q, 0.33)) / (2.0 * h);
            assert_relative_eq!(jm.column(j).into_owned(), col, epsilon = 1e-8);
        }
    }

    #[test]
    fn cost_examples() {
        let cfg = TaskConfig::default();
        let n = cfg.steps();
        // Hang the mass exactly at the target: phi with ell cos phi = 0.26.
        let ell = 0.368;
        let phi = (0.26f64 / ell).acos();
        let xb = -0.45 - ell * phi.sin();
        let at_target = State::new(xb, 0.0, phi, 0.0);
        let xi = TaskTrajectory::from_trajectory(
            Trajectory {
                t0: 0.0,
                dt: cfg.dt,
                states: vec![at_target; n + 1],
                controls: vec![0.0; n],
            },
            ell,
        );
        assert_relative_eq!(task_cost(&xi, &cfg).unwrap(), 0.0, epsilon = 1e-20);

        let mut effort = xi.clone();
        effort.trajectory.controls = vec![0.7; n];
        assert_relative_eq!(task_cost(&effort, &cfg).unwrap(), 0.49 * 0.1 * 5.0, epsilon = 1e-12);

        let rest = stationary_trajectory(ell, &cfg);
        let expected = 200.0 * (0.45f64.powi(2) + (0.368f64 - 0.26).powi(2));
        assert_relative_eq!(task_cost(&rest, &cfg).unwrap(), expected, epsilon = 1e-12);

        let short = TaskConfig {
            t_f: 1.0,
            ..Default::default()
        };
        assert!(matches!(task_cost(&rest, &short), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn linearization_at_rest() {
        let model = SuspendedMass::default();
        let xi = stationary_trajectory(0.368, &TaskConfig::default());
        let (a, b) = linearize(&model, &xi)[0];
        assert_relative_eq!(a[(PHIDOT, PHI)], -9.81 / 0.368, epsilon = 1e-12);
        assert_relative_eq!(b[PHIDOT], 1.0 / 0.368, epsilon = 1e-12);
        assert_eq!(a[(XB, VB)], 1.0);
    }

    #[test]
    fn scalar_riccati_matches_closed_form() {
        // One state channel reaches the terminal cost: x_m = xB, P = p on it.
        // z1 = a z0 + b v with z0 = 0, so the LQ optimum is
        // v = -(b g + r u) / (r + b² S), with S = 2p and g = 2p e.
        let mut cfg = TaskConfig::default();
        cfg.p_tau = [[0.0; 4]; 4];
        cfg.p_tau[0][0] = 3.0;
        cfg.t_f = cfg.dt;
        cfg.x_desired = [0.5, 0.0, 0.0, 0.0];
        let xi = TaskTrajectory::from_trajectory(
            Trajectory {
                t0: 0.0,
                dt: cfg.dt,
                states: vec![State::zeros(), State::zeros()],
                controls: vec![0.2],
            },
            0.368,
        );
        // Only the xB row matters for the terminal cost at phi = 0, phidot = 0
        // (the x_m row of M is [1, 0, l, 0] but z2 stays zero with b2 = 0).
        let mut a = Matrix4::identity();
        a[(0, 1)] = 0.01;
        let b = Vector4::new(2.0, 0.0, 0.0, 0.0);
        let d = lq_solve(&[(a, b)], &xi, &cfg).unwrap();
        let (p, r, u, e) = (3.0, 2.0 * 0.1 * cfg.dt, 0.2, -0.5);
        let v = -(b[0] * 2.0 * p * e + r * u) / (r + b[0] * b[0] * 2.0 * p);
        assert_relative_eq!(d.v[0], v, epsilon = 1e-12);
        assert!(d.slope <= 0.0);
    }

    #[test]
    fn projection_of_feasible_trajectory_is_identity() {
        let model = SuspendedMass::default();
        let cfg = TaskConfig {
            t_f: 1.0,
            ..Default::default()
        };
        let controls: Vec<f64> = (0..cfg.steps()).map(|k| (k as f64 * 0.07).sin()).collect();
        let xi = rollout(&model, &controls, 0.368, cfg.dt).unwrap();
        let d = lq_descent(&model, &xi, &cfg).unwrap();
        let again = project(&model, &xi.trajectory.states, &xi.trajectory.controls, &d.gains, 0.368, cfg.dt).unwrap();
        assert_eq!(again, xi);
    }

    #[test]
    fn descent_decreases_cost_for_small_steps() {
        let model = SuspendedMass::default();
        let cfg = TaskConfig::default();
        let controls: Vec<f64> = (0..cfg.steps()).map(|k| 0.3 * (k as f64 * 0.05).cos()).collect();
        let xi = rollout(&model, &controls, 0.368, cfg.dt).unwrap();
        let d = lq_descent(&model, &xi, &cfg).unwrap();
        assert!(d.slope < 0.0);
        let g = 1e-3;
        let alpha: Vec<_> = xi.trajectory.states.iter().zip(&d.z).map(|(x, z)| x + z * g).collect();
        let mu: Vec<_> = xi.trajectory.controls.iter().zip(&d.v).map(|(u, v)| u + v * g).collect();
        let next = project(&model, &alpha, &mu, &d.gains, 0.368, cfg.dt).unwrap();
        assert!(task_cost(&next, &cfg).unwrap() < task_cost(&xi, &cfg).unwrap());
    }
}
