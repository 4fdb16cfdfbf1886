//! Sequential Action Control for parameter excitation.
//!
//! Each cycle simulates the free (zero-control) extended system over a fixed
//! horizon, integrates the cost adjoint backwards, and commits a single
//! saturated control value over a short window where the first-order cost
//! improvement is largest. The running cost is the reciprocal of the
//! instantaneous Fisher information plus an optional quadratic state bias.
//!
//! The horizon cost is a right-endpoint sum `Σ_{k=1..N} l(x̄_k) dt` over the
//! RK4 grid and the adjoint is its exact discrete gradient, so
//! `rho_k = ∂(Σ_{j>k} l_j dt)/∂x̄_k` and `rho_N = 0`.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{rk4_step, rk4_step_linearized, Trajectory};
use crate::model::{Control, SensitivityModel, State, Theta};
use crate::sensitivity::{
    extended_jacobian, extended_rhs, gamma_gradient, gamma_theta, split, ExtendedState, NoiseModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    /// Prediction horizon T, s.
    pub horizon: f64,
    /// Time between action computations, s.
    pub loop_dt: f64,
    /// Prediction step, s.
    pub dt: f64,
    /// State-bias weight, row-major.
    pub q_tau: [[f64; 4]; 4],
    /// Bias target for `q_tau`.
    pub x_ref: [f64; 4],
    /// The bias is active for this long after the loop starts; `None` keeps
    /// it on for the whole run.
    pub bias_duration: Option<f64>,
    pub r_sac: f64,
    /// Desired cost-sensitivity ratio; `alpha_d = gamma_ad * J_nominal`.
    pub gamma_ad: f64,
    pub u_max: f64,
    pub dt_min: f64,
    pub dt_init: f64,
    pub eps_info: f64,
    /// Application times are searched over `[t0, t0 + tau_window]`.
    pub tau_window: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        let mut q = [[0.0; 4]; 4];
        q[0][0] = 1.0;
        Self {
            horizon: 1.2,
            loop_dt: 0.05,
            dt: 0.01,
            q_tau: q,
            x_ref: [0.1, 0.0, 0.0, 0.0],
            bias_duration: Some(0.5),
            r_sac: 0.3,
            gamma_ad: -30.0,
            u_max: 5.0,
            dt_min: 0.01,
            dt_init: 0.2,
            eps_info: 1e-6,
            tau_window: 0.05,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("sac: {msg}")));
        if !(self.loop_dt > 0.0 && self.horizon > self.loop_dt) {
            return bad("need horizon > loop_dt > 0");
        }
        if !(self.dt > 0.0 && self.dt <= self.loop_dt) {
            return bad("need 0 < dt <= loop_dt");
        }
        if !(self.r_sac > 0.0) {
            return bad("r_sac must be positive");
        }
        if !(self.gamma_ad < 0.0) {
            return bad("gamma_ad must be negative");
        }
        if !(self.eps_info > 0.0) {
            return bad("eps_info must be positive");
        }
        if !(self.u_max > 0.0 && self.dt_min > 0.0 && self.dt_init >= self.dt_min) {
            return bad("need u_max > 0 and dt_init >= dt_min > 0");
        }
        if !(self.tau_window > 0.0 && self.tau_window <= self.horizon) {
            return bad("tau_window must lie in (0, horizon]");
        }
        let q = self.q_matrix();
        if (q - q.transpose()).amax() > 1e-12 || q.symmetric_eigenvalues().min() < -1e-12 {
            return bad("q_tau must be symmetric positive semidefinite");
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.q_tau[i][j])
    }

    fn steps(&self, span: f64) -> usize {
        ((span / self.dt).round() as usize).max(1)
    }
}

/// Quadratic tracking term of the running cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBias {
    pub weight: Matrix4<f64>,
    pub target: State,
}

impl StateBias {
    pub fn none() -> Self {
        Self {
            weight: Matrix4::zeros(),
            target: State::zeros(),
        }
    }
}

/// Maps a horizon node time (seconds since the loop started) to its bias.
fn bias_at(cfg: &SacConfig, elapsed: f64) -> StateBias {
    match cfg.bias_duration {
        Some(d) if elapsed >= d => StateBias::none(),
        _ => StateBias {
            weight: cfg.q_matrix(),
            target: Vector4::from(cfg.x_ref),
        },
    }
}

/// `1/(Γ²/σ² + eps_info) + (x - x_ref)ᵀ Q (x - x_ref)`.
pub fn running_cost<M: SensitivityModel + ?Sized>(
    model: &M,
    xs: &ExtendedState,
    u: Control,
    theta: &Theta,
    noise: &NoiseModel,
    eps_info: f64,
    bias: &StateBias,
) -> f64 {
    let gamma = gamma_theta(model, xs, u, theta);
    let (x, _) = split(xs);
    let e = x - bias.target;
    1.0 / (gamma * gamma / noise.sigma2 + eps_info) + (e.transpose() * bias.weight * e)[0]
}

fn running_cost_gradient<M: SensitivityModel + ?Sized>(
    model: &M,
    xs: &ExtendedState,
    u: Control,
    theta: &Theta,
    noise: &NoiseModel,
    eps_info: f64,
    bias: &StateBias,
) -> ExtendedState {
    let gamma = gamma_theta(model, xs, u, theta);
    let info = gamma * gamma / noise.sigma2 + eps_info;
    let mut grad = gamma_gradient(model, xs, u, theta) * (-2.0 * gamma / noise.sigma2 / (info * info));
    let (x, _) = split(xs);
    let dq = (bias.weight + bias.weight.transpose()) * (x - bias.target);
    for i in 0..4 {
        grad[i] += dq[i];
    }
    grad
}

/// Backward costate on the nominal grid; `rho.last()` is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    pub times: Vec<f64>,
    pub rho: Vec<ExtendedState>,
}

/// One committed control value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub u_star: Control,
    pub tau_star: f64,
    pub duration: f64,
}

impl Action {
    pub fn null(t0: f64) -> Self {
        Self {
            u_star: 0.0,
            tau_star: t0,
            duration: 0.0,
        }
    }

    pub fn is_null(&self) -> bool {
        self.u_star == 0.0 || self.duration == 0.0
    }

    pub fn control_at(&self, t: f64) -> Control {
        // Half-step tolerance keeps grid-aligned windows exact.
        let eps = 1e-9;
        if !self.is_null() && t + eps >= self.tau_star && t + eps < self.tau_star + self.duration {
            self.u_star
        } else {
            0.0
        }
    }
}

/// Everything computed during one synthesis, exposed for inspection.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub action: Action,
    pub nominal: Trajectory<8>,
    pub adjoint: AdjointTrajectory,
    pub nominal_cost: f64,
    /// Cost with the action applied; equals `nominal_cost` for a null action.
    pub action_cost: f64,
    /// `rho(τ*)ᵀ (f̄(x̄, u*) - f̄(x̄, 0))` at the emitted action.
    pub insertion_sensitivity: f64,
}

/// The per-horizon objective: model, estimate, noise and the bias schedule.
pub struct HorizonProblem<'a, M: SensitivityModel + ?Sized> {
    pub model: &'a M,
    pub theta: Theta,
    pub noise: NoiseModel,
    pub cfg: &'a SacConfig,
    /// Start of the horizon, s.
    pub t0: f64,
    /// Seconds since the loop started at `t0`; selects the bias schedule.
    pub elapsed: f64,
}

impl<M: SensitivityModel + ?Sized> HorizonProblem<'_, M> {
    fn horizon_steps(&self) -> usize {
        self.cfg.steps(self.cfg.horizon)
    }

    fn bias(&self, k: usize) -> StateBias {
        bias_at(self.cfg, self.elapsed + k as f64 * self.cfg.dt)
    }

    pub fn simulate(&self, xs0: &ExtendedState, controls: &[f64]) -> Result<Trajectory<8>> {
        let theta = self.theta;
        crate::integrate::integrate(
            |xs: &ExtendedState, u| extended_rhs(self.model, xs, u, &theta),
            xs0,
            controls,
            self.cfg.dt,
            self.t0,
        )
    }

    /// Right-endpoint sum of the running cost over the trajectory.
    pub fn cost(&self, traj: &Trajectory<8>) -> f64 {
        (1..traj.states.len())
            .map(|k| {
                let u = traj.controls.get(k).copied().unwrap_or(0.0);
                running_cost(self.model, &traj.states[k], u, &self.theta, &self.noise, self.cfg.eps_info, &self.bias(k))
                    * traj.dt
            })
            .sum()
    }

    /// Horizon cost from `xs0` with a single action applied.
    pub fn cost_with(&self, xs0: &ExtendedState, action: &Action) -> Result<f64> {
        let n = self.horizon_steps();
        let controls: Vec<f64> = (0..n).map(|k| action.control_at(self.t0 + k as f64 * self.cfg.dt)).collect();
        Ok(self.cost(&self.simulate(xs0, &controls)?))
    }

    /// Discrete adjoint of [`Self::cost`] along a zero-control trajectory.
    pub fn adjoint(&self, nominal: &Trajectory<8>) -> Result<AdjointTrajectory> {
        nominal.validate()?;
        self.adjoint_with(nominal, |k, xs| {
            running_cost_gradient(self.model, xs, 0.0, &self.theta, &self.noise, self.cfg.eps_info, &self.bias(k))
        })
    }

    fn adjoint_with<G>(&self, nominal: &Trajectory<8>, cost_gradient: G) -> Result<AdjointTrajectory>
    where
        G: Fn(usize, &ExtendedState) -> ExtendedState,
    {
        let theta = self.theta;
        let rhs = |xs: &ExtendedState, u| extended_rhs(self.model, xs, u, &theta);
        let jac = |xs: &ExtendedState, u| extended_jacobian(self.model, xs, u, &theta);

        let n = nominal.steps();
        let mut rho = vec![ExtendedState::zeros(); n + 1];
        for k in (0..n).rev() {
            let (_, a, _) = rk4_step_linearized(&rhs, &jac, &nominal.states[k], nominal.controls[k], nominal.dt);
            let downstream = cost_gradient(k + 1, &nominal.states[k + 1]) * nominal.dt + rho[k + 1];
            rho[k] = a.transpose() * downstream;
            if !rho[k].iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    step: k,
                    time: nominal.time(k),
                });
            }
        }
        Ok(AdjointTrajectory {
            times: (0..=n).map(|k| nominal.time(k)).collect(),
            rho,
        })
    }

    /// Plans one action from `xs0`.
    pub fn synthesize(&self, xs0: &ExtendedState) -> Result<Synthesis> {
        if !xs0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite initial extended state".into()));
        }
        let cfg = self.cfg;
        let n = self.horizon_steps();
        let nominal = self.simulate(xs0, &vec![0.0; n])?;
        let adjoint = self.adjoint(&nominal)?;
        let nominal_cost = self.cost(&nominal);
        let alpha_d = cfg.gamma_ad * nominal_cost;

        let window = cfg.steps(cfg.tau_window).min(n - 1);
        let mut best: Option<(usize, f64, f64)> = None;
        for k in 0..=window {
            let (_, hbar) = extended_jacobian(self.model, &nominal.states[k], 0.0, &self.theta);
            let drive = hbar.dot(&adjoint.rho[k]);
            // Scalar least-norm minimizer of the local quadratic model.
            let u = drive * alpha_d / (drive * drive + cfg.r_sac);
            if !u.is_finite() {
                continue;
            }
            let u = u.clamp(-cfg.u_max, cfg.u_max);
            let sensitivity = drive * u;
            if best.is_none_or(|(_, _, s)| sensitivity < s) {
                best = Some((k, u, sensitivity));
            }
        }

        let null = |nominal, adjoint| Synthesis {
            action: Action::null(self.t0),
            nominal,
            adjoint,
            nominal_cost,
            action_cost: nominal_cost,
            insertion_sensitivity: 0.0,
        };
        let Some((k_star, u_star, sensitivity)) = best else {
            return Ok(null(nominal, adjoint));
        };
        if u_star == 0.0 || sensitivity >= 0.0 {
            return Ok(null(nominal, adjoint));
        }

        let tau_star = nominal.time(k_star);
        let mut duration = cfg.dt_init;
        while duration >= cfg.dt_min - 1e-12 {
            let steps = ((duration / cfg.dt).round() as usize).max(1);
            let action = Action {
                u_star,
                tau_star,
                duration: steps as f64 * cfg.dt,
            };
            let cost = self.cost_with(xs0, &action)?;
            if cost < nominal_cost {
                return Ok(Synthesis {
                    action,
                    nominal,
                    adjoint,
                    nominal_cost,
                    action_cost: cost,
                    insertion_sensitivity: sensitivity,
                });
            }
            duration *= 0.5;
        }
        Ok(null(nominal, adjoint))
    }
}

/// Adjoint with a caller-supplied running-cost gradient; exposed for tests of
/// the homogeneous case.
pub fn adjoint_with_cost_gradient<M, G>(
    problem: &HorizonProblem<'_, M>,
    nominal: &Trajectory<8>,
    cost_gradient: G,
) -> Result<AdjointTrajectory>
where
    M: SensitivityModel + ?Sized,
    G: Fn(usize, &ExtendedState) -> ExtendedState,
{
    nominal.validate()?;
    problem.adjoint_with(nominal, cost_gradient)
}

/// Latest parameter and state estimate visible to the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateSnapshot {
    pub theta: f64,
    /// Time and extended state of the observer when the estimate was
    /// published, if it carried one.
    pub state: Option<(f64, ExtendedState)>,
}

/// Read side of the estimate service. Reads happen only at action
/// boundaries.
pub trait EstimateProvider {
    fn latest(&self) -> EstimateSnapshot;
}

/// An estimate that never changes.
#[derive(Debug, Clone, Copy)]
pub struct FrozenEstimate(pub f64);

impl EstimateProvider for FrozenEstimate {
    fn latest(&self) -> EstimateSnapshot {
        EstimateSnapshot {
            theta: self.0,
            state: None,
        }
    }
}

/// Anything the loop can push a held control into for one step.
pub trait ActuatedPlant {
    /// Holds `u` over `[t, t + dt)`.
    fn apply(&mut self, t: f64, u: Control, dt: f64) -> Result<()>;
}

/// Record of a receding-horizon run.
#[derive(Debug, Clone, Default)]
pub struct SacRun {
    /// Applied controls on the `dt` grid starting at the loop start.
    pub controls: Vec<f64>,
    pub actions: Vec<(f64, Action)>,
    /// Controller-side extended state prediction at every grid time.
    pub predicted: Vec<ExtendedState>,
    pub t0: f64,
    pub dt: f64,
}

/// Runs the controller for `duration` seconds starting at `t_start`.
///
/// Every `loop_dt` the provider is queried; when it carries a state published
/// at the current time the internal prediction is re-anchored to it,
/// otherwise the prediction is the controller's own forward simulation at the
/// current estimate. A new non-null action replaces the pending one.
pub fn run_sac_loop<M, P, A>(
    model: &M,
    xs_init: &ExtendedState,
    provider: &P,
    plant: &mut A,
    t_start: f64,
    duration: f64,
    noise: NoiseModel,
    cfg: &SacConfig,
) -> Result<SacRun>
where
    M: SensitivityModel + ?Sized,
    P: EstimateProvider + ?Sized,
    A: ActuatedPlant + ?Sized,
{
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration}")));
    }
    cfg.validate()?;
    let steps = cfg.steps(duration);
    let per_tick = cfg.steps(cfg.loop_dt);
    let mut xs = *xs_init;
    let mut theta = Theta::new(provider.latest().theta);
    let mut pending = Action::null(t_start);
    let mut run = SacRun {
        t0: t_start,
        dt: cfg.dt,
        ..Default::default()
    };

    for k in 0..steps {
        let t = t_start + k as f64 * cfg.dt;
        if k % per_tick == 0 {
            let snap = provider.latest();
            theta = Theta::new(snap.theta);
            if let Some((ts, anchored)) = snap.state {
                if (ts - t).abs() < 0.5 * cfg.dt {
                    xs = anchored;
                }
            }
            let problem = HorizonProblem {
                model,
                theta,
                noise,
                cfg,
                t0: t,
                elapsed: t - t_start,
            };
            let synthesis = problem.synthesize(&xs)?;
            if !synthesis.action.is_null() {
                pending = synthesis.action;
                run.actions.push((t, pending));
            }
        }
        let u = pending.control_at(t);
        plant.apply(t, u, cfg.dt)?;
        run.predicted.push(xs);
        run.controls.push(u);
        xs = rk4_step(&|x: &ExtendedState, u| extended_rhs(model, x, u, &theta), &xs, u, cfg.dt);
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: k, time: t });
        }
    }
    run.predicted.push(xs);
    Ok(run)
}
