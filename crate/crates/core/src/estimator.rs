//! Batch nonlinear least-squares estimation of the string length from
//! load-cell samples.
//!
//! The predicted force comes from a forward observer: the model is driven by
//! the recorded gripper accelerations from a known rest state at the candidate
//! parameter. The residual cost is minimized by projected gradient descent
//! with Armijo backtracking, one (or a few) iterations per estimator tick.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{integrate, Trajectory};
use crate::model::{SensitivityModel, State, Theta};
use crate::sac::{EstimateProvider, EstimateSnapshot};
use crate::sensitivity::{extend, extended_rhs, gamma_theta, split, ExtendedState, NoiseModel};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// s
    pub t: f64,
    /// N
    pub force: f64,
}

/// Recorded gripper motion: accelerations held on a uniform grid from a known
/// initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct GripperInput {
    pub t0: f64,
    pub dt: f64,
    pub x0: State,
    pub controls: Vec<f64>,
}

impl GripperInput {
    pub fn new(t0: f64, dt: f64, x0: State) -> Self {
        Self {
            t0,
            dt,
            x0,
            controls: Vec::new(),
        }
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.controls.len() as f64 * self.dt
    }
}

/// Append-only sample history paired with the gripper record that produced
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBuffer {
    pub input: GripperInput,
    pub measurements: Vec<Measurement>,
}

impl MeasurementBuffer {
    pub fn new(input: GripperInput) -> Self {
        Self {
            input,
            measurements: Vec::new(),
        }
    }

    pub fn push_control(&mut self, u: f64) {
        self.input.controls.push(u);
    }

    pub fn push_measurement(&mut self, m: Measurement) -> Result<()> {
        if !(m.t.is_finite() && m.force.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite measurement {m:?}")));
        }
        if let Some(last) = self.measurements.last() {
            if m.t < last.t {
                return Err(Error::InvalidArgument(format!(
                    "measurement at t = {} precedes the previous one at t = {}",
                    m.t, last.t
                )));
            }
        }
        self.measurements.push(m);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    /// Everything recorded strictly before `t` (gripper record up to `t`).
    pub fn prefix(&self, t: f64) -> Self {
        let steps = (((t - self.input.t0) / self.input.dt).round().max(0.0) as usize).min(self.input.controls.len());
        Self {
            input: GripperInput {
                controls: self.input.controls[..steps].to_vec(),
                ..self.input.clone()
            },
            measurements: self
                .measurements
                .iter()
                .take_while(|m| m.t < t - TIME_EPS)
                .copied()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Hz
    pub rate: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    /// Initial gradient step, m² per cost unit.
    pub step0: f64,
    pub max_backtracks: usize,
    /// Largest parameter change tried per iteration, m.
    pub max_step: f64,
    /// Gradient iterations per tick.
    pub iterations_per_tick: usize,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            rate: 2.0,
            armijo_c: 1e-4,
            shrink: 0.5,
            step0: 0.05,
            max_backtracks: 20,
            max_step: 0.02,
            iterations_per_tick: 3,
            theta_min: 0.10,
            theta_max: 0.80,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("estimator: {msg}")));
        if !(self.rate > 0.0) {
            return bad("rate must be positive");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c must lie in (0, 1)");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink must lie in (0, 1)");
        }
        if !(self.step0 > 0.0 && self.max_step > 0.0) {
            return bad("step0 and max_step must be positive");
        }
        if self.iterations_per_tick == 0 {
            return bad("iterations_per_tick must be at least 1");
        }
        if !(self.theta_min > 0.0 && self.theta_max > self.theta_min) {
            return bad("need 0 < theta_min < theta_max");
        }
        Ok(())
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.theta_min, self.theta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub t: f64,
    pub theta_hat: f64,
    pub beta_value: f64,
}

/// Observer output at one candidate parameter.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Extended state `(x, dx/dθ)` on the input grid.
    pub trajectory: Trajectory<8>,
    /// Predicted force at each requested time.
    pub outputs: Vec<f64>,
    /// `dy/dθ` at each requested time.
    pub gammas: Vec<f64>,
}

impl Observation {
    pub fn final_state(&self) -> ExtendedState {
        *self.trajectory.last()
    }
}

/// Simulates the model under the recorded gripper input at `theta` and
/// samples the predicted output (linearly interpolated) at `times`.
pub fn observe<M: SensitivityModel + ?Sized>(
    model: &M,
    input: &GripperInput,
    theta: f64,
    times: &[f64],
) -> Result<Observation> {
    let th = Theta::new(theta);
    let xs0 = extend(&input.x0, &nalgebra::Vector4::zeros());
    let trajectory = integrate(
        |xs: &ExtendedState, u| extended_rhs(model, xs, u, &th),
        &xs0,
        &input.controls,
        input.dt,
        input.t0,
    )?;
    let n = input.controls.len();
    let u_at = |k: usize| input.controls.get(k).or(input.controls.last()).copied().unwrap_or(0.0);
    let node = |k: usize| {
        let xs = &trajectory.states[k];
        let (x, _) = split(xs);
        (model.output(&x, u_at(k), &th), gamma_theta(model, xs, u_at(k), &th))
    };

    let (start, end) = (input.t0, input.t_end());
    let mut outputs = Vec::with_capacity(times.len());
    let mut gammas = Vec::with_capacity(times.len());
    for &t in times {
        if t < start - TIME_EPS || t > end + TIME_EPS {
            return Err(Error::OutOfSpan { time: t, start, end });
        }
        let s = ((t - start) / input.dt).max(0.0);
        let k = (s.floor() as usize).min(n);
        let frac = s - k as f64;
        let (y0, g0) = node(k);
        if frac <= TIME_EPS || k == n {
            outputs.push(y0);
            gammas.push(g0);
        } else {
            let (y1, g1) = node(k + 1);
            outputs.push(y0 + frac * (y1 - y0));
            gammas.push(g0 + frac * (g1 - g0));
        }
    }
    Ok(Observation {
        trajectory,
        outputs,
        gammas,
    })
}

fn times(buffer: &MeasurementBuffer) -> Vec<f64> {
    buffer.measurements.iter().map(|m| m.t).collect()
}

/// `½ Σ (ỹ - y)² / σ²` and its derivative with respect to θ.
pub fn beta_and_gradient<M: SensitivityModel + ?Sized>(
    model: &M,
    theta: f64,
    buffer: &MeasurementBuffer,
    noise: &NoiseModel,
) -> Result<(f64, f64)> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let obs = observe(model, &buffer.input, theta, &times(buffer))?;
    let mut value = 0.0;
    let mut grad = 0.0;
    for ((m, y), g) in buffer.measurements.iter().zip(&obs.outputs).zip(&obs.gammas) {
        let r = m.force - y;
        value += r * r;
        grad -= r * g;
    }
    Ok((0.5 * value / noise.sigma2, grad / noise.sigma2))
}

pub fn beta<M: SensitivityModel + ?Sized>(
    model: &M,
    theta: f64,
    buffer: &MeasurementBuffer,
    noise: &NoiseModel,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let obs = observe(model, &buffer.input, theta, &times(buffer))?;
    let sum: f64 = buffer
        .measurements
        .iter()
        .zip(&obs.outputs)
        .map(|(m, y)| (m.force - y).powi(2))
        .sum();
    Ok(0.5 * sum / noise.sigma2)
}

pub fn beta_gradient<M: SensitivityModel + ?Sized>(
    model: &M,
    theta: f64,
    buffer: &MeasurementBuffer,
    noise: &NoiseModel,
) -> Result<f64> {
    beta_and_gradient(model, theta, buffer, noise).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Accepted(EstimateRecord),
    Unchanged { theta_hat: f64, beta_value: f64 },
}

impl StepOutcome {
    pub fn theta_hat(&self) -> f64 {
        match self {
            Self::Accepted(r) => r.theta_hat,
            Self::Unchanged { theta_hat, .. } => *theta_hat,
        }
    }
}

/// Gradient iterations with projected Armijo backtracking. The estimate only
/// moves when the sufficient-decrease test passes.
pub fn estimator_step<M: SensitivityModel + ?Sized>(
    model: &M,
    theta_hat: f64,
    t: f64,
    buffer: &MeasurementBuffer,
    noise: &NoiseModel,
    cfg: &EstimatorConfig,
) -> Result<StepOutcome> {
    let mut theta = cfg.clamp(theta_hat);
    let mut accepted = None;
    let (mut value, mut grad) = beta_and_gradient(model, theta, buffer, noise)?;
    for _ in 0..cfg.iterations_per_tick {
        if grad == 0.0 || !grad.is_finite() {
            break;
        }
        let mut step = cfg.step0.min(cfg.max_step / grad.abs());
        let mut moved = false;
        for _ in 0..=cfg.max_backtracks {
            let candidate = cfg.clamp(theta - step * grad);
            if candidate != theta {
                let trial = beta(model, candidate, buffer, noise)?;
                // Projected form of value - c * step * grad².
                if trial <= value - cfg.armijo_c * grad * (theta - candidate) {
                    theta = candidate;
                    value = trial;
                    moved = true;
                    break;
                }
            }
            step *= cfg.shrink;
        }
        if !moved {
            break;
        }
        accepted = Some(EstimateRecord {
            t,
            theta_hat: theta,
            beta_value: value,
        });
        grad = beta_gradient(model, theta, buffer, noise)?;
    }
    Ok(match accepted {
        Some(r) => StepOutcome::Accepted(r),
        None => StepOutcome::Unchanged {
            theta_hat: theta,
            beta_value: value,
        },
    })
}

/// Single-writer estimate publication shared with the controller.
#[derive(Debug)]
pub struct SharedEstimate(Mutex<EstimateSnapshot>);

impl SharedEstimate {
    pub fn new(theta: f64) -> Arc<Self> {
        Arc::new(Self(Mutex::new(EstimateSnapshot { theta, state: None })))
    }

    pub fn publish(&self, snapshot: EstimateSnapshot) {
        *self.0.lock().expect("estimate lock poisoned") = snapshot;
    }
}

impl EstimateProvider for SharedEstimate {
    fn latest(&self) -> EstimateSnapshot {
        *self.0.lock().expect("estimate lock poisoned")
    }
}

/// The estimator node: holds the current estimate and its accepted history.
#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    pub cfg: EstimatorConfig,
    pub noise: NoiseModel,
    pub theta_hat: f64,
    pub history: Vec<EstimateRecord>,
}

impl OnlineEstimator {
    pub fn new(theta0: f64, noise: NoiseModel, cfg: EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        noise.validate()?;
        if !(cfg.theta_min..=cfg.theta_max).contains(&theta0) {
            return Err(Error::InvalidArgument(format!(
                "initial estimate {theta0} outside [{}, {}]",
                cfg.theta_min, cfg.theta_max
            )));
        }
        Ok(Self {
            cfg,
            noise,
            theta_hat: theta0,
            history: Vec::new(),
        })
    }

    /// One estimator cycle at time `t` over the full history in `buffer`;
    /// returns the observer state at `t` for the current estimate.
    pub fn tick<M: SensitivityModel + ?Sized>(
        &mut self,
        model: &M,
        t: f64,
        buffer: &MeasurementBuffer,
    ) -> Result<(StepOutcome, ExtendedState)> {
        let outcome = if buffer.is_empty() {
            StepOutcome::Unchanged {
                theta_hat: self.theta_hat,
                beta_value: 0.0,
            }
        } else {
            estimator_step(model, self.theta_hat, t, buffer, &self.noise, &self.cfg)?
        };
        if let StepOutcome::Accepted(r) = outcome {
            self.theta_hat = r.theta_hat;
            self.history.push(r);
        }
        let state = observe(model, &buffer.input, self.theta_hat, &[])?.final_state();
        Ok((outcome, state))
    }

    pub fn snapshot(&self, t: f64, state: ExtendedState) -> EstimateSnapshot {
        EstimateSnapshot {
            theta: self.theta_hat,
            state: Some((t, state)),
        }
    }
}

/// Replays a recorded buffer through the estimator at its configured rate.
///
/// Ticks fall at `start + k / rate` for `k >= 1` up to `start + duration`;
/// each sees only what was recorded before it. Accepted estimates are
/// published to `provider` when one is given.
pub fn run_estimator<M: SensitivityModel + ?Sized>(
    model: &M,
    buffer: &MeasurementBuffer,
    theta0: f64,
    noise: NoiseModel,
    cfg: &EstimatorConfig,
    start: f64,
    duration: f64,
    provider: Option<&SharedEstimate>,
) -> Result<Vec<EstimateRecord>> {
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration}")));
    }
    let mut est = OnlineEstimator::new(theta0, noise, cfg.clone())?;
    let period = 1.0 / cfg.rate;
    let ticks = (duration / period + TIME_EPS).floor() as usize;
    for k in 1..=ticks {
        let t = start + k as f64 * period;
        let view = buffer.prefix(t);
        let (outcome, state) = est.tick(model, t, &view)?;
        if let (Some(p), StepOutcome::Accepted(_)) = (provider, outcome) {
            p.publish(est.snapshot(t, state));
        }
    }
    Ok(est.history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SuspendedMass;
    use approx::assert_relative_eq;

    fn excited_buffer(model: &SuspendedMass, ell: f64, seconds: f64) -> MeasurementBuffer {
        let dt = 0.01;
        let n = (seconds / dt).round() as usize;
        let controls: Vec<f64> = (0..n).map(|k| 2.0 * (k as f64 * dt * 4.0).sin()).collect();
        let input = GripperInput {
            t0: 0.0,
            dt,
            x0: State::zeros(),
            controls,
        };
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let obs = observe(model, &input, ell, &times).unwrap();
        MeasurementBuffer {
            input,
            measurements: times.iter().zip(obs.outputs).map(|(&t, force)| Measurement { t, force }).collect(),
        }
    }

    #[test]
    fn rest_prediction_is_weight() {
        let model = SuspendedMass::default();
        let input = GripperInput {
            t0: 0.0,
            dt: 0.01,
            x0: State::zeros(),
            controls: vec![0.0; 100],
        };
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let obs = observe(&model, &input, 0.368, &times).unwrap();
        assert!(obs.outputs.iter().all(|y| (y - 0.05 * 9.81).abs() < 1e-15));
    }

    #[test]
    fn out_of_span_measurement_is_an_error() {
        let model = SuspendedMass::default();
        let input = GripperInput {
            t0: 0.0,
            dt: 0.01,
            x0: State::zeros(),
            controls: vec![0.0; 10],
        };
        assert!(matches!(observe(&model, &input, 0.368, &[0.2]), Err(Error::OutOfSpan { .. })));
    }

    #[test]
    fn beta_arithmetic() {
        let model = SuspendedMass::default();
        let mut buffer = MeasurementBuffer::new(GripperInput {
            t0: 0.0,
            dt: 0.01,
            x0: State::zeros(),
            controls: vec![0.0; 5],
        });
        let unit = NoiseModel { sigma2: 1.0 };
        assert!(matches!(beta(&model, 0.368, &buffer, &unit), Err(Error::EmptyBuffer)));
        buffer.push_measurement(Measurement { t: 0.0, force: 0.4905 }).unwrap();
        assert_relative_eq!(beta(&model, 0.368, &buffer, &unit).unwrap(), 0.0, epsilon = 1e-20);
        assert_eq!(beta_gradient(&model, 0.368, &buffer, &unit).unwrap(), 0.0);
        buffer.measurements[0].force += 1.0;
        assert_relative_eq!(beta(&model, 0.368, &buffer, &unit).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn measurements_must_be_ordered() {
        let mut buffer = MeasurementBuffer::new(GripperInput::new(0.0, 0.01, State::zeros()));
        buffer.push_measurement(Measurement { t: 0.1, force: 0.0 }).unwrap();
        assert!(buffer.push_measurement(Measurement { t: 0.05, force: 0.0 }).is_err());
        assert!(buffer.push_measurement(Measurement { t: f64::NAN, force: 0.0 }).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let model = SuspendedMass::default();
        let buffer = excited_buffer(&model, 0.368, 3.0);
        let noise = NoiseModel::from_std(0.01);
        for theta in [0.31, 0.35, 0.39, 0.44] {
            let g = beta_gradient(&model, theta, &buffer, &noise).unwrap();
            let h = 1e-6;
            let fd = (beta(&model, theta + h, &buffer, &noise).unwrap() - beta(&model, theta - h, &buffer, &noise).unwrap())
                / (2.0 * h);
            assert_relative_eq!(g, fd, max_relative = 1e-3);
        }
    }

    #[test]
    fn zero_gradient_leaves_estimate() {
        let model = SuspendedMass::default();
        let buffer = excited_buffer(&model, 0.368, 1.0);
        let noise = NoiseModel::from_std(0.01);
        // Exact data at the truth: zero residual, zero gradient.
        let out = estimator_step(&model, 0.368, 1.0, &buffer, &noise, &EstimatorConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::Unchanged { theta_hat: 0.368, beta_value: 0.0 });
    }

    #[test]
    fn estimates_stay_in_bounds() {
        let model = SuspendedMass::default();
        let buffer = excited_buffer(&model, 0.368, 2.0);
        let noise = NoiseModel::from_std(0.01);
        let cfg = EstimatorConfig {
            theta_min: 0.40,
            theta_max: 0.50,
            ..Default::default()
        };
        let out = estimator_step(&model, 0.45, 2.0, &buffer, &noise, &cfg).unwrap();
        let th = out.theta_hat();
        assert!((0.40..=0.50).contains(&th));
    }

    #[test]
    fn prefix_keeps_only_the_past() {
        let model = SuspendedMass::default();
        let buffer = excited_buffer(&model, 0.368, 1.0);
        let p = buffer.prefix(0.5);
        assert_eq!(p.input.controls.len(), 50);
        assert_eq!(p.len(), 50);
        assert!(p.measurements.iter().all(|m| m.t < 0.5));
    }

    #[test]
    fn replay_publishes_and_converges() {
        let model = SuspendedMass::default();
        let buffer = excited_buffer(&model, 0.368, 4.0);
        let noise = NoiseModel::from_std(0.01);
        let shared = SharedEstimate::new(0.40);
        let cfg = EstimatorConfig {
            iterations_per_tick: 5,
            ..Default::default()
        };
        let history = run_estimator(&model, &buffer, 0.40, noise, &cfg, 0.0, 4.0, Some(&shared)).unwrap();
        let last = history.last().unwrap();
        assert!((last.theta_hat - 0.368).abs() < 1e-3, "{history:?}");
        assert_eq!(shared.latest().theta, last.theta_hat);
        assert!(history.iter().all(|r| r.t > 0.0));
    }
}
