use std::sync::Arc;

use nalgebra::Vector4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::log::{LogRow, RunLog};
use super::plant::{PlantConfig, PlantSim};
use crate::error::{Error, Result};
use crate::estimator::{observe, EstimateRecord, EstimatorConfig, GripperInput, MeasurementBuffer, OnlineEstimator, SharedEstimate, StepOutcome};
use crate::model::{Control, SensitivityModel, State, SuspendedMass, Theta};
use crate::sac::{run_sac_loop, ActuatedPlant, EstimateProvider, SacConfig};
use crate::sensitivity::extend;
use crate::trajopt::{mass_kinematics, optimize_task, TaskConfig, TaskPlan};

const TIME_EPS: f64 = 1e-9;

/// Initial estimates of the Table I sweep, m.
pub const SWEEP_THETA0: [f64; 9] = [0.308, 0.328, 0.348, 0.368, 0.388, 0.408, 0.428, 0.448, 0.468];

/// Landing predicate for the swing task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessConfig {
    pub x_target: f64,
    pub x_tol: f64,
    /// Box rim height relative to the gripper line, m.
    pub z_rim: f64,
    pub speed_max: f64,
}

impl Default for SuccessConfig {
    fn default() -> Self {
        Self {
            x_target: -0.45,
            x_tol: 0.05,
            z_rim: -0.30,
            speed_max: 0.2,
        }
    }
}

/// `true` iff the mass ends over the box, above the rim and nearly still.
pub fn success_check(terminal_mass: &Vector4<f64>, cfg: &SuccessConfig) -> bool {
    let speed = terminal_mass[2].hypot(terminal_mass[3]);
    (terminal_mass[0] - cfg.x_target).abs() <= cfg.x_tol && terminal_mass[1] >= cfg.z_rim && speed <= cfg.speed_max
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub theta0: f64,
    pub use_estimation: bool,
    /// End of the estimation phase, s from the start of the trial.
    pub est_duration: f64,
    /// Initial period at rest before excitation starts, s.
    pub quiescent_lead: f64,
    pub seed: u64,
    pub plant: PlantConfig,
    pub success: SuccessConfig,
    pub sac: SacConfig,
    pub estimator: EstimatorConfig,
    pub task: TaskConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            theta0: 0.308,
            use_estimation: true,
            est_duration: 6.0,
            quiescent_lead: 1.0,
            seed: 0,
            plant: PlantConfig::default(),
            success: SuccessConfig::default(),
            sac: SacConfig::default(),
            estimator: EstimatorConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.plant.noise().validate()?;
        self.sac.validate()?;
        self.estimator.validate()?;
        self.task.validate()?;
        if !(self.estimator.theta_min..=self.estimator.theta_max).contains(&self.theta0) {
            return Err(Error::Config(format!(
                "theta0 = {} lies outside the estimator bounds [{}, {}]",
                self.theta0, self.estimator.theta_min, self.estimator.theta_max
            )));
        }
        if !(self.quiescent_lead >= 0.0 && self.est_duration > self.quiescent_lead) {
            return Err(Error::Config("need 0 <= quiescent_lead < est_duration".into()));
        }
        if (self.sac.dt - self.plant.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "controller step {} s differs from plant step {} s",
                self.sac.dt, self.plant.dt
            )));
        }
        Ok(())
    }

    fn planning_model(&self) -> SuspendedMass {
        self.plant.model()
    }
}

/// Output of the identification stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationOutcome {
    /// Estimate after every estimator tick, accepted or not.
    pub ticks: Vec<EstimateRecord>,
    /// Accepted updates only.
    pub accepted: Vec<EstimateRecord>,
    pub theta_final: f64,
    pub sac_actions: usize,
    pub log: RunLog,
}

/// Couples the true plant, the measurement buffer and the estimator on the
/// shared simulated clock; driven by the controller one step at a time.
struct EstimationRig<'a> {
    plant: PlantSim,
    model: &'a SuspendedMass,
    buffer: MeasurementBuffer,
    estimator: OnlineEstimator,
    shared: Arc<SharedEstimate>,
    rate: f64,
    ticks: Vec<EstimateRecord>,
    rows: Vec<LogRow>,
}

impl EstimationRig<'_> {
    fn on_tick_grid(&self, t: f64) -> bool {
        let n = t * self.rate;
        (n - n.round()).abs() < 1e-6 && n.round() >= 1.0
    }
}

impl ActuatedPlant for EstimationRig<'_> {
    fn apply(&mut self, t: f64, u: Control, dt: f64) -> Result<()> {
        let state = self.plant.state;
        let sample = self.plant.step_plant(dt, u)?;
        self.buffer.push_control(u);
        self.buffer.push_measurement(sample)?;
        self.rows.push(LogRow {
            t,
            state: state.into(),
            u: Some(u),
            force_meas: Some(sample.force),
            force_pred: None,
            theta_hat: Some(self.estimator.theta_hat),
        });
        let now = t + dt;
        if self.on_tick_grid(now) {
            let (outcome, observer) = self.estimator.tick(self.model, now, &self.buffer)?;
            let beta_value = match outcome {
                StepOutcome::Accepted(r) => r.beta_value,
                StepOutcome::Unchanged { beta_value, .. } => beta_value,
            };
            self.ticks.push(EstimateRecord {
                t: now,
                theta_hat: self.estimator.theta_hat,
                beta_value,
            });
            self.shared.publish(self.estimator.snapshot(now, observer));
        }
        Ok(())
    }
}

/// Runs the quiescent lead followed by excitation with online estimation up
/// to `est_duration`.
pub fn run_estimation(cfg: &TrialConfig) -> Result<EstimationOutcome> {
    cfg.validate()?;
    let model = cfg.planning_model();
    let noise = cfg.plant.noise();
    let dt = cfg.plant.dt;
    let shared = SharedEstimate::new(cfg.theta0);
    let mut rig = EstimationRig {
        plant: PlantSim::new(&cfg.plant, cfg.seed)?,
        model: &model,
        buffer: MeasurementBuffer::new(GripperInput::new(0.0, dt, State::zeros())),
        estimator: OnlineEstimator::new(cfg.theta0, noise, cfg.estimator.clone())?,
        shared: Arc::clone(&shared),
        rate: cfg.estimator.rate,
        ticks: Vec::new(),
        rows: Vec::new(),
    };

    let lead_steps = (cfg.quiescent_lead / dt + TIME_EPS).round() as usize;
    for k in 0..lead_steps {
        rig.apply(k as f64 * dt, 0.0, dt)?;
    }
    let t_start = lead_steps as f64 * dt;
    let xs_init = shared
        .latest()
        .state
        .filter(|(ts, _)| (ts - t_start).abs() < TIME_EPS)
        .map(|(_, xs)| xs)
        .unwrap_or_else(|| extend(&rig.plant.state, &Vector4::zeros()));
    let run = run_sac_loop(
        &model,
        &xs_init,
        shared.as_ref(),
        &mut rig,
        t_start,
        cfg.est_duration - t_start,
        noise,
        &cfg.sac,
    )?;

    let theta_final = rig.estimator.theta_hat;
    let times: Vec<f64> = rig.buffer.measurements.iter().map(|m| m.t).collect();
    let fit = observe(&model, &rig.buffer.input, theta_final, &times)?;
    let mut rows = rig.rows;
    for (row, y) in rows.iter_mut().zip(&fit.outputs) {
        row.force_pred = Some(*y);
    }
    rows.push(LogRow {
        t: rig.plant.time,
        state: rig.plant.state.into(),
        u: None,
        force_meas: None,
        force_pred: None,
        theta_hat: Some(theta_final),
    });
    Ok(EstimationOutcome {
        ticks: rig.ticks,
        accepted: rig.estimator.history,
        theta_final,
        sac_actions: run.actions.len(),
        log: RunLog { rows },
    })
}

/// Planned trajectory with its open-loop execution on the true plant.
#[derive(Debug, Clone)]
pub struct Execution {
    pub plan: TaskPlan,
    pub terminal_mass: Vector4<f64>,
    pub plan_log: RunLog,
    pub log: RunLog,
}

/// Plans at `theta_hat` and plays the controls open-loop on a fresh plant at
/// rest.
pub fn plan_and_execute(cfg: &TrialConfig, theta_hat: f64) -> Result<Execution> {
    let model = cfg.planning_model();
    let plan = optimize_task(&model, theta_hat, &cfg.task)?;
    let theta = Theta::new(theta_hat);
    let traj = &plan.trajectory.trajectory;
    let mut plan_rows: Vec<LogRow> = traj
        .controls
        .iter()
        .enumerate()
        .map(|(k, &u)| LogRow {
            t: traj.time(k),
            state: traj.states[k].into(),
            u: Some(u),
            force_meas: None,
            force_pred: Some(model.output(&traj.states[k], u, &theta)),
            theta_hat: Some(theta_hat),
        })
        .collect();
    plan_rows.push(LogRow {
        t: traj.t_final(),
        state: (*traj.last()).into(),
        u: None,
        force_meas: None,
        force_pred: None,
        theta_hat: Some(theta_hat),
    });

    let mut plant = PlantSim::new(&cfg.plant, cfg.seed.wrapping_add(1 << 32))?;
    plant.reset(0.0);
    let mut rows = Vec::with_capacity(traj.controls.len() + 1);
    for (k, &u) in traj.controls.iter().enumerate() {
        let state = plant.state;
        let t = k as f64 * cfg.task.dt;
        let sample = plant.step_plant(cfg.task.dt, u)?;
        rows.push(LogRow {
            t,
            state: state.into(),
            u: Some(u),
            force_meas: Some(sample.force),
            force_pred: plan_rows[k].force_pred,
            theta_hat: Some(theta_hat),
        });
    }
    rows.push(LogRow {
        t: traj.t_final(),
        state: plant.state.into(),
        u: None,
        force_meas: None,
        force_pred: None,
        theta_hat: Some(theta_hat),
    });
    Ok(Execution {
        terminal_mass: mass_kinematics(&plant.state, cfg.plant.ell_true),
        plan,
        plan_log: RunLog { rows: plan_rows },
        log: RunLog { rows },
    })
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub theta0: f64,
    pub use_estimation: bool,
    pub seed: u64,
    pub estimation: Option<EstimationOutcome>,
    pub theta_final: f64,
    pub execution: Option<Execution>,
    pub success: bool,
    /// Why the trial could not be completed, if it could not.
    pub failure: Option<String>,
}

impl TrialResult {
    pub fn terminal_mass(&self) -> Option<Vector4<f64>> {
        self.execution.as_ref().map(|e| e.terminal_mass)
    }

    fn failed(cfg: &TrialConfig, theta_final: f64, estimation: Option<EstimationOutcome>, err: &Error) -> Self {
        Self {
            theta0: cfg.theta0,
            use_estimation: cfg.use_estimation,
            seed: cfg.seed,
            estimation,
            theta_final,
            execution: None,
            success: false,
            failure: Some(err.to_string()),
        }
    }
}

/// Estimation (optional), reset, planning at the estimate and open-loop
/// execution on the true plant.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialResult> {
    cfg.validate()?;
    let estimation = if cfg.use_estimation {
        Some(run_estimation(cfg)?)
    } else {
        None
    };
    let theta_final = estimation.as_ref().map_or(cfg.theta0, |e| e.theta_final);
    match plan_and_execute(cfg, theta_final) {
        Ok(execution) => Ok(TrialResult {
            theta0: cfg.theta0,
            use_estimation: cfg.use_estimation,
            seed: cfg.seed,
            estimation,
            theta_final,
            success: success_check(&execution.terminal_mass, &cfg.success),
            execution: Some(execution),
            failure: None,
        }),
        Err(err) => {
            log::warn!("trial theta0 = {} could not be planned: {err}", cfg.theta0);
            Ok(TrialResult::failed(cfg, theta_final, estimation, &err))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// With-estimation trials first, each block in [`SWEEP_THETA0`] order.
    pub trials: Vec<TrialResult>,
    /// Statistics of the final estimates of the with-estimation trials.
    pub mean_theta: f64,
    pub std_theta: f64,
}

impl SweepResult {
    pub fn column(&self, use_estimation: bool) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(move |t| t.use_estimation == use_estimation)
    }
}

/// Runs every sweep initial estimate with and without estimation, in
/// parallel. Trial `i` of each column uses seed `base.seed + i`.
pub fn run_sweep(base: &TrialConfig) -> Result<SweepResult> {
    let configs: Vec<TrialConfig> = [true, false]
        .into_iter()
        .flat_map(|use_estimation| {
            SWEEP_THETA0.iter().enumerate().map(move |(i, &theta0)| TrialConfig {
                theta0,
                use_estimation,
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let trials: Vec<TrialResult> = configs
        .par_iter()
        .map(|cfg| run_trial(cfg).unwrap_or_else(|err| TrialResult::failed(cfg, f64::NAN, None, &err)))
        .collect();
    let finals: Vec<f64> = trials
        .iter()
        .filter(|t| t.use_estimation && t.theta_final.is_finite())
        .map(|t| t.theta_final)
        .collect();
    let (mean_theta, std_theta) = mean_std(&finals);
    Ok(SweepResult {
        trials,
        mean_theta,
        std_theta,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
