use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Measurement;
use crate::integrate::rk4_step;
use crate::model::{string_tension, Control, ForceModel, Params, SensitivityModel, State, SuspendedMass, DEFAULT_MASS, GRAVITY};
use crate::sensitivity::NoiseModel;

/// Physical setup of the simulated rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// True string length, m.
    pub ell_true: f64,
    pub mass: f64,
    pub gravity: f64,
    /// Load-cell noise standard deviation, N.
    pub noise_std: f64,
    pub force_model: ForceModel,
    /// Integration and sampling step, s (100 Hz).
    pub dt: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            ell_true: 0.368,
            mass: DEFAULT_MASS,
            gravity: GRAVITY,
            noise_std: 0.01,
            force_model: ForceModel::Reference,
            dt: 0.01,
        }
    }
}

impl PlantConfig {
    pub fn params(&self) -> Params {
        Params {
            ell: self.ell_true,
            mass: self.mass,
            gravity: self.gravity,
        }
    }

    pub fn model(&self) -> SuspendedMass {
        SuspendedMass::from_params(&self.params(), self.force_model)
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel::from_std(self.noise_std)
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("plant: noise_std must be non-negative, got {}", self.noise_std)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("plant: dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// The true system: integrates the dynamics under applied gripper
/// accelerations and emits noisy load-cell samples.
#[derive(Debug, Clone)]
pub struct PlantSim {
    pub params: Params,
    pub model: SuspendedMass,
    pub state: State,
    pub time: f64,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
    slack_reported: bool,
}

impl PlantSim {
    pub fn new(cfg: &PlantConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: cfg.params(),
            model: cfg.model(),
            state: State::zeros(),
            time: 0.0,
            noise: Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            slack_reported: false,
        })
    }

    /// Puts the mass back at rest under the gripper at the origin.
    pub fn reset(&mut self, time: f64) {
        self.state = State::zeros();
        self.time = time;
    }

    /// Noise-free force at the current state under `u`.
    pub fn true_force(&self, u: Control) -> f64 {
        self.model.output(&self.state, u, &self.params.theta())
    }

    /// Samples the load cell at the current time with `u` applied, then holds
    /// `u` for one step.
    pub fn step_plant(&mut self, dt: f64, u: Control) -> Result<Measurement> {
        let theta = self.params.theta();
        if string_tension(&self.state, u, &self.params) <= 0.0 && !self.slack_reported {
            log::warn!("string tension is non-positive at t = {:.3} s; the taut-string model is violated", self.time);
            self.slack_reported = true;
        }
        let sample = Measurement {
            t: self.time,
            force: self.true_force(u) + self.noise.sample(&mut self.rng),
        };
        let next = rk4_step(&|x: &State, u| self.model.rhs(x, u, &theta), &self.state, u, dt);
        if !(u.is_finite() && next.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence {
                step: (self.time / dt).round() as usize,
                time: self.time,
            });
        }
        self.state = next;
        self.time += dt;
        Ok(sample)
    }
}
