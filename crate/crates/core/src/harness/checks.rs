//! Randomized finite-difference and structural checks run by `swingid check`.

use nalgebra::{SVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trial::{run_trial, TrialConfig};
use crate::error::Result;
use crate::estimator::{beta, beta_gradient, estimator_step, observe, EstimatorConfig, GripperInput, Measurement, MeasurementBuffer, StepOutcome};
use crate::integrate::integrate;
use crate::model::{fd_jacobians, ForceModel, SensitivityModel, State, SuspendedMass, Theta};
use crate::sac::{HorizonProblem, SacConfig};
use crate::sensitivity::{extend, extended_rhs, fisher_information, split, ExtendedState, NoiseModel};
use crate::trajopt::{lq_descent, optimize_task, project, rollout, TaskConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error, or a short failure note.
    pub detail: String,
}

fn report(name: &'static str, worst: f64, tol: f64) -> CheckReport {
    CheckReport {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

/// `|a - b|` relative to `max(|a|, |b|, 1)`.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn random_state(rng: &mut ChaCha8Rng) -> State {
    State::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-3.0..3.0),
    )
}

/// Smooth random gripper acceleration, `n` steps.
fn random_controls(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    let (a, b) = (rng.random_range(-amp..amp), rng.random_range(-amp..amp));
    let (w1, w2) = (rng.random_range(1.0..8.0), rng.random_range(1.0..8.0));
    (0..n)
        .map(|k| {
            let t = k as f64 * 0.01;
            a * (w1 * t).sin() + b * (w2 * t).cos()
        })
        .collect()
}

fn models() -> [SuspendedMass; 2] {
    [
        SuspendedMass::default(),
        SuspendedMass {
            force_model: ForceModel::DerivedTension,
            ..Default::default()
        },
    ]
}

fn check_jacobians(rng: &mut ChaCha8Rng, points: usize) -> CheckReport {
    let mut worst: f64 = 0.0;
    for model in models() {
        for _ in 0..points {
            let x = random_state(rng);
            let u = rng.random_range(-5.0..5.0);
            let th = Theta::new(rng.random_range(0.25..0.55));
            let a = model.jacobians(&x, u, &th);
            let f = fd_jacobians(&model, &x, u, &th);
            let pairs = a.f_x.iter().zip(f.f_x.iter())
                .chain(a.f_theta.iter().zip(f.f_theta.iter()))
                .chain(a.f_u.iter().zip(f.f_u.iter()))
                .chain(a.y_x.iter().zip(f.y_x.iter()))
                .chain([(&a.y_theta, &f.y_theta), (&a.y_u, &f.y_u)]);
            for (p, q) in pairs {
                worst = worst.max(rel_err(*p, *q));
            }
        }
    }
    report("jacobians", worst, 1e-4)
}

fn state_run(model: &SuspendedMass, controls: &[f64], ell: f64) -> Result<Vec<ExtendedState>> {
    let th = Theta::new(ell);
    let traj = integrate(|xs: &ExtendedState, u| extended_rhs(model, xs, u, &th), &ExtendedState::zeros(), controls, 0.01, 0.0)?;
    Ok(traj.states)
}

fn check_sensitivity(rng: &mut ChaCha8Rng, points: usize) -> Result<CheckReport> {
    let model = SuspendedMass::default();
    let delta = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let ell = rng.random_range(0.25..0.55);
        let controls = random_controls(rng, 200, 3.0);
        let mid = state_run(&model, &controls, ell)?;
        let up = state_run(&model, &controls, ell + delta)?;
        let down = state_run(&model, &controls, ell - delta)?;
        for k in 0..mid.len() {
            let (_, psi) = split(&mid[k]);
            let (xp, _) = split(&up[k]);
            let (xm, _) = split(&down[k]);
            worst = worst.max(((xp - xm) / (2.0 * delta) - psi).amax());
        }
    }
    Ok(report("sensitivity", worst, 1e-4))
}

fn check_gamma(rng: &mut ChaCha8Rng, points: usize) -> Result<CheckReport> {
    let delta = 1e-5;
    let mut worst: f64 = 0.0;
    for model in models() {
        for _ in 0..points {
            let ell = rng.random_range(0.25..0.55);
            let mut input = GripperInput::new(0.0, 0.01, State::zeros());
            input.controls = random_controls(rng, 200, 3.0);
            let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.01).collect();
            let mid = observe(&model, &input, ell, &times)?;
            let up = observe(&model, &input, ell + delta, &times)?;
            let down = observe(&model, &input, ell - delta, &times)?;
            for k in 0..times.len() {
                let fd = (up.outputs[k] - down.outputs[k]) / (2.0 * delta);
                worst = worst.max((fd - mid.gammas[k]).abs());
            }
        }
    }
    Ok(report("gamma", worst, 1e-4))
}

fn check_adjoint(rng: &mut ChaCha8Rng, points: usize) -> Result<CheckReport> {
    let model = SuspendedMass::default();
    let cfg = SacConfig::default();
    let noise = NoiseModel::from_std(0.01);
    let n = 120;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let p = HorizonProblem {
            model: &model,
            theta: Theta::new(rng.random_range(0.25..0.55)),
            noise,
            cfg: &cfg,
            t0: 0.0,
            elapsed: rng.random_range(0.0..1.0),
        };
        let psi = Vector4::new(rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(-5.0..5.0));
        let xs0 = extend(&random_state(rng), &psi);
        let dir = SVector::<f64, 8>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let nominal = p.simulate(&xs0, &vec![0.0; n])?;
        let adj = p.adjoint(&nominal)?;
        let cost = |xs: ExtendedState| p.simulate(&xs, &vec![0.0; n]).map(|t| p.cost(&t));
        let fd = (cost(xs0 + dir * h)? - cost(xs0 - dir * h)?) / (2.0 * h);
        let analytic = adj.rho[0].dot(&dir);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6));
        if adj.rho.last().is_some_and(|r| r.iter().any(|v| *v != 0.0)) {
            return Ok(CheckReport {
                name: "adjoint",
                passed: false,
                detail: "terminal costate is not zero".into(),
            });
        }
    }
    Ok(report("adjoint", worst, 1e-3))
}

/// Noisy samples of the model under `controls` at `ell`.
fn synthetic_buffer(model: &SuspendedMass, controls: Vec<f64>, ell: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<MeasurementBuffer> {
    let mut input = GripperInput::new(0.0, 0.01, State::zeros());
    let times: Vec<f64> = (0..controls.len()).map(|k| k as f64 * 0.01).collect();
    input.controls = controls;
    let obs = observe(model, &input, ell, &times)?;
    let normal = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
    let mut buffer = MeasurementBuffer::new(GripperInput::new(0.0, 0.01, State::zeros()));
    for (k, t) in times.iter().enumerate() {
        buffer.push_control(input.controls[k]);
        let noise: f64 = if sigma > 0.0 { rng.sample(normal) } else { 0.0 };
        buffer.push_measurement(Measurement {
            t: *t,
            force: obs.outputs[k] + noise,
        })?;
    }
    Ok(buffer)
}

fn check_beta_gradient(rng: &mut ChaCha8Rng, points: usize) -> Result<CheckReport> {
    let model = SuspendedMass::default();
    let noise = NoiseModel::from_std(0.01);
    let controls = random_controls(rng, 300, 3.0);
    let buffer = synthetic_buffer(&model, controls, 0.368, 0.01, rng)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let th = rng.random_range(0.25..0.55);
        let g = beta_gradient(&model, th, &buffer, &noise)?;
        let fd = (beta(&model, th + h, &buffer, &noise)? - beta(&model, th - h, &buffer, &noise)?) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    Ok(report("beta_gradient", worst, 1e-3))
}

fn check_fisher(rng: &mut ChaCha8Rng, points: usize) -> CheckReport {
    let noise = NoiseModel::from_std(0.01);
    let mut worst: f64 = 0.0;
    let mut negative = false;
    for _ in 0..points {
        let a: Vec<f64> = (0..rng.random_range(0..50)).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..rng.random_range(0..50)).map(|_| rng.random_range(-10.0..10.0)).collect();
        let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
        let (ia, ib, ij) = (fisher_information(&a, &noise), fisher_information(&b, &noise), fisher_information(&joined, &noise));
        negative |= ia < 0.0 || ib < 0.0;
        worst = worst.max((ij - ia - ib).abs() / ij.max(1.0));
    }
    if negative {
        return CheckReport {
            name: "fisher",
            passed: false,
            detail: "negative information".into(),
        };
    }
    report("fisher", worst, 1e-12)
}

fn check_stationary(noise: &NoiseModel) -> Result<CheckReport> {
    let mut passed = true;
    for model in models() {
        let mut input = GripperInput::new(0.0, 0.01, State::zeros());
        input.controls = vec![0.0; 600];
        let times: Vec<f64> = (0..600).map(|k| k as f64 * 0.01).collect();
        let obs = observe(&model, &input, 0.368, &times)?;
        passed &= fisher_information(&obs.gammas, noise) == 0.0;
    }
    Ok(CheckReport {
        name: "stationary_null",
        passed,
        detail: if passed { "information exactly 0".into() } else { "non-zero information at rest".into() },
    })
}

fn check_projection(rng: &mut ChaCha8Rng, points: usize) -> Result<CheckReport> {
    let model = SuspendedMass::default();
    let cfg = TaskConfig {
        t_f: 1.0,
        ..Default::default()
    };
    let mut passed = true;
    for _ in 0..points {
        let ell = rng.random_range(0.25..0.55);
        let xi = rollout(&model, &random_controls(rng, cfg.steps(), 2.0), ell, cfg.dt)?;
        let d = lq_descent(&model, &xi, &cfg)?;
        let alpha: Vec<_> = xi.trajectory.states.iter().zip(&d.z).map(|(x, z)| x + z * 0.5).collect();
        let mu: Vec<_> = xi.trajectory.controls.iter().zip(&d.v).map(|(u, v)| u + v * 0.5).collect();
        let once = project(&model, &alpha, &mu, &d.gains, ell, cfg.dt)?;
        let twice = project(&model, &once.trajectory.states, &once.trajectory.controls, &d.gains, ell, cfg.dt)?;
        passed &= once == twice && d.slope <= 0.0;
    }
    Ok(CheckReport {
        name: "projection",
        passed,
        detail: if passed { "idempotent, descent slopes non-positive".into() } else { "projection not idempotent".into() },
    })
}

fn check_descent(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let model = SuspendedMass::default();
    let ell = rng.random_range(0.33..0.43);
    let plan = optimize_task(&model, ell, &TaskConfig::default())?;
    let mut passed = plan.cost_history.windows(2).all(|w| w[1] <= w[0]);

    let noise = NoiseModel::from_std(0.01);
    let buffer = synthetic_buffer(&model, random_controls(rng, 400, 3.0), 0.368, 0.01, rng)?;
    let cfg = EstimatorConfig {
        iterations_per_tick: 1,
        ..Default::default()
    };
    let mut theta = rng.random_range(0.31..0.46);
    let mut last = beta(&model, theta, &buffer, &noise)?;
    for _ in 0..30 {
        match estimator_step(&model, theta, 0.0, &buffer, &noise, &cfg)? {
            StepOutcome::Accepted(r) => {
                passed &= r.beta_value <= last;
                last = r.beta_value;
                theta = r.theta_hat;
            }
            StepOutcome::Unchanged { .. } => break,
        }
    }
    Ok(CheckReport {
        name: "monotone_descent",
        passed,
        detail: format!("planner {} iterations, estimator ended at {theta:.4} m", plan.iterations),
    })
}

fn check_determinism(seed: u64) -> Result<CheckReport> {
    let cfg = TrialConfig {
        seed,
        ..Default::default()
    };
    let a = run_trial(&cfg)?;
    let b = run_trial(&cfg)?;
    let same = a.estimation.as_ref().map(|e| &e.log) == b.estimation.as_ref().map(|e| &e.log)
        && a.execution.as_ref().map(|e| &e.log) == b.execution.as_ref().map(|e| &e.log)
        && a.theta_final.to_bits() == b.theta_final.to_bits();
    Ok(CheckReport {
        name: "determinism",
        passed: same,
        detail: if same { "identical logs".into() } else { "logs differ between runs".into() },
    })
}

/// Runs every check with `points` random samples each, seeded by `seed`.
pub fn run_checks(seed: u64, points: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = NoiseModel::from_std(0.01);
    Ok(vec![
        check_jacobians(&mut rng, points),
        check_sensitivity(&mut rng, points)?,
        check_gamma(&mut rng, points)?,
        check_adjoint(&mut rng, points)?,
        check_beta_gradient(&mut rng, points)?,
        check_fisher(&mut rng, points),
        check_stationary(&noise)?,
        check_projection(&mut rng, points)?,
        check_descent(&mut rng)?,
        check_determinism(seed)?,
    ])
}
