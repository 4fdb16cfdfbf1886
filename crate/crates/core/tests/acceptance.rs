//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use swingid::estimator::{observe, GripperInput};
use swingid::harness::{plan_and_execute, run_checks, run_sweep, SweepResult, TrialConfig};
use swingid::model::{ForceModel, State, SuspendedMass};
use swingid::sensitivity::{fisher_information, NoiseModel};

const ELL_TRUE: f64 = 0.368;

struct Outcome {
    passed: bool,
    detail: String,
}

fn sweep_reproduction(sweep: &SweepResult, seconds: f64) -> Outcome {
    let with: String = sweep.column(true).map(|t| if t.success { 'S' } else { 'F' }).collect();
    let mut ok = sweep.column(true).all(|t| t.success) && seconds < 300.0;
    let mut without = String::new();
    for t in sweep.column(false) {
        let d = (t.theta0 - ELL_TRUE).abs();
        without.push(if t.success { 'S' } else { 'F' });
        if d < 1e-9 {
            ok &= t.success;
        } else if d >= 0.04 - 1e-9 {
            ok &= !t.success;
        }
    }
    Outcome {
        passed: ok,
        detail: format!("with {with}, without {without} (±0.02 rows unasserted), {seconds:.1} s"),
    }
}

/// Earliest estimator tick from which every later estimate stays within
/// `tol` of the truth.
fn settling_time(ticks: &[(f64, f64)], tol: f64) -> Option<f64> {
    let mut onset = None;
    for &(t, th) in ticks.iter().rev() {
        if (th - ELL_TRUE).abs() > tol {
            break;
        }
        onset = Some(t);
    }
    onset
}

fn estimator_convergence(sweep: &SweepResult) -> Outcome {
    let trials: Vec<_> = sweep.column(true).collect();
    let worst = trials.iter().map(|t| (t.theta_final - ELL_TRUE).abs()).fold(0.0, f64::max);
    let mut onsets: Vec<f64> = trials
        .iter()
        .filter(|t| (t.theta0 - ELL_TRUE).abs() > 1e-9)
        .map(|t| {
            let e = t.estimation.as_ref().expect("estimation ran");
            let ticks: Vec<_> = e.ticks.iter().map(|r| (r.t, r.theta_hat)).collect();
            settling_time(&ticks, 0.005).unwrap_or(f64::INFINITY)
        })
        .collect();
    onsets.sort_by(f64::total_cmp);
    let n = onsets.len();
    let median = if n % 2 == 0 { 0.5 * (onsets[n / 2 - 1] + onsets[n / 2]) } else { onsets[n / 2] };
    let passed = worst <= 0.005 && sweep.std_theta <= 0.0042 && (2.0..=4.0).contains(&median);
    Outcome {
        passed,
        detail: format!(
            "worst |error| {worst:.4} m, mean {:.4} m, std {:.4} m, median settling {median:.1} s",
            sweep.mean_theta, sweep.std_theta
        ),
    }
}

fn plan_fidelity() -> Outcome {
    let cfg = TrialConfig::default();
    let d = cfg.task.x_desired;
    let run = |ell: f64| plan_and_execute(&cfg, ell).map(|x| {
        let m = x.terminal_mass;
        ((m[0] - d[0]).hypot(m[1] - d[1]), m[2].hypot(m[3]), x.plan.slope, x.plan.iterations)
    });
    match (run(ELL_TRUE), run(0.328)) {
        (Ok((miss, speed, slope, iters)), Ok((short_miss, _, short_slope, short_iters))) => Outcome {
            passed: miss <= 0.05
                && speed <= 0.2
                && short_miss > 0.05
                && slope < 1e-6
                && short_slope < 1e-6
                && iters <= 200
                && short_iters <= 200,
            detail: format!(
                "0.368: miss {miss:.4} m, speed {speed:.3} m/s, {iters} iters, |DJ.zeta| {slope:.1e}; 0.328: miss {short_miss:.4} m, {short_iters} iters"
            ),
        },
        (a, b) => Outcome {
            passed: false,
            detail: format!("optimizer error: {:?} / {:?}", a.err(), b.err()),
        },
    }
}

fn derivative_suites() -> Outcome {
    let start = Instant::now();
    match run_checks(0, 25) {
        Ok(reports) => {
            let seconds = start.elapsed().as_secs_f64();
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| format!("{} ({})", r.name, r.detail)).collect();
            Outcome {
                passed: failed.is_empty() && seconds < 120.0,
                detail: if failed.is_empty() {
                    format!("{} suites, 25 random points each, {seconds:.1} s", reports.len())
                } else {
                    format!("failed: {}", failed.join(", "))
                },
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn stationarity_null() -> Outcome {
    let noise = NoiseModel::from_std(0.01);
    let mut infos = Vec::new();
    for force_model in [ForceModel::Reference, ForceModel::DerivedTension] {
        let model = SuspendedMass {
            force_model,
            ..Default::default()
        };
        let mut input = GripperInput::new(0.0, 0.01, State::zeros());
        input.controls = vec![0.0; 600];
        let times: Vec<f64> = (0..600).map(|k| k as f64 * 0.01).collect();
        match observe(&model, &input, ELL_TRUE, &times) {
            Ok(obs) => infos.push(fisher_information(&obs.gammas, &noise)),
            Err(e) => {
                return Outcome {
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    Outcome {
        passed: infos.iter().all(|i| *i == 0.0),
        detail: format!("information over 6 s at rest: {infos:?}"),
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let sweep = run_sweep(&TrialConfig::default());
    let seconds = start.elapsed().as_secs_f64();

    let failed = |e: &swingid::Error| Outcome {
        passed: false,
        detail: format!("sweep error: {e}"),
    };
    let results = [
        ("sweep reproduction", sweep.as_ref().map_or_else(failed, |s| sweep_reproduction(s, seconds))),
        ("estimator convergence", sweep.as_ref().map_or_else(failed, estimator_convergence)),
        ("task-plan fidelity", plan_fidelity()),
        ("derivative oracles", derivative_suites()),
        ("stationarity null", stationarity_null()),
    ];

    println!();
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!();
    if results.iter().all(|(_, o)| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
