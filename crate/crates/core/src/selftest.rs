//! Built-in verification suites behind the `selftest` command.
//!
//! The finite-difference suite checks the analytic denoiser against a
//! separately written mixture log-density; it deliberately shares no code
//! with [`crate::denoiser::gmm_predict`].

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{gmm_predict, GmmComponent, GmmCondition};
use crate::distill::{csd_grad, ssd_decomposed, ssd_grad, EstimatorInputs};
use crate::edit::{run_edit, EditConfig};
use crate::exec::Exec;
use crate::field::{max_abs_diff, Field};
use crate::rng::{self, Purpose};
use crate::schedule::DiffusionSchedule;

pub const IDENTITY_TOL: f64 = 1e-12;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-4;
/// Floor on the reference magnitude in the relative error, so that cases
/// where the reference prediction is itself ~0 are judged absolutely.
pub const FD_REL_FLOOR: f64 = 1e-2;
pub const CONVERGENCE_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    /// Worst deviation observed (absolute or relative, see `metric`).
    pub worst: f64,
    pub tolerance: f64,
    pub metric: &'static str,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn random_field(rng: &mut impl Rng, len: usize, scale: f64) -> Field {
    Field::from_shape_simple_fn(ndarray::IxDyn(&[len]), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Random estimator inputs with `1..=16` elements and `N(0, 9)` entries.
pub fn random_inputs(seed: u64, case: usize) -> (EstimatorInputs, f64) {
    let mut rng = rng::derive(seed, case as u64, Purpose::Oracle);
    let len = rng.random_range(1..=16);
    let mut f = || random_field(&mut rng, len, 3.0);
    let inputs = EstimatorInputs::complete(f(), f(), f(), f(), f(), f(), 1);
    let s = rng::derive(seed ^ 0x5eed, case as u64, Purpose::Oracle).random_range(-10.0..=10.0);
    (inputs, s)
}

/// `max |ssd_grad(s) - ssd_decomposed(w_p = s, w_t = 1)|` over random draws.
pub fn identity_suite(draws: usize, seed: u64, exec: Exec) -> SuiteReport {
    let start = Instant::now();
    let worst = exec
        .map(draws, |i| {
            let (inp, s) = random_inputs(seed, i);
            max_abs_diff(&ssd_grad(&inp, s).unwrap(), &ssd_decomposed(&inp, s, 1.0).unwrap())
        })
        .into_iter()
        .fold(0.0, f64::max);
    SuiteReport {
        name: "ssd == cross-prompt + cross-trajectory",
        cases: draws,
        worst,
        tolerance: IDENTITY_TOL,
        metric: "max abs",
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// `max |ssd_decomposed(w_p = w, w_t = 0) - csd_grad(w, w)|` over random draws.
pub fn csd_regime_suite(draws: usize, seed: u64, exec: Exec) -> SuiteReport {
    let start = Instant::now();
    let worst = exec
        .map(draws, |i| {
            let (inp, w) = random_inputs(seed, i);
            max_abs_diff(&ssd_decomposed(&inp, w, 0.0).unwrap(), &csd_grad(&inp, w, w).unwrap())
        })
        .into_iter()
        .fold(0.0, f64::max);
    SuiteReport {
        name: "ssd(w_t = 0) == dual classifier",
        cases: draws,
        worst,
        tolerance: IDENTITY_TOL,
        metric: "max abs",
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// A random mixture, timestep and latent for the finite-difference check.
#[derive(Debug, Clone)]
pub struct FdCase {
    pub mixture: GmmCondition,
    pub t: usize,
    pub z: Vec<f64>,
}

pub fn random_fd_case(seed: u64, case: usize, sched: &DiffusionSchedule) -> FdCase {
    let mut rng = rng::derive(seed, case as u64, Purpose::Oracle);
    let dim = rng.random_range(1..=4);
    let k = rng.random_range(1..=4);
    let comps: Vec<GmmComponent> = (0..k)
        .map(|_| GmmComponent {
            mean: (0..dim).map(|_| rng.random_range(-2.0..=2.0)).collect(),
            weight: rng.random_range(0.1..=1.0),
        })
        .collect();
    let data_sigma = if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(0.0..=0.5)
    };
    let mixture = GmmCondition::normalized(comps, data_sigma).expect("valid random mixture");
    let t = rng.random_range(1..=sched.num_steps());
    // draw z from the noised marginal
    let ab = sched.alpha_bar(t);
    let j = rng.random_range(0..k);
    let sd = (ab * data_sigma * data_sigma + 1.0 - ab).sqrt();
    let z = mixture.components()[j]
        .mean
        .iter()
        .map(|m| ab.sqrt() * m + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    FdCase { mixture, t, z }
}

/// `log p_t(z)` of the noised mixture, with full normalization constants.
pub fn reference_log_density(mix: &GmmCondition, alpha_bar: f64, z: &[f64]) -> f64 {
    let var = alpha_bar * mix.data_sigma().powi(2) + (1.0 - alpha_bar);
    let d = z.len() as f64;
    let terms: Vec<f64> = mix
        .components()
        .iter()
        .map(|c| {
            let q: f64 = z
                .iter()
                .zip(&c.mean)
                .map(|(zi, mi)| (zi - alpha_bar.sqrt() * mi).powi(2))
                .sum();
            c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * q / var
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-sqrt(1 - alpha_bar_t) * grad log p_t(z)` by central differences.
pub fn fd_noise_prediction(case: &FdCase, sched: &DiffusionSchedule, h: f64) -> Vec<f64> {
    let ab = sched.alpha_bar(case.t);
    (0..case.z.len())
        .map(|i| {
            let mut plus = case.z.clone();
            let mut minus = case.z.clone();
            plus[i] += h;
            minus[i] -= h;
            let g = (reference_log_density(&case.mixture, ab, &plus)
                - reference_log_density(&case.mixture, ab, &minus))
                / (2.0 * h);
            -(1.0 - ab).sqrt() * g
        })
        .collect()
}

/// `max|analytic - fd| / max(max|fd|, FD_REL_FLOOR)` for one case.
pub fn fd_relative_error(case: &FdCase, sched: &DiffusionSchedule) -> f64 {
    let latent = crate::field::vector(&case.z);
    let analytic = gmm_predict(&latent, &case.mixture, case.t, sched).expect("valid case");
    let fd = fd_noise_prediction(case, sched, FD_STEP);
    let diff = analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max).max(FD_REL_FLOOR);
    diff / scale
}

pub fn fd_suite(cases: usize, seed: u64, exec: Exec) -> SuiteReport {
    let start = Instant::now();
    let sched = DiffusionSchedule::default();
    let worst = exec
        .map(cases, |i| fd_relative_error(&random_fd_case(seed, i, &sched), &sched))
        .into_iter()
        .fold(0.0, f64::max);
    SuiteReport {
        name: "analytic eps vs finite-difference score",
        cases,
        worst,
        tolerance: FD_REL_TOL,
        metric: "max rel",
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The 1-D edit from the source mode -1 towards the target mode +1.
pub fn convergence_config(seed: u64) -> EditConfig {
    let text = format!(
        r#"{{
            "run_id": "converge-1d",
            "estimator": "ssd",
            "weights": {{ "s": 1.0 }},
            "sampler": {{ "kind": "non_increasing_linear", "t_min": 20, "t_max": 980 }},
            "total_iters": 300,
            "step_size": 0.05,
            "seeds": {{ "noise": {seed}, "sampler": {seed} }},
            "backend": {{
                "kind": "analytic",
                "components": [ {{ "mean": [-1.0], "weight": 0.5 }}, {{ "mean": [1.0], "weight": 0.5 }} ],
                "prompts": {{ "source": [0], "target": [1] }}
            }},
            "source": {{ "shape": [1], "data": [-1.0] }},
            "source_prompt": "source",
            "target_prompt": "target"
        }}"#
    );
    EditConfig::from_json(&text).expect("built-in config parses")
}

pub fn convergence_check(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let worst = match run_edit(&convergence_config(seed)) {
        Ok(run) => (run.final_image[[0]] - 1.0).abs(),
        Err(_) => f64::INFINITY,
    };
    SuiteReport {
        name: "1-D edit reaches the target mode",
        cases: 1,
        worst,
        tolerance: CONVERGENCE_TOL,
        metric: "|θ - 1|",
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all(exec: Exec) -> Vec<SuiteReport> {
    vec![
        fd_suite(200, 11, exec),
        identity_suite(1000, 12, exec),
        csd_regime_suite(1000, 13, exec),
        convergence_check(14),
    ]
}

pub fn format_table(reports: &[SuiteReport]) -> String {
    let mut out = format!(
        "{:<42} {:>6} {:>10} {:>12} {:>10} {:>8}  result\n",
        "suite", "cases", "metric", "worst", "tolerance", "secs"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<42} {:>6} {:>10} {:>12.3e} {:>10.1e} {:>8.3}  {}\n",
            r.name,
            r.cases,
            r.metric,
            r.worst,
            r.tolerance,
            r.seconds,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
