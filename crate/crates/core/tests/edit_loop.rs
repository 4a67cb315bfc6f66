mod common;

use std::collections::BTreeMap;

use score_distill::denoiser::{AnalyticBackend, Condition, CountingBackend, DenoiserBackend, GmmComponent};
use score_distill::distill::{ssd_grad, EstimatorInputs, GuidanceWeights, IdWeight, Term};
use score_distill::edit::{
    run_edit, step, EditConfig, EditLoop, EditState, Estimator, NoisePolicy, NoiseSource, Optimizer,
    PixelGenerator, SeededNoise, StepOptions,
};
use score_distill::field::{vector, Field};
use score_distill::rng::{standard_normal, Purpose};
use score_distill::schedule::{DiffusionSchedule, TimestepSampler};
use score_distill::Error;

fn point_masses(means: &[&[f64]], prompts: &[(&str, &[usize])]) -> AnalyticBackend {
    let w = 1.0 / means.len() as f64;
    let comps = means.iter().map(|m| GmmComponent { mean: m.to_vec(), weight: w }).collect();
    let table: BTreeMap<String, Vec<usize>> = prompts.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
    AnalyticBackend::from_components(comps, 0.0, &table, DiffusionSchedule::default()).unwrap()
}

fn one_d_backend() -> AnalyticBackend {
    point_masses(&[&[-1.0], &[1.0]], &[("source", &[0]), ("target", &[1]), ("all", &[0, 1])])
}

fn unit_weights() -> GuidanceWeights {
    GuidanceWeights {
        s: 1.0,
        w_p: 1.0,
        w_t: 1.0,
        w_e: 0.0,
        id_weight: IdWeight::off(),
        ..GuidanceWeights::default()
    }
}

fn state(theta: &[f64], source: &[f64], est: Estimator, weights: GuidanceWeights) -> EditState<Field> {
    EditState::new(
        vector(theta),
        vector(source),
        Condition::prompt("source"),
        Condition::prompt("target"),
        weights,
        est,
    )
}

#[test]
fn sds_leaves_the_mode_unchanged() {
    let backend = point_masses(&[&[0.4, -0.2], &[-1.0, 1.0]], &[("source", &[1]), ("target", &[0])]);
    let sched = DiffusionSchedule::default();
    let sampler = TimestepSampler::uniform(20, 980, 50, 3);
    let mut st = state(&[0.4, -0.2], &[-1.0, 1.0], Estimator::Sds, unit_weights());
    for _ in 0..50 {
        let (next, rec) = step(&st, &PixelGenerator, &backend, &sched, &sampler, StepOptions::default(), 9).unwrap();
        assert!(rec.grad_norm < 1e-10, "grad {}", rec.grad_norm);
        assert!((next.theta[[0]] - 0.4).abs() < 1e-10 && (next.theta[[1]] + 0.2).abs() < 1e-10);
        st = next;
    }
}

#[test]
fn ssd_vanishes_when_source_and_target_coincide() {
    let backend = one_d_backend();
    let sched = DiffusionSchedule::default();
    let sampler = TimestepSampler::uniform(1, 1000, 20, 4);
    for prompt in [Condition::Null, Condition::prompt("all")] {
        for s in [1.0, 7.5, -3.0] {
            let weights = GuidanceWeights { s, ..unit_weights() };
            let mut st = EditState::new(vector(&[0.3]), vector(&[0.3]), prompt.clone(), prompt.clone(), weights, Estimator::Ssd);
            for _ in 0..20 {
                let (next, rec) = step(&st, &PixelGenerator, &backend, &sched, &sampler, StepOptions::default(), 1).unwrap();
                assert_eq!(rec.grad_norm, 0.0);
                assert_eq!(next.theta, st.theta);
                st = next;
            }
        }
    }
}

#[test]
fn one_d_edit_converges_to_target_mode() {
    for seed in 0..4 {
        let run = run_edit(&common::one_d("ssd", 1.0, 300, 0.05, seed)).unwrap();
        assert!((run.final_image[[0]] - 1.0).abs() < 0.05, "seed {seed}: {}", run.final_image[[0]]);
        assert_eq!(run.log.len(), 300);
    }
}

/// Expected one-step SSD gradient (s = 1) over shared noise draws, as a
/// function of θ at fixed t. It is increasing in θ with a single zero, and
/// the zero approaches the target mode +1 as t decreases, so annealing t
/// drives θ to +1.
#[test]
fn gradient_field_sign_analysis() {
    let backend = one_d_backend();
    let sched = DiffusionSchedule::default();
    let draws = 512;
    let grid: Vec<f64> = (0..=60).map(|i| -3.0 + 0.1 * i as f64).collect();
    let mut zeros = Vec::new();
    for t in [980usize, 700, 400, 150, 50, 20] {
        let mean_grad = |theta: f64| -> f64 {
            (0..draws)
                .map(|d| {
                    let eps = standard_normal(77, d, Purpose::RenderNoise, &[1]);
                    let z = sched.add_noise(&vector(&[theta]), t, &eps).unwrap();
                    let z_src = sched.add_noise(&vector(&[-1.0]), t, &eps).unwrap();
                    let p = |l: &Field, c: &Condition| backend.predict(l, c, t).unwrap().eps_hat;
                    let inputs = EstimatorInputs::new(t)
                        .with(Term::TgtY, p(&z, &Condition::prompt("target")))
                        .with(Term::TgtSrcPrompt, p(&z, &Condition::prompt("source")))
                        .with(Term::SrcNull, p(&z_src, &Condition::Null));
                    ssd_grad(&inputs, 1.0).unwrap()[[0]]
                })
                .sum::<f64>()
                / draws as f64
        };
        let values: Vec<f64> = grid.iter().map(|&th| mean_grad(th)).collect();
        assert!(values.windows(2).all(|w| w[1] > w[0]), "t={t}: not increasing");
        let k = values.iter().position(|&v| v > 0.0).expect("sign change on the grid");
        assert!(k > 0, "t={t}: no negative region");
        // linear interpolation of the zero crossing
        let (g0, g1) = (values[k - 1], values[k]);
        zeros.push(grid[k - 1] + 0.1 * (-g0) / (g1 - g0));
    }
    assert!(zeros.windows(2).all(|w| w[1] >= w[0] - 1e-9), "zeros {zeros:?}");
    assert!((zeros.last().unwrap() - 1.0).abs() < 0.01, "zeros {zeros:?}");
}

#[test]
fn sds_descends_towards_the_conditional_mean() {
    let backend = point_masses(&[&[1.0, 0.5], &[-1.0, -1.0]], &[("target", &[0]), ("source", &[1])]);
    let sched = DiffusionSchedule::default();
    let iters = 300;
    let sampler = TimestepSampler::annealed(20, 980, iters);
    let options = StepOptions { step_size: 0.01, ..StepOptions::default() };
    let mut st = state(&[-2.0, 2.5], &[-1.0, -1.0], Estimator::Sds, unit_weights());
    let dist = |th: &Field| ((th[[0]] - 1.0).powi(2) + (th[[1]] - 0.5).powi(2)) / 2.0;
    let mut history = vec![dist(&st.theta)];
    for _ in 0..iters {
        st = step(&st, &PixelGenerator, &backend, &sched, &sampler, options, 5).unwrap().0;
        history.push(dist(&st.theta));
    }
    for (i, w) in history.windows(2).enumerate().skip(10) {
        assert!(w[1] <= w[0], "step {i}: {} -> {}", w[0], w[1]);
    }
    assert!(history[iters] < 0.01 * history[0], "final {}", history[iters]);
}

fn first_step_queries(est: Estimator, weights: GuidanceWeights) -> (usize, usize, usize) {
    // a wide image radius keeps every component for instruction guidance
    let backend = CountingBackend::new(one_d_backend().with_image_radius(3.0));
    let sched = DiffusionSchedule::default();
    let sampler = TimestepSampler::annealed(20, 980, 10);
    let st = state(&[0.3], &[-1.0], est, weights);
    step(&st, &PixelGenerator, &backend, &sched, &sampler, StepOptions::default(), 2).unwrap();
    let t = sampler.sample(0).unwrap();
    let eps = standard_normal(2, 0, Purpose::RenderNoise, &[1]);
    let z_t = sched.add_noise(&vector(&[0.3]), t, &eps).unwrap();
    let z_src = sched.add_noise(&vector(&[-1.0]), t, &eps).unwrap();
    let q = backend.queries();
    let on_render = q.iter().filter(|q| q.latent == z_t).count();
    let on_source = q.iter().filter(|q| q.latent == z_src).count();
    assert_eq!(on_render + on_source, q.len());
    (q.len(), on_render, on_source)
}

#[test]
fn estimators_query_only_what_they_use() {
    let w = unit_weights();
    assert_eq!(first_step_queries(Estimator::Sds, w.clone()), (2, 2, 0));
    assert_eq!(first_step_queries(Estimator::Csd, w.clone()), (3, 3, 0));
    assert_eq!(first_step_queries(Estimator::Dds, w.clone()), (4, 2, 2));
    assert_eq!(first_step_queries(Estimator::Ssd, w.clone()), (3, 2, 1));
    assert_eq!(first_step_queries(Estimator::SsdFull, w.clone()), (3, 2, 1));
    let with_align = GuidanceWeights { w_e: 1.5, ..w.clone() };
    assert_eq!(first_step_queries(Estimator::SsdFull, with_align), (4, 3, 1));
    // the anchor term reuses the latents and needs no prediction
    let with_id = GuidanceWeights { id_weight: IdWeight::Constant { value: 0.5 }, ..w.clone() };
    assert_eq!(first_step_queries(Estimator::SsdFull, with_id), (3, 2, 1));
    assert_eq!(first_step_queries(Estimator::Ip2pEdit, w), (3, 3, 0));
}

#[test]
fn ssd_predictions_use_the_right_conditions() {
    let backend = CountingBackend::new(one_d_backend());
    let sched = DiffusionSchedule::default();
    let sampler = TimestepSampler::annealed(20, 980, 10);
    let st = state(&[0.3], &[-1.0], Estimator::Ssd, unit_weights());
    step(&st, &PixelGenerator, &backend, &sched, &sampler, StepOptions::default(), 2).unwrap();
    let mut conds: Vec<String> = backend.queries().iter().map(|q| q.text.to_string()).collect();
    conds.sort();
    let mut expect = vec![Condition::Null.to_string(), "source".to_string(), "target".to_string()];
    expect.sort();
    assert_eq!(conds, expect);
}

/// Records every draw and hands out distinct deterministic fields.
#[derive(Default)]
struct NoiseSpy {
    draws: Vec<(usize, Purpose, Field)>,
}

impl NoiseSource for NoiseSpy {
    fn draw(&mut self, iter: usize, purpose: Purpose, shape: &[usize]) -> Field {
        let f = standard_normal(31, iter as u64, purpose, shape);
        self.draws.push((iter, purpose, f.clone()));
        f
    }
}

fn spy_run(est: Estimator, policy: NoisePolicy) -> (NoiseSpy, Vec<score_distill::denoiser::Query>, TimestepSampler) {
    let backend = CountingBackend::new(one_d_backend());
    let sched = DiffusionSchedule::default();
    let sampler = TimestepSampler::annealed(20, 980, 5);
    let mut spy = NoiseSpy::default();
    let mut st = state(&[0.3], &[-1.0], est, unit_weights());
    {
        let mut session = EditLoop {
            generator: &PixelGenerator,
            backend: &backend,
            sched: &sched,
            sampler: &sampler,
            options: StepOptions { noise_policy: policy, ..StepOptions::default() },
            noise: &mut spy,
        };
        session.run(&mut st, 5).unwrap();
    }
    (spy, backend.queries(), sampler)
}

#[test]
fn shared_policy_noises_both_latents_with_one_draw() {
    let (spy, queries, sampler) = spy_run(Estimator::Ssd, NoisePolicy::Shared);
    assert_eq!(spy.draws.len(), 5);
    assert!(spy.draws.iter().all(|(_, p, _)| *p == Purpose::RenderNoise));
    let sched = DiffusionSchedule::default();
    for (iter, _, eps) in &spy.draws {
        let t = sampler.sample(*iter).unwrap();
        let z_src = sched.add_noise(&vector(&[-1.0]), t, eps).unwrap();
        let src_q: Vec<_> = queries.iter().filter(|q| q.t == t && q.text == Condition::Null).collect();
        assert_eq!(src_q.len(), 1);
        assert_eq!(src_q[0].latent, z_src);
    }
}

#[test]
fn independent_policy_draws_separate_source_noise() {
    let (spy, queries, sampler) = spy_run(Estimator::Ssd, NoisePolicy::Independent);
    assert_eq!(spy.draws.len(), 10);
    let sched = DiffusionSchedule::default();
    for iter in 0..5 {
        let pick = |p: Purpose| spy.draws.iter().find(|d| d.0 == iter && d.1 == p).unwrap().2.clone();
        let (render, source) = (pick(Purpose::RenderNoise), pick(Purpose::SourceNoise));
        assert_ne!(render, source);
        let t = sampler.sample(iter).unwrap();
        let z_src = sched.add_noise(&vector(&[-1.0]), t, &source).unwrap();
        assert!(queries.iter().any(|q| q.t == t && q.text == Condition::Null && q.latent == z_src));
    }
}

#[test]
fn sds_never_draws_source_noise() {
    for policy in [NoisePolicy::Shared, NoisePolicy::Independent] {
        let (spy, _, _) = spy_run(Estimator::Sds, policy);
        assert!(spy.draws.iter().all(|(_, p, _)| *p == Purpose::RenderNoise));
    }
}

#[test]
fn runs_are_deterministic() {
    for est in ["sds", "dds", "csd", "ssd", "ssd_full", "ip2p_edit"] {
        let text = common::toy_2d_json("d", est, r#", "w_e": 0.5"#, 17)
            .replace(r#""total_iters": 300"#, r#""total_iters": 60, "noise_policy": "independent""#)
            .replace(r#""kind": "analytic","#, r#""kind": "analytic", "image_radius": 3.0,"#);
        let cfg = EditConfig::from_json(&text).unwrap();
        let (a, b) = (run_edit(&cfg).unwrap(), run_edit(&cfg).unwrap());
        assert_eq!(a.final_image, b.final_image, "{est}");
        assert_eq!(a.log, b.log, "{est}");
        assert_eq!(a.log.to_csv_string().unwrap(), b.log.to_csv_string().unwrap());
    }
}

#[test]
fn zero_iterations_return_the_initial_render() {
    let mut cfg = common::one_d("ssd", 1.0, 0, 0.05, 1);
    cfg.init = Some(score_distill::edit::ImageSpec::Inline { shape: vec![1], data: vec![0.25] });
    let run = run_edit(&cfg).unwrap();
    assert_eq!(run.final_image, vector(&[0.25]));
    assert!(run.log.is_empty());
}

#[test]
fn divergence_aborts_with_partial_log() {
    let failure = run_edit(&common::one_d("ssd", 1.0, 300, 1e6, 1)).unwrap_err();
    assert!(matches!(failure.error, Error::NonFinite { .. }), "{}", failure.error);
    assert!(!failure.log.is_empty() && failure.log.len() < 300);
    assert!(failure.log.records.windows(2).all(|w| w[1].iter == w[0].iter + 1));
}

#[test]
fn log_splits_gradient_by_term() {
    let run = run_edit(&common::toy_2d("ssd", 1)).unwrap();
    assert!(run.log.records.iter().all(|r| r.cross_prompt_norm.is_some() && r.cross_trajectory_norm.is_some()));
    assert!(run.log.records.iter().all(|r| r.align_norm.is_none() && r.id_norm.is_none()));

    let text = common::toy_2d_json("f", "ssd_full", r#", "w_e": 1.5, "id_weight": {"kind": "constant", "value": 0.2}"#, 1);
    let run = run_edit(&EditConfig::from_json(&text).unwrap()).unwrap();
    assert!(run.log.records.iter().all(|r| r.align_norm.is_some() && r.id_norm.is_some()));

    let run = run_edit(&common::toy_2d("sds", 1)).unwrap();
    assert!(run.log.records.iter().all(|r| r.cross_prompt_norm.is_none()));
}

#[test]
fn zero_momentum_matches_plain_descent() {
    let mut cfg = common::one_d("ssd", 1.0, 100, 0.05, 4);
    let plain = run_edit(&cfg).unwrap();
    cfg.optimizer = Optimizer::Momentum { beta: 0.0 };
    let heavy = run_edit(&cfg).unwrap();
    assert_eq!(plain.final_image, heavy.final_image);
}

#[test]
fn seeded_noise_is_counter_based() {
    let mut a = SeededNoise { seed: 3 };
    let mut b = SeededNoise { seed: 3 };
    let later = a.draw(7, Purpose::RenderNoise, &[4]);
    b.draw(0, Purpose::RenderNoise, &[4]);
    assert_eq!(later, b.draw(7, Purpose::RenderNoise, &[4]));
}
