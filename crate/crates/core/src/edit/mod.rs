//! The editing loop: render, noise, query the denoiser, assemble the chosen
//! estimator's gradient and step the generator parameters.

mod config;
mod generator;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use config::{BackendSpec, EditConfig, ImageSpec, Manifest, Prepared, SamplerSpec, ScheduleSpec, Seeds};
pub use generator::{Generator, PixelGenerator};

use crate::denoiser::{Condition, DenoiserBackend};
use crate::distill::{self, EstimatorInputs, GradTerms, GuidanceWeights, Term};
use crate::error::{Error, Result};
use crate::field::{all_finite, l2_norm, Field};
use crate::metrics::mse;
use crate::rng::{self, Purpose};
use crate::schedule::{DiffusionSchedule, TimestepSampler};

/// Version tag of the [`LogRecord`] CSV columns.
pub const LOG_COLUMNS_VERSION: &str = "editlog-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Sds,
    Dds,
    Csd,
    /// Stable score distillation with the single scale `s`.
    Ssd,
    /// Cross-prompt + cross-trajectory + prompt enhancement + source anchor.
    SsdFull,
    Ip2pEdit,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Sds => "sds",
            Estimator::Dds => "dds",
            Estimator::Csd => "csd",
            Estimator::Ssd => "ssd",
            Estimator::SsdFull => "ssd_full",
            Estimator::Ip2pEdit => "ip2p_edit",
        }
    }

    /// Single-condition predictions (and the injected noise) this estimator
    /// reads. Dual-condition estimators return an empty list.
    pub fn required_terms(self, weights: &GuidanceWeights) -> Vec<Term> {
        match self {
            Estimator::Sds => vec![Term::TgtY, Term::TgtNull, Term::TrueNoise],
            Estimator::Dds => vec![Term::TgtY, Term::TgtNull, Term::SrcPrompt, Term::SrcNull],
            Estimator::Csd => vec![Term::TgtY, Term::TgtSrcPrompt, Term::TgtNull],
            Estimator::Ssd => vec![Term::TgtY, Term::TgtSrcPrompt, Term::SrcNull],
            Estimator::SsdFull => {
                let mut terms = vec![Term::TgtY, Term::TgtSrcPrompt, Term::SrcNull];
                if weights.w_e != 0.0 {
                    terms.push(Term::TgtNull);
                }
                terms
            }
            Estimator::Ip2pEdit => vec![],
        }
    }

    /// Whether the noised source latent `ẑ_t` has to be formed.
    pub fn uses_source_latent(self, weights: &GuidanceWeights) -> bool {
        match self {
            Estimator::SsdFull => true,
            other => other
                .required_terms(weights)
                .iter()
                .any(|t| t.on_source_latent()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// One draw of `eps` noises both the render and the source.
    #[default]
    Shared,
    Independent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent with a constant step.
    #[default]
    Sgd,
    /// Heavy-ball momentum on the pixel gradient.
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub step_size: f64,
    pub noise_policy: NoisePolicy,
    pub optimizer: Optimizer,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            noise_policy: NoisePolicy::Shared,
            optimizer: Optimizer::Sgd,
        }
    }
}

/// Source of the Gaussian noise injected into latents.
pub trait NoiseSource {
    fn draw(&mut self, iter: usize, purpose: Purpose, shape: &[usize]) -> Field;
}

/// Counter-based noise: each draw depends only on `(seed, iter, purpose)`.
#[derive(Debug, Clone, Copy)]
pub struct SeededNoise {
    pub seed: u64,
}

impl NoiseSource for SeededNoise {
    fn draw(&mut self, iter: usize, purpose: Purpose, shape: &[usize]) -> Field {
        rng::standard_normal(self.seed, iter as u64, purpose, shape)
    }
}

impl<N: NoiseSource + ?Sized> NoiseSource for &mut N {
    fn draw(&mut self, iter: usize, purpose: Purpose, shape: &[usize]) -> Field {
        (**self).draw(iter, purpose, shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditState<P> {
    pub theta: P,
    /// `x̂`, never modified.
    pub source_image: Field,
    /// `ŷ`
    pub source_prompt: Condition,
    /// `y`
    pub target_prompt: Condition,
    pub iter: usize,
    pub weights: GuidanceWeights,
    pub estimator: Estimator,
    /// Momentum buffer, if the optimizer keeps one.
    pub velocity: Option<Field>,
}

impl<P> EditState<P> {
    pub fn new(
        theta: P,
        source_image: Field,
        source_prompt: Condition,
        target_prompt: Condition,
        weights: GuidanceWeights,
        estimator: Estimator,
    ) -> Self {
        Self {
            theta,
            source_image,
            source_prompt,
            target_prompt,
            iter: 0,
            weights,
            estimator,
            velocity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub t: usize,
    pub estimator: Estimator,
    pub grad_norm: f64,
    /// MSE between the updated render and the source image.
    pub mse_to_source: f64,
    pub cross_prompt_norm: Option<f64>,
    pub cross_trajectory_norm: Option<f64>,
    pub align_norm: Option<f64>,
    pub id_norm: Option<f64>,
}

impl LogRecord {
    pub const COLUMNS: [&'static str; 9] = [
        "iter",
        "t",
        "estimator",
        "grad_norm",
        "mse_to_source",
        "cross_prompt_norm",
        "cross_trajectory_norm",
        "align_norm",
        "id_norm",
    ];
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditLog {
    pub records: Vec<LogRecord>,
}

impl EditLog {
    pub fn push(&mut self, record: LogRecord) {
        debug_assert!(self
            .records
            .last()
            .is_none_or(|last| last.iter < record.iter));
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(LogRecord::COLUMNS)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Borrowed pieces of one editing session.
pub struct EditLoop<'a, G, B: ?Sized, N> {
    pub generator: &'a G,
    pub backend: &'a B,
    pub sched: &'a DiffusionSchedule,
    pub sampler: &'a TimestepSampler,
    pub options: StepOptions,
    pub noise: N,
}

impl<G, B, N> EditLoop<'_, G, B, N>
where
    G: Generator,
    B: DenoiserBackend + ?Sized,
    N: NoiseSource,
{
    /// Runs one iteration, updating `state` in place.
    pub fn step(&mut self, state: &mut EditState<G::Params>) -> Result<LogRecord> {
        let iter = state.iter;
        let t = self.sampler.sample(iter)?;
        let x = self.generator.render(&state.theta);
        crate::field::ensure_same_shape(&state.source_image, &x)?;
        if !all_finite(&x) {
            return Err(Error::NonFinite { what: "render", iter, t });
        }

        let eps = self.noise.draw(iter, Purpose::RenderNoise, x.shape());
        let z_t = self.sched.add_noise(&x, t, &eps)?;
        let weights = &state.weights;
        let z_src = if state.estimator.uses_source_latent(weights) {
            let eps_src = match self.options.noise_policy {
                NoisePolicy::Shared => eps.clone(),
                NoisePolicy::Independent => {
                    self.noise.draw(iter, Purpose::SourceNoise, x.shape())
                }
            };
            Some(self.sched.add_noise(&state.source_image, t, &eps_src)?)
        } else {
            None
        };

        let terms = match state.estimator {
            Estimator::Ip2pEdit => {
                let b = self.backend;
                let nn = b.predict2(&z_t, None, &Condition::Null, t)?.eps_hat;
                let img = Some(&state.source_image);
                let i_n = b.predict2(&z_t, img, &Condition::Null, t)?.eps_hat;
                let it = b.predict2(&z_t, img, &state.target_prompt, t)?.eps_hat;
                let (image_term, text_term) =
                    distill::ip2p_edit_terms(&nn, &i_n, &it, weights.s_image, weights.s_text)?;
                GradTerms {
                    total: &image_term + &text_term,
                    cross_prompt: Some(text_term),
                    cross_trajectory: Some(image_term),
                    align: None,
                    id: None,
                }
            }
            est => {
                let mut inputs = EstimatorInputs::new(t);
                for term in est.required_terms(weights) {
                    let value = match term {
                        Term::TrueNoise => eps.clone(),
                        _ => {
                            let (latent, cond) = match term {
                                Term::TgtY => (&z_t, &state.target_prompt),
                                Term::TgtSrcPrompt => (&z_t, &state.source_prompt),
                                Term::TgtNull => (&z_t, &Condition::Null),
                                Term::SrcPrompt => (z_src.as_ref().unwrap(), &state.source_prompt),
                                Term::SrcNull => (z_src.as_ref().unwrap(), &Condition::Null),
                                Term::TrueNoise => unreachable!(),
                            };
                            self.backend.predict(latent, cond, t)?.eps_hat
                        }
                    };
                    inputs.set(term, value);
                }
                estimate(est, &inputs, &z_t, z_src.as_ref(), weights, iter)?
            }
        };

        if !all_finite(&terms.total) {
            return Err(Error::NonFinite { what: "gradient", iter, t });
        }
        let update = match self.options.optimizer {
            Optimizer::Sgd => terms.total.clone(),
            Optimizer::Momentum { beta } => {
                let v = match state.velocity.take() {
                    Some(v) => v * beta + &terms.total,
                    None => terms.total.clone(),
                };
                state.velocity = Some(v.clone());
                v
            }
        };
        let theta = self
            .generator
            .apply_grad(&state.theta, &update, self.options.step_size)?;
        let rendered = self.generator.render(&theta);
        if !all_finite(&rendered) {
            return Err(Error::NonFinite { what: "parameters", iter, t });
        }
        state.theta = theta;
        state.iter += 1;

        let norm = |f: &Option<Field>| f.as_ref().map(l2_norm);
        Ok(LogRecord {
            iter,
            t,
            estimator: state.estimator,
            grad_norm: l2_norm(&terms.total),
            mse_to_source: mse(&rendered, &state.source_image)?,
            cross_prompt_norm: norm(&terms.cross_prompt),
            cross_trajectory_norm: norm(&terms.cross_trajectory),
            align_norm: norm(&terms.align),
            id_norm: norm(&terms.id),
        })
    }

    /// Runs `total_iters - state.iter` iterations. On failure the records of
    /// the completed iterations are returned alongside the error.
    pub fn run(
        &mut self,
        state: &mut EditState<G::Params>,
        total_iters: usize,
    ) -> std::result::Result<EditLog, RunFailure> {
        let mut log = EditLog::default();
        while state.iter < total_iters {
            match self.step(state) {
                Ok(rec) => log.push(rec),
                Err(error) => return Err(RunFailure { error, log }),
            }
        }
        Ok(log)
    }
}

fn estimate(
    est: Estimator,
    inputs: &EstimatorInputs,
    z_t: &Field,
    z_src: Option<&Field>,
    weights: &GuidanceWeights,
    iter: usize,
) -> Result<GradTerms> {
    Ok(match est {
        Estimator::Sds => GradTerms::plain(distill::sds_grad(inputs, weights.s, weights.sds_weight)?),
        Estimator::Dds => GradTerms::plain(distill::dds_grad(inputs, weights.s)?),
        Estimator::Csd => GradTerms::plain(distill::csd_grad(inputs, weights.w_a, weights.w_b)?),
        Estimator::Ssd => {
            let (cross_prompt, cross_trajectory) = distill::ssd_terms(inputs, weights.s, 1.0)?;
            GradTerms {
                total: distill::ssd_grad(inputs, weights.s)?,
                cross_prompt: Some(cross_prompt),
                cross_trajectory: Some(cross_trajectory),
                align: None,
                id: None,
            }
        }
        Estimator::SsdFull => {
            let z_src = z_src.expect("source latent formed for ssd_full");
            distill::final_grad_terms(inputs, z_t, z_src, weights, iter)?
        }
        Estimator::Ip2pEdit => unreachable!("dual-condition estimator handled by caller"),
    })
}

/// One iteration with counter-based noise seeded by `rng_seed`.
#[allow(clippy::too_many_arguments)]
pub fn step<G, B>(
    state: &EditState<G::Params>,
    generator: &G,
    backend: &B,
    sched: &DiffusionSchedule,
    sampler: &TimestepSampler,
    options: StepOptions,
    rng_seed: u64,
) -> Result<(EditState<G::Params>, LogRecord)>
where
    G: Generator,
    B: DenoiserBackend + ?Sized,
{
    let mut next = state.clone();
    let mut session = EditLoop {
        generator,
        backend,
        sched,
        sampler,
        options,
        noise: SeededNoise { seed: rng_seed },
    };
    let rec = session.step(&mut next)?;
    Ok((next, rec))
}


#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    /// Records of the iterations completed before the failure.
    pub log: EditLog,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed iterations)", self.error, self.log.len())
    }
}

impl std::error::Error for RunFailure {}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            log: EditLog::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditRun {
    pub final_image: Field,
    pub log: EditLog,
    pub source_image: Field,
}

impl EditRun {
    pub fn region_mse(&self, indices: &[usize]) -> Result<f64> {
        crate::metrics::mse_on(&self.final_image, &self.source_image, indices)
    }
}

/// Runs a whole edit from a config with the pixel generator and the
/// analytic backend it describes.
pub fn run_edit(config: &EditConfig) -> std::result::Result<EditRun, RunFailure> {
    let p = config.prepare()?;
    let mut state = EditState::new(
        p.init.clone(),
        p.source.clone(),
        config.source_prompt.clone(),
        config.target_prompt.clone(),
        p.weights.clone(),
        config.estimator,
    );
    let mut session = EditLoop {
        generator: &PixelGenerator,
        backend: &p.backend,
        sched: &p.sched,
        sampler: &p.sampler,
        options: StepOptions {
            step_size: config.step_size,
            noise_policy: config.noise_policy,
            optimizer: config.optimizer,
        },
        noise: SeededNoise {
            seed: config.seeds.noise,
        },
    };
    let log = session.run(&mut state, config.total_iters)?;
    Ok(EditRun {
        final_image: state.theta,
        log,
        source_image: p.source,
    })
}
