//! The JSON edit configuration document.
//!
//! ```json
//! {
//!   "run_id": "ssd-1d",
//!   "estimator": "ssd",
//!   "weights": { "s": 1.0, "w_p": 7.5, "w_t": 1.0, "w_e": 0.0, "w_a": 7.5, "w_b": 7.5,
//!                "s_i": 1.5, "s_t": 7.5, "sds_weight": 1.0,
//!                "id_weight": { "kind": "linear_decay", "from": 1.0, "to": 0.0 } },
//!   "schedule": { "num_steps": 1000, "beta_min": 0.0001, "beta_max": 0.02 },
//!   "sampler": { "kind": "non_increasing_linear", "t_min": 20, "t_max": 980 },
//!   "total_iters": 300,
//!   "step_size": 0.05,
//!   "optimizer": { "kind": "sgd" },
//!   "noise_policy": "shared",
//!   "seeds": { "noise": 0, "sampler": 0 },
//!   "backend": { "kind": "analytic", "data_sigma": 0.0, "image_radius": 0.0,
//!                "components": [ { "mean": [-1.0], "weight": 0.5 }, { "mean": [1.0], "weight": 0.5 } ],
//!                "prompts": { "source": [0], "target": [1] } },
//!   "source": { "shape": [1], "data": [-1.0] },
//!   "source_prompt": "source",
//!   "target_prompt": "target",
//!   "regions": { "all": [0] }
//! }
//! ```
//!
//! `source` and the optional `init` accept `{"shape", "data"}`, `{"png": path}`
//! or `{"npy": path}`; relative paths resolve against the config's directory.
//! A prompt of `null` is the empty prompt.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{AnalyticBackend, Condition, GmmComponent};
use crate::distill::GuidanceWeights;
use crate::error::{Error, Result};
use crate::field::{from_vec, Field};
use crate::io;
use crate::schedule::{self, DiffusionSchedule, SamplerKind, TimestepSampler};

use super::{Estimator, NoisePolicy, Optimizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub estimator: Estimator,
    #[serde(default)]
    pub weights: GuidanceWeights,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default = "default_iters")]
    pub total_iters: usize,
    pub step_size: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub noise_policy: NoisePolicy,
    #[serde(default)]
    pub seeds: Seeds,
    pub backend: BackendSpec,
    pub source: ImageSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<ImageSpec>,
    pub source_prompt: Condition,
    pub target_prompt: Condition,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub regions: BTreeMap<String, Vec<usize>>,
}

fn default_run_id() -> String {
    "run".into()
}

fn default_iters() -> usize {
    schedule::DEFAULT_ITERS_FAST
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            num_steps: schedule::DEFAULT_NUM_STEPS,
            beta_min: schedule::DEFAULT_BETA_MIN,
            beta_max: schedule::DEFAULT_BETA_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub t_min: usize,
    pub t_max: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::NonIncreasingLinear,
            t_min: schedule::DEFAULT_T_MIN,
            t_max: schedule::DEFAULT_T_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub noise: u64,
    #[serde(default)]
    pub sampler: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Exact Gaussian-mixture denoiser. `prompts` maps each prompt id to
    /// the component indices it selects; the null prompt is the full mixture.
    Analytic {
        components: Vec<GmmComponent>,
        #[serde(default)]
        data_sigma: f64,
        prompts: BTreeMap<String, Vec<usize>>,
        #[serde(default)]
        image_radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSpec {
    Inline { shape: Vec<usize>, data: Vec<f64> },
    Png { png: PathBuf },
    Npy { npy: PathBuf },
}

impl ImageSpec {
    pub fn load(&self) -> Result<Field> {
        match self {
            ImageSpec::Inline { shape, data } => from_vec(shape, data.clone()),
            ImageSpec::Png { png } => io::load_png(png),
            ImageSpec::Npy { npy } => io::load_npy(npy),
        }
    }

    pub fn is_png(&self) -> bool {
        matches!(self, ImageSpec::Png { .. })
    }

    fn absolutize(&mut self, base: &Path) {
        let p = match self {
            ImageSpec::Inline { .. } => return,
            ImageSpec::Png { png } => png,
            ImageSpec::Npy { npy } => npy,
        };
        if p.is_relative() {
            *p = base.join(&*p);
        }
        if let Ok(abs) = std::fs::canonicalize(&*p) {
            *p = abs;
        }
    }
}

/// A manifest written next to run outputs; it can be fed back to `edit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub log_columns_version: String,
    pub log_columns: Vec<String>,
    pub seeds: Seeds,
    pub config: EditConfig,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigDocument {
    Manifest(Box<Manifest>),
    Config(Box<EditConfig>),
}

impl EditConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        match serde_json::from_str::<ConfigDocument>(text) {
            Ok(ConfigDocument::Manifest(m)) => Ok(m.config),
            Ok(ConfigDocument::Config(c)) => Ok(*c),
            // re-parse as a plain config for a useful error message
            Err(_) => Ok(serde_json::from_str::<EditConfig>(text)?),
        }
    }

    /// Reads a config (or a run manifest) and resolves image paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.source.absolutize(base);
        if let Some(init) = &mut cfg.init {
            init.absolutize(base);
        }
        Ok(cfg)
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(
            self.schedule.num_steps,
            self.schedule.beta_min,
            self.schedule.beta_max,
        )
    }

    pub fn build_sampler(&self) -> TimestepSampler {
        TimestepSampler {
            kind: self.sampler.kind,
            t_min: self.sampler.t_min,
            t_max: self.sampler.t_max,
            total_iters: self.total_iters,
            rng_seed: self.seeds.sampler,
        }
    }

    pub fn build_backend(&self, sched: &DiffusionSchedule) -> Result<AnalyticBackend> {
        match &self.backend {
            BackendSpec::Analytic {
                components,
                data_sigma,
                prompts,
                image_radius,
            } => Ok(AnalyticBackend::from_components(
                components.clone(),
                *data_sigma,
                prompts,
                sched.clone(),
            )?
            .with_image_radius(*image_radius)),
        }
    }

    pub fn resolved_weights(&self) -> GuidanceWeights {
        let mut w = self.weights.clone();
        w.resolve_budget(self.total_iters);
        w
    }

    /// Everything needed to start a run, checked for consistency.
    pub fn prepare(&self) -> Result<Prepared> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) | Error::Io(_) | Error::Image(_) | Error::Npy(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.weights.validate().map_err(cfg_err)?;
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("momentum beta must be in [0, 1), got {beta}")));
            }
        }
        let sched = self.build_schedule().map_err(cfg_err)?;
        let sampler = self.build_sampler();
        sampler.validate(&sched).map_err(cfg_err)?;
        let backend = self.build_backend(&sched).map_err(cfg_err)?;
        for prompt in [&self.source_prompt, &self.target_prompt] {
            if let Some(id) = prompt.prompt_id() {
                if !backend.has_prompt(id) {
                    return Err(Error::Config(format!("prompt `{id}` is not in the backend table")));
                }
            }
        }
        let source = self.source.load().map_err(cfg_err)?;
        let init = match &self.init {
            Some(spec) => spec.load().map_err(cfg_err)?,
            None => source.clone(),
        };
        if init.shape() != source.shape() {
            return Err(Error::Config(format!(
                "init shape {:?} differs from source shape {:?}",
                init.shape(),
                source.shape()
            )));
        }
        let dim = backend.null_condition().dim();
        if source.len() != dim {
            return Err(Error::Config(format!(
                "image has {} elements but the backend mixture has dimension {dim}",
                source.len()
            )));
        }
        for (name, idx) in &self.regions {
            if idx.is_empty() || idx.iter().any(|&i| i >= dim) {
                return Err(Error::Config(format!("region `{name}` has empty or out-of-range indices")));
            }
        }
        Ok(Prepared {
            sched,
            sampler,
            backend,
            source,
            init,
            weights: self.resolved_weights(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub sched: DiffusionSchedule,
    pub sampler: TimestepSampler,
    pub backend: AnalyticBackend,
    pub source: Field,
    pub init: Field,
    pub weights: GuidanceWeights,
}
