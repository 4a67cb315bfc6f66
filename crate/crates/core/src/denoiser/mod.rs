//! Conditional noise-prediction interface and classifier-free guidance.
//!
//! A backend answers `eps(z_t, condition, t)` queries. Backends must return
//! raw conditional and unconditional predictions; guidance is composed by
//! this crate (see [`cfg_compose`]), never inside an adapter.
//!
//! # Adapter protocol
//!
//! An adapter for a latent text-to-image model implements
//! [`DenoiserBackend::predict`] by encoding the prompt for
//! `Condition::Prompt` (or the empty prompt for `Condition::Null`) and running
//! one epsilon-prediction forward pass at the given timestep. Instruction-
//! editing models additionally implement [`DenoiserBackend::predict2`], where
//! `image_cond` is the clean conditioning image (or `None` for the dropped
//! image condition). Predictions must be deterministic for fixed inputs; any
//! internal randomness has to be seeded from the inputs. Batching forward
//! passes is left to the adapter.

mod analytic;
mod gmm;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use analytic::AnalyticBackend;
pub use gmm::{gmm_marginal_params, gmm_predict, GmmComponent, GmmCondition, MarginalComponent};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::field::{all_finite, ensure_same_shape, Field};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Condition {
    /// The empty prompt.
    Null,
    Prompt(String),
}

impl Condition {
    pub fn prompt(id: impl Into<String>) -> Self {
        Condition::Prompt(id.into())
    }

    pub fn prompt_id(&self) -> Option<&str> {
        match self {
            Condition::Null => None,
            Condition::Prompt(id) => Some(id),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Null => f.write_str("∅"),
            Condition::Prompt(id) => f.write_str(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub eps_hat: Field,
    pub t: usize,
    pub condition: Condition,
}

impl NoisePrediction {
    /// Rejects predictions containing NaN or infinity.
    pub fn new(eps_hat: Field, t: usize, condition: Condition) -> Result<Self> {
        if !all_finite(&eps_hat) {
            return Err(Error::NonFinite {
                what: "noise prediction",
                iter: 0,
                t,
            });
        }
        Ok(Self {
            eps_hat,
            t,
            condition,
        })
    }
}

/// One prediction request, used for batched evaluation and query audits.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub latent: Field,
    pub t: usize,
    pub text: Condition,
    /// `Some` for dual-condition queries; the inner option is the image condition.
    pub image: Option<Option<Field>>,
}

pub trait DenoiserBackend: Send + Sync {
    fn predict(&self, latent: &Field, condition: &Condition, t: usize) -> Result<NoisePrediction>;

    /// `eps(z_t, c_I, c_T)` for image-and-instruction conditioned models.
    fn predict2(
        &self,
        _latent: &Field,
        _image_cond: Option<&Field>,
        _text_cond: &Condition,
        _t: usize,
    ) -> Result<NoisePrediction> {
        Err(Error::Unsupported("dual-condition prediction"))
    }

    fn run_query(&self, q: &Query) -> Result<NoisePrediction> {
        match &q.image {
            None => self.predict(&q.latent, &q.text, q.t),
            Some(img) => self.predict2(&q.latent, img.as_ref(), &q.text, q.t),
        }
    }

    /// Evaluates independent queries, in parallel when `exec` allows it.
    fn predict_batch(&self, queries: &[Query], exec: Exec) -> Vec<Result<NoisePrediction>>
    where
        Self: Sized,
    {
        exec.map_items(queries, |q| self.run_query(q))
    }
}

impl<B: DenoiserBackend + ?Sized> DenoiserBackend for &B {
    fn predict(&self, latent: &Field, condition: &Condition, t: usize) -> Result<NoisePrediction> {
        (**self).predict(latent, condition, t)
    }
    fn predict2(
        &self,
        latent: &Field,
        image_cond: Option<&Field>,
        text_cond: &Condition,
        t: usize,
    ) -> Result<NoisePrediction> {
        (**self).predict2(latent, image_cond, text_cond, t)
    }
}

impl<B: DenoiserBackend + ?Sized> DenoiserBackend for Box<B> {
    fn predict(&self, latent: &Field, condition: &Condition, t: usize) -> Result<NoisePrediction> {
        (**self).predict(latent, condition, t)
    }
    fn predict2(
        &self,
        latent: &Field,
        image_cond: Option<&Field>,
        text_cond: &Condition,
        t: usize,
    ) -> Result<NoisePrediction> {
        (**self).predict2(latent, image_cond, text_cond, t)
    }
}

/// `uncond + scale * (cond - uncond)` on raw arrays.
pub fn cfg_combine(cond: &Field, uncond: &Field, scale: f64) -> Result<Field> {
    ensure_same_shape(cond, uncond)?;
    Ok(uncond + &((cond - uncond) * scale))
}

pub fn cfg_compose(
    eps_cond: &NoisePrediction,
    eps_uncond: &NoisePrediction,
    scale: f64,
) -> Result<Field> {
    if eps_cond.t != eps_uncond.t {
        return Err(Error::TimestepMismatch(eps_cond.t, eps_uncond.t));
    }
    cfg_combine(&eps_cond.eps_hat, &eps_uncond.eps_hat, scale)
}

/// Wraps a backend and records every query it forwards.
pub struct CountingBackend<B> {
    inner: B,
    log: Mutex<Vec<Query>>,
}

impl<B: DenoiserBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn queries(&self) -> Vec<Query> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap().clear();
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: DenoiserBackend> DenoiserBackend for CountingBackend<B> {
    fn predict(&self, latent: &Field, condition: &Condition, t: usize) -> Result<NoisePrediction> {
        self.log.lock().unwrap().push(Query {
            latent: latent.clone(),
            t,
            text: condition.clone(),
            image: None,
        });
        self.inner.predict(latent, condition, t)
    }

    fn predict2(
        &self,
        latent: &Field,
        image_cond: Option<&Field>,
        text_cond: &Condition,
        t: usize,
    ) -> Result<NoisePrediction> {
        self.log.lock().unwrap().push(Query {
            latent: latent.clone(),
            t,
            text: text_cond.clone(),
            image: Some(image_cond.cloned()),
        });
        self.inner.predict2(latent, image_cond, text_cond, t)
    }
}
