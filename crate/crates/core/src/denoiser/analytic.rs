use std::collections::BTreeMap;

use super::gmm::{gmm_predict, GmmComponent, GmmCondition};
use super::{Condition, DenoiserBackend, NoisePrediction};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::schedule::DiffusionSchedule;

/// Distance slack when matching component means.
const MATCH_TOL: f64 = 1e-12;

/// Exact denoiser for Gaussian-mixture data.
///
/// Each prompt selects a sub-mixture of the data components; the null
/// condition is the full data mixture. Dual-condition queries model the
/// image condition as a restriction to the components lying within
/// `image_radius` of the component nearest to the conditioning image,
/// followed by the prompt's own restriction.
#[derive(Debug, Clone)]
pub struct AnalyticBackend {
    prompts: BTreeMap<String, GmmCondition>,
    null: GmmCondition,
    sched: DiffusionSchedule,
    image_radius: f64,
}

impl AnalyticBackend {
    pub fn new(
        prompts: BTreeMap<String, GmmCondition>,
        null: GmmCondition,
        sched: DiffusionSchedule,
    ) -> Result<Self> {
        for (id, g) in &prompts {
            if g.dim() != null.dim() {
                return Err(Error::InvalidMixture(format!(
                    "prompt `{id}` has dimension {}, null mixture has {}",
                    g.dim(),
                    null.dim()
                )));
            }
        }
        Ok(Self {
            prompts,
            null,
            sched,
            image_radius: 0.0,
        })
    }

    /// Builds the backend from a list of data components: the null
    /// condition is the whole mixture and each prompt names the component
    /// indices it selects (weights renormalized within the selection).
    pub fn from_components(
        components: Vec<GmmComponent>,
        data_sigma: f64,
        prompts: &BTreeMap<String, Vec<usize>>,
        sched: DiffusionSchedule,
    ) -> Result<Self> {
        let null = GmmCondition::normalized(components.clone(), data_sigma)?;
        let mut table = BTreeMap::new();
        for (id, idx) in prompts {
            if idx.is_empty() {
                return Err(Error::InvalidMixture(format!("prompt `{id}` selects no components")));
            }
            let mut picked = Vec::with_capacity(idx.len());
            for &i in idx {
                let c = components.get(i).ok_or_else(|| {
                    Error::InvalidMixture(format!(
                        "prompt `{id}` references component {i}, only {} exist",
                        components.len()
                    ))
                })?;
                picked.push(c.clone());
            }
            table.insert(id.clone(), GmmCondition::normalized(picked, data_sigma)?);
        }
        Self::new(table, null, sched)
    }

    pub fn with_image_radius(mut self, radius: f64) -> Self {
        self.image_radius = radius;
        self
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn null_condition(&self) -> &GmmCondition {
        &self.null
    }

    pub fn has_prompt(&self, id: &str) -> bool {
        self.prompts.contains_key(id)
    }

    pub fn resolve(&self, condition: &Condition) -> Result<&GmmCondition> {
        match condition {
            Condition::Null => Ok(&self.null),
            Condition::Prompt(id) => self
                .prompts
                .get(id)
                .ok_or_else(|| Error::UnknownPrompt(id.clone())),
        }
    }

    /// Mixture used for `eps(z, c_I, c_T)`.
    pub fn dual_condition(
        &self,
        image_cond: Option<&Field>,
        text_cond: &Condition,
    ) -> Result<GmmCondition> {
        let text = self.resolve(text_cond)?;
        let Some(image) = image_cond else {
            return Ok(text.clone());
        };
        if image.len() != self.null.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.null.dim(),
                found: image.len(),
            });
        }
        let anchor = self
            .null
            .components()
            .iter()
            .map(|c| &c.mean)
            .min_by(|a, b| {
                sq_dist_field(image, a)
                    .partial_cmp(&sq_dist_field(image, b))
                    .expect("finite distances")
            })
            .expect("mixture is non-empty")
            .clone();
        let radius = self.image_radius + MATCH_TOL;
        text.restrict(|c| sq_dist(&c.mean, &anchor).sqrt() <= radius)
            .ok_or_else(|| {
                Error::InvalidMixture(format!(
                    "no component of `{text_cond}` lies within {} of the conditioning image",
                    self.image_radius
                ))
            })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn sq_dist_field(a: &Field, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl DenoiserBackend for AnalyticBackend {
    fn predict(&self, latent: &Field, condition: &Condition, t: usize) -> Result<NoisePrediction> {
        let g = self.resolve(condition)?;
        let eps = gmm_predict(latent, g, t, &self.sched)?;
        NoisePrediction::new(eps, t, condition.clone())
    }

    fn predict2(
        &self,
        latent: &Field,
        image_cond: Option<&Field>,
        text_cond: &Condition,
        t: usize,
    ) -> Result<NoisePrediction> {
        let g = self.dual_condition(image_cond, text_cond)?;
        let eps = gmm_predict(latent, &g, t, &self.sched)?;
        NoisePrediction::new(eps, t, text_cond.clone())
    }
}
