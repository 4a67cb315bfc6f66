//! Gaussian-mixture data distributions and their exact noised scores.
//!
//! For data `x ~ sum_i w_i N(mu_i, s0^2 I)` the VP marginal at step `t` is
//! `sum_i w_i N(a mu_i, v I)` with `a = sqrt(alpha_bar_t)` and
//! `v = alpha_bar_t s0^2 + 1 - alpha_bar_t`. Its score is
//! `sum_i r_i(z) (a mu_i - z) / v`, where `r_i` are the posterior
//! responsibilities, and the matching noise prediction is
//! `eps = -sqrt(1 - alpha_bar_t) * score`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::schedule::DiffusionSchedule;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub mean: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGmm", into = "RawGmm")]
pub struct GmmCondition {
    components: Vec<GmmComponent>,
    data_sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGmm {
    components: Vec<GmmComponent>,
    #[serde(default)]
    data_sigma: f64,
}

impl TryFrom<RawGmm> for GmmCondition {
    type Error = Error;
    fn try_from(raw: RawGmm) -> Result<Self> {
        GmmCondition::new(raw.components, raw.data_sigma)
    }
}

impl From<GmmCondition> for RawGmm {
    fn from(g: GmmCondition) -> Self {
        RawGmm {
            components: g.components,
            data_sigma: g.data_sigma,
        }
    }
}

/// One component of the noised marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalComponent {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub weight: f64,
}

impl GmmCondition {
    pub fn new(components: Vec<GmmComponent>, data_sigma: f64) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidMixture("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("component means must be non-empty".into()));
        }
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component means disagree on dimension ({} vs {dim})",
                    c.mean.len()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component weight must be positive, got {}",
                    c.weight
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidMixture("component mean is not finite".into()));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!(
                "weights must sum to 1, got {total}"
            )));
        }
        if !(data_sigma >= 0.0 && data_sigma.is_finite()) {
            return Err(Error::InvalidMixture(format!(
                "data_sigma must be non-negative, got {data_sigma}"
            )));
        }
        Ok(Self {
            components,
            data_sigma,
        })
    }

    /// Like [`GmmCondition::new`] but rescales positive weights to sum to 1.
    pub fn normalized(mut components: Vec<GmmComponent>, data_sigma: f64) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if total > 0.0 && total.is_finite() {
            for c in &mut components {
                c.weight /= total;
            }
        }
        Self::new(components, data_sigma)
    }

    /// A single point mass (or isotropic Gaussian when `data_sigma > 0`).
    pub fn single(mean: Vec<f64>, data_sigma: f64) -> Result<Self> {
        Self::new(vec![GmmComponent { mean, weight: 1.0 }], data_sigma)
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn data_sigma(&self) -> f64 {
        self.data_sigma
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Keeps the components accepted by `keep`, renormalizing the weights.
    /// Returns `None` when nothing survives.
    pub fn restrict(&self, mut keep: impl FnMut(&GmmComponent) -> bool) -> Option<Self> {
        let kept: Vec<_> = self.components.iter().filter(|c| keep(c)).cloned().collect();
        if kept.is_empty() {
            return None;
        }
        Self::normalized(kept, self.data_sigma).ok()
    }

    /// Mixture mean `sum_i w_i mu_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (acc, v) in m.iter_mut().zip(&c.mean) {
                *acc += c.weight * v;
            }
        }
        m
    }
}

pub fn gmm_marginal_params(
    cond: &GmmCondition,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<MarginalComponent>> {
    if t > sched.num_steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: sched.num_steps(),
        });
    }
    let ab = sched.alpha_bar(t);
    let a = ab.sqrt();
    let variance = ab * cond.data_sigma * cond.data_sigma + (1.0 - ab);
    Ok(cond
        .components
        .iter()
        .map(|c| MarginalComponent {
            mean: c.mean.iter().map(|m| a * m).collect(),
            variance,
            weight: c.weight,
        })
        .collect())
}

/// Exact noise prediction of the mixture's noised marginal at `latent`.
///
/// Responsibilities are normalized with log-sum-exp so that tiny `t`
/// (sharp components) does not underflow.
pub fn gmm_predict(
    latent: &Field,
    cond: &GmmCondition,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Field> {
    sched.check_timestep(t)?;
    if latent.len() != cond.dim() {
        return Err(Error::DimensionMismatch {
            expected: cond.dim(),
            found: latent.len(),
        });
    }
    let ab = sched.alpha_bar(t);
    let a = ab.sqrt();
    let sigma = sched.sigma(t);
    let variance = ab * cond.data_sigma * cond.data_sigma + (1.0 - ab);

    let z: Vec<f64> = latent.iter().copied().collect();
    let logits: Vec<f64> = cond
        .components
        .iter()
        .map(|c| {
            let sq: f64 = z
                .iter()
                .zip(&c.mean)
                .map(|(zi, mi)| (zi - a * mi).powi(2))
                .sum();
            c.weight.ln() - sq / (2.0 * variance)
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();

    // posterior mean of the clean component mean
    let mut post_mean = vec![0.0; z.len()];
    for (c, u) in cond.components.iter().zip(&unnorm) {
        let r = u / total;
        for (acc, m) in post_mean.iter_mut().zip(&c.mean) {
            *acc += r * m;
        }
    }
    let scale = sigma / variance;
    let eps: Vec<f64> = z
        .iter()
        .zip(&post_mean)
        .map(|(zi, mi)| scale * (zi - a * mi))
        .collect();
    Ok(Field::from_shape_vec(latent.raw_dim(), eps).expect("shape preserved"))
}
