//! Score-distillation gradient estimators.
//!
//! Every estimator is a pure function of noise predictions and scalar
//! weights and returns a gradient with respect to the rendered image. The
//! chain rule through the image generator is applied by [`crate::edit`].
//!
//! Notation: `z_t` is the noised current render, `ẑ_t` the noised source
//! image, `y` the target prompt, `ŷ` the source prompt and `∅` the null
//! prompt.

use serde::{Deserialize, Serialize};

use crate::denoiser::cfg_combine;
use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, Field};

/// A noise-prediction (or injected-noise) slot in [`EstimatorInputs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    /// `eps(z_t, y)`
    TgtY,
    /// `eps(z_t, ŷ)`
    TgtSrcPrompt,
    /// `eps(z_t, ∅)`
    TgtNull,
    /// `eps(ẑ_t, ŷ)`
    SrcPrompt,
    /// `eps(ẑ_t, ∅)`
    SrcNull,
    /// The noise injected into `z_t`.
    TrueNoise,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::TgtY,
        Term::TgtSrcPrompt,
        Term::TgtNull,
        Term::SrcPrompt,
        Term::SrcNull,
        Term::TrueNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::TgtY => "eps_tgt_y",
            Term::TgtSrcPrompt => "eps_tgt_src_prompt",
            Term::TgtNull => "eps_tgt_null",
            Term::SrcPrompt => "eps_src_prompt",
            Term::SrcNull => "eps_src_null",
            Term::TrueNoise => "true_noise",
        }
    }

    /// Whether the prediction is taken at the source latent `ẑ_t`.
    pub fn on_source_latent(self) -> bool {
        matches!(self, Term::SrcPrompt | Term::SrcNull)
    }
}

/// The predictions an estimator consumes. Only the slots an estimator
/// needs have to be filled; reading an empty slot is an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatorInputs {
    pub eps_tgt_y: Option<Field>,
    pub eps_tgt_src_prompt: Option<Field>,
    pub eps_tgt_null: Option<Field>,
    pub eps_src_prompt: Option<Field>,
    pub eps_src_null: Option<Field>,
    pub true_noise: Option<Field>,
    pub t: usize,
}

impl EstimatorInputs {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            ..Default::default()
        }
    }

    /// All six slots filled, in [`Term::ALL`] order.
    pub fn complete(
        eps_tgt_y: Field,
        eps_tgt_src_prompt: Field,
        eps_tgt_null: Field,
        eps_src_prompt: Field,
        eps_src_null: Field,
        true_noise: Field,
        t: usize,
    ) -> Self {
        Self {
            eps_tgt_y: Some(eps_tgt_y),
            eps_tgt_src_prompt: Some(eps_tgt_src_prompt),
            eps_tgt_null: Some(eps_tgt_null),
            eps_src_prompt: Some(eps_src_prompt),
            eps_src_null: Some(eps_src_null),
            true_noise: Some(true_noise),
            t,
        }
    }

    fn slot(&self, term: Term) -> &Option<Field> {
        match term {
            Term::TgtY => &self.eps_tgt_y,
            Term::TgtSrcPrompt => &self.eps_tgt_src_prompt,
            Term::TgtNull => &self.eps_tgt_null,
            Term::SrcPrompt => &self.eps_src_prompt,
            Term::SrcNull => &self.eps_src_null,
            Term::TrueNoise => &self.true_noise,
        }
    }

    pub fn set(&mut self, term: Term, value: Field) {
        let slot = match term {
            Term::TgtY => &mut self.eps_tgt_y,
            Term::TgtSrcPrompt => &mut self.eps_tgt_src_prompt,
            Term::TgtNull => &mut self.eps_tgt_null,
            Term::SrcPrompt => &mut self.eps_src_prompt,
            Term::SrcNull => &mut self.eps_src_null,
            Term::TrueNoise => &mut self.true_noise,
        };
        *slot = Some(value);
    }

    pub fn with(mut self, term: Term, value: Field) -> Self {
        self.set(term, value);
        self
    }

    pub fn get(&self, term: Term) -> Result<&Field> {
        self.slot(term).as_ref().ok_or(Error::MissingTerm(term.name()))
    }

    pub fn is_set(&self, term: Term) -> bool {
        self.slot(term).is_some()
    }

    /// Fetches the requested slots and checks they share one shape.
    fn fetch<const N: usize>(&self, terms: [Term; N]) -> Result<[&Field; N]> {
        let mut out = [self.get(terms[0])?; N];
        for (i, term) in terms.iter().enumerate().skip(1) {
            out[i] = self.get(*term)?;
            ensure_same_shape(out[0], out[i])?;
        }
        Ok(out)
    }

    /// Multiplies every filled slot by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |f: &Option<Field>| f.as_ref().map(|v| v * c);
        Self {
            eps_tgt_y: s(&self.eps_tgt_y),
            eps_tgt_src_prompt: s(&self.eps_tgt_src_prompt),
            eps_tgt_null: s(&self.eps_tgt_null),
            eps_src_prompt: s(&self.eps_src_prompt),
            eps_src_null: s(&self.eps_src_null),
            true_noise: s(&self.true_noise),
            t: self.t,
        }
    }
}

/// Iteration-dependent strength of the source-latent anchor term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IdWeight {
    Constant {
        value: f64,
    },
    /// Linear ramp from `from` at iteration 0 to `to` at iteration
    /// `over - 1`, constant afterwards. `over = 0` means "the run budget"
    /// and is resolved by [`GuidanceWeights::resolve_budget`].
    LinearDecay {
        from: f64,
        to: f64,
        #[serde(default)]
        over: usize,
    },
}

impl Default for IdWeight {
    fn default() -> Self {
        IdWeight::LinearDecay {
            from: 1.0,
            to: 0.0,
            over: 0,
        }
    }
}

impl IdWeight {
    pub fn off() -> Self {
        IdWeight::Constant { value: 0.0 }
    }

    pub fn at(&self, iter: usize) -> f64 {
        match *self {
            IdWeight::Constant { value } => value,
            IdWeight::LinearDecay { from, to, over } => {
                if over <= 1 {
                    return from;
                }
                let frac = iter.min(over - 1) as f64 / (over - 1) as f64;
                from + (to - from) * frac
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            IdWeight::Constant { value } if value >= 0.0 && value.is_finite() => Ok(()),
            IdWeight::LinearDecay { from, to, .. }
                if from.is_finite() && to.is_finite() && to >= 0.0 && from >= to =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidRange(format!(
                "id weight must be finite, non-negative and non-increasing: {self:?}"
            ))),
        }
    }
}

/// Scalar knobs shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceWeights {
    /// CFG / editing scale.
    pub s: f64,
    /// Cross-prompt weight.
    pub w_p: f64,
    /// Cross-trajectory weight.
    pub w_t: f64,
    /// Prompt-enhancement scale.
    pub w_e: f64,
    /// Dual-classifier weights.
    pub w_a: f64,
    pub w_b: f64,
    /// Instruction-editing image and text scales.
    #[serde(rename = "s_i")]
    pub s_image: f64,
    #[serde(rename = "s_t")]
    pub s_text: f64,
    /// Timestep weighting of the plain distillation gradient.
    pub sds_weight: f64,
    pub id_weight: IdWeight,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self::preset_3d()
    }
}

impl GuidanceWeights {
    /// Radiance-field / splatting defaults: enhancement branch off.
    pub fn preset_3d() -> Self {
        Self {
            s: 7.5,
            w_p: 7.5,
            w_t: 1.0,
            w_e: 0.0,
            w_a: 7.5,
            w_b: 7.5,
            s_image: 1.5,
            s_text: 7.5,
            sds_weight: 1.0,
            id_weight: IdWeight::default(),
        }
    }

    /// Image-editing defaults: enhancement branch at 1.5.
    pub fn preset_2d() -> Self {
        Self {
            w_e: 1.5,
            ..Self::preset_3d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("s", self.s),
            ("w_p", self.w_p),
            ("w_t", self.w_t),
            ("w_e", self.w_e),
            ("w_a", self.w_a),
            ("w_b", self.w_b),
            ("s_i", self.s_image),
            ("s_t", self.s_text),
            ("sds_weight", self.sds_weight),
        ];
        if let Some((name, v)) = scalars.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidRange(format!("weight {name} is not finite ({v})")));
        }
        self.id_weight.validate()
    }

    /// Fills an unset decay horizon with the iteration budget.
    pub fn resolve_budget(&mut self, total_iters: usize) {
        if let IdWeight::LinearDecay { over, .. } = &mut self.id_weight {
            if *over == 0 {
                *over = total_iters;
            }
        }
    }
}

/// `wt * (cfg(eps(z_t, y), eps(z_t, ∅); scale) - eps)`.
pub fn sds_grad(inputs: &EstimatorInputs, scale: f64, wt: f64) -> Result<Field> {
    let [y, null, noise] = inputs.fetch([Term::TgtY, Term::TgtNull, Term::TrueNoise])?;
    Ok((cfg_combine(y, null, scale)? - noise) * wt)
}

/// Both branches CFG-composed with the same scale:
/// `cfg(eps(z_t, y), eps(z_t, ∅)) - cfg(eps(ẑ_t, ŷ), eps(ẑ_t, ∅))`.
pub fn dds_grad(inputs: &EstimatorInputs, scale: f64) -> Result<Field> {
    let [y, null, src_p, src_null] =
        inputs.fetch([Term::TgtY, Term::TgtNull, Term::SrcPrompt, Term::SrcNull])?;
    Ok(cfg_combine(y, null, scale)? - cfg_combine(src_p, src_null, scale)?)
}

/// Dual classifier on the current latent:
/// `w_a (eps(z_t, y) - eps(z_t, ∅)) - w_b (eps(z_t, ŷ) - eps(z_t, ∅))`.
pub fn csd_grad(inputs: &EstimatorInputs, w_a: f64, w_b: f64) -> Result<Field> {
    let [y, src_p, null] = inputs.fetch([Term::TgtY, Term::TgtSrcPrompt, Term::TgtNull])?;
    Ok((y - null) * w_a - (src_p - null) * w_b)
}

/// `eps(z_t, ŷ) + s (eps(z_t, y) - eps(z_t, ŷ)) - eps(ẑ_t, ∅)`.
pub fn ssd_grad(inputs: &EstimatorInputs, s: f64) -> Result<Field> {
    let [y, src_p, src_null] = inputs.fetch([Term::TgtY, Term::TgtSrcPrompt, Term::SrcNull])?;
    Ok(src_p + &((y - src_p) * s) - src_null)
}

/// Cross-prompt and cross-trajectory terms of [`ssd_decomposed`].
pub fn ssd_terms(inputs: &EstimatorInputs, w_p: f64, w_t: f64) -> Result<(Field, Field)> {
    let [y, src_p, src_null] = inputs.fetch([Term::TgtY, Term::TgtSrcPrompt, Term::SrcNull])?;
    Ok(((y - src_p) * w_p, (src_p - src_null) * w_t))
}

/// `w_p (eps(z_t, y) - eps(z_t, ŷ)) + w_t (eps(z_t, ŷ) - eps(ẑ_t, ∅))`.
pub fn ssd_decomposed(inputs: &EstimatorInputs, w_p: f64, w_t: f64) -> Result<Field> {
    let (cross_prompt, cross_trajectory) = ssd_terms(inputs, w_p, w_t)?;
    Ok(cross_prompt + cross_trajectory)
}

/// `w_e (eps(z_t, y) - eps(z_t, ∅))`.
pub fn prompt_align_grad(inputs: &EstimatorInputs, w_e: f64) -> Result<Field> {
    let [y, null] = inputs.fetch([Term::TgtY, Term::TgtNull])?;
    Ok((y - null) * w_e)
}

/// `weight (x_t - x̂_t)`. With both latents noised by the same `eps` at the
/// same `t` this equals `weight sqrt(alpha_bar_t) (x_0 - x̂_0)`.
pub fn id_reg_grad(x_t: &Field, x_hat_t: &Field, weight: f64) -> Result<Field> {
    ensure_same_shape(x_t, x_hat_t)?;
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "id weight must be non-negative, got {weight}"
        )));
    }
    Ok((x_t - x_hat_t) * weight)
}

/// One-step instruction-editing guidance
/// `eps_nn + s_I (eps_In - eps_nn) + s_T (eps_IT - eps_In)`.
///
/// Evaluated with collected coefficients so that `s_I = s_T = 1` returns
/// `eps_IT` exactly.
pub fn ip2p_compose(
    eps_nn: &Field,
    eps_in: &Field,
    eps_it: &Field,
    s_image: f64,
    s_text: f64,
) -> Result<Field> {
    ensure_same_shape(eps_nn, eps_in)?;
    ensure_same_shape(eps_nn, eps_it)?;
    Ok(eps_nn * (1.0 - s_image) + &(eps_in * (s_image - s_text)) + &(eps_it * s_text))
}

/// Image-guidance and instruction-guidance terms of [`ip2p_edit_grad`]:
/// `(s_I (eps_In - eps_nn), s_T (eps_IT - eps_In))`.
pub fn ip2p_edit_terms(
    eps_nn: &Field,
    eps_in: &Field,
    eps_it: &Field,
    s_image: f64,
    s_text: f64,
) -> Result<(Field, Field)> {
    ensure_same_shape(eps_nn, eps_in)?;
    ensure_same_shape(eps_nn, eps_it)?;
    Ok(((eps_in - eps_nn) * s_image, (eps_it - eps_in) * s_text))
}

/// [`ip2p_compose`] minus the unconditional prediction.
pub fn ip2p_edit_grad(
    eps_nn: &Field,
    eps_in: &Field,
    eps_it: &Field,
    s_image: f64,
    s_text: f64,
) -> Result<Field> {
    let (image, text) = ip2p_edit_terms(eps_nn, eps_in, eps_it, s_image, s_text)?;
    Ok(image + text)
}

/// A gradient together with its named parts, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTerms {
    pub total: Field,
    pub cross_prompt: Option<Field>,
    pub cross_trajectory: Option<Field>,
    pub align: Option<Field>,
    pub id: Option<Field>,
}

impl GradTerms {
    pub fn plain(total: Field) -> Self {
        Self {
            total,
            cross_prompt: None,
            cross_trajectory: None,
            align: None,
            id: None,
        }
    }
}

/// Full objective with each part kept separately. The alignment branch is
/// skipped when `w_e = 0` and the anchor term when its weight is 0, so the
/// corresponding predictions need not be supplied.
pub fn final_grad_terms(
    inputs: &EstimatorInputs,
    x_t: &Field,
    x_hat_t: &Field,
    weights: &GuidanceWeights,
    iter: usize,
) -> Result<GradTerms> {
    let (cross_prompt, cross_trajectory) = ssd_terms(inputs, weights.w_p, weights.w_t)?;
    let mut total = &cross_prompt + &cross_trajectory;
    let align = if weights.w_e != 0.0 {
        let a = prompt_align_grad(inputs, weights.w_e)?;
        total += &a;
        Some(a)
    } else {
        None
    };
    let id_w = weights.id_weight.at(iter);
    let id = if id_w != 0.0 {
        ensure_same_shape(&total, x_t)?;
        let g = id_reg_grad(x_t, x_hat_t, id_w)?;
        total += &g;
        Some(g)
    } else {
        None
    };
    Ok(GradTerms {
        total,
        cross_prompt: Some(cross_prompt),
        cross_trajectory: Some(cross_trajectory),
        align,
        id,
    })
}

/// `ssd_decomposed(w_p, w_t) + prompt_align_grad(w_e) + id_reg_grad(w(iter))`.
pub fn final_grad(
    inputs: &EstimatorInputs,
    x_t: &Field,
    x_hat_t: &Field,
    weights: &GuidanceWeights,
    iter: usize,
) -> Result<Field> {
    Ok(final_grad_terms(inputs, x_t, x_hat_t, weights, iter)?.total)
}
