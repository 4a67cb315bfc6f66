//! Variance-preserving forward process and timestep samplers.
//!
//! Timestep `t` indexes `alpha_bar[t]` with `alpha_bar[0] = 1` (clean data).
//! Noising is `z_t = sqrt(alpha_bar[t]) x + sqrt(1 - alpha_bar[t]) eps`.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, Field};
use crate::rng::{self, Purpose};

pub const DEFAULT_NUM_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_T_MIN: usize = 20;
pub const DEFAULT_T_MAX: usize = 980;
/// Iteration budget for 3D-style (radiance field) edits.
pub const DEFAULT_ITERS_3D: usize = 3000;
/// Iteration budget for fast (splatting / 2D) edits.
pub const DEFAULT_ITERS_FAST: usize = 1500;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear-beta schedule: `alpha_bar[t] = prod_{i <= t} (1 - beta_i)`,
    /// with `beta_1 = beta_min` and `beta_T = beta_max`.
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::InvalidRange(format!(
                "num_steps must be >= 2, got {num_steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min < beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        let span = (num_steps - 1) as f64;
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..num_steps {
            let beta = beta_min + (beta_max - beta_min) * i as f64 / span;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Builds a schedule from an explicit `alpha_bar` table (index 0 must be 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidRange("alpha_bar needs at least two entries".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidRange(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                alpha_bar[0]
            )));
        }
        if let Some(w) = alpha_bar.windows(2).position(|w| w[1].partial_cmp(&w[0]) != Some(Ordering::Less)) {
            return Err(Error::InvalidRange(format!(
                "alpha_bar must be strictly decreasing (violated at t={})",
                w + 1
            )));
        }
        let last = *alpha_bar.last().unwrap();
        if last.partial_cmp(&0.0) != Some(Ordering::Greater) {
            return Err(Error::InvalidRange(format!("alpha_bar[T] must be > 0, got {last}")));
        }
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self { alpha_bar, sigma })
    }

    /// `T`: the largest valid timestep.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Rejects `t = 0` and `t > T`; every noised query needs `1 <= t <= T`.
    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t]))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        (self.alpha_bar[t].sqrt(), self.sigma[t])
    }

    pub fn add_noise(&self, x: &Field, t: usize, eps: &Field) -> Result<Field> {
        ensure_same_shape(x, eps)?;
        self.check_timestep(t)?;
        let (a, s) = self.coefficients(t);
        Ok(x * a + eps * s)
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_NUM_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule parameters are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    UniformRandom,
    NonIncreasingLinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSampler {
    pub kind: SamplerKind,
    pub t_min: usize,
    pub t_max: usize,
    pub total_iters: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TimestepSampler {
    pub fn annealed(t_min: usize, t_max: usize, total_iters: usize) -> Self {
        Self {
            kind: SamplerKind::NonIncreasingLinear,
            t_min,
            t_max,
            total_iters,
            rng_seed: 0,
        }
    }

    pub fn uniform(t_min: usize, t_max: usize, total_iters: usize, rng_seed: u64) -> Self {
        Self {
            kind: SamplerKind::UniformRandom,
            t_min,
            t_max,
            total_iters,
            rng_seed,
        }
    }

    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.t_min < 1 || self.t_max > sched.num_steps() || self.t_min > self.t_max {
            return Err(Error::InvalidRange(format!(
                "sampler range needs 1 <= t_min <= t_max <= {}, got [{}, {}]",
                sched.num_steps(),
                self.t_min,
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn sample(&self, iter: usize) -> Result<usize> {
        if iter >= self.total_iters {
            return Err(Error::IterOutOfRange {
                iter,
                total: self.total_iters,
            });
        }
        if self.t_min > self.t_max {
            return Err(Error::InvalidRange(format!(
                "t_min {} > t_max {}",
                self.t_min, self.t_max
            )));
        }
        Ok(match self.kind {
            SamplerKind::UniformRandom => {
                let mut rng = rng::derive(self.rng_seed, iter as u64, Purpose::Timestep);
                rng.random_range(self.t_min..=self.t_max)
            }
            SamplerKind::NonIncreasingLinear => {
                if self.total_iters == 1 {
                    return Ok(self.t_max);
                }
                // round-half-up of t_max - (t_max - t_min) * iter / (n - 1),
                // evaluated exactly in integers.
                let span = (self.t_max - self.t_min) as u128;
                let denom = (self.total_iters - 1) as u128;
                let num = 2 * self.t_max as u128 * denom - 2 * span * iter as u128 + denom;
                (num / (2 * denom)) as usize
            }
        })
    }
}
