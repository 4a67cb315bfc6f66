#![allow(dead_code)]

use std::path::{Path, PathBuf};

use score_distill::edit::EditConfig;

/// 1-D edit from the source mode -1 towards the target mode +1.
pub fn one_d_json(run_id: &str, estimator: &str, s: f64, iters: usize, step: f64, seed: u64) -> String {
    format!(
        r#"{{
  "run_id": "{run_id}",
  "estimator": "{estimator}",
  "weights": {{ "s": {s}, "w_p": {s}, "w_t": 1.0 }},
  "sampler": {{ "kind": "non_increasing_linear", "t_min": 20, "t_max": 980 }},
  "total_iters": {iters},
  "step_size": {step},
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
    )
}

pub fn one_d(estimator: &str, s: f64, iters: usize, step: f64, seed: u64) -> EditConfig {
    EditConfig::from_json(&one_d_json("one-d", estimator, s, iters, step, seed)).unwrap()
}

/// 2-D two-region toy: point masses at (±1, ±1). The source prompt is the
/// single component (-1, -1), the target prompt the two components with
/// x_A = +1, which say nothing about region B.
pub fn toy_2d_json(run_id: &str, estimator: &str, extra_weights: &str, seed: u64) -> String {
    format!(
        r#"{{
  "run_id": "{run_id}",
  "estimator": "{estimator}",
  "weights": {{ "s": 1.0, "w_p": 1.0, "w_t": 1.0{extra_weights} }},
  "total_iters": 300,
  "step_size": 0.05,
  "seeds": {{ "noise": {seed}, "sampler": {seed} }},
  "backend": {{
    "kind": "analytic",
    "components": [
      {{ "mean": [-1.0, -1.0], "weight": 0.25 }},
      {{ "mean": [-1.0, 1.0], "weight": 0.25 }},
      {{ "mean": [1.0, -1.0], "weight": 0.25 }},
      {{ "mean": [1.0, 1.0], "weight": 0.25 }}
    ],
    "prompts": {{ "source": [0], "target": [2, 3] }}
  }},
  "source": {{ "shape": [2], "data": [-1.0, -1.0] }},
  "source_prompt": "source",
  "target_prompt": "target",
  "regions": {{ "A": [0], "B": [1] }}
}}"#
    )
}

pub fn toy_2d(estimator: &str, seed: u64) -> EditConfig {
    EditConfig::from_json(&toy_2d_json("toy", estimator, "", seed)).unwrap()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_score-distill")
}
