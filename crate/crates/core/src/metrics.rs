//! Evaluation measures: exact pixel metrics plus embedding-based
//! similarities computed through pluggable [`Embedder`]s.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, Field};

/// Difference norms below this are treated as "no direction".
pub const ZERO_DIRECTION_EPS: f64 = 1e-9;

pub fn mse(a: &Field, b: &Field) -> Result<f64> {
    ensure_same_shape(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// MSE over a subset of flat (row-major) element indices.
pub fn mse_on(a: &Field, b: &Field, indices: &[usize]) -> Result<f64> {
    ensure_same_shape(a, b)?;
    if indices.is_empty() {
        return Err(Error::InvalidRange("region has no elements".into()));
    }
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut sum = 0.0;
    for &i in indices {
        if i >= a.len() {
            return Err(Error::InvalidRange(format!(
                "region index {i} out of bounds for {} elements",
                a.len()
            )));
        }
        sum += (a[i] - b[i]).powi(2);
    }
    Ok(sum / indices.len() as f64)
}

/// Image/text encoder into a shared embedding space. Outputs should be
/// L2-normalized; the similarity functions renormalize regardless.
pub trait Embedder {
    fn embed_image(&self, image: &Field) -> Result<Vec<f64>>;
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Perceptual or structural distance between two images (LPIPS, DINO
/// self-similarity and the like). No network ships with this crate;
/// implement this for an external model.
pub trait PerceptualDistance {
    fn name(&self) -> &str;
    fn distance(&self, a: &Field, b: &Field) -> Result<f64>;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidRange("cannot normalize a zero or non-finite embedding".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(dot(&normalize(a)?, &normalize(b)?)?.clamp(-1.0, 1.0))
}

/// Cosine similarity between the image and prompt embeddings.
pub fn clip_similarity(image: &Field, prompt: &str, embedder: &dyn Embedder) -> Result<f64> {
    cosine(&embedder.embed_image(image)?, &embedder.embed_text(prompt)?)
}

/// Cosine between the image edit direction and the text edit direction.
/// Returns 0 when either direction is (numerically) zero.
pub fn directional_similarity(
    src_image: &Field,
    edited_image: &Field,
    src_prompt: &str,
    tgt_prompt: &str,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let img_src = normalize(&embedder.embed_image(src_image)?)?;
    let img_dst = normalize(&embedder.embed_image(edited_image)?)?;
    let txt_src = normalize(&embedder.embed_text(src_prompt)?)?;
    let txt_dst = normalize(&embedder.embed_text(tgt_prompt)?)?;
    let d_img: Vec<f64> = img_dst.iter().zip(&img_src).map(|(a, b)| a - b).collect();
    let d_txt: Vec<f64> = txt_dst.iter().zip(&txt_src).map(|(a, b)| a - b).collect();
    let (n_img, n_txt) = (norm(&d_img), norm(&d_txt));
    if n_img < ZERO_DIRECTION_EPS || n_txt < ZERO_DIRECTION_EPS {
        return Ok(0.0);
    }
    Ok((dot(&d_img, &d_txt)? / (n_img * n_txt)).clamp(-1.0, 1.0))
}

/// Toy embedder: an image maps to its normalized per-channel mean over a
/// `[height, width, channels]` grid (the whole array is one channel
/// otherwise); prompts map to fixed vectors from a table.
#[derive(Debug, Clone, Default)]
pub struct MeanChannelEmbedder {
    pub prompts: BTreeMap<String, Vec<f64>>,
}

impl MeanChannelEmbedder {
    pub fn new(prompts: BTreeMap<String, Vec<f64>>) -> Self {
        Self { prompts }
    }
}

impl Embedder for MeanChannelEmbedder {
    fn embed_image(&self, image: &Field) -> Result<Vec<f64>> {
        let channels = match image.shape() {
            [_, _, c] => *c,
            _ => 1,
        };
        let mut sums = vec![0.0; channels];
        for (i, v) in image.iter().enumerate() {
            sums[i % channels] += v;
        }
        let count = (image.len() / channels.max(1)) as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
        normalize(&means)
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let v = self
            .prompts
            .get(prompt)
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))?;
        normalize(v)
    }
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub metric_name: String,
    pub value: f64,
}

pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
