//! Word attention dumps of the generator: per-region weights, the most
//! attended words, and heatmaps.

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::to_vec_f64;

pub const TOP_WORDS: usize = 5;

/// Attention of one refinement stage for a single caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAttention {
    /// Index of the stage that consumed the map.
    pub stage: usize,
    /// Region grid side; regions are numbered row-major.
    pub grid: usize,
    /// `grid * grid` rows over the caption's real words.
    pub weights: Vec<Vec<f64>>,
    /// Per region, the most attended words (at most five).
    pub region_top_words: Vec<Vec<String>>,
    /// Words ranked by attention summed over all regions.
    pub top_words: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub caption: String,
    pub tokens: Vec<String>,
    pub unknown_tokens: usize,
    pub seed: u64,
    pub stages: Vec<StageAttention>,
}

fn ranked(weights: &[f64], tokens: &[String]) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps the earlier word first on ties
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    order
        .into_iter()
        .take(TOP_WORDS.min(tokens.len()))
        .map(|i| (tokens[i].clone(), weights[i]))
        .collect()
}

/// Runs the generator on `caption` with noise `seed` and collects every
/// refinement stage's word attention.
pub fn inspect_attention(model: &Model, caption: &str, seed: u64) -> Result<AttentionReport> {
    let (seqs, unknown_tokens) = model.tokenize(&[caption.to_string()]);
    let seq = &seqs[0];
    let tokens: Vec<String> = seq
        .real_tokens()
        .iter()
        .map(|&id| model.vocab.token(id).unwrap_or("<unk>").to_string())
        .collect();
    let out = model.generate(&seqs, &[seed])?;
    let len = tokens.len();
    let mut stages = Vec::with_capacity(out.attention.len());
    for (i, alpha) in out.attention.iter().enumerate() {
        let (_, n, t) = alpha.dims3()?;
        let flat = to_vec_f64(&alpha.get(0)?)?;
        let weights: Vec<Vec<f64>> = (0..n).map(|r| flat[r * t..r * t + len].to_vec()).collect();
        let grid = (n as f64).sqrt().round() as usize;
        if grid * grid != n {
            return Err(Error::contract(format!("attention over {n} regions is not a square grid")));
        }
        let region_top_words = weights
            .iter()
            .map(|row| ranked(row, &tokens).into_iter().map(|(w, _)| w).collect())
            .collect();
        let summed: Vec<f64> = (0..len).map(|k| weights.iter().map(|r| r[k]).sum()).collect();
        stages.push(StageAttention {
            stage: i + 1,
            grid,
            weights,
            region_top_words,
            top_words: ranked(&summed, &tokens),
        });
    }
    Ok(AttentionReport {
        caption: caption.to_string(),
        tokens,
        unknown_tokens,
        seed,
        stages,
    })
}

/// Nearest-neighbor upscaling of a `grid x grid` map to `size x size`,
/// scaled so the largest value is white.
pub fn heatmap(values: &[f64], grid: usize, size: u32) -> Result<GrayImage> {
    if values.len() != grid * grid || grid == 0 {
        return Err(Error::input(format!(
            "{} values do not form a {grid}x{grid} grid",
            values.len()
        )));
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    Ok(GrayImage::from_fn(size, size, |x, y| {
        let gx = (x as usize * grid) / size as usize;
        let gy = (y as usize * grid) / size as usize;
        Luma([(values[gy * grid + gx] * scale).round().clamp(0.0, 255.0) as u8])
    }))
}

impl StageAttention {
    /// Attention to word `k` over all regions, row-major.
    pub fn word_map(&self, k: usize) -> Vec<f64> {
        self.weights.iter().map(|r| r[k]).collect()
    }
}
