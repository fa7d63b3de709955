//! Simplified image-text matching model: an image encoder into the word
//! feature space and a symmetric sentence-level plus word-level contrastive
//! loss over the batch.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{flatten_regions, leaky_relu, scalar_f64, Conv2d, Linear, ParamBuilder};

/// Maps images to `(B, N_w, N)` region features and a `(B, N_w)` global code.
#[derive(Debug, Clone)]
pub struct ImageMatchEncoder {
    downs: Vec<Conv2d>,
    project: Conv2d,
    global: Linear,
    resolution: usize,
}

/// Encoded image side of the matching loss.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `(B, D, N)`.
    pub regions: Tensor,
    /// `(B, D)`.
    pub global: Tensor,
}

impl ImageMatchEncoder {
    /// Reads images at the base resolution; larger inputs are average-pooled
    /// down by an integer factor first.
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let steps = cfg.scale_steps();
        let mut downs = Vec::with_capacity(steps);
        let mut in_ch = 3;
        for i in 0..steps {
            let out_ch = cfg.disc_width << i;
            downs.push(Conv2d::new(&mut pb.pp(format!("down{i}")), in_ch, out_ch, 4, 2, 1)?);
            in_ch = out_ch;
        }
        Ok(Self {
            downs,
            project: Conv2d::new(&mut pb.pp("project"), in_ch, cfg.word_dim, 1, 1, 0)?,
            global: Linear::new(&mut pb.pp("global"), cfg.word_dim, cfg.word_dim)?,
            resolution: cfg.base_resolution,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ImageFeatures> {
        let (_, _, h, w) = image.dims4()?;
        if h != w || h % self.resolution != 0 {
            return Err(Error::input(format!(
                "matching encoder needs square images with side a multiple of {}, got {h}x{w}",
                self.resolution
            )));
        }
        let mut x = if h == self.resolution {
            image.clone()
        } else {
            image.avg_pool2d(h / self.resolution)?
        };
        for conv in &self.downs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        let regions = flatten_regions(&self.project.forward(&x)?)?;
        let global = self.global.forward(&regions.mean(D::Minus1)?)?;
        Ok(ImageFeatures { regions, global })
    }
}

/// Attention and scaling constants of the matching loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingScales {
    /// Sharpness of the word-to-region softmax.
    pub attention: f64,
    /// Temperature of the log-sum-exp over words.
    pub aggregation: f64,
    /// Scale of similarities inside the batch softmax.
    pub similarity: f64,
}

impl MatchingScales {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            attention: cfg.damsm_gamma1,
            aggregation: cfg.damsm_gamma2,
            similarity: cfg.damsm_gamma3,
        }
    }
}

/// The four cross-entropy terms; `total` is their sum.
#[derive(Debug, Clone)]
pub struct MatchingLoss {
    pub sentence_image_to_text: Tensor,
    pub sentence_text_to_image: Tensor,
    pub word_image_to_text: Tensor,
    pub word_text_to_image: Tensor,
}

impl MatchingLoss {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.sentence_image_to_text + &self.sentence_text_to_image)?
            + (&self.word_image_to_text + &self.word_text_to_image)?)?)
    }

    pub fn values(&self) -> Result<[f64; 4]> {
        Ok([
            scalar_f64(&self.sentence_image_to_text)?,
            scalar_f64(&self.sentence_text_to_image)?,
            scalar_f64(&self.word_image_to_text)?,
            scalar_f64(&self.word_text_to_image)?,
        ])
    }
}

fn l2_norm_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)
}

/// Row-wise cosine similarity matrix of `(B, D)` and `(C, D)`.
fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dots = a.matmul(&b.t()?)?;
    let norms = l2_norm_last(a)?.matmul(&l2_norm_last(b)?.t()?)?;
    Ok(dots.div(&norms.clamp(1e-8, f64::INFINITY)?)?)
}

fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    Ok(x
        .broadcast_sub(&max)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        .add(&max)?
        .squeeze(D::Minus1)?)
}

/// Mean cross-entropy of each row of a square logit matrix against the
/// diagonal.
fn diagonal_cross_entropy(logits: &Tensor) -> Result<Tensor> {
    let n = logits.dim(0)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let diag = logits.mul(&eye)?.sum(D::Minus1)?;
    Ok((logsumexp_last(logits)? - diag)?.mean_all()?)
}

/// Word-level relevance `R(i, j)` of every image `i` to every caption `j`,
/// returned as `(B_img, B_txt)`.
fn word_relevance(
    regions: &Tensor,
    words: &Tensor,
    lengths: &[usize],
    scales: MatchingScales,
) -> Result<Tensor> {
    let regions_t = regions.transpose(1, 2)?.contiguous()?; // (B, N, D)
    let mut columns = Vec::with_capacity(lengths.len());
    for (j, &len) in lengths.iter().enumerate() {
        let w = words.get(j)?.narrow(1, 0, len)?; // (D, L)
        // (B, N, L): word-region dot products for every image
        let scores = regions_t.broadcast_matmul(&w)?;
        let attn = crate::nn::softmax_last(&scores.transpose(1, 2)?.affine(scales.attention, 0.0)?)?; // (B, L, N)
        let context = attn.matmul(&regions_t)?; // (B, L, D)
        let wt = w.t()?.contiguous()?; // (L, D)
        let dots = context.broadcast_mul(&wt.unsqueeze(0)?)?.sum(D::Minus1)?; // (B, L)
        let norms = (l2_norm_last(&context)?.squeeze(D::Minus1)?
            .broadcast_mul(&l2_norm_last(&wt)?.squeeze(D::Minus1)?.unsqueeze(0)?))?;
        let cos = dots.div(&norms.clamp(1e-8, f64::INFINITY)?)?;
        let rel = logsumexp_last(&cos.affine(scales.aggregation, 0.0)?)?
            .affine(1.0 / scales.aggregation, 0.0)?; // (B,)
        columns.push(rel);
    }
    Ok(Tensor::stack(&columns, 1)?)
}

/// Symmetric matching loss over a batch of matched image/caption pairs.
///
/// `image` regions `(B, D, N)` and global `(B, D)`, `words` `(B, D, T)` with
/// the true caption `lengths`, `sentence` `(B, D)`. Needs `B >= 2`.
pub fn damsm_loss(
    image: &ImageFeatures,
    words: &Tensor,
    lengths: &[usize],
    sentence: &Tensor,
    scales: MatchingScales,
) -> Result<MatchingLoss> {
    let b = sentence.dim(0)?;
    if b < 2 {
        return Err(Error::contract("matching loss needs a batch of at least 2"));
    }
    if image.global.dim(0)? != b || words.dim(0)? != b || lengths.len() != b {
        return Err(Error::input("matching loss inputs disagree on batch size"));
    }
    if image.global.dim(1)? != sentence.dim(1)? || image.regions.dim(1)? != words.dim(1)? {
        return Err(Error::input("image and text features live in different widths"));
    }
    let sentence_logits = cosine_matrix(&image.global, sentence)?.affine(scales.similarity, 0.0)?;
    let word_logits = word_relevance(&image.regions, words, lengths, scales)?.affine(scales.similarity, 0.0)?;
    Ok(MatchingLoss {
        sentence_image_to_text: diagonal_cross_entropy(&sentence_logits)?,
        sentence_text_to_image: diagonal_cross_entropy(&sentence_logits.t()?)?,
        word_image_to_text: diagonal_cross_entropy(&word_logits)?,
        word_text_to_image: diagonal_cross_entropy(&word_logits.t()?)?,
    })
}
