//! Word-region attention (VISA) and sentence-aware self-cross attention
//! (SCA).
//!
//! Region grids are `(B, C, H, W)` tensors whose `N = H * W` spatial cells are
//! the region vectors. Word matrices are `(B, N_w, T)`.

use std::io::{Read, Write};

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{flatten_regions, masked_softmax_last, softmax_last, Init, Linear, ParamBuilder};

/// How the word weights of a [`VisaAttention`] are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Softmax of the bilinear region-word scores.
    Learned,
    /// Every real word weighted equally; used when word attention is ablated.
    Uniform,
}

/// Words-to-regions attention: for region `u` and word `t` the score is
/// `rho_u . (P w_t)`, weights are a softmax over words, and the output is
/// `rho_u + sum_t alpha_ut (P w_t)`.
#[derive(Debug, Clone)]
pub struct VisaAttention {
    /// `P: N_w -> N_r`, no bias.
    pub projection: Linear,
}

impl VisaAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, word_dim: usize, region_dim: usize) -> Result<Self> {
        Ok(Self {
            projection: Linear::no_bias(&mut pb.pp("projection"), word_dim, region_dim)?,
        })
    }

    pub fn region_dim(&self) -> usize {
        self.projection.out_dim()
    }

    /// Returns the attended grid (same shape as `regions`) and the
    /// `(B, N, T)` attention map. `mask` is `(B, T)` u8 over real words;
    /// without it all `T` columns take part.
    pub fn forward(
        &self,
        regions: &Tensor,
        words: &Tensor,
        mask: Option<&Tensor>,
        mode: AttentionMode,
    ) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = regions.dims4()?;
        let (wb, wd, t) = words.dims3()?;
        if wb != b {
            return Err(Error::input(format!("batch mismatch: regions {b}, words {wb}")));
        }
        if wd != self.projection.in_dim() || c != self.projection.out_dim() {
            return Err(Error::input(format!(
                "attention expects words of width {} and regions of width {}, got {wd} and {c}",
                self.projection.in_dim(),
                self.projection.out_dim()
            )));
        }
        if let Some(m) = mask {
            if m.dims() != [b, t] {
                return Err(Error::input(format!("word mask shape {:?} != [{b}, {t}]", m.dims())));
            }
        }
        let rho = flatten_regions(regions)?; // (B, C, N)
        let projected = self.projection.forward_columns(words)?; // (B, C, T)
        let alpha = match mode {
            AttentionMode::Learned => {
                let scores = rho.transpose(1, 2)?.matmul(&projected)?; // (B, N, T)
                match mask {
                    Some(m) => masked_softmax_last(&scores, &m.unsqueeze(1)?)?,
                    None => softmax_last(&scores)?,
                }
            }
            AttentionMode::Uniform => {
                let weights = match mask {
                    Some(m) => m.to_dtype(rho.dtype())?,
                    None => Tensor::ones((b, t), rho.dtype(), rho.device())?,
                };
                let weights = weights.broadcast_div(&weights.sum_keepdim(1)?)?;
                weights.unsqueeze(1)?.broadcast_as((b, h * w, t))?.contiguous()?
            }
        };
        let context = projected.matmul(&alpha.transpose(1, 2)?)?; // (B, C, N)
        let out = (rho + context)?.reshape((b, c, h, w))?;
        Ok((out, alpha))
    }
}

/// Self-attention over regions whose key, query and value maps also read
/// the sentence vector: `c_uv = K([rho_u, s]) . Q([rho_v, s])`,
/// `beta_vu = softmax_u(c_uv)`, `o_v = W_z(sum_u beta_vu V([rho_u, s]))`,
/// output `rho + gamma * o`.
#[derive(Debug, Clone)]
pub struct ScaAttention {
    pub key: Linear,
    pub query: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Residual gate, shape `(1,)`, initialized to zero.
    pub gamma: Tensor,
    region_dim: usize,
    sentence_dim: usize,
}

impl ScaAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, region_dim: usize, sentence_dim: usize) -> Result<Self> {
        let joint = region_dim + sentence_dim;
        let inner = (region_dim / 8).max(1);
        Ok(Self {
            key: Linear::new(&mut pb.pp("key"), joint, inner)?,
            query: Linear::new(&mut pb.pp("query"), joint, inner)?,
            value: Linear::new(&mut pb.pp("value"), joint, region_dim / 2)?,
            output: Linear::new(&mut pb.pp("output"), region_dim / 2, region_dim)?,
            gamma: pb.param("gamma", 1, Init::Zeros)?,
            region_dim,
            sentence_dim,
        })
    }

    /// Returns the gated grid and the `(B, N_target, N_source)` map `beta`.
    pub fn forward(&self, regions: &Tensor, sentence: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = regions.dims4()?;
        let (sb, sd) = sentence.dims2()?;
        if c != self.region_dim || sd != self.sentence_dim || sb != b {
            return Err(Error::input(format!(
                "self-cross attention expects regions (B, {}, H, W) and sentence (B, {}); got {:?} and {:?}",
                self.region_dim,
                self.sentence_dim,
                regions.dims(),
                sentence.dims()
            )));
        }
        let n = h * w;
        let rho = flatten_regions(regions)?;
        let s = sentence.unsqueeze(2)?.broadcast_as((b, sd, n))?;
        let joint = Tensor::cat(&[&rho, &s], 1)?; // (B, C+S, N)
        let k = self.key.forward_columns(&joint)?; // (B, d, N_u)
        let q = self.query.forward_columns(&joint)?; // (B, d, N_v)
        // scores indexed [v][u] so the softmax runs over sources u
        let scores = q.transpose(1, 2)?.matmul(&k)?;
        let beta = softmax_last(&scores)?;
        let v = self.value.forward_columns(&joint)?; // (B, C/2, N_u)
        let attended = v.matmul(&beta.transpose(1, 2)?)?; // (B, C/2, N_v)
        let o = self.output.forward_columns(&attended)?;
        let out = rho.broadcast_add(&o.broadcast_mul(&self.gamma)?)?;
        Ok((out.reshape((b, c, h, w))?, beta))
    }
}

/// A single attention map (`rows x cols`) in the inspect dump format:
/// 4-byte magic `ATTN`, little-endian `u32` rows and cols, then row-major
/// little-endian `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlob {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

const BLOB_MAGIC: &[u8; 4] = b"ATTN";

impl AttentionBlob {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged attention rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.iter().flatten().map(|&v| v as f32).collect(),
        })
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(BLOB_MAGIC)?;
        out.write_all(&(self.rows as u32).to_le_bytes())?;
        out.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut header = [0u8; 12];
        input.read_exact(&mut header)?;
        if &header[..4] != BLOB_MAGIC {
            return Err(Error::input("not an attention blob"));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut raw = vec![0u8; rows * cols * 4];
        input.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { rows, cols, values })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Sums each row of a `(.., N, T)` map; used to verify row-stochasticity.
pub fn row_sums(map: &Tensor) -> Result<Vec<f64>> {
    Ok(crate::nn::to_vec_f64(&map.sum(D::Minus1)?)?)
}
