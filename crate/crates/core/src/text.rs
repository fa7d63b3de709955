//! Caption tokenization, the recurrent text encoder, and conditioning
//! augmentation.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor, D};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{check_finite, sigmoid, Init, Linear, ParamBuilder};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Bijective token/id map. Id 0 is padding, id 1 the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl Vocabulary {
    /// Builds a vocabulary from captions; tokens are ordered alphabetically
    /// after the two special entries.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(tokenize).collect();
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(words.into_iter().filter(|w| w != PAD_TOKEN && w != UNK_TOKEN))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is a bijection")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::input(format!(
                "vocabulary must start with `{PAD_TOKEN}` and `{UNK_TOKEN}`"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// One token per line; the line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn to_lines(&self) -> Vec<String> {
        self.tokens.clone()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes a caption, truncating at `max_len`. Returns the sequence and
    /// the number of out-of-vocabulary tokens mapped to `<unk>`. An empty
    /// caption becomes a single `<unk>`.
    pub fn encode(&self, caption: &str, max_len: usize) -> (TokenSequence, usize) {
        let mut unknown = 0;
        let mut ids: Vec<u32> = tokenize(caption)
            .iter()
            .take(max_len)
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unknown += 1;
                    UNK_ID
                })
            })
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        let seq = TokenSequence::new(ids, max_len).expect("length bounded by construction");
        (seq, unknown)
    }
}

/// Token ids padded to `T` with the true length recorded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    true_length: usize,
}

impl TokenSequence {
    /// `tokens` are the real tokens; padding up to `max_len` is added here.
    pub fn new(tokens: Vec<u32>, max_len: usize) -> Result<Self> {
        let true_length = tokens.len();
        if true_length == 0 || true_length > max_len {
            return Err(Error::input(format!(
                "caption length {true_length} outside 1..={max_len}"
            )));
        }
        let mut ids = tokens;
        ids.resize(max_len, PAD_ID);
        Ok(Self { ids, true_length })
    }

    /// Accepts an already padded id list, whose contents past `true_length`
    /// are ignored by the encoder.
    pub fn from_padded(ids: Vec<u32>, true_length: usize) -> Result<Self> {
        if true_length == 0 || true_length > ids.len() {
            return Err(Error::input(format!(
                "true length {true_length} outside 1..={}",
                ids.len()
            )));
        }
        Ok(Self { ids, true_length })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn real_tokens(&self) -> &[u32] {
        &self.ids[..self.true_length]
    }
}

/// A batch of equal-`T` token sequences as tensors.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `(B, T)` u32 ids.
    pub ids: Tensor,
    /// `(B, T)` u8, 1 on real tokens.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[TokenSequence]) -> Result<Self> {
        let t = seqs
            .first()
            .ok_or_else(|| Error::input("empty token batch"))?
            .max_len();
        if seqs.iter().any(|s| s.max_len() != t) {
            return Err(Error::input("token sequences differ in max length"));
        }
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.ids().iter().copied()).collect();
        let mask: Vec<u8> = seqs
            .iter()
            .flat_map(|s| (0..t).map(move |i| u8::from(i < s.true_length())))
            .collect();
        let b = seqs.len();
        Ok(Self {
            ids: Tensor::from_vec(ids, (b, t), &Device::Cpu)?,
            mask: Tensor::from_vec(mask, (b, t), &Device::Cpu)?,
            lengths: seqs.iter().map(TokenSequence::true_length).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids.dims()[1]
    }
}

/// Encoded caption batch.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// Word matrix `(B, N_w, T)`; columns past the true length are zero.
    pub words: Tensor,
    /// Sentence vectors `(B, N_w)`.
    pub sentence: Tensor,
    /// `(B, T)` u8 real-token mask.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TextFeatures {
    pub fn detach(&self) -> Self {
        Self {
            words: self.words.detach(),
            sentence: self.sentence.detach(),
            mask: self.mask.clone(),
            lengths: self.lengths.clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

/// Anything that maps token batches to word and sentence features.
pub trait TextEncoder {
    fn encode(&self, tokens: &TokenBatch) -> Result<TextFeatures>;
    fn word_dim(&self) -> usize;
}

#[derive(Debug, Clone)]
struct GruCell {
    input: Linear,
    hidden: Linear,
    size: usize,
}

impl GruCell {
    fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, size: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(&mut pb.pp("input"), in_dim, 3 * size)?,
            hidden: Linear::new(&mut pb.pp("hidden"), size, 3 * size)?,
            size,
        })
    }

    /// `x_proj` is the precomputed input projection `(B, 3H)`.
    fn step(&self, x_proj: &Tensor, h: &Tensor) -> Result<Tensor> {
        let hs = self.size;
        let h_proj = self.hidden.forward(h)?;
        let r = sigmoid(&(x_proj.narrow(1, 0, hs)? + h_proj.narrow(1, 0, hs)?)?)?;
        let z = sigmoid(&(x_proj.narrow(1, hs, hs)? + h_proj.narrow(1, hs, hs)?)?)?;
        let n = (x_proj.narrow(1, 2 * hs, hs)? + r.mul(&h_proj.narrow(1, 2 * hs, hs)?)?)?.tanh()?;
        // h' = n + z * (h - n)
        Ok((&n + z.mul(&(h - &n)?)?)?)
    }
}

/// Token embedding followed by a bidirectional GRU. Word features are the
/// concatenated forward/backward states; the sentence vector concatenates
/// the forward state after the last real token with the backward state at
/// the first token. Padding positions never touch the recurrent state.
#[derive(Debug, Clone)]
pub struct RecurrentTextEncoder {
    embedding: Tensor,
    forward_cell: GruCell,
    backward_cell: GruCell,
    vocab_size: usize,
    word_dim: usize,
}

impl RecurrentTextEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let hidden = cfg.word_dim / 2;
        Ok(Self {
            embedding: pb.param(
                "embedding",
                (vocab_size, cfg.embed_dim),
                Init::Uniform(0.1),
            )?,
            forward_cell: GruCell::new(&mut pb.pp("fwd"), cfg.embed_dim, hidden)?,
            backward_cell: GruCell::new(&mut pb.pp("bwd"), cfg.embed_dim, hidden)?,
            vocab_size,
            word_dim: cfg.word_dim,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

impl TextEncoder for RecurrentTextEncoder {
    fn word_dim(&self) -> usize {
        self.word_dim
    }

    fn encode(&self, tokens: &TokenBatch) -> Result<TextFeatures> {
        let (b, t) = tokens.ids.dims2()?;
        let max_id = tokens.ids.max_keepdim(1)?.max_keepdim(0)?.flatten_all()?.to_vec1::<u32>()?[0];
        if max_id as usize >= self.vocab_size {
            return Err(Error::input(format!(
                "token id {max_id} out of vocabulary range 0..{}",
                self.vocab_size
            )));
        }
        let dtype = self.embedding.dtype();
        let emb = self
            .embedding
            .index_select(&tokens.ids.flatten_all()?, 0)?
            .reshape((b, t, ()))?;
        let hs = self.word_dim / 2;
        let mask_cols: Vec<Tensor> = (0..t)
            .map(|i| tokens.mask.narrow(1, i, 1))
            .collect::<candle_core::Result<_>>()?;

        let run = |cell: &GruCell, order: &mut dyn Iterator<Item = usize>| -> Result<(Vec<Option<Tensor>>, Tensor)> {
            let x_proj = cell
                .input
                .forward(&emb.reshape((b * t, ()))?)?
                .reshape((b, t, 3 * hs))?;
            let mut h = Tensor::zeros((b, hs), dtype, &Device::Cpu)?;
            let mut outs = vec![None; t];
            for i in order {
                let candidate = cell.step(&x_proj.narrow(1, i, 1)?.squeeze(1)?, &h)?;
                let m = mask_cols[i].broadcast_as((b, hs))?;
                h = m.where_cond(&candidate, &h)?;
                outs[i] = Some(m.where_cond(&h, &h.zeros_like()?)?);
            }
            Ok((outs, h))
        };

        let (fwd, fwd_final) = run(&self.forward_cell, &mut (0..t))?;
        let (bwd, bwd_final) = run(&self.backward_cell, &mut (0..t).rev())?;
        let columns: Vec<Tensor> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| Tensor::cat(&[f.unwrap(), b.unwrap()], 1))
            .collect::<candle_core::Result<_>>()?;
        let words = Tensor::stack(&columns, 2)?;
        let sentence = Tensor::cat(&[fwd_final, bwd_final], 1)?;
        check_finite(&sentence, "text encoder")?;
        Ok(TextFeatures {
            words,
            sentence,
            mask: tokens.mask.clone(),
            lengths: tokens.lengths.clone(),
        })
    }
}

/// Output of conditioning augmentation.
#[derive(Debug, Clone)]
pub struct AugmentedCondition {
    /// `(B, N_s)`.
    pub mean: Tensor,
    pub log_variance: Tensor,
    /// `mean + exp(log_variance / 2) * noise`.
    pub sample: Tensor,
    pub noise: Tensor,
}

/// Fully connected estimate of the condition mean and log-variance.
#[derive(Debug, Clone)]
pub struct ConditionAugmenter {
    fc: Linear,
    cond_dim: usize,
}

impl ConditionAugmenter {
    pub fn new(pb: &mut ParamBuilder<'_>, sentence_dim: usize, cond_dim: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(&mut pb.pp("fc"), sentence_dim, 2 * cond_dim)?,
            cond_dim,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// `sentence`: `(B, S)`; `noise`: `(B, N_s)` standard-normal draws.
    pub fn forward(&self, sentence: &Tensor, noise: &Tensor) -> Result<AugmentedCondition> {
        check_finite(sentence, "condition augmentation input")?;
        let stats = self.fc.forward(sentence)?;
        let mean = stats.narrow(1, 0, self.cond_dim)?;
        let log_variance = stats.narrow(1, self.cond_dim, self.cond_dim)?;
        augment(&mean, &log_variance, noise)
    }
}

/// Reparameterized sample from given statistics.
pub fn augment(mean: &Tensor, log_variance: &Tensor, noise: &Tensor) -> Result<AugmentedCondition> {
    if mean.dims() != log_variance.dims() || mean.dims() != noise.dims() {
        return Err(Error::input(format!(
            "augmentation shapes differ: mean {:?}, log-variance {:?}, noise {:?}",
            mean.dims(),
            log_variance.dims(),
            noise.dims()
        )));
    }
    let std = log_variance.affine(0.5, 0.0)?.exp()?;
    let sample = (mean + std.mul(noise)?)?;
    Ok(AugmentedCondition {
        mean: mean.clone(),
        log_variance: log_variance.clone(),
        sample,
        noise: noise.clone(),
    })
}

/// KL divergence of `N(mean, diag(exp(log_variance)))` from `N(0, I)`.
pub fn ca_kl_loss(mean: &[f64], log_variance: &[f64]) -> Result<f64> {
    if mean.len() != log_variance.len() {
        return Err(Error::input(format!(
            "mean has {} entries, log-variance {}",
            mean.len(),
            log_variance.len()
        )));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(log_variance)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>())
}

/// Batched KL term: per-row divergence averaged over the batch. Returns a
/// scalar tensor.
pub fn ca_kl_loss_tensor(mean: &Tensor, log_variance: &Tensor) -> Result<Tensor> {
    if mean.dims() != log_variance.dims() {
        return Err(Error::input("mean and log-variance shapes differ"));
    }
    let terms = ((mean.sqr()? + log_variance.exp()?)? - log_variance)?.affine(1.0, -1.0)?;
    Ok(terms.sum(D::Minus1)?.mean_all()?.affine(0.5, 0.0)?)
}
