//! The complete model: text encoder, matching image encoder, generator and
//! per-stage discriminators sharing one parameter store.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::damsm::ImageMatchEncoder;
use crate::discriminator::StageDiscriminators;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorOutput};
use crate::nn::{randn, ParamStore};
use crate::text::{RecurrentTextEncoder, TextEncoder, TextFeatures, TokenBatch, TokenSequence, Vocabulary};

/// Parameter path prefixes.
pub const TEXT_PREFIX: &str = "text.";
pub const MATCH_PREFIX: &str = "damsm.";
pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub text: RecurrentTextEncoder,
    pub matcher: ImageMatchEncoder,
    pub generator: Generator,
    pub discriminators: Vec<StageDiscriminators>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, config.dtype());
        let mut root = store.root();
        let text = RecurrentTextEncoder::new(&mut root.pp("text"), &config, vocab.len())?;
        let matcher = ImageMatchEncoder::new(&mut root.pp("damsm"), &config)?;
        let generator = Generator::new(&mut root.pp("gen"), &config)?;
        let discriminators = (0..config.stages)
            .map(|i| StageDiscriminators::new(&mut root.pp(format!("disc{i}")), &config, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            vocab,
            store,
            text,
            matcher,
            generator,
            discriminators,
        })
    }

    /// Names of all parameters whose path starts with `prefix`.
    pub fn names(&self, prefix: &str) -> Vec<String> {
        self.store.family(prefix).map(|(n, _)| n.clone()).collect()
    }

    pub fn encode_text(&self, tokens: &TokenBatch) -> Result<TextFeatures> {
        self.text.encode(tokens)
    }

    /// Tokenizes captions; returns the sequences and the total count of
    /// out-of-vocabulary tokens.
    pub fn tokenize(&self, captions: &[String]) -> (Vec<TokenSequence>, usize) {
        let mut unknown = 0;
        let seqs = captions
            .iter()
            .map(|c| {
                let (s, u) = self.vocab.encode(c, self.config.max_len);
                unknown += u;
                s
            })
            .collect();
        (seqs, unknown)
    }

    /// Noise for a batch of `b` rows drawn from `seed`: the latent `z` and
    /// the augmentation draw.
    pub fn noise(&self, b: usize, seed: u64) -> Result<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dtype = self.config.dtype();
        let z = randn(&mut rng, (b, self.config.z_dim), dtype)?;
        let eps = randn(&mut rng, (b, self.config.cond_dim), dtype)?;
        Ok((z, eps))
    }

    /// Generates every stage for the given captions; row `i` uses noise
    /// seeded by `seeds[i]`.
    pub fn generate(&self, seqs: &[TokenSequence], seeds: &[u64]) -> Result<GeneratorOutput> {
        if seqs.len() != seeds.len() || seqs.is_empty() {
            return Err(Error::input("need one noise seed per caption"));
        }
        let text = self.encode_text(&TokenBatch::new(seqs)?)?.detach();
        let mut zs = Vec::with_capacity(seeds.len());
        let mut eps = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let (z, e) = self.noise(1, s)?;
            zs.push(z);
            eps.push(e);
        }
        self.generator
            .forward(&text, &Tensor::cat(&zs, 0)?, &Tensor::cat(&eps, 0)?)
    }
}
