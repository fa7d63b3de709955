//! Shared inputs for the benchmarks.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textped_core::metrics::KeypointSet;
use textped_core::nn::randn;
use textped_core::{Model, ModelConfig, TokenSequence, Vocabulary};

pub const CAPTION: &str = "a person with a red head, a blue torso, green legs and black feet";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(seed: u64, shape: &[usize]) -> Tensor {
    randn(&mut rng(seed), shape, DType::F32).expect("valid shape")
}

/// Model and `batch` tokenized copies of [`CAPTION`].
pub fn model(cfg: ModelConfig, batch: usize) -> (Model, Vec<TokenSequence>) {
    let model = Model::new(cfg, Vocabulary::build([CAPTION]), 0).expect("valid config");
    let (seqs, _) = model.tokenize(&vec![CAPTION.to_string(); batch]);
    (model, seqs)
}

pub fn keypoints(n: usize, seed: u64) -> Vec<KeypointSet> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut s = KeypointSet::empty();
            for p in s.parts.iter_mut() {
                if r.random_bool(0.7) {
                    *p = Some((r.random_range(0.0..256.0), r.random_range(0.0..256.0)));
                }
            }
            s
        })
        .collect()
}
