//! Independent loop implementations and fixtures shared by the integration
//! tests. The oracles themselves never call into the tensor code paths they
//! check.
#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textped_core::config::Precision;
use textped_core::data::{make_synthetic_dataset, SyntheticSpec, TrainingSet};
use textped_core::metrics::{KeypointSet, NUM_KEYPOINTS};
use textped_core::attention::{AttentionMode, ScaAttention, VisaAttention};
use textped_core::nn::{to_vec_f64, Linear, ParamStore};
use textped_core::{DatasetManifest, ModelConfig, Profile, TrainConfig, TrainState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    to_vec_f64(t).unwrap()
}

/// Rows of a 2-D tensor.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.dims2().unwrap();
    let v = values(t);
    (0..r).map(|i| v[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    let r = m.len();
    let c = m[0].len();
    Tensor::from_vec(m.concat(), (r, c), &candle_core::Device::Cpu).unwrap()
}

/// `W x + b` with `W` given as rows.
pub fn affine(w: &[Vec<f64>], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(o, row)| {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            acc
        })
        .collect()
}

pub fn linear_parts(l: &Linear) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
    (rows(&l.weight), l.bias.as_ref().map(values))
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Word attention for one sample. `rho`: `C x N`, `words`: `D x T`,
/// `p`: `C x D`. Returns the `C x N` output and the `N x T` weights;
/// masked words get weight zero.
pub fn visa_oracle(
    rho: &[Vec<f64>],
    words: &[Vec<f64>],
    p: &[Vec<f64>],
    mask: &[bool],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = rho.len();
    let n = rho[0].len();
    let t = words[0].len();
    let d = words.len();
    // projected word features f_t = P w_t
    let mut f = vec![vec![0.0; t]; c];
    for ci in 0..c {
        for ti in 0..t {
            for di in 0..d {
                f[ci][ti] += p[ci][di] * words[di][ti];
            }
        }
    }
    let mut alpha = vec![vec![0.0; t]; n];
    let mut out = rho.to_vec();
    for u in 0..n {
        let mut scores = Vec::new();
        let mut idx = Vec::new();
        for ti in 0..t {
            if !mask[ti] {
                continue;
            }
            let mut s = 0.0;
            for ci in 0..c {
                s += rho[ci][u] * f[ci][ti];
            }
            scores.push(s);
            idx.push(ti);
        }
        for (k, w) in softmax(&scores).into_iter().enumerate() {
            alpha[u][idx[k]] = w;
        }
        for ci in 0..c {
            for ti in 0..t {
                out[ci][u] += alpha[u][ti] * f[ci][ti];
            }
        }
    }
    (out, alpha)
}

pub struct ScaWeights {
    pub key: (Vec<Vec<f64>>, Option<Vec<f64>>),
    pub query: (Vec<Vec<f64>>, Option<Vec<f64>>),
    pub value: (Vec<Vec<f64>>, Option<Vec<f64>>),
    pub output: (Vec<Vec<f64>>, Option<Vec<f64>>),
    pub gamma: f64,
}

/// Self-cross attention for one sample. Returns the `C x N` output and the
/// `N x N` map indexed `[target][source]`.
pub fn sca_oracle(rho: &[Vec<f64>], s: &[f64], w: &ScaWeights) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = rho.len();
    let n = rho[0].len();
    let joint: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            let mut j: Vec<f64> = (0..c).map(|ci| rho[ci][u]).collect();
            j.extend_from_slice(s);
            j
        })
        .collect();
    let apply = |l: &(Vec<Vec<f64>>, Option<Vec<f64>>), x: &[f64]| affine(&l.0, l.1.as_deref(), x);
    let k: Vec<Vec<f64>> = joint.iter().map(|j| apply(&w.key, j)).collect();
    let q: Vec<Vec<f64>> = joint.iter().map(|j| apply(&w.query, j)).collect();
    let v: Vec<Vec<f64>> = joint.iter().map(|j| apply(&w.value, j)).collect();
    let mut beta = vec![vec![0.0; n]; n];
    let mut out = rho.to_vec();
    for tv in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|u| k[u].iter().zip(&q[tv]).map(|(a, b)| a * b).sum())
            .collect();
        beta[tv] = softmax(&scores);
        let mut att = vec![0.0; v[0].len()];
        for u in 0..n {
            for (a, vu) in att.iter_mut().zip(&v[u]) {
                *a += beta[tv][u] * vu;
            }
        }
        let o = apply(&w.output, &att);
        for ci in 0..c {
            out[ci][tv] += w.gamma * o[ci];
        }
    }
    (out, beta)
}

pub fn grid(m: &[Vec<f64>], h: usize, w: usize) -> Tensor {
    to_tensor(m).reshape((1, m.len(), h, w)).unwrap()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[f64]) -> f64 {
    a.concat()
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst deviation of word attention from [`visa_oracle`] on a random
/// instance with at most 8 regions and 5 words.
pub fn check_visa(seed: u64, masked: bool) -> f64 {
    let mut r = rng(seed);
    let (c, d) = (r.random_range(1..6), r.random_range(1..6));
    let (h, w) = (r.random_range(1..3), r.random_range(1..5));
    let t = r.random_range(1..6);
    let mut store = ParamStore::new(seed, DType::F64);
    let visa = VisaAttention::new(&mut store.root().pp("v"), d, c).unwrap();
    let rho = random_matrix(&mut r, c, h * w);
    let words = random_matrix(&mut r, d, t);
    let mut mask: Vec<bool> = (0..t).map(|_| !masked || r.random_bool(0.6)).collect();
    mask[0] = true;
    let mask_t = Tensor::from_vec(
        mask.iter().map(|&m| u8::from(m)).collect::<Vec<_>>(),
        (1, t),
        &Device::Cpu,
    )
    .unwrap();
    let (out, alpha) = visa
        .forward(
            &grid(&rho, h, w),
            &to_tensor(&words).unsqueeze(0).unwrap(),
            Some(&mask_t),
            AttentionMode::Learned,
        )
        .unwrap();
    let (eo, ea) = visa_oracle(&rho, &words, &rows(&visa.projection.weight), &mask);
    max_abs_diff(&eo, &values(&out)).max(max_abs_diff(&ea, &values(&alpha)))
}

pub fn sca_weights(sca: &ScaAttention) -> ScaWeights {
    ScaWeights {
        key: linear_parts(&sca.key),
        query: linear_parts(&sca.query),
        value: linear_parts(&sca.value),
        output: linear_parts(&sca.output),
        gamma: values(&sca.gamma)[0],
    }
}

/// Worst deviation of self-cross attention from [`sca_oracle`].
pub fn check_sca(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = 2 * r.random_range(1..5);
    let sd = r.random_range(1..5);
    let (h, w) = (r.random_range(1..3), r.random_range(1..5));
    let mut store = ParamStore::new(seed, DType::F64);
    let sca = ScaAttention::new(&mut store.root().pp("s"), c, sd).unwrap();
    store
        .assign("s.gamma", &Tensor::new(&[r.random_range(-2.0..2.0f64)], &Device::Cpu).unwrap())
        .unwrap();
    let rho = random_matrix(&mut r, c, h * w);
    let s = random_matrix(&mut r, 1, sd);
    let (out, beta) = sca.forward(&grid(&rho, h, w), &to_tensor(&s)).unwrap();
    let (eo, eb) = sca_oracle(&rho, &s[0], &sca_weights(&sca));
    max_abs_diff(&eo, &values(&out)).max(max_abs_diff(&eb, &values(&beta)))
}

pub fn pose_score_oracle(sets: &[KeypointSet]) -> f64 {
    let mut total = 0.0;
    for s in sets {
        let mut count = 0;
        for p in &s.parts {
            if p.is_some() {
                count += 1;
            }
        }
        total += count as f64 / 18.0;
    }
    total / sets.len() as f64
}

pub fn pose_variance_oracle(sets: &[KeypointSet], b_max: f64) -> f64 {
    let mut sum = 0.0;
    for part in 0..NUM_KEYPOINTS {
        for axis in 0..2 {
            let mut xs = Vec::new();
            for s in sets {
                if let Some((x, y)) = s.parts[part] {
                    xs.push(if axis == 0 { x } else { y } / b_max);
                }
            }
            if xs.len() >= 2 {
                let mut mean = 0.0;
                for x in &xs {
                    mean += x;
                }
                mean /= xs.len() as f64;
                let mut var = 0.0;
                for x in &xs {
                    var += (x - mean) * (x - mean);
                }
                sum += var / xs.len() as f64;
            }
        }
    }
    (sum / 36.0).exp()
}

/// Single-split inception score by explicit loops.
pub fn inception_oracle(p: &[Vec<f64>]) -> f64 {
    let c = p[0].len();
    let mut marginal = vec![0.0; c];
    for row in p {
        for j in 0..c {
            marginal[j] += row[j] / p.len() as f64;
        }
    }
    let mut kl = 0.0;
    for row in p {
        for j in 0..c {
            if row[j] > 0.0 {
                kl += row[j] * (row[j] / marginal[j]).ln();
            }
        }
    }
    (kl / p.len() as f64).exp()
}

pub fn random_keypoints(rng: &mut impl Rng, detect_prob: f64, size: f64) -> KeypointSet {
    let mut s = KeypointSet::empty();
    for p in s.parts.iter_mut() {
        if rng.random_bool(detect_prob) {
            *p = Some((rng.random_range(0.0..size), rng.random_range(0.0..size)));
        }
    }
    s
}

/// Double-precision tiny model dimensions.
pub fn tiny_f64() -> ModelConfig {
    ModelConfig {
        precision: Precision::F64,
        ..ModelConfig::tiny()
    }
}

/// Synthetic dataset sized for the tiny profile, written under `dir`.
pub fn synthetic(dir: &Path, count: usize, seed: u64) -> DatasetManifest {
    let res = ModelConfig::tiny().final_resolution();
    make_synthetic_dataset(&SyntheticSpec::new(count, res), seed, dir).unwrap()
}

/// A tiny training configuration with a short pre-training budget.
pub fn tiny_config(batch_size: usize, pretrain_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size,
        pretrain_steps,
        ..TrainConfig::for_profile(Profile::Tiny)
    }
}

pub fn setup(dir: &Path, count: usize, cfg: TrainConfig) -> (TrainState, TrainingSet) {
    let manifest = synthetic(dir, count, 11);
    let vocab = manifest.vocabulary();
    let data = TrainingSet::load(&manifest, &vocab, &cfg.model).unwrap();
    (TrainState::new(cfg, vocab).unwrap(), data)
}

/// Runs pre-training to completion.
pub fn pretrain(state: &mut TrainState, data: &TrainingSet) {
    while !state.pretraining_done() {
        let batch = state.next_batch(data).unwrap();
        state.pretrain_step(&batch).unwrap();
    }
}

/// Snapshot of every parameter by name.
pub fn snapshot(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .map(|(n, v)| (n.clone(), values(v.as_tensor())))
        .collect()
}

/// Names whose values differ between two snapshots.
pub fn changed(a: &[(String, Vec<f64>)], b: &[(String, Vec<f64>)]) -> Vec<String> {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.clone())
        .collect()
}

/// Central finite differences of `loss` against backprop for `samples`
/// entries of each named parameter. Returns the worst relative error.
pub fn gradient_check(
    store: &ParamStore,
    names: &[String],
    samples: usize,
    h: f64,
    loss: impl Fn() -> Tensor,
) -> f64 {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut worst: f64 = 0.0;
    let mut pick = rng(99);
    for name in names {
        let var: &Var = store.get(name).unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = values(var.as_tensor());
        let shape = var.shape().clone();
        let count = base.len();
        for _ in 0..samples.min(count) {
            let i = pick.random_range(0..count);
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &candle_core::Device::Cpu).unwrap().to_dtype(DType::F64).unwrap())
                    .unwrap();
                values(&loss())[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &candle_core::Device::Cpu).unwrap())
                .unwrap();
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}
