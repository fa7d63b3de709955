//! Parameter storage and the handful of layers the models are built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path names. The path
//! prefix doubles as the parameter *family* used by the optimizer and the
//! ablation switches (`gen.`, `disc0.part.head.`, `disc1.global.sca.`, ...).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every trainable tensor of a model, addressed by path.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Parameters whose path starts with `prefix`.
    pub fn family<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.vars
            .iter()
            .filter(move |(name, _)| name.starts_with(prefix))
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites the named parameter with `value` (shape must match).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::input(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::input(format!(
                "shape mismatch for `{name}`: have {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn insert(&mut self, name: String, init: Init, shape: Shape) -> Result<Tensor> {
        if let Some(existing) = self.vars.get(&name) {
            return Err(Error::input(format!(
                "parameter `{name}` registered twice (shape {:?})",
                existing.dims()
            )));
        }
        let n = shape.elem_count();
        let mut rng = self.rng_for(&name);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x * std
                })
                .collect(),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Scoped handle for registering parameters under a path prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.insert(full, init, shape.into())
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Fully connected map `y = W x + b`, weight stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.param("weight", (out_dim, in_dim), Init::Uniform(bound))?,
            bias: Some(pb.param("bias", out_dim, Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.param("weight", (out_dim, in_dim), Init::Uniform(bound))?,
            bias: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x`: `(B, in)` → `(B, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    /// Column-wise application, a 1x1 convolution over flattened regions.
    /// `x`: `(B, in, N)` → `(B, out, N)`.
    pub fn forward_columns(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.weight.broadcast_matmul(x)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.unsqueeze(1)?)?,
            None => y,
        })
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.param(
                "weight",
                (out_ch, in_ch, kernel, kernel),
                Init::Uniform(bound),
            )?,
            bias: pb.param("bias", out_ch, Init::Uniform(bound))?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Lowered to a matrix product over gathered patches, which keeps both
    /// the forward and backward passes on the matmul kernel.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, wc, k, _) = self.weight.dims4()?;
        if c != wc {
            return Err(Error::input(format!("conv expects {wc} input channels, got {c}")));
        }
        let (p, s) = (self.padding, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::input(format!("{h}x{w} input is smaller than the {k}x{k} kernel")));
        }
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let xp = if p > 0 {
            x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?
        } else {
            x.clone()
        };
        let rows = strided_index(ho, s, x.device())?;
        let cols = strided_index(wo, s, x.device())?;
        let mut patches = Vec::with_capacity(k * k);
        for ki in 0..k {
            let band = xp.narrow(2, ki, s * (ho - 1) + 1)?;
            let band = match &rows {
                Some(r) => band.contiguous()?.index_select(r, 2)?,
                None => band,
            };
            for kj in 0..k {
                let patch = band.narrow(3, kj, s * (wo - 1) + 1)?;
                patches.push(match &cols {
                    Some(cidx) => patch.contiguous()?.index_select(cidx, 3)?,
                    None => patch,
                });
            }
        }
        let columns = Tensor::stack(&patches, 2)?.reshape((b, c * k * k, ho * wo))?;
        let y = self
            .weight
            .reshape((o, c * k * k))?
            .broadcast_matmul(&columns)?
            .broadcast_add(&self.bias.reshape((1, o, 1))?)?;
        Ok(y.reshape((b, o, ho, wo))?)
    }
}

fn strided_index(n: usize, stride: usize, device: &Device) -> Result<Option<Tensor>> {
    if stride == 1 {
        return Ok(None);
    }
    let idx: Vec<u32> = (0..n).map(|i| (i * stride) as u32).collect();
    Ok(Some(Tensor::from_vec(idx, n, device)?))
}

/// Nearest-neighbor 2x upsampling of `(B, C, H, W)` as a broadcast, whose
/// gradient is a plain sum.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Logistic function through `tanh`, which stays finite in both tails.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Gated linear unit over the channel axis: first half gated by the second.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if c % 2 != 0 {
        return Err(Error::input(format!("glu needs an even channel count, got {c}")));
    }
    let a = x.narrow(1, 0, c / 2)?;
    let b = x.narrow(1, c / 2, c / 2)?;
    Ok(a.mul(&sigmoid(&b)?)?)
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Softmax over the last axis restricted to positions where `mask` is 1.
/// `mask` must broadcast against `x` and hold at least one 1 per row.
pub fn masked_softmax_last(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.broadcast_as(x.shape())?;
    let fill = Tensor::full(-1e30f32, x.shape(), x.device())?.to_dtype(x.dtype())?;
    let filled = mask.where_cond(x, &fill)?;
    softmax_last(&filled)
}

/// Returns an error tagged with `stage` if `t` holds NaN or infinities.
pub fn check_finite(t: &Tensor, stage: &str) -> Result<()> {
    let total = t
        .flatten_all()?
        .to_dtype(DType::F64)?
        .abs()?
        .sum_all()?
        .to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(stage, "non-finite activations"))
    }
}

/// Flattens `(B, C, H, W)` to `(B, C, H*W)`.
pub fn flatten_regions(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?)
}

/// Standard-normal tensor drawn from a caller-owned generator, so noise is
/// reproducible from a seed.
pub fn randn(rng: &mut impl Rng, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::new(3, DType::F64);
        let mut b = ParamStore::new(3, DType::F64);
        a.root().pp("x").param("w", (2, 3), Init::Normal(1.0)).unwrap();
        a.root().pp("y").param("w", (4,), Init::Normal(1.0)).unwrap();
        b.root().pp("y").param("w", (4,), Init::Normal(1.0)).unwrap();
        b.root().pp("x").param("w", (2, 3), Init::Normal(1.0)).unwrap();
        for name in ["x.w", "y.w"] {
            let va = to_vec_f64(a.get(name).unwrap()).unwrap();
            let vb = to_vec_f64(b.get(name).unwrap()).unwrap();
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut s = ParamStore::new(0, DType::F32);
        s.root().param("w", 3, Init::Zeros).unwrap();
        assert!(s.root().param("w", 3, Init::Zeros).is_err());
    }

    #[test]
    fn masked_softmax_ignores_masked_columns() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1.0f64, 2.0, 50.0]], &dev).unwrap();
        let mask = Tensor::new(&[[1u8, 1, 0]], &dev).unwrap();
        let p = masked_softmax_last(&x, &mask).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0][2], 0.0);
        let e = 1f64.exp() + 2f64.exp();
        assert!((p[0][0] - 1f64.exp() / e).abs() < 1e-15);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, stride, pad, side) in [(3, 1, 1, 6), (4, 2, 1, 8), (1, 1, 0, 3), (3, 2, 0, 7)] {
            let mut store = ParamStore::new(1, DType::F64);
            let conv = Conv2d::new(&mut store.root(), 3, 5, k, stride, pad).unwrap();
            let x = randn(&mut rng, (2, 3, side, side), DType::F64).unwrap();
            let ours = conv.forward(&x).unwrap();
            let reference = x
                .conv2d(&conv.weight, pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(scalar_f64(&diff).unwrap() < 1e-12);
        }
    }

    #[test]
    fn upsample_matches_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, (2, 3, 4, 5), DType::F64).unwrap();
        let ours = to_vec_f64(&upsample2x(&x).unwrap()).unwrap();
        let reference = to_vec_f64(&x.upsample_nearest2d(8, 10).unwrap()).unwrap();
        assert_eq!(ours, reference);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-1e4f32, 0.0, 1e4], &dev).unwrap();
        let v = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
    }
}
