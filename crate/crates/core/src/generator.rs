//! Multi-stage generator: a noise-and-condition stage followed by
//! refinement stages that attend over words and double the resolution.

use candle_core::Tensor;

use crate::attention::{AttentionMode, VisaAttention};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{check_finite, glu, upsample2x, Conv2d, Linear, ParamBuilder};
use crate::text::{AugmentedCondition, ConditionAugmenter, TextFeatures};

/// Hidden features and image produced by one stage.
#[derive(Debug, Clone)]
pub struct StageBundle {
    pub stage: usize,
    /// `(B, gen_width, R, R)`.
    pub hidden: Tensor,
    /// `(B, 3, R, R)` in `[-1, 1]`.
    pub image: Tensor,
}

impl StageBundle {
    pub fn resolution(&self) -> usize {
        self.image.dims()[3]
    }
}

/// Nearest-neighbor 2x upsampling followed by a GLU-gated 3x3 convolution.
#[derive(Debug, Clone)]
struct UpBlock {
    conv: Conv2d,
}

impl UpBlock {
    fn new(pb: &mut ParamBuilder<'_>, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, in_ch, 2 * out_ch, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        glu(&self.conv.forward(&upsample2x(x)?)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder<'_>, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), ch, 2 * ch, 3, 1, 1)?,
            conv2: Conv2d::new(&mut pb.pp("conv2"), ch, ch, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&glu(&self.conv1.forward(x)?)?)?;
        Ok((x + y)?)
    }
}

/// 3x3 convolution to RGB with a `tanh` output.
#[derive(Debug, Clone)]
struct ImageHead {
    conv: Conv2d,
}

impl ImageHead {
    fn new(pb: &mut ParamBuilder<'_>, ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, ch, 3, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?.tanh()?)
    }
}

/// First stage: `[z, c]` through a fully connected layer to a 4x4 seed,
/// then upsampling blocks to the base resolution.
#[derive(Debug, Clone)]
pub struct InitialStage {
    fc: Linear,
    seed_channels: usize,
    ups: Vec<UpBlock>,
    head: ImageHead,
}

impl InitialStage {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let steps = cfg.scale_steps();
        let seed_channels = cfg.gen_width << steps;
        let fc = Linear::new(&mut pb.pp("fc"), cfg.z_dim + cfg.cond_dim, 2 * seed_channels * 16)?;
        let ups = (0..steps)
            .map(|i| {
                let in_ch = seed_channels >> i;
                UpBlock::new(&mut pb.pp(format!("up{i}")), in_ch, in_ch / 2)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            fc,
            seed_channels,
            ups,
            head: ImageHead::new(&mut pb.pp("to_image"), cfg.gen_width)?,
        })
    }

    pub fn forward(&self, z: &Tensor, condition: &Tensor) -> Result<StageBundle> {
        let (b, _) = z.dims2()?;
        if condition.dims()[0] != b {
            return Err(Error::input("noise and condition batch sizes differ"));
        }
        let input = Tensor::cat(&[z, condition], 1)?;
        let seed = glu(&self.fc.forward(&input)?)?;
        let mut hidden = seed.reshape((b, self.seed_channels, 4, 4))?;
        for up in &self.ups {
            hidden = up.forward(&hidden)?;
        }
        let image = self.head.forward(&hidden)?;
        check_finite(&image, "generator stage 0")?;
        Ok(StageBundle {
            stage: 0,
            hidden,
            image,
        })
    }
}

/// Refinement stage: word attention on the previous hidden grid, residual
/// blocks, then one upsampling block.
#[derive(Debug, Clone)]
pub struct RefineStage {
    pub attention: VisaAttention,
    residual: Vec<ResBlock>,
    up: UpBlock,
    head: ImageHead,
    stage: usize,
}

impl RefineStage {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, stage: usize) -> Result<Self> {
        let ch = cfg.gen_width;
        Ok(Self {
            attention: VisaAttention::new(&mut pb.pp("visa"), cfg.word_dim, ch)?,
            residual: (0..cfg.gen_residual_blocks)
                .map(|i| ResBlock::new(&mut pb.pp(format!("res{i}")), ch))
                .collect::<Result<_>>()?,
            up: UpBlock::new(&mut pb.pp("up"), ch, ch)?,
            head: ImageHead::new(&mut pb.pp("to_image"), ch)?,
            stage,
        })
    }

    pub fn forward(&self, prev: &Tensor, words: &Tensor, mask: Option<&Tensor>) -> Result<(StageBundle, Tensor)> {
        let (mut hidden, alpha) = self
            .attention
            .forward(prev, words, mask, AttentionMode::Learned)?;
        for block in &self.residual {
            hidden = block.forward(&hidden)?;
        }
        let hidden = self.up.forward(&hidden)?;
        let image = self.head.forward(&hidden)?;
        check_finite(&image, &format!("generator stage {}", self.stage))?;
        Ok((
            StageBundle {
                stage: self.stage,
                hidden,
                image,
            },
            alpha,
        ))
    }
}

/// Everything one generator pass produces.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub condition: AugmentedCondition,
    pub bundles: Vec<StageBundle>,
    /// Word attention map `(B, N, T)` used by each refinement stage.
    pub attention: Vec<Tensor>,
}

/// Conditioning augmentation plus all stages.
#[derive(Debug, Clone)]
pub struct Generator {
    pub augmenter: ConditionAugmenter,
    pub initial: InitialStage,
    pub refiners: Vec<RefineStage>,
    stages: usize,
}

impl Generator {
    /// Registers parameters under `pb` (conventionally `gen`).
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            augmenter: ConditionAugmenter::new(&mut pb.pp("ca"), cfg.sentence_dim(), cfg.cond_dim)?,
            initial: InitialStage::new(&mut pb.pp("stage0"), cfg)?,
            refiners: (1..cfg.stages)
                .map(|i| RefineStage::new(&mut pb.pp(format!("stage{i}")), cfg, i))
                .collect::<Result<_>>()?,
            stages: cfg.stages,
        })
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn g0_forward(&self, z: &Tensor, condition: &AugmentedCondition) -> Result<StageBundle> {
        self.initial.forward(z, &condition.sample)
    }

    /// Refines `prev` into the next stage. Calling it on the final stage is a
    /// contract violation.
    pub fn refine_forward(
        &self,
        prev: &StageBundle,
        words: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(StageBundle, Tensor)> {
        if prev.stage + 1 >= self.stages {
            return Err(Error::contract(format!(
                "stage {} is the last of {}; nothing to refine into",
                prev.stage, self.stages
            )));
        }
        self.refiners[prev.stage].forward(&prev.hidden, words, mask)
    }

    /// Full pass from encoded text. `z` is `(B, D_z)` and `noise` the
    /// `(B, N_s)` augmentation draw.
    pub fn forward(&self, text: &TextFeatures, z: &Tensor, noise: &Tensor) -> Result<GeneratorOutput> {
        let condition = self.augmenter.forward(&text.sentence, noise)?;
        let mut bundles = vec![self.g0_forward(z, &condition)?];
        let mut attention = Vec::with_capacity(self.stages - 1);
        for _ in 1..self.stages {
            let (next, alpha) =
                self.refine_forward(bundles.last().unwrap(), &text.words, Some(&text.mask))?;
            bundles.push(next);
            attention.push(alpha);
        }
        Ok(GeneratorOutput {
            condition,
            bundles,
            attention,
        })
    }
}
