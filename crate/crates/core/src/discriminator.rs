//! Per-stage discriminators: a shared fine encoder feeding four part
//! discriminators with word attention, and a global discriminator with
//! self-cross attention and unconditional/conditional heads.

use candle_core::{Tensor, D};

use crate::attention::{AttentionMode, ScaAttention, VisaAttention};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{flatten_regions, leaky_relu, sigmoid, Conv2d, Linear, ParamBuilder};
use crate::text::TextFeatures;

/// Body bands, top to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BodyPart {
    Head,
    Torso,
    Legs,
    Feet,
}

impl BodyPart {
    pub const ALL: [BodyPart; 4] = [BodyPart::Head, BodyPart::Torso, BodyPart::Legs, BodyPart::Feet];

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Torso => "torso",
            BodyPart::Legs => "legs",
            BodyPart::Feet => "feet",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Strided convolution stack mapping an image to a region grid.
#[derive(Debug, Clone)]
pub struct RegionEncoder {
    downs: Vec<Conv2d>,
    project: Conv2d,
    resolution: usize,
}

impl RegionEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, stage: usize) -> Result<Self> {
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
            project: Conv2d::new(&mut pb.pp("project"), in_ch, cfg.region_dim, 3, 1, 1)?,
            resolution: cfg.resolution(stage),
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `image`: `(B, 3, R, R)` at this encoder's stage resolution.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::input(format!(
                "discriminator expects (B, 3, {r}, {r}) images, got {:?}",
                image.dims(),
                r = self.resolution
            )));
        }
        let mut x = image.clone();
        for conv in &self.downs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        self.project.forward(&x)
    }
}

/// Four equal horizontal bands of a region grid.
#[derive(Debug, Clone)]
pub struct PartSplit {
    /// Indexed by [`BodyPart::index`]; each `(B, C, H/4, W)`.
    pub parts: [Tensor; 4],
}

impl PartSplit {
    pub fn part(&self, part: BodyPart) -> &Tensor {
        &self.parts[part.index()]
    }

    /// Concatenates the bands back into the full grid.
    pub fn reassemble(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&self.parts, 2)?)
    }
}

/// Splits `(B, C, H, W)` into head/torso/legs/feet bands of `H/4` rows.
pub fn split_parts(regions: &Tensor) -> Result<PartSplit> {
    let (_, _, h, _) = regions.dims4()?;
    if h % 4 != 0 || h == 0 {
        return Err(Error::input(format!(
            "region grid height {h} is not divisible into four parts"
        )));
    }
    let band = h / 4;
    let part = |i: usize| regions.narrow(2, i * band, band);
    Ok(PartSplit {
        parts: [part(0)?, part(1)?, part(2)?, part(3)?],
    })
}

/// Word-attending scorer for one body part.
#[derive(Debug, Clone)]
pub struct PartDiscriminator {
    pub attention: VisaAttention,
    pub head: Linear,
}

impl PartDiscriminator {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            attention: VisaAttention::new(&mut pb.pp("visa"), cfg.word_dim, cfg.region_dim)?,
            head: Linear::new(&mut pb.pp("head"), cfg.region_dim, 1)?,
        })
    }

    /// Attends the band over words, mean-pools regions and applies a
    /// logistic head. Returns `(B,)` probabilities.
    pub fn score(
        &self,
        part: &Tensor,
        words: &Tensor,
        mask: Option<&Tensor>,
        mode: AttentionMode,
    ) -> Result<Tensor> {
        let (attended, _) = self.attention.forward(part, words, mask, mode)?;
        let pooled = flatten_regions(&attended)?.mean(D::Minus1)?;
        Ok(sigmoid(&self.head.forward(&pooled)?.squeeze(1)?)?)
    }
}

/// Part probabilities, each `(B,)`, indexed by [`BodyPart::index`].
#[derive(Debug, Clone)]
pub struct PartScores {
    pub parts: [Tensor; 4],
}

/// Global discriminator probabilities, each `(B,)`.
#[derive(Debug, Clone)]
pub struct GlobalScores {
    pub unconditional: Tensor,
    pub conditional: Tensor,
}

/// Global encoder, self-cross attention and two logistic heads.
///
/// The unconditional head reads the attention output computed with a zero
/// sentence, so it cannot see the caption; the conditional head reads the
/// attention output for the real sentence concatenated with the sentence.
#[derive(Debug, Clone)]
pub struct GlobalDiscriminator {
    pub encoder: RegionEncoder,
    pub attention: ScaAttention,
    pub unconditional_head: Linear,
    pub conditional_head: Linear,
}

impl GlobalDiscriminator {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, stage: usize) -> Result<Self> {
        Ok(Self {
            encoder: RegionEncoder::new(&mut pb.pp("encoder"), cfg, stage)?,
            attention: ScaAttention::new(&mut pb.pp("sca"), cfg.region_dim, cfg.sentence_dim())?,
            unconditional_head: Linear::new(&mut pb.pp("head_uncond"), cfg.region_dim, 1)?,
            conditional_head: Linear::new(
                &mut pb.pp("head_cond"),
                cfg.region_dim + cfg.sentence_dim(),
                1,
            )?,
        })
    }

    pub fn score(&self, image: &Tensor, sentence: &Tensor, use_sca: bool) -> Result<GlobalScores> {
        let regions = self.encoder.forward(image)?;
        let (plain, conditioned) = if use_sca {
            let (plain, _) = self.attention.forward(&regions, &sentence.zeros_like()?)?;
            let (conditioned, _) = self.attention.forward(&regions, sentence)?;
            (plain, conditioned)
        } else {
            (regions.clone(), regions)
        };
        let pool = |x: &Tensor| -> Result<Tensor> { Ok(flatten_regions(x)?.mean(D::Minus1)?) };
        let unconditional = sigmoid(&self.unconditional_head.forward(&pool(&plain)?)?.squeeze(1)?)?;
        let joint = Tensor::cat(&[&pool(&conditioned)?, sentence], 1)?;
        let conditional = sigmoid(&self.conditional_head.forward(&joint)?.squeeze(1)?)?;
        Ok(GlobalScores {
            unconditional,
            conditional,
        })
    }
}

/// All discriminators owned by one generator stage.
#[derive(Debug, Clone)]
pub struct StageDiscriminators {
    pub stage: usize,
    pub fine_encoder: RegionEncoder,
    pub parts: [PartDiscriminator; 4],
    pub global: GlobalDiscriminator,
}

impl StageDiscriminators {
    /// Registers under `pb` (conventionally `disc{stage}`).
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, stage: usize) -> Result<Self> {
        let fine_encoder = RegionEncoder::new(&mut pb.pp("fine"), cfg, stage)?;
        let mut part = |p: BodyPart| PartDiscriminator::new(&mut pb.pp("part").pp(p.name()), cfg);
        let parts = [
            part(BodyPart::Head)?,
            part(BodyPart::Torso)?,
            part(BodyPart::Legs)?,
            part(BodyPart::Feet)?,
        ];
        Ok(Self {
            stage,
            fine_encoder,
            parts,
            global: GlobalDiscriminator::new(&mut pb.pp("global"), cfg, stage)?,
        })
    }

    pub fn resolution(&self) -> usize {
        self.fine_encoder.resolution()
    }

    pub fn encode_fine(&self, image: &Tensor) -> Result<Tensor> {
        self.fine_encoder.forward(image)
    }

    pub fn part_scores(&self, image: &Tensor, text: &TextFeatures, mode: AttentionMode) -> Result<PartScores> {
        let split = split_parts(&self.encode_fine(image)?)?;
        let score = |p: BodyPart| {
            self.parts[p.index()].score(split.part(p), &text.words, Some(&text.mask), mode)
        };
        Ok(PartScores {
            parts: [
                score(BodyPart::Head)?,
                score(BodyPart::Torso)?,
                score(BodyPart::Legs)?,
                score(BodyPart::Feet)?,
            ],
        })
    }

    pub fn global_scores(&self, image: &Tensor, sentence: &Tensor, use_sca: bool) -> Result<GlobalScores> {
        self.global.score(image, sentence, use_sca)
    }
}
