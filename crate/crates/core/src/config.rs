//! Model dimensions, training hyperparameters and ablation switches.

use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 8/16/32 pixel stages with narrow channels; what tests and CI train.
    Tiny,
    /// 64/128/256 pixel stages at full width.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::input(format!(
                "unknown profile `{other}` (expected tiny or paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture dimensions shared by every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub precision: Precision,
    /// Maximum caption length `T`.
    pub max_len: usize,
    /// Token embedding width fed to the recurrent text encoder.
    pub embed_dim: usize,
    /// Word feature width `N_w`; also the raw sentence width.
    pub word_dim: usize,
    /// Augmented condition width `N_s`.
    pub cond_dim: usize,
    /// Latent noise width `D_z`.
    pub z_dim: usize,
    /// Number of generator stages `m`.
    pub stages: usize,
    /// Side length of the first stage's images.
    pub base_resolution: usize,
    /// Generator hidden channels at every stage's output resolution.
    pub gen_width: usize,
    pub gen_residual_blocks: usize,
    /// Discriminator base channel count.
    pub disc_width: usize,
    /// Discriminator region feature width `N_r`.
    pub region_dim: usize,
    /// Word-region attention sharpness in the matching loss.
    pub damsm_gamma1: f64,
    /// Word-level aggregation temperature.
    pub damsm_gamma2: f64,
    /// Similarity scale in the batch softmax.
    pub damsm_gamma3: f64,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            precision: Precision::F32,
            max_len: 30,
            embed_dim: 16,
            word_dim: 32,
            cond_dim: 16,
            z_dim: 16,
            stages: 3,
            base_resolution: 8,
            gen_width: 8,
            gen_residual_blocks: 1,
            disc_width: 8,
            region_dim: 16,
            damsm_gamma1: 4.0,
            damsm_gamma2: 5.0,
            damsm_gamma3: 10.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            precision: Precision::F32,
            max_len: 30,
            embed_dim: 300,
            word_dim: 256,
            cond_dim: 100,
            z_dim: 100,
            stages: 3,
            base_resolution: 64,
            gen_width: 32,
            gen_residual_blocks: 2,
            disc_width: 64,
            region_dim: 512,
            damsm_gamma1: 4.0,
            damsm_gamma2: 5.0,
            damsm_gamma3: 10.0,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Tiny => Self::tiny(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn sentence_dim(&self) -> usize {
        self.word_dim
    }

    /// Image side length at `stage`; doubles per stage.
    pub fn resolution(&self, stage: usize) -> usize {
        self.base_resolution << stage
    }

    pub fn final_resolution(&self) -> usize {
        self.resolution(self.stages - 1)
    }

    /// Stride-2 blocks between a 4x4 seed and the base resolution. Used both
    /// by the first generator (upsampling) and by every discriminator
    /// encoder (downsampling), so encoder grids are `R_i / 2^k`.
    pub fn scale_steps(&self) -> usize {
        (self.base_resolution / 4).trailing_zeros() as usize
    }

    /// Spatial side of discriminator region grids at `stage`.
    pub fn grid_side(&self, stage: usize) -> usize {
        self.resolution(stage) >> self.scale_steps()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stages == 0 {
            problems.push("stages must be >= 1".to_string());
        }
        if !self.base_resolution.is_power_of_two() || self.base_resolution < 8 {
            problems.push(format!(
                "base_resolution must be a power of two >= 8, got {}",
                self.base_resolution
            ));
        }
        if self.max_len == 0 {
            problems.push("max_len must be >= 1".into());
        }
        if self.word_dim % 2 != 0 || self.word_dim == 0 {
            problems.push("word_dim must be even and positive".into());
        }
        if self.region_dim < 8 || self.region_dim % 2 != 0 {
            problems.push("region_dim must be even and >= 8".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("cond_dim", self.cond_dim),
            ("z_dim", self.z_dim),
            ("gen_width", self.gen_width),
            ("disc_width", self.disc_width),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::input(problems.join("; ")))
        }
    }
}

/// Switches reproducing the baseline / +HPD / +VISA / +SCA configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Part-based local discriminators and their loss terms.
    pub use_hpd: bool,
    /// Word-region attention inside the part discriminators. The generator
    /// keeps its attention regardless.
    pub use_visa: bool,
    /// Self-cross attention in the global discriminators.
    pub use_sca: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_hpd: true,
            use_visa: true,
            use_sca: true,
        }
    }
}

impl AblationFlags {
    /// The baseline: generator attention only.
    pub const BASELINE: Self = Self {
        use_hpd: false,
        use_visa: false,
        use_sca: false,
    };

    /// Applies one `no-hpd` / `no-visa` / `no-sca` switch.
    pub fn disable(&mut self, switch: &str) -> Result<()> {
        match switch {
            "no-hpd" => self.use_hpd = false,
            "no-visa" => self.use_visa = false,
            "no-sca" => self.use_sca = false,
            other => {
                return Err(Error::input(format!(
                    "unknown ablation `{other}` (expected no-hpd, no-visa or no-sca)"
                )))
            }
        }
        Ok(())
    }

    /// The four configurations of the ablation table, in order.
    pub fn table() -> [(&'static str, AblationFlags); 4] {
        [
            ("BL", Self::BASELINE),
            (
                "BL+HPD",
                Self {
                    use_hpd: true,
                    use_visa: false,
                    use_sca: false,
                },
            ),
            (
                "BL+HPD+VISA",
                Self {
                    use_hpd: true,
                    use_visa: true,
                    use_sca: false,
                },
            ),
            ("BL+HPD+VISA+SCA", Self::default()),
        ]
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    /// Matching-loss pre-training steps for the text encoder before it is frozen.
    pub pretrain_steps: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_pretrain: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_cond: f64,
    pub lambda_damsm: f64,
    pub ablation: AblationFlags,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Tiny)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            model: ModelConfig::for_profile(profile),
            seed: 0,
            batch_size: 16,
            steps: 1000,
            pretrain_steps: 200,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            lr_pretrain: 2e-3,
            beta1: 0.5,
            beta2: 0.999,
            lambda_cond: 1.0,
            lambda_damsm: 5.0,
            ablation: AblationFlags::default(),
            checkpoint_every: 0,
        }
    }

    /// Reads a TOML config. A missing `[model]` table falls back to the
    /// profile's dimensions.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Input(message) => Error::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::input(e.to_string()))?;
        let mut cfg: TrainConfig =
            TrainConfig::deserialize(value.clone()).map_err(|e| Error::input(e.to_string()))?;
        if !value.contains_key("model") {
            cfg.model = ModelConfig::for_profile(cfg.profile);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::input("batch_size must be >= 2"));
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_pretrain", self.lr_pretrain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::input("moment decays must lie in [0, 1)"));
        }
        if self.lambda_cond < 0.0 || self.lambda_damsm < 0.0 {
            return Err(Error::input("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Fingerprint of every field that shapes parameters or the loss
    /// stream. Step budgets and checkpoint cadence are excluded so a run
    /// can be resumed with a longer schedule.
    pub fn hash(&self) -> u64 {
        #[derive(Serialize)]
        struct Hashed<'a> {
            model: &'a ModelConfig,
            seed: u64,
            batch_size: usize,
            pretrain_steps: u64,
            lrs: [f64; 3],
            betas: [f64; 2],
            lambdas: [f64; 2],
            ablation: AblationFlags,
        }
        let hashed = Hashed {
            model: &self.model,
            seed: self.seed,
            batch_size: self.batch_size,
            pretrain_steps: self.pretrain_steps,
            lrs: [self.lr_generator, self.lr_discriminator, self.lr_pretrain],
            betas: [self.beta1, self.beta2],
            lambdas: [self.lambda_cond, self.lambda_damsm],
            ablation: self.ablation,
        };
        let bytes = serde_json::to_vec(&hashed).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_dimensions() {
        let m = ModelConfig::paper();
        assert_eq!(m.word_dim, 256);
        assert_eq!(m.region_dim, 512);
        assert_eq!(m.cond_dim, 100);
        assert_eq!(
            (0..m.stages).map(|i| m.resolution(i)).collect::<Vec<_>>(),
            vec![64, 128, 256]
        );
        assert_eq!(
            (0..m.stages).map(|i| m.grid_side(i)).collect::<Vec<_>>(),
            vec![4, 8, 16]
        );
    }

    #[test]
    fn tiny_grids_divisible_by_four() {
        let m = ModelConfig::tiny();
        for i in 0..m.stages {
            assert_eq!(m.grid_side(i) % 4, 0);
        }
    }

    #[test]
    fn ablation_changes_hash_but_steps_do_not() {
        let base = TrainConfig::default();
        let mut longer = base.clone();
        longer.steps += 100;
        assert_eq!(base.hash(), longer.hash());
        let mut ablated = base.clone();
        ablated.ablation.disable("no-sca").unwrap();
        assert_ne!(base.hash(), ablated.hash());
    }

    #[test]
    fn toml_without_model_uses_profile() {
        let cfg = TrainConfig::from_toml_str("profile = \"paper\"\nseed = 4\n").unwrap();
        assert_eq!(cfg.model, ModelConfig::paper());
        assert_eq!(cfg.seed, 4);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(TrainConfig::from_toml_str("batch_size = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("batch_sise = 4\n").is_err());
        assert!(TrainConfig::from_toml_str("profile = \"huge\"\n").is_err());
        let mut flags = AblationFlags::default();
        assert!(flags.disable("no-everything").is_err());
    }
}
