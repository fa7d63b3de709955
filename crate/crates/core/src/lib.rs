//! Text-conditioned pedestrian image synthesis.
//!
//! A multi-stage attentional generator is trained against per-stage global
//! discriminators with self-cross attention and four part discriminators
//! (head, torso, legs, feet) that attend over caption words. Pose Score and
//! Pose Variance summarize keypoint detections on generated images.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod damsm;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod inspect;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod text;
pub mod train;

pub use config::{AblationFlags, ModelConfig, Profile, TrainConfig};
pub use error::{Error, Result};
pub use data::{DatasetManifest, SyntheticSpec, TrainBatch, TrainingSet};
pub use discriminator::BodyPart;
pub use metrics::{KeypointSet, PoseReport};
pub use model::Model;
pub use text::{TokenSequence, Vocabulary};
pub use train::{StepLog, TrainState};
