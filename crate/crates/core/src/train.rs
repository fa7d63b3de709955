//! Matching-loss pre-training of the text encoder, then alternating
//! discriminator/generator updates over all stages.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionMode;
use crate::config::TrainConfig;
use crate::damsm::{damsm_loss, MatchingScales};
use crate::data::{TrainBatch, TrainingSet};
use crate::error::{Error, Result};
use crate::generator::GeneratorOutput;
use crate::losses::{global_disc_loss, part_disc_loss, total_generator_loss, AdversarialTerms, LossBreakdown};
use crate::metrics::auc;
use crate::model::{Model, GEN_PREFIX, MATCH_PREFIX, TEXT_PREFIX};
use crate::nn::{check_finite, randn, scalar_f64, to_vec_f64};
use crate::optim::{Adam, AdamConfig};
use crate::text::{ca_kl_loss_tensor, TextFeatures, Vocabulary};

/// Discriminator losses of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscStageLog {
    pub global: f64,
    /// Averaged part loss; absent when part discriminators are disabled.
    pub part: Option<f64>,
    pub total: f64,
}

/// Everything logged for one adversarial step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub disc: Vec<DiscStageLog>,
    pub disc_total: f64,
    pub gen: LossBreakdown,
    /// Sentence i2t, sentence t2i, word i2t, word t2i.
    pub damsm_terms: [f64; 4],
    /// Parameters updated in the discriminator and generator phases.
    pub updated: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: u64,
    pub loss: f64,
    pub terms: [f64; 4],
}

/// Text features and generator output shared by both phases of a step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub step: u64,
    pub text: TextFeatures,
    pub output: GeneratorOutput,
}

/// Full mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub opt_pretrain: Adam,
    pub opt_disc: Adam,
    pub opt_gen: Adam,
    /// Completed pre-training steps.
    pub pretrain_step: u64,
    /// Completed adversarial steps.
    pub step: u64,
}

/// Seed of the random stream `tag` at `step`, independent of how the run
/// got there.
pub fn step_seed(seed: u64, tag: &str, step: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(step.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn finite_or_abort(value: f64, term: &str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            term: term.to_string(),
            step,
        })
    }
}

/// Maps numeric failures inside a step to the abort error.
fn at_step<T>(r: Result<T>, step: u64) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { stage, .. } => Error::NonFiniteLoss { term: stage, step },
        other => other,
    })
}

impl TrainState {
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), vocab, config.seed)?;
        let adam = |lr| Adam::new(AdamConfig::new(lr, config.beta1, config.beta2));
        Ok(Self {
            opt_pretrain: adam(config.lr_pretrain),
            opt_disc: adam(config.lr_discriminator),
            opt_gen: adam(config.lr_generator),
            model,
            config,
            pretrain_step: 0,
            step: 0,
        })
    }

    pub fn pretraining_done(&self) -> bool {
        self.pretrain_step >= self.config.pretrain_steps
    }

    /// Discriminator parameters the current ablation flags allow to change.
    pub fn disc_trainable(&self) -> Vec<String> {
        let flags = self.config.ablation;
        self.model
            .store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("disc"))
            .filter(|n| {
                let rest = n.split_once('.').map(|(_, r)| r).unwrap_or("");
                if !flags.use_hpd && (rest.starts_with("fine.") || rest.starts_with("part.")) {
                    return false;
                }
                if !flags.use_visa && rest.starts_with("part.") && rest.contains(".visa.") {
                    return false;
                }
                if !flags.use_sca && rest.starts_with("global.sca.") {
                    return false;
                }
                true
            })
            .cloned()
            .collect()
    }

    pub fn gen_trainable(&self) -> Vec<String> {
        self.model.names(GEN_PREFIX)
    }

    fn part_mode(&self) -> AttentionMode {
        if self.config.ablation.use_visa {
            AttentionMode::Learned
        } else {
            AttentionMode::Uniform
        }
    }

    fn rng(&self, tag: &str, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(step_seed(self.config.seed, tag, step))
    }

    /// The batch for the next pre-training or adversarial step.
    pub fn next_batch(&self, data: &TrainingSet) -> Result<TrainBatch> {
        let (tag, step) = if self.pretraining_done() {
            ("batch", self.step)
        } else {
            ("pretrain-batch", self.pretrain_step)
        };
        data.sample(self.config.batch_size, &mut self.rng(tag, step))
    }

    /// One update of the text encoder and matching image encoder.
    pub fn pretrain_step(&mut self, batch: &TrainBatch) -> Result<PretrainLog> {
        let step = self.pretrain_step;
        let text = self.model.encode_text(&batch.tokens)?;
        let image = self.model.matcher.forward(batch.images.last().expect("stages >= 1"))?;
        let loss = damsm_loss(
            &image,
            &text.words,
            &text.lengths,
            &text.sentence,
            MatchingScales::from_config(&self.model.config),
        )?;
        let total = loss.total()?;
        let value = finite_or_abort(scalar_f64(&total)?, "pretrain.damsm", step)?;
        let grads = total.backward()?;
        let mut names = self.model.names(TEXT_PREFIX);
        names.extend(self.model.names(MATCH_PREFIX));
        self.opt_pretrain.step(&self.model.store, &grads, &names)?;
        self.pretrain_step += 1;
        Ok(PretrainLog {
            step,
            loss: value,
            terms: loss.values()?,
        })
    }

    /// One discriminator update on detached fakes followed by one generator
    /// update against the refreshed discriminators.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepLog> {
        let step = self.step;
        let inputs = at_step(self.prepare_step(batch), step)?;
        let (disc, disc_total, d_updated) = at_step(self.discriminator_phase(batch, &inputs), step)?;
        let (gen, damsm_terms, g_updated) = at_step(self.generator_phase(&inputs), step)?;
        self.step += 1;
        Ok(StepLog {
            step,
            disc,
            disc_total,
            gen,
            damsm_terms,
            updated: [d_updated, g_updated],
        })
    }

    /// Encodes the captions with the frozen text encoder and runs the
    /// generator with this step's noise.
    pub fn prepare_step(&self, batch: &TrainBatch) -> Result<StepInputs> {
        let cfg = &self.model.config;
        let b = batch.tokens.batch_size();
        if b < 2 {
            return Err(Error::contract("training batch must hold at least 2 pairs"));
        }
        if batch.images.len() != cfg.stages {
            return Err(Error::input("batch lacks images for every stage"));
        }
        let text = self.model.encode_text(&batch.tokens)?.detach();
        let mut rng = self.rng("noise", self.step);
        let z = randn(&mut rng, (b, cfg.z_dim), cfg.dtype())?;
        let eps = randn(&mut rng, (b, cfg.cond_dim), cfg.dtype())?;
        let output = self.model.generator.forward(&text, &z, &eps)?;
        Ok(StepInputs {
            step: self.step,
            text,
            output,
        })
    }

    /// Updates the discriminators of every stage on real images and detached
    /// fakes. Returns per-stage losses, their sum and the number of updated
    /// parameters.
    pub fn discriminator_phase(
        &mut self,
        batch: &TrainBatch,
        inputs: &StepInputs,
    ) -> Result<(Vec<DiscStageLog>, f64, usize)> {
        let step = inputs.step;
        let flags = self.config.ablation;
        let mode = self.part_mode();
        let text = &inputs.text;
        let mut disc = Vec::with_capacity(self.model.discriminators.len());
        let mut d_losses = Vec::with_capacity(self.model.discriminators.len());
        for (i, d) in self.model.discriminators.iter().enumerate() {
            let real = &batch.images[i];
            let fake = inputs.output.bundles[i].image.detach();
            let rs = d.global_scores(real, &text.sentence, flags.use_sca)?;
            let fs = d.global_scores(&fake, &text.sentence, flags.use_sca)?;
            check_scores(
                &[&rs.unconditional, &rs.conditional, &fs.unconditional, &fs.conditional],
                &format!("disc{i}.global"),
            )?;
            let global = global_disc_loss(&rs, &fs)?;
            let global_v = finite_or_abort(scalar_f64(&global)?, &format!("disc{i}.global"), step)?;
            let (loss, part_v) = if flags.use_hpd {
                let rp = d.part_scores(real, text, mode)?;
                let fp = d.part_scores(&fake, text, mode)?;
                let all: Vec<&Tensor> = rp.parts.iter().chain(fp.parts.iter()).collect();
                check_scores(&all, &format!("disc{i}.part"))?;
                let part = part_disc_loss(&rp, &fp)?;
                let v = finite_or_abort(scalar_f64(&part)?, &format!("disc{i}.part"), step)?;
                ((global + part)?, Some(v))
            } else {
                (global, None)
            };
            disc.push(DiscStageLog {
                global: global_v,
                part: part_v,
                total: global_v + part_v.unwrap_or(0.0),
            });
            d_losses.push(loss);
        }
        let d_total = Tensor::stack(&d_losses, 0)?.sum_all()?;
        let disc_total = finite_or_abort(scalar_f64(&d_total)?, "disc.total", step)?;
        let names = self.disc_trainable();
        let updated = self
            .opt_disc
            .step(&self.model.store, &d_total.backward()?, &names)?;
        Ok((disc, disc_total, updated))
    }

    /// Updates the generator against the current discriminators. Returns
    /// the loss breakdown, the four matching-loss terms and the number of
    /// updated parameters.
    pub fn generator_phase(&mut self, inputs: &StepInputs) -> Result<(LossBreakdown, [f64; 4], usize)> {
        let step = inputs.step;
        let flags = self.config.ablation;
        let mode = self.part_mode();
        let text = &inputs.text;
        let out = &inputs.output;
        let mut terms = Vec::with_capacity(out.bundles.len());
        let mut adv = Vec::with_capacity(out.bundles.len());
        for (i, d) in self.model.discriminators.iter().enumerate() {
            let fake = &out.bundles[i].image;
            let gs = d.global_scores(fake, &text.sentence, flags.use_sca)?;
            check_scores(&[&gs.unconditional, &gs.conditional], &format!("gen{i}.global"))?;
            let ps = if flags.use_hpd {
                let p = d.part_scores(fake, text, mode)?;
                check_scores(&p.parts.iter().collect::<Vec<_>>(), &format!("gen{i}.part"))?;
                Some(p)
            } else {
                None
            };
            let t = AdversarialTerms::new(&gs, ps.as_ref())?;
            adv.push(t.combined()?);
            terms.push(t.values()?);
        }
        let kl = ca_kl_loss_tensor(&out.condition.mean, &out.condition.log_variance)?;
        let final_image = &out.bundles.last().expect("stages >= 1").image;
        let matching = matching_loss(&self.model, final_image, text)?;
        let matching_total = matching.total()?;
        let breakdown = total_generator_loss(
            terms,
            scalar_f64(&kl)?,
            scalar_f64(&matching_total)?,
            self.config.lambda_cond,
            self.config.lambda_damsm,
        )?;
        let mut g_total = (Tensor::stack(&adv, 0)?.sum_all()? + kl.affine(self.config.lambda_cond, 0.0)?)?;
        if self.config.lambda_damsm != 0.0 {
            g_total = (g_total + matching_total.affine(self.config.lambda_damsm, 0.0)?)?;
        }
        finite_or_abort(scalar_f64(&g_total)?, "gen.total", step)?;
        let names = self.gen_trainable();
        let updated = self
            .opt_gen
            .step(&self.model.store, &g_total.backward()?, &names)?;
        Ok((breakdown, matching.values()?, updated))
    }

    /// Real-vs-fake AUC of the unconditional global head of `stage`, scored
    /// on `batches` fresh batches drawn from a dedicated stream.
    pub fn discriminator_auc(&self, data: &TrainingSet, stage: usize, batches: u64) -> Result<f64> {
        let d = self
            .model
            .discriminators
            .get(stage)
            .ok_or_else(|| Error::input(format!("no stage {stage}")))?;
        let cfg = &self.model.config;
        let mut real_scores = Vec::new();
        let mut fake_scores = Vec::new();
        for k in 0..batches {
            let batch = data.sample(self.config.batch_size, &mut self.rng("auc-batch", k))?;
            let text = self.model.encode_text(&batch.tokens)?.detach();
            let b = batch.tokens.batch_size();
            let mut rng = self.rng("auc-noise", k);
            let z = randn(&mut rng, (b, cfg.z_dim), cfg.dtype())?;
            let eps = randn(&mut rng, (b, cfg.cond_dim), cfg.dtype())?;
            let out = self.model.generator.forward(&text, &z, &eps)?;
            let use_sca = self.config.ablation.use_sca;
            let rs = d.global_scores(&batch.images[stage], &text.sentence, use_sca)?;
            let fs = d.global_scores(&out.bundles[stage].image.detach(), &text.sentence, use_sca)?;
            real_scores.extend(to_vec_f64(&rs.unconditional)?);
            fake_scores.extend(to_vec_f64(&fs.unconditional)?);
        }
        auc(&real_scores, &fake_scores)
    }
}

/// Matching loss of generated images against frozen text, with the image
/// encoder frozen too (only the image carries gradient).
fn matching_loss(model: &Model, image: &Tensor, text: &TextFeatures) -> Result<crate::damsm::MatchingLoss> {
    let features = model.matcher.forward(image)?;
    damsm_loss(
        &features,
        &text.words,
        &text.lengths,
        &text.sentence,
        MatchingScales::from_config(&model.config),
    )
}

fn check_scores(scores: &[&Tensor], stage: &str) -> Result<()> {
    for s in scores {
        check_finite(s, stage)?;
    }
    Ok(())
}
