//! Adversarial objectives and the weighted generator total.
//!
//! Every score is a probability tensor of shape `(B,)`. Logs are taken of
//! values clamped to `[EPS, 1 - EPS]`; scores outside `[0, 1]` (or NaN)
//! violate the loss contract.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::discriminator::{GlobalScores, PartScores};
use crate::error::{Error, Result};
use crate::nn::{scalar_f64, to_vec_f64};

pub const EPS: f64 = 1e-7;

fn checked(scores: &Tensor, what: &str) -> Result<Tensor> {
    let values = to_vec_f64(scores)?;
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!(
            "{what} score {bad} lies outside [0, 1]"
        )));
    }
    Ok(scores.clamp(EPS, 1.0 - EPS)?)
}

/// `-E[log D]`.
fn neg_log_mean(scores: &Tensor, what: &str) -> Result<Tensor> {
    Ok(checked(scores, what)?.log()?.mean_all()?.neg()?)
}

/// `-E[log(1 - D)]`.
fn neg_log_complement_mean(scores: &Tensor, what: &str) -> Result<Tensor> {
    Ok(checked(scores, what)?
        .affine(-1.0, 1.0)?
        .log()?
        .mean_all()?
        .neg()?)
}

/// The generator's adversarial terms at one stage, each `-E[log D]`.
#[derive(Debug, Clone)]
pub struct AdversarialTerms {
    pub unconditional: Tensor,
    pub global_conditional: Tensor,
    /// Per body part; absent when the part discriminators are disabled.
    pub local: Option<[Tensor; 4]>,
}

impl AdversarialTerms {
    pub fn new(global: &GlobalScores, parts: Option<&PartScores>) -> Result<Self> {
        let local = match parts {
            Some(p) => Some([
                neg_log_mean(&p.parts[0], "part")?,
                neg_log_mean(&p.parts[1], "part")?,
                neg_log_mean(&p.parts[2], "part")?,
                neg_log_mean(&p.parts[3], "part")?,
            ]),
            None => None,
        };
        Ok(Self {
            unconditional: neg_log_mean(&global.unconditional, "unconditional")?,
            global_conditional: neg_log_mean(&global.conditional, "conditional")?,
            local,
        })
    }

    /// `1/3 [uncond + cond + 1/4 sum_k local_k]`, or `1/2 [uncond + cond]`
    /// when the local terms are absent.
    pub fn combined(&self) -> Result<Tensor> {
        let global = (&self.unconditional + &self.global_conditional)?;
        Ok(match &self.local {
            Some(local) => {
                let sum = ((&local[0] + &local[1])? + (&local[2] + &local[3])?)?;
                (global + sum.affine(0.25, 0.0)?)?.affine(1.0 / 3.0, 0.0)?
            }
            None => global.affine(0.5, 0.0)?,
        })
    }

    pub fn values(&self) -> Result<StageAdversarial> {
        let local = match &self.local {
            Some(l) => Some([
                scalar_f64(&l[0])?,
                scalar_f64(&l[1])?,
                scalar_f64(&l[2])?,
                scalar_f64(&l[3])?,
            ]),
            None => None,
        };
        Ok(StageAdversarial {
            unconditional: scalar_f64(&self.unconditional)?,
            global_conditional: scalar_f64(&self.global_conditional)?,
            local,
            total: scalar_f64(&self.combined()?)?,
        })
    }
}

/// Generator adversarial loss for one stage (batch mean).
pub fn generator_adv_loss(global: &GlobalScores, parts: Option<&PartScores>) -> Result<Tensor> {
    AdversarialTerms::new(global, parts)?.combined()
}

/// `-1/2 [E log D(I_d) + E log(1 - D(I_g)) + E log D(I_d, s) + E log(1 - D(I_g, s))]`.
pub fn global_disc_loss(real: &GlobalScores, fake: &GlobalScores) -> Result<Tensor> {
    let terms = [
        neg_log_mean(&real.unconditional, "real unconditional")?,
        neg_log_complement_mean(&fake.unconditional, "fake unconditional")?,
        neg_log_mean(&real.conditional, "real conditional")?,
        neg_log_complement_mean(&fake.conditional, "fake conditional")?,
    ];
    Ok(Tensor::stack(&terms, 0)?.sum_all()?.affine(0.5, 0.0)?)
}

/// Per-part `-E log D_k(I_d, W) - E log(1 - D_k(I_g, W))`, averaged over the
/// four parts.
pub fn part_disc_loss(real: &PartScores, fake: &PartScores) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(8);
    for k in 0..4 {
        terms.push(neg_log_mean(&real.parts[k], "real part")?);
        terms.push(neg_log_complement_mean(&fake.parts[k], "fake part")?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?.affine(0.25, 0.0)?)
}

/// Logged adversarial values of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAdversarial {
    pub unconditional: f64,
    pub global_conditional: f64,
    /// head, torso, legs, feet
    pub local: Option<[f64; 4]>,
    pub total: f64,
}

/// Generator loss decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stages: Vec<StageAdversarial>,
    pub cond: f64,
    pub damsm: f64,
    pub lambda_cond: f64,
    pub lambda_damsm: f64,
    pub total: f64,
}

/// `sum_i adv_i + lambda_cond * cond + lambda_damsm * damsm`. Each term must
/// be finite; the error names the first one that is not.
pub fn total_generator_loss(
    stages: Vec<StageAdversarial>,
    cond: f64,
    damsm: f64,
    lambda_cond: f64,
    lambda_damsm: f64,
) -> Result<LossBreakdown> {
    for (i, s) in stages.iter().enumerate() {
        let mut named = vec![
            (format!("stage{i}.unconditional"), s.unconditional),
            (format!("stage{i}.global_conditional"), s.global_conditional),
            (format!("stage{i}.adversarial"), s.total),
        ];
        if let Some(local) = s.local {
            for (k, v) in local.iter().enumerate() {
                named.push((format!("stage{i}.local{k}"), *v));
            }
        }
        if let Some((name, v)) = named.into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::numeric(name, format!("term is {v}")));
        }
    }
    for (name, v) in [("cond", cond), ("damsm", damsm)] {
        if !v.is_finite() {
            return Err(Error::numeric(name, format!("term is {v}")));
        }
    }
    let mut total = stages.iter().map(|s| s.total).sum::<f64>() + lambda_cond * cond;
    if lambda_damsm != 0.0 {
        total += lambda_damsm * damsm;
    }
    Ok(LossBreakdown {
        stages,
        cond,
        damsm,
        lambda_cond,
        lambda_damsm,
        total,
    })
}
