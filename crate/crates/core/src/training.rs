//! Corrector training objectives, evaluated on supplied log-probabilities.
//!
//! All losses are per example and use natural logarithms. Batch reduction is
//! left to the trainer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::log_sigmoid;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("log-probability {0} is positive or not finite")]
    BadLogProb(f64),
    #[error("margin {0} is not finite")]
    BadDelta(f64),
    #[error("reward length is zero")]
    ZeroLength,
    #[error("position {position}: distribution sums to {sum}")]
    NotNormalized { position: usize, sum: f64 },
    #[error("position {position}: negative or non-finite probability")]
    BadProbability { position: usize },
    #[error("no positions to average over")]
    NoPositions,
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
}

fn check_logp(lp: f64) -> Result<f64, LossError> {
    if lp.is_finite() && lp <= 0.0 {
        Ok(lp)
    } else {
        Err(LossError::BadLogProb(lp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeLossInputs {
    /// `z_leak - z_noleak`.
    pub delta: f64,
    pub leak: bool,
    /// `log p(y_judge | ...)`.
    pub logp_judge: f64,
}

impl JudgeLossInputs {
    pub fn new(delta: f64, leak: bool, logp_judge: f64) -> Result<Self, LossError> {
        if !delta.is_finite() {
            return Err(LossError::BadDelta(delta));
        }
        Ok(Self {
            delta,
            leak,
            logp_judge: check_logp(logp_judge)?,
        })
    }
}

/// Teacher-forced per-token log-probabilities of one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceLogProbs {
    logps: Vec<f64>,
}

impl SequenceLogProbs {
    pub fn new(logps: Vec<f64>) -> Result<Self, LossError> {
        for &lp in &logps {
            check_logp(lp)?;
        }
        Ok(Self { logps })
    }

    pub fn logps(&self) -> &[f64] {
        &self.logps
    }

    pub fn len(&self) -> usize {
        self.logps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logps.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.logps.iter().sum()
    }
}

/// Next-token distributions at each position of the draft.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDistributions {
    dists: Vec<Vec<f64>>,
}

pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

impl PositionDistributions {
    pub fn new(dists: Vec<Vec<f64>>) -> Result<Self, LossError> {
        if dists.is_empty() {
            return Err(LossError::NoPositions);
        }
        for (position, d) in dists.iter().enumerate() {
            if d.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(LossError::BadProbability { position });
            }
            let sum: f64 = d.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(LossError::NotNormalized { position, sum });
            }
        }
        Ok(Self { dists })
    }

    pub fn positions(&self) -> &[Vec<f64>] {
        &self.dists
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCoefficients {
    pub beta: f64,
    pub gamma: f64,
    pub lambda_lm: f64,
    pub lambda_judge: f64,
    pub lambda_ent: f64,
}

impl StageCoefficients {
    /// Preference-optimization stage settings.
    pub const STAGE2: StageCoefficients = StageCoefficients {
        beta: 2.5,
        gamma: 2.5,
        lambda_lm: 0.5,
        lambda_judge: 0.025,
        lambda_ent: 0.025,
    };

    /// Supervised stage: only the judgement weight is set. It is applied by
    /// the weighted variant [`stage1_loss_weighted`]; [`stage1_loss`] is the
    /// plain sum.
    pub const STAGE1: StageCoefficients = StageCoefficients {
        beta: 2.5,
        gamma: 2.5,
        lambda_lm: 0.0,
        lambda_judge: 0.5,
        lambda_ent: 0.0,
    };
}

impl Default for StageCoefficients {
    fn default() -> Self {
        Self::STAGE2
    }
}

/// `-½ [ 1·ln σ(Δ) + (1-1)·ln(1-σ(Δ)) + ln p(y_judge) ]`, with the indicator
/// taken from `inputs.leak`.
pub fn judge_loss(inputs: &JudgeLossInputs) -> f64 {
    let bce = if inputs.leak {
        log_sigmoid(inputs.delta)
    } else {
        log_sigmoid(-inputs.delta)
    };
    -0.5 * (bce + inputs.logp_judge)
}

/// Summed negative log-likelihood of the revision target.
pub fn revision_loss(seq: &SequenceLogProbs) -> f64 {
    -seq.sum()
}

/// Length-capped reward: sequence log-likelihood over `min(|y|, |y0|)`.
pub fn reward(seq: &SequenceLogProbs, draft_len: usize) -> Result<f64, LossError> {
    let denom = seq.len().min(draft_len);
    if denom == 0 {
        return Err(LossError::ZeroLength);
    }
    Ok(seq.sum() / denom as f64)
}

/// `-ln σ(β (r+ - r-) - γ) + λ_lm · l_rev`.
pub fn suppression_loss(
    reward_pos: f64,
    reward_neg: f64,
    coeffs: &StageCoefficients,
    revision: f64,
) -> Result<f64, LossError> {
    if coeffs.beta.is_nan() || coeffs.beta <= 0.0 {
        return Err(LossError::BadBeta(coeffs.beta));
    }
    let margin = coeffs.beta * (reward_pos - reward_neg) - coeffs.gamma;
    Ok(-log_sigmoid(margin) + coeffs.lambda_lm * revision)
}

/// Negative mean entropy over draft positions; lies in `[-ln V, 0]`.
pub fn entropy_reg(dists: &PositionDistributions) -> f64 {
    let n = dists.dists.len() as f64;
    -dists.dists.iter().map(|d| entropy(d)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_judge: f64,
    pub l_revision: f64,
    pub l_sup: f64,
    pub l_ent: f64,
    pub stage1_total: f64,
    pub stage2_total: f64,
    pub coefficients: StageCoefficients,
}

impl LossBreakdown {
    fn from_parts(
        l_judge: f64,
        l_revision: f64,
        l_sup: f64,
        l_ent: f64,
        coefficients: StageCoefficients,
    ) -> Self {
        Self {
            l_judge,
            l_revision,
            l_sup,
            l_ent,
            stage1_total: l_judge + l_revision,
            stage2_total: l_sup
                + coefficients.lambda_judge * l_judge
                + coefficients.lambda_ent * l_ent,
            coefficients,
        }
    }
}

/// Supervised stage: `L_judge + L_revision`.
pub fn stage1_loss(judge: &JudgeLossInputs, revision: &SequenceLogProbs) -> LossBreakdown {
    LossBreakdown::from_parts(
        judge_loss(judge),
        revision_loss(revision),
        0.0,
        0.0,
        StageCoefficients::STAGE1,
    )
}

/// Weighted supervised variant, `λ_judge · L_judge + L_revision`, for trainers
/// that apply the stage's judgement weight.
pub fn stage1_loss_weighted(
    judge: &JudgeLossInputs,
    revision: &SequenceLogProbs,
    lambda_judge: f64,
) -> f64 {
    lambda_judge * judge_loss(judge) + revision_loss(revision)
}

/// Inputs of the suppression term: log-probabilities of the corrected
/// response `y+` and of the original draft `y-`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLogProbs {
    pub positive: SequenceLogProbs,
    pub negative: SequenceLogProbs,
}

/// Preference stage: `L_sup + λ_judge · L_judge + λ_ent · L_ent`. The draft
/// length caps both rewards; the revision term inside `L_sup` is the summed
/// NLL of `y+`.
pub fn stage2_loss(
    preference: &PreferenceLogProbs,
    judge: &JudgeLossInputs,
    draft_dists: &PositionDistributions,
    coeffs: &StageCoefficients,
) -> Result<LossBreakdown, LossError> {
    let draft_len = preference.negative.len();
    let r_pos = reward(&preference.positive, draft_len)?;
    let r_neg = reward(&preference.negative, draft_len)?;
    let l_revision = revision_loss(&preference.positive);
    let l_sup = suppression_loss(r_pos, r_neg, coeffs, l_revision)?;
    Ok(LossBreakdown::from_parts(
        judge_loss(judge),
        l_revision,
        l_sup,
        entropy_reg(draft_dists),
        *coeffs,
    ))
}
