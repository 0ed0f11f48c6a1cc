//! Preference-pair objectives over a (policy, reference) pair.
//!
//! All four losses are functions of a scalar margin. For the
//! reference-based objectives the margin is the implicit-reward difference
//!
//! ```text
//! m = [log pi(y_w|x) - log ref(y_w|x)] - [log pi(y_l|x) - log ref(y_l|x)]
//! ```
//!
//! with the inverse-temperature `beta` applied only inside the loss, so
//! margin rankings never depend on it. The length-normalized variant is
//! reference-free: its margin is the difference of `(beta/|y|) log pi(y|x)`
//! rewards and the loss applies no further scaling.
//!
//! | kind  | loss                      |
//! |-------|---------------------------|
//! | dpo   | -log sigmoid(beta * m)    |
//! | slic  | max(0, 1 - beta * m)      |
//! | ipo   | (m - 1/(2 beta))^2        |
//! | simpo | -log sigmoid(m)           |

use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{SeraError, SeraResult};
use crate::policy::{TabularPolicy, TokenSeq};

/// Objective selector; each carries its inverse temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Dpo { beta: f64 },
    Ipo { beta: f64 },
    Slic { beta: f64 },
    Simpo { beta: f64 },
}

impl LossKind {
    pub fn from_name(name: &str, beta: f64) -> SeraResult<Self> {
        let kind = match name {
            "dpo" => LossKind::Dpo { beta },
            "ipo" => LossKind::Ipo { beta },
            "slic" => LossKind::Slic { beta },
            "simpo" => LossKind::Simpo { beta },
            other => {
                return Err(SeraError::InvalidArgument(format!(
                    "unknown loss {other:?}; expected dpo, ipo, slic, or simpo"
                )))
            }
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dpo { .. } => "dpo",
            LossKind::Ipo { .. } => "ipo",
            LossKind::Slic { .. } => "slic",
            LossKind::Simpo { .. } => "simpo",
        }
    }

    pub fn beta(&self) -> f64 {
        match *self {
            LossKind::Dpo { beta }
            | LossKind::Ipo { beta }
            | LossKind::Slic { beta }
            | LossKind::Simpo { beta } => beta,
        }
    }

    /// The length-normalized objective ignores the reference policy.
    pub fn uses_reference(&self) -> bool {
        !matches!(self, LossKind::Simpo { .. })
    }

    pub fn validate(&self) -> SeraResult<()> {
        let beta = self.beta();
        if beta <= 0.0 || !beta.is_finite() {
            return Err(SeraError::InvalidArgument(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        Ok(())
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`; `-log sigmoid(z) = softplus(-z)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Unscaled implicit reward `log pi(y|x) - log ref(y|x)`. Both policies must
/// share a vocabulary.
pub fn implicit_reward(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> SeraResult<f64> {
    if policy.vocab() != reference.vocab() {
        return Err(SeraError::VocabMismatch {
            left: policy.vocab().size(),
            right: reference.vocab().size(),
        });
    }
    Ok(policy.log_prob(prompt, response)? - reference.log_prob(prompt, response)?)
}

/// Length-normalized reference-free reward `(beta/|y|) log pi(y|x)`, where
/// `|y|` counts every response token including a terminating eos.
pub fn simpo_reward(
    policy: &TabularPolicy,
    beta: f64,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> SeraResult<f64> {
    if response.is_empty() {
        return Err(SeraError::InvalidArgument(
            "response must be non-empty".to_string(),
        ));
    }
    Ok(beta / response.len() as f64 * policy.log_prob(prompt, response)?)
}

/// Implicit-reward margin of a pair: reward(chosen) - reward(rejected).
pub fn irm(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &PreferencePair,
) -> SeraResult<f64> {
    let rw = implicit_reward(policy, reference, &pair.prompt, &pair.chosen)?;
    let rl = implicit_reward(policy, reference, &pair.prompt, &pair.rejected)?;
    Ok(rw - rl)
}

/// The margin the given objective trains on: implicit-reward margin for the
/// reference-based losses, reward difference of the length-normalized
/// rewards for the reference-free one.
pub fn pair_margin(
    kind: LossKind,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &PreferencePair,
) -> SeraResult<f64> {
    if kind.uses_reference() {
        irm(policy, reference, pair)
    } else {
        let beta = kind.beta();
        let rw = simpo_reward(policy, beta, &pair.prompt, &pair.chosen)?;
        let rl = simpo_reward(policy, beta, &pair.prompt, &pair.rejected)?;
        Ok(rw - rl)
    }
}

/// Model probability that chosen beats rejected at margin `m`:
/// `sigmoid(beta * m)`.
pub fn preference_prob(margin: f64, beta: f64) -> f64 {
    sigmoid(beta * margin)
}

/// Loss value at a given margin.
pub fn loss(kind: LossKind, margin: f64) -> f64 {
    match kind {
        LossKind::Dpo { beta } => softplus(-beta * margin),
        LossKind::Slic { beta } => (1.0 - beta * margin).max(0.0),
        LossKind::Ipo { beta } => {
            let d = margin - 1.0 / (2.0 * beta);
            d * d
        }
        LossKind::Simpo { .. } => softplus(-margin),
    }
}

/// Derivative of the loss with respect to the margin. At the hinge kink
/// (`beta * m == 1`) the subgradient 0 is used.
fn dloss_dmargin(kind: LossKind, margin: f64) -> f64 {
    match kind {
        LossKind::Dpo { beta } => -beta * sigmoid(-beta * margin),
        LossKind::Slic { beta } => {
            if beta * margin < 1.0 {
                -beta
            } else {
                0.0
            }
        }
        LossKind::Ipo { beta } => 2.0 * (margin - 1.0 / (2.0 * beta)),
        LossKind::Simpo { .. } => -sigmoid(-margin),
    }
}

/// Loss, margin, and the exact gradient of the loss with respect to every
/// policy logit (the reference is a constant).
#[derive(Debug, Clone)]
pub struct PairObjective {
    pub margin: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Evaluates one pair under a loss kind, with the analytic chain-rule
/// gradient through the margin.
pub fn loss_grad(
    kind: LossKind,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &PreferencePair,
) -> SeraResult<PairObjective> {
    kind.validate()?;
    let margin = pair_margin(kind, policy, reference, pair)?;
    let loss_value = loss(kind, margin);
    let dl_dm = dloss_dmargin(kind, margin);
    let gw = policy.log_prob_grad(&pair.prompt, &pair.chosen)?;
    let gl = policy.log_prob_grad(&pair.prompt, &pair.rejected)?;
    let (cw, cl) = if kind.uses_reference() {
        (1.0, 1.0)
    } else {
        let beta = kind.beta();
        (
            beta / pair.chosen.len() as f64,
            beta / pair.rejected.len() as f64,
        )
    };
    let grad: Vec<f64> = gw
        .iter()
        .zip(&gl)
        .map(|(w, l)| dl_dm * (cw * w - cl * l))
        .collect();
    Ok(PairObjective {
        margin,
        loss: loss_value,
        grad,
    })
}
