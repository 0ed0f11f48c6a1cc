//! On-policy preference bootstrapping.
//!
//! For a prompt, the latest policy snapshot samples up to `r_candidates`
//! distinct responses; the ensemble reward then labels the best one chosen
//! and the worst one rejected. Prompts whose sampler cannot produce two
//! distinct responses within the dedupe budget are reported degenerate and
//! skipped. All sampling seeds are derived from the config seed, the round,
//! the prompt id, the slot, and the attempt, so generation is reproducible
//! and independent of evaluation order.

use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{SeraError, SeraResult};
use crate::policy::{SampleControls, TokenSeq};
use crate::seed::derive_seed;
use crate::selection::{ensemble_reward, PolicyHistory};

/// Controls for one bootstrap pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Candidate samples per prompt; at least 2.
    pub r_candidates: usize,
    /// How many bootstrapped pairs to keep per iteration.
    pub k_tilde: usize,
    /// Sampling controls; the seed is the base of every derived stream.
    pub controls: SampleControls,
    /// Resampling budget per candidate slot when enforcing distinctness.
    pub dedupe_attempts: usize,
}

impl BootstrapConfig {
    pub fn validate(&self) -> SeraResult<()> {
        if self.r_candidates < 2 {
            return Err(SeraError::InvalidArgument(format!(
                "r_candidates must be at least 2, got {}",
                self.r_candidates
            )));
        }
        if self.dedupe_attempts == 0 {
            return Err(SeraError::InvalidArgument(
                "dedupe_attempts must be at least 1".to_string(),
            ));
        }
        self.controls.validate()
    }
}

pub const DEFAULT_DEDUPE_ATTEMPTS: usize = 16;

/// One self-labeled pair extracted from sampled candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrappedPair {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    /// Ensemble-reward gap, never negative.
    pub margin: f64,
    pub source_prompt_id: u64,
}

impl BootstrappedPair {
    /// View as a training pair; `id` is assigned by the caller and the meta
    /// object records the on-policy origin.
    pub fn to_preference_pair(&self, id: u64, iteration: usize) -> PreferencePair {
        PreferencePair {
            id,
            prompt: self.prompt.clone(),
            chosen: self.chosen.clone(),
            rejected: self.rejected.clone(),
            meta: Some(serde_json::json!({
                "source": "bootstrap",
                "iteration": iteration,
                "margin": self.margin,
                "source_prompt_id": self.source_prompt_id,
            })),
        }
    }
}

/// Samples up to `r_candidates` distinct responses for one prompt from the
/// latest snapshot. Each slot retries up to `dedupe_attempts` times to avoid
/// duplicating earlier candidates; a slot that exhausts its budget yields
/// nothing. Fewer than two distinct candidates is a degenerate prompt.
pub fn generate_candidates(
    history: &PolicyHistory,
    prompt_id: u64,
    prompt: &TokenSeq,
    cfg: &BootstrapConfig,
) -> SeraResult<Vec<TokenSeq>> {
    cfg.validate()?;
    let policy = history.latest();
    let mut out: Vec<TokenSeq> = Vec::with_capacity(cfg.r_candidates);
    for slot in 0..cfg.r_candidates {
        for attempt in 0..cfg.dedupe_attempts {
            let controls = SampleControls {
                seed: derive_seed(
                    cfg.controls.seed,
                    "cand",
                    &[prompt_id, slot as u64, attempt as u64],
                ),
                ..cfg.controls
            };
            let candidate = policy.sample(prompt, &controls)?;
            if !out.contains(&candidate) {
                out.push(candidate);
                break;
            }
        }
    }
    if out.len() < 2 {
        return Err(SeraError::DegeneratePrompt { prompt_id });
    }
    Ok(out)
}

/// Labels candidates by ensemble reward: argmax becomes chosen, argmin
/// rejected, ties resolved toward the lowest candidate index (with the
/// rejected side skipping the chosen index, so a full tie yields indices
/// 0 and 1).
pub fn extract_pair(
    history: &PolicyHistory,
    t: usize,
    gamma: f64,
    prompt_id: u64,
    prompt: &TokenSeq,
    candidates: &[TokenSeq],
) -> SeraResult<BootstrappedPair> {
    if candidates.len() < 2 {
        return Err(SeraError::InvalidArgument(format!(
            "need at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    let mut rewards = Vec::with_capacity(candidates.len());
    for c in candidates {
        rewards.push(ensemble_reward(history, t, gamma, prompt, c)?);
    }
    let mut chosen_ix = 0usize;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[chosen_ix] {
            chosen_ix = i;
        }
    }
    let mut rejected_ix = usize::MAX;
    for (i, &r) in rewards.iter().enumerate() {
        if i == chosen_ix {
            continue;
        }
        if rejected_ix == usize::MAX || r < rewards[rejected_ix] {
            rejected_ix = i;
        }
    }
    let margin = rewards[chosen_ix] - rewards[rejected_ix];
    Ok(BootstrappedPair {
        prompt: prompt.clone(),
        chosen: candidates[chosen_ix].clone(),
        rejected: candidates[rejected_ix].clone(),
        margin,
        source_prompt_id: prompt_id,
    })
}

/// Keeps the `k_tilde` largest-margin pairs from a pool that is already in
/// (prompt, round) generation order; the stable sort makes ties break toward
/// the earlier prompt.
fn keep_top_k_tilde(mut pool: Vec<BootstrappedPair>, k_tilde: usize) -> Vec<BootstrappedPair> {
    pool.sort_by(|a, b| b.margin.total_cmp(&a.margin));
    pool.truncate(k_tilde);
    pool
}

/// Generates the bootstrap dataset for iteration `t`.
///
/// When `k_tilde` exceeds the prompt count, `ceil(k_tilde / n_prompts)`
/// rounds run per prompt under disjoint derived seeds and the pooled pairs
/// compete for the top `k_tilde` margins. Pairs are regenerated from scratch
/// on every call; nothing accumulates across iterations. `k_tilde = 0` is an
/// empty success, while a pass in which every prompt is degenerate is an
/// error.
pub fn bootstrap_dataset(
    history: &PolicyHistory,
    t: usize,
    gamma: f64,
    prompts: &[TokenSeq],
    cfg: &BootstrapConfig,
) -> SeraResult<Vec<BootstrappedPair>> {
    cfg.validate()?;
    if cfg.k_tilde == 0 {
        return Ok(Vec::new());
    }
    if prompts.is_empty() {
        return Err(SeraError::InvalidArgument(
            "bootstrap needs at least one prompt".to_string(),
        ));
    }
    let rounds = cfg.k_tilde.div_ceil(prompts.len());
    let mut pool = Vec::with_capacity(rounds * prompts.len());
    for (ix, prompt) in prompts.iter().enumerate() {
        for round in 0..rounds {
            let round_cfg = BootstrapConfig {
                controls: SampleControls {
                    seed: derive_seed(cfg.controls.seed, "round", &[round as u64]),
                    ..cfg.controls
                },
                ..*cfg
            };
            match generate_candidates(history, ix as u64, prompt, &round_cfg) {
                Ok(candidates) => {
                    pool.push(extract_pair(
                        history,
                        t,
                        gamma,
                        ix as u64,
                        prompt,
                        &candidates,
                    )?);
                }
                Err(SeraError::DegeneratePrompt { .. }) => continue,
                Err(other) => return Err(other),
            }
        }
    }
    if pool.is_empty() {
        return Err(SeraError::AllPromptsDegenerate {
            n_prompts: prompts.len(),
        });
    }
    Ok(keep_top_k_tilde(pool, cfg.k_tilde))
}
