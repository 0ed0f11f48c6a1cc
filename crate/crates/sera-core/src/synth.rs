//! Synthetic preference world.
//!
//! A hidden "gold" bigram model defines true quality: the gold reward of a
//! response is its log-probability under that model, so the true preference
//! probability sigma(g_w - g_l) is a Bradley-Terry model by construction and
//! the gold model doubles as the judging oracle. A labeler then corrupts the
//! gold ordering two ways — random chosen/rejected swaps (label noise) and a
//! spurious longer-wins rule (length bias) — recording what it did in a
//! sidecar the trainer never sees.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AuditRecord, PreferencePair};
use crate::error::{SeraError, SeraResult};
use crate::losses::sigmoid;
use crate::policy::{random_prompt, SampleControls, TabularPolicy, TokenSeq, Vocab};
use crate::seed::{derive_rng, derive_seed};

/// Attempts per output slot before it is abandoned; generation fails only if
/// the final yield falls short.
pub const GEN_ATTEMPTS: usize = 16;

/// Hidden gold model plus the shape parameters of generated data.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    gold: TabularPolicy,
    prompt_len: usize,
    response_len_max: usize,
    seed: u64,
}

/// How labels are assigned once two distinct responses exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPolicy {
    /// Probability the final label is swapped away from the base ordering.
    pub flip_rate: f64,
    /// Probability the longer response is labeled chosen instead of the
    /// gold-preferred one. A flip takes precedence when both fire; at most
    /// one rule applies per pair.
    pub length_bias_rate: f64,
    /// Base ordering drawn from Bernoulli(sigma(g_a - g_b)) instead of the
    /// gold argmax.
    pub stochastic_labels: bool,
}

impl LabelPolicy {
    pub fn noiseless() -> Self {
        LabelPolicy {
            flip_rate: 0.0,
            length_bias_rate: 0.0,
            stochastic_labels: false,
        }
    }

    pub fn validate(&self) -> SeraResult<()> {
        for (name, rate) in [
            ("flip_rate", self.flip_rate),
            ("length_bias_rate", self.length_bias_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(SeraError::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// Builds a world whose gold logits are sharpness-scaled standard normal
/// draws; sharpness 0 gives the uniform gold model.
pub fn make_world(vocab_size: u32, sharpness: f64, seed: u64) -> SeraResult<SyntheticWorld> {
    if !sharpness.is_finite() || sharpness < 0.0 {
        return Err(SeraError::InvalidArgument(format!(
            "sharpness must be finite and non-negative, got {sharpness}"
        )));
    }
    let vocab = Vocab::new(vocab_size)?;
    let n = vocab.n_rows() * vocab.n_cols();
    let logits = if sharpness == 0.0 {
        vec![0.0; n]
    } else {
        let mut rng = derive_rng(seed, "world", &[]);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sharpness * z
            })
            .collect()
    };
    Ok(SyntheticWorld {
        gold: TabularPolicy::new(vocab, logits)?,
        prompt_len: 2,
        response_len_max: 8,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    vocab_size: u32,
    prompt_len: usize,
    response_len_max: usize,
    seed: u64,
    gold_logits: Vec<f64>,
}

impl SyntheticWorld {
    pub fn with_prompt_len(mut self, len: usize) -> SeraResult<Self> {
        if len == 0 {
            return Err(SeraError::InvalidArgument(
                "prompt_len must be at least 1".to_string(),
            ));
        }
        self.prompt_len = len;
        Ok(self)
    }

    pub fn with_response_len_max(mut self, len: usize) -> SeraResult<Self> {
        if len == 0 {
            return Err(SeraError::InvalidArgument(
                "response_len_max must be at least 1".to_string(),
            ));
        }
        self.response_len_max = len;
        Ok(self)
    }

    pub fn gold(&self) -> &TabularPolicy {
        &self.gold
    }

    pub fn vocab(&self) -> Vocab {
        *self.gold.vocab()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len_max(&self) -> usize {
        self.response_len_max
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Gold reward g(x, y): the response's log-probability under the gold
    /// model.
    pub fn gold_score(&self, prompt: &TokenSeq, response: &TokenSeq) -> SeraResult<f64> {
        self.gold.log_prob(prompt, response)
    }

    /// g(x, chosen) - g(x, rejected) for a labeled pair.
    pub fn gold_margin(&self, pair: &PreferencePair) -> SeraResult<f64> {
        Ok(self.gold_score(&pair.prompt, &pair.chosen)?
            - self.gold_score(&pair.prompt, &pair.rejected)?)
    }

    /// True preference probability sigma(g_a - g_b) that `a` beats `b`.
    pub fn true_pref(&self, prompt: &TokenSeq, a: &TokenSeq, b: &TokenSeq) -> SeraResult<f64> {
        Ok(sigmoid(
            self.gold_score(prompt, a)? - self.gold_score(prompt, b)?,
        ))
    }

    pub fn sample_prompt(&self, rng: &mut impl Rng) -> TokenSeq {
        random_prompt(&self.vocab(), self.prompt_len, rng)
    }

    pub fn save(&self, path: &Path) -> SeraResult<()> {
        let file = WorldFile {
            vocab_size: self.vocab().size(),
            prompt_len: self.prompt_len,
            response_len_max: self.response_len_max,
            seed: self.seed,
            gold_logits: self.gold.logits().to_vec(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> SeraResult<Self> {
        let file: WorldFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let vocab = Vocab::new(file.vocab_size)?;
        let gold = TabularPolicy::new(vocab, file.gold_logits)?;
        if file.prompt_len == 0 || file.response_len_max == 0 {
            return Err(SeraError::InvalidArgument(
                "world file has zero prompt_len or response_len_max".to_string(),
            ));
        }
        Ok(SyntheticWorld {
            gold,
            prompt_len: file.prompt_len,
            response_len_max: file.response_len_max,
            seed: file.seed,
        })
    }
}

/// Generates `n_pairs` labeled preference pairs plus the audit sidecar.
///
/// Per pair: a random prompt, two distinct responses sampled from the
/// `behavior` policy under `controls`, a base ordering from the gold scores
/// (argmax, or a Bernoulli draw when `stochastic_labels`), then at most one
/// corruption — flip with probability `flip_rate`, otherwise longer-wins
/// with probability `length_bias_rate` (a no-op recorded as clean when the
/// lengths are equal). All randomness is derived from `controls.seed`, and
/// every draw is consumed unconditionally so that changing one rate never
/// shifts the stream of another.
///
/// The audit record stores the gold scores of the stored chosen/rejected and
/// which rule fired; the same flags ride along in pair metadata, which the
/// trainer strips on ingestion.
pub fn gen_dataset(
    world: &SyntheticWorld,
    behavior: &TabularPolicy,
    n_pairs: usize,
    label: &LabelPolicy,
    controls: &SampleControls,
) -> SeraResult<(Vec<PreferencePair>, Vec<AuditRecord>)> {
    if n_pairs == 0 {
        return Err(SeraError::InvalidArgument(
            "n_pairs must be at least 1".to_string(),
        ));
    }
    label.validate()?;
    controls.validate()?;
    if behavior.vocab() != &world.vocab() {
        return Err(SeraError::VocabMismatch {
            left: behavior.vocab().size(),
            right: world.vocab().size(),
        });
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut audits = Vec::with_capacity(n_pairs);
    for slot in 0..n_pairs as u64 {
        for attempt in 0..GEN_ATTEMPTS as u64 {
            let mut rng = derive_rng(controls.seed, "pair", &[slot, attempt]);
            let prompt = world.sample_prompt(&mut rng);
            let sample = |ix: u64| -> SeraResult<TokenSeq> {
                let c = SampleControls {
                    max_len: world.response_len_max,
                    seed: derive_seed(controls.seed, "resp", &[slot, attempt, ix]),
                    ..*controls
                };
                behavior.sample(&prompt, &c)
            };
            let resp_a = sample(0)?;
            let resp_b = sample(1)?;
            // Draws below are consumed even on the discard path to keep the
            // per-attempt stream layout fixed.
            let u_label: f64 = rng.gen();
            let u_flip: f64 = rng.gen();
            let u_len: f64 = rng.gen();
            if resp_a == resp_b {
                continue;
            }
            let g_a = world.gold_score(&prompt, &resp_a)?;
            let g_b = world.gold_score(&prompt, &resp_b)?;
            let a_first = if label.stochastic_labels {
                u_label < sigmoid(g_a - g_b)
            } else {
                g_a >= g_b
            };
            let (mut chosen, mut rejected, mut g_c, mut g_r) = if a_first {
                (resp_a, resp_b, g_a, g_b)
            } else {
                (resp_b, resp_a, g_b, g_a)
            };
            let mut was_flipped = false;
            let mut was_length_labeled = false;
            if u_flip < label.flip_rate {
                std::mem::swap(&mut chosen, &mut rejected);
                std::mem::swap(&mut g_c, &mut g_r);
                was_flipped = true;
            } else if u_len < label.length_bias_rate && chosen.len() != rejected.len() {
                if chosen.len() < rejected.len() {
                    std::mem::swap(&mut chosen, &mut rejected);
                    std::mem::swap(&mut g_c, &mut g_r);
                }
                was_length_labeled = true;
            }
            let meta = serde_json::json!({
                "source": "offline",
                "was_flipped": was_flipped,
                "was_length_labeled": was_length_labeled,
                "gold_margin": g_c - g_r,
            });
            let mut pair = PreferencePair::new(slot, prompt, chosen, rejected)?;
            pair.meta = Some(meta);
            pairs.push(pair);
            audits.push(AuditRecord {
                id: slot,
                was_flipped,
                was_length_labeled,
                gold_chosen: g_c,
                gold_rejected: g_r,
            });
            break;
        }
    }
    if pairs.len() < n_pairs {
        return Err(SeraError::GenerationShortfall {
            got: pairs.len(),
            requested: n_pairs,
        });
    }
    Ok((pairs, audits))
}

/// SFT corpus view of a dataset: (prompt, chosen) per pair, in order.
pub fn sft_corpus(pairs: &[PreferencePair]) -> Vec<(TokenSeq, TokenSeq)> {
    pairs
        .iter()
        .map(|p| (p.prompt.clone(), p.chosen.clone()))
        .collect()
}

/// Prompt pool view of a dataset, in pair order.
pub fn prompt_pool(pairs: &[PreferencePair]) -> Vec<TokenSeq> {
    pairs.iter().map(|p| p.prompt.clone()).collect()
}
