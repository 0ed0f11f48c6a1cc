//! Tabular bigram policies.
//!
//! A policy is a `(size+1) x (size+1)` logit matrix over a vocabulary of
//! `size` regular tokens plus two specials: a begin marker `bos` (id `size`)
//! that is never emitted or stored in sequences, and an end marker `eos`
//! (id `size+1`) that may appear only as the final element of a sequence.
//! Rows are indexed by the previous token (regular tokens plus bos), columns
//! by the next token (regular tokens plus eos, with eos in the last column).
//!
//! The conditional distribution for a context is the softmax of its row, so
//! log-probabilities and their gradients are exact, which is what lets every
//! downstream quantity in this crate be checked against finite differences
//! and brute-force enumeration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SeraError, SeraResult};
use crate::seed::rng_from_seed;

/// Vocabulary descriptor: `size` regular tokens with ids `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    /// At least two regular tokens, so that distinct responses always exist.
    pub fn new(size: u32) -> SeraResult<Self> {
        if size < 2 {
            return Err(SeraError::InvalidArgument(format!(
                "vocabulary needs at least 2 regular tokens, got {size}"
            )));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    /// Begin-of-sequence marker; used only as a context, never emitted.
    pub fn bos_id(&self) -> u32 {
        self.size
    }

    /// End-of-sequence marker; may only terminate a sequence.
    pub fn eos_id(&self) -> u32 {
        self.size + 1
    }

    /// Rows of the logit matrix: regular tokens plus the bos context.
    pub fn n_rows(&self) -> usize {
        self.size as usize + 1
    }

    /// Columns of the logit matrix: regular tokens plus eos.
    pub fn n_cols(&self) -> usize {
        self.size as usize + 1
    }

    fn is_regular(&self, token: u32) -> bool {
        token < self.size
    }
}

/// Validated token sequence: every element is a regular token, except that
/// the final element may be eos. The bos marker is never stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, vocab: &Vocab) -> SeraResult<Self> {
        for (position, &token) in tokens.iter().enumerate() {
            let last = position + 1 == tokens.len();
            if vocab.is_regular(token) {
                continue;
            }
            if token == vocab.eos_id() && last {
                continue;
            }
            let reason = if token == vocab.eos_id() {
                "eos may appear only as the final element".to_string()
            } else if token == vocab.bos_id() {
                "bos is never stored in a sequence".to_string()
            } else {
                format!("outside vocabulary of {} regular tokens", vocab.size())
            };
            return Err(SeraError::InvalidToken {
                token,
                position,
                reason,
            });
        }
        Ok(TokenSeq(tokens))
    }

    pub fn empty() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<u32> {
        self.0.last().copied()
    }

    /// True when the sequence is terminated by the vocabulary's eos marker.
    pub fn ends_with_eos(&self, vocab: &Vocab) -> bool {
        self.last() == Some(vocab.eos_id())
    }
}

/// Controls for seeded nucleus sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleControls {
    /// Logits are scaled by `1/temperature` before the softmax.
    pub temperature: f64,
    /// Nucleus mass: the smallest probability prefix reaching `top_p` is
    /// kept (inclusive at the boundary) and renormalized.
    pub top_p: f64,
    /// Generation stops after `max_len` tokens even without eos.
    pub max_len: usize,
    /// Seed for the draw stream; identical controls replay identically.
    pub seed: u64,
}

impl SampleControls {
    pub fn validate(&self) -> SeraResult<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(SeraError::InvalidArgument(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SeraError::InvalidArgument(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_len == 0 {
            return Err(SeraError::InvalidArgument(
                "max_len must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Bigram policy: a dense logit matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// Wraps a full logit matrix; all entries must be finite.
    pub fn new(vocab: Vocab, logits: Vec<f64>) -> SeraResult<Self> {
        let expect = vocab.n_rows() * vocab.n_cols();
        if logits.len() != expect {
            return Err(SeraError::InvalidArgument(format!(
                "logit matrix needs {expect} entries for vocabulary size {}, got {}",
                vocab.size(),
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().position(|x| !x.is_finite()) {
            return Err(SeraError::InvalidArgument(format!(
                "logit entry {bad} is not finite"
            )));
        }
        Ok(TabularPolicy { vocab, logits })
    }

    /// All-zero logits: every conditional is uniform over `size + 1` columns.
    pub fn uniform(vocab: Vocab) -> Self {
        let n = vocab.n_rows() * vocab.n_cols();
        TabularPolicy {
            vocab,
            logits: vec![0.0; n],
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn n_params(&self) -> usize {
        self.logits.len()
    }

    fn n_cols(&self) -> usize {
        self.vocab.n_cols()
    }

    /// Row index for a context token (regular or bos).
    fn ctx_row(&self, token: u32, position: usize) -> SeraResult<usize> {
        if self.vocab.is_regular(token) {
            Ok(token as usize)
        } else if token == self.vocab.bos_id() {
            Ok(self.vocab.size() as usize)
        } else {
            Err(SeraError::InvalidToken {
                token,
                position,
                reason: "cannot condition on eos".to_string(),
            })
        }
    }

    /// Column index for an emitted token (regular or eos).
    fn next_col(&self, token: u32, position: usize, last: bool) -> SeraResult<usize> {
        if self.vocab.is_regular(token) {
            Ok(token as usize)
        } else if token == self.vocab.eos_id() && last {
            Ok(self.vocab.size() as usize)
        } else {
            let reason = if token == self.vocab.eos_id() {
                "eos may appear only as the final element".to_string()
            } else {
                format!("outside vocabulary of {} regular tokens", self.vocab.size())
            };
            Err(SeraError::InvalidToken {
                token,
                position,
                reason,
            })
        }
    }

    /// Validated `(row, col)` index pairs for scoring `response` after
    /// `prompt`. The prompt's last token (or bos when empty) is the first
    /// context; each response token then becomes the next context.
    fn steps(&self, prompt: &TokenSeq, response: &TokenSeq) -> SeraResult<Vec<(usize, usize)>> {
        if response.is_empty() {
            return Err(SeraError::InvalidArgument(
                "response must be non-empty".to_string(),
            ));
        }
        for (position, &token) in prompt.tokens().iter().enumerate() {
            if !self.vocab.is_regular(token) {
                return Err(SeraError::InvalidToken {
                    token,
                    position,
                    reason: "prompts may contain only regular tokens".to_string(),
                });
            }
        }
        let mut ctx = match prompt.last() {
            Some(t) => t,
            None => self.vocab.bos_id(),
        };
        let mut out = Vec::with_capacity(response.len());
        for (position, &token) in response.tokens().iter().enumerate() {
            let last = position + 1 == response.len();
            let row = self.ctx_row(ctx, position)?;
            let col = self.next_col(token, position, last)?;
            out.push((row, col));
            ctx = token;
        }
        Ok(out)
    }

    /// Log-softmax of one row.
    fn row_log_softmax(&self, row: usize) -> Vec<f64> {
        let cols = self.n_cols();
        let slice = &self.logits[row * cols..(row + 1) * cols];
        log_softmax(slice)
    }

    /// Softmax of one row.
    fn row_softmax(&self, row: usize) -> Vec<f64> {
        let mut p = self.row_log_softmax(row);
        for x in &mut p {
            *x = x.exp();
        }
        p
    }

    /// Exact log-probability of `response` given `prompt`.
    pub fn log_prob(&self, prompt: &TokenSeq, response: &TokenSeq) -> SeraResult<f64> {
        let steps = self.steps(prompt, response)?;
        let mut total = 0.0;
        for (row, col) in steps {
            total += self.row_log_softmax(row)[col];
        }
        Ok(total)
    }

    /// Exact gradient of [`Self::log_prob`] with respect to every logit,
    /// returned as a row-major matrix of the same shape. Rows never used as
    /// a context stay identically zero.
    pub fn log_prob_grad(&self, prompt: &TokenSeq, response: &TokenSeq) -> SeraResult<Vec<f64>> {
        let steps = self.steps(prompt, response)?;
        let cols = self.n_cols();
        let mut grad = vec![0.0; self.logits.len()];
        for (row, col) in steps {
            let probs = self.row_softmax(row);
            let base = row * cols;
            for (u, &p) in probs.iter().enumerate() {
                grad[base + u] -= p;
            }
            grad[base + col] += 1.0;
        }
        Ok(grad)
    }

    /// Seeded nucleus sampling. Generation starts from the prompt's last
    /// token (bos when empty) and stops at eos or after `max_len` tokens;
    /// a sampled eos is kept as the final element.
    pub fn sample(&self, prompt: &TokenSeq, controls: &SampleControls) -> SeraResult<TokenSeq> {
        controls.validate()?;
        for (position, &token) in prompt.tokens().iter().enumerate() {
            if !self.vocab.is_regular(token) {
                return Err(SeraError::InvalidToken {
                    token,
                    position,
                    reason: "prompts may contain only regular tokens".to_string(),
                });
            }
        }
        let mut rng = rng_from_seed(controls.seed);
        let cols = self.n_cols();
        let eos_col = self.vocab.size() as usize;
        let mut ctx = prompt.last().unwrap_or_else(|| self.vocab.bos_id());
        let mut out: Vec<u32> = Vec::new();
        while out.len() < controls.max_len {
            let row = self.ctx_row(ctx, out.len())?;
            let slice = &self.logits[row * cols..(row + 1) * cols];
            let scaled: Vec<f64> = slice.iter().map(|x| x / controls.temperature).collect();
            if scaled.iter().any(|x| !x.is_finite()) {
                return Err(SeraError::InvalidArgument(format!(
                    "temperature {} overflows the scaled logits",
                    controls.temperature
                )));
            }
            let mut probs = log_softmax(&scaled);
            for x in &mut probs {
                *x = x.exp();
            }
            // Nucleus: sort by probability descending (ties by column index
            // ascending), keep the smallest prefix reaching top_p.
            let mut order: Vec<usize> = (0..cols).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut kept = Vec::with_capacity(cols);
            let mut acc = 0.0;
            for &c in &order {
                kept.push(c);
                acc += probs[c];
                if acc >= controls.top_p {
                    break;
                }
            }
            let u: f64 = rng.gen::<f64>() * acc;
            let mut cum = 0.0;
            let mut picked = *kept.last().expect("kept set is never empty");
            for &c in &kept {
                cum += probs[c];
                if u < cum {
                    picked = c;
                    break;
                }
            }
            if picked == eos_col {
                out.push(self.vocab.eos_id());
                break;
            }
            let token = picked as u32;
            out.push(token);
            ctx = token;
        }
        TokenSeq::new(out, &self.vocab)
    }

    /// Writes the policy as a flat text artifact: the vocabulary size on the
    /// first line, then one line per row of the logit matrix. Values are
    /// printed with shortest round-trip precision, so a re-read is bit-exact.
    pub fn save(&self, path: &Path) -> SeraResult<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let cols = self.n_cols();
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.vocab.size());
        for row in 0..self.vocab.n_rows() {
            let mut first = true;
            for col in 0..cols {
                if !first {
                    s.push(' ');
                }
                let _ = write!(s, "{:?}", self.logits[row * cols + col]);
                first = false;
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> SeraResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            SeraError::DataFormat { line, reason, .. } => SeraError::DataFormat {
                path: path.display().to_string(),
                line,
                reason,
            },
            other => other,
        })
    }

    pub fn from_text(text: &str) -> SeraResult<Self> {
        let fmt = |line: usize, reason: String| SeraError::DataFormat {
            path: "<policy>".to_string(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| fmt(1, "empty policy file".to_string()))?;
        let size: u32 = first
            .trim()
            .parse()
            .map_err(|_| fmt(1, format!("expected vocabulary size, got {first:?}")))?;
        let vocab = Vocab::new(size)?;
        let cols = vocab.n_cols();
        let mut logits = Vec::with_capacity(vocab.n_rows() * cols);
        let mut rows = 0usize;
        for (ix, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::with_capacity(cols);
            for field in line.split_whitespace() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| fmt(ix + 1, format!("bad logit value {field:?}")))?;
                row.push(v);
            }
            if row.len() != cols {
                return Err(fmt(
                    ix + 1,
                    format!("expected {cols} columns, got {}", row.len()),
                ));
            }
            logits.extend_from_slice(&row);
            rows += 1;
        }
        if rows != vocab.n_rows() {
            return Err(fmt(
                0,
                format!("expected {} rows, got {rows}", vocab.n_rows()),
            ));
        }
        TabularPolicy::new(vocab, logits)
    }
}

/// Numerically stable log-softmax of a slice.
fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Fits a policy to `(prompt, response)` pairs by full-batch gradient ascent
/// on the mean response log-probability, starting from all-zero logits.
/// Zero epochs returns the uniform policy untouched.
pub fn fit_sft(
    vocab: Vocab,
    corpus: &[(TokenSeq, TokenSeq)],
    epochs: usize,
    lr: f64,
) -> SeraResult<TabularPolicy> {
    if corpus.is_empty() {
        return Err(SeraError::InvalidArgument(
            "sft corpus must be non-empty".to_string(),
        ));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(SeraError::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    let mut policy = TabularPolicy::uniform(vocab);
    let n = corpus.len() as f64;
    for _ in 0..epochs {
        let mut mean_grad = vec![0.0; policy.n_params()];
        for (prompt, response) in corpus {
            let g = policy.log_prob_grad(prompt, response)?;
            for (acc, gi) in mean_grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        let logits = policy.logits_mut();
        for (theta, g) in logits.iter_mut().zip(&mean_grad) {
            *theta += lr * g / n;
        }
    }
    Ok(policy)
}

/// Mean response log-probability of a corpus; the quantity `fit_sft` ascends.
pub fn mean_log_prob(policy: &TabularPolicy, corpus: &[(TokenSeq, TokenSeq)]) -> SeraResult<f64> {
    if corpus.is_empty() {
        return Err(SeraError::InvalidArgument(
            "corpus must be non-empty".to_string(),
        ));
    }
    let mut total = 0.0;
    for (prompt, response) in corpus {
        total += policy.log_prob(prompt, response)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Samples `len` regular tokens uniformly; used for synthetic prompts.
pub fn random_prompt(vocab: &Vocab, len: usize, rng: &mut impl Rng) -> TokenSeq {
    let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab.size())).collect();
    TokenSeq::new(tokens, vocab).expect("uniform draws over regular tokens are always valid")
}

/// Collects the distinct sequences of a sample set; handy in tests and
/// downstream dedup checks.
pub fn distinct_count(seqs: &[TokenSeq]) -> usize {
    seqs.iter().collect::<HashSet<_>>().len()
}
