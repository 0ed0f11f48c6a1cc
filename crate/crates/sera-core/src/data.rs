//! Preference pairs and their on-disk JSONL form.
//!
//! One pair per line with fields `id`, `prompt`, `chosen`, `rejected`, and an
//! optional `meta` object. Token arrays are raw ids, including the eos id
//! when a response is terminated. Hidden provenance produced by the synthetic
//! world (label flips, length-based labels, gold scores) lives in a separate
//! audit sidecar file sharing the id space, never in the pairs themselves, so
//! training code cannot read it.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{SeraError, SeraResult};
use crate::policy::{TokenSeq, Vocab};

/// One labeled preference: `chosen` was preferred over `rejected` for
/// `prompt`. The two responses are distinct by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub id: u64,
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub meta: Option<serde_json::Value>,
}

impl PreferencePair {
    pub fn new(
        id: u64,
        prompt: TokenSeq,
        chosen: TokenSeq,
        rejected: TokenSeq,
    ) -> SeraResult<Self> {
        if chosen == rejected {
            return Err(SeraError::InvalidArgument(format!(
                "pair {id}: chosen and rejected responses are identical"
            )));
        }
        Ok(PreferencePair {
            id,
            prompt,
            chosen,
            rejected,
            meta: None,
        })
    }

    /// Same pair with the preference direction reversed.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            id: self.id,
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            meta: self.meta.clone(),
        }
    }
}

/// Wire form of a pair; kept separate so deserialization cannot bypass
/// sequence validation.
#[derive(Serialize, Deserialize)]
struct RawPair {
    id: u64,
    prompt: Vec<u32>,
    chosen: Vec<u32>,
    rejected: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// Reads a JSONL pair file, validating every sequence against `vocab`.
/// Errors carry the 1-based line number. An empty file is an empty dataset.
pub fn read_jsonl(path: &Path, vocab: &Vocab) -> SeraResult<Vec<PreferencePair>> {
    let text = fs::read_to_string(path)?;
    let loc = path.display().to_string();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (ix, line) in text.lines().enumerate() {
        let lineno = ix + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPair = serde_json::from_str(line).map_err(|e| SeraError::DataFormat {
            path: loc.clone(),
            line: lineno,
            reason: format!("malformed pair: {e}"),
        })?;
        let field = |name: &str, tokens: Vec<u32>| {
            TokenSeq::new(tokens, vocab).map_err(|e| SeraError::DataFormat {
                path: loc.clone(),
                line: lineno,
                reason: format!("bad {name}: {e}"),
            })
        };
        let prompt = field("prompt", raw.prompt)?;
        let chosen = field("chosen", raw.chosen)?;
        let rejected = field("rejected", raw.rejected)?;
        if chosen == rejected {
            return Err(SeraError::DataFormat {
                path: loc.clone(),
                line: lineno,
                reason: format!("pair {}: chosen and rejected are identical", raw.id),
            });
        }
        if !seen.insert(raw.id) {
            return Err(SeraError::DataFormat {
                path: loc.clone(),
                line: lineno,
                reason: format!("duplicate pair id {}", raw.id),
            });
        }
        out.push(PreferencePair {
            id: raw.id,
            prompt,
            chosen,
            rejected,
            meta: raw.meta,
        });
    }
    Ok(out)
}

/// Writes pairs as JSONL, one object per line, preserving order.
pub fn write_jsonl(pairs: &[PreferencePair], path: &Path) -> SeraResult<()> {
    let mut buf = Vec::new();
    for pair in pairs {
        let raw = RawPair {
            id: pair.id,
            prompt: pair.prompt.tokens().to_vec(),
            chosen: pair.chosen.tokens().to_vec(),
            rejected: pair.rejected.tokens().to_vec(),
            meta: pair.meta.clone(),
        };
        serde_json::to_writer(&mut buf, &raw)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Hidden provenance for one generated pair. Only audit tooling reads this;
/// the trainer API never sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: u64,
    /// Label was swapped away from the gold ordering.
    pub was_flipped: bool,
    /// Label was decided by response length rather than gold score.
    pub was_length_labeled: bool,
    /// Gold score of the response stored as chosen.
    pub gold_chosen: f64,
    /// Gold score of the response stored as rejected.
    pub gold_rejected: f64,
}

/// Writes the audit sidecar as JSONL in pair order.
pub fn write_audit(records: &[AuditRecord], path: &Path) -> SeraResult<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_audit(path: &Path) -> SeraResult<Vec<AuditRecord>> {
    let text = fs::read_to_string(path)?;
    let loc = path.display().to_string();
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: AuditRecord = serde_json::from_str(line).map_err(|e| SeraError::DataFormat {
            path: loc.clone(),
            line: ix + 1,
            reason: format!("malformed audit record: {e}"),
        })?;
        out.push(r);
    }
    Ok(out)
}
