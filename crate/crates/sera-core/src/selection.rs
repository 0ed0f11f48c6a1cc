//! Margin-based sample selection over a history of policy snapshots.
//!
//! At iteration `t >= 2` each pair is scored with an ensemble reward built
//! from consecutive snapshot log-ratios:
//!
//! ```text
//! t = 2:   r(y) = log pi_1(y)/pi_0(y)
//! t >= 3:  r(y) = (1-gamma) log pi_{t-1}(y)/pi_{t-2}(y)
//!                 + gamma   log pi_{t-2}(y)/pi_{t-3}(y)
//! ```
//!
//! The pair margin is `r(chosen) - r(rejected)`; the top-k margins are kept
//! for the next training round. Ties break toward the smaller pair id, which
//! together with exact arithmetic makes selection fully deterministic.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::PreferencePair;
use crate::error::{SeraError, SeraResult};
use crate::losses::implicit_reward;
use crate::policy::{TabularPolicy, TokenSeq};

/// Snapshots produced by training: index 0 is the starting (reference)
/// policy, index `t` the policy after iteration `t`.
#[derive(Debug, Clone)]
pub struct PolicyHistory {
    snapshots: Vec<TabularPolicy>,
}

impl PolicyHistory {
    pub fn new(snapshots: Vec<TabularPolicy>) -> SeraResult<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| SeraError::InvalidArgument("history needs a snapshot".to_string()))?;
        let vocab = *first.vocab();
        for s in &snapshots {
            if *s.vocab() != vocab {
                return Err(SeraError::VocabMismatch {
                    left: vocab.size(),
                    right: s.vocab().size(),
                });
            }
        }
        Ok(PolicyHistory { snapshots })
    }

    pub fn starting(policy: TabularPolicy) -> Self {
        PolicyHistory {
            snapshots: vec![policy],
        }
    }

    pub fn push(&mut self, policy: TabularPolicy) -> SeraResult<()> {
        if policy.vocab() != self.snapshots[0].vocab() {
            return Err(SeraError::VocabMismatch {
                left: self.snapshots[0].vocab().size(),
                right: policy.vocab().size(),
            });
        }
        self.snapshots.push(policy);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn get(&self, ix: usize) -> SeraResult<&TabularPolicy> {
        self.snapshots
            .get(ix)
            .ok_or(SeraError::IterationOutOfRange {
                t: ix,
                len: self.snapshots.len(),
            })
    }

    pub fn latest(&self) -> &TabularPolicy {
        self.snapshots.last().expect("history is never empty")
    }

    pub fn snapshots(&self) -> &[TabularPolicy] {
        &self.snapshots
    }
}

/// One pair's ensemble-reward accounting at a given iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginRecord {
    pub pair_id: u64,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    pub margin: f64,
}

/// Ensemble reward of one response at iteration `t`.
///
/// Requires `t >= 2` and a history holding snapshots up to index `t-1`.
/// `gamma` blends the latest log-ratio with the previous one once three
/// snapshots exist; the endpoints are special-cased so that `gamma = 0`
/// reproduces the plain two-snapshot reward bit-for-bit and `gamma = 1`
/// uses the older ratio alone.
pub fn ensemble_reward(
    history: &PolicyHistory,
    t: usize,
    gamma: f64,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> SeraResult<f64> {
    validate_gamma(gamma)?;
    if t < 2 || history.len() < t {
        return Err(SeraError::IterationOutOfRange {
            t,
            len: history.len(),
        });
    }
    let newest = implicit_reward(history.get(t - 1)?, history.get(t - 2)?, prompt, response)?;
    if t == 2 {
        return Ok(newest);
    }
    if gamma == 0.0 {
        return Ok(newest);
    }
    let older = implicit_reward(history.get(t - 2)?, history.get(t - 3)?, prompt, response)?;
    if gamma == 1.0 {
        return Ok(older);
    }
    Ok((1.0 - gamma) * newest + gamma * older)
}

fn validate_gamma(gamma: f64) -> SeraResult<()> {
    if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
        return Err(SeraError::InvalidArgument(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Ensemble margins for every pair, in input order.
pub fn ensemble_margins(
    history: &PolicyHistory,
    t: usize,
    gamma: f64,
    data: &[PreferencePair],
) -> SeraResult<Vec<MarginRecord>> {
    let mut out = Vec::with_capacity(data.len());
    for pair in data {
        let reward_chosen = ensemble_reward(history, t, gamma, &pair.prompt, &pair.chosen)?;
        let reward_rejected = ensemble_reward(history, t, gamma, &pair.prompt, &pair.rejected)?;
        out.push(MarginRecord {
            pair_id: pair.id,
            reward_chosen,
            reward_rejected,
            margin: reward_chosen - reward_rejected,
        });
    }
    Ok(out)
}

/// Ids of the `k` largest margins. Ties break toward the smaller pair id, so
/// for fixed records the selected set is monotone in `k`: the top-k set is
/// always contained in the top-(k+1) set.
pub fn select_top_k(records: &[MarginRecord], k: usize) -> SeraResult<BTreeSet<u64>> {
    if k > records.len() {
        return Err(SeraError::SelectionTooLarge {
            k,
            n: records.len(),
        });
    }
    let mut order: Vec<&MarginRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        b.margin
            .total_cmp(&a.margin)
            .then(a.pair_id.cmp(&b.pair_id))
    });
    Ok(order[..k].iter().map(|r| r.pair_id).collect())
}

/// Jaccard similarity of two id sets; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Writes a selected set as one pair id per line, ascending.
pub fn write_selected(set: &BTreeSet<u64>, path: &Path) -> SeraResult<()> {
    let mut s = String::new();
    for id in set {
        let _ = writeln!(s, "{id}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_selected(path: &Path) -> SeraResult<BTreeSet<u64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeSet::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let id: u64 = line.trim().parse().map_err(|_| SeraError::DataFormat {
            path: path.display().to_string(),
            line: ix + 1,
            reason: format!("bad pair id {line:?}"),
        })?;
        out.insert(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn vocab(n: u32) -> Vocab {
        Vocab::new(n).unwrap()
    }

    fn seq(tokens: &[u32], v: &Vocab) -> TokenSeq {
        TokenSeq::new(tokens.to_vec(), v).unwrap()
    }

    fn random_policy(v: Vocab, seed: u64) -> TabularPolicy {
        let mut rng = crate::seed::rng_from_seed(seed);
        let logits: Vec<f64> = (0..v.n_rows() * v.n_cols())
            .map(|_| (rng.gen::<f64>() - 0.5) * 3.0)
            .collect();
        TabularPolicy::new(v, logits).unwrap()
    }

    fn record(pair_id: u64, margin: f64) -> MarginRecord {
        MarginRecord {
            pair_id,
            reward_chosen: margin,
            reward_rejected: 0.0,
            margin,
        }
    }

    /// Builds a three-snapshot history whose consecutive single-token
    /// log-ratios for token 0 after context 0 are exactly `newest` and
    /// `older`.
    fn ratio_history(v: Vocab, older: f64, newest: f64) -> PolicyHistory {
        let cols = v.n_cols();
        let base = TabularPolicy::uniform(v);
        // Normalized row: log p(0) = x - lse(row). With row (x, 0, ..., 0)
        // the log-ratio vs uniform is x - lse + ln(cols).
        let with_logit = |x: f64| {
            let mut l = vec![0.0; v.n_rows() * cols];
            l[0] = x;
            TabularPolicy::new(v, l).unwrap()
        };
        // Choose logits whose successive log-ratio differences are the two
        // targets; solve numerically by inverting f(x) = log p0(x).
        let log_p0 = |x: f64| {
            let lse = {
                let m = x.max(0.0);
                m + ((x - m).exp() + (cols as f64 - 1.0) * (0.0f64 - m).exp()).ln()
            };
            x - lse
        };
        let invert = |target: f64| {
            // log p0 is strictly increasing in x; bisection suffices.
            let mut lo = -60.0f64;
            let mut hi = 60.0f64;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if log_p0(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let p_uniform = -(cols as f64).ln();
        let p1 = log_p0(invert(p_uniform + older));
        let x2 = invert(p1 + newest);
        let snap1 = with_logit(invert(p_uniform + older));
        let snap2 = with_logit(x2);
        PolicyHistory::new(vec![base, snap1, snap2]).unwrap()
    }

    #[test]
    fn gamma_zero_uses_only_the_newest_ratio() {
        let v = vocab(4);
        let history = PolicyHistory::new(vec![
            random_policy(v, 1),
            random_policy(v, 2),
            random_policy(v, 3),
        ])
        .unwrap();
        let prompt = seq(&[0], &v);
        let resp = seq(&[1, 2], &v);
        let r = ensemble_reward(&history, 3, 0.0, &prompt, &resp).unwrap();
        let newest = implicit_reward(
            history.get(2).unwrap(),
            history.get(1).unwrap(),
            &prompt,
            &resp,
        )
        .unwrap();
        assert_eq!(r, newest, "gamma = 0 must be bit-exact");
    }

    #[test]
    fn gamma_one_uses_only_the_older_ratio() {
        let v = vocab(4);
        let history = PolicyHistory::new(vec![
            random_policy(v, 4),
            random_policy(v, 5),
            random_policy(v, 6),
        ])
        .unwrap();
        let prompt = seq(&[1], &v);
        let resp = seq(&[0], &v);
        let r = ensemble_reward(&history, 3, 1.0, &prompt, &resp).unwrap();
        let older = implicit_reward(
            history.get(1).unwrap(),
            history.get(0).unwrap(),
            &prompt,
            &resp,
        )
        .unwrap();
        assert_eq!(r, older, "gamma = 1 must be bit-exact");
    }

    #[test]
    fn hand_built_convex_combination() {
        // Consecutive ratios 0.4 (newest) and 0.1 (older), gamma 0.3:
        // 0.7 * 0.4 + 0.3 * 0.1 = 0.31.
        let v = vocab(4);
        let history = ratio_history(v, 0.1, 0.4);
        let prompt = seq(&[0], &v);
        let resp = seq(&[0], &v);
        let newest = implicit_reward(
            history.get(2).unwrap(),
            history.get(1).unwrap(),
            &prompt,
            &resp,
        )
        .unwrap();
        let older = implicit_reward(
            history.get(1).unwrap(),
            history.get(0).unwrap(),
            &prompt,
            &resp,
        )
        .unwrap();
        assert_relative_eq!(newest, 0.4, epsilon = 1e-9);
        assert_relative_eq!(older, 0.1, epsilon = 1e-9);
        let r = ensemble_reward(&history, 3, 0.3, &prompt, &resp).unwrap();
        assert_relative_eq!(r, 0.31, epsilon = 1e-9);
    }

    #[test]
    fn iteration_two_ignores_gamma() {
        let v = vocab(4);
        let history = PolicyHistory::new(vec![random_policy(v, 7), random_policy(v, 8)]).unwrap();
        let prompt = seq(&[2], &v);
        let resp = seq(&[1, 5], &v);
        let a = ensemble_reward(&history, 2, 0.0, &prompt, &resp).unwrap();
        let b = ensemble_reward(&history, 2, 0.9, &prompt, &resp).unwrap();
        assert_eq!(a, b);
        let plain = implicit_reward(
            history.get(1).unwrap(),
            history.get(0).unwrap(),
            &prompt,
            &resp,
        )
        .unwrap();
        assert_eq!(a, plain);
    }

    #[test]
    fn out_of_range_iterations_error() {
        let v = vocab(4);
        let history = PolicyHistory::new(vec![random_policy(v, 9), random_policy(v, 10)]).unwrap();
        let prompt = seq(&[0], &v);
        let resp = seq(&[1], &v);
        assert!(ensemble_reward(&history, 1, 0.0, &prompt, &resp).is_err());
        assert!(ensemble_reward(&history, 3, 0.0, &prompt, &resp).is_err());
        assert!(ensemble_reward(&history, 2, 1.5, &prompt, &resp).is_err());
    }

    #[test]
    fn margins_preserve_input_order_and_arithmetic() {
        let v = vocab(5);
        let history = PolicyHistory::new(vec![random_policy(v, 11), random_policy(v, 12)]).unwrap();
        let pairs = vec![
            PreferencePair::new(10, seq(&[0], &v), seq(&[1], &v), seq(&[2], &v)).unwrap(),
            PreferencePair::new(3, seq(&[1], &v), seq(&[0, 4], &v), seq(&[2], &v)).unwrap(),
        ];
        let records = ensemble_margins(&history, 2, 0.0, &pairs).unwrap();
        assert_eq!(records[0].pair_id, 10);
        assert_eq!(records[1].pair_id, 3);
        for r in &records {
            assert_eq!(r.margin, r.reward_chosen - r.reward_rejected);
        }
    }

    #[test]
    fn margin_equals_plain_irm_at_iteration_two() {
        let v = vocab(5);
        let p0 = random_policy(v, 13);
        let p1 = random_policy(v, 14);
        let history = PolicyHistory::new(vec![p0.clone(), p1.clone()]).unwrap();
        let pair = PreferencePair::new(0, seq(&[3], &v), seq(&[0, 1], &v), seq(&[2], &v)).unwrap();
        let records = ensemble_margins(&history, 2, 0.7, std::slice::from_ref(&pair)).unwrap();
        let direct = crate::losses::irm(&p1, &p0, &pair).unwrap();
        assert_eq!(records[0].margin, direct, "reduction must be bit-exact");
    }

    #[test]
    fn top_k_selects_largest_margins() {
        let records = vec![
            record(0, 0.5),
            record(1, -0.2),
            record(2, 0.9),
            record(3, 0.1),
        ];
        let top = select_top_k(&records, 2).unwrap();
        assert_eq!(top.into_iter().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn top_k_ties_break_toward_smaller_id() {
        let records = vec![record(5, 1.0), record(2, 1.0), record(9, 1.0)];
        let top = select_top_k(&records, 2).unwrap();
        assert_eq!(top.into_iter().collect::<Vec<_>>(), vec![2, 5]);
    }

    #[test]
    fn top_k_edges() {
        let records = vec![record(0, 0.1), record(1, 0.2)];
        assert!(select_top_k(&records, 0).unwrap().is_empty());
        assert_eq!(select_top_k(&records, 2).unwrap().len(), 2);
        assert!(select_top_k(&records, 3).is_err());
    }

    #[test]
    fn selection_is_scale_invariant() {
        let mut rng = crate::seed::rng_from_seed(15);
        let records: Vec<MarginRecord> = (0..40)
            .map(|i| record(i, rng.gen::<f64>() * 4.0 - 2.0))
            .collect();
        let scaled: Vec<MarginRecord> = records
            .iter()
            .map(|r| record(r.pair_id, 2.5 * r.margin))
            .collect();
        for k in [0usize, 1, 7, 40] {
            assert_eq!(
                select_top_k(&records, k).unwrap(),
                select_top_k(&scaled, k).unwrap()
            );
        }
    }

    #[test]
    fn jaccard_unit_examples() {
        let a: BTreeSet<u64> = [1, 2, 3].into_iter().collect();
        let b: BTreeSet<u64> = [2, 3, 4].into_iter().collect();
        assert_relative_eq!(jaccard(&a, &b), 0.5, epsilon = 1e-15);
        assert_eq!(jaccard(&a, &a), 1.0);
        let empty = BTreeSet::new();
        assert_eq!(jaccard(&empty, &empty), 1.0);
        assert_eq!(jaccard(&a, &empty), 0.0);
    }

    #[test]
    fn selected_set_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("selected.txt");
        let set: BTreeSet<u64> = [9, 1, 4].into_iter().collect();
        write_selected(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "1\n4\n9\n", "ids must be ascending, one per line");
        assert_eq!(read_selected(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn top_k_sets_are_nested(seed in 0u64..1000, n in 1usize..60) {
            let mut rng = crate::seed::rng_from_seed(seed);
            let records: Vec<MarginRecord> = (0..n)
                .map(|i| {
                    // Coarse margins force plenty of ties.
                    let m = (rng.gen_range(-3i32..=3)) as f64 * 0.5;
                    record(i as u64, m)
                })
                .collect();
            let mut prev = BTreeSet::new();
            for k in 0..=n {
                let cur = select_top_k(&records, k).unwrap();
                prop_assert_eq!(cur.len(), k);
                prop_assert!(prev.is_subset(&cur), "top-{} not nested in top-{}", k - 1, k);
                prev = cur;
            }
        }
    }
}
