//! Evaluation against the synthetic world's gold oracle.
//!
//! The gold model's log-likelihood stands in for an external judge
//! everywhere: win rates compare gold scores of paired generations, the
//! correlation reports regress implicit rewards against gold score and
//! response length, and the variance check Monte-Carlo-verifies that
//! weighting losses by the true preference probability never increases the
//! variance of the estimated risk.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::data::{AuditRecord, PreferencePair};
use crate::error::{SeraError, SeraResult};
use crate::losses::{implicit_reward, loss, LossKind};
use crate::policy::{SampleControls, TabularPolicy, TokenSeq};
use crate::seed::{derive_rng, derive_seed};
use crate::selection::{MarginRecord, PolicyHistory};
use crate::synth::SyntheticWorld;

/// Gold scores closer than this count as a tie.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinRateResult {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    /// (wins + ties/2) / total.
    pub score: f64,
}

/// Gold-judged win rate of policy `a` over policy `b`.
///
/// Each prompt gets one generation from each policy using the SAME derived
/// seed, so swapping `a` and `b` mirrors the tally exactly (wins and losses
/// exchange, ties stay). Scores then sum to 1 up to one rounding each.
pub fn win_rate(
    world: &SyntheticWorld,
    a: &TabularPolicy,
    b: &TabularPolicy,
    prompts: &[TokenSeq],
    controls: &SampleControls,
) -> SeraResult<WinRateResult> {
    if prompts.is_empty() {
        return Err(SeraError::InvalidArgument(
            "win_rate needs at least one prompt".to_string(),
        ));
    }
    controls.validate()?;
    let (mut wins, mut ties, mut losses) = (0usize, 0usize, 0usize);
    for (i, prompt) in prompts.iter().enumerate() {
        let c = SampleControls {
            seed: derive_seed(controls.seed, "winrate", &[i as u64]),
            ..*controls
        };
        let y_a = a.sample(prompt, &c)?;
        let y_b = b.sample(prompt, &c)?;
        let g_a = world.gold_score(prompt, &y_a)?;
        let g_b = world.gold_score(prompt, &y_b)?;
        if (g_a - g_b).abs() < TIE_EPS {
            ties += 1;
        } else if g_a > g_b {
            wins += 1;
        } else {
            losses += 1;
        }
    }
    let n = prompts.len() as f64;
    Ok(WinRateResult {
        wins,
        ties,
        losses,
        score: (wins as f64 + 0.5 * ties as f64) / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationReport {
    /// Coefficient of determination, clamped to [0, 1]; 0 by convention
    /// when either variable has zero variance.
    pub r_squared: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Ordinary least squares of y on x.
pub fn least_squares(x: &[f64], y: &[f64]) -> SeraResult<CorrelationReport> {
    if x.len() != y.len() {
        return Err(SeraError::InvalidArgument(format!(
            "mismatched regression inputs: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(SeraError::InvalidArgument(format!(
            "regression needs at least 3 points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
        sxy += (xi - mx) * (yi - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(CorrelationReport {
            r_squared: 0.0,
            slope: 0.0,
            intercept: my,
            n: x.len(),
        });
    }
    let slope = sxy / sxx;
    let r2 = (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0);
    Ok(CorrelationReport {
        r_squared: r2,
        slope,
        intercept: my - slope * mx,
        n: x.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardCorrelations {
    /// Implicit reward of the chosen response vs its gold score.
    pub vs_gold: CorrelationReport,
    /// Implicit reward of the chosen response vs its token length.
    pub vs_length: CorrelationReport,
    /// Implicit reward margin vs gold margin over the pair.
    pub margin_vs_gold_margin: CorrelationReport,
}

/// Regresses the final snapshot's implicit rewards (against the snapshot at
/// `reference_index`) on gold score and on response length.
pub fn reward_correlations(
    history: &PolicyHistory,
    reference_index: usize,
    pairs: &[PreferencePair],
    world: &SyntheticWorld,
) -> SeraResult<RewardCorrelations> {
    if pairs.len() < 3 {
        return Err(SeraError::InvalidArgument(format!(
            "correlation analysis needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let policy = history.latest();
    let reference = history.get(reference_index)?;
    let mut reward = Vec::with_capacity(pairs.len());
    let mut gold = Vec::with_capacity(pairs.len());
    let mut length = Vec::with_capacity(pairs.len());
    let mut margin = Vec::with_capacity(pairs.len());
    let mut gold_margin = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let r_c = implicit_reward(policy, reference, &pair.prompt, &pair.chosen)?;
        let r_r = implicit_reward(policy, reference, &pair.prompt, &pair.rejected)?;
        reward.push(r_c);
        gold.push(world.gold_score(&pair.prompt, &pair.chosen)?);
        length.push(pair.chosen.len() as f64);
        margin.push(r_c - r_r);
        gold_margin.push(world.gold_margin(pair)?);
    }
    Ok(RewardCorrelations {
        vs_gold: least_squares(&gold, &reward)?,
        vs_length: least_squares(&length, &reward)?,
        margin_vs_gold_margin: least_squares(&gold_margin, &margin)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditSummary {
    pub n_total: usize,
    pub n_selected: usize,
    /// Fraction of hidden-flag hits among selected / unselected pairs; an
    /// empty side reports 0.
    pub flipped_inside: f64,
    pub flipped_outside: f64,
    pub length_inside: f64,
    pub length_outside: f64,
    pub flipped_global: f64,
    pub length_global: f64,
}

/// Compares hidden corruption rates inside vs outside a selected set.
pub fn selection_audit(
    records: &[MarginRecord],
    selected: &BTreeSet<u64>,
    flags: &[AuditRecord],
) -> SeraResult<AuditSummary> {
    let by_id: HashMap<u64, &AuditRecord> = flags.iter().map(|a| (a.id, a)).collect();
    for record in records {
        if !by_id.contains_key(&record.pair_id) {
            return Err(SeraError::InvalidArgument(format!(
                "no audit record for pair {}",
                record.pair_id
            )));
        }
    }
    let known: BTreeSet<u64> = records.iter().map(|r| r.pair_id).collect();
    if let Some(stray) = selected.iter().find(|id| !known.contains(id)) {
        return Err(SeraError::InvalidArgument(format!(
            "selected id {stray} is not among the scored pairs"
        )));
    }
    let frac =
        |ids: &mut dyn Iterator<Item = u64>, flag: fn(&AuditRecord) -> bool| -> (f64, usize) {
            let (mut hits, mut n) = (0usize, 0usize);
            for id in ids {
                if flag(by_id[&id]) {
                    hits += 1;
                }
                n += 1;
            }
            (if n == 0 { 0.0 } else { hits as f64 / n as f64 }, n)
        };
    let inside: Vec<u64> = known
        .iter()
        .copied()
        .filter(|id| selected.contains(id))
        .collect();
    let outside: Vec<u64> = known
        .iter()
        .copied()
        .filter(|id| !selected.contains(id))
        .collect();
    let (flipped_inside, n_selected) = frac(&mut inside.iter().copied(), |a| a.was_flipped);
    let (flipped_outside, _) = frac(&mut outside.iter().copied(), |a| a.was_flipped);
    let (length_inside, _) = frac(&mut inside.iter().copied(), |a| a.was_length_labeled);
    let (length_outside, _) = frac(&mut outside.iter().copied(), |a| a.was_length_labeled);
    let (flipped_global, n_total) = frac(&mut known.iter().copied(), |a| a.was_flipped);
    let (length_global, _) = frac(&mut known.iter().copied(), |a| a.was_length_labeled);
    Ok(AuditSummary {
        n_total,
        n_selected,
        flipped_inside,
        flipped_outside,
        length_inside,
        length_outside,
        flipped_global,
        length_global,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceCheck {
    /// Variance of the preference-weighted (label-integrated) risk.
    pub var_bayes: f64,
    /// Variance of the label-drawn risk.
    pub var_empirical: f64,
    /// var_empirical - var_bayes.
    pub diff: f64,
    /// Monte-Carlo standard error of `diff`.
    pub diff_se: f64,
    /// Relative standard error of one variance estimate, sqrt(2/(R-1)).
    pub rel_se: f64,
}

impl VarianceCheck {
    /// The inequality direction, with a 3-sigma Monte-Carlo allowance.
    pub fn holds(&self) -> bool {
        self.var_bayes <= self.var_empirical * (1.0 + 3.0 * self.rel_se)
    }
}

const LEMMA_POOL: usize = 512;

/// Monte-Carlo check that the preference-weighted risk has variance no
/// larger than its label-drawn counterpart.
///
/// A fixed pool of (prompt, response, response) comparisons is drawn from
/// the world's gold model and pre-scored: m = `margin_fn` in the pool
/// orientation, p = true preference for that orientation. Each resample
/// draws `n_samples` pool indices (shared by both estimators) and, for the
/// empirical risk only, a label per draw — loss(m) with probability p, else
/// loss(-m); the weighted risk uses p·loss(m) + (1-p)·loss(-m). Returned
/// variances are across `n_resamples` such resamples, with an influence-
/// function standard error on their difference.
pub fn variance_lemma_check(
    world: &SyntheticWorld,
    kind: LossKind,
    margin_fn: &dyn Fn(&TokenSeq, &TokenSeq, &TokenSeq) -> SeraResult<f64>,
    n_samples: usize,
    n_resamples: usize,
    seed: u64,
) -> SeraResult<VarianceCheck> {
    if n_samples < 10 {
        return Err(SeraError::InvalidArgument(format!(
            "n_samples must be at least 10, got {n_samples}"
        )));
    }
    if n_resamples < 100 {
        return Err(SeraError::InvalidArgument(format!(
            "n_resamples must be at least 100, got {n_resamples}"
        )));
    }
    let controls = SampleControls {
        temperature: 1.0,
        top_p: 1.0,
        max_len: world.response_len_max(),
        seed,
    };
    // The comparison pool is a fixture of the world (seeded from it, not
    // from `seed`), so repeated checks vary only the resampling noise.
    let mut pool_rng = derive_rng(world.seed(), "lemma-pool", &[]);
    let mut loss_pos = Vec::with_capacity(LEMMA_POOL);
    let mut loss_neg = Vec::with_capacity(LEMMA_POOL);
    let mut p_true = Vec::with_capacity(LEMMA_POOL);
    let mut bayes = Vec::with_capacity(LEMMA_POOL);
    for i in 0..LEMMA_POOL as u64 {
        let prompt = world.sample_prompt(&mut pool_rng);
        let sample = |ix: u64| -> SeraResult<TokenSeq> {
            let c = SampleControls {
                seed: derive_seed(world.seed(), "lemma-resp", &[i, ix]),
                ..controls
            };
            world.gold().sample(&prompt, &c)
        };
        let y_a = sample(0)?;
        let y_b = sample(1)?;
        let m = margin_fn(&prompt, &y_a, &y_b)?;
        if !m.is_finite() {
            return Err(SeraError::InvalidArgument(format!(
                "margin_fn produced a non-finite margin ({m})"
            )));
        }
        let p = world.true_pref(&prompt, &y_a, &y_b)?;
        let lp = loss(kind, m);
        let ln = loss(kind, -m);
        loss_pos.push(lp);
        loss_neg.push(ln);
        p_true.push(p);
        // When both orientations cost the same, the weighting is a no-op;
        // computing it as such keeps the lemma's equality case exact
        // instead of leaving rounding residue in p*l + (1-p)*l.
        bayes.push(if lp == ln {
            lp
        } else {
            p * lp + (1.0 - p) * ln
        });
    }

    let mut risk_emp = Vec::with_capacity(n_resamples);
    let mut risk_bay = Vec::with_capacity(n_resamples);
    for k in 0..n_resamples as u64 {
        let mut rng = derive_rng(seed, "lemma-resample", &[k]);
        let mut emp = 0.0;
        let mut bay = 0.0;
        for _ in 0..n_samples {
            let ix = rng.gen_range(0..LEMMA_POOL);
            let u: f64 = rng.gen();
            emp += if u < p_true[ix] {
                loss_pos[ix]
            } else {
                loss_neg[ix]
            };
            bay += bayes[ix];
        }
        risk_emp.push(emp / n_samples as f64);
        risk_bay.push(bay / n_samples as f64);
    }

    let r = n_resamples as f64;
    let mean_emp = risk_emp.iter().sum::<f64>() / r;
    let mean_bay = risk_bay.iter().sum::<f64>() / r;
    // Influence values of the variance-difference estimator; their spread
    // gives the Monte-Carlo standard error of `diff`.
    let mut var_emp = 0.0;
    let mut var_bay = 0.0;
    let mut d = Vec::with_capacity(n_resamples);
    for (&re, &rb) in risk_emp.iter().zip(&risk_bay) {
        let de = (re - mean_emp) * (re - mean_emp);
        let db = (rb - mean_bay) * (rb - mean_bay);
        var_emp += de;
        var_bay += db;
        d.push(de - db);
    }
    var_emp /= r - 1.0;
    var_bay /= r - 1.0;
    let mean_d = d.iter().sum::<f64>() / r;
    let var_d = d.iter().map(|x| (x - mean_d) * (x - mean_d)).sum::<f64>() / (r - 1.0);
    Ok(VarianceCheck {
        var_bayes: var_bay,
        var_empirical: var_emp,
        diff: var_emp - var_bay,
        diff_se: (var_d / r).sqrt(),
        rel_se: (2.0 / (r - 1.0)).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
    use crate::synth::{gen_dataset, make_world, LabelPolicy};

    fn controls(seed: u64) -> SampleControls {
        SampleControls {
            temperature: 1.0,
            top_p: 1.0,
            max_len: 6,
            seed,
        }
    }

    fn random_policy(v: Vocab, seed: u64) -> TabularPolicy {
        use rand::Rng;
        let mut rng = crate::seed::rng_from_seed(seed);
        let logits: Vec<f64> = (0..v.n_rows() * v.n_cols())
            .map(|_| (rng.gen::<f64>() - 0.5) * 3.0)
            .collect();
        TabularPolicy::new(v, logits).unwrap()
    }

    fn prompts(world: &SyntheticWorld, n: usize, seed: u64) -> Vec<TokenSeq> {
        let mut rng = crate::seed::rng_from_seed(seed);
        (0..n).map(|_| world.sample_prompt(&mut rng)).collect()
    }

    #[test]
    fn identical_policies_tie_every_prompt() {
        let world = make_world(6, 2.0, 5).unwrap();
        let p = random_policy(world.vocab(), 1);
        let ps = prompts(&world, 64, 2);
        let r = win_rate(&world, &p, &p, &ps, &controls(3)).unwrap();
        assert_eq!(r.ties, 64);
        assert_eq!(r.wins, 0);
        assert_eq!(r.losses, 0);
        assert_eq!(r.score, 0.5);
    }

    #[test]
    fn swapping_sides_mirrors_the_tally() {
        let world = make_world(6, 2.0, 7).unwrap();
        let a = random_policy(world.vocab(), 11);
        let b = random_policy(world.vocab(), 12);
        // Power-of-two prompt count keeps the score denominators exact, so
        // the complement law holds with equality.
        let ps = prompts(&world, 256, 13);
        let ab = win_rate(&world, &a, &b, &ps, &controls(4)).unwrap();
        let ba = win_rate(&world, &b, &a, &ps, &controls(4)).unwrap();
        assert_eq!(ab.wins, ba.losses);
        assert_eq!(ab.losses, ba.wins);
        assert_eq!(ab.ties, ba.ties);
        assert_eq!(ab.score + ba.score, 1.0);
    }

    #[test]
    fn gold_model_beats_the_uniform_policy() {
        let world = make_world(6, 3.0, 17).unwrap();
        let uniform = TabularPolicy::uniform(world.vocab());
        let ps = prompts(&world, 2000, 19);
        let r = win_rate(&world, &uniform, world.gold(), &ps, &controls(23)).unwrap();
        assert!(r.score < 0.5, "uniform scored {}", r.score);
    }

    #[test]
    fn hand_regression_is_exact() {
        let r = least_squares(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert_eq!(r.r_squared, 1.0);
        assert_eq!(r.slope, 2.0);
        assert_eq!(r.intercept, 0.0);
        assert_eq!(r.n, 4);
    }

    #[test]
    fn degenerate_regressions_report_zero() {
        let r = least_squares(&[2.0, 2.0, 2.0], &[1.0, 5.0, 9.0]).unwrap();
        assert_eq!(r.r_squared, 0.0);
        assert_eq!(r.slope, 0.0);
        assert_eq!(r.intercept, 5.0);
        let r = least_squares(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(r.r_squared, 0.0);
        assert!(least_squares(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn r_squared_matches_an_independent_pearson_implementation() {
        fn pearson(x: &[f64], y: &[f64]) -> f64 {
            let n = x.len() as f64;
            let mx = x.iter().sum::<f64>() / n;
            let my = y.iter().sum::<f64>() / n;
            let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let dx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>().sqrt();
            let dy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>().sqrt();
            num / (dx * dy)
        }
        use rand::Rng;
        let mut rng = crate::seed::rng_from_seed(99);
        for _ in 0..10 {
            let x: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() * 10.0).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&xi| 0.7 * xi + rng.gen::<f64>() * 4.0 - 2.0)
                .collect();
            let r = least_squares(&x, &y).unwrap();
            let rho = pearson(&x, &y);
            assert!(
                (r.r_squared - rho * rho).abs() < 1e-10,
                "r2 {} vs pearson^2 {}",
                r.r_squared,
                rho * rho
            );
        }
    }

    #[test]
    fn gold_valued_rewards_regress_perfectly() {
        // Policy = gold, reference = uniform, all chosen responses the same
        // length: implicit reward = gold score + constant, an exact line.
        let world = make_world(5, 2.0, 29).unwrap();
        let v = world.vocab();
        let uniform = TabularPolicy::uniform(v);
        let mut history = crate::selection::PolicyHistory::starting(uniform);
        history.push(world.gold().clone()).unwrap();
        let mut rng = crate::seed::rng_from_seed(31);
        let mut pairs = Vec::new();
        for id in 0..12u64 {
            let prompt = world.sample_prompt(&mut rng);
            loop {
                let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
                    use rand::Rng;
                    let t: Vec<u32> = (0..3).map(|_| rng.gen_range(0..v.size())).collect();
                    TokenSeq::new(t, &v).unwrap()
                };
                let a = gen(&mut rng);
                let b = gen(&mut rng);
                if a != b {
                    pairs.push(PreferencePair::new(id, prompt, a, b).unwrap());
                    break;
                }
            }
        }
        let r = reward_correlations(&history, 0, &pairs, &world).unwrap();
        assert!((r.vs_gold.r_squared - 1.0).abs() < 1e-9, "{:?}", r.vs_gold);
        assert!((r.vs_gold.slope - 1.0).abs() < 1e-9);
        // Same-length chosen responses make length a degenerate regressor.
        assert_eq!(r.vs_length.r_squared, 0.0);
        assert!((r.margin_vs_gold_margin.r_squared - 1.0).abs() < 1e-9);
    }

    fn margin_records(ids: &[u64], margins: &[f64]) -> Vec<MarginRecord> {
        ids.iter()
            .zip(margins)
            .map(|(&pair_id, &margin)| MarginRecord {
                pair_id,
                reward_chosen: margin,
                reward_rejected: 0.0,
                margin,
            })
            .collect()
    }

    fn audit(id: u64, flipped: bool, length: bool) -> AuditRecord {
        AuditRecord {
            id,
            was_flipped: flipped,
            was_length_labeled: length,
            gold_chosen: 0.0,
            gold_rejected: 0.0,
        }
    }

    #[test]
    fn full_selection_reports_the_global_rate() {
        let records = margin_records(&[0, 1, 2, 3], &[0.4, 0.3, 0.2, 0.1]);
        let flags = vec![
            audit(0, true, false),
            audit(1, false, true),
            audit(2, true, false),
            audit(3, false, false),
        ];
        let all: BTreeSet<u64> = [0, 1, 2, 3].into_iter().collect();
        let s = selection_audit(&records, &all, &flags).unwrap();
        assert_eq!(s.flipped_inside, s.flipped_global);
        assert_eq!(s.flipped_inside, 0.5);
        assert_eq!(s.flipped_outside, 0.0);
        assert_eq!(s.length_inside, 0.25);
        assert_eq!(s.n_selected, 4);
        assert_eq!(s.n_total, 4);
    }

    #[test]
    fn clean_selection_reports_zero_inside() {
        let records = margin_records(&[0, 1, 2, 3], &[0.4, 0.3, 0.2, 0.1]);
        let flags = vec![
            audit(0, false, false),
            audit(1, true, false),
            audit(2, false, false),
            audit(3, true, false),
        ];
        let clean: BTreeSet<u64> = [0, 2].into_iter().collect();
        let s = selection_audit(&records, &clean, &flags).unwrap();
        assert_eq!(s.flipped_inside, 0.0);
        assert_eq!(s.flipped_outside, 1.0);
        assert_eq!(s.flipped_global, 0.5);
    }

    #[test]
    fn audit_rejects_mismatched_ids() {
        let records = margin_records(&[0, 1], &[0.4, 0.3]);
        let flags = vec![audit(0, false, false)];
        let sel: BTreeSet<u64> = [0].into_iter().collect();
        assert!(selection_audit(&records, &sel, &flags).is_err());
        let flags = vec![audit(0, false, false), audit(1, false, false)];
        let stray: BTreeSet<u64> = [7].into_iter().collect();
        assert!(selection_audit(&records, &stray, &flags).is_err());
    }

    #[test]
    fn constant_margin_gives_equal_variances() {
        let world = make_world(5, 2.0, 37).unwrap();
        let f = |_: &TokenSeq, _: &TokenSeq, _: &TokenSeq| Ok(0.0);
        let c = variance_lemma_check(&world, LossKind::Dpo { beta: 0.2 }, &f, 16, 400, 41).unwrap();
        // Constant margin means constant loss both ways: the two risk
        // streams are bitwise identical, so their variances tie exactly
        // (both are rounding residue of a constant mean, below 1e-25).
        assert_eq!(c.var_bayes.to_bits(), c.var_empirical.to_bits());
        assert!(c.var_bayes < 1e-25, "residue too large: {}", c.var_bayes);
        assert_eq!(c.diff, 0.0);
        assert_eq!(c.diff_se, 0.0);
        assert!(c.holds());
        assert!(c.diff.abs() <= 3.0 * c.diff_se);
    }

    #[test]
    fn weighted_risk_has_lower_variance_on_a_generic_margin() {
        let world = make_world(6, 2.5, 43).unwrap();
        let scorer = random_policy(world.vocab(), 44);
        let reference = TabularPolicy::uniform(world.vocab());
        let f = |prompt: &TokenSeq, a: &TokenSeq, b: &TokenSeq| {
            Ok(implicit_reward(&scorer, &reference, prompt, a)?
                - implicit_reward(&scorer, &reference, prompt, b)?)
        };
        let c =
            variance_lemma_check(&world, LossKind::Dpo { beta: 1.0 }, &f, 16, 4000, 47).unwrap();
        assert!(c.holds(), "{c:?}");
        assert!(c.diff > 3.0 * c.diff_se, "expected a strict gap: {c:?}");
    }

    #[test]
    fn variance_estimates_stabilize_with_more_resamples() {
        let world = make_world(5, 2.0, 53).unwrap();
        let scorer = random_policy(world.vocab(), 54);
        let reference = TabularPolicy::uniform(world.vocab());
        let f = |prompt: &TokenSeq, a: &TokenSeq, b: &TokenSeq| {
            Ok(implicit_reward(&scorer, &reference, prompt, a)?
                - implicit_reward(&scorer, &reference, prompt, b)?)
        };
        let kind = LossKind::Ipo { beta: 0.5 };
        let run = |resamples: usize, seed: u64| {
            variance_lemma_check(&world, kind, &f, 12, resamples, seed)
                .unwrap()
                .var_empirical
        };
        let small = (run(200, 1) - run(200, 2)).abs();
        let large = (run(6400, 1) - run(6400, 2)).abs();
        assert!(
            large < small,
            "seed-to-seed spread grew: {large} vs {small}"
        );
    }

    #[test]
    fn preconditions_are_enforced() {
        let world = make_world(5, 2.0, 59).unwrap();
        let f = |_: &TokenSeq, _: &TokenSeq, _: &TokenSeq| Ok(0.0);
        assert!(variance_lemma_check(&world, LossKind::Dpo { beta: 1.0 }, &f, 9, 400, 1).is_err());
        assert!(variance_lemma_check(&world, LossKind::Dpo { beta: 1.0 }, &f, 16, 99, 1).is_err());
        let p = random_policy(world.vocab(), 3);
        assert!(win_rate(&world, &p, &p, &[], &controls(1)).is_err());
    }

    #[test]
    fn audit_separates_noise_on_a_real_margin_ranking() {
        // Margins from the hidden gold margins themselves: flipped pairs
        // have negative gold margin, so a top-half selection must contain
        // fewer of them than the bottom half.
        let world = make_world(6, 2.5, 61).unwrap();
        let behavior = TabularPolicy::uniform(world.vocab());
        let label = LabelPolicy {
            flip_rate: 0.4,
            ..LabelPolicy::noiseless()
        };
        let (pairs, audits) = gen_dataset(
            &world,
            &behavior,
            200,
            &label,
            &SampleControls {
                temperature: 1.0,
                top_p: 1.0,
                max_len: 6,
                seed: 63,
            },
        )
        .unwrap();
        let records: Vec<MarginRecord> = pairs
            .iter()
            .map(|p| {
                let m = world.gold_margin(p).unwrap();
                MarginRecord {
                    pair_id: p.id,
                    reward_chosen: m,
                    reward_rejected: 0.0,
                    margin: m,
                }
            })
            .collect();
        let selected = crate::selection::select_top_k(&records, 100).unwrap();
        let s = selection_audit(&records, &selected, &audits).unwrap();
        assert!(
            s.flipped_inside < s.flipped_outside,
            "inside {} outside {}",
            s.flipped_inside,
            s.flipped_outside
        );
    }
}
