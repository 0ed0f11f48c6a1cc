//! Iterative preference training with margin selection and bootstrapping.
//!
//! Iteration 1 trains on the full offline dataset against the starting
//! policy as reference. Every later iteration `t` first scores the original
//! offline dataset with the ensemble reward, keeps the top-`k` margins, adds
//! the top-`k_tilde` freshly bootstrapped on-policy pairs, and trains on the
//! union with the previous snapshot as both the initialization and the
//! frozen reference. Setting `k = N` and `k_tilde = 0` therefore reduces the
//! loop to plain iterative training, and a single iteration is the vanilla
//! algorithm.
//!
//! The optimizer is Adam (decay 0.9/0.999, eps 1e-8) over the dense logit
//! matrix; with full-batch data each epoch is exactly one step.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_dataset, BootstrapConfig, BootstrappedPair};
use crate::data::PreferencePair;
use crate::error::{SeraError, SeraResult};
use crate::losses::{loss, loss_grad, pair_margin, LossKind};
use crate::policy::{SampleControls, TabularPolicy, TokenSeq};
use crate::seed::{derive_rng, derive_seed};
use crate::selection::{ensemble_margins, select_top_k, PolicyHistory};

/// Batch regime: full-batch is the default and keeps small runs exactly
/// reproducible step by step; mini-batches shuffle with a seeded stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batch {
    Full,
    Size(usize),
}

impl Batch {
    pub fn validate(&self) -> SeraResult<()> {
        if let Batch::Size(0) = self {
            return Err(SeraError::InvalidArgument(
                "mini-batch size must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Full configuration for an iterative run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeraConfig {
    pub loss: LossKind,
    /// Total iterations; 1 means vanilla single-round training.
    pub t_iters: usize,
    /// Ensemble mixing weight for the reward at iterations >= 3.
    pub gamma: f64,
    /// Offline pairs kept per selection round.
    pub k: usize,
    /// Candidate generation controls; `bootstrap.k_tilde` is the number of
    /// on-policy pairs added per round.
    pub bootstrap: BootstrapConfig,
    /// Optimization epochs per iteration; with full batch, one epoch is one
    /// Adam step.
    pub epochs_per_iter: usize,
    pub lr: f64,
    pub batch: Batch,
    /// Base seed; every stream (bootstrap sampling, shuffling) derives from
    /// it with a fixed label.
    pub seed: u64,
}

impl SeraConfig {
    pub fn k_tilde(&self) -> usize {
        self.bootstrap.k_tilde
    }

    pub fn validate(&self) -> SeraResult<()> {
        self.loss.validate()?;
        if self.t_iters == 0 {
            return Err(SeraError::Config("t_iters must be at least 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SeraError::Config(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(SeraError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        self.batch.validate()?;
        self.bootstrap.validate()?;
        if self.t_iters >= 2 && self.k == 0 && self.k_tilde() == 0 {
            return Err(SeraError::Config(
                "iterations beyond the first would train on an empty dataset \
                 (k = 0 and k_tilde = 0)"
                    .to_string(),
            ));
        }
        Ok(())
    }

    /// Stock defaults for a dataset of `n` offline pairs: three
    /// iterations, gamma 0.3, keep 70%, bootstrap 30%.
    pub fn defaults(loss: LossKind, n: usize, seed: u64) -> Self {
        SeraConfig {
            loss,
            t_iters: 3,
            gamma: 0.3,
            k: (n as f64 * 0.7).floor() as usize,
            bootstrap: BootstrapConfig {
                r_candidates: 4,
                k_tilde: (n as f64 * 0.3).floor() as usize,
                controls: SampleControls {
                    temperature: 0.7,
                    top_p: 0.95,
                    max_len: 8,
                    seed,
                },
                dedupe_attempts: crate::bootstrap::DEFAULT_DEDUPE_ATTEMPTS,
            },
            epochs_per_iter: 1,
            lr: 0.05,
            batch: Batch::Full,
            seed,
        }
    }
}

/// One training example with its provenance; bootstrapped examples carry the
/// source prompt id in `id` and are flagged.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: u64,
    pub from_bootstrap: bool,
    pub pair: PreferencePair,
}

impl TrainExample {
    pub fn offline(pair: &PreferencePair) -> Self {
        TrainExample {
            id: pair.id,
            from_bootstrap: false,
            pair: PreferencePair {
                meta: None,
                ..pair.clone()
            },
        }
    }

    pub fn bootstrapped(pair: &BootstrappedPair, ix: u64) -> Self {
        TrainExample {
            id: pair.source_prompt_id,
            from_bootstrap: true,
            pair: PreferencePair {
                id: ix,
                prompt: pair.prompt.clone(),
                chosen: pair.chosen.clone(),
                rejected: pair.rejected.clone(),
                meta: None,
            },
        }
    }
}

/// Adam accumulators over the flat logit vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` along `grad`.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Outcome of one iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub t: usize,
    /// `offline_kept + bootstrapped_kept`.
    pub dataset_size: usize,
    pub offline_kept: usize,
    pub bootstrapped_kept: usize,
    pub mean_loss_start: f64,
    pub mean_loss_end: f64,
    pub optimizer_steps: usize,
    /// Set when the mean loss failed to improve over the iteration; the run
    /// continues but reports it.
    pub loss_increased: bool,
    /// Offline pair ids trained on this iteration.
    pub selected_ids: BTreeSet<u64>,
    /// Index of the snapshot this iteration produced in the run's history.
    pub snapshot_index: usize,
}

fn mean_loss(
    kind: LossKind,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    data: &[TrainExample],
    t: usize,
) -> SeraResult<f64> {
    let mut total = 0.0;
    for ex in data {
        let m = pair_margin(kind, policy, reference, &ex.pair)?;
        if !m.is_finite() {
            return Err(SeraError::NonFiniteLoss { pair_id: ex.id, t });
        }
        total += loss(kind, m);
    }
    Ok(total / data.len() as f64)
}

/// Trains `policy` on `data` for one iteration against a frozen `reference`.
/// Returns the updated policy and a report whose `selected_ids` and
/// `snapshot_index` are filled in by the caller.
pub fn train_iteration(
    mut policy: TabularPolicy,
    reference: &TabularPolicy,
    data: &[TrainExample],
    cfg: &SeraConfig,
    t: usize,
) -> SeraResult<(TabularPolicy, IterationReport)> {
    if data.is_empty() {
        return Err(SeraError::Config(format!(
            "iteration {t} has no training data"
        )));
    }
    let mean_loss_start = mean_loss(cfg.loss, &policy, reference, data, t)?;
    let n = data.len();
    let mut opt = OptimizerState::new(policy.n_params());
    let mut grad_acc = vec![0.0; policy.n_params()];
    for epoch in 0..cfg.epochs_per_iter {
        let order: Vec<usize> = match cfg.batch {
            Batch::Full => (0..n).collect(),
            Batch::Size(_) => {
                let mut ixs: Vec<usize> = (0..n).collect();
                use rand::seq::SliceRandom;
                let mut rng = derive_rng(cfg.seed, "shuffle", &[t as u64, epoch as u64]);
                ixs.shuffle(&mut rng);
                ixs
            }
        };
        let chunk = match cfg.batch {
            Batch::Full => n,
            Batch::Size(b) => b,
        };
        for batch in order.chunks(chunk) {
            grad_acc.iter_mut().for_each(|g| *g = 0.0);
            for &ix in batch {
                let ex = &data[ix];
                let obj = loss_grad(cfg.loss, &policy, reference, &ex.pair)?;
                if !obj.margin.is_finite() || !obj.loss.is_finite() {
                    return Err(SeraError::NonFiniteLoss { pair_id: ex.id, t });
                }
                for (acc, g) in grad_acc.iter_mut().zip(&obj.grad) {
                    *acc += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad_acc.iter_mut().for_each(|g| *g *= scale);
            opt.apply(policy.logits_mut(), &grad_acc, cfg.lr);
        }
    }
    let mean_loss_end = mean_loss(cfg.loss, &policy, reference, data, t)?;
    let bootstrapped_kept = data.iter().filter(|ex| ex.from_bootstrap).count();
    let report = IterationReport {
        t,
        dataset_size: n,
        offline_kept: n - bootstrapped_kept,
        bootstrapped_kept,
        mean_loss_start,
        mean_loss_end,
        optimizer_steps: opt.steps_taken() as usize,
        loss_increased: mean_loss_end > mean_loss_start,
        selected_ids: BTreeSet::new(),
        snapshot_index: 0,
    };
    Ok((policy, report))
}

/// Everything a full run produces: the snapshot history (index 0 is the
/// starting policy), per-iteration reports, and the bootstrapped pairs of
/// each iteration for export.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: PolicyHistory,
    pub reports: Vec<IterationReport>,
    pub bootstrapped: Vec<(usize, Vec<BootstrappedPair>)>,
}

/// Runs the full iterative loop from `sft` over the offline dataset.
///
/// Margins are always computed on the original offline dataset, selection
/// keeps `cfg.k` pairs, bootstrapping adds `cfg.k_tilde()` fresh pairs from
/// `prompts` scored by the same ensemble reward, and each iteration trains
/// from the previous snapshot with that snapshot as the frozen reference.
pub fn run_sera(
    sft: &TabularPolicy,
    offline: &[PreferencePair],
    prompts: &[TokenSeq],
    cfg: &SeraConfig,
) -> SeraResult<RunOutcome> {
    cfg.validate()?;
    if offline.is_empty() {
        return Err(SeraError::Config("offline dataset is empty".to_string()));
    }
    if cfg.k > offline.len() {
        return Err(SeraError::SelectionTooLarge {
            k: cfg.k,
            n: offline.len(),
        });
    }
    let by_id: HashMap<u64, &PreferencePair> = offline.iter().map(|p| (p.id, p)).collect();
    if by_id.len() != offline.len() {
        return Err(SeraError::Config(
            "offline dataset has duplicate pair ids".to_string(),
        ));
    }

    let mut history = PolicyHistory::starting(sft.clone());
    let mut reports = Vec::with_capacity(cfg.t_iters);
    let mut bootstrapped_log = Vec::new();

    // Iteration 1: full offline dataset, reference = starting policy.
    let data: Vec<TrainExample> = offline.iter().map(TrainExample::offline).collect();
    let reference = history.latest().clone();
    let (policy, mut report) = train_iteration(reference.clone(), &reference, &data, cfg, 1)?;
    report.selected_ids = offline.iter().map(|p| p.id).collect();
    report.snapshot_index = 1;
    history.push(policy)?;
    reports.push(report);

    for t in 2..=cfg.t_iters {
        let records = ensemble_margins(&history, t, cfg.gamma, offline)?;
        let selected = select_top_k(&records, cfg.k)?;
        let booted = if cfg.k_tilde() > 0 {
            let bootstrap_cfg = BootstrapConfig {
                controls: SampleControls {
                    seed: derive_seed(cfg.seed, "bootstrap", &[t as u64]),
                    ..cfg.bootstrap.controls
                },
                ..cfg.bootstrap
            };
            bootstrap_dataset(&history, t, cfg.gamma, prompts, &bootstrap_cfg)?
        } else {
            Vec::new()
        };
        let mut data: Vec<TrainExample> = selected
            .iter()
            .map(|id| TrainExample::offline(by_id[id]))
            .collect();
        for (ix, b) in booted.iter().enumerate() {
            data.push(TrainExample::bootstrapped(b, ix as u64));
        }
        if data.is_empty() {
            return Err(SeraError::Config(format!(
                "iteration {t} assembled an empty training set"
            )));
        }
        let reference = history.latest().clone();
        let (policy, mut report) = train_iteration(reference.clone(), &reference, &data, cfg, t)?;
        report.selected_ids = selected;
        report.snapshot_index = t;
        history.push(policy)?;
        reports.push(report);
        bootstrapped_log.push((t, booted));
    }

    Ok(RunOutcome {
        history,
        reports,
        bootstrapped: bootstrapped_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
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
            .map(|_| (rng.gen::<f64>() - 0.5) * 2.0)
            .collect();
        TabularPolicy::new(v, logits).unwrap()
    }

    fn random_pairs(v: &Vocab, n: usize, seed: u64) -> Vec<PreferencePair> {
        let mut rng = crate::seed::rng_from_seed(seed);
        let mut out = Vec::with_capacity(n);
        for id in 0..n as u64 {
            let prompt = crate::policy::random_prompt(v, 1, &mut rng);
            loop {
                let mut gen = |vv: &Vocab| {
                    let len = rng.gen_range(1..=3usize);
                    let t: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vv.size())).collect();
                    TokenSeq::new(t, vv).unwrap()
                };
                let a = gen(v);
                let b = gen(v);
                if a != b {
                    out.push(PreferencePair::new(id, prompt.clone(), a, b).unwrap());
                    break;
                }
            }
        }
        out
    }

    fn base_config(seed: u64) -> SeraConfig {
        SeraConfig {
            loss: LossKind::Dpo { beta: 1.0 },
            t_iters: 1,
            gamma: 0.3,
            k: 0,
            bootstrap: BootstrapConfig {
                r_candidates: 4,
                k_tilde: 0,
                controls: SampleControls {
                    temperature: 0.7,
                    top_p: 0.95,
                    max_len: 4,
                    seed,
                },
                dedupe_attempts: 16,
            },
            epochs_per_iter: 50,
            lr: 0.05,
            batch: Batch::Full,
            seed,
        }
    }

    #[test]
    fn zero_lr_leaves_the_policy_bit_identical() {
        let v = vocab(4);
        let start = random_policy(v, 1);
        let reference = random_policy(v, 2);
        let pairs = random_pairs(&v, 6, 3);
        let data: Vec<TrainExample> = pairs.iter().map(TrainExample::offline).collect();
        let mut cfg = base_config(7);
        cfg.lr = 0.0;
        let (out, report) = train_iteration(start.clone(), &reference, &data, &cfg, 1).unwrap();
        for (a, b) in out.logits().iter().zip(start.logits()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(
            report.mean_loss_start.to_bits(),
            report.mean_loss_end.to_bits()
        );
        assert!(!report.loss_increased);
        assert_eq!(report.optimizer_steps, cfg.epochs_per_iter);
    }

    #[test]
    fn single_pair_margin_goes_positive() {
        let v = vocab(4);
        let start = TabularPolicy::uniform(v);
        let pair = PreferencePair::new(0, seq(&[0], &v), seq(&[1, 2], &v), seq(&[3], &v)).unwrap();
        let data = vec![TrainExample::offline(&pair)];
        let mut cfg = base_config(11);
        cfg.epochs_per_iter = 300;
        cfg.lr = 0.1;
        let (out, report) = train_iteration(start.clone(), &start, &data, &cfg, 1).unwrap();
        let m = pair_margin(cfg.loss, &out, &start, &pair).unwrap();
        assert!(m > 0.0, "margin {m}");
        assert!(
            crate::losses::preference_prob(m, cfg.loss.beta()) > 0.9,
            "preference probability too low at margin {m}"
        );
        assert!(report.mean_loss_end < report.mean_loss_start);
        assert!(!report.loss_increased);
    }

    #[test]
    fn duplicated_dataset_trains_identically() {
        // Mean gradients are invariant to duplication; trajectories agree
        // up to the rounding of the longer summation.
        let v = vocab(4);
        let start = random_policy(v, 21);
        let reference = random_policy(v, 22);
        let pairs = random_pairs(&v, 5, 23);
        let data: Vec<TrainExample> = pairs.iter().map(TrainExample::offline).collect();
        let doubled: Vec<TrainExample> = data.iter().chain(data.iter()).cloned().collect();
        let cfg = base_config(31);
        let (a, _) = train_iteration(start.clone(), &reference, &data, &cfg, 1).unwrap();
        let (b, _) = train_iteration(start, &reference, &doubled, &cfg, 1).unwrap();
        for (x, y) in a.logits().iter().zip(b.logits()) {
            approx::assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn reference_is_never_mutated() {
        let v = vocab(4);
        let start = random_policy(v, 41);
        let reference = random_policy(v, 42);
        let before = reference.clone();
        let pairs = random_pairs(&v, 4, 43);
        let data: Vec<TrainExample> = pairs.iter().map(TrainExample::offline).collect();
        let cfg = base_config(44);
        let _ = train_iteration(start, &reference, &data, &cfg, 1).unwrap();
        for (a, b) in reference.logits().iter().zip(before.logits()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mini_batches_step_once_per_chunk() {
        let v = vocab(4);
        let start = random_policy(v, 51);
        let reference = start.clone();
        let pairs = random_pairs(&v, 5, 53);
        let data: Vec<TrainExample> = pairs.iter().map(TrainExample::offline).collect();
        let mut cfg = base_config(54);
        cfg.batch = Batch::Size(2);
        cfg.epochs_per_iter = 3;
        let (_, report) = train_iteration(start, &reference, &data, &cfg, 1).unwrap();
        // ceil(5/2) = 3 chunks per epoch, 3 epochs.
        assert_eq!(report.optimizer_steps, 9);
    }

    #[test]
    fn empty_future_iterations_are_rejected_up_front() {
        let mut cfg = base_config(61);
        cfg.t_iters = 2;
        cfg.k = 0;
        cfg.bootstrap.k_tilde = 0;
        assert!(matches!(cfg.validate(), Err(SeraError::Config(_))));
    }

    #[test]
    fn single_iteration_run_matches_direct_training() {
        let v = vocab(4);
        let sft = random_policy(v, 71);
        let pairs = random_pairs(&v, 8, 72);
        let prompts: Vec<TokenSeq> = pairs.iter().map(|p| p.prompt.clone()).collect();
        let mut cfg = base_config(73);
        cfg.t_iters = 1;
        cfg.k = pairs.len();
        let outcome = run_sera(&sft, &pairs, &prompts, &cfg).unwrap();
        assert_eq!(outcome.history.len(), 2);
        let data: Vec<TrainExample> = pairs.iter().map(TrainExample::offline).collect();
        let (direct, _) = train_iteration(sft.clone(), &sft, &data, &cfg, 1).unwrap();
        for (a, b) in outcome
            .history
            .latest()
            .logits()
            .iter()
            .zip(direct.logits())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn full_run_is_deterministic_and_well_formed() {
        let v = vocab(6);
        let sft = random_policy(v, 81);
        let pairs = random_pairs(&v, 12, 82);
        let prompts: Vec<TokenSeq> = pairs.iter().map(|p| p.prompt.clone()).collect();
        let mut cfg = base_config(83);
        cfg.t_iters = 3;
        cfg.k = 8;
        cfg.bootstrap.k_tilde = 4;
        cfg.epochs_per_iter = 10;
        let a = run_sera(&sft, &pairs, &prompts, &cfg).unwrap();
        let b = run_sera(&sft, &pairs, &prompts, &cfg).unwrap();
        assert_eq!(a.history.len(), cfg.t_iters + 1, "snapshot lineage");
        for (pa, pb) in a.history.snapshots().iter().zip(b.history.snapshots()) {
            for (x, y) in pa.logits().iter().zip(pb.logits()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (ix, report) in a.reports.iter().enumerate() {
            assert_eq!(report.t, ix + 1);
            assert_eq!(report.snapshot_index, ix + 1);
            assert_eq!(
                report.dataset_size,
                report.offline_kept + report.bootstrapped_kept
            );
            if report.t >= 2 {
                assert_eq!(report.offline_kept, cfg.k);
                assert_eq!(report.bootstrapped_kept, cfg.k_tilde());
                assert_eq!(report.selected_ids.len(), cfg.k);
            } else {
                assert_eq!(report.offline_kept, pairs.len());
            }
        }
        assert_eq!(a.bootstrapped.len(), cfg.t_iters - 1);
        for (t, booted) in &a.bootstrapped {
            assert!(*t >= 2);
            assert_eq!(booted.len(), cfg.k_tilde());
        }
    }

    #[test]
    fn oversized_k_is_rejected() {
        let v = vocab(4);
        let sft = TabularPolicy::uniform(v);
        let pairs = random_pairs(&v, 4, 91);
        let prompts: Vec<TokenSeq> = pairs.iter().map(|p| p.prompt.clone()).collect();
        let mut cfg = base_config(92);
        cfg.t_iters = 2;
        cfg.k = 5;
        assert!(matches!(
            run_sera(&sft, &pairs, &prompts, &cfg),
            Err(SeraError::SelectionTooLarge { .. })
        ));
    }
}
