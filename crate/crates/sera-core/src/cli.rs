//! Command-line front end.
//!
//! Five subcommands cover the full experiment protocol: `gen-data` builds a
//! synthetic world and labeled dataset, `sft` fits the starting policy,
//! `train` runs the iterative loop, `eval` compares two policies by gold
//! win rate, and `analyze` turns runs into correlation/similarity/audit
//! tables. Every command writes into a fresh output directory and writes
//! `manifest.json` last, so a manifest's presence marks a completed run.
//! Relative `--out` paths are joined under `$SERA_OUT_ROOT` when set.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bootstrap::{BootstrapConfig, DEFAULT_DEDUPE_ATTEMPTS};
use crate::data::{read_audit, read_jsonl, write_audit, write_jsonl, AuditRecord, PreferencePair};
use crate::error::{SeraError, SeraResult};
use crate::eval::{reward_correlations, selection_audit, win_rate};
use crate::losses::LossKind;
use crate::policy::{SampleControls, TabularPolicy, TokenSeq};
use crate::report::Table;
use crate::seed::derive_rng;
use crate::selection::{ensemble_margins, jaccard, read_selected, write_selected, PolicyHistory};
use crate::synth::{gen_dataset, make_world, prompt_pool, sft_corpus, LabelPolicy, SyntheticWorld};
use crate::trainer::{run_sera, Batch, SeraConfig};

#[derive(Parser, Debug)]
#[command(
    name = "sera",
    version,
    about = "Margin-selected iterative preference training on tabular bigram policies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic world and a labeled preference dataset.
    GenData(GenDataArgs),
    /// Fit the starting policy on a dataset's (prompt, chosen) corpus.
    Sft(SftArgs),
    /// Run iterative preference training with selection and bootstrapping.
    Train(TrainArgs),
    /// Gold-judged win rate between two policy snapshots.
    Eval(EvalArgs),
    /// Correlation, audit, and selection-similarity reports over runs.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// Regular vocabulary size (bos/eos are added internally).
    #[arg(long, default_value_t = 8)]
    vocab: u32,
    /// Scale of the hidden gold model's logits; 0 gives a uniform gold.
    #[arg(long, default_value_t = 2.0)]
    sharpness: f64,
    #[arg(long)]
    n_pairs: usize,
    #[arg(long, default_value_t = 0.0)]
    flip_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    length_bias_rate: f64,
    /// Draw the base label from the true preference probability instead of
    /// the gold argmax.
    #[arg(long, default_value_t = false)]
    stochastic_labels: bool,
    #[arg(long, default_value_t = 2)]
    prompt_len: usize,
    /// Maximum response length for generation in this world.
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Policy snapshot that generates the responses; uniform when omitted.
    #[arg(long)]
    behavior: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Replace the output directory if it already exists.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct SftArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Starting policy snapshot (from the sft command).
    #[arg(long)]
    sft: PathBuf,
    /// Loss kind: dpo, ipo, slic, or simpo.
    #[arg(long, default_value = "dpo")]
    loss: String,
    /// Loss scale; defaults to 0.2 for dpo/slic and 1.0 for ipo/simpo.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
    /// Offline fraction kept per selection round; k = floor(prop * N).
    #[arg(long, default_value_t = 0.7)]
    select_prop: f64,
    /// Bootstrapped pairs per round as a fraction of N (may exceed 1).
    #[arg(long, default_value_t = 0.3)]
    ktilde_prop: f64,
    #[arg(long, default_value_t = 4)]
    r_candidates: usize,
    #[arg(long, default_value_t = 0.7)]
    temp: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    /// Bootstrap generation length cap; the world's maximum when omitted.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Full-batch optimization does one step per epoch.
    #[arg(long, default_value_t = 100)]
    epochs_per_iter: usize,
    /// "full" or a mini-batch size.
    #[arg(long, default_value = "full", value_parser = parse_batch)]
    batch: Batch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// World file (world.json) whose gold model judges the generations.
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_prompts: usize,
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    /// Dataset directory the run(s) trained on.
    #[arg(long)]
    data: PathBuf,
    /// Single run directory: emits correlation, audit, and per-iteration
    /// selection-similarity tables.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Directory of run directories: emits one sweep row per completed run
    /// plus a cross-run selection-similarity matrix.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Starting policy used as the win-rate opponent in sweep mode.
    #[arg(long)]
    sft: Option<PathBuf>,
    /// Snapshot index the correlation reference uses (0 = starting policy).
    #[arg(long, default_value_t = 0)]
    reference_index: usize,
    /// Iteration whose selected sets are compared across runs.
    #[arg(long, default_value_t = 2)]
    jaccard_iter: usize,
    #[arg(long, default_value_t = 2000)]
    n_prompts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    force: bool,
}

fn parse_batch(s: &str) -> Result<Batch, String> {
    if s.eq_ignore_ascii_case("full") {
        return Ok(Batch::Full);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("mini-batch size must be at least 1".to_string()),
        Ok(n) => Ok(Batch::Size(n)),
        Err(_) => Err(format!(
            "expected \"full\" or a positive integer, got {s:?}"
        )),
    }
}

/// Parses and dispatches; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> SeraResult<()> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Sft(a) => cmd_sft(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Analyze(a) => cmd_analyze(a),
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os("SERA_OUT_ROOT") {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

/// Creates the output directory, refusing to clobber an existing one
/// without --force.
fn prepare_out_dir(out: &Path, force: bool) -> SeraResult<PathBuf> {
    let path = resolve_out(out);
    if path.exists() {
        if !force {
            return Err(SeraError::WouldOverwrite(path.display().to_string()));
        }
        if path.is_dir() {
            fs::remove_dir_all(&path)?;
        } else {
            fs::remove_file(&path)?;
        }
    }
    fs::create_dir_all(&path)?;
    Ok(path)
}

#[derive(Serialize)]
struct Manifest<'a, F: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    /// The parsed flag values, echoed verbatim.
    flags: &'a F,
    /// Files this run wrote, relative to the run directory.
    artifacts: &'a [String],
}

/// Written last: its presence marks the run as complete.
fn write_manifest<F: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    started_unix_ms: u128,
    flags: &F,
    artifacts: &[String],
) -> SeraResult<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        started_unix_ms,
        finished_unix_ms: now_ms(),
        flags,
        artifacts,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

struct DataDir {
    world: SyntheticWorld,
    pairs: Vec<PreferencePair>,
    audits: Option<Vec<AuditRecord>>,
}

fn load_data_dir(dir: &Path) -> SeraResult<DataDir> {
    let world_path = dir.join("world.json");
    if !world_path.exists() {
        return Err(SeraError::InvalidArgument(format!(
            "not a dataset directory: expected {}",
            world_path.display()
        )));
    }
    let world = SyntheticWorld::load(&world_path)?;
    let pairs = read_jsonl(&dir.join("pairs.jsonl"), &world.vocab())?;
    let audit_path = dir.join("audit.jsonl");
    let audits = if audit_path.exists() {
        Some(read_audit(&audit_path)?)
    } else {
        None
    };
    Ok(DataDir {
        world,
        pairs,
        audits,
    })
}

fn load_policy_for_world(path: &Path, world: &SyntheticWorld) -> SeraResult<TabularPolicy> {
    let policy = TabularPolicy::load(path)?;
    if policy.vocab() != &world.vocab() {
        return Err(SeraError::VocabMismatch {
            left: policy.vocab().size(),
            right: world.vocab().size(),
        });
    }
    Ok(policy)
}

/// Loads `policy_iter_0.txt`, `policy_iter_1.txt`, ... from a run directory.
fn load_history(run: &Path, world: &SyntheticWorld) -> SeraResult<PolicyHistory> {
    let first = run.join("policy_iter_0.txt");
    if !first.exists() {
        return Err(SeraError::InvalidArgument(format!(
            "no snapshots found: expected {} (and policy_iter_1.txt, ...)",
            first.display()
        )));
    }
    let mut history = PolicyHistory::starting(load_policy_for_world(&first, world)?);
    for i in 1.. {
        let path = run.join(format!("policy_iter_{i}.txt"));
        if !path.exists() {
            break;
        }
        history.push(load_policy_for_world(&path, world)?)?;
    }
    Ok(history)
}

fn load_run_config(run: &Path) -> SeraResult<SeraConfig> {
    let path = run.join("config.json");
    if !path.exists() {
        return Err(SeraError::InvalidArgument(format!(
            "not a run directory: expected {}",
            path.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn cmd_gen_data(a: GenDataArgs) -> SeraResult<()> {
    let started = now_ms();
    if a.n_pairs == 0 {
        return Err(SeraError::InvalidArgument(
            "--n-pairs must be at least 1".to_string(),
        ));
    }
    let world = make_world(a.vocab, a.sharpness, a.seed)?
        .with_prompt_len(a.prompt_len)?
        .with_response_len_max(a.max_len)?;
    let behavior = match &a.behavior {
        Some(path) => load_policy_for_world(path, &world)?,
        None => TabularPolicy::uniform(world.vocab()),
    };
    let label = LabelPolicy {
        flip_rate: a.flip_rate,
        length_bias_rate: a.length_bias_rate,
        stochastic_labels: a.stochastic_labels,
    };
    let controls = SampleControls {
        temperature: a.temp,
        top_p: a.top_p,
        max_len: a.max_len,
        seed: a.seed,
    };
    let (pairs, audits) = gen_dataset(&world, &behavior, a.n_pairs, &label, &controls)?;
    let dir = prepare_out_dir(&a.out, a.force)?;
    world.save(&dir.join("world.json"))?;
    write_jsonl(&pairs, &dir.join("pairs.jsonl"))?;
    write_audit(&audits, &dir.join("audit.jsonl"))?;
    let artifacts = ["world.json", "pairs.jsonl", "audit.jsonl"]
        .map(String::from)
        .to_vec();
    write_manifest(&dir, "gen-data", a.seed, started, &a, &artifacts)?;
    println!(
        "wrote {} pairs to {}",
        pairs.len(),
        dir.join("pairs.jsonl").display()
    );
    Ok(())
}

fn cmd_sft(a: SftArgs) -> SeraResult<()> {
    let started = now_ms();
    let data = load_data_dir(&a.data)?;
    let corpus = sft_corpus(&data.pairs);
    let policy = crate::policy::fit_sft(data.world.vocab(), &corpus, a.epochs, a.lr)?;
    let dir = prepare_out_dir(&a.out, a.force)?;
    policy.save(&dir.join("policy.txt"))?;
    let artifacts = vec!["policy.txt".to_string()];
    write_manifest(&dir, "sft", data.world.seed(), started, &a, &artifacts)?;
    println!("wrote {}", dir.join("policy.txt").display());
    Ok(())
}

fn default_beta(loss: &str) -> f64 {
    match loss {
        "dpo" | "slic" => 0.2,
        _ => 1.0,
    }
}

fn cmd_train(a: TrainArgs) -> SeraResult<()> {
    let started = now_ms();
    if !(0.0..=1.0).contains(&a.select_prop) {
        return Err(SeraError::InvalidArgument(format!(
            "--select-prop must lie in [0, 1], got {}",
            a.select_prop
        )));
    }
    if !a.ktilde_prop.is_finite() || a.ktilde_prop < 0.0 {
        return Err(SeraError::InvalidArgument(format!(
            "--ktilde-prop must be finite and non-negative, got {}",
            a.ktilde_prop
        )));
    }
    let data = load_data_dir(&a.data)?;
    let sft = load_policy_for_world(&a.sft, &data.world)?;
    let n = data.pairs.len();
    let loss = LossKind::from_name(&a.loss, a.beta.unwrap_or_else(|| default_beta(&a.loss)))?;
    let cfg = SeraConfig {
        loss,
        t_iters: a.iters,
        gamma: a.gamma,
        k: (a.select_prop * n as f64).floor() as usize,
        bootstrap: BootstrapConfig {
            r_candidates: a.r_candidates,
            k_tilde: (a.ktilde_prop * n as f64).floor() as usize,
            controls: SampleControls {
                temperature: a.temp,
                top_p: a.top_p,
                max_len: a.max_len.unwrap_or(data.world.response_len_max()),
                seed: a.seed,
            },
            dedupe_attempts: DEFAULT_DEDUPE_ATTEMPTS,
        },
        epochs_per_iter: a.epochs_per_iter,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
    };
    cfg.validate()?;
    let prompts = prompt_pool(&data.pairs);
    let outcome = run_sera(&sft, &data.pairs, &prompts, &cfg)?;

    let dir = prepare_out_dir(&a.out, a.force)?;
    let mut artifacts = Vec::new();
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    artifacts.push("config.json".to_string());
    for (i, snapshot) in outcome.history.snapshots().iter().enumerate() {
        let name = format!("policy_iter_{i}.txt");
        snapshot.save(&dir.join(&name))?;
        artifacts.push(name);
    }
    let mut reports = Table::new(&[
        "t",
        "dataset_size",
        "offline_kept",
        "bootstrapped_kept",
        "mean_loss_start",
        "mean_loss_end",
        "optimizer_steps",
        "loss_increased",
    ])?;
    for r in &outcome.reports {
        reports.push_row(vec![
            r.t.to_string(),
            r.dataset_size.to_string(),
            r.offline_kept.to_string(),
            r.bootstrapped_kept.to_string(),
            Table::fmt_f64(r.mean_loss_start),
            Table::fmt_f64(r.mean_loss_end),
            r.optimizer_steps.to_string(),
            r.loss_increased.to_string(),
        ])?;
        if r.t >= 2 {
            let name = format!("selected_iter_{}.txt", r.t);
            write_selected(&r.selected_ids, &dir.join(&name))?;
            artifacts.push(name);
        }
    }
    reports.write(&dir.join("reports.tsv"))?;
    artifacts.push("reports.tsv".to_string());
    for (t, booted) in &outcome.bootstrapped {
        if booted.is_empty() {
            continue;
        }
        let pairs: Vec<PreferencePair> = booted
            .iter()
            .enumerate()
            .map(|(ix, b)| b.to_preference_pair(ix as u64, *t))
            .collect();
        let name = format!("bootstrapped_iter_{t}.jsonl");
        write_jsonl(&pairs, &dir.join(&name))?;
        artifacts.push(name);
    }
    write_manifest(&dir, "train", a.seed, started, &a, &artifacts)?;
    println!(
        "run complete: {} iterations, final snapshot {}",
        cfg.t_iters,
        dir.join(format!("policy_iter_{}.txt", cfg.t_iters))
            .display()
    );
    Ok(())
}

fn sample_eval_prompts(world: &SyntheticWorld, n: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = derive_rng(seed, "evalprompts", &[]);
    (0..n).map(|_| world.sample_prompt(&mut rng)).collect()
}

fn cmd_eval(a: EvalArgs) -> SeraResult<()> {
    let started = now_ms();
    if a.n_prompts == 0 {
        return Err(SeraError::InvalidArgument(
            "--n-prompts must be at least 1".to_string(),
        ));
    }
    let world = SyntheticWorld::load(&a.world)?;
    let pa = load_policy_for_world(&a.a, &world)?;
    let pb = load_policy_for_world(&a.b, &world)?;
    let prompts = sample_eval_prompts(&world, a.n_prompts, a.seed);
    let controls = SampleControls {
        temperature: a.temp,
        top_p: a.top_p,
        max_len: world.response_len_max(),
        seed: a.seed,
    };
    let r = win_rate(&world, &pa, &pb, &prompts, &controls)?;
    let dir = prepare_out_dir(&a.out, a.force)?;
    let mut t = Table::new(&["a", "b", "wins", "ties", "losses", "score"])?;
    t.push_row(vec![
        a.a.display().to_string(),
        a.b.display().to_string(),
        r.wins.to_string(),
        r.ties.to_string(),
        r.losses.to_string(),
        Table::fmt_f64(r.score),
    ])?;
    t.write(&dir.join("winrate.tsv"))?;
    let artifacts = vec!["winrate.tsv".to_string()];
    write_manifest(&dir, "eval", a.seed, started, &a, &artifacts)?;
    println!("win rate: {}", r.score);
    Ok(())
}

/// Square similarity matrix as a table: row label column plus one column
/// per set.
fn jaccard_table(names: &[String], sets: &[BTreeSet<u64>]) -> SeraResult<Table> {
    let mut columns = vec!["set".to_string()];
    columns.extend(names.iter().cloned());
    let refs: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    let mut t = Table::new(&refs)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        for j in 0..names.len() {
            row.push(Table::fmt_f64(jaccard(&sets[i], &sets[j])));
        }
        t.push_row(row)?;
    }
    Ok(t)
}

fn cmd_analyze(a: AnalyzeArgs) -> SeraResult<()> {
    let started = now_ms();
    match (&a.run, &a.runs) {
        (Some(_), Some(_)) => Err(SeraError::InvalidArgument(
            "pass either --run or --runs, not both".to_string(),
        )),
        (None, None) => Err(SeraError::InvalidArgument(
            "one of --run or --runs is required".to_string(),
        )),
        (Some(run), None) => analyze_single(&a, &run.clone(), started),
        (None, Some(runs)) => analyze_sweep(&a, &runs.clone(), started),
    }
}

fn analyze_single(a: &AnalyzeArgs, run: &Path, started: u128) -> SeraResult<()> {
    let data = load_data_dir(&a.data)?;
    let history = load_history(run, &data.world)?;
    let cfg = load_run_config(run)?;
    let corr = reward_correlations(&history, a.reference_index, &data.pairs, &data.world)?;

    let dir = prepare_out_dir(&a.out, a.force)?;
    let mut artifacts = Vec::new();

    let mut rsq = Table::new(&["feature", "r_squared", "slope", "intercept", "n"])?;
    for (name, r) in [
        ("gold_score", corr.vs_gold),
        ("response_length", corr.vs_length),
        ("gold_margin", corr.margin_vs_gold_margin),
    ] {
        rsq.push_row(vec![
            name.to_string(),
            Table::fmt_f64(r.r_squared),
            Table::fmt_f64(r.slope),
            Table::fmt_f64(r.intercept),
            r.n.to_string(),
        ])?;
    }
    rsq.write(&dir.join("rsq.tsv"))?;
    artifacts.push("rsq.tsv".to_string());

    // Selected sets, one per iteration beyond the first.
    let mut names = Vec::new();
    let mut sets = Vec::new();
    for t in 2..=history.len().saturating_sub(1) {
        let path = run.join(format!("selected_iter_{t}.txt"));
        if path.exists() {
            names.push(format!("iter_{t}"));
            sets.push(read_selected(&path)?);
        }
    }
    if !sets.is_empty() {
        jaccard_table(&names, &sets)?.write(&dir.join("jaccard.tsv"))?;
        artifacts.push("jaccard.tsv".to_string());
    }

    if let Some(audits) = &data.audits {
        let mut audit_table = Table::new(&[
            "t",
            "n_selected",
            "n_total",
            "flipped_inside",
            "flipped_outside",
            "flipped_global",
            "length_inside",
            "length_outside",
            "length_global",
        ])?;
        for (name, set) in names.iter().zip(&sets) {
            let t: usize = name
                .trim_start_matches("iter_")
                .parse()
                .map_err(|_| SeraError::InvalidArgument(format!("bad selected-set name {name}")))?;
            let records = ensemble_margins(&history, t, cfg.gamma, &data.pairs)?;
            let summary = selection_audit(&records, set, audits)?;
            audit_table.push_row(vec![
                t.to_string(),
                summary.n_selected.to_string(),
                summary.n_total.to_string(),
                Table::fmt_f64(summary.flipped_inside),
                Table::fmt_f64(summary.flipped_outside),
                Table::fmt_f64(summary.flipped_global),
                Table::fmt_f64(summary.length_inside),
                Table::fmt_f64(summary.length_outside),
                Table::fmt_f64(summary.length_global),
            ])?;
        }
        audit_table.write(&dir.join("audit.tsv"))?;
        artifacts.push("audit.tsv".to_string());
    }

    write_manifest(&dir, "analyze", a.seed, started, a, &artifacts)?;
    println!("analysis written to {}", dir.display());
    Ok(())
}

fn analyze_sweep(a: &AnalyzeArgs, runs: &Path, started: u128) -> SeraResult<()> {
    let sft_path = a
        .sft
        .as_ref()
        .ok_or_else(|| SeraError::InvalidArgument("--sft is required with --runs".to_string()))?;
    let data = load_data_dir(&a.data)?;
    let sft = load_policy_for_world(sft_path, &data.world)?;
    let prompts = sample_eval_prompts(&data.world, a.n_prompts, a.seed);
    let controls = SampleControls {
        temperature: 1.0,
        top_p: 1.0,
        max_len: data.world.response_len_max(),
        seed: a.seed,
    };

    // Completed sub-runs only (manifest present), in name order.
    let mut subs: Vec<PathBuf> = fs::read_dir(runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("manifest.json").exists())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(SeraError::InvalidArgument(format!(
            "no completed runs under {}",
            runs.display()
        )));
    }

    let mut sweep = Table::new(&[
        "run",
        "loss",
        "beta",
        "k",
        "k_tilde",
        "gamma",
        "win_rate_vs_sft",
    ])?;
    let mut names = Vec::new();
    let mut sets = Vec::new();
    for sub in &subs {
        let cfg = load_run_config(sub)?;
        let history = load_history(sub, &data.world)?;
        let r = win_rate(&data.world, history.latest(), &sft, &prompts, &controls)?;
        let name = sub
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| sub.display().to_string());
        sweep.push_row(vec![
            name.clone(),
            cfg.loss.name().to_string(),
            Table::fmt_f64(cfg.loss.beta()),
            cfg.k.to_string(),
            cfg.k_tilde().to_string(),
            Table::fmt_f64(cfg.gamma),
            Table::fmt_f64(r.score),
        ])?;
        let selected = sub.join(format!("selected_iter_{}.txt", a.jaccard_iter));
        if selected.exists() {
            names.push(name);
            sets.push(read_selected(&selected)?);
        }
    }

    let dir = prepare_out_dir(&a.out, a.force)?;
    let mut artifacts = Vec::new();
    sweep.write(&dir.join("sweep.tsv"))?;
    artifacts.push("sweep.tsv".to_string());
    if sets.len() >= 2 {
        jaccard_table(&names, &sets)?.write(&dir.join("jaccard.tsv"))?;
        artifacts.push("jaccard.tsv".to_string());
    }
    write_manifest(&dir, "analyze", a.seed, started, a, &artifacts)?;
    println!(
        "sweep table over {} runs written to {}",
        subs.len(),
        dir.display()
    );
    Ok(())
}
