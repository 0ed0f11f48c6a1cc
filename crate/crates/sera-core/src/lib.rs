//! Desk-scale laboratory for studying margin-based sample selection and
//! on-policy preference bootstrapping on exactly differentiable bigram
//! policies.
//!
//! The crate is organized bottom-up:
//!
//! - [`policy`]: tabular bigram policies with exact log-probabilities,
//!   exact gradients, and seeded nucleus sampling.
//! - [`losses`]: preference-pair losses (sigmoid, hinge, squared, and a
//!   length-normalized reference-free variant) with analytic gradients.
//! - [`selection`]: implicit-reward margins over a policy history,
//!   ensemble rewards, and top-k selection.
//! - [`bootstrap`]: on-policy candidate generation and self-labeled pair
//!   extraction.
//! - [`trainer`]: the iterative training loop tying selection and
//!   bootstrapping together.
//! - [`synth`]: a synthetic preference world with a hidden gold policy and
//!   controllable label corruption.
//! - [`eval`]: gold win rates, reward correlations, selection audits, and a
//!   variance check for Bayes-distilled risk.
//! - [`report`]: delimited table output shared by the CLI commands.
//! - [`cli`]: the `sera` command-line front end.
//!
//! Everything is deterministic given a seed: random streams are derived by
//! labeled hashing in [`seed`], so adding a new consumer never shifts
//! existing streams.

pub mod bootstrap;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod policy;
pub mod report;
pub mod seed;
pub mod selection;
pub mod synth;
pub mod trainer;

pub use data::PreferencePair;
pub use error::{SeraError, SeraResult};
pub use losses::LossKind;
pub use policy::{SampleControls, TabularPolicy, TokenSeq, Vocab};
pub use selection::PolicyHistory;
pub use synth::SyntheticWorld;
pub use trainer::SeraConfig;
