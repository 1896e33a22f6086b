//! Sequence labeling with sum-product-network local factors.
//!
//! The crate provides a tree-structured SPN classifier ([`spn`]), a
//! linear-chain CRF with SPN local factors and higher-order label-gram
//! extensions ([`chain`]), a higher-order maximum-entropy Markov model
//! ([`memm`]), conditional-likelihood SGD training ([`train`]), dataset
//! loaders and a synthetic task generator ([`data`]), and exhaustive
//! brute-force oracles ([`oracle`]) the fast paths are verified against.
//!
//! # Example
//!
//! Train a first-order chain on a synthetic task and decode a sequence:
//!
//! ```
//! use rand::SeedableRng;
//! use spnseq::train::{self, TrainConfig};
//! use spnseq::{ChainModel, NGramDictionary, Semiring, SpnModel, SpnTopology};
//!
//! # fn main() -> spnseq::Result<()> {
//! let data = spnseq::data::synth_task(0, 60, 6, 3, 4)?;
//! let (train_set, dev_set) = data.split_tail(15)?;
//!
//! let topology = SpnTopology::new(1, 2, 2, 3, 4, Semiring::SumProduct)?;
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let spn = SpnModel::random_init(topology, &mut rng);
//! let model = ChainModel::first_order(spn, NGramDictionary::dense(2, 3)?)?;
//!
//! let config = TrainConfig {
//!     epochs: 10,
//!     ..TrainConfig::default()
//! };
//! let (best, report) = train::train(&model, &train_set.sequences, &dev_set.sequences, &config)?;
//! assert!(report.best_dev_error.unwrap() < 0.05);
//!
//! let (labels, _score) = best.viterbi(&dev_set.sequences[0].observations)?;
//! assert_eq!(labels.len(), 6);
//! # Ok(())
//! # }
//! ```

pub mod chain;
pub mod data;
pub mod error;
pub mod math;
pub mod memm;
pub mod ngram;
pub mod oracle;
pub mod sequence;
pub mod spn;
pub mod train;

pub use chain::{
    ChainGradient, ChainMarginals, ChainMessages, ChainModel, LocalFactor, TransitionBlock,
};
pub use error::{Error, Result};
pub use memm::{BeamHypothesis, MemmGradient, MemmModel};
pub use ngram::{NGramDictionary, START_LABEL};
pub use oracle::{chain_brute_force, memm_brute_force, spn_brute_force, ExhaustiveBudget};
pub use sequence::LabeledSequence;
pub use spn::{PathPrefix, PathStep, Semiring, SpnEvaluation, SpnModel, SpnTopology, SpnWeights};
pub use train::{SequenceModel, TrainConfig, TrainReport};
