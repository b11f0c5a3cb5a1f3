//! Online randomization under a per-block treatment budget.
//!
//! Decision times arrive every few minutes; only some of them are *risk
//! times* (the participant is sedentary and available). The samplers in this
//! crate assign a treatment probability at each risk time so that the
//! expected number of treatments per block meets a budget while the
//! probabilities stay as uniform as possible across the block's risk times.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration
//! loading, parallel experiment drivers and the command line live in the
//! `seqrts` companion crate.
//!
//! Modules:
//! - [`trial`]: trial geometry, availability criteria, traces, unit selection.
//! - [`ghat`]: the remaining-risk estimator fitted from run-length data.
//! - [`sampler`]: the sequential budget sampler, the oracle and baselines.
//! - [`sim`]: synthetic behavior traces, sequential day simulation, imputation.
//! - [`metrics`]: treatment counts, MAD/KL/Hellinger uniformity, covariates.
//! - [`rng`]: per-stream deterministic random number generation.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod ghat;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod sim;
pub mod trial;

pub use ghat::{GHatModel, HorizonMode, RemainingRiskEstimator, RunLengthTable, SedFractionTable};
pub use metrics::{BlockMetrics, CovariateRow, LogBase, Summary};
pub use sampler::{FaultModel, FixedProbSampler, OracleSampler, Sampler, SamplerState, SeqRtsConfig, SeqRtsSampler};
pub use sim::{BehaviorParams, SimConfig};
pub use trial::{AvailabilityFlags, DecisionRecord, ParticipantTrace, TrialConfig, Unit};
