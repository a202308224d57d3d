//! Predictor-based neural architecture search on tabular benchmarks.
//!
//! The crate covers the whole loop: an architecture space of small DAG cells
//! ([`arch_space`]), a benchmark oracle that replaces network training
//! ([`bench_oracle`]), a graph-convolutional ranking predictor with analytic
//! gradients ([`predictor`]), three strategies for building the reduced set the
//! predictor scores ([`samplers`]), the search loop itself ([`search`]), the
//! trials-until-success calculus used to compare searches in decibels
//! ([`efficiency`]), and a seeded experiment harness ([`experiment`]) behind the
//! `pbnas` binary.

pub mod arch_space;
pub mod bench_oracle;
pub mod efficiency;
pub mod experiment;
pub mod predictor;
pub mod samplers;
pub mod search;
pub mod seeding;

pub use arch_space::{ArchKey, Architecture, SpaceSpec};
pub use bench_oracle::Benchmark;
