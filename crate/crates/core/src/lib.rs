//! Reconstruction of MNIST-style digit datasets from NIST-style binary scans.
//!
//! The crate covers the whole chain: ingesting packed 128x128 scans,
//! reproducing the historical crop / size-normalize / center-of-gravity
//! preprocessing, assembling paired 60,000-sample training and test sets with
//! full per-digit metadata, matching two datasets through jittered distances
//! and Hungarian assignment, and deciding whether one classifier is
//! significantly worse than another on a shared test set.
//!
//! Modules map onto pipeline stages:
//!
//! * [`formats`] - IDX tensor files and the NBIN source-archive container.
//! * [`preprocess`] - scan to 28x28 grayscale digit.
//! * [`assemble`] - the writer-split / completion recipe plus deduplication.
//! * [`matching`] - jittered distances and minimum-cost assignment.
//! * [`stats`] - Wald intervals, one-sided paired tests, Bonferroni budgets.
//! * [`eval`] - brute-force KNN and a small MLP for paired benchmarking.
//! * [`synth`] - seeded generators for desk-scale synthetic archives.

pub mod assemble;
pub mod eval;
pub mod formats;
pub mod matching;
pub mod preprocess;
pub mod rng;
pub mod stats;
pub mod synth;
