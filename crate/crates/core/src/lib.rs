//! Deterministic core of the consent registry.
//!
//! Everything in this crate is pure computation: content fingerprinting,
//! fixed-point vector math, the pair-wise match scorer, a single-chain
//! ledger simulation with gas metering, the sharded fingerprint index,
//! signed provenance manifests, and the consent/apportionment workflows.
//! No IO, no clocks, no global state; identical inputs give bit-identical
//! outputs across runs. The companion `optreg-cli` crate layers file
//! formats, the CLI and wall-clock benchmarking on top.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod error;
pub mod image;
pub mod math;
pub mod rng;

pub mod fingerprint;
pub mod matchnet;

pub mod ledger;
pub mod registry;

pub mod json;
pub mod manifest;
pub mod workflow;

pub mod corpus;

pub use error::{Error, Result};
