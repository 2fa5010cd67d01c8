//! Ego-graph transformer for semi-supervised node classification.
//!
//! The pipeline: sample a small ego-graph around each node, feed it to a
//! transformer whose attention scores carry learned structural-proximity
//! biases, regularize the per-node samples toward agreement during training,
//! and average several sampled predictions at inference time. Everything is
//! CPU-only, double precision, and deterministic given a master seed.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod graph;
pub mod infer;
pub mod model;
pub mod node2seq;
pub mod rng;
pub mod synth;
pub mod train;
