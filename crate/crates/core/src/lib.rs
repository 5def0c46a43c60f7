//! CAN intrusion detection with graph attention networks and knowledge
//! distillation.
//!
//! The pipeline turns a CAN trace into sliding-window graphs
//! ([`graph`]), trains a deep multi-head GAT teacher with LSTM
//! jumping-knowledge aggregation ([`model`]), distills it into a compact
//! student, and scores windows as benign or attack ([`eval`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
