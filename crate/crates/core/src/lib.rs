//! Autonomous SRE engine for a simulated Elasticsearch-on-Kubernetes cluster.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod heal;
pub mod memory;
pub mod metrics;
pub mod monitors;
pub mod orchestrator;
pub mod perfmodel;
pub mod predictor;
pub mod sim;
