//! Soft-affinity core allocation and a discrete-event scheduling simulator
//! for multicore machines with split or monolithic last-level caches.

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod cli;
pub mod costmodel;
pub mod metrics;
pub mod predictor;
pub mod scenario;
pub mod scheduler;
pub mod topology;
pub mod units;
pub mod workload;
