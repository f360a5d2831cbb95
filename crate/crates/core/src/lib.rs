//! Allocation-only core of the fluxattn testbed.
//!
//! Everything here is a pure function over in-memory tensors: exact and
//! partial attention with log-sum-exp merging, min/max block metadata and
//! top-k block selection, the output-deviation budget oracle, the 41-feature
//! head descriptor, the head-property predictor, the granularity/budget
//! selector, the task cost model with its discrete-event scheduler, and the
//! synthetic workload generator.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, threads and
//! the command line live in the `fluxattn` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attn;
pub mod block;
pub mod budget;
pub mod cache;
pub mod error;
pub mod features;
pub mod math;
pub mod pipeline;
pub mod predictor;
pub mod schedule;
pub mod selector;
pub mod tensor;
pub mod workload;

pub use error::{Error, Result};
pub use tensor::Matrix;
