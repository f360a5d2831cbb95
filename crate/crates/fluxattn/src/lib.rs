//! File formats, the threaded executor and the command-line pipeline built
//! on `fluxattn-core`.

pub mod commands;
pub mod error;
pub mod exec;
pub mod labels;
pub mod manifest;
pub mod model_io;
pub mod report;
pub mod trace;

pub use error::{IoError, IoResult};
