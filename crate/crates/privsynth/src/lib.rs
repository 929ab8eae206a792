//! IO, wire formats, HTTP service, backend client and CLI around `privsynth-core`.

pub mod backend;
pub mod cli;
pub mod backend_http;
pub mod config;
pub mod conformance;
pub mod error;
pub mod files;
pub mod pipeline;
pub mod pngio;
pub mod protocol;
pub mod remote;
pub mod service;
pub mod store;
pub mod wire;

pub use error::{Error, ErrorEnvelope, Result};
pub use privsynth_core as core;
