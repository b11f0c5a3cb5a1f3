//! Simulation harness, file formats and command-line interface built on
//! [`seqrts_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod fmt;
pub mod harness;
pub mod model_io;
pub mod output;
pub mod trace_io;
