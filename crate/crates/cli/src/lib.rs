//! IO, configuration, remote knowledge clients, and the pipeline commands
//! behind the `icdex` binary. All numeric work lives in `icdex-core`.

pub mod clients;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod render;

pub use error::CliError;
