//! Dataset ingestion, exchange formats, the synthetic-scene oracle and the
//! staged pipeline runner behind the `sparsesplat` command-line tool.

pub mod config;
pub mod external;
pub mod formats;
pub mod pfm;
pub mod pipeline;
pub mod scene;
pub mod synth;
