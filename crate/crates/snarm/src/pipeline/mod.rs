//! Dataset ingestion, configuration, checkpointing and the regime runner.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pnm;
pub mod run;

pub use checkpoint::Checkpoint;
pub use config::{Config, Regime};
pub use dataset::{generate_synthetic_dataset, load_manifest, DatasetManifest};
pub use run::{run_regime, RunReport};
