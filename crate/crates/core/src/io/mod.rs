//! Persistence: the ETLT container, feature sets, checkpoints, config files
//! and results tables.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod results;

pub use checkpoint::{load_mlp, load_model, load_online, save_mlp, save_model, save_online};
pub use config::{parse_methods, parse_scorer, plan_from_config, KeyValues, PlanConfig, Sweep};
pub use container::{read_container, write_atomic, write_container, Container, Payload, Section};
pub use dataset::{load_feature_set, save_feature_set, FeatureSet};
pub use results::{ResultsRow, ResultsTable};
