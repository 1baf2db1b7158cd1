//! Config-driven studies producing result tables keyed by experiment cell.

mod config;
mod evaluate;
mod result;
mod studies;

pub use config::{
    default_normalized_l63, sub_seed, ChosenCell, Experiment, ExperimentConfig, FeatureGrid,
    FeatureSet,
};
pub use evaluate::{evaluate_readout, vpt_of_rollout};
pub use result::{AttractorDump, Cell, CellKey, CellOutcome, GridResult, Variant};
pub use studies::{
    run_bias_ablation, run_colpitts_study, run_cross_validation, run_experiment, run_grid_search,
    run_noise_length_sweep, run_skip_study, skip_training_steps,
};
