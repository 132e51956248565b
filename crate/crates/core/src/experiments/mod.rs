//! Experiment grid: patch pools, augmentation regimes, training cells and result tables.

pub mod augment;
pub mod config;
pub mod ensemble;
pub mod plot;
pub mod pool;
pub mod runner;

pub use augment::{
    assemble_augmented_trainset, balance_deficit, generate_synthetic, label_deficit, oversample_images, random_resized_crop,
    split_counts, CropConfig, SyntheticSource,
};
pub use config::{
    augmentation_study_cells, comparison_cells, shift_grid_cells, Augmentation, CellSpec, DataConfig, DataSource,
    ExperimentConfig, GridConfig,
};
pub use ensemble::{ensemble_predict, mean_scores, EnsemblePredictor};
pub use pool::{build_patch_pool, load_records};
pub use runner::{
    run_augmentation_study, run_cells, run_grid, run_shift_grid, CellOutcome, ExperimentContext, RunOptions,
};
