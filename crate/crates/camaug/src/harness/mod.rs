//! Experiment orchestration: configuration files, the single-run pipeline
//! (split → classifier → saliency cache → masked segmentation training →
//! evaluation), the masking-probability sweep, the leave-one-centre-out
//! protocol, and table rendering.
//!
//! Artifact layout under `output_dir`:
//!
//! ```text
//! classifier-centre{h}/   frozen centre classifier for the split
//! cams-centre{h}.bin      saliency cache (keyed by classifier hash + threshold)
//! runs/{fingerprint}/     per-run config, split, checkpoints, run.json
//! sweeps/sweep-{id}.json  p-sweep records
//! all-centres.{json,txt}  combined leave-one-centre-out results
//! ```
//!
//! Run directories are named by config fingerprint, so concurrent
//! experiments with different configs never share files; everything inside
//! one run is written by a single orchestrator.

pub mod config;
pub mod experiment;
pub mod report;
pub mod sweep;

pub use config::{
    mode_for, ClassifierOpts, DataConfig, EpochsConfig, ExperimentConfig, MaskingConfig,
    OptimConfig, SPLIT_RATIOS,
};
pub use experiment::{
    ensure_cams, ensure_classifier, load_dataset, load_run_record, make_split, run_experiment,
    EpochStats, RunRecord,
};
pub use report::{combined_table, sweep_table};
pub use sweep::{
    load_all_centres, load_sweep_record, run_all_centres, sweep_file_path, sweep_p,
    AllCentresRecord, CentreOutcome, SweepRecord, SWEEP_P_VALUES,
};
