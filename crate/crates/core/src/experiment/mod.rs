//! Experiment orchestration: config, benchmark files, training and
//! evaluation runs, comparison tables and the gradient suite.

mod compare;
mod config;
mod data;
mod gradcheck;
mod run;

pub use compare::{
    cmd_compare, compare_reports, read_report, ComparisonRow, ComparisonTable, COMPARE_CSV, COMPARE_MD,
};
pub use config::{
    parse_cell, CompareConfig, ExperimentConfig, FusionDefaults, GenConfig, Provenance, TOOL_VERSION,
};
pub use data::{
    cmd_gen, generate, load_dataset, validate_data, DataManifest, DataSplits, Dataset, FileEntry, GeneratedFiles,
    ValidationSummary, DATA_FILES, MANIFEST_FILE, QUADRUPLETS_FILE, QUERIES_FILE, SCENES_FILE, SPLITS_FILE,
};
pub use gradcheck::{
    run_gradcheck, run_gradcheck_with, GradcheckResult, GRADCHECK_FLOOR, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use run::{
    cmd_eval, cmd_repro, cmd_train, cosine, evaluate, quad_scores, train_log, train_variant, validation_metrics,
    LogLine, ReproOutcome, RunSummary, Scorer, ScorerSource, TrainOutcome, CHECKPOINT_FILE, FROZEN_NAME,
    META_CONFIG_HASH, META_DATA_HASH, META_SEED, META_TOOL_VERSION, ORACLE_NAME, REPORT_CSV, REPORT_JSON, RUN_FILE,
    TIMING_FILE, TRAIN_LOG_FILE,
};

#[cfg(test)]
mod tests;
