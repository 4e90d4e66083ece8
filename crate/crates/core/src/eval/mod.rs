//! Experiment orchestration: subject splits, few-shot budgets, repeated
//! runs, metrics and the synthetic corpus.

pub mod experiment;
pub mod metrics;
pub mod report;
pub mod splits;
pub mod synthetic;

pub use experiment::{
    evaluate_downstream, finetune_sets, load_series, make_labeler, prepare, run_experiment,
    run_pretrain, window_all, Budget, CsvSource, DataConfig, ExperimentConfig, ExperimentReport,
    FoldResult, Method, MetricReport, PreparedData, PretrainSummary, PseudoConfig, RunResult,
    SplitConfig, WindowConfig,
};
pub use metrics::{accuracy, macro_f1, Summary};
pub use report::{to_tsv, write_tsv};
pub use splits::{assert_no_subjects, make_loso_folds, Fold, SplitPlan};
pub use synthetic::{generate_synthetic, ClassMotion, SyntheticSpec};
