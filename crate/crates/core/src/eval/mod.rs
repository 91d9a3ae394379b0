//! Evaluation and experiment orchestration: accuracy metrics, train/test
//! splits, result tables, the ablation grid and the end-to-end pipeline.

pub mod ablation;
pub mod metrics;
pub mod pipeline;
pub mod splits;
pub mod tables;

pub use ablation::{AblationInputs, AblationSetting, Supervision};
pub use metrics::{mean_std, split_errors, tre, tre_split, TreResult, TreSplit};
pub use pipeline::{
    build_graphs, evaluate, file_id, gen_data, load_config, register_predictions, report,
    run_ablation, run_libr, run_pipeline, run_wicp, save_config, train_models,
    CorrespondenceTarget, ErrorFieldDoc, GraphsDoc, LibrDoc, MasterConfig, OutPaths, PredDoc,
    RunSummary, StageFailure, StageSummary, WicpConfig, WicpDoc, GRAPHS_DOC, LIBR_DOC, METHODS,
    WICP_DOC,
};
pub use splits::{make_splits, Split, SplitSpec, SplitStrategy};
pub use tables::{emit_jsonl, emit_text, load_table, parse_jsonl, save_table, ResultRow};

#[cfg(test)]
mod tests;
