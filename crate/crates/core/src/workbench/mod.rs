//! Synthetic tasks, ingestion, experiment orchestration and figure exports.

mod experiment;
mod export;
mod ingest;
mod tasks;

pub use experiment::{
    pretrain, run_experiment, select_for_task, ExperimentManifest, FineTuneConfig, ModelSource, OutputLayout,
    PretrainConfig, ProbeConfig, ProbeSummary, RunSummary, SelectSummary, SelectionConfig, SelectionRecord, Stages,
    SweepConfig, TaskData, MANIFEST_SCHEMA_VERSION,
};
pub use export::{export_all, export_comparison, export_figure, FigureKind, SweepPoint, EXPORT_SCHEMA_VERSION};
pub use ingest::{ingest, ingest_reader, InputFormat, Tokenizer};
pub use tasks::{gen_tasks, Generator, TaskSpec};
