//! Run orchestration: configuration, the training loop, metrics,
//! failure diagnosis, evaluation and reporting.

pub mod config;
pub mod diagnose;
pub mod metrics;
pub mod plot;
pub mod evaluate;
pub mod train;

pub use config::{AgentVariant, Precision, TrainConfig};
pub use diagnose::{diagnose, DiagnoseThresholds, DiagnosisReport, Evidence, FailureFlag};
pub use metrics::{mean_predictor_nll, mean_predictor_nlls, read_log, MeanPredictor, MetricsRecord};
pub use train::{build_model, build_policy, mean_std, model_losses, random_episode, train, Controller, TrainOutput, Trainer};
pub use evaluate::{evaluate, random_policy_returns, render_report, report_strips, EvalSummary, LoadedAgent};
pub use plot::{aggregate_dissociation, aggregate_returns, load_logs, plot, DissociationPoint, PlotOutput, ReturnPoint};
