//! Orchestration: variant assembly, the training loop, evaluation, metrics
//! and plots.

mod agent;
mod chain;
mod config;
mod plot;
mod train;

pub use agent::{make_variant, mse_bellman_loss, Agent, FlowMeanReturn, ScalarCritic, ScalarQ, Stage, StepStats};
pub use chain::{chain_policy_evaluation, chain_probes, ChainOracle, PolicyEvalReport, Probe};
pub use config::{AgentConfig, Variant};
pub use plot::{emit_plots, x_pixel};
pub use train::{
    evaluate, final_score, read_metrics, train, EvalPolicy, EvalReport, MetricsRow, MetricsWriter, Phase, RunOutput, METRICS_HEADER,
};
