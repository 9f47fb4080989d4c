// SPDX-License-Identifier: MIT OR Apache-2.0

//! Key-value retrieval tasks, position sweeps, experiment presets and
//! report output.

mod eval;
mod presets;
mod report;
mod task;

pub use eval::{
    eval_position_sweep, CopyOracle, DepthRow, Perturbation, PositionSweepReport, Predictor,
    Runner, TaskOutcome,
};
pub use presets::{
    rescale_channel, rescale_layers, run_experiment, ExperimentConfig, ExperimentReport, Heatmap,
    Preset,
};
pub use report::{attention_chart_svg, emit_report, heatmap_svg, report_csv, Format};
pub use task::{decode, encode, encode_prompt, gen_kv_task, gen_kv_tasks, TaskInstance};
