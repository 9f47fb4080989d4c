// SPDX-License-Identifier: MIT OR Apache-2.0

//! `poshid`: command-line front end for the positional-channel lab.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use poshid::harness::{
    emit_report, gen_kv_tasks, run_experiment, ExperimentConfig, ExperimentReport, Format,
    Perturbation, Predictor, Preset, Runner, TaskInstance,
};
use poshid::probe::{default_observe_layers, mean_hidden_dump, HiddenStateDump};
use poshid::scaling::{apply_spec, ScalingSpec};
use poshid::search::{exhaustive_search, search_positional_channel, CalibrationSet, SearchParams};
use poshid::toymodel::{
    build_planted_model, forward, init_model, planted_config, planted_spec, ForwardOverrides,
    LayerRange, Model, ModelConfig, PositionScheme,
};
use poshid::{Error, Result};

#[derive(Parser)]
#[command(name = "poshid", version, about = "Positional hidden-state lab")]
struct Cli {
    /// Default seed for every randomized step.
    #[arg(long, env = "POSHID_SEED", default_value_t = 0, global = true)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Rope,
    Alibi,
    Nope,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotFormat {
    Svg,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random model (or the planted fixture) as a checkpoint.
    InitModel {
        #[arg(long, value_enum, default_value = "rope")]
        scheme: Scheme,
        /// Build the hand-made fixture with one positional channel.
        #[arg(long)]
        planted: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate key-value retrieval tasks as a JSON array.
    GenTask {
        #[arg(long, default_value_t = 16)]
        pairs: usize,
        /// Gold depths in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        depth: Vec<f64>,
        /// Tasks per depth.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average residual-stream inputs over random strings into a PHSD file.
    Dump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 256)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find the positional channel and its scale factor.
    Search {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Calibration tasks from `gen-task`.
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        eps: Option<usize>,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 16)]
        window: usize,
        #[arg(long, default_value_t = 30)]
        skip: usize,
        /// Scaled layers as `lo,hi`.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Evaluate every channel instead of the ranked candidates.
        #[arg(long)]
        exhaustive: bool,
        /// Allow exhaustive search above the channel limit.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: PathBuf,
        /// Ranking CSV; defaults to the output path with a `.csv` extension.
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Evaluate tasks on a model, optionally scaled and perturbed.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Forward overrides applied as given (no task-relative segments).
        #[arg(long)]
        overrides: Option<PathBuf>,
    },
    /// Run an experiment preset and write CSV, JSON and SVG reports.
    Sweep {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint; defaults to a seeded desk model (the planted fixture
        /// for `factor_sweep`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        pairs: usize,
        #[arg(long, default_value_t = 2)]
        tasks_per_depth: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        depths: Vec<f64>,
        #[arg(long)]
        channel: Option<usize>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        factors: Option<Vec<f64>>,
    },
    /// Re-render a saved report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        format: PlotFormat,
        /// Output directory; defaults to the report's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Accepts a single task object or an array of tasks.
fn read_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let v: serde_json::Value = read_json(path)?;
    Ok(if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    })
}

fn layer_range(v: &[usize]) -> Result<LayerRange> {
    match v {
        [lo, hi] => LayerRange::new(*lo, *hi),
        _ => Err(Error::InvalidArgument(
            "layers must be given as lo,hi".into(),
        )),
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::InitModel {
            scheme,
            planted,
            out,
        } => {
            let model = if planted {
                build_planted_model(&planted_config(seed))?.0
            } else {
                let scheme = match scheme {
                    Scheme::Rope => PositionScheme::Rope { base: 10_000.0 },
                    Scheme::Alibi => PositionScheme::Alibi,
                    Scheme::Nope => PositionScheme::Nope,
                };
                init_model(&ModelConfig::desk(seed).with_scheme(scheme))?
            };
            model.save(&out)?;
            println!("{} {}", model.id(), out.display());
        }
        Command::GenTask {
            pairs,
            depth,
            count,
            out,
        } => {
            let tasks = gen_kv_tasks(pairs, &depth, count, seed)?;
            write_json(&out, &tasks)?;
        }
        Command::Dump {
            model,
            samples,
            len,
            out,
        } => {
            let model = Model::load(&model)?;
            mean_hidden_dump(&model, samples, len, seed)?.write(&out)?;
        }
        Command::Search {
            dump,
            model,
            tasks,
            eps,
            topk,
            grid,
            window,
            skip,
            layers,
            exhaustive,
            force,
            out,
            ranking,
        } => {
            let model = Model::load(&model)?;
            let dump = HiddenStateDump::read(&dump)?;
            let set = CalibrationSet::new(read_tasks(&tasks)?)?;
            let mut params = SearchParams::desk(model.config().n_layers);
            if let Some(e) = eps {
                params.eps = e;
            }
            if let Some(g) = grid {
                params.factor_grid = g;
            }
            params.top_k = topk;
            params.window = window;
            params.skip_prefix = skip;
            params.layers = layers.as_deref().map(layer_range).transpose()?;
            let result = if exhaustive {
                exhaustive_search(&model, &dump, &set, &params, force)?
            } else {
                search_positional_channel(&model, &dump, &set, &params)?
            };
            write_json(&out, &result)?;
            result.write_ranking_csv(&ranking.unwrap_or_else(|| out.with_extension("csv")))?;
            println!(
                "channel {} factor {} loss {}",
                result.channel,
                result.factor,
                result
                    .factor_losses
                    .iter()
                    .find(|(f, _)| *f == result.factor)
                    .map_or(f64::NAN, |p| p.1)
            );
        }
        Command::Run {
            model,
            task,
            spec,
            overrides,
        } => {
            let model = Model::load(&model)?;
            let tasks = read_tasks(&task)?;
            let spec: Option<ScalingSpec> = spec.as_deref().map(read_json).transpose()?;
            if let Some(s) = &spec {
                apply_spec(&model, s.clone())?;
            }
            let observe: Vec<usize> = default_observe_layers(model.config().n_layers)
                .layers()
                .collect();
            let mut lines = Vec::new();
            match overrides {
                None => {
                    let runner = Runner::new(&model)
                        .with_perturbation(Perturbation::None)
                        .with_spec(spec);
                    for t in &tasks {
                        let o = runner.evaluate(t, &observe)?;
                        lines.push(serde_json::json!({
                            "seed": t.seed,
                            "depth": t.depth,
                            "answer": t.answer,
                            "output": String::from_utf8_lossy(&o.output),
                            "correct": o.correct,
                            "nll": o.nll,
                            "attention": o.attention,
                        }));
                    }
                }
                Some(path) => {
                    let ov: ForwardOverrides = read_json(&path)?;
                    for t in &tasks {
                        let r = match &spec {
                            Some(s) => apply_spec(&model, s.clone())?.forward(&t.tokens, &ov)?,
                            None => forward(&model, &t.tokens, &ov)?,
                        };
                        let last = r.logits.row(r.logits.rows() - 1);
                        let top = last
                            .iter()
                            .enumerate()
                            .fold(0, |b, (i, &v)| if v > last[b] { i } else { b });
                        lines.push(serde_json::json!({
                            "seed": t.seed,
                            "depth": t.depth,
                            "next_token": top,
                        }));
                    }
                }
            }
            for l in lines {
                println!("{l}");
            }
        }
        Command::Sweep {
            preset,
            out,
            model,
            pairs,
            tasks_per_depth,
            depths,
            channel,
            factors,
        } => {
            let preset: Preset = preset.parse()?;
            let mut cfg = ExperimentConfig::new(preset, seed);
            cfg.n_pairs = pairs;
            cfg.tasks_per_depth = tasks_per_depth;
            cfg.depths = depths;
            cfg.channel = channel;
            if let Some(f) = factors {
                cfg.factors = f;
            }
            let model = match (&model, preset) {
                (Some(p), _) => Model::load(p)?,
                (None, Preset::FactorSweep) => {
                    let (m, layout) = build_planted_model(&planted_config(seed))?;
                    cfg.channel.get_or_insert(layout.channel);
                    cfg.scale_layers = Some(planted_spec(&layout, 1.0).layers);
                    m
                }
                (None, _) => init_model(&ModelConfig::desk(seed))?,
            };
            let report = run_experiment(&cfg, &model)?;
            for p in emit_report(&report, &out, &[Format::Csv, Format::Json, Format::Svg])? {
                println!("{}", p.display());
            }
        }
        Command::Plot {
            report,
            format,
            out,
        } => {
            let r: ExperimentReport = read_json(&report)?;
            let dir = out.unwrap_or_else(|| {
                report
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let f = match format {
                PlotFormat::Svg => Format::Svg,
                PlotFormat::Csv => Format::Csv,
            };
            for p in emit_report(&r, &dir, &[f])? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::NoPositionalChannel) => {
            eprintln!("no positional channel found");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
