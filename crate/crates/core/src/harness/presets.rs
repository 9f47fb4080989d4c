// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named perturbation experiments, each a baseline branch plus one or
//! more modified branches evaluated on the same tasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::{eval_position_sweep, Perturbation, PositionSweepReport, Runner};
use super::task::{gen_kv_tasks, TaskInstance};
use crate::error::{Error, Result};
use crate::probe::default_observe_layers;
use crate::scaling::{default_layer_range, ScalingSpec};
use crate::toymodel::{AttentionCaptureRequest, LayerRange, Model, ScaledCache, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    CropMask,
    PeBegin,
    PeEnd,
    BoostGold,
    ChannelOffset,
    FactorSweep,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::CropMask,
        Preset::PeBegin,
        Preset::PeEnd,
        Preset::BoostGold,
        Preset::ChannelOffset,
        Preset::FactorSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::CropMask => "crop_mask",
            Preset::PeBegin => "pe_begin",
            Preset::PeEnd => "pe_end",
            Preset::BoostGold => "boost_gold",
            Preset::ChannelOffset => "channel_offset",
            Preset::FactorSweep => "factor_sweep",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?}")))
    }
}

/// Maps a layer band given for a 32-layer model onto `n_layers`.
pub fn rescale_layers(lo: usize, hi: usize, n_layers: usize) -> LayerRange {
    let f = |l: usize| ((l * n_layers) as f64 / 32.0).round().max(1.0) as usize;
    let lo = f(lo).min(n_layers);
    LayerRange::new(lo, f(hi).clamp(lo, n_layers)).expect("ordered range")
}

/// Maps a channel index of a 4096-wide model onto `d_model`.
pub fn rescale_channel(channel: usize, d_model: usize) -> usize {
    (((channel * d_model) as f64 / 4096.0).round() as usize).clamp(1, d_model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub n_pairs: usize,
    pub depths: Vec<f64>,
    pub tasks_per_depth: usize,
    pub seed: u64,
    /// Channel for `channel_offset` and `factor_sweep`.
    pub channel: Option<usize>,
    /// Layers for `factor_sweep`; defaults to the usual scaling band.
    pub scale_layers: Option<LayerRange>,
    pub factors: Vec<f64>,
}

impl ExperimentConfig {
    pub fn new(preset: Preset, seed: u64) -> Self {
        ExperimentConfig {
            preset,
            n_pairs: 16,
            depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            tasks_per_depth: 2,
            seed,
            channel: None,
            scale_layers: None,
            factors: vec![2.0, 1.0, 0.5, 0.0, -0.5, -1.0],
        }
    }
}

/// Head-mean last-row attention per layer for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub branch: String,
    pub depth: f64,
    pub layers: Vec<usize>,
    /// `values[layer][position]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub preset: String,
    pub model_id: String,
    pub seed: u64,
    pub n_pairs: usize,
    pub branches: Vec<PositionSweepReport>,
    pub heatmap: Option<Heatmap>,
}

struct Branch {
    name: String,
    perturbation: Perturbation,
    spec: Option<ScalingSpec>,
}

fn branches(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<Branch>> {
    let c = model.config();
    let l = c.n_layers;
    let plain = |name: &str, p: Perturbation| Branch {
        name: name.into(),
        perturbation: p,
        spec: None,
    };
    let mut out = vec![plain("baseline", Perturbation::None)];
    match cfg.preset {
        Preset::CropMask => out.push(plain(
            "crop_mask",
            Perturbation::CropMask {
                layers: rescale_layers(2, 8, l),
                keep_first: true,
            },
        )),
        Preset::PeBegin => out.push(plain("pe_begin", Perturbation::PeBegin)),
        Preset::PeEnd => out.push(plain("pe_end", Perturbation::PeEnd)),
        Preset::BoostGold => out.push(plain(
            "boost_gold",
            Perturbation::BoostGold {
                factor: 2.0,
                layers: default_observe_layers(l),
            },
        )),
        Preset::ChannelOffset => out.push(plain(
            "channel_offset",
            Perturbation::ChannelOffset {
                channel: cfg
                    .channel
                    .unwrap_or_else(|| rescale_channel(213, c.d_model)),
                delta: -0.3,
                layers: rescale_layers(15, 20, l),
            },
        )),
        Preset::FactorSweep => {
            let channel = cfg
                .channel
                .ok_or_else(|| Error::invalid("factor_sweep needs a channel"))?;
            let layers = cfg.scale_layers.unwrap_or_else(|| default_layer_range(l));
            for &s in &cfg.factors {
                let spec = ScalingSpec::new(vec![channel], s, layers);
                spec.validate(c)?;
                out.push(Branch {
                    name: format!("s={s}"),
                    perturbation: Perturbation::None,
                    spec: Some(spec),
                });
            }
        }
    }
    Ok(out)
}

fn heatmap(model: &Model, task: &TaskInstance, branch: &Branch) -> Result<Heatmap> {
    let c = model.config();
    let ov = branch.perturbation.overrides_for(task)?;
    let mut s = Session::new(model, ov)?;
    s.extend(&task.tokens)?;
    let mut cache = match &branch.spec {
        Some(spec) => Some(ScaledCache::new(model, spec.clone())?),
        None => None,
    };
    let layers: Vec<usize> = (1..=c.n_layers).collect();
    let cap = s.last_row_attention(
        &AttentionCaptureRequest::last_row(layers.clone()),
        cache.as_mut(),
    )?;
    let n = task.tokens.len();
    let values = layers
        .iter()
        .map(|&l| {
            let mut row = vec![0.0; n];
            for h in 0..c.n_heads {
                let a = cap.last_row(l, h).expect("every layer captured");
                row.iter_mut()
                    .zip(a)
                    .for_each(|(r, v)| *r += v / c.n_heads as f64);
            }
            row
        })
        .collect();
    Ok(Heatmap {
        branch: branch.name.clone(),
        depth: task.depth,
        layers,
        values,
    })
}

/// Runs every branch of a preset on one shared task set.
pub fn run_experiment(cfg: &ExperimentConfig, model: &Model) -> Result<ExperimentReport> {
    if cfg.depths.is_empty() || cfg.tasks_per_depth == 0 {
        return Err(Error::invalid(
            "need at least one depth and one task per depth",
        ));
    }
    let tasks = gen_kv_tasks(cfg.n_pairs, &cfg.depths, cfg.tasks_per_depth, cfg.seed)?;
    let observe: Vec<usize> = default_observe_layers(model.config().n_layers)
        .layers()
        .collect();
    let branches = branches(cfg, model)?;
    let mut reports = Vec::with_capacity(branches.len());
    for b in &branches {
        log::info!("{}: branch {}", cfg.preset, b.name);
        let runner = Runner::new(model)
            .with_perturbation(b.perturbation.clone())
            .with_spec(b.spec.clone());
        reports.push(eval_position_sweep(
            &runner,
            &b.name,
            b.spec.as_ref(),
            &tasks,
            &observe,
        )?);
    }
    let probe_task = tasks
        .iter()
        .min_by(|a, b| (a.depth - 0.5).abs().total_cmp(&(b.depth - 0.5).abs()))
        .expect("tasks non-empty");
    let heat = heatmap(
        model,
        probe_task,
        branches.last().expect("baseline present"),
    )?;
    Ok(ExperimentReport {
        preset: cfg.preset.name().into(),
        model_id: model.id(),
        seed: cfg.seed,
        n_pairs: cfg.n_pairs,
        branches: reports,
        heatmap: Some(heat),
    })
}
