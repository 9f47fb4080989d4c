// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy evaluation of retrieval tasks and position sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{decode, TaskInstance};
use crate::error::{Error, Result};
use crate::numerics::log_softmax;
use crate::probe::{
    attention_to_segment, boost_attention, channel_offset, crop_mask, shift_position_ids, ShiftMode,
};
use crate::scaling::ScalingSpec;
use crate::toymodel::{
    AttentionCaptureRequest, ForwardOverrides, LayerRange, Model, ScaledCache, Session,
};

/// Result of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub output: Vec<u8>,
    pub correct: bool,
    /// Mean per-token negative log-likelihood of the answer.
    pub nll: f64,
    /// Head-mean attention of the last prompt token to the gold pair.
    pub attention: f64,
}

/// Anything that can answer a retrieval task.
pub trait Predictor: Sync {
    fn name(&self) -> String;

    fn evaluate(&self, task: &TaskInstance, observe: &[usize]) -> Result<TaskOutcome>;
}

/// Task-dependent forward perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    None,
    /// Gold tokens see only the gold pair and, optionally, the first token.
    CropMask {
        layers: LayerRange,
        keep_first: bool,
    },
    /// Gold pair takes the position ids of the first pair.
    PeBegin,
    /// Gold pair takes the position ids of the last pair.
    PeEnd,
    BoostGold {
        factor: f64,
        layers: LayerRange,
    },
    ChannelOffset {
        channel: usize,
        delta: f64,
        layers: LayerRange,
    },
}

impl Perturbation {
    pub fn overrides_for(&self, task: &TaskInstance) -> Result<ForwardOverrides> {
        let n = task.tokens.len();
        let g = &task.gold;
        let mut ov = ForwardOverrides::none();
        match self {
            Perturbation::None => {}
            Perturbation::CropMask { layers, keep_first } => {
                ov.mask = Some(crop_mask(n, g, *layers, *keep_first)?);
            }
            Perturbation::PeBegin => {
                let first = task.pair_segments[0].clone();
                ov.position_ids = Some(shift_position_ids(n, g, &ShiftMode::ToBeginning(first))?);
            }
            Perturbation::PeEnd => {
                let last = task.pair_segments[task.n_pairs - 1].clone();
                ov.position_ids = Some(shift_position_ids(n, g, &ShiftMode::ToEnd(last))?);
            }
            Perturbation::BoostGold { factor, layers } => {
                ov.attention_boosts
                    .push(boost_attention(g, *factor, *layers)?);
            }
            Perturbation::ChannelOffset {
                channel,
                delta,
                layers,
            } => {
                ov.channel_edits
                    .push(channel_offset(g, *channel, *delta, *layers));
            }
        }
        Ok(ov)
    }
}

/// A transformer, optionally perturbed and optionally on the scaled path.
#[derive(Debug, Clone)]
pub struct Runner<'m> {
    pub model: &'m Model,
    pub perturbation: Perturbation,
    pub spec: Option<ScalingSpec>,
    /// Tokens generated beyond the answer length.
    pub extra_tokens: usize,
}

impl<'m> Runner<'m> {
    pub fn new(model: &'m Model) -> Self {
        Runner {
            model,
            perturbation: Perturbation::None,
            spec: None,
            extra_tokens: 4,
        }
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Self {
        self.perturbation = p;
        self
    }

    pub fn with_spec(mut self, spec: Option<ScalingSpec>) -> Self {
        self.spec = spec;
        self
    }
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

impl Predictor for Runner<'_> {
    fn name(&self) -> String {
        format!("model {}", self.model.id())
    }

    fn evaluate(&self, task: &TaskInstance, observe: &[usize]) -> Result<TaskOutcome> {
        let ov = self.perturbation.overrides_for(task)?;
        let max_seq = self.model.config().max_seq;
        let answer = task.answer_tokens();
        if task.tokens.len() + answer.len() > max_seq {
            return Err(Error::invalid(format!(
                "prompt of {} tokens plus answer exceeds max_seq {max_seq}",
                task.tokens.len()
            )));
        }
        let mut session = Session::new(self.model, ov)?;
        session.extend(&task.tokens)?;
        let mut cache = match &self.spec {
            Some(s) => Some(ScaledCache::new(self.model, s.clone())?),
            None => None,
        };

        let req = AttentionCaptureRequest::last_row(observe.iter().copied());
        let cap = session.last_row_attention(&req, cache.as_mut())?;
        let attention = attention_to_segment(&cap, &task.gold, observe, &[])?;

        let mut teacher = session.clone();
        let mut teacher_cache = cache.clone();
        let mut nll = 0.0;
        for &y in &answer {
            let logits = teacher.logits_as_last(teacher.len() - 1, teacher_cache.as_mut())?;
            nll -= log_softmax(&logits)[y as usize];
            teacher.push(y)?;
        }
        nll /= answer.len().max(1) as f64;

        let mut generated = Vec::new();
        let budget = answer.len() + self.extra_tokens;
        for _ in 0..budget {
            let logits = session.logits_as_last(session.len() - 1, cache.as_mut())?;
            let tok = argmax(&logits);
            generated.push(tok);
            if session.len() >= max_seq {
                break;
            }
            session.push(tok)?;
        }
        let output = decode(&generated);
        let correct = contains(&output, task.answer.as_bytes());
        Ok(TaskOutcome {
            output,
            correct,
            nll,
            attention,
        })
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Reference predictor that always answers with the gold value and puts
/// all attention on the gold pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyOracle;

impl Predictor for CopyOracle {
    fn name(&self) -> String {
        "copy oracle".into()
    }

    fn evaluate(&self, task: &TaskInstance, _observe: &[usize]) -> Result<TaskOutcome> {
        let output = task.answer.as_bytes().to_vec();
        Ok(TaskOutcome {
            correct: contains(&output, task.answer.as_bytes()),
            output,
            nll: 0.0,
            attention: 1.0 / task.gold.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: f64,
    pub n_tasks: usize,
    pub accuracy: f64,
    pub mean_nll: f64,
    pub mean_attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSweepReport {
    /// Name of the configuration evaluated, e.g. `"baseline"`.
    pub branch: String,
    pub predictor: String,
    pub spec: Option<ScalingSpec>,
    pub observe_layers: Vec<usize>,
    pub task_seeds: Vec<u64>,
    /// Sorted by depth.
    pub rows: Vec<DepthRow>,
}

/// Evaluates every task and aggregates by depth. Tasks run in parallel;
/// aggregation follows task order.
pub fn eval_position_sweep(
    predictor: &dyn Predictor,
    branch: &str,
    spec: Option<&ScalingSpec>,
    tasks: &[TaskInstance],
    observe: &[usize],
) -> Result<PositionSweepReport> {
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks to evaluate"));
    }
    let outcomes: Vec<TaskOutcome> = tasks
        .par_iter()
        .map(|t| predictor.evaluate(t, observe))
        .collect::<Result<_>>()?;
    let mut depths: Vec<f64> = tasks.iter().map(|t| t.depth).collect();
    depths.sort_by(f64::total_cmp);
    depths.dedup();
    let rows = depths
        .iter()
        .map(|&d| {
            let picked: Vec<&TaskOutcome> = tasks
                .iter()
                .zip(&outcomes)
                .filter(|(t, _)| t.depth == d)
                .map(|(_, o)| o)
                .collect();
            let n = picked.len() as f64;
            DepthRow {
                depth: d,
                n_tasks: picked.len(),
                accuracy: picked.iter().filter(|o| o.correct).count() as f64 / n,
                mean_nll: picked.iter().map(|o| o.nll).sum::<f64>() / n,
                mean_attention: picked.iter().map(|o| o.attention).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(PositionSweepReport {
        branch: branch.into(),
        predictor: predictor.name(),
        spec: spec.cloned(),
        observe_layers: observe.to_vec(),
        task_seeds: tasks.iter().map(|t| t.seed).collect(),
        rows,
    })
}
