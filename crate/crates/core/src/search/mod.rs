// SPDX-License-Identifier: MIT OR Apache-2.0

//! Positional channel search.
//!
//! A channel is a candidate when its smoothed, cubic-fitted series is
//! monotone in more than `eps` layers of a hidden-state dump. Candidates
//! are ranked by smoothness, then the one whose scaling gives the lowest
//! calibration loss is kept and its factor picked from a grid.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::TaskInstance;
use crate::numerics::{
    cubic_fit, fit_is_monotone, log_softmax, sliding_mean, smoothness_score, Monotonicity, Series,
};
use crate::probe::HiddenStateDump;
use crate::scaling::{default_layer_range, ScalingSpec, TokenScope};
use crate::toymodel::{ForwardOverrides, LayerRange, Model, ScaledCache, Session};

/// Largest hidden size the exhaustive search accepts without forcing.
pub const EXHAUSTIVE_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    /// A channel needs strictly more than `eps` monotone layers.
    pub eps: usize,
    pub top_k: usize,
    pub window: usize,
    pub skip_prefix: usize,
    /// Factors tried, in order, for the chosen channel.
    pub factor_grid: Vec<f64>,
    /// Factor used to compare candidates.
    pub probe_factor: f64,
    /// Divide smoothness by the number of second differences.
    pub normalize_smoothness: bool,
    /// Layers scaled during calibration; `None` uses the default band.
    pub layers: Option<LayerRange>,
    pub scope: TokenScope,
}

impl SearchParams {
    /// Defaults for short desk-scale dumps (256 positions).
    pub fn desk(n_layers: usize) -> Self {
        SearchParams {
            eps: ((n_layers as f64 / 4.0).round() as usize).max(1),
            top_k: 10,
            window: 16,
            skip_prefix: 30,
            factor_grid: vec![0.5, 0.0, -0.5, -1.0],
            probe_factor: 0.0,
            normalize_smoothness: false,
            layers: None,
            scope: TokenScope::LastToken,
        }
    }

    /// Settings for dumps of 1000 positions.
    pub fn long(n_layers: usize) -> Self {
        SearchParams {
            window: 100,
            ..SearchParams::desk(n_layers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps == 0 || self.top_k == 0 || self.window == 0 {
            return Err(Error::invalid("eps, top_k and window must be >= 1"));
        }
        if self.factor_grid.is_empty() || self.factor_grid.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("factor grid must be non-empty and finite"));
        }
        if !self.probe_factor.is_finite() {
            return Err(Error::invalid("probe factor must be finite"));
        }
        Ok(())
    }

    fn layers_for(&self, n_layers: usize) -> LayerRange {
        self.layers.unwrap_or_else(|| default_layer_range(n_layers))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    /// 1-based.
    pub channel: usize,
    /// Number of monotone layers.
    pub c_t: usize,
    /// One entry per dump layer.
    pub directions: Vec<Monotonicity>,
    /// Mean smoothness over monotone layers; `None` when `c_t == 0`.
    pub g_t: Option<f64>,
}

impl ChannelProfile {
    /// Most common monotone direction; ties and `c_t == 0` give `None`.
    pub fn direction_majority(&self) -> Monotonicity {
        let inc = self
            .directions
            .iter()
            .filter(|d| **d == Monotonicity::Increasing)
            .count();
        let dec = self
            .directions
            .iter()
            .filter(|d| **d == Monotonicity::Decreasing)
            .count();
        match inc.cmp(&dec) {
            std::cmp::Ordering::Greater => Monotonicity::Increasing,
            std::cmp::Ordering::Less => Monotonicity::Decreasing,
            std::cmp::Ordering::Equal => Monotonicity::None,
        }
    }
}

/// Channel values at dump layer index `li`, first `skip_prefix`
/// positions dropped, then smoothed.
pub fn channel_series(
    dump: &HiddenStateDump,
    li: usize,
    channel: usize,
    params: &SearchParams,
) -> Result<Series> {
    let n = dump.seq_len();
    if n < params.skip_prefix + params.window + 4 {
        return Err(Error::invalid(format!(
            "dump of {n} positions too short for skip {} and window {}",
            params.skip_prefix, params.window
        )));
    }
    let raw = dump.channel(li, channel)?;
    let tail = Series::new(raw.values()[params.skip_prefix..].to_vec())?;
    sliding_mean(&tail, params.window)
}

fn smoothness(series: &Series, normalize: bool) -> Result<f64> {
    let s = smoothness_score(series)?;
    Ok(if normalize {
        s / (series.len() - 2) as f64
    } else {
        s
    })
}

pub fn profile_channel(
    dump: &HiddenStateDump,
    channel: usize,
    params: &SearchParams,
) -> Result<ChannelProfile> {
    let mut directions = Vec::with_capacity(dump.n_layers());
    let mut total = 0.0;
    for li in 0..dump.n_layers() {
        let series = channel_series(dump, li, channel, params)?;
        let dir = fit_is_monotone(&cubic_fit(&series)?);
        if dir.is_monotone() {
            total += smoothness(&series, params.normalize_smoothness)?;
        }
        directions.push(dir);
    }
    let c_t = directions.iter().filter(|d| d.is_monotone()).count();
    Ok(ChannelProfile {
        channel,
        c_t,
        directions,
        g_t: (c_t > 0).then(|| total / c_t as f64),
    })
}

fn all_profiles(dump: &HiddenStateDump, params: &SearchParams) -> Result<Vec<ChannelProfile>> {
    (1..=dump.hidden_size())
        .into_par_iter()
        .map(|t| profile_channel(dump, t, params))
        .collect()
}

/// Channels with `c_t > eps`, smoothest first (lower channel on ties),
/// at most `top_k` of them.
pub fn candidate_channels(
    dump: &HiddenStateDump,
    params: &SearchParams,
) -> Result<Vec<ChannelProfile>> {
    params.validate()?;
    Ok(rank_candidates(all_profiles(dump, params)?, params))
}

fn rank_candidates(profiles: Vec<ChannelProfile>, params: &SearchParams) -> Vec<ChannelProfile> {
    let mut c: Vec<ChannelProfile> = profiles
        .into_iter()
        .filter(|p| p.c_t > params.eps)
        .collect();
    c.sort_by(|a, b| {
        let (ga, gb) = (
            a.g_t.unwrap_or(f64::INFINITY),
            b.g_t.unwrap_or(f64::INFINITY),
        );
        ga.total_cmp(&gb).then(a.channel.cmp(&b.channel))
    });
    c.truncate(params.top_k);
    c
}

/// Retrieval tasks whose answers score a scaled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub tasks: Vec<TaskInstance>,
}

impl CalibrationSet {
    pub fn new(tasks: Vec<TaskInstance>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("calibration set is empty"));
        }
        Ok(CalibrationSet { tasks })
    }

    /// Distinct gold depths, ascending.
    pub fn depths(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.tasks.iter().map(|t| t.depth).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d
    }
}

/// Summed answer-token NLL of one task, each answer token predicted with
/// the preceding row as the final row.
fn task_nll(session: &Session<'_>, answer: &[u32], cache: Option<&mut ScaledCache>) -> Result<f64> {
    let start = session.len() - answer.len();
    let mut cache = cache;
    let mut total = 0.0;
    for (k, &y) in answer.iter().enumerate() {
        let logits = session.logits_as_last(start - 1 + k, cache.as_deref_mut())?;
        total -= log_softmax(&logits)[y as usize];
    }
    Ok(total)
}

/// Loss of each spec (and of the unscaled model for `None`), sharing one
/// prompt pass per task.
///
/// The loss is the mean over gold depths of the mean over that depth's
/// tasks of the summed answer-token NLL.
pub fn calibration_losses(
    model: &Model,
    specs: &[Option<ScalingSpec>],
    set: &CalibrationSet,
) -> Result<Vec<f64>> {
    for s in specs.iter().flatten() {
        s.validate(model.config())?;
    }
    let per_task: Vec<Vec<f64>> = set
        .tasks
        .par_iter()
        .map(|task| -> Result<Vec<f64>> {
            let answer = task.answer_tokens();
            let mut session = Session::new(model, ForwardOverrides::none())?;
            session.extend(&task.tokens)?;
            session.extend(&answer)?;
            specs
                .iter()
                .map(|spec| match spec {
                    None => task_nll(&session, &answer, None),
                    Some(s) => {
                        let mut cache = ScaledCache::new(model, s.clone())?;
                        task_nll(&session, &answer, Some(&mut cache))
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let depths = set.depths();
    let mut out = vec![0.0; specs.len()];
    for &d in &depths {
        let rows: Vec<&Vec<f64>> = set
            .tasks
            .iter()
            .zip(&per_task)
            .filter(|(t, _)| t.depth == d)
            .map(|(_, r)| r)
            .collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o += rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= depths.len() as f64);
    Ok(out)
}

pub fn calibration_loss(
    model: &Model,
    spec: Option<&ScalingSpec>,
    set: &CalibrationSet,
) -> Result<f64> {
    Ok(calibration_losses(model, &[spec.cloned()], set)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Channels whose loss was evaluated, in ranking order.
    pub candidates: Vec<ChannelProfile>,
    /// Loss of each candidate at the probe factor.
    pub candidate_losses: Vec<f64>,
    /// Chosen channel (1-based).
    pub channel: usize,
    pub factor: f64,
    /// `(factor, loss)` for the chosen channel, in grid order.
    pub factor_losses: Vec<(f64, f64)>,
    pub baseline_loss: f64,
    pub probe_factor: f64,
    pub layers: LayerRange,
    pub scope: TokenScope,
}

impl SearchResult {
    pub fn spec(&self) -> ScalingSpec {
        ScalingSpec::new(vec![self.channel], self.factor, self.layers).with_scope(self.scope)
    }

    /// Writes `channel,c_t,direction_majority,g_t,loss`, one row per candidate.
    pub fn write_ranking_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Format {
            what: "csv",
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["channel", "c_t", "direction_majority", "g_t", "loss"])
            .map_err(err)?;
        for (p, loss) in self.candidates.iter().zip(&self.candidate_losses) {
            w.write_record([
                p.channel.to_string(),
                p.c_t.to_string(),
                p.direction_majority().as_str().to_string(),
                p.g_t.map(|g| g.to_string()).unwrap_or_default(),
                loss.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Index of the first minimum.
fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn select(
    model: &Model,
    set: &CalibrationSet,
    params: &SearchParams,
    candidates: Vec<ChannelProfile>,
) -> Result<SearchResult> {
    let layers = params.layers_for(model.config().n_layers);
    let spec_for =
        |t: usize, s: f64| Some(ScalingSpec::new(vec![t], s, layers).with_scope(params.scope));
    let mut specs: Vec<Option<ScalingSpec>> = vec![None];
    specs.extend(
        candidates
            .iter()
            .map(|p| spec_for(p.channel, params.probe_factor)),
    );
    let losses = calibration_losses(model, &specs, set)?;
    let baseline_loss = losses[0];
    let candidate_losses = losses[1..].to_vec();
    let best = argmin(&candidate_losses);
    let channel = candidates[best].channel;
    log::info!(
        "channel {channel} selected with loss {}",
        candidate_losses[best]
    );

    let grid: Vec<Option<ScalingSpec>> = params
        .factor_grid
        .iter()
        .map(|&s| spec_for(channel, s))
        .collect();
    let grid_losses = calibration_losses(model, &grid, set)?;
    let factor = params.factor_grid[argmin(&grid_losses)];
    Ok(SearchResult {
        candidates,
        candidate_losses,
        channel,
        factor,
        factor_losses: params
            .factor_grid
            .iter()
            .copied()
            .zip(grid_losses)
            .collect(),
        baseline_loss,
        probe_factor: params.probe_factor,
        layers,
        scope: params.scope,
    })
}

fn check_inputs(model: &Model, dump: &HiddenStateDump, params: &SearchParams) -> Result<()> {
    params.validate()?;
    if dump.hidden_size() != model.config().d_model {
        return Err(Error::invalid(format!(
            "dump width {} differs from model width {}",
            dump.hidden_size(),
            model.config().d_model
        )));
    }
    Ok(())
}

/// Heuristic search: rank by monotonicity and smoothness, then compare
/// candidate losses at the probe factor and grid-search the factor.
pub fn search_positional_channel(
    model: &Model,
    dump: &HiddenStateDump,
    set: &CalibrationSet,
    params: &SearchParams,
) -> Result<SearchResult> {
    check_inputs(model, dump, params)?;
    let candidates = candidate_channels(dump, params)?;
    if candidates.is_empty() {
        return Err(Error::NoPositionalChannel);
    }
    select(model, set, params, candidates)
}

/// Evaluates every channel's loss. Refuses hidden sizes above
/// [`EXHAUSTIVE_LIMIT`] unless `force` is set.
pub fn exhaustive_search(
    model: &Model,
    dump: &HiddenStateDump,
    set: &CalibrationSet,
    params: &SearchParams,
    force: bool,
) -> Result<SearchResult> {
    if dump.hidden_size() > EXHAUSTIVE_LIMIT && !force {
        return Err(Error::invalid(format!(
            "exhaustive search over {} channels refused (limit {EXHAUSTIVE_LIMIT}); force to override",
            dump.hidden_size()
        )));
    }
    check_inputs(model, dump, params)?;
    let profiles = all_profiles(dump, params)?;
    select(model, set, params, profiles)
}
