//! Adaptive error-bound control.
//!
//! Every `W` iterations the training loop collects per-layer statistics and
//! asks the [`Controller`] for a new [`CompressionPlan`]. The gradient-error
//! tolerance is `c * M_avg` (mean |momentum|) and each layer's bound follows
//! from inverting the gradient-error model. `W` halves when some layer's bound
//! moves by more than 2x and returns to its default once the bounds settle.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{dim, param, Error, Result};
use crate::errprop::{estimate_eb, l_bar, EbEstimate, LBarMode, SkipReason};
use crate::tensor::{compute_stats, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub w_default: usize,
    pub w_floor: usize,
    pub sigma_fraction: f64,
    pub a: f64,
    /// `None` means unbounded.
    pub memory_budget_bytes: Option<u64>,
    pub reserve_fraction: f64,
    pub max_batch: usize,
    pub settle_threshold: f64,
    pub settle_intervals: usize,
    pub l_bar_mode: LBarMode,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            w_default: 1000,
            w_floor: 125,
            sigma_fraction: 0.01,
            a: 0.32,
            memory_budget_bytes: None,
            reserve_fraction: 0.05,
            max_batch: 1 << 16,
            settle_threshold: 1.25,
            settle_intervals: 2,
            l_bar_mode: LBarMode::MeanOfSampleMax,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| param(format!("invalid value {value:?} for {key}")))
}

/// Splits `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| param(format!("line {}: expected key=value, got {raw:?}", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ControllerConfig {
    /// Applies one config entry; returns `false` for keys this type does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "W_default" => self.w_default = parse_value(key, value)?,
            "W_floor" => self.w_floor = parse_value(key, value)?,
            "sigma_fraction" => self.sigma_fraction = parse_value(key, value)?,
            "a" => self.a = parse_value(key, value)?,
            "memory_budget_bytes" => {
                self.memory_budget_bytes = match value {
                    "" | "none" | "unbounded" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "reserve_fraction" => self.reserve_fraction = parse_value(key, value)?,
            "max_batch" => self.max_batch = parse_value(key, value)?,
            "settle_threshold" => self.settle_threshold = parse_value(key, value)?,
            "settle_intervals" => self.settle_intervals = parse_value(key, value)?,
            "l_bar_mode" => {
                self.l_bar_mode = match value {
                    "max" => LBarMode::MeanOfSampleMax,
                    "mean" => LBarMode::MeanAbs,
                    other => return Err(param(format!("l_bar_mode must be max or mean, got {other:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ControllerConfig::default();
        for (k, v) in parse_key_values(text)? {
            if !cfg.apply(&k, &v)? {
                return Err(param(format!("unknown controller key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_fraction > 0.0 && self.sigma_fraction < 1.0) {
            return Err(param(format!("sigma_fraction {} outside (0, 1)", self.sigma_fraction)));
        }
        if !(self.reserve_fraction > 0.0 && self.reserve_fraction < 1.0) {
            return Err(param(format!("reserve_fraction {} outside (0, 1)", self.reserve_fraction)));
        }
        if self.w_floor == 0 || self.w_floor > self.w_default {
            return Err(param(format!(
                "need 1 <= W_floor <= W_default, got {} and {}",
                self.w_floor, self.w_default
            )));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(param("coefficient a must be positive"));
        }
        if self.max_batch == 0 {
            return Err(param("max_batch must be positive"));
        }
        if !(self.settle_threshold >= 1.0) || self.settle_intervals == 0 {
            return Err(param("settle_threshold must be >= 1 and settle_intervals >= 1"));
        }
        Ok(())
    }

    /// Budget after the reserve, in bytes.
    pub fn usable_bytes(&self) -> Option<f64> {
        self.memory_budget_bytes
            .map(|b| b as f64 * (1.0 - self.reserve_fraction))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrainingStats {
    pub layer_id: usize,
    pub r: f64,
    pub l_bar: f64,
    pub m_avg: f64,
    pub n: usize,
    /// Previous interval's bound, 0 when none.
    pub last_eb: f64,
    /// Previous interval's compression ratio, 1 when uncompressed.
    pub last_ratio: f64,
}

/// Statistics from the activation as stored (after any decompression), the
/// loss gradient at the layer output, and the weight momentum.
pub fn collect_layer_stats(
    layer_id: usize,
    activation: &Tensor,
    loss_grad: &Tensor,
    momentum: &Tensor,
    n: usize,
    mode: LBarMode,
) -> Result<LayerTrainingStats> {
    if n == 0 {
        return Err(param("batch size must be at least 1"));
    }
    if activation.dims()[0] != n || loss_grad.dims()[0] != n {
        return Err(dim(format!(
            "activation {:?} and loss gradient {:?} must both have batch {n}",
            activation.dims(),
            loss_grad.dims()
        )));
    }
    let act = compute_stats(activation, None)?;
    let mom = compute_stats(momentum, None)?;
    Ok(LayerTrainingStats {
        layer_id,
        r: act.nonzero_ratio,
        l_bar: l_bar(loss_grad, mode)?,
        m_avg: mom.mean_abs,
        n,
        last_eb: 0.0,
        last_ratio: 1.0,
    })
}

/// `sigma_target = c * M_avg`, or `None` when the momentum is zero.
pub fn assess_gradient_tolerance(stats: &LayerTrainingStats, c: f64) -> Result<Option<f64>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(param(format!("sigma fraction must be positive, got {c}")));
    }
    Ok((stats.m_avg > 0.0).then(|| c * stats.m_avg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub layer_id: usize,
    pub r: f64,
    pub l_bar: f64,
    pub m_avg: f64,
    pub sigma_target: Option<f64>,
    pub eb: Option<f64>,
    pub skip: Option<SkipReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    pub interval: usize,
    /// Interval length in effect after this plan.
    pub w: usize,
    pub entries: Vec<PlanEntry>,
}

impl CompressionPlan {
    pub fn eb(&self, layer_id: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.layer_id == layer_id)?.eb
    }

    pub fn ebs(&self) -> BTreeMap<usize, f64> {
        self.entries
            .iter()
            .filter_map(|e| e.eb.map(|eb| (e.layer_id, eb)))
            .collect()
    }

    pub fn skip_set(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.skip.is_some())
            .map(|e| e.layer_id)
            .collect()
    }
}

pub fn plan_compression(stats: &[LayerTrainingStats], config: &ControllerConfig, interval: usize, w: usize) -> Result<CompressionPlan> {
    let mut entries = Vec::with_capacity(stats.len());
    for s in stats {
        let sigma_target = assess_gradient_tolerance(s, config.sigma_fraction)?;
        let (eb, skip) = match sigma_target {
            None => (None, Some(SkipReason::ZeroMomentum)),
            Some(sigma) => match estimate_eb(sigma, config.a, s.l_bar, s.n, s.r)? {
                EbEstimate::Bound(eb) => (Some(eb), None),
                EbEstimate::Skip(reason) => (None, Some(reason)),
            },
        };
        entries.push(PlanEntry {
            layer_id: s.layer_id,
            r: s.r,
            l_bar: s.l_bar,
            m_avg: s.m_avg,
            sigma_target,
            eb,
            skip,
        });
    }
    Ok(CompressionPlan { interval, w, entries })
}

/// Largest `max(new/old, old/new)` over layers bounded in both plans.
pub fn max_change_ratio(prev: &CompressionPlan, new: &CompressionPlan) -> Option<f64> {
    let old = prev.ebs();
    new.ebs()
        .into_iter()
        .filter_map(|(id, eb)| old.get(&id).map(|&o| (eb / o).max(o / eb)))
        .reduce(f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalState {
    pub w: usize,
    /// Consecutive comparisons at or below the settle threshold.
    pub settled_streak: usize,
}

/// Adapts `W` after a new plan and returns the new value.
pub fn update_interval(
    prev: Option<&CompressionPlan>,
    new: &CompressionPlan,
    state: &mut IntervalState,
    config: &ControllerConfig,
) -> usize {
    let Some(r) = prev.and_then(|p| max_change_ratio(p, new)) else {
        return state.w;
    };
    if r > 2.0 {
        state.w = (state.w / 2).max(config.w_floor);
        state.settled_streak = 0;
    } else if r <= config.settle_threshold {
        state.settled_streak += 1;
        if state.settled_streak >= config.settle_intervals {
            state.w = config.w_default;
            state.settled_streak = 0;
        }
    } else {
        state.settled_streak = 0;
    }
    state.w
}

/// Projected bytes for batch `b`: `b * sum(cost / ratio) + fixed`.
pub fn projected_bytes(b: usize, per_sample_bytes: &[f64], ratios: &[f64], fixed_bytes: f64) -> f64 {
    let per: f64 = per_sample_bytes
        .iter()
        .zip(ratios)
        .map(|(c, r)| c / r)
        .sum();
    b as f64 * per + fixed_bytes
}

/// Largest power-of-two batch within the usable budget and `max_batch`.
/// `first_interval` short-circuits to the original batch size.
pub fn choose_batch_size(
    per_sample_bytes: &[f64],
    ratios: &[f64],
    fixed_bytes: f64,
    config: &ControllerConfig,
    first_interval: Option<usize>,
) -> Result<usize> {
    if let Some(b) = first_interval {
        return Ok(b);
    }
    if per_sample_bytes.len() != ratios.len() {
        return Err(dim("one ratio per layer cost is required"));
    }
    if per_sample_bytes.iter().any(|&c| !(c > 0.0)) || ratios.iter().any(|&r| !(r >= 1.0)) {
        return Err(param("layer costs must be positive and ratios at least 1"));
    }
    let mut b = 1usize;
    while b * 2 <= config.max_batch {
        b *= 2;
    }
    let Some(usable) = config.usable_bytes() else { return Ok(b) };
    loop {
        if projected_bytes(b, per_sample_bytes, ratios, fixed_bytes) <= usable {
            return Ok(b);
        }
        if b == 1 {
            return Err(Error::MemoryInfeasible(format!(
                "batch 1 needs {:.0} bytes, {usable:.0} usable",
                projected_bytes(1, per_sample_bytes, ratios, fixed_bytes)
            )));
        }
        b /= 2;
    }
}

/// Single-owner controller state across intervals.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    state: IntervalState,
    plans: Vec<CompressionPlan>,
    overflow_events: u64,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Controller {
            state: IntervalState {
                w: config.w_default,
                settled_streak: 0,
            },
            config,
            plans: Vec::new(),
            overflow_events: 0,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn w(&self) -> usize {
        self.state.w
    }

    /// Plans from this interval's stats and adapts `W`.
    pub fn observe(&mut self, stats: &[LayerTrainingStats]) -> Result<&CompressionPlan> {
        let mut stats = stats.to_vec();
        if let Some(prev) = self.plans.last() {
            for s in &mut stats {
                s.last_eb = prev.eb(s.layer_id).unwrap_or(0.0);
            }
        }
        let mut plan = plan_compression(&stats, &self.config, self.plans.len(), self.state.w)?;
        plan.w = update_interval(self.plans.last(), &plan, &mut self.state, &self.config);
        self.plans.push(plan);
        Ok(self.plans.last().expect("just pushed"))
    }

    pub fn current_plan(&self) -> Option<&CompressionPlan> {
        self.plans.last()
    }

    pub fn plans(&self) -> &[CompressionPlan] {
        &self.plans
    }

    /// Counts usage above the post-reserve budget; returns whether it overflowed.
    pub fn record_usage(&mut self, bytes: f64) -> bool {
        let over = self.config.usable_bytes().is_some_and(|u| bytes > u);
        if over {
            self.overflow_events += 1;
        }
        over
    }

    pub fn overflow_events(&self) -> u64 {
        self.overflow_events
    }
}

pub const PLAN_HEADER: [&str; 9] = [
    "interval",
    "layer_id",
    "R",
    "L_bar",
    "M_avg",
    "sigma_target",
    "eb",
    "skip_flag",
    "W",
];

pub fn write_plan_csv<W: Write>(plans: &[CompressionPlan], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(PLAN_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in plans {
        for e in &p.entries {
            w.write_record([
                p.interval.to_string(),
                e.layer_id.to_string(),
                e.r.to_string(),
                e.l_bar.to_string(),
                e.m_avg.to_string(),
                opt(e.sigma_target),
                opt(e.eb),
                u8::from(e.skip.is_some()).to_string(),
                p.w.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
