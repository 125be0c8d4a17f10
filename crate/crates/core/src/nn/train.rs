use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::codec::{CodecParams, DEFAULT_RADIUS};
use crate::controller::{choose_batch_size, collect_layer_stats, CompressionPlan, Controller, ControllerConfig};
use crate::data::Dataset;
use crate::error::{param, Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

use super::layers::{argmax_rows, conv2d_weight_grad, softmax_xent, ConvShape};
use super::network::{ConvStorage, LayerSpec, Network, StoragePolicy};
use super::optim::{sgd_momentum_step, OptimizerState};
use super::store::{ActivationStore, RAW_ELEMENT_BYTES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Baseline,
    /// Controller-driven compression of conv inputs, cheap layers recomputed.
    Comet,
    /// Baseline storage with uniform error injected into stored conv inputs.
    Inject { eb: f64, preserve_zeros: bool },
    /// Like `Comet`, but the first plan is never revised.
    CometStatic,
}

impl TrainMode {
    fn uses_controller(self) -> bool {
        matches!(self, TrainMode::Comet | TrainMode::CometStatic)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Baseline => f.write_str("baseline"),
            TrainMode::Comet => f.write_str("comet"),
            TrainMode::CometStatic => f.write_str("comet-static"),
            TrainMode::Inject { eb, preserve_zeros: true } => write!(f, "inject:{eb}"),
            TrainMode::Inject { eb, preserve_zeros: false } => write!(f, "inject:{eb}:plain"),
        }
    }
}

/// `baseline`, `comet`, `comet-static`, `inject:<eb>` or `inject:<eb>:plain`.
impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => return Ok(TrainMode::Baseline),
            "comet" => return Ok(TrainMode::Comet),
            "comet-static" => return Ok(TrainMode::CometStatic),
            _ => {}
        }
        let bad = || param(format!("unknown mode {s:?}"));
        let rest = s.strip_prefix("inject:").ok_or_else(bad)?;
        let (eb, preserve_zeros) = match rest.strip_suffix(":plain") {
            Some(v) => (v, false),
            None => (rest, true),
        };
        let eb: f64 = eb.parse().map_err(|_| bad())?;
        if !(eb >= 0.0 && eb.is_finite()) {
            return Err(param(format!("inject error bound must be >= 0, got {eb}")));
        }
        Ok(TrainMode::Inject { eb, preserve_zeros })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Zero-preserving filter for compressed activations.
    pub preserve_zeros: bool,
    pub radius: u32,
    /// Measure the weight-gradient error every this many iterations (0 = never).
    pub diag_every: usize,
    /// Re-plan the batch size from the memory budget at each interval.
    pub adaptive_batch: bool,
    /// Input intensity at the end of training relative to the start; values
    /// below 1 fade inputs geometrically over the run.
    pub drift_final_scale: f64,
    pub max_iterations: Option<usize>,
    pub controller: ControllerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            preserve_zeros: true,
            radius: DEFAULT_RADIUS,
            diag_every: 0,
            adaptive_batch: false,
            drift_final_scale: 1.0,
            max_iterations: None,
            controller: ControllerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Applies one config entry; returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| param(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "momentum" => self.momentum = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "preserve_zeros" => self.preserve_zeros = p(key, value)?,
            "radius" => self.radius = p(key, value)?,
            "diag_every" => self.diag_every = p(key, value)?,
            "adaptive_batch" => self.adaptive_batch = p(key, value)?,
            "drift_final_scale" => self.drift_final_scale = p(key, value)?,
            "max_iterations" => self.max_iterations = Some(p(key, value)?),
            _ => return self.controller.apply(key, value),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(param("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(param("need lr > 0 and momentum in [0, 1)"));
        }
        if !(self.drift_final_scale > 0.0 && self.drift_final_scale.is_finite()) {
            return Err(param("drift_final_scale must be positive"));
        }
        self.controller.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Set on the last iteration of each epoch.
    pub eval_accuracy: Option<f64>,
    /// Per conv layer, in network order.
    pub eb: Vec<Option<f64>>,
    pub ratio: Vec<Option<f64>>,
    pub peak_activation_bytes: usize,
    pub batch_size: usize,
    /// Collection interval in effect; `None` without a controller.
    pub w: Option<usize>,
    /// Mean over conv layers of |G_used - G_clean| / |G_clean|.
    pub grad_error_rel: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainingRecord>,
    pub status: RunStatus,
    pub conv_layers: Vec<usize>,
    pub plans: Vec<CompressionPlan>,
    pub overflow_events: u64,
    pub final_eval_accuracy: Option<f64>,
}

impl TrainOutcome {
    /// Largest peak over the given iterations.
    pub fn max_peak_bytes(&self) -> usize {
        self.records.iter().map(|r| r.peak_activation_bytes).max().unwrap_or(0)
    }
}

const EVAL_CHUNK: usize = 256;
const INJECT_SALT: u64 = 0x1a2b_3c4d;

fn scale_tensor(t: Tensor, s: f64) -> Tensor {
    if s == 1.0 {
        t
    } else {
        t.map(|v| v * s)
    }
}

pub fn evaluate(net: &Network, ds: &Dataset, input_scale: f64) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk)?;
        let pred = argmax_rows(&net.predict(&scale_tensor(x, input_scale))?);
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Raw per-sample byte costs of the stored layer inputs and the ratio each
/// is expected to achieve under `ebs`.
fn memory_profile(net: &Network, mode: TrainMode, ebs: &BTreeMap<usize, f64>, last_ratio: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mut costs = Vec::new();
    let mut ratios = Vec::new();
    let mut shape = net.input_dims().to_vec();
    let recompute = mode.uses_controller();
    for (i, spec) in net.layers().iter().enumerate() {
        let elems: usize = shape.iter().product();
        let stored = match spec {
            LayerSpec::SoftmaxXent => false,
            s if s.is_cheap() => !recompute,
            _ => true,
        };
        if stored {
            costs.push((elems * RAW_ELEMENT_BYTES) as f64);
            let r = if ebs.contains_key(&i) { last_ratio[i].unwrap_or(1.0) } else { 1.0 };
            ratios.push(r.max(1.0));
        }
        shape = next_shape(spec, &shape);
    }
    (costs, ratios)
}

fn next_shape(spec: &LayerSpec, s: &[usize]) -> Vec<usize> {
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
        } => {
            let c = ConvShape {
                batch: 1,
                in_channels,
                height: s[1],
                width: s[2],
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            };
            vec![out_channels, c.out_h(), c.out_w()]
        }
        LayerSpec::MaxPool { window, stride } => {
            vec![s[0], (s[1] - window) / stride + 1, (s[2] - window) / stride + 1]
        }
        LayerSpec::FullyConnected { outputs, .. } => vec![outputs],
        _ => s.to_vec(),
    }
}

/// Trains `net` in place. Single-threaded and deterministic for a fixed
/// configuration. A non-finite loss stops the run with
/// [`RunStatus::Diverged`]; other failures are errors.
pub fn train(net: &mut Network, train_set: &Dataset, eval_set: &Dataset, mode: TrainMode, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.sample_dims() != net.input_dims() || eval_set.sample_dims() != net.input_dims() {
        return Err(Error::Dimension("dataset sample shape does not match the network input".into()));
    }
    if train_set.classes() > net.classes() {
        return Err(Error::Data("dataset has more classes than network outputs".into()));
    }
    if cfg.batch_size > train_set.len() {
        return Err(param("batch_size exceeds the training set"));
    }
    if let TrainMode::Inject { eb, .. } = mode {
        if !(eb >= 0.0 && eb.is_finite()) {
            return Err(param("inject error bound must be >= 0"));
        }
    }

    let n_layers = net.layers().len();
    let convs = net.conv_layers();
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, &net.param_tensors());
    let fixed_bytes = (2 * net.param_count() * RAW_ELEMENT_BYTES) as f64;
    let mut controller = if mode.uses_controller() {
        Some(Controller::new(cfg.controller.clone())?)
    } else {
        None
    };
    let mut frozen = false;
    let mut ebs: BTreeMap<usize, f64> = BTreeMap::new();
    let mut last_ratio: Vec<Option<f64>> = vec![None; n_layers];
    let mut next_collect = controller.as_ref().map_or(usize::MAX, |c| c.w());
    let mut batch_size = cfg.batch_size;
    let total_iters = {
        let per_epoch = train_set.len() / cfg.batch_size;
        let t = per_epoch * cfg.epochs;
        cfg.max_iterations.map_or(t, |m| m.min(t)).max(1)
    };
    let drift = |iter: usize| -> f64 {
        if cfg.drift_final_scale == 1.0 {
            1.0
        } else {
            cfg.drift_final_scale.powf(iter as f64 / total_iters as f64)
        }
    };

    let mut records = Vec::new();
    let mut status = RunStatus::Completed;
    let mut iter = 0usize;
    let mut final_eval = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeded(derive_seed(cfg.seed, epoch as u64 + 1)));
        let mut cursor = 0;
        while cursor + batch_size <= order.len() {
            if cfg.max_iterations.is_some_and(|m| iter >= m) {
                break 'epochs;
            }
            let idx = &order[cursor..cursor + batch_size];
            cursor += batch_size;
            let (x, labels) = train_set.batch(idx)?;
            let x = scale_tensor(x, drift(iter));

            let collect = controller.is_some() && !frozen && iter + 1 == next_collect;
            let diag = cfg.diag_every > 0 && (iter + 1) % cfg.diag_every == 0;

            let mut policy = StoragePolicy::baseline(n_layers);
            policy.recompute_cheap = mode.uses_controller();
            let mut layer_eb = vec![None; n_layers];
            for &i in &convs {
                policy.conv[i] = match mode {
                    TrainMode::Baseline => ConvStorage::Raw,
                    TrainMode::Inject { eb, preserve_zeros } => {
                        layer_eb[i] = Some(eb);
                        ConvStorage::Inject {
                            eb,
                            preserve_zeros,
                            seed: derive_seed(derive_seed(cfg.seed ^ INJECT_SALT, iter as u64), i as u64),
                        }
                    }
                    TrainMode::Comet | TrainMode::CometStatic => match ebs.get(&i) {
                        Some(&eb) => {
                            layer_eb[i] = Some(eb);
                            ConvStorage::Compress(
                                CodecParams::new(eb)
                                    .with_radius(cfg.radius)
                                    .with_preserve_zeros(cfg.preserve_zeros),
                            )
                        }
                        None => ConvStorage::Raw,
                    },
                };
            }

            let mut store = ActivationStore::new(n_layers);
            let out = net.forward_train(&x, &policy, &mut store, diag)?;
            let (loss, g) = softmax_xent(&out.logits, &labels)?;
            let pred = argmax_rows(&out.logits);
            let train_accuracy = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
            let peak = store.peak_bytes();
            let w = controller.as_ref().map(|c| c.w());
            let mut record = TrainingRecord {
                iteration: iter,
                epoch,
                loss,
                train_accuracy,
                eval_accuracy: None,
                eb: convs.iter().map(|&i| layer_eb[i]).collect(),
                ratio: convs.iter().map(|&i| out.ratios[i]).collect(),
                peak_activation_bytes: peak,
                batch_size,
                w,
                grad_error_rel: None,
            };
            if !loss.is_finite() {
                records.push(record);
                status = RunStatus::Diverged { iteration: iter };
                break 'epochs;
            }

            let back = net.backward(&mut store, g, collect || diag)?;
            if diag {
                let mut sum = 0.0;
                for &i in &convs {
                    let (Some(clean), Some(cap), Some(used)) =
                        (&out.clean_conv_inputs[i], &back.captures[i], &back.grads[i])
                    else {
                        continue;
                    };
                    let LayerSpec::Conv2d { stride, pad, .. } = net.layers()[i] else { unreachable!() };
                    let g_clean = conv2d_weight_grad(clean, &cap.loss_grad, used.weight.dims(), stride, pad)?;
                    let num: f64 = used
                        .weight
                        .data()
                        .iter()
                        .zip(g_clean.data())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    let den: f64 = g_clean.data().iter().map(|v| v * v).sum();
                    sum += if den > 0.0 { (num / den).sqrt() } else { 0.0 };
                }
                record.grad_error_rel = Some(sum / convs.len().max(1) as f64);
            }

            {
                let grads: Vec<&Tensor> = back
                    .grads
                    .iter()
                    .flatten()
                    .flat_map(|p| [&p.weight, &p.bias])
                    .collect();
                let mut params: Vec<&mut Tensor> = net
                    .params_mut()
                    .iter_mut()
                    .flatten()
                    .flat_map(|p| [&mut p.weight, &mut p.bias])
                    .collect();
                sgd_momentum_step(&mut params, &grads, &mut opt)?;
            }

            for &i in &convs {
                if out.ratios[i].is_some() {
                    last_ratio[i] = out.ratios[i];
                }
            }
            if let Some(ctl) = controller.as_mut() {
                ctl.record_usage(peak as f64 + fixed_bytes);
                if collect {
                    let mut stats = Vec::with_capacity(convs.len());
                    for &i in &convs {
                        let cap = back.captures[i].as_ref().expect("captured on collection");
                        let v = &opt.velocity[net.weight_index(i).expect("conv has weights")];
                        let mut s = collect_layer_stats(i, &cap.activation, &cap.loss_grad, v, batch_size, cfg.controller.l_bar_mode)?;
                        s.last_ratio = last_ratio[i].unwrap_or(1.0);
                        stats.push(s);
                    }
                    ebs = ctl.observe(&stats)?.ebs();
                    if mode == TrainMode::CometStatic {
                        frozen = true;
                    }
                    next_collect = iter + 1 + ctl.w();
                    if cfg.adaptive_batch {
                        let (costs, ratios) = memory_profile(net, mode, &ebs, &last_ratio);
                        let b = choose_batch_size(&costs, &ratios, fixed_bytes, ctl.config(), None)?;
                        batch_size = b.min(train_set.len());
                    }
                }
            }

            records.push(record);
            iter += 1;
        }
        let acc = evaluate(net, eval_set, drift(total_iters))?;
        final_eval = Some(acc);
        if let Some(last) = records.last_mut() {
            last.eval_accuracy = Some(acc);
        }
    }
    if status == RunStatus::Completed && final_eval.is_none() {
        final_eval = Some(evaluate(net, eval_set, drift(total_iters))?);
    }
    if let RunStatus::Diverged { .. } = status {
        final_eval = None;
    }
    let (plans, overflow_events) = controller
        .map(|c| (c.plans().to_vec(), c.overflow_events()))
        .unwrap_or_default();
    Ok(TrainOutcome {
        records,
        status,
        conv_layers: convs,
        plans,
        overflow_events,
        final_eval_accuracy: final_eval,
    })
}

pub fn record_header(conv_layers: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = [
        "iteration",
        "epoch",
        "loss",
        "train_accuracy",
        "eval_accuracy",
        "batch_size",
        "W",
        "peak_activation_bytes",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(conv_layers.iter().map(|i| format!("eb_L{i}")));
    h.extend(conv_layers.iter().map(|i| format!("ratio_L{i}")));
    h.push("grad_error_rel".into());
    h
}

pub fn write_records_csv<W: Write>(records: &[TrainingRecord], conv_layers: &[usize], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(record_header(conv_layers)).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let mut row = vec![
            r.iteration.to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
            r.train_accuracy.to_string(),
            opt(r.eval_accuracy),
            r.batch_size.to_string(),
            r.w.map(|w| w.to_string()).unwrap_or_default(),
            r.peak_activation_bytes.to_string(),
        ];
        row.extend(r.eb.iter().map(|&v| opt(v)));
        row.extend(r.ratio.iter().map(|&v| opt(v)));
        row.push(opt(r.grad_error_rel));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, SyntheticSpec};

    fn tiny() -> (Network, Dataset, Dataset) {
        let ds = synthetic_blobs(&SyntheticSpec {
            classes: 4,
            samples: 160,
            height: 12,
            width: 12,
            seed: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (tr, ev) = ds.split(128).unwrap();
        (Network::desk_cnn(1, 12, 12, 4, 7).unwrap(), tr, ev)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 0.05,
            controller: ControllerConfig {
                w_default: 4,
                w_floor: 1,
                ..ControllerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("comet".parse::<TrainMode>().unwrap(), TrainMode::Comet);
        assert_eq!(
            "inject:0.001:plain".parse::<TrainMode>().unwrap(),
            TrainMode::Inject { eb: 0.001, preserve_zeros: false }
        );
        assert_eq!("inject:0".parse::<TrainMode>().unwrap().to_string(), "inject:0");
        assert!("inject:-1".parse::<TrainMode>().is_err());
        assert!("fast".parse::<TrainMode>().is_err());
    }

    #[test]
    fn inject_zero_matches_baseline_and_runs_repeat() {
        let (net, tr, ev) = tiny();
        let mut a = net.clone();
        let ra = train(&mut a, &tr, &ev, TrainMode::Baseline, &cfg()).unwrap();
        let mut b = net.clone();
        let rb = train(&mut b, &tr, &ev, TrainMode::Inject { eb: 0.0, preserve_zeros: true }, &cfg()).unwrap();
        let la: Vec<f64> = ra.records.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = rb.records.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        let mut c = net.clone();
        let rc = train(&mut c, &tr, &ev, TrainMode::Baseline, &cfg()).unwrap();
        assert_eq!(ra.records, rc.records);
        assert_eq!(ra.records.len(), 16);
        assert!(ra.records[7].eval_accuracy.is_some());
    }

    #[test]
    fn comet_compresses_after_first_interval() {
        let (net, tr, ev) = tiny();
        let mut base = net.clone();
        let rb = train(&mut base, &tr, &ev, TrainMode::Baseline, &cfg()).unwrap();
        let mut m = net.clone();
        let rc = train(&mut m, &tr, &ev, TrainMode::Comet, &cfg()).unwrap();
        assert_eq!(rc.status, RunStatus::Completed);
        assert!(rc.records[..4].iter().all(|r| r.eb.iter().all(Option::is_none)));
        assert!(rc.records[4..].iter().all(|r| r.eb.iter().any(Option::is_some)));
        for (b, c) in rb.records.iter().zip(&rc.records).skip(4) {
            assert!(c.peak_activation_bytes < b.peak_activation_bytes);
        }
        assert!(!rc.plans.is_empty());
        let mut s = net.clone();
        let rs = train(&mut s, &tr, &ev, TrainMode::CometStatic, &cfg()).unwrap();
        assert_eq!(rs.plans.len(), 1);
    }

    #[test]
    fn divergence_is_a_status() {
        let (mut net, tr, ev) = tiny();
        let c = TrainConfig { lr: 1e30, ..cfg() };
        let out = train(&mut net, &tr, &ev, TrainMode::Baseline, &c).unwrap();
        assert!(matches!(out.status, RunStatus::Diverged { .. }));
        assert!(!out.records.last().unwrap().loss.is_finite());
    }

    #[test]
    fn csv_layout() {
        let (mut net, tr, ev) = tiny();
        let c = TrainConfig { max_iterations: Some(3), diag_every: 1, ..cfg() };
        let out = train(&mut net, &tr, &ev, TrainMode::Inject { eb: 1e-2, preserve_zeros: true }, &c).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records.iter().all(|r| r.grad_error_rel.unwrap() > 0.0));
        let mut buf = Vec::new();
        write_records_csv(&out.records, &out.conv_layers, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "iteration,epoch,loss,train_accuracy,eval_accuracy,batch_size,W,peak_activation_bytes,eb_L0,eb_L3,eb_L6,eb_L8,ratio_L0,"
        ));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        assert!(c.apply("lr", "0.5").unwrap());
        assert!(c.apply("W_default", "10").unwrap());
        assert!(!c.apply("nope", "1").unwrap());
        assert!(c.apply("epochs", "x").is_err());
        assert_eq!((c.lr, c.controller.w_default), (0.5, 10));
    }
}
