//! Monte Carlo probe of a single conv layer under injected activation error.
//!
//! Each instance draws a sparse activation, conv weights, and a small
//! classifier head (relu, optional 2x2 maxpool, fc, softmax loss with random
//! labels) that supplies a realistic loss gradient at the conv output. The
//! weight-gradient error is computed by linearity as the weight gradient of
//! the activation error itself, repeated over independent error draws.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::nn::layers::{
    conv2d_forward, conv2d_weight_grad, fc_backward, fc_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax_xent,
};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{compute_stats, make_tensor, FillSpec, Tensor};

use super::{inject_uniform_error, l_bar, DistributionDiagnostics, LBarMode};

const HEAD_CLASSES: usize = 10;
const MAX_RESAMPLES: usize = 1000;

/// Conv layer geometry written `CxHxW,kKxK,sS,oO` (no padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl LayerShape {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kernel_w) / self.stride + 1
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![self.out_channels, self.channels, self.kernel_h, self.kernel_w]
    }
}

impl fmt::Display for LayerShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{},k{}x{},s{},o{}",
            self.channels, self.height, self.width, self.kernel_h, self.kernel_w, self.stride, self.out_channels
        )
    }
}

fn parse_dims(s: &str, expect: usize) -> Option<Vec<usize>> {
    let v: Vec<usize> = s.split('x').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    (v.len() == expect).then_some(v)
}

impl FromStr for LayerShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || param(format!("layer shape {s:?} does not match CxHxW,kKxK,sS,oO"));
        let parts: Vec<&str> = s.trim().split(',').collect();
        let [input, kernel, stride, out] = parts[..] else { return Err(bad()) };
        let d = parse_dims(input, 3).ok_or_else(bad)?;
        let k = parse_dims(kernel.strip_prefix('k').ok_or_else(bad)?, 2).ok_or_else(bad)?;
        let stride: usize = stride.strip_prefix('s').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let out: usize = out.strip_prefix('o').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let shape = LayerShape {
            channels: d[0],
            height: d[1],
            width: d[2],
            kernel_h: k[0],
            kernel_w: k[1],
            stride,
            out_channels: out,
        };
        if d.contains(&0) || k.contains(&0) || stride == 0 || out == 0 {
            return Err(param(format!("layer shape {s:?} has a zero extent")));
        }
        if k[0] > d[1] || k[1] > d[2] {
            return Err(param(format!("kernel larger than input in {s:?}")));
        }
        Ok(shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    PreserveZeros,
    Plain,
}

impl Arm {
    pub fn preserve_zeros(self) -> bool {
        self == Arm::PreserveZeros
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::PreserveZeros => "preserve",
            Arm::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub shape: LayerShape,
    pub batch: usize,
    pub eb: f64,
    /// Target fraction of nonzero activations.
    pub nonzero_ratio: f64,
    pub arm: Arm,
    /// Independent error draws per instance.
    pub draws: usize,
    pub l_bar_mode: LBarMode,
}

impl ProbeConfig {
    pub fn new(shape: LayerShape, batch: usize, eb: f64) -> Self {
        ProbeConfig {
            shape,
            batch,
            eb,
            nonzero_ratio: 0.5,
            arm: Arm::PreserveZeros,
            draws: 32,
            l_bar_mode: LBarMode::MeanOfSampleMax,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.draws == 0 {
            return Err(param("batch and draws must be positive"));
        }
        if !(self.eb > 0.0 && self.eb.is_finite()) {
            return Err(param(format!("error bound must be positive, got {}", self.eb)));
        }
        if !(self.nonzero_ratio > 0.0 && self.nonzero_ratio <= 1.0) {
            return Err(param(format!("nonzero ratio {} outside (0, 1]", self.nonzero_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub l_bar: f64,
    /// Measured nonzero fraction of the activation.
    pub nonzero_ratio: f64,
    /// Fraction of activations receiving error: `nonzero_ratio` when zeros are
    /// preserved, 1 otherwise.
    pub effective_ratio: f64,
    /// RMS of the weight-gradient error over all elements and draws.
    pub sigma_emp: f64,
    /// `sigma_emp / (L_bar * sqrt(N * R_eff) * eb)`.
    pub coefficient: f64,
    /// Diagnostics of the error standardized per weight element across draws.
    pub diagnostics: DistributionDiagnostics,
    pub resampled: usize,
}

struct Instance {
    activation: Tensor,
    loss_grad: Tensor,
}

fn uniform(dims: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    let limit = (6.0 / fan_in as f64).sqrt();
    make_tensor(dims, FillSpec::Uniform { lo: -limit, hi: limit, seed })
}

/// Loss gradient at the conv output, from a relu / maxpool / fc / softmax head.
fn head_loss_grad(conv_out: &Tensor, seed: u64) -> Result<Tensor> {
    let n = conv_out.dims()[0];
    let (h, w) = (conv_out.dims()[2], conv_out.dims()[3]);
    let relu = relu_forward(conv_out);
    let pool = (h >= 2 && w >= 2).then(|| maxpool_forward(&relu, 2, 2)).transpose()?;
    let features = pool.as_ref().map_or(&relu, |(t, _)| t);
    let f = features.sample_len();
    let fc_w = uniform(&[HEAD_CLASSES, f], f, derive_seed(seed, 0))?;
    let fc_b = Tensor::zeros(vec![HEAD_CLASSES])?;
    let logits = fc_forward(features, &fc_w, &fc_b)?;
    let mut rng = seeded(derive_seed(seed, 1));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..HEAD_CLASSES)).collect();
    let (_, g) = softmax_xent(&logits, &labels)?;
    let g = fc_backward(features, &g, &fc_w)?.input;
    let g = match &pool {
        Some((_, argmax)) => maxpool_backward(&g, argmax, relu.dims())?,
        None => g,
    };
    relu_backward(conv_out, &g)
}

fn draw_instance(cfg: &ProbeConfig, seed: u64) -> Result<Instance> {
    let s = cfg.shape;
    let dims = [cfg.batch, s.channels, s.height, s.width];
    let activation = make_tensor(
        &dims,
        FillSpec::ReluSparse {
            sparsity: 1.0 - cfg.nonzero_ratio,
            seed: derive_seed(seed, 0),
        },
    )?;
    let weights = uniform(&s.weight_dims(), s.channels * s.kernel_h * s.kernel_w, derive_seed(seed, 1))?;
    let bias = Tensor::zeros(vec![s.out_channels])?;
    let out = conv2d_forward(&activation, &weights, &bias, s.stride, 0)?;
    let loss_grad = head_loss_grad(&out, derive_seed(seed, 2))?;
    Ok(Instance { activation, loss_grad })
}

pub fn run_probe(cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    let mut resampled = 0;
    let (inst, lb) = loop {
        let inst = draw_instance(cfg, derive_seed(seed, resampled as u64))?;
        let lb = l_bar(&inst.loss_grad, cfg.l_bar_mode)?;
        let live = compute_stats(&inst.activation, None)?.nonzero_ratio > 0.0;
        if lb > 0.0 && live {
            break (inst, lb);
        }
        resampled += 1;
        if resampled >= MAX_RESAMPLES {
            return Err(param("probe keeps producing an all-zero loss gradient"));
        }
    };
    let s = cfg.shape;
    let wdims = s.weight_dims();
    let elems: usize = wdims.iter().product();
    let error_seed = derive_seed(seed, u64::MAX);
    let mut errors = Vec::with_capacity(cfg.draws * elems);
    for d in 0..cfg.draws {
        let noisy = inject_uniform_error(
            &inst.activation,
            cfg.eb,
            cfg.arm.preserve_zeros(),
            derive_seed(error_seed, d as u64),
        )?;
        let diff: Vec<f64> = noisy
            .data()
            .iter()
            .zip(inst.activation.data())
            .map(|(a, b)| a - b)
            .collect();
        let e = Tensor::new(inst.activation.dims().to_vec(), diff)?;
        errors.extend_from_slice(conv2d_weight_grad(&e, &inst.loss_grad, &wdims, s.stride, 0)?.data());
    }
    let sigma_emp = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();

    let mut standardized = Vec::with_capacity(errors.len());
    for k in 0..elems {
        let ms = (0..cfg.draws).map(|d| errors[d * elems + k].powi(2)).sum::<f64>() / cfg.draws as f64;
        if ms > 0.0 {
            let sd = ms.sqrt();
            standardized.extend((0..cfg.draws).map(|d| errors[d * elems + k] / sd));
        }
    }
    let nonzero_ratio = compute_stats(&inst.activation, None)?.nonzero_ratio;
    let effective_ratio = if cfg.arm.preserve_zeros() { nonzero_ratio } else { 1.0 };
    let scale = lb * (cfg.batch as f64 * effective_ratio).sqrt() * cfg.eb;
    Ok(ProbeResult {
        l_bar: lb,
        nonzero_ratio,
        effective_ratio,
        sigma_emp,
        coefficient: sigma_emp / scale,
        diagnostics: DistributionDiagnostics::from_errors(&standardized),
        resampled,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub a_hat: f64,
    /// 95% normal-approximation half-width of the mean.
    pub half_width: f64,
    pub trials: usize,
    /// Instances redrawn because their loss gradient was all zero.
    pub resampled: usize,
    pub coefficients: Vec<f64>,
}

pub const MIN_CALIBRATION_TRIALS: usize = 30;

/// Mean per-trial coefficient over independent probe instances. Trials run
/// in parallel; trial `i` uses `derive_seed(seed, i)`.
pub fn calibrate_a(cfg: &ProbeConfig, trials: usize, seed: u64) -> Result<Calibration> {
    if trials < MIN_CALIBRATION_TRIALS {
        return Err(param(format!(
            "calibration needs at least {MIN_CALIBRATION_TRIALS} trials, got {trials}"
        )));
    }
    let results: Vec<ProbeResult> = (0..trials)
        .into_par_iter()
        .map(|i| run_probe(cfg, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let coefficients: Vec<f64> = results.iter().map(|r| r.coefficient).collect();
    let n = trials as f64;
    let mean = coefficients.iter().sum::<f64>() / n;
    let var = coefficients.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Calibration {
        a_hat: mean,
        half_width: 1.96 * (var / n).sqrt(),
        trials,
        resampled: results.iter().map(|r| r.resampled).sum(),
        coefficients,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub trial: usize,
    pub layer_shape: LayerShape,
    pub n: usize,
    pub r: f64,
    pub l_bar: f64,
    pub eb: f64,
    pub sigma_pred: f64,
    pub sigma_emp: f64,
    pub frac_1sigma: f64,
    pub arm: Arm,
}

pub const EXPERIMENT_HEADER: [&str; 10] = [
    "trial",
    "layer_shape",
    "N",
    "R",
    "L_bar",
    "eb",
    "sigma_pred",
    "sigma_emp",
    "frac_1sigma",
    "arm",
];

/// Runs both arms on the same instances. `sigma_pred` uses `a` with the
/// arm's effective nonzero ratio.
pub fn experiment_error_prop(cfg: &ProbeConfig, trials: usize, seed: u64, a: f64) -> Result<Vec<ExperimentRow>> {
    if trials == 0 {
        return Err(param("at least one trial is required"));
    }
    let per_trial: Vec<Vec<ExperimentRow>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            [Arm::PreserveZeros, Arm::Plain]
                .into_iter()
                .map(|arm| {
                    let c = ProbeConfig { arm, ..*cfg };
                    let r = run_probe(&c, derive_seed(seed, t as u64))?;
                    Ok(ExperimentRow {
                        trial: t,
                        layer_shape: cfg.shape,
                        n: cfg.batch,
                        r: r.nonzero_ratio,
                        l_bar: r.l_bar,
                        eb: cfg.eb,
                        sigma_pred: super::predict_sigma(a, r.l_bar, cfg.batch, r.effective_ratio, cfg.eb)?,
                        sigma_emp: r.sigma_emp,
                        frac_1sigma: r.diagnostics.fraction_within_1sigma,
                        arm,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

pub fn write_experiment_csv<W: Write>(rows: &[ExperimentRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(EXPERIMENT_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.trial.to_string(),
            r.layer_shape.to_string(),
            r.n.to_string(),
            r.r.to_string(),
            r.l_bar.to_string(),
            r.eb.to_string(),
            r.sigma_pred.to_string(),
            r.sigma_emp.to_string(),
            r.frac_1sigma.to_string(),
            r.arm.name().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
