//! Gradient-error model for lossy activations.
//!
//! A uniform error `e ~ U[-eb, eb]` on the activations of a conv layer
//! produces a weight-gradient error whose standard deviation is modelled as
//! `sigma = a * L_bar * sqrt(N * R) * eb`, where `L_bar` is the batch mean of
//! per-sample maxima of |loss gradient|, `N` the batch size and `R` the
//! fraction of nonzero activations. [`estimate_eb`] inverts the model.

mod probe;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{dim, param, Result};
use crate::rng::seeded;
use crate::tensor::{compute_stats, Tensor};

pub use probe::{
    calibrate_a, experiment_error_prop, run_probe, write_experiment_csv, Arm, Calibration, ExperimentRow, LayerShape,
    ProbeConfig, ProbeResult, EXPERIMENT_HEADER,
};

/// Adds i.i.d. `U[-eb, eb]` noise to every element; with `preserve_zeros`
/// exact zeros are left untouched.
pub fn inject_uniform_error(t: &Tensor, eb: f64, preserve_zeros: bool, seed: u64) -> Result<Tensor> {
    if !(eb > 0.0 && eb.is_finite()) {
        return Err(param(format!("error bound must be positive and finite, got {eb}")));
    }
    let mut rng = seeded(seed);
    let mut out = t.clone();
    for v in out.data_mut() {
        if preserve_zeros && *v == 0.0 {
            continue;
        }
        *v += rng.random_range(-eb..=eb);
    }
    Ok(out)
}

fn check_model_inputs(a: f64, l_bar: f64, n: usize, r: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(param(format!("coefficient a must be positive, got {a}")));
    }
    if !(l_bar >= 0.0 && l_bar.is_finite()) {
        return Err(param(format!("L_bar must be non-negative, got {l_bar}")));
    }
    if n == 0 {
        return Err(param("batch size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(param(format!("nonzero ratio {r} outside [0, 1]")));
    }
    Ok(())
}

pub fn predict_sigma(a: f64, l_bar: f64, n: usize, r: f64, eb: f64) -> Result<f64> {
    check_model_inputs(a, l_bar, n, r)?;
    if !(eb > 0.0 && eb.is_finite()) {
        return Err(param(format!("error bound must be positive, got {eb}")));
    }
    Ok(a * l_bar * (n as f64 * r).sqrt() * eb)
}

/// Outcome of inverting the error model for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum EbEstimate {
    Bound(f64),
    /// The layer cannot be bounded this interval and should stay uncompressed.
    Skip(SkipReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    ZeroLossGradient,
    AllZeroActivation,
    ZeroMomentum,
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkipReason::ZeroLossGradient => "zero loss gradient",
            SkipReason::AllZeroActivation => "all-zero activation",
            SkipReason::ZeroMomentum => "zero momentum",
        })
    }
}

impl EbEstimate {
    pub fn bound(&self) -> Option<f64> {
        match self {
            EbEstimate::Bound(eb) => Some(*eb),
            EbEstimate::Skip(_) => None,
        }
    }
}

/// `eb = sigma_target / (a * L_bar * sqrt(N * R))`.
pub fn estimate_eb(sigma_target: f64, a: f64, l_bar: f64, n: usize, r: f64) -> Result<EbEstimate> {
    check_model_inputs(a, l_bar, n, r)?;
    if !(sigma_target > 0.0 && sigma_target.is_finite()) {
        return Err(param(format!("sigma target must be positive, got {sigma_target}")));
    }
    if l_bar == 0.0 {
        return Ok(EbEstimate::Skip(SkipReason::ZeroLossGradient));
    }
    if r == 0.0 {
        return Ok(EbEstimate::Skip(SkipReason::AllZeroActivation));
    }
    let eb = sigma_target / (a * l_bar * (n as f64 * r).sqrt());
    if !(eb > 0.0 && eb.is_finite()) {
        return Err(param(format!("estimated error bound {eb} is not usable")));
    }
    Ok(EbEstimate::Bound(eb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientErrorModel {
    pub sigma: f64,
    pub a: f64,
    pub eb: f64,
    pub l_bar: f64,
    pub n: usize,
    pub r: f64,
}

impl GradientErrorModel {
    pub fn new(a: f64, l_bar: f64, n: usize, r: f64, eb: f64) -> Result<Self> {
        let sigma = predict_sigma(a, l_bar, n, r, eb)?;
        let m = GradientErrorModel { sigma, a, eb, l_bar, n, r };
        debug_assert!(m.is_consistent());
        Ok(m)
    }

    pub fn is_consistent(&self) -> bool {
        let expect = self.a * self.l_bar * (self.n as f64 * self.r).sqrt() * self.eb;
        (self.sigma - expect).abs() <= 1e-12 * expect.abs()
    }
}

/// How the loss-gradient scale of a layer is summarised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LBarMode {
    /// Batch mean of per-sample max |L|.
    #[default]
    MeanOfSampleMax,
    /// Mean |L| over all elements.
    MeanAbs,
}

/// `L_bar` of a loss-gradient tensor whose first dimension is the batch.
pub fn l_bar(loss_grad: &Tensor, mode: LBarMode) -> Result<f64> {
    let stats = compute_stats(loss_grad, Some(0))?;
    Ok(match mode {
        LBarMode::MeanOfSampleMax => {
            stats.per_sample_max_abs.iter().sum::<f64>() / stats.per_sample_max_abs.len() as f64
        }
        LBarMode::MeanAbs => stats.mean_abs,
    })
}

pub const HISTOGRAM_BINS: usize = 40;
/// Histogram span in units of the empirical sigma on each side of zero.
pub const HISTOGRAM_SPAN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionDiagnostics {
    /// Root mean square of the error sample.
    pub empirical_sigma: f64,
    pub fraction_within_1sigma: f64,
    /// `HISTOGRAM_BINS` equal bins over `[-4 sigma, 4 sigma]`; values
    /// outside fall into the edge bins.
    pub histogram: Vec<u64>,
    pub sample_count: usize,
    /// Pearson chi-square against a normal with the sample's mean and
    /// standard deviation, over the histogram bins.
    pub chi_square: f64,
    pub chi_square_p_value: f64,
}

impl DistributionDiagnostics {
    pub fn from_errors(errors: &[f64]) -> Self {
        let n = errors.len();
        if n == 0 {
            return DistributionDiagnostics {
                empirical_sigma: 0.0,
                fraction_within_1sigma: 0.0,
                histogram: vec![0; HISTOGRAM_BINS],
                sample_count: 0,
                chi_square: 0.0,
                chi_square_p_value: 1.0,
            };
        }
        let sigma = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
        let within = errors.iter().filter(|e| e.abs() <= sigma).count();
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        let width = 2.0 * HISTOGRAM_SPAN * sigma / HISTOGRAM_BINS as f64;
        for &e in errors {
            let bin = if sigma == 0.0 {
                HISTOGRAM_BINS / 2
            } else {
                let b = ((e + HISTOGRAM_SPAN * sigma) / width).floor();
                b.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
            };
            histogram[bin] += 1;
        }
        let (chi_square, chi_square_p_value) = chi_square_normal(errors, &histogram, sigma);
        DistributionDiagnostics {
            empirical_sigma: sigma,
            fraction_within_1sigma: within as f64 / n as f64,
            histogram,
            sample_count: n,
            chi_square,
            chi_square_p_value,
        }
    }

    /// Whether the chi-square test keeps normality at the 0.01 level.
    pub fn normal_at_1_percent(&self) -> bool {
        self.chi_square_p_value >= 0.01
    }
}

fn chi_square_normal(errors: &[f64], histogram: &[u64], sigma: f64) -> (f64, f64) {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sigma == 0.0 || sd == 0.0 {
        return (0.0, 1.0);
    }
    let normal = Normal::new(mean, sd).expect("positive sd");
    let width = 2.0 * HISTOGRAM_SPAN * sigma / histogram.len() as f64;
    let lo = -HISTOGRAM_SPAN * sigma;
    // Merge adjacent bins until each expects at least 5 samples.
    let mut stat = 0.0;
    let mut cells = 0usize;
    let (mut obs, mut exp) = (0.0, 0.0);
    for (i, &count) in histogram.iter().enumerate() {
        let left = if i == 0 { 0.0 } else { normal.cdf(lo + i as f64 * width) };
        let right = if i + 1 == histogram.len() {
            1.0
        } else {
            normal.cdf(lo + (i + 1) as f64 * width)
        };
        obs += count as f64;
        exp += n * (right - left);
        if exp >= 5.0 {
            stat += (obs - exp).powi(2) / exp;
            cells += 1;
            obs = 0.0;
            exp = 0.0;
        }
    }
    if exp > 0.0 {
        stat += (obs - exp).powi(2) / exp.max(1e-300);
    }
    let df = cells.saturating_sub(3).max(1) as f64;
    let p = 1.0 - ChiSquared::new(df).expect("positive df").cdf(stat);
    (stat, p)
}

pub fn measure_gradient_error(grad_clean: &Tensor, grad_perturbed: &Tensor) -> Result<DistributionDiagnostics> {
    if grad_clean.dims() != grad_perturbed.dims() {
        return Err(dim(format!(
            "gradient shapes differ: {:?} vs {:?}",
            grad_clean.dims(),
            grad_perturbed.dims()
        )));
    }
    let errors: Vec<f64> = grad_perturbed
        .data()
        .iter()
        .zip(grad_clean.data())
        .map(|(p, c)| p - c)
        .collect();
    Ok(DistributionDiagnostics::from_errors(&errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{make_tensor, FillSpec};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal as RNormal};

    #[test]
    fn injection_keeps_zeros_and_is_deterministic() {
        let z = Tensor::zeros(vec![100]).unwrap();
        assert_eq!(inject_uniform_error(&z, 1e-3, true, 1).unwrap(), z);
        let t = make_tensor(&[1000], FillSpec::ReluSparse { sparsity: 0.5, seed: 4 }).unwrap();
        let a = inject_uniform_error(&t, 0.1, true, 7).unwrap();
        assert_eq!(a, inject_uniform_error(&t, 0.1, true, 7).unwrap());
        for (x, y) in t.data().iter().zip(a.data()) {
            if *x == 0.0 {
                assert_eq!(*y, 0.0);
            } else {
                assert!((x - y).abs() <= 0.1);
            }
        }
        let off = inject_uniform_error(&t, 0.1, false, 7).unwrap();
        assert!(t.data().iter().zip(off.data()).any(|(x, y)| *x == 0.0 && *y != 0.0));
        assert!(inject_uniform_error(&t, 0.0, true, 1).is_err());
    }

    #[test]
    fn injected_std_matches_uniform_moment() {
        let eb = 1e-3;
        let t = Tensor::zeros(vec![1_000_000]).unwrap();
        let e = inject_uniform_error(&t, eb, false, 11).unwrap();
        let std = (e.data().iter().map(|v| v * v).sum::<f64>() / 1e6).sqrt();
        let expect = eb / 3f64.sqrt();
        assert!((std - expect).abs() < 0.05 * expect, "{std} vs {expect}");
    }

    #[test]
    fn model_examples() {
        assert_eq!(predict_sigma(0.32, 1.0, 4, 0.0, 1e-3).unwrap(), 0.0);
        let s = predict_sigma(0.32, 1.0, 1, 1.0, 1e-3).unwrap();
        assert!((s - 3.2e-4).abs() < 1e-18);
        let s2 = predict_sigma(0.32, 1.0, 2, 1.0, 1e-3).unwrap();
        assert!((s2 / s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(estimate_eb(0.5, 1.0, 1.0, 1, 1.0).unwrap(), EbEstimate::Bound(0.5));
        assert!(predict_sigma(0.0, 1.0, 1, 1.0, 1.0).is_err());
        assert!(predict_sigma(1.0, 1.0, 0, 1.0, 1.0).is_err());
        assert!(predict_sigma(1.0, 1.0, 1, 1.5, 1.0).is_err());
    }

    #[test]
    fn degenerate_estimates_skip() {
        assert_eq!(
            estimate_eb(0.1, 0.32, 0.0, 8, 0.5).unwrap(),
            EbEstimate::Skip(SkipReason::ZeroLossGradient)
        );
        assert_eq!(
            estimate_eb(0.1, 0.32, 1.0, 8, 0.0).unwrap(),
            EbEstimate::Skip(SkipReason::AllZeroActivation)
        );
    }

    #[test]
    fn l_bar_modes() {
        let l = Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.2, -3.0]).unwrap();
        assert_eq!(l_bar(&l, LBarMode::MeanOfSampleMax).unwrap(), 2.0);
        assert_eq!(l_bar(&l, LBarMode::MeanAbs).unwrap(), 4.7 / 4.0);
    }

    #[test]
    fn diagnostics_identity_and_shapes() {
        let g = make_tensor(&[5, 5], FillSpec::Gaussian { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        let d = measure_gradient_error(&g, &g).unwrap();
        assert_eq!(d.empirical_sigma, 0.0);
        assert_eq!(d.histogram.iter().sum::<u64>(), 25);
        let h = Tensor::zeros(vec![25]).unwrap();
        assert!(measure_gradient_error(&g, &h).is_err());
    }

    #[test]
    fn normal_errors_within_one_sigma() {
        let mut rng = seeded(5);
        let normal = RNormal::new(0.0, 2.0).unwrap();
        let e: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let d = DistributionDiagnostics::from_errors(&e);
        assert!((0.67..=0.695).contains(&d.fraction_within_1sigma), "{}", d.fraction_within_1sigma);
        assert_eq!(d.histogram.iter().sum::<u64>(), 100_000);
        assert!(d.chi_square_p_value > 1e-4);
    }

    #[test]
    fn uniform_errors_within_one_sigma() {
        let mut rng = seeded(6);
        let e: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let d = DistributionDiagnostics::from_errors(&e);
        assert!((d.fraction_within_1sigma - 1.0 / 3f64.sqrt()).abs() < 0.01);
        assert!(!d.normal_at_1_percent());
    }

    proptest! {
        #[test]
        fn estimator_round_trips(
            a in 0.01f64..5.0,
            l in 1e-6f64..1e3,
            n in 1usize..4096,
            r in 1e-3f64..=1.0,
            sigma in 1e-9f64..1.0,
        ) {
            let eb = estimate_eb(sigma, a, l, n, r).unwrap().bound().unwrap();
            let back = predict_sigma(a, l, n, r, eb).unwrap();
            prop_assert!((back - sigma).abs() <= 1e-12 * sigma);
            let s = predict_sigma(a, l, n, r, sigma).unwrap();
            let eb2 = estimate_eb(s, a, l, n, r).unwrap().bound().unwrap();
            prop_assert!((eb2 - sigma).abs() <= 1e-12 * sigma);
        }

        #[test]
        fn sigma_scaling_laws(
            a in 0.01f64..5.0,
            l in 1e-6f64..1e3,
            n in 1usize..2048,
            r in 1e-3f64..=0.25,
            eb in 1e-6f64..1.0,
        ) {
            let s = predict_sigma(a, l, n, r, eb).unwrap();
            let rel = |x: f64, y: f64| (x - y).abs() <= 1e-12 * y.abs();
            prop_assert!(rel(predict_sigma(a, l, n, r, 2.0 * eb).unwrap(), 2.0 * s));
            prop_assert!(rel(predict_sigma(a, 3.0 * l, n, r, eb).unwrap(), 3.0 * s));
            prop_assert!(rel(predict_sigma(a, l, 4 * n, r, eb).unwrap(), 2.0 * s));
            prop_assert!(rel(predict_sigma(a, l, n, 4.0 * r, eb).unwrap(), 2.0 * s));
            prop_assert!(GradientErrorModel::new(a, l, n, r, eb).unwrap().is_consistent());
        }

        #[test]
        fn preserving_injection_never_touches_zeros(seed in any::<u64>(), sparsity in 0.0f64..=1.0) {
            let t = make_tensor(&[257], FillSpec::ReluSparse { sparsity, seed }).unwrap();
            let out = inject_uniform_error(&t, 0.5, true, seed ^ 1).unwrap();
            for (x, y) in t.data().iter().zip(out.data()) {
                if *x == 0.0 {
                    prop_assert_eq!(*y, 0.0);
                }
            }
        }
    }
}
