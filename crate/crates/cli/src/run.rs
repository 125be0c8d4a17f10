use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use comet::codec::{compress, decompress, CodecParams, CompressedActivation};
use comet::controller::{parse_key_values, write_plan_csv};
use comet::data::{load_idx_dataset, synthetic_blobs, Dataset, SyntheticSpec};
use comet::errprop::{
    calibrate_a, experiment_error_prop, write_experiment_csv, Arm, LayerShape, ProbeConfig,
};
use comet::nn::checkpoint::save_checkpoint;
use comet::nn::train::write_records_csv;
use comet::nn::{train, Network, RunStatus, TrainConfig, TrainMode, TrainOutcome};
use comet::tensor::{compare, make_tensor, read_tensor, write_tensor, FillSpec};
use comet::{Error, Precision};

use crate::{
    CalibrateArgs, Command, CompressArgs, ErrorPropArgs, Fill, MakeTensorArgs, PrecisionArg,
    TrainArgs, EXIT_DIVERGED, EXIT_INTERNAL, EXIT_IO, EXIT_MEMORY, EXIT_SCHEMA, EXIT_USAGE,
    OUT_DIR_ENV,
};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Format(_) => EXIT_IO,
            Error::Dimension(_) | Error::Parameter(_) => EXIT_USAGE,
            Error::Data(_) => EXIT_SCHEMA,
            Error::MemoryInfeasible(_) => EXIT_MEMORY,
            Error::Lifecycle(_) => EXIT_INTERNAL,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(EXIT_IO, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Joins relative output paths onto `$COMET_OUT_DIR` when it is set.
pub fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() && !dir.is_empty() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn create(p: &Path) -> CliResult<BufWriter<File>> {
    let p = out_path(p);
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let f = File::create(&p).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display())))?;
    Ok(BufWriter::new(f))
}

fn open(p: &Path) -> CliResult<BufReader<File>> {
    let f = File::open(p).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display())))?;
    Ok(BufReader::new(f))
}

pub fn dispatch(cmd: Command) -> CliResult<u8> {
    match cmd {
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress { input, output } => cmd_decompress(&input, &output),
        Command::Compare {
            original,
            reconstructed,
            eb,
        } => cmd_compare(&original, &reconstructed, eb),
        Command::MakeTensor(a) => cmd_make_tensor(a),
        Command::ExperimentErrorProp(a) => cmd_experiment(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Train(a) => cmd_train(a),
        Command::Analyze { inputs, out } => crate::analyze::run(&inputs, out.as_deref()),
    }
}

fn cmd_compress(a: CompressArgs) -> CliResult<u8> {
    let t = read_tensor(&mut open(&a.input)?)?;
    let params = CodecParams::new(a.eb)
        .with_radius(a.radius)
        .with_preserve_zeros(!a.no_preserve_zeros);
    let (c, report) = compress(&t, params)?;
    let mut w = create(&a.output)?;
    w.write_all(&c.to_bytes())?;
    w.flush()?;
    println!("original_bytes {}", report.original_bytes);
    println!("compressed_bytes {}", report.compressed_bytes);
    println!("ratio {:.4}", report.ratio);
    println!("outlier_fraction {:.6}", report.outlier_fraction);
    println!("entropy_bits_per_symbol {:.4}", report.codes_entropy_bits_per_symbol);
    println!("payload_bits_per_symbol {:.4}", report.payload_bits_per_symbol);
    if report.outlier_warning {
        eprintln!("warning: outlier fraction {:.3} is high; consider a larger radius", report.outlier_fraction);
    }
    Ok(0)
}

fn cmd_decompress(input: &Path, output: &Path) -> CliResult<u8> {
    let bytes = fs::read(input).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", input.display())))?;
    let t = decompress(&CompressedActivation::from_bytes(&bytes)?)?;
    let mut w = create(output)?;
    let n = write_tensor(&t, &mut w)?;
    w.flush()?;
    println!("wrote {n} bytes, dims {:?}", t.dims());
    Ok(0)
}

fn cmd_compare(original: &Path, reconstructed: &Path, eb: f64) -> CliResult<u8> {
    if !(eb > 0.0 && eb.is_finite()) {
        return Err(CliError::usage(format!("eb must be positive, got {eb}")));
    }
    let a = read_tensor(&mut open(original)?)?;
    let b = read_tensor(&mut open(reconstructed)?)?;
    let r = compare(&a, &b, eb)?;
    println!("max_abs_diff {:e}", r.max_abs_diff);
    println!("mean_abs_diff {:e}", r.mean_abs_diff);
    println!("count_exceeding {}", r.count_exceeding);
    println!("count_exceeding_unflushed {}", r.count_exceeding_unflushed);
    println!("flushed_zeros {}", r.flushed_zeros);
    Ok(0)
}

fn parse_dims(s: &str) -> CliResult<Vec<usize>> {
    s.split('x')
        .map(|d| d.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| CliError::usage(format!("bad dims {s:?}; expected e.g. 32x8x28x28")))
}

fn cmd_make_tensor(a: MakeTensorArgs) -> CliResult<u8> {
    let dims = parse_dims(&a.dims)?;
    let fill = match a.fill {
        Fill::Constant => FillSpec::Constant(a.value),
        Fill::Uniform => FillSpec::Uniform {
            lo: a.lo,
            hi: a.hi,
            seed: a.seed,
        },
        Fill::Gaussian => FillSpec::Gaussian {
            mean: a.mean,
            std: a.std,
            seed: a.seed,
        },
        Fill::ReluSparse => FillSpec::ReluSparse {
            sparsity: a.sparsity,
            seed: a.seed,
        },
    };
    let precision = match a.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    let t = make_tensor(&dims, fill)?.with_precision(precision);
    let mut w = create(&a.output)?;
    let n = write_tensor(&t, &mut w)?;
    w.flush()?;
    println!("wrote {n} bytes, dims {:?}", t.dims());
    Ok(0)
}

fn probe_config(shape: &str, batch: usize, eb: f64, nonzero_ratio: f64, draws: usize) -> CliResult<ProbeConfig> {
    let shape: LayerShape = shape.parse()?;
    let mut cfg = ProbeConfig::new(shape, batch, eb);
    cfg.nonzero_ratio = nonzero_ratio;
    cfg.draws = draws;
    Ok(cfg)
}

fn cmd_experiment(a: ErrorPropArgs) -> CliResult<u8> {
    let cfg = probe_config(&a.layer_shape, a.batch, a.eb, a.nonzero_ratio, a.draws)?;
    let rows = experiment_error_prop(&cfg, a.trials, a.seed, a.a)?;
    write_experiment_csv(&rows, create(&a.out)?)?;
    for arm in [Arm::PreserveZeros, Arm::Plain] {
        let sel: Vec<_> = rows.iter().filter(|r| r.arm == arm).collect();
        let n = sel.len() as f64;
        let emp = sel.iter().map(|r| r.sigma_emp).sum::<f64>() / n;
        let ratio = sel.iter().map(|r| r.sigma_emp / r.sigma_pred).sum::<f64>() / n;
        let frac = sel.iter().map(|r| r.frac_1sigma).sum::<f64>() / n;
        println!(
            "{:<15} mean_sigma_emp {emp:.4e}  emp/pred {ratio:.4}  frac_1sigma {frac:.4}",
            arm.name()
        );
    }
    println!("wrote {} rows to {}", rows.len(), out_path(&a.out).display());
    Ok(0)
}

fn cmd_calibrate(a: CalibrateArgs) -> CliResult<u8> {
    let cfg = if a.single_element {
        let mut c = probe_config("16x1x1,k1x1,s1,o1", 1, a.eb, 1.0, a.draws)?;
        c.arm = Arm::PreserveZeros;
        c
    } else {
        probe_config(&a.layer_shape, a.batch, a.eb, a.nonzero_ratio, a.draws)?
    };
    let cal = calibrate_a(&cfg, a.trials, a.seed)?;
    println!("layer_shape {}", cfg.shape);
    println!("batch {}", cfg.batch);
    println!("trials {}", cal.trials);
    println!("a_hat {:.5}", cal.a_hat);
    println!("ci95 [{:.5}, {:.5}]", cal.a_hat - cal.half_width, cal.a_hat + cal.half_width);
    if cal.resampled > 0 {
        println!("resampled {}", cal.resampled);
    }
    Ok(0)
}

/// Dataset settings read from the same key=value file as the training keys.
struct DataConfig {
    kind: String,
    synthetic: SyntheticSpec,
    train_samples: Option<usize>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    eval_images: Option<PathBuf>,
    eval_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: "synthetic".into(),
            synthetic: SyntheticSpec::default(),
            train_samples: None,
            train_images: None,
            train_labels: None,
            eval_images: None,
            eval_labels: None,
        }
    }
}

impl DataConfig {
    fn apply(&mut self, key: &str, value: &str) -> CliResult<bool> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
            v.parse()
                .map_err(|_| CliError::usage(format!("invalid value {v:?} for {key}")))
        }
        let s = &mut self.synthetic;
        match key {
            "dataset" => self.kind = value.to_string(),
            "samples" => s.samples = p(key, value)?,
            "classes" => s.classes = p(key, value)?,
            "height" => s.height = p(key, value)?,
            "width" => s.width = p(key, value)?,
            "blobs_per_class" => s.blobs_per_class = p(key, value)?,
            "jitter" => s.jitter = p(key, value)?,
            "noise" => s.noise = p(key, value)?,
            "data_seed" => s.seed = p(key, value)?,
            "train_samples" => self.train_samples = Some(p(key, value)?),
            "train_images" => self.train_images = Some(value.into()),
            "train_labels" => self.train_labels = Some(value.into()),
            "eval_images" => self.eval_images = Some(value.into()),
            "eval_labels" => self.eval_labels = Some(value.into()),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn load(&self) -> CliResult<(Dataset, Dataset)> {
        match self.kind.as_str() {
            "synthetic" => {
                let ds = synthetic_blobs(&self.synthetic)?;
                let n = self.train_samples.unwrap_or(ds.len() * 4 / 5);
                Ok(ds.split(n)?)
            }
            "idx" => {
                let need = |p: &Option<PathBuf>, k: &str| {
                    p.clone()
                        .ok_or_else(|| CliError::usage(format!("dataset=idx requires {k}")))
                };
                let tr = load_idx_dataset(&need(&self.train_images, "train_images")?, &need(&self.train_labels, "train_labels")?)?;
                match (&self.eval_images, &self.eval_labels) {
                    (Some(i), Some(l)) => Ok((tr, load_idx_dataset(i, l)?)),
                    (None, None) => {
                        let n = self.train_samples.unwrap_or(tr.len() * 5 / 6);
                        Ok(tr.split(n)?)
                    }
                    _ => Err(CliError::usage("eval_images and eval_labels go together")),
                }
            }
            other => Err(CliError::usage(format!("unknown dataset {other:?}; use synthetic or idx"))),
        }
    }
}

fn run_training(tr: &Dataset, ev: &Dataset, mode: TrainMode, cfg: &TrainConfig) -> CliResult<(Network, TrainOutcome)> {
    let d = tr.sample_dims();
    if d.len() != 3 {
        return Err(CliError::usage(format!("expected CxHxW samples, got {d:?}")));
    }
    let mut net = Network::desk_cnn(d[0], d[1], d[2], tr.classes(), cfg.seed)?;
    let out = train(&mut net, tr, ev, mode, cfg)?;
    Ok((net, out))
}

fn cmd_train(a: TrainArgs) -> CliResult<u8> {
    let mode: TrainMode = a.mode.parse()?;
    let mut cfg = TrainConfig::default();
    let mut data = DataConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
        for (k, v) in parse_key_values(&text)? {
            if !data.apply(&k, &v)? && !cfg.apply(&k, &v)? {
                return Err(CliError::usage(format!("unknown config key {k:?}")));
            }
        }
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (tr, ev) = data.load()?;

    let (net, out) = run_training(&tr, &ev, mode, &cfg)?;
    write_records_csv(&out.records, &out.conv_layers, create(&a.out)?)?;
    if let Some(p) = &a.plan_out {
        write_plan_csv(&out.plans, create(p)?)?;
    }
    if let Some(dir) = &a.checkpoint {
        let dir = out_path(dir);
        fs::create_dir_all(&dir)?;
        save_checkpoint(&net, &dir)?;
    }

    let peak = out.max_peak_bytes();
    println!("mode {mode}");
    println!("iterations {}", out.records.len());
    match out.final_eval_accuracy {
        Some(acc) => println!("final_eval_accuracy {acc:.4}"),
        None => println!("final_eval_accuracy n/a"),
    }
    println!("peak_activation_bytes {peak}");
    println!("plans {}", out.plans.len());
    if out.overflow_events > 0 {
        println!("overflow_events {}", out.overflow_events);
    }

    if let RunStatus::Diverged { iteration } = out.status {
        eprintln!("error: training diverged at iteration {iteration}");
        return Ok(EXIT_DIVERGED);
    }

    if !a.no_reference && mode != TrainMode::Baseline {
        let (_, base) = run_training(&tr, &ev, TrainMode::Baseline, &cfg)?;
        let bpeak = base.max_peak_bytes();
        if let Some(acc) = base.final_eval_accuracy {
            println!("baseline_eval_accuracy {acc:.4}");
        }
        println!("baseline_peak_activation_bytes {bpeak}");
        if peak > 0 {
            println!("memory_reduction {:.3}x", bpeak as f64 / peak as f64);
        }
    }
    Ok(0)
}
