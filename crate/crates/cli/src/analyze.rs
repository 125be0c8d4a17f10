use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use comet::controller::PLAN_HEADER;
use comet::errprop::EXPERIMENT_HEADER;

use crate::run::{out_path, CliError, CliResult};
use crate::{EXIT_IO, EXIT_SCHEMA};

const TRAIN_FIXED: [&str; 8] = [
    "iteration",
    "epoch",
    "loss",
    "train_accuracy",
    "eval_accuracy",
    "batch_size",
    "W",
    "peak_activation_bytes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schema {
    Training,
    Experiment,
    Plan,
}

impl Schema {
    fn name(self) -> &'static str {
        match self {
            Schema::Training => "training",
            Schema::Experiment => "error-prop",
            Schema::Plan => "plan",
        }
    }

    fn text_columns(self) -> &'static [&'static str] {
        match self {
            Schema::Experiment => &["layer_shape", "arm"],
            _ => &[],
        }
    }
}

fn detect(header: &[String]) -> Option<Schema> {
    if header.iter().map(String::as_str).eq(EXPERIMENT_HEADER) {
        return Some(Schema::Experiment);
    }
    if header.iter().map(String::as_str).eq(PLAN_HEADER) {
        return Some(Schema::Plan);
    }
    if header.len() < TRAIN_FIXED.len() + 1 || !header.iter().zip(TRAIN_FIXED).all(|(h, f)| h == f) {
        return None;
    }
    let rest = &header[TRAIN_FIXED.len()..];
    let (last, layered) = rest.split_last()?;
    if last != "grad_error_rel" || layered.len() % 2 != 0 {
        return None;
    }
    let (ebs, ratios) = layered.split_at(layered.len() / 2);
    let ok = ebs.iter().zip(ratios).all(|(e, r)| {
        let (Some(le), Some(lr)) = (e.strip_prefix("eb_L"), r.strip_prefix("ratio_L")) else {
            return false;
        };
        le == lr && le.parse::<usize>().is_ok()
    });
    ok.then_some(Schema::Training)
}

struct Table {
    schema: Schema,
    header: Vec<String>,
    /// Numeric view; `None` for empty cells and text columns.
    rows: Vec<Vec<Option<f64>>>,
    text: Vec<Vec<String>>,
}

impl Table {
    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn column(&self, idx: usize) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r[idx]).collect()
    }
}

fn schema_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_SCHEMA, format!("{}: {msg}", path.display()))
}

fn load(path: &Path) -> CliResult<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| schema_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let schema = detect(&header).ok_or_else(|| schema_err(path, format!("unrecognized header {:?}", header.join(","))))?;
    let text_cols: Vec<bool> = header.iter().map(|h| schema.text_columns().contains(&h.as_str())).collect();
    let mut rows = Vec::new();
    let mut text = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| schema_err(path, e))?;
        let mut nums = Vec::with_capacity(rec.len());
        for (i, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if text_cols[i] || cell.is_empty() {
                nums.push(None);
            } else {
                let v = cell
                    .parse::<f64>()
                    .map_err(|_| schema_err(path, format!("row {}: column {} is not numeric: {cell:?}", line + 2, header[i])))?;
                nums.push(Some(v));
            }
        }
        rows.push(nums);
        text.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table {
        schema,
        header,
        rows,
        text,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Eval accuracy at each epoch end, keyed by epoch.
fn epoch_accuracy(t: &Table) -> BTreeMap<i64, f64> {
    let (Some(e), Some(a)) = (t.col("epoch"), t.col("eval_accuracy")) else {
        return BTreeMap::new();
    };
    t.rows
        .iter()
        .filter_map(|r| Some((r[e]? as i64, r[a]?)))
        .collect()
}

fn print_training(t: &Table) {
    let acc = epoch_accuracy(t);
    if !acc.is_empty() {
        let s: Vec<String> = acc.iter().map(|(e, a)| format!("{e}:{a:.4}")).collect();
        println!("  eval_accuracy by epoch  {}", s.join(" "));
    }
    let Some(ecol) = t.col("epoch") else { return };
    for (i, h) in t.header.iter().enumerate().filter(|(_, h)| h.starts_with("ratio_L")) {
        let mut per_epoch: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for r in &t.rows {
            if let (Some(e), Some(v)) = (r[ecol], r[i]) {
                per_epoch.entry(e as i64).or_default().push(v);
            }
        }
        if per_epoch.is_empty() {
            continue;
        }
        let s: Vec<String> = per_epoch
            .iter()
            .map(|(e, v)| format!("{e}:{:.2}", mean_std(v).0))
            .collect();
        println!("  {h} trajectory (epoch mean)  {}", s.join(" "));
    }
}

fn print_experiment(t: &Table) {
    let (Some(arm), Some(emp), Some(pred), Some(frac)) = (t.col("arm"), t.col("sigma_emp"), t.col("sigma_pred"), t.col("frac_1sigma")) else {
        return;
    };
    let mut by_arm: BTreeMap<&str, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, txt) in t.rows.iter().zip(&t.text) {
        if let (Some(e), Some(p), Some(f)) = (r[emp], r[pred], r[frac]) {
            let entry = by_arm.entry(txt[arm].as_str()).or_default();
            entry.0.push(e);
            entry.1.push(e / p);
            entry.2.push(f);
        }
    }
    for (name, (e, ratio, f)) in &by_arm {
        println!(
            "  arm {name:<15} n {:>4}  sigma_emp {:.4e}  emp/pred {:.4}  frac_1sigma {:.4}",
            e.len(),
            mean_std(e).0,
            mean_std(ratio).0,
            mean_std(f).0
        );
    }
}

pub fn run(inputs: &[std::path::PathBuf], out: Option<&Path>) -> CliResult<u8> {
    let tables: Vec<Table> = inputs.iter().map(|p| load(p)).collect::<CliResult<_>>()?;
    let mut summary = Vec::new();
    for (path, t) in inputs.iter().zip(&tables) {
        println!("{} [{}] rows {}", path.display(), t.schema.name(), t.rows.len());
        for (i, h) in t.header.iter().enumerate() {
            let v = t.column(i);
            if v.is_empty() {
                continue;
            }
            let (m, s) = mean_std(&v);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            println!("  {h:<24} n {:>6}  mean {m:>12.5e}  std {s:>12.5e}  min {lo:>12.5e}  max {hi:>12.5e}", v.len());
            summary.push((path.display().to_string(), h.clone(), v.len(), m, s, lo, hi));
        }
        match t.schema {
            Schema::Training => print_training(t),
            Schema::Experiment => print_experiment(t),
            Schema::Plan => {}
        }
    }

    let runs: Vec<(&std::path::PathBuf, &Table)> = inputs
        .iter()
        .zip(&tables)
        .filter(|(_, t)| t.schema == Schema::Training)
        .collect();
    if let Some(((ref_path, reference), others)) = runs.split_first() {
        let base = epoch_accuracy(reference);
        for (path, t) in others {
            let acc = epoch_accuracy(t);
            let gaps: Vec<String> = base
                .iter()
                .filter_map(|(e, b)| acc.get(e).map(|a| format!("{e}:{:+.4}", b - a)))
                .collect();
            if !gaps.is_empty() {
                println!(
                    "accuracy gap {} minus {}  {}",
                    ref_path.display(),
                    path.display(),
                    gaps.join(" ")
                );
            }
        }
    }

    if let Some(p) = out {
        let p = out_path(p);
        let mut w = csv::Writer::from_path(&p).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display())))?;
        let io = |e: csv::Error| CliError::new(EXIT_IO, e.to_string());
        w.write_record(["file", "column", "count", "mean", "std", "min", "max"]).map_err(io)?;
        for (f, c, n, m, s, lo, hi) in summary {
            w.write_record([f, c, n.to_string(), m.to_string(), s.to_string(), lo.to_string(), hi.to_string()])
                .map_err(io)?;
        }
        w.flush()?;
    }
    std::io::stdout().flush()?;
    Ok(0)
}
