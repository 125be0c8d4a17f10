use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn comet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comet"))
        .args(args)
        .current_dir(dir)
        .env_remove("COMET_OUT_DIR")
        .output()
        .expect("spawn comet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.trim().parse().ok()))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
}

fn make(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["make-tensor", name, "--dims", "8x4x16x16", "--seed", "7"];
    args.extend_from_slice(extra);
    let o = comet(dir, &args);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn zero_error_bound_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    make(d.path(), "a.cmtt", &[]);
    let o = comet(d.path(), &["compress", "a.cmtt", "a.cmtz", "--eb", "0"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(!d.path().join("a.cmtz").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    assert_eq!(comet(d.path(), &["frobnicate"]).status.code(), Some(64));
}

#[test]
fn missing_input_is_an_io_error() {
    let d = TempDir::new().unwrap();
    let o = comet(d.path(), &["compress", "nope.cmtt", "x", "--eb", "1e-3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn round_trip_respects_bound() {
    let d = TempDir::new().unwrap();
    make(d.path(), "a.cmtt", &["--fill", "gaussian"]);
    let o = comet(d.path(), &["compress", "a.cmtt", "a.cmtz", "--eb", "1e-2", "--no-preserve-zeros"]);
    assert!(o.status.success());
    assert!(field(&stdout(&o), "ratio") > 1.0);
    assert!(comet(d.path(), &["decompress", "a.cmtz", "b.cmtt"]).status.success());
    let o = comet(d.path(), &["compare", "a.cmtt", "b.cmtt", "--eb", "1e-2"]);
    let s = stdout(&o);
    assert_eq!(field(&s, "count_exceeding"), 0.0);
    assert!(field(&s, "max_abs_diff") <= 1e-2);
}

#[test]
fn all_zero_tensor_compresses_over_hundredfold() {
    let d = TempDir::new().unwrap();
    let o = comet(d.path(), &["make-tensor", "z.cmtt", "--dims", "4x28x28", "--fill", "constant"]);
    assert!(o.status.success());
    let o = comet(d.path(), &["compress", "z.cmtt", "z.cmtz", "--eb", "1e-3"]);
    assert!(field(&stdout(&o), "ratio") > 100.0, "{}", stdout(&o));
}

#[test]
fn compression_is_byte_deterministic() {
    let d = TempDir::new().unwrap();
    make(d.path(), "a.cmtt", &[]);
    comet(d.path(), &["compress", "a.cmtt", "x.cmtz", "--eb", "1e-3"]);
    comet(d.path(), &["compress", "a.cmtt", "y.cmtz", "--eb", "1e-3"]);
    assert_eq!(fs::read(d.path().join("x.cmtz")).unwrap(), fs::read(d.path().join("y.cmtz")).unwrap());
}

#[test]
fn out_dir_env_redirects_relative_outputs() {
    let d = TempDir::new().unwrap();
    let out = d.path().join("results");
    let o = Command::new(env!("CARGO_BIN_EXE_comet"))
        .args(["make-tensor", "a.cmtt", "--dims", "3x3"])
        .current_dir(d.path())
        .env("COMET_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("a.cmtt").exists());
    assert!(!d.path().join("a.cmtt").exists());
}

#[test]
fn analyze_rejects_unknown_header() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("bad.csv"), "alpha,beta\n1,2\n").unwrap();
    let o = comet(d.path(), &["analyze", "--in", "bad.csv"]);
    assert_eq!(o.status.code(), Some(65));
}

#[test]
fn analyze_rejects_non_numeric_cells() {
    let d = TempDir::new().unwrap();
    let header = "interval,layer_id,R,L_bar,M_avg,sigma_target,eb,skip_flag,W";
    fs::write(d.path().join("p.csv"), format!("{header}\n0,0,0.5,x,1,1,1,0,4\n")).unwrap();
    let o = comet(d.path(), &["analyze", "--in", "p.csv"]);
    assert_eq!(o.status.code(), Some(65));
}

#[test]
fn error_prop_csv_round_trips_through_analyze() {
    let d = TempDir::new().unwrap();
    let o = comet(d.path(), &["experiment-error-prop", "--trials", "2", "--draws", "4", "--out", "e.csv"]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(d.path().join("e.csv")).unwrap();
    assert!(text.starts_with("trial,layer_shape,N,R,L_bar,eb,sigma_pred,sigma_emp,frac_1sigma,arm\n"));
    assert_eq!(text.lines().count(), 5);
    let o = comet(d.path(), &["analyze", "--in", "e.csv"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("arm plain"));
}

const TINY: &str = "samples=120\ntrain_samples=80\nepochs=1\nbatch_size=16\nW_default=2\nW_floor=1\n";

fn loss_column(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == "loss").unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn zero_bound_injection_matches_baseline_losses() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.txt"), TINY).unwrap();
    for (mode, out) in [("baseline", "b.csv"), ("inject:0", "i.csv")] {
        let o = comet(d.path(), &["train", "--config", "c.txt", "--mode", mode, "--seed", "3", "--out", out, "--no-reference"]);
        assert!(o.status.success(), "{o:?}");
    }
    let b = loss_column(&d.path().join("b.csv"));
    assert!(!b.is_empty());
    assert_eq!(b, loss_column(&d.path().join("i.csv")));
    let o = comet(d.path(), &["analyze", "--in", "b.csv", "i.csv"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("accuracy gap"));
}

#[test]
fn comet_training_writes_plans_and_checkpoint() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.txt"), TINY).unwrap();
    let o = comet(
        d.path(),
        &["train", "--config", "c.txt", "--mode", "comet", "--out", "t.csv", "--plan-out", "p.csv", "--checkpoint", "ck"],
    );
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    assert!(field(&s, "peak_activation_bytes") < field(&s, "baseline_peak_activation_bytes"));
    assert!(d.path().join("ck/params.cmtt").exists());
    let o = comet(d.path(), &["analyze", "--in", "t.csv", "p.csv"]);
    assert!(o.status.success());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.txt"), "warp_factor=9\n").unwrap();
    let o = comet(d.path(), &["train", "--config", "c.txt"]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn divergence_exits_with_three() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.txt"), format!("{TINY}lr=1e30\n")).unwrap();
    let o = comet(d.path(), &["train", "--config", "c.txt", "--mode", "baseline", "--out", "t.csv"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tiny_memory_budget_is_infeasible() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.txt"), format!("{TINY}adaptive_batch=true\nmemory_budget_bytes=1000\n")).unwrap();
    let o = comet(d.path(), &["train", "--config", "c.txt", "--mode", "comet", "--out", "t.csv", "--no-reference"]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");
}
