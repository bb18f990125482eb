use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmd"))
        .args(args)
        .env("TMD_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = tmd(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
    /// Small labeled data and a quickly trained bundle with a head.
    fn trained(&self) -> (PathBuf, PathBuf) {
        let data = self.p("d.tmde");
        let bundle = self.p("m.tmdb");
        let headed = self.p("h.tmdb");
        ok(&["synth", "--clusters", "3", "--dim", "6", "--per", "20", "--seed", "3", "--out", s(&data)]);
        ok(&[
            "train", "--data", s(&data), "--epochs", "2", "--codes", "3", "--latent-dim", "2", "--batch-size", "8",
            "--widths", "8,8", "--probe-size", "6", "--out", s(&bundle),
        ]);
        ok(&["train-head", "--bundle", s(&bundle), "--data", s(&data), "--epochs", "50", "--out", s(&headed)]);
        (data, headed)
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = tmd(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(tmd(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    assert_eq!(tmd(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_failures_exit_1() {
    let f = Fixture::new();
    let o = tmd(&["eval", "--bundle", s(&f.p("missing.tmdb")), "--data", s(&f.p("missing.tmde"))]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = f.p("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 1}}"#).unwrap();
    let o = tmd(&["--config", s(&cfg), "synth", "--out", s(&f.p("x.tmde"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_2() {
    let f = Fixture::new();
    let data = f.p("d.tmde");
    ok(&["synth", "--clusters", "2", "--dim", "4", "--per", "10", "--out", s(&data)]);
    let o = tmd(&[
        "train", "--data", s(&data), "--epochs", "3", "--codes", "2", "--latent-dim", "2", "--lr-g", "1e300",
        "--lr-d", "1e300", "--probe-size", "0", "--out", s(&f.p("m.tmdb")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn one_epoch_on_ten_rows_yields_a_bundle() {
    let f = Fixture::new();
    let data = f.p("d.tmde");
    let bundle = f.p("m.tmdb");
    ok(&["synth", "--clusters", "2", "--dim", "4", "--per", "5", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--epochs", "1", "--probe-size", "0", "--out", s(&bundle)]);
    let b = tmd::tmdb::read(&bundle).unwrap();
    assert!(b.scaler.is_some());
    let report = std::fs::read_to_string(f.p("m.tmdb.report.csv")).unwrap();
    assert!(report.starts_with("epoch,gan_value,info,prior_loss,probe,d_steps,g_steps,clamped\n"));
    assert_eq!(report.lines().count(), 2);
}

#[test]
fn config_file_and_flags_layer_in_order() {
    let f = Fixture::new();
    let cfg = f.p("c.json");
    std::fs::write(&cfg, r#"{"synth": {"clusters": 2, "dim": 3, "per": 4}}"#).unwrap();
    let data = f.p("d.tmde");
    ok(&["--config", s(&cfg), "synth", "--per", "6", "--out", s(&data)]);
    let ds = tmd::tmde::read(&data).unwrap();
    assert_eq!((ds.n(), ds.dim()), (12, 3));
}

#[test]
fn projection_outputs_and_csv_schema() {
    let f = Fixture::new();
    let (data, bundle) = f.trained();
    let proj = f.p("p.tmde");
    let csv = f.p("p.csv");
    ok(&["project", "--bundle", s(&bundle), "--data", s(&data), "--k", "5", "--csv", s(&csv), "--out", s(&proj)]);
    let p = tmd::tmde::read(&proj).unwrap();
    assert!(p.is_scaled());
    assert_eq!(p.n(), 60);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("row,code,distance_scaled\n"));
    assert_eq!(text.lines().count(), 61);

    let raw = f.p("r.tmde");
    ok(&["project", "--bundle", s(&bundle), "--data", s(&data), "--space", "raw", "--out", s(&raw)]);
    assert!(!tmd::tmde::read(&raw).unwrap().is_scaled());

    let gd = f.p("g.tmde");
    ok(&["project", "--bundle", s(&bundle), "--data", s(&data), "--gd", "--gd-steps", "3", "--out", s(&gd)]);

    let d = ok(&["distance", "--bundle", s(&bundle), "--data", s(&data), "--space", "raw"]);
    assert!(String::from_utf8(d.stdout).unwrap().starts_with("row,code,distance_raw\n"));
}

#[test]
fn identical_clean_and_aug_sections_match() {
    let f = Fixture::new();
    let (data, bundle) = f.trained();
    let o = ok(&["report-distances", "--bundle", s(&bundle), "--clean", s(&data), "--aug", s(&data)]);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let strip = |name: &str| -> Vec<String> {
        rows.iter()
            .filter(|r| r.split(',').nth(1) == Some(name))
            .map(|r| r.replacen(name, "", 1))
            .collect()
    };
    let (clean, aug) = (strip("clean"), strip("aug"));
    assert_eq!(clean.len(), 1 + 64);
    assert_eq!(clean, aug);

    let single = ok(&["report-distances", "--bundle", s(&bundle), "--clean", s(&data)]);
    assert_eq!(String::from_utf8(single.stdout).unwrap().lines().count(), 1 + 1 + 64);
}

#[test]
fn sweep_k_rows_follow_the_list() {
    let f = Fixture::new();
    let (data, bundle) = f.trained();
    let one = ok(&["sweep-k", "--bundle", s(&bundle), "--data", s(&data), "--ks", "1"]);
    assert_eq!(String::from_utf8(one.stdout).unwrap().lines().count(), 2);
    let o = ok(&["sweep-k", "--bundle", s(&bundle), "--data", s(&data), "--ks", "5,5,25"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,median_distance,defended_accuracy");
    assert_eq!(lines[1], lines[2]);
    let med = |l: &str| l.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(med(lines[3]) <= med(lines[2]));
    assert_eq!(tmd(&["sweep-k", "--bundle", s(&bundle), "--data", s(&data), "--ks", "5,1"]).status.code(), Some(1));
}

#[test]
fn eval_reports_both_accuracies() {
    let f = Fixture::new();
    let (data, bundle) = f.trained();
    let o = ok(&["eval", "--bundle", s(&bundle), "--data", s(&data)]);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,undefended_accuracy,defended_accuracy"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 60.0);
    assert!((0.0..=1.0).contains(&row[1]) && (0.0..=1.0).contains(&row[2]));
}

#[test]
fn baseline_compare_echo_and_determinism() {
    let f = Fixture::new();
    let data = f.p("d.tmde");
    ok(&["synth", "--clusters", "2", "--dim", "4", "--per", "15", "--out", s(&data)]);
    let run = |out: &Path| {
        ok(&[
            "baseline-compare", "--data", s(&data), "--seeds", "7", "--epochs", "2", "--codes", "2", "--latent-dim",
            "2", "--widths", "6,6", "--probe-size", "6", "--head-epochs", "20", "--seed", "7", "--out", s(out),
        ]);
        std::fs::read(out).unwrap()
    };
    let a = run(&f.p("a.csv"));
    let b = run(&f.p("b.csv"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("variant,seed,rl,cln,aua,error\n"));
    assert!(text.contains("\nconnected,median,"));
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(f.p("a.csv.config.json")).unwrap()).unwrap();
    assert!(echo["connected"]["train"].get("codes").is_none());
    assert_eq!(echo["disconnected"]["train"]["codes"], 2);
}
