use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gkde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gkde"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn field(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
        .to_string()
}

const SMALL: &[&str] = &["--embed-dim", "6", "--anchors-per-class", "60", "--hidden", "12"];

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let csv = format!("{name}.csv");
        let part = format!("{name}.json");
        ok(&gkde(dir.path(), &["gen-data", "--tasks", "3", "--dim", "4", "--seed", "7", "--out", &csv, "--partition", &part]));
    }
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.json"), read("b.json"));
    let text = String::from_utf8(read("a.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "f0,f1,f2,f3,label");
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 100);
}

#[test]
fn zero_separation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = gkde(dir.path(), &["gen-data", "--sep", "0", "--out", "x.csv", "--partition", "x.json"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"bandwidth": "wide"}"#).unwrap();
    let out = gkde(dir.path(), &["train", "--config", "c.json", "--bank", "b", "--metrics", "m.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bandwidth"));

    let out = gkde(dir.path(), &["train", "--embed-dim", "0", "--bank", "b", "--metrics", "m.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("embed_dim"));
}

#[test]
fn train_eval_and_predict_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&gkde(d, &["gen-data", "--tasks", "3", "--dim", "5", "--seed", "2", "--out", "d.csv", "--partition", "p.json"]));
    let mut args = vec!["train", "--data", "d.csv", "--partition", "p.json", "--bank", "bank", "--metrics", "m.csv"];
    args.extend_from_slice(SMALL);
    ok(&gkde(d, &args));
    assert!(d.join("bank/task_000003.bin").exists());
    let metrics = fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "task,tp_acc,wp_acc,overall_acc");
    assert_eq!(metrics.lines().count(), 4);

    ok(&gkde(d, &["eval", "--data", "d.csv", "--partition", "p.json", "--bank", "bank", "--metrics", "e.csv"]));
    assert_eq!(fs::read_to_string(d.join("e.csv")).unwrap(), metrics);

    // predict on a training row of each task should answer with a label of that task
    let text = fs::read_to_string(d.join("d.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    for row in [rows[0], rows[rows.len() / 2], rows[rows.len() - 1]] {
        let (features, label) = row.rsplit_once(',').unwrap();
        let input = format!("--input={features}");
        let out = gkde(d, &["predict", "--bank", "bank", &input]);
        ok(&out);
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert_eq!(field(&stdout, "class_label"), label);
        let tp: f64 = field(&stdout, "tp_probability").parse().unwrap();
        let wp: f64 = field(&stdout, "wp_posterior").parse().unwrap();
        let log: f64 = field(&stdout, "combined_log_prob").parse().unwrap();
        assert!((log.exp() - tp * wp).abs() < 1e-12);
    }
}

#[test]
fn single_task_bank_is_certain_about_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--tasks", "1", "--input-dim", "3", "--bank", "bank", "--metrics", "m.csv"];
    args.extend_from_slice(SMALL);
    ok(&gkde(dir.path(), &args));
    let out = gkde(dir.path(), &["predict", "--bank", "bank", "--input", "0.5,-1,2"]);
    ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(field(&stdout, "task_id"), "1");
    assert_eq!(field(&stdout, "tp_probability"), "1.0");
}

#[test]
fn predict_rejects_wrong_width() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--tasks", "1", "--input-dim", "3", "--bank", "bank", "--metrics", "m.csv"];
    args.extend_from_slice(SMALL);
    ok(&gkde(dir.path(), &args));
    let out = gkde(dir.path(), &["predict", "--bank", "bank", "--input", "1,2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "analyze", "--bandwidths", "0.1,0.3,5", "--sample-sizes", "200,400", "--replications", "100", "--out", out,
        ]
    };
    ok(&gkde(dir.path(), &args("a.csv")));
    ok(&gkde(dir.path(), &args("b.csv")));
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    let rows: Vec<&str> = a.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        let h: f64 = cols[1].parse().unwrap();
        if h == 5.0 {
            assert_eq!(cols[8], "false", "{r}");
        }
        if h == 0.3 {
            assert_eq!(cols[8], "true", "{r}");
        }
    }
}
