use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11
gpu_count = 2
gpu_capacity_bytes = 80_000_000_000

[[models]]
id = "chat"
class = "8b"

[[models]]
id = "code"
class = "3b"

[[trace.synth]]
model = "chat"
segments = [{ start = 0.0, end = 40.0, rate = 4.0 }]
prompt = { median = 512.0, sigma = 0.5, max = 2048 }
output = { median = 64.0, sigma = 0.5, max = 256 }

[[trace.synth]]
model = "code"
segments = [{ start = 0.0, end = 40.0, rate = 2.0 }]
prompt = { median = 1024.0, sigma = 0.5, max = 4096 }
output = { median = 64.0, sigma = 0.5, max = 256 }
"#;

fn gpushare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpushare")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sweep_rows(csv_path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let header = r.headers().unwrap().clone();
    r.records().map(|rec| header.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()).collect()
}

#[test]
fn run_writes_every_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gpushare(&["run", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in gpushare_cli::RUN_FILES {
        let x = fs::read(a.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between identical runs");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(a.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.get("schema_version").is_some());
}

#[test]
fn unknown_model_in_trace_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let trace = dir.path().join("t.jsonl");
    fs::write(&trace, "{\"t\":0.0,\"model\":\"nope\",\"prompt\":10,\"output\":5}\n").unwrap();
    let o = gpushare(&["run", "--config", s(&cfg), "--trace", s(&trace), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));

    let bad = write_config(dir.path(), &format!("{CONFIG}\nmystery = 1\n"));
    assert_eq!(gpushare(&["run", "--config", s(&bad)]).status.code(), Some(2));
}

#[test]
fn gpu_count_sweep_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("sweep.csv");
    let o = gpushare(&[
        "sweep", "--config", s(&cfg), "--out", s(&out), "--axis", "gpu_count",
        "--values", "2,3,4,5,6,7,8", "--policies", "prism,static_partition",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = sweep_rows(&out);
    for model in ["chat", "code"] {
        let n = rows.iter().filter(|r| r["model"] == model).count();
        assert_eq!(n, 14, "{model}");
    }
    assert!(rows.iter().all(|r| r["errors"].is_empty()));
}

#[test]
fn attainment_does_not_drop_as_slos_loosen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("slo.csv");
    let o = gpushare(&[
        "sweep", "--config", s(&cfg), "--out", s(&out), "--axis", "slo_scale",
        "--values", "0.25,0.5,1,2,4", "--policies", "prism,qlm_timeshare",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = sweep_rows(&out);
    let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        let v: f64 = r["axis_value"].parse().unwrap();
        let a: f64 = r["ttft_attainment"].parse().unwrap();
        series.entry((r["policy"].clone(), r["model"].clone())).or_default().push((v, a));
    }
    for (key, mut pts) in series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pts.windows(2) {
            assert!(w[1].1 >= w[0].1, "{key:?}: {pts:?}");
        }
    }
}

#[test]
fn prism_sustains_at_least_the_rate_static_partition_does() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("rate.csv");
    let values = ["0.5", "1", "2", "4", "8"];
    let o = gpushare(&[
        "sweep", "--config", s(&cfg), "--out", s(&out), "--axis", "rate_scale",
        "--values", &values.join(","), "--policies", "prism,static_partition",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = sweep_rows(&out);
    let best = |policy: &str| {
        let mut by_value: BTreeMap<String, f64> = BTreeMap::new();
        for r in rows.iter().filter(|r| r["policy"] == policy) {
            let a: f64 = r["ttft_attainment"].parse().unwrap();
            let e = by_value.entry(r["axis_value"].clone()).or_insert(1.0);
            *e = e.min(a);
        }
        by_value.iter().filter(|(_, &a)| a >= 0.99).map(|(v, _)| v.parse::<f64>().unwrap()).fold(0.0, f64::max)
    };
    assert!(best("prism") >= best("static_partition"), "prism {} static {}", best("prism"), best("static_partition"));
}

#[test]
fn verify_passes_on_a_small_seed() {
    let o = gpushare(&["verify", "--suite", "deadline", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(gpushare(&["verify", "--suite", "bogus"]).status.code(), Some(2));
}
