use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sindy-soh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path) {
    let out = run(&[
        "simulate",
        "--cells",
        "3",
        "--cycles",
        "40",
        "--dt",
        "5",
        "--seed",
        "7",
        "--out",
        p(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn help_and_usage_errors() {
    for sub in [
        "simulate",
        "ingest",
        "features",
        "correlate",
        "train",
        "estimate",
        "evaluate",
        "bench",
    ] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert_eq!(code(&run(&[])), 1);
    let out = run(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--data") && stderr(&out).contains("Usage"));
    let out = run(&["train", "--data", "x", "--out", "y", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--bogus"));
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn simulate_train_estimate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data);
    for name in ["cell1.csv", "cell2.csv", "cell3.csv", "ground_truth.csv"] {
        assert!(data.join(name).is_file(), "{name}");
    }

    let model = dir.path().join("model.sindy-soh.json");
    let out = run(&["train", "--data", p(&data), "--holdout", "cell3", "--out", p(&model)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("active terms"));

    let est = dir.path().join("est.csv");
    let out = run(&[
        "estimate",
        "--model",
        p(&model),
        "--data",
        p(&data.join("cell3.csv")),
        "--out",
        p(&est),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&est).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("cell_id,cycle_index,soh_est_pct"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.starts_with("cell3,")));

    let report = dir.path().join("eval.json");
    let out = run(&[
        "evaluate",
        "--data",
        p(&data),
        "--holdout",
        "cell3",
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("ground truth") && table.contains("SINDy") && table.contains("Kernel"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for r in json["results"].as_array().unwrap() {
        let m = &r["metrics"];
        let (mae, rmse, max) = (
            m["mae"].as_f64().unwrap(),
            m["rmse"].as_f64().unwrap(),
            m["max_err"].as_f64().unwrap(),
        );
        assert!(mae <= rmse && rmse <= max);
    }
}

#[test]
fn data_stage_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data);
    let labels = dir.path().join("labels.csv");
    assert_eq!(code(&run(&["ingest", "--data", p(&data), "--out", p(&labels)])), 0);
    let text = std::fs::read_to_string(&labels).unwrap();
    assert!(text.starts_with("cell_id,cycle_index,capacity_Ah,"));
    assert_eq!(text.lines().count(), 121);

    let features = run(&["features", "--data", p(&data.join("cell1.csv"))]);
    assert_eq!(code(&features), 0);
    let text = String::from_utf8(features.stdout).unwrap();
    assert!(text.starts_with("cell_id,cycle_index,mu,sigma,skew,kur,delta_i,c_cv,t_dur,soh_pct\n"));
    assert_eq!(text.lines().count(), 41);

    let out = run(&["correlate", "--data", p(&data), "--holdout", "cell3"]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rho = report["rho"].as_object().unwrap();
    assert_eq!(rho.len(), 7);
    let mut passing: Vec<&str> = rho
        .iter()
        .filter(|(_, r)| r.as_f64().unwrap().abs() >= 0.8)
        .map(|(n, _)| n.as_str())
        .collect();
    let mut selected: Vec<&str> = report["selected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    passing.sort_unstable();
    selected.sort_unstable();
    assert_eq!(selected, passing);
    assert_eq!(code(&run(&["correlate", "--data", p(&data), "--gate", "1.5"])), 1);
}

#[test]
fn outputs_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&a);
    simulate(&b);
    for name in ["cell1.csv", "ground_truth.csv"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
    let models: Vec<Vec<u8>> = ["m1", "m2"]
        .iter()
        .map(|m| {
            let path = dir.path().join(format!("{m}.sindy-soh.json"));
            assert_eq!(code(&run(&["train", "--data", p(&a), "--out", p(&path)])), 0);
            std::fs::read(path).unwrap()
        })
        .collect();
    assert_eq!(models[0], models[1]);
}

#[test]
fn bench_prints_tables_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let out = run(&[
        "bench",
        "--train-rows",
        "120",
        "--test-rows",
        "30",
        "--repetitions",
        "3",
        "--seed",
        "3",
        "--out",
        p(&json),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "MAE",
        "MAX",
        "RMSE",
        "Train Time (s)",
        "Test Time (ms per sample)",
        "SINDy",
        "Ridge",
        "Kernel",
    ] {
        assert!(stdout.contains(needle), "{needle} missing from\n{stdout}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report["timing"].as_array().unwrap().len(), 3);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data);

    let missing = run(&[
        "estimate",
        "--model",
        p(&dir.path().join("none.json")),
        "--data",
        p(&data),
    ]);
    assert_eq!(code(&missing), 2);

    let model = dir.path().join("m.sindy-soh.json");
    assert_eq!(code(&run(&["train", "--data", p(&data), "--out", p(&model)])), 0);
    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    value["model"].as_object_mut().unwrap().remove("coefficients");
    let broken = dir.path().join("broken.sindy-soh.json");
    std::fs::write(&broken, value.to_string()).unwrap();
    let out = run(&["estimate", "--model", p(&broken), "--data", p(&data)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("schema"));

    let out = run(&["train", "--data", p(&data), "--out", p(&model), "--threshold", "1e9"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let garbage = dir.path().join("garbage.csv");
    std::fs::write(
        &garbage,
        "cell_id,cycle_index,time_s,voltage_V,current_A\ncell1,0,0,abc,1\n",
    )
    .unwrap();
    let out = run(&["features", "--data", p(&garbage)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"library_degree": 0}"#).unwrap();
    assert_eq!(
        code(&run(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&model),
            "--config",
            p(&config)
        ])),
        1
    );
}
