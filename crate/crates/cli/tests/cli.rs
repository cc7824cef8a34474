use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn droprate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_droprate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_raw_data(dir: &Path) {
    // Five samples of three features; target is a noisy linear response.
    fs::write(
        dir.join("x.csv"),
        "a,b,c\n1,0,0.5\n0,1,0.2\n1,1,-0.3\n0.5,-1,1\n-1,0.3,0.7\n",
    )
    .unwrap();
    fs::write(dir.join("y.csv"), "target\n1.2\n-0.4\n0.9\n0.1\n-1.3\n").unwrap();
}

const CONFIG: &str = r#"{
  "variant": "dropout",
  "f_list": [2, 3],
  "p_list": [0.5, 0.8],
  "replicates": 2,
  "init": "epsilon:0.001",
  "master_seed": 42,
  "stop": {"grad_tol": 1e-6, "t_max": 100000}
}"#;

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_raw_data(d);
    let yw = d.join("yw.csv");

    let out = droprate(&[
        "ingest",
        "--x",
        p(&d.join("x.csv")),
        "--y",
        p(&d.join("y.csv")),
        "--out",
        p(&yw),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let y = fs::read_to_string(&yw).unwrap();
    let values: Vec<f64> = y.trim().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 3);
    assert!((values.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-14);

    let wstar = d.join("wstar.json");
    let out = droprate(&[
        "minimize",
        "--y",
        p(&yw),
        "--f",
        "3",
        "--p",
        "0.5",
        "--variant",
        "dropout",
        "--out",
        p(&wstar),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&wstar).unwrap()).unwrap();
    assert_eq!(report["rho"], 1);
    assert!(report["certificate"]["grad_norm"].as_f64().unwrap() < 1e-8);

    let traj = d.join("traj.csv");
    let out = droprate(&[
        "run",
        "--y",
        p(&yw),
        "--f",
        "3",
        "--p",
        "0.5",
        "--variant",
        "dropconnect",
        "--init",
        "gaussian:0.1",
        "--eta",
        "0.01",
        "--seed",
        "4",
        "--out",
        p(&traj),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&traj).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,grad_norm,loss,balance_drift");
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert!(last[1].parse::<f64>().unwrap() < 1e-5);

    let cfg = d.join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let results = d.join("results.csv");
    let out = droprate(&[
        "sweep",
        "--config",
        p(&cfg),
        "--y",
        p(&yw),
        "--out",
        p(&results),
        "--jobs",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&results).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "f,p,variant,init,scale,seed,eta,T,terminated_by,beta_hat,a_hat,rss,status"
    );
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert!(d.join("results_cells.csv").exists());

    let fit = d.join("fit.json");
    let out = droprate(&[
        "fit",
        "--in",
        p(&results),
        "--mode",
        "vs_p",
        "--gamma",
        "0.9",
        "--out",
        p(&fit),
    ]);
    // Two p values per width are too few for the three-point minimum.
    assert_eq!(out.status.code(), Some(4));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&fit).unwrap()).unwrap();
    assert_eq!(report["groups"].as_array().unwrap().len(), 2);

    let rates = d.join("rates.csv");
    let out = droprate(&[
        "rates",
        "--y",
        p(&yw),
        "--config",
        p(&cfg),
        "--out",
        p(&rates),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&rates).unwrap();
    assert!(text.starts_with("f,p,omega_explicit,omega_e1,omega_unscaled,omega_numeric,p_star"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn sweep_is_deterministic_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("y.csv"), "0.6,0.8,0.0\n").unwrap();
    let cfg = d.join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let mut outputs = Vec::new();
    for (name, jobs) in [("a.csv", "1"), ("b.csv", "8"), ("c.csv", "8")] {
        let path = d.join(name);
        let out = droprate(&[
            "sweep",
            "--config",
            p(&cfg),
            "--y",
            p(&d.join("y.csv")),
            "--out",
            p(&path),
            "--jobs",
            jobs,
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        outputs.push(fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn fit_vs_f_succeeds_with_enough_widths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv =
        String::from("f,p,variant,init,scale,seed,eta,T,terminated_by,beta_hat,a_hat,rss,status\n");
    for f in [2, 4, 8, 16, 32] {
        let beta = 2.0 * 0.7 * 0.3 / (0.7 * f as f64 + 0.3) * 1e-2;
        csv.push_str(&format!(
            "{f},0.7,dropout,epsilon,1e-4,1,0.01,100,grad_tol,{beta},1,0,ok\n"
        ));
        csv.push_str(&format!(
            "{f},0.7,dropout,epsilon,1e-4,2,0.01,100,grad_tol,-1,1,0,ok\n"
        ));
    }
    fs::write(d.join("r.csv"), csv).unwrap();
    let out = droprate(&[
        "fit",
        "--in",
        p(&d.join("r.csv")),
        "--mode",
        "vs_f",
        "--out",
        p(&d.join("fit.json")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("fit.json")).unwrap()).unwrap();
    let alpha = report["groups"][0]["fit"]["alpha"].as_f64().unwrap();
    assert!((alpha - 1.0).abs() < 1e-3, "{alpha}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    fs::write(d.join("bad.json"), r#"{"variant": "dropout"}"#).unwrap();
    fs::write(d.join("y.csv"), "1,0\n0,0.5\n").unwrap();
    let out = droprate(&[
        "sweep",
        "--config",
        p(&d.join("bad.json")),
        "--y",
        p(&d.join("y.csv")),
        "--out",
        p(&d.join("o.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("ragged.csv"), "1,2\n3\n").unwrap();
    let out = droprate(&[
        "minimize",
        "--y",
        p(&d.join("ragged.csv")),
        "--f",
        "2",
        "--p",
        "0.5",
        "--variant",
        "dropout",
        "--out",
        p(&d.join("w.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    fs::write(d.join("x.csv"), "1,2\n2,4\n3,6\n").unwrap();
    fs::write(d.join("t.csv"), "1\n2\n3\n").unwrap();
    let out = droprate(&[
        "ingest",
        "--x",
        p(&d.join("x.csv")),
        "--y",
        p(&d.join("t.csv")),
        "--out",
        p(&d.join("o.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = droprate(&[
        "run",
        "--y",
        p(&d.join("y.csv")),
        "--f",
        "2",
        "--p",
        "0.5",
        "--variant",
        "dropout",
        "--init",
        "gaussian:1",
        "--eta",
        "100",
        "--out",
        p(&d.join("t.csv")),
    ]);
    assert_eq!(out.status.code(), Some(4));

    let out = droprate(&[
        "run",
        "--y",
        p(&d.join("y.csv")),
        "--f",
        "2",
        "--p",
        "1.5",
        "--variant",
        "dropout",
        "--init",
        "gaussian:1",
        "--out",
        p(&d.join("t.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = droprate(&[
        "fit",
        "--in",
        p(&d.join("y.csv")),
        "--mode",
        "sideways",
        "--out",
        p(&d.join("f.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
