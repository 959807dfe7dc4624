use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnvecchia"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(&[], d)), 2);
    assert_eq!(code(&run(&["frobnicate"], d)), 2);
    assert_eq!(code(&run(&["simulate", "--n", "0", "--out", "a.csv"], d)), 2);
    assert_eq!(code(&run(&["simulate", "--n", "10", "--theta", "0.1,1.5", "--out", "a.csv"], d)), 2);
    assert_eq!(code(&run(&["simulate", "--n", "10", "--theta", "0.5,1.5,0.9", "--out", "a.csv"], d)), 2);
    assert_eq!(code(&run(&["--threads", "0", "simulate", "--n", "10", "--out", "a.csv"], d)), 2);

    let o = run(&["train-surrogate", "--out", "missing/bank.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));

    fs::write(d.join("s.csv"), "x,y,z\n0.1,0.1,1\n0.9,0.9,2\n0.5,0.2,0\n").unwrap();
    assert_eq!(code(&run(&["fit", "--data", "s.csv", "--out", "f"], d)), 2);
    assert_eq!(code(&run(&["fit", "--data", "s.csv", "--out", "f", "--exact", "--holdout", "1.5"], d)), 2);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.csv"), "x,y,z\n0.1,0.1,1\n0.9,oops,2\n").unwrap();
    let o = run(&["fit", "--data", "bad.csv", "--exact", "--out", "f"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    fs::write(d.join("far.csv"), "x,y,z\n10,0.1,1\n0.9,0.5,2\n0.2,0.3,0.5\n").unwrap();
    let o = run(&["fit", "--data", "far.csv", "--exact", "--mode", "mle", "--out", "f"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--lonlat"), "{}", stderr(&o));

    let o = run(&["fit", "--data", "nope.csv", "--exact", "--out", "f"], d);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.csv", "b.csv"] {
        let o = run(&["simulate", "--n", "150", "--seed", "9", "--out", name], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = run(&["simulate", "--n", "150", "--seed", "10", "--out", "c.csv"], d);
    assert_eq!(code(&o), 0);
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    assert_ne!(a, fs::read_to_string(d.join("c.csv")).unwrap());
    assert_eq!(a.lines().count(), 151);
    assert!(a.starts_with("x,y,z\n"));
    assert!(d.join("a.csv.config.json").exists());
}

#[test]
fn train_surrogate_dry_run_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = ["train-surrogate", "--m", "4", "--replicates", "1", "--n-min", "120", "--n-max", "150", "--epochs", "1"];
    let o = run(&[&small[..], &["--out", "x.json", "--dry-run"]].concat(), d);
    assert_eq!(code(&o), 0);
    let cfg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["config"]["data"]["replicates"], 1);
    assert!(!d.join("x.json").exists());

    for name in ["b1.json", "b2.json"] {
        let o = run(&["--threads", "1"].iter().chain(&small).chain(&["--out", name]).copied().collect::<Vec<_>>(), d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(d.join("b1.json")).unwrap(), fs::read(d.join("b2.json")).unwrap());
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect()).collect();
    (header, rows)
}

#[test]
fn fit_and_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(&["simulate", "--n", "300", "--seed", "4", "--mu", "5", "--sigma2", "4", "--out", "s.csv"], d);
    assert_eq!(code(&o), 0);

    let o = run(&["fit", "--data", "s.csv", "--exact", "--mode", "mle", "--m", "8", "--holdout", "0.1", "--out", "mle"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let est: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("mle/estimate.json")).unwrap()).unwrap();
    assert!(est["converged"].as_bool().unwrap());
    let (_, test) = read_csv(&d.join("mle/test.csv"));
    let (_, train) = read_csv(&d.join("mle/train.csv"));
    assert_eq!((train.len(), test.len()), (270, 30));

    let o = run(&["predict", "--train", "mle/train.csv", "--test", "mle/test.csv", "--fit", "mle", "--out", "p.csv"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, pred) = read_csv(&d.join("p.csv"));
    assert_eq!(header, ["x", "y", "mean", "variance"]);
    assert_eq!(pred.len(), 30);
    let mse = pred.iter().zip(&test).map(|(p, t)| (p[2] - t[2]).powi(2)).sum::<f64>() / 30.0;
    let var_z = {
        let mean = test.iter().map(|t| t[2]).sum::<f64>() / 30.0;
        test.iter().map(|t| (t[2] - mean).powi(2)).sum::<f64>() / 29.0
    };
    // Back on the data scale, and better than a constant.
    assert!(pred.iter().all(|p| p[3] > 0.0 && p[3] < 8.0));
    assert!(mse < var_z, "mse {mse} vs variance {var_z}");

    let o = run(
        &["fit", "--data", "mle/train.csv", "--exact", "--m", "8", "--iterations", "150", "--burn-in", "50", "--out", "mc"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, chain) = read_csv(&d.join("mc/chain.csv"));
    assert_eq!(&header[..4], ["iteration", "phi", "nu", "r"]);
    assert_eq!(chain.len(), 150);
    let o = run(
        &["predict", "--train", "mle/train.csv", "--test", "mle/test.csv", "--fit", "mc", "--stride", "25", "--out", "q.csv"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, pred) = read_csv(&d.join("q.csv"));
    assert_eq!(header, ["x", "y", "mean", "variance", "q025", "q975"]);
    assert!(pred.iter().all(|p| p[4] < p[2] && p[2] < p[5]));

    fs::write(d.join("empty.csv"), "x,y\n").unwrap();
    let o = run(&["predict", "--train", "mle/train.csv", "--test", "empty.csv", "--fit", "mle", "--out", "e.csv"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("e.csv")).unwrap().trim(), "x,y,mean,variance");

    fs::remove_file(d.join("mle/standardization.json")).unwrap();
    let o = run(&["predict", "--train", "mle/train.csv", "--test", "mle/test.csv", "--fit", "mle", "--out", "p.csv"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("standardization"));
}

#[test]
fn covariates_are_regressed_out_and_restored() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(&["simulate", "--n", "200", "--seed", "2", "--out", "s.csv"], d)), 0);
    let (_, rows) = read_csv(&d.join("s.csv"));
    let mut text = String::from("x,y,z,elev\n");
    let mut test = String::from("x,y,elev\n");
    for (i, r) in rows.iter().enumerate() {
        let elev = (i % 7) as f64;
        let line = format!("{},{},{},{elev}\n", 100.0 + 10.0 * r[0], 40.0 + 5.0 * r[1], r[2] + 3.0 * elev);
        text.push_str(&line);
        if i < 5 {
            test.push_str(&format!("{},{},{elev}\n", 100.0 + 10.0 * r[0], 40.0 + 5.0 * r[1]));
        }
    }
    fs::write(d.join("raw.csv"), text).unwrap();
    fs::write(d.join("t.csv"), test).unwrap();
    let o = run(&["fit", "--data", "raw.csv", "--exact", "--mode", "mle", "--m", "8", "--out", "f"], d);
    assert_eq!(code(&o), 1, "raw coordinates need --lonlat");
    let o = run(&["fit", "--data", "raw.csv", "--exact", "--mode", "mle", "--m", "8", "--lonlat", "--out", "f"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let st: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("f/standardization.json")).unwrap()).unwrap();
    let slope = st["trend"][1].as_f64().unwrap();
    assert!((slope - 3.0).abs() < 0.5, "slope {slope}");
    let o = run(&["predict", "--train", "raw.csv", "--test", "t.csv", "--fit", "f", "--out", "p.csv"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, pred) = read_csv(&d.join("p.csv"));
    // Training sites come back with their observed value.
    for (i, (p, r)) in pred.iter().zip(&rows).enumerate() {
        let elev = (i % 7) as f64;
        assert!((p[2] - (r[2] + 3.0 * elev)).abs() < 1e-8, "{} vs {}", p[2], r[2] + 3.0 * elev);
        assert!(p[0] > 99.0, "raw coordinates echoed");
    }
}
