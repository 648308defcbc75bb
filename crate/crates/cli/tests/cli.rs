use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use num_complex::Complex64;

const BIN: &str = env!("CARGO_BIN_EXE_resonance-tracer");

const SQUARE_WELL: &str = r#"
l = 0

[potential]
kind = "square_well"
params = { a = 1.0 }

[grid]
r_end = 1.1
n_points = 2048

[lambda]
min = 0.05
max = 40.0

[[seeds]]
lambda = 5.0
im_k = "auto"
bracket = [0.1, 3.0]

[[seeds]]
lambda = 15.0
im_k = 2.02173

[[seeds]]
lambda = 32.0
im_k = "auto"
bracket = [0.1, 3.0]

[step]
max_steps = 2000

[trace]
im_k_min = -4.5
switched_max_steps = 300
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Value of a `NAME = a+bi` line printed by `solve`.
fn complex_line(text: &str, name: &str) -> Option<Complex64> {
    let prefix = format!("{name} = ");
    let value = text.lines().find_map(|l| l.strip_prefix(&prefix))?;
    let body = value.strip_suffix('i')?;
    let split = (1..body.len())
        .rev()
        .find(|&i| matches!(&body[i..=i], "+" | "-") && !matches!(&body[i - 1..i], "e" | "E"))?;
    Some(Complex64::new(
        body[..split].parse().ok()?,
        body[split..].parse().ok()?,
    ))
}

fn trace_into(dir: &Path, config: &str) -> Output {
    let path = dir.join("study.toml");
    fs::write(&path, config).unwrap();
    let out_dir = dir.join("out");
    Command::new(BIN)
        .args([
            "trace",
            path.to_str().unwrap(),
            "--output",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap()
}

#[test]
fn solve_gaussian_bound_state() {
    let out = run(&[
        "solve",
        "--potential",
        "gaussian",
        "--l",
        "3",
        "--lambda",
        "25",
        "--k",
        "0+0.9343034507i",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let f = complex_line(&stdout(&out), "F").unwrap();
    assert!(f.norm() <= 1e-6, "F = {f}");
}

#[test]
fn solve_free_particle() {
    let out = run(&[
        "solve",
        "--potential",
        "none",
        "--l",
        "0",
        "--lambda",
        "0",
        "--k",
        "1",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let s = complex_line(&text, "S").unwrap();
    assert!((s - 1.0).norm() < 1e-10);
    assert!(text.contains("F = undefined"));
}

#[test]
fn solve_square_well_matches_analytic() {
    let out = run(&[
        "solve",
        "--potential",
        "square_well",
        "--a",
        "1",
        "--l",
        "0",
        "--lambda",
        "5",
        "--k",
        "0.5",
    ]);
    assert!(out.status.success());
    let s = complex_line(&stdout(&out), "S").unwrap();
    let k = Complex64::new(0.5, 0.0);
    let i = Complex64::i();
    let kappa = (k * k + 10.0).sqrt();
    let cot = kappa.cos() / kappa.sin();
    let exact = (-2.0 * i * k).exp() * (kappa * cot + i * k) / (kappa * cot - i * k);
    assert!((s - exact).norm() <= 1e-6 * exact.norm(), "{s} vs {exact}");
}

#[test]
fn solve_prints_fifteen_digits() {
    let out = run(&[
        "solve",
        "--potential",
        "gaussian",
        "--l",
        "0",
        "--lambda",
        "1",
        "--k",
        "0.7-0.1i",
    ]);
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("S = ")).unwrap();
    let mantissa = line[4..].split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').len(), 16, "{line}");
}

#[test]
fn solve_exit_codes() {
    let out = run(&[
        "solve",
        "--potential",
        "gaussian",
        "--l",
        "3",
        "--lambda",
        "25",
        "--k",
        "1+x",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "solve",
        "--potential",
        "gaussian",
        "--l",
        "3",
        "--lambda",
        "25",
        "--k",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(4));
    let out = run(&[
        "solve",
        "--potential",
        "sombrero",
        "--lambda",
        "1",
        "--k",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seeds_reproduce_bound_states() {
    let out = run(&[
        "seeds",
        "--potential",
        "gaussian",
        "--l",
        "3",
        "--lambda",
        "25",
        "188",
        "--bracket",
        "0.1,2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let values: Vec<f64> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert!((values[0] - 0.9343034507).abs() < 1e-6);
    assert!((values[1] - 1.2949212568).abs() < 1e-6);
}

#[test]
fn trace_square_well_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = trace_into(dir.path(), SQUARE_WELL);
    assert!(out.status.success(), "{}", stderr(&out));
    let out_dir = dir.path().join("out");
    for i in 0..3 {
        assert!(out_dir.join(format!("branch_{i}.csv")).is_file());
    }
    assert!(!out_dir.join("branch_3.csv").exists());

    let events: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("events.json")).unwrap()).unwrap();
    let events = events.as_array().unwrap();
    assert_eq!(events.len(), 2);
    for e in events {
        assert!(e["re_k"].as_f64().unwrap().abs() <= 1e-3);
        assert!((e["im_k"].as_f64().unwrap() + 1.0).abs() <= 1e-2);
        assert_eq!(e["tangents_out"].as_array().unwrap().len(), 2);
    }

    let csv = fs::read_to_string(out_dir.join("branch_0.csv")).unwrap();
    assert!(!csv.contains('\r'));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "branch_id,point_index,arclength,re_k,im_k,lambda,residual_norm,det_sign,state_class"
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "0");
    assert_eq!(first[8], "bound");
    assert!((first[4].parse::<f64>().unwrap() - 2.15040).abs() < 1e-4);

    let study: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("study.json")).unwrap()).unwrap();
    assert_eq!(study["config"]["potential"]["kind"], "square_well");
    assert_eq!(study["seeds"].as_array().unwrap().len(), 3);
    assert!(study["failures"].as_array().unwrap().is_empty());
    let ids: Vec<&str> = study["branches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["0", "1", "1.1", "1.2", "2", "2.1", "2.2"]);
}

#[test]
fn trace_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = SQUARE_WELL.replace("max_steps = 2000", "max_steps = 150");
    assert!(trace_into(a.path(), &config).status.success());
    assert!(trace_into(b.path(), &config).status.success());
    for name in [
        "branch_0.csv",
        "branch_1.csv",
        "branch_2.csv",
        "events.json",
        "study.json",
    ] {
        let x = fs::read(a.path().join("out").join(name)).unwrap();
        let y = fs::read(b.path().join("out").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn trace_keeps_failed_seeds_in_study() {
    let dir = tempfile::tempdir().unwrap();
    let config = SQUARE_WELL.replace(
        "bracket = [0.1, 3.0]\n\n[[seeds]]\nlambda = 15.0",
        "bracket = [2.5, 3.0]\n\n[[seeds]]\nlambda = 15.0",
    );
    let out = trace_into(
        dir.path(),
        &config.replace("max_steps = 2000", "max_steps = 50"),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out_dir = dir.path().join("out");
    let study: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("study.json")).unwrap()).unwrap();
    let failures = study["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0]["seed_index"], 0);
    assert!(study["seeds"][0].is_null());
    assert!(!out_dir.join("branch_0.csv").exists());
    assert!(out_dir.join("branch_1.csv").exists());
}

#[test]
fn trace_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let no_seeds: String =
        SQUARE_WELL.split("[[seeds]]").next().unwrap().to_string() + "[step]\nmax_steps = 10\n";
    let out = trace_into(dir.path(), &no_seeds);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no seeds"), "{}", stderr(&out));

    let unknown = SQUARE_WELL.replace("n_points = 2048", "n_points = 2048\nwidth = 3");
    assert_eq!(trace_into(dir.path(), &unknown).status.code(), Some(2));

    let out = run(&["trace", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn output_dir_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = SQUARE_WELL.replace("max_steps = 2000", "max_steps = 20")
        + "\n[output]\ndir = \"results\"\n";
    let path = dir.path().join("study.toml");
    fs::write(&path, config).unwrap();
    let out = run(&["trace", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("results").join("events.json").is_file());
}

#[test]
fn plot_round_trips_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let config = SQUARE_WELL.replace("max_steps = 2000", "max_steps = 400");
    assert!(trace_into(dir.path(), &config).status.success());
    let out_dir = dir.path().join("out");
    let out = run(&["plot", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in [
        "kplane.dat",
        "imk_lambda.dat",
        "rek_lambda.dat",
        "bifurcations.dat",
        "plot.gp",
    ] {
        assert!(out_dir.join(name).is_file(), "{name}");
    }

    let csv = fs::read_to_string(out_dir.join("branch_1.csv")).unwrap();
    let csv_points: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("1,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[3].to_string(), f[4].to_string())
        })
        .collect();
    let kplane = fs::read_to_string(out_dir.join("kplane.dat")).unwrap();
    let block = kplane
        .split("\n\n\n")
        .find(|b| b.lines().any(|l| l == "# branch 1"))
        .unwrap();
    let plot_points: Vec<(String, String)> = block
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let mut f = l.split_whitespace();
            (f.next().unwrap().to_string(), f.next().unwrap().to_string())
        })
        .collect();
    assert_eq!(csv_points, plot_points);

    let marks = fs::read_to_string(out_dir.join("bifurcations.dat")).unwrap();
    assert_eq!(marks.lines().filter(|l| !l.starts_with('#')).count(), 2);
    let script = fs::read_to_string(out_dir.join("plot.gp")).unwrap();
    assert!(script.contains("'kplane.dat' index 0"));
}

#[test]
fn plot_requires_trace_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["plot", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["plot", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn thread_variable() {
    let args = ["solve", "--potential", "none", "--lambda", "0", "--k", "1"];
    let out = Command::new(BIN)
        .args(args)
        .env("RESONANCE_TRACER_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN)
        .args(args)
        .env("RESONANCE_TRACER_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(BIN)
        .args(args)
        .env("RESONANCE_TRACER_THREADS", "0")
        .output()
        .unwrap();
    assert!(out.status.success());
}
