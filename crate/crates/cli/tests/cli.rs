use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cyllevy_core::driver::Driver;
use cyllevy_core::integrate::EmpiricalLaw;
use cyllevy_core::rng::RngStream;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn cyllevy(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cyllevy"));
    cmd.args(args).env_remove("CYLLEVY_SEED");
    if let Some(s) = env_seed {
        cmd.env("CYLLEVY_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, value: serde_json::Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, value.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn driver_json(d: &Driver) -> serde_json::Value {
    serde_json::from_str(&d.to_json()).unwrap()
}

fn simulate(dir: &Path, cfg: serde_json::Value, out: &str) -> Output {
    let c = write_config(dir, cfg);
    let out = dir.join(out);
    cyllevy(
        &["simulate", "--config", &c, "--out", out.to_str().unwrap()],
        None,
    )
}

fn read_report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_byte_identical_for_equal_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        json!({"seed": 42, "dims": 3, "budgets": {"n_mc": 200, "gamma_search": 4, "l_search": 10}});
    for out in ["a", "b"] {
        assert!(simulate(dir.path(), cfg.clone(), out).status.success());
    }
    for f in [
        "tables/paths.csv",
        "laws/terminal.bin",
        "laws/integral.bin",
        "tables/laws.csv",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let other =
        json!({"seed": 43, "dims": 3, "budgets": {"n_mc": 200, "gamma_search": 4, "l_search": 10}});
    assert!(simulate(dir.path(), other, "c").status.success());
    assert_ne!(
        fs::read(dir.path().join("a/laws/terminal.bin")).unwrap(),
        fs::read(dir.path().join("c/laws/terminal.bin")).unwrap()
    );
}

#[test]
fn gaussian_paths_have_one_row_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "seed": 5, "dims": 2, "grid": {"horizon": 2.0, "intervals": 8},
        "budgets": {"n_mc": 1000, "gamma_search": 4, "l_search": 10}
    });
    assert!(simulate(dir.path(), cfg, "o").status.success());
    let csv = fs::read_to_string(dir.path().join("o/tables/paths.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "path,t,x0,x1");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1000 * 8);
    let last: Vec<&str> = rows.last().unwrap().split(',').collect();
    assert_eq!(last[0], "999");
    assert_eq!(last[1].parse::<f64>().unwrap(), 2.0);
    let law = EmpiricalLaw::from_bytes(
        &fs::read(dir.path().join("o/laws/terminal.bin")).unwrap(),
        RngStream::new(0),
    )
    .unwrap();
    assert_eq!((law.len(), law.dim), (1000, 2));
}

/// Chambers-Mallows-Stuck draw of a standard symmetric alpha-stable variable.
fn cms(alpha: f64, rng: &mut impl Rng) -> f64 {
    let v = std::f64::consts::PI * (rng.random::<f64>() - 0.5);
    let w = -(1.0 - rng.random::<f64>()).ln();
    (alpha * v).sin() / v.cos().powf(1.0 / alpha)
        * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn stable_terminal_values_are_heavy_tailed_like_the_reference_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "seed": 8, "dims": 1,
        "driver": driver_json(&Driver::canonical_stable(1, 1.2).unwrap()),
        "integrand": {"family": "constant", "hs_norm": 1.0},
        "budgets": {"n_mc": 4000, "gamma_search": 4, "l_search": 10}
    });
    assert!(simulate(dir.path(), cfg, "o").status.success());
    let law = EmpiricalLaw::from_bytes(
        &fs::read(dir.path().join("o/laws/terminal.bin")).unwrap(),
        RngStream::new(0),
    )
    .unwrap();
    let mut got = law.norms();
    got.sort_by(f64::total_cmp);
    let median = quantile(&got, 0.5);
    assert!(*got.last().unwrap() > 10.0 * median);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut want: Vec<f64> = (0..200_000).map(|_| cms(1.2, &mut rng).abs()).collect();
    want.sort_by(f64::total_cmp);
    // scale-free shape comparison
    for q in [0.75, 0.9, 0.97] {
        let a = quantile(&got, q) / median;
        let b = quantile(&want, q) / quantile(&want, 0.5);
        assert!((a / b - 1.0).abs() < 0.2, "q={q}: {a} vs {b}");
    }
}

#[test]
fn zero_driver_limit_characteristics_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(
        dir.path(),
        json!({
            "seed": 1, "dims": 3, "driver": driver_json(&Driver::zero(3)),
            "budgets": {"n_mc": 1000, "gamma_search": 4, "l_search": 10}
        }),
    );
    let out = dir.path().join("o");
    let o = cyllevy(
        &[
            "verify",
            "limit-characteristics",
            "--config",
            &c,
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = fs::read_to_string(out.join("tables/limit_characteristics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cells: Vec<f64> = line
            .split(',')
            .skip(3)
            .map(|x| x.parse().unwrap())
            .collect();
        assert!(cells.iter().all(|v| *v == 0.0), "{line}");
    }
    let report = read_report(&out.join("report.json"));
    assert_eq!(report["checks"][0]["measured"]["max_final_z"], 0.0);
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(
        dir.path(),
        json!({"seed": 1, "dims": 2, "budgets": {"n_mc": 100, "gamma_search": 4, "l_search": 10}}),
    );
    let run = |flag: Option<&str>, env: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "verify",
            "tangent-laws",
            "--config",
            &c,
            "--out",
            out.to_str().unwrap(),
        ];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        cyllevy(&args, env);
        read_report(&out.join("report.json"))["seed"]
            .as_u64()
            .unwrap()
    };
    assert_eq!(run(None, None, "a"), 1);
    assert_eq!(run(None, Some("7"), "b"), 7);
    assert_eq!(run(Some("9"), Some("7"), "c"), 9);
}

#[test]
fn report_exit_codes_follow_failures() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(
        cyllevy(&["report", empty.to_str().unwrap()], None)
            .status
            .code(),
        Some(0)
    );

    let row = |name: &str, status: &str, margin: f64| {
        json!({
            "name": name, "anchor": "a", "measured": {}, "tolerances": {}, "stderr": {},
            "margin": margin, "status": status
        })
    };
    let runs = dir.path().join("runs");
    for (sub, status, margin) in [("x", "pass", 1.0), ("y", "pass", 1.0), ("z", "fail", -1.0)] {
        let report = json!({
            "checks": [row("modular-growth/gaussian", "pass", 1.0), row(&format!("other/{sub}"), status, margin)],
            "config_hash": "abc", "seed": 1, "runtime_secs": 0.1, "timestamp_ms": 1
        });
        fs::create_dir_all(runs.join(sub)).unwrap();
        fs::write(runs.join(sub).join("report.json"), report.to_string()).unwrap();
    }
    let o = cyllevy(&["report", runs.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(runs.join("summary.json")).unwrap()).unwrap();
    // the shared row appears once per (check, config hash)
    assert_eq!(summary["rows"].as_array().unwrap().len(), 4);

    fs::remove_dir_all(runs.join("z")).unwrap();
    assert_eq!(
        cyllevy(&["report", runs.to_str().unwrap()], None)
            .status
            .code(),
        Some(0)
    );
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), json!({"seed": 1}));
    assert_eq!(
        cyllevy(&["verify", "no-such-check", "--config", &good], None)
            .status
            .code(),
        Some(2)
    );
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"seed": 1, "budgets": {"n_mc": 0, "gamma_search": 1, "l_search": 1}}"#,
    )
    .unwrap();
    let o = cyllevy(
        &["verify", "tangent-laws", "--config", bad.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budgets"));
    let o = cyllevy(&["simulate", "--config", &good], Some("not-a-number"));
    assert_eq!(o.status.code(), Some(2));
}
