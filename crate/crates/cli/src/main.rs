use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cyllevy_core::driver::{sample_path, Driver};
use cyllevy_core::integrate::{integrate_step_det, EmpiricalLaw};
use cyllevy_core::linalg::Partition;
use cyllevy_core::rng::module;
use cyllevy_verify::config::GridSpec;
use cyllevy_verify::report::Table;
use cyllevy_verify::{CheckId, CheckOutput, ExperimentConfig, Report, Summary};
use nalgebra::DVector;

const SEED_ENV: &str = "CYLLEVY_SEED";

#[derive(Parser)]
#[command(
    name = "cyllevy",
    version,
    about = "Stochastic integration against cylindrical Levy processes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one verification battery, or `all` of them.
    Verify {
        check: String,
        #[arg(long)]
        config: PathBuf,
        /// Takes precedence over CYLLEVY_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write path tables and empirical laws for the configured driver and integrand.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge every report.json below a directory into one summary.
    Report { dir: PathBuf },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    } else if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v} is not a 64-bit integer"))?;
    }
    Ok(cfg)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_outputs(out: &Path, tables: &[Table], laws: &[(String, EmpiricalLaw)]) -> Result<()> {
    for t in tables {
        write(&out.join("tables").join(format!("{}.csv", t.name)), &t.csv)?;
    }
    if !laws.is_empty() {
        let mut summary = format!("name,{}\n", EmpiricalLaw::CSV_HEADER);
        for (name, law) in laws {
            write(
                &out.join("laws").join(format!("{name}.bin")),
                law.to_bytes(),
            )?;
            let _ = writeln!(summary, "{name},{}", law.summary_csv());
        }
        write(&out.join("tables").join("laws.csv"), summary)?;
    }
    Ok(())
}

fn verify(check: &str, config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let checks: Vec<CheckId> = if check == "all" {
        CheckId::ALL.to_vec()
    } else {
        vec![check.parse()?]
    };
    let cfg = load_config(config, seed)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let start = Instant::now();
    let mut all = CheckOutput::default();
    for id in checks {
        let o = id
            .run(&cfg)
            .with_context(|| format!("check {id} aborted"))?;
        all.rows.extend(o.rows);
        all.tables.extend(o.tables);
        all.laws.extend(o.laws);
    }
    let report = Report {
        checks: all.rows,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        runtime_secs: start.elapsed().as_secs_f64(),
        timestamp_ms: now_ms(),
    };
    for r in &report.checks {
        println!("{}", r.line());
    }
    write(&out.join("report.json"), report.to_json())?;
    write_outputs(&out, &all.tables, &all.laws)?;
    Ok(report.exit_code() as u8)
}

fn simulate(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let cfg = load_config(config, seed)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let driver = cfg
        .driver
        .clone()
        .unwrap_or_else(|| Driver::gaussian(cfg.dims));
    let grid = cfg.grid.clone().unwrap_or_default();
    let GridSpec { horizon, intervals } = grid;
    let partition = Partition::uniform(0.0, horizon, intervals)?;
    let psi = cfg.integrand();
    let phi = psi.on_interval(0).clone();
    let stream = cfg.stream(module::DRIVER);
    let n = cfg.budgets.n_mc;

    let mut csv = String::from("path,");
    let mut terminal = Vec::with_capacity(n);
    for k in 0..n {
        let table = sample_path(&driver, &phi, &partition, stream.child(k as u64))?;
        let body = table.to_csv();
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        if k == 0 {
            let _ = writeln!(csv, "{header}");
        }
        for l in lines {
            let _ = writeln!(csv, "{k},{l}");
        }
        terminal.push(
            table
                .increments
                .iter()
                .fold(DVector::zeros(phi.d_h()), |acc, h| acc + h.coords()),
        );
    }
    write(&out.join("tables").join("paths.csv"), csv)?;
    let laws = vec![
        (
            "terminal".to_string(),
            EmpiricalLaw::new(terminal, phi.d_h(), stream),
        ),
        (
            "integral".to_string(),
            integrate_step_det(
                &psi,
                &driver,
                n.max(cyllevy_core::integrate::MIN_MC),
                cfg.stream(module::INTEGRATE),
            )?,
        ),
    ];
    write_outputs(&out, &[], &laws)?;
    println!(
        "wrote {n} paths and {} laws to {}",
        laws.len(),
        out.display()
    );
    Ok(0)
}

fn find_reports(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, acc)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            acc.push(p);
        }
    }
    Ok(())
}

fn report(dir: &Path) -> Result<u8> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut paths = Vec::new();
    find_reports(dir, &mut paths)?;
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Report::from_json(&text).with_context(|| format!("in {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::merge(&reports);
    write(&dir.join("summary.csv"), summary.to_csv())?;
    write(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    for r in &summary.rows {
        println!(
            "[{}] {} {}",
            r.status.label(),
            r.check,
            &r.config_hash[..r.config_hash.len().min(12)]
        );
    }
    println!(
        "{} reports, {} rows, {} failing",
        reports.len(),
        summary.rows.len(),
        summary.failures()
    );
    Ok(summary.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Verify {
            check,
            config,
            seed,
            out,
        } => verify(&check, &config, seed, out),
        Cmd::Simulate { config, seed, out } => simulate(&config, seed, out),
        Cmd::Report { dir } => report(&dir),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
