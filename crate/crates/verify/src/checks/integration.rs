use cyllevy_core::driver::Driver;
use cyllevy_core::integrate::{
    emery_sup_diagnostic, gamma_family_samples, random_gamma_family, randomized_modular,
    sup_gamma_ky_fan, tangent_pair, GammaSearch, Predicate, StepProcess,
};
use cyllevy_core::linalg::{theta, HVec, HsMap, Partition, Space};
use cyllevy_core::modular::{l_of, modular_of, truncation_level, LSearch, StepFunction};
use cyllevy_core::stats::{mean_stderr, percentile, spearman};
use nalgebra::DVector;
use rand::Rng;

use super::{cp_driver, oracle, random_step, row, stream};
use crate::report::Table;
use crate::{CheckId, CheckOutput, CheckRow, ExperimentConfig, Result};

const KY_FAN_TARGET: f64 = 1e-2;
const LAST: u32 = 12;

fn searches(cfg: &ExperimentConfig) -> (LSearch, GammaSearch) {
    let l = LSearch {
        budget: cfg.budgets.l_search,
        seed: cfg.seed,
    };
    let g = GammaSearch {
        budget: cfg.budgets.gamma_search,
        l_search: l,
        ..GammaSearch::default()
    };
    (l, g)
}

fn trend_drivers(cfg: &ExperimentConfig, mut rng: impl Rng) -> Result<Vec<(String, Driver)>> {
    Ok(match &cfg.driver {
        Some(dr) => vec![("config".to_string(), dr.clone())],
        None => vec![
            (
                "compound-poisson".to_string(),
                cp_driver(&mut rng, cfg.dims, 3, 1.2, 0.8)?,
            ),
            (
                "canonical-stable".to_string(),
                Driver::canonical_stable(cfg.dims, 1.2)?,
            ),
        ],
    })
}

/// `psi - psi_n`, where `psi_n` keeps the values of HS norm at most `2^{n/2}`.
fn truncation_tail(psi: &StepFunction, n: u32) -> StepFunction {
    let cap = truncation_level(n);
    let vals = (0..psi.intervals())
        .map(|i| {
            let v = psi.on_interval(i);
            if v.hs_norm() > cap {
                v.clone()
            } else {
                HsMap::zeros(v.d_h(), v.d_g())
            }
        })
        .collect();
    StepFunction::from_intervals(psi.partition().clone(), vals).expect("same partition")
}

/// Scaling `2^{-n} psi_0` and truncation tails of a 32-piece function, `n = 0..=12`.
fn sequences(cfg: &ExperimentConfig, mut rng: impl Rng) -> Vec<(&'static str, Vec<StepFunction>)> {
    let psi0 = cfg.integrand();
    let wide = random_step(&mut rng, cfg.dims, 32, 0.02, 6.0);
    vec![
        (
            "scaling",
            (0..=LAST)
                .map(|n| psi0.scale(2f64.powi(-(n as i32))))
                .collect(),
        ),
        (
            "truncation",
            (0..=LAST).map(|n| truncation_tail(&wide, n)).collect(),
        ),
    ]
}

/// Keeps `v` after a positive first coordinate on the previous interval, `-v/2` otherwise.
fn threshold_process(psi: &StepFunction) -> StepProcess {
    let rules = (0..psi.intervals())
        .map(|i| {
            let v = psi.on_interval(i).clone();
            if i == 0 {
                vec![(Predicate::Always, v)]
            } else {
                let t = |above| Predicate::Threshold {
                    interval: i - 1,
                    coord: 0,
                    level: 0.0,
                    above,
                };
                vec![(t(true), v.clone()), (t(false), v.scale(-0.5))]
            }
        })
        .collect();
    StepProcess::new(psi.partition().clone(), rules).expect("threshold process is adapted")
}

fn trend_row(id: CheckId, name: &str, modular: &[f64], ky: &[f64]) -> Result<CheckRow> {
    let rho = spearman(modular, ky);
    let (m_last, k_last) = (*modular.last().unwrap(), *ky.last().unwrap());
    row(id, name)
        .measure("spearman", rho)
        .measure("modular_last", m_last)
        .measure("ky_fan_last", k_last)
        .tolerance("spearman", 0.9)
        .tolerance("last", KY_FAN_TARGET)
        .judge(
            (rho - 0.9)
                .min(KY_FAN_TARGET - m_last)
                .min(KY_FAN_TARGET - k_last),
        )
        .finite()
}

/// Summary of the independent terms `X_i = psi_i (L(t_i+1) - L(t_i))`:
/// `(||sum E theta(X_i)||, sum E ||theta(X_i)||^2, E[||sum X_i|| ^ 1])`.
fn independent_sum_summary(
    psi: &StepFunction,
    driver: &Driver,
    n_mc: usize,
    s: cyllevy_core::rng::RngStream,
) -> Result<(f64, f64, f64)> {
    let pair = tangent_pair(
        &StepProcess::deterministic(psi),
        driver,
        n_mc,
        s.child(0),
        s.child(1),
    )?;
    let d = psi.d_h();
    let n = pair.replicas() as f64;
    let mut mean_theta = vec![DVector::zeros(d); pair.n_terms];
    let mut sq = 0.0;
    for reps in &pair.x_terms {
        for (i, x) in reps.iter().enumerate() {
            let t = theta(&HVec::from_dvector(Space::H, x.clone())?).into_inner();
            sq += t.norm_squared();
            mean_theta[i] += t;
        }
    }
    let a = mean_theta
        .iter()
        .fold(DVector::zeros(d), |acc, v| acc + v)
        .norm()
        / n;
    let kf: Vec<f64> = pair.x_sum().iter().map(|x| x.norm().min(1.0)).collect();
    Ok((a, sq / n, mean_stderr(&kf).0))
}

pub fn integration_equivalence(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::IntegrationEquivalence;
    let s = stream(cfg, id);
    let (search, gsearch) = searches(cfg);
    let n_mc = cfg.budgets.n_mc;
    let mut out = CheckOutput::default();
    let mut table = Table::new(
        "integration_equivalence",
        "driver,sequence,n,modular,ky_fan,ky_fan_stderr",
    );
    let mut sums = Table::new(
        "independent_sums",
        "driver,sequence,n,theta_mean_norm,theta_energy,ky_fan",
    );
    let mut curve = Vec::new();
    let seqs = sequences(cfg, s.child(0).rng());
    for (di, (name, driver)) in trend_drivers(cfg, s.child(1).rng())?
        .into_iter()
        .enumerate()
    {
        for (si, (label, seq)) in seqs.iter().enumerate() {
            let common = s.child(10 + (di * 2 + si) as u64);
            let mut m = Vec::new();
            let mut k = Vec::new();
            for (n, psi) in seq.iter().enumerate() {
                let mv = modular_of(driver.chars(), psi, &search)?;
                let sup = sup_gamma_ky_fan(
                    &StepProcess::deterministic(psi),
                    &driver,
                    &gsearch,
                    n_mc,
                    common,
                )?;
                let (a, v, kf) = independent_sum_summary(psi, &driver, n_mc, common.child(7))?;
                table.row(&[
                    name.clone(),
                    label.to_string(),
                    n.to_string(),
                    format!("{:e}", mv.total),
                    format!("{:e}", sup.lower),
                    format!("{:e}", sup.stderr),
                ]);
                sums.row(&[
                    name.clone(),
                    label.to_string(),
                    n.to_string(),
                    format!("{a:e}"),
                    format!("{v:e}"),
                    format!("{kf:e}"),
                ]);
                curve.push((a, v, kf));
                m.push(mv.total);
                k.push(sup.lower);
            }
            out.rows
                .push(trend_row(id, &format!("{name}/{label}"), &m, &k)?);
        }
    }
    // empirical epsilon(delta) for sums of independent terms
    let eps = |delta: f64| {
        curve
            .iter()
            .filter(|(a, v, _)| *a < delta && *v < delta)
            .map(|c| c.2)
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (eps(0.1), eps(0.01));
    out.rows.push(
        row(id, "independent-sums")
            .measure("epsilon_0.1", e1)
            .measure("epsilon_0.01", e2)
            .note("empirical epsilon(delta) curve, recorded")
            .judge(e1 - e2)
            .finite()?,
    );
    out.tables.push(table);
    out.tables.push(sums);
    Ok(out)
}

/// Trend test for predictable integrands, randomized modular against sup-Gamma Ky Fan.
pub fn predictable_trend(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::PredictableEquivalence;
    let s = stream(cfg, id);
    let (search, gsearch) = searches(cfg);
    let n_mc = cfg.budgets.n_mc;
    let mut out = CheckOutput::default();
    let mut table = Table::new(
        "predictable_equivalence",
        "driver,sequence,n,randomized_modular,modular_stderr,ky_fan,ky_fan_stderr",
    );
    let seqs = sequences(cfg, s.child(0).rng());
    for (di, (name, driver)) in trend_drivers(cfg, s.child(1).rng())?
        .into_iter()
        .enumerate()
    {
        for (si, (label, seq)) in seqs.iter().enumerate() {
            let common = s.child(10 + (di * 2 + si) as u64);
            let mut m = Vec::new();
            let mut k = Vec::new();
            for (n, psi) in seq.iter().enumerate() {
                let proc = threshold_process(psi);
                let (rm, rse) = randomized_modular(&proc, &driver, &search, n_mc, common.child(0))?;
                let sup = sup_gamma_ky_fan(&proc, &driver, &gsearch, n_mc, common.child(1))?;
                table.row(&[
                    name.clone(),
                    label.to_string(),
                    n.to_string(),
                    format!("{rm:e}"),
                    format!("{rse:e}"),
                    format!("{:e}", sup.lower),
                    format!("{:e}", sup.stderr),
                ]);
                m.push(rm);
                k.push(sup.lower);
            }
            out.rows
                .push(trend_row(id, &format!("{name}/{label}"), &m, &k)?);
        }
    }
    out.tables.push(table);
    Ok(out)
}

pub fn predictable_equivalence(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let mut out = predictable_trend(cfg)?;
    let small = oracle::exhaustive_small_case(cfg)?;
    out.rows.extend(small.rows);
    out.tables.extend(small.tables);
    Ok(out)
}

pub fn supremum_equivalency(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::SupremumEquivalency;
    let s = stream(cfg, id);
    let (search, gsearch) = searches(cfg);
    let d = cfg.dims;
    let mut rng = s.child(0).rng();
    let driver = match &cfg.driver {
        Some(dr) => dr.clone(),
        None => cp_driver(&mut rng, d, 2, 0.8, 3.0)?,
    };
    let psi0 = random_step(&mut rng, d, 4, 0.5, 2.0);
    let mut table = Table::new(
        "supremum_equivalency",
        "n,l_integral,l_gap,sup_ky_fan,sup_stderr,identity_ky_fan,identity_stderr,best",
    );
    let mut lint = Vec::new();
    let mut sup = Vec::new();
    let mut worst_gain = f64::INFINITY;
    for n in 0..=8 {
        let psi = psi0.scale(2f64.powi(-n));
        let lens = psi.partition().lengths();
        let (mut li, mut gap) = (0.0, 0.0);
        for (i, dt) in lens.iter().enumerate() {
            let b = l_of(driver.chars(), psi.on_interval(i), &search)?;
            li += dt * b.lower;
            gap += dt * (b.upper - b.lower);
        }
        let r = sup_gamma_ky_fan(
            &StepProcess::deterministic(&psi),
            &driver,
            &gsearch,
            cfg.budgets.n_mc,
            s.child(1),
        )?;
        let ident = &r.trace[0];
        let pooled = (r.stderr.powi(2) + ident.stderr.powi(2)).sqrt();
        worst_gain = worst_gain.min(r.lower - ident.ky_fan + 3.0 * pooled);
        table.row(&[
            n.to_string(),
            format!("{li:e}"),
            format!("{gap:e}"),
            format!("{:e}", r.lower),
            format!("{:e}", r.stderr),
            format!("{:e}", ident.ky_fan),
            format!("{:e}", ident.stderr),
            r.trace[r.best].label.clone(),
        ]);
        lint.push(li);
        sup.push(r.lower);
    }
    let rho = spearman(&lint, &sup);
    let r = row(id, "")
        .measure("spearman", rho)
        .measure("min_gain_over_identity", worst_gain)
        .tolerance("spearman", 0.9)
        .judge((rho - 0.9).min(worst_gain))
        .finite()?;
    Ok(CheckOutput {
        rows: vec![r],
        tables: vec![table],
        laws: Vec::new(),
    })
}

/// Deterministic, sign-flip and threshold integrands on eight intervals.
fn bound_integrands(d: usize, mut rng: impl Rng) -> Vec<(&'static str, StepProcess)> {
    let psi = random_step(&mut rng, d, 8, 0.3, 1.0);
    vec![
        ("deterministic", StepProcess::deterministic(&psi)),
        ("sign-flip", StepProcess::sign_flip(&psi, 0)),
        ("threshold", threshold_process(&psi)),
    ]
}

pub fn semimartingale_bound(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::SemimartingaleBound;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let driver = match &cfg.driver {
        Some(dr) => dr.clone(),
        None => Driver::sum(&[
            Driver::gaussian(d),
            cp_driver(&mut s.child(0).rng(), d, 3, 1.2, 0.5)?,
        ])?,
    };
    let mut out = CheckOutput::default();
    let mut table = Table::new("semimartingale_bound", "integrand,member,p99");
    for (pi, (label, psi)) in bound_integrands(d, s.child(1).rng())
        .into_iter()
        .enumerate()
    {
        let family = random_gamma_family(psi.partition(), d, driver.d_g(), 400, s.child(2));
        let norms = gamma_family_samples(
            &psi,
            &driver,
            &family,
            cfg.budgets.n_mc,
            s.child(3 + pi as u64),
        )?;
        let per: Vec<f64> = norms.iter().map(|v| percentile(v, 99.0)).collect();
        for (j, p) in per.iter().enumerate() {
            table.row(&[label.to_string(), j.to_string(), format!("{p:e}")]);
        }
        let pooled = |k: usize| percentile(&norms[..k].concat(), 99.0);
        let (p200, p400) = (pooled(200), pooled(400));
        let change = (p400 - p200).abs() / p200;
        let max200 = per[..200].iter().cloned().fold(0.0, f64::max);
        let max400 = per.iter().cloned().fold(0.0, f64::max);
        out.rows.push(
            row(id, label)
                .measure("p99_family_200", p200)
                .measure("p99_family_400", p400)
                .measure("relative_change", change)
                .measure("max_member_p99_200", max200)
                .measure("max_member_p99_400", max400)
                .tolerance("relative_change", 0.05)
                .judge(0.05 - change)
                .finite()?,
        );
    }
    out.tables.push(table);
    Ok(out)
}

/// Small values on eight intervals with a rare large branch after an upward
/// excursion of the first coordinate.
fn dominated_integrand(d: usize, mut rng: impl Rng) -> StepProcess {
    let part = Partition::uniform(0.0, 1.0, 8).expect("eight intervals");
    let rules = (0..8)
        .map(|i| {
            let norm = rng.random_range(0.03..0.1);
            let small = HsMap::random(&mut rng, d, d, norm);
            if i == 0 {
                vec![(Predicate::Always, small)]
            } else {
                let t = |above| Predicate::Threshold {
                    interval: i - 1,
                    coord: 0,
                    level: 1.0,
                    above,
                };
                vec![
                    (t(true), HsMap::random(&mut rng, d, d, 3.0)),
                    (t(false), small),
                ]
            }
        })
        .collect();
    StepProcess::new(part, rules).expect("adapted")
}

/// `Psi_n - Psi` with `Psi_n = Psi 1{||Psi|| <= n} / (1 + 1/n)`.
fn dampened_gap(psi: &StepProcess, n: u32) -> StepProcess {
    let n = n as f64;
    psi.map(|_, _, v| {
        Ok(if v.hs_norm() <= n {
            v.scale(n / (n + 1.0) - 1.0)
        } else {
            v.scale(-1.0)
        })
    })
    .expect("same shape")
}

pub fn dominated_convergence(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::DominatedConvergence;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let (_, gsearch) = searches(cfg);
    let drivers = match &cfg.driver {
        Some(dr) => vec![("config".to_string(), dr.clone())],
        None => vec![
            ("gaussian".to_string(), Driver::gaussian(d)),
            (
                "compound-poisson".to_string(),
                cp_driver(&mut s.child(0).rng(), d, 3, 1.2, 0.5)?,
            ),
        ],
    };
    let psi = dominated_integrand(d, s.child(1).rng());
    let gaps: Vec<StepProcess> = (1..=16).map(|n| dampened_gap(&psi, n)).collect();
    let mut out = CheckOutput::default();
    let mut table = Table::new("dominated_convergence", "driver,n,ky_fan,stderr,emery");
    for (di, (name, driver)) in drivers.iter().enumerate() {
        let common = s.child(2 + di as u64);
        let ky = gaps
            .iter()
            .map(|g| {
                Ok(
                    sup_gamma_ky_fan(g, driver, &gsearch, cfg.budgets.n_mc, common)
                        .map(|r| (r.lower, r.stderr))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let emery = emery_sup_diagnostic(&gaps, driver, &gsearch, cfg.budgets.n_mc, common)?;
        for (n, ((k, se), e)) in ky.iter().zip(&emery).enumerate() {
            table.row(&[
                name.clone(),
                (n + 1).to_string(),
                format!("{k:e}"),
                format!("{se:e}"),
                format!("{e:e}"),
            ]);
        }
        let ns: Vec<f64> = (1..=16).map(f64::from).collect();
        let vals: Vec<f64> = ky.iter().map(|x| x.0).collect();
        let rho = spearman(&ns, &vals);
        let last = *vals.last().unwrap();
        out.rows.push(
            row(id, name)
                .measure("ky_fan_16", last)
                .measure("emery_16", *emery.last().unwrap())
                .measure("spearman_n", rho)
                .tolerance("ky_fan_16", KY_FAN_TARGET)
                .judge(KY_FAN_TARGET - last)
                .finite()?,
        );
    }
    out.tables.push(table);
    Ok(out)
}
