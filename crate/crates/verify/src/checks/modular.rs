use cyllevy_core::characteristics::LevyMeasureRep;
use cyllevy_core::driver::Driver;
use cyllevy_core::linalg::{haar_orthogonal, HsMap, Partition};
use cyllevy_core::modular::{k_of, metrize, modular_of, LSearch, MetrizationParams, StepFunction};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use super::{cp_driver, driver_kinds, random_step, row, stream};
use crate::report::Table;
use crate::{CheckId, CheckOutput, ExperimentConfig, Result};

fn l_search(cfg: &ExperimentConfig) -> LSearch {
    LSearch {
        budget: cfg.budgets.l_search,
        seed: cfg.seed,
    }
}

pub fn modular_growth(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::ModularGrowth;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let search = l_search(cfg);
    let mut out = CheckOutput::default();
    let mut table = Table::new("modular_growth", "driver,pair,m1,m2,m_sum,ratio");
    for (di, (name, driver)) in driver_kinds(cfg, s.child(0))?.into_iter().enumerate() {
        let mut rng = s.child(1 + di as u64).rng();
        let pairs: Vec<(StepFunction, StepFunction)> = (0..200)
            .map(|_| {
                let p1 = rng.random_range(1..=4);
                let p2 = rng.random_range(1..=4);
                (
                    random_step(&mut rng, d, p1, 0.05, 20.0),
                    random_step(&mut rng, d, p2, 0.05, 20.0),
                )
            })
            .collect();
        let vals = pairs
            .par_iter()
            .map(|(a, b)| {
                let m1 = modular_of(driver.chars(), a, &search)?;
                let m2 = modular_of(driver.chars(), b, &search)?;
                let m12 = modular_of(driver.chars(), &a.add(b)?, &search)?;
                Ok((m1, m2, m12))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut margin = f64::INFINITY;
        let mut worst_ratio: f64 = 0.0;
        let mut violations = 0;
        for (i, (m1, m2, m12)) in vals.iter().enumerate() {
            let slack = 3.0 * (m12.stderr + 4.0 * (m1.stderr + m2.stderr));
            let room = 4.0 * (m1.total + m2.total) + slack - m12.total;
            if room < 0.0 {
                violations += 1;
            }
            margin = margin.min(room);
            let ratio = m12.total / (m1.total + m2.total);
            worst_ratio = worst_ratio.max(ratio);
            table.row(&[
                name.clone(),
                i.to_string(),
                format!("{:e}", m1.total),
                format!("{:e}", m2.total),
                format!("{:e}", m12.total),
                format!("{ratio:e}"),
            ]);
        }
        out.rows.push(
            row(id, &name)
                .measure("max_ratio", worst_ratio)
                .measure("violations", violations as f64)
                .tolerance("ratio", 4.0)
                .judge(margin)
                .finite()?,
        );
    }
    out.tables.push(table);
    Ok(out)
}

pub fn metrization_sandwich(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::MetrizationSandwich;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let search = l_search(cfg);
    let params = MetrizationParams::default();
    let drivers = match &cfg.driver {
        Some(dr) => vec![("config".to_string(), dr.clone())],
        None => vec![
            (
                "compound-poisson".to_string(),
                cp_driver(&mut s.child(0).rng(), d, 3, 1.2, 0.5)?,
            ),
            (
                "canonical-stable".to_string(),
                Driver::canonical_stable(d, 1.2)?,
            ),
        ],
    };
    let mut out = CheckOutput::default();
    let mut table = Table::new("metrization_sandwich", "driver,set,i,j,m,m_pow,d");
    for (di, (name, driver)) in drivers.iter().enumerate() {
        let mut rng = s.child(1 + di as u64).rng();
        let mut violations = 0;
        let mut slack = f64::INFINITY;
        for set in 0..20 {
            let values: Vec<StepFunction> = (0..6)
                .map(|_| {
                    let p = rng.random_range(1..=4);
                    random_step(&mut rng, d, p, 0.05, 5.0)
                })
                .collect();
            let m = metrize(&values, driver.chars(), &params, &search)?;
            violations += m.violations.len();
            for i in 0..6 {
                for j in i + 1..6 {
                    let (mp, dd) = (m.m_pow[(i, j)], m.d[(i, j)]);
                    if mp > 0.0 {
                        slack = slack.min((2.0 * dd - mp) / mp);
                    }
                    table.row(&[
                        name.clone(),
                        set.to_string(),
                        i.to_string(),
                        j.to_string(),
                        format!("{:e}", m.m[(i, j)]),
                        format!("{mp:e}"),
                        format!("{dd:e}"),
                    ]);
                }
            }
        }
        let margin = if violations > 0 {
            -(violations as f64)
        } else {
            slack.max(0.0)
        };
        out.rows.push(
            row(id, name)
                .measure("violations", violations as f64)
                .measure("min_relative_upper_slack", slack)
                .measure("p", params.p)
                .tolerance("violations", 0.0)
                .judge(margin)
                .finite()?,
        );
    }
    out.tables.push(table);
    Ok(out)
}

/// `s (U_r V_r^T)` with `r` equal singular values: the ratio below depends on `r` only.
fn equal_singular<R: Rng + ?Sized>(rng: &mut R, d: usize, r: usize, s: f64) -> HsMap {
    let u = haar_orthogonal(rng, d);
    let v = haar_orthogonal(rng, d);
    let m: DMatrix<f64> = u.columns(0, r) * v.columns(0, r).transpose() * s;
    HsMap::new(m).expect("finite matrix")
}

fn ratio_battery(
    driver: &Driver,
    alpha: f64,
    d: usize,
    mut rng: impl Rng,
) -> Result<Vec<(usize, f64)>> {
    let fns: Vec<(usize, StepFunction)> = (0..50)
        .map(|j| {
            let pieces = rng.random_range(1..=4);
            let p = Partition::uniform(0.0, 1.0, pieces).expect("positive piece count");
            let r = if j % 2 == 0 { (j / 2) % d + 1 } else { 0 };
            let vals = (0..pieces)
                .map(|_| {
                    let norm = (0.05f64.ln() + rng.random::<f64>() * 400f64.ln()).exp();
                    if r == 0 {
                        HsMap::random(&mut rng, d, d, norm)
                    } else {
                        equal_singular(&mut rng, d, r, norm / (r as f64).sqrt())
                    }
                })
                .collect();
            (
                r,
                StepFunction::from_intervals(p, vals).expect("matching lengths"),
            )
        })
        .collect();
    fns.par_iter()
        .map(|(r, psi)| {
            let lens = psi.partition().lengths();
            let mut k_int = 0.0;
            for (i, dt) in lens.iter().enumerate() {
                k_int += dt * k_of(driver.chars(), psi.on_interval(i))?;
            }
            Ok((*r, k_int / psi.lp_integral(alpha)))
        })
        .collect()
}

pub fn stable_equivalence(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::StableEquivalence;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let alphas = match cfg.driver.as_ref().map(|dr| dr.chars().levy()) {
        Some(LevyMeasureRep::CanonicalStable { alpha }) => vec![*alpha],
        _ => vec![0.8, 1.2, 1.5],
    };
    let mut out = CheckOutput::default();
    let mut table = Table::new("stable_equivalence", "alpha,draw,function,rank,ratio");
    for (ai, alpha) in alphas.into_iter().enumerate() {
        let driver = Driver::canonical_stable(d, alpha)?;
        let mut widths = Vec::new();
        let mut bounds = Vec::new();
        for draw in 0..2u64 {
            let ratios = ratio_battery(&driver, alpha, d, s.child(10 * ai as u64 + draw).rng())?;
            for (j, (r, q)) in ratios.iter().enumerate() {
                table.row(&[
                    format!("{alpha}"),
                    draw.to_string(),
                    j.to_string(),
                    r.to_string(),
                    format!("{q:e}"),
                ]);
            }
            let lo = ratios.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().map(|x| x.1).fold(0.0, f64::max);
            widths.push(hi - lo);
            bounds.push((lo, hi));
        }
        let change = (widths[1] - widths[0]).abs() / widths[0];
        let (lo, hi) = bounds[0];
        let ok_bounds = lo > 0.0 && hi.is_finite();
        out.rows.push(
            row(id, &format!("alpha-{alpha}"))
                .measure("inverse_c_alpha", lo)
                .measure("d_alpha", hi)
                .measure("width", widths[0])
                .measure("width_redraw", widths[1])
                .measure("width_change", change)
                .tolerance("width_change", 0.1)
                .judge(if ok_bounds { 0.1 - change } else { -1.0 })
                .finite()?,
        );
    }
    out.tables.push(table);
    Ok(out)
}
