use cyllevy_core::characteristics::{
    compose_contraction, partition_estimate_b, partition_sums, pushforward, Atom,
};
use cyllevy_core::driver::Driver;
use cyllevy_core::integrate::integrate_step_det;
use cyllevy_core::linalg::{
    sample_contraction, theta, ContractionMode, HVec, HsMap, Partition, Space,
};
use cyllevy_core::modular::{k_of, StepFunction};
use cyllevy_core::stats::ecf;
use nalgebra::DVector;
use rand::Rng;

use super::{cp_driver, driver_kinds, row, stream};
use crate::report::Table;
use crate::{CheckId, CheckOutput, ExperimentConfig, Result};

const ROUNDOFF: f64 = 1e-12;

/// Meshes `2^-1 .. 2^-10`; the coarsest only anchors the first increment.
const LEVELS: [u32; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

fn z(err: f64, se: f64) -> f64 {
    if err == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        err / se
    }
}

fn rss(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn limit_characteristics(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::LimitCharacteristics;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let mut rng = s.child(0).rng();
    let drivers = match &cfg.driver {
        Some(dr) => vec![("config".to_string(), dr.clone())],
        None => vec![
            ("gaussian".to_string(), Driver::gaussian(d)),
            (
                "compound-poisson".to_string(),
                cp_driver(&mut rng, d, 3, 1.2, 0.5)?,
            ),
            (
                "canonical-stable".to_string(),
                Driver::canonical_stable(d, 1.2)?,
            ),
        ],
    };
    let n_mc = cfg.budgets.n_mc.max(1000);
    let mut out = CheckOutput::default();
    let mut table = Table::new(
        "limit_characteristics",
        "driver,phi,level,b_error,b_stderr,k_estimate,k_stderr,k_target",
    );
    for (di, (name, driver)) in drivers.iter().enumerate() {
        let mut worst_z: f64 = 0.0;
        let mut fewest_steps = usize::MAX;
        for j in 0..3 {
            let phi = HsMap::random(&mut rng, d, driver.d_g(), 1.0);
            let sums = partition_sums(
                driver,
                &phi,
                (0.0, 1.0),
                &LEVELS,
                n_mc,
                s.child(1 + (di * 3 + j) as u64),
            )?;
            let b_target = pushforward(driver.chars(), &phi)?.b_theta.into_inner();
            let k_target = k_of(driver.chars(), &phi)?;
            let b_est = sums.b_estimates();
            let k_est = sums.k_estimates();
            let b_err: Vec<f64> = b_est
                .iter()
                .map(|e| (DVector::from_vec(e.value.clone()) - &b_target).norm())
                .collect();
            let k_err: Vec<f64> = k_est.iter().map(|e| (e.value - k_target).abs()).collect();
            for (l, lvl) in LEVELS.iter().enumerate() {
                table.row(&[
                    name.clone(),
                    j.to_string(),
                    lvl.to_string(),
                    format!("{:e}", b_err[l]),
                    format!("{:e}", rss(&b_est[l].stderr)),
                    format!("{:e}", k_est[l].value),
                    format!("{:e}", k_est[l].stderr),
                    format!("{:e}", k_target),
                ]);
            }
            let last = LEVELS.len() - 1;
            worst_z = worst_z
                .max(z(b_err[last], rss(&b_est[last].stderr)))
                .max(z(k_err[last], k_est[last].stderr));
            // increments between consecutive meshes; a step counts as decreasing
            // unless the next increment exceeds the previous one beyond its paired noise
            let b_inc: Vec<f64> = (0..last)
                .map(|l| {
                    (DVector::from_vec(b_est[l + 1].value.clone())
                        - DVector::from_vec(b_est[l].value.clone()))
                    .norm()
                })
                .collect();
            let k_inc: Vec<f64> = (0..last)
                .map(|l| (k_est[l + 1].value - k_est[l].value).abs())
                .collect();
            let mut b_ok = 0;
            let mut k_ok = 0;
            for l in 1..last {
                if b_inc[l] <= b_inc[l - 1] + 3.0 * sums.b_increment_stderr(l) + ROUNDOFF {
                    b_ok += 1;
                }
                if k_inc[l] <= k_inc[l - 1] + 3.0 * sums.k_increment_stderr(l) + ROUNDOFF {
                    k_ok += 1;
                }
            }
            fewest_steps = fewest_steps.min(b_ok.min(k_ok));
        }
        let r = row(id, name)
            .measure("max_final_z", worst_z)
            .measure("min_decreasing_steps", fewest_steps as f64)
            .tolerance("final_z", 3.0)
            .tolerance("decreasing_steps", 7.0)
            .judge((3.0 - worst_z).min(fewest_steps as f64 - 7.0));
        out.rows.push(r.finite()?);
    }
    out.tables.push(table);
    Ok(out)
}

pub fn pushforward_consistency(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::PushforwardConsistency;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let dt = 0.5;
    let n = (10 * cfg.budgets.n_mc).max(1000);
    let mut rng = s.child(0).rng();
    let mut out = CheckOutput::default();
    let mut table = Table::new(
        "pushforward_consistency",
        "driver,point,radius,ecf_re,ecf_im,target_re,target_im,stderr",
    );
    for (di, (name, driver)) in driver_kinds(cfg, s.child(1))?.into_iter().enumerate() {
        let phi = HsMap::random(&mut rng, d, driver.d_g(), 1.0);
        let trip = pushforward(driver.chars(), &phi)?;
        let psi = StepFunction::constant(Partition::new(vec![0.0, dt])?, phi.clone());
        let law = integrate_step_det(&psi, &driver, n, s.child(2 + di as u64))?;
        let mut worst: f64 = 0.0;
        for k in 0..20 {
            let radius = 0.2 + 0.15 * k as f64;
            let dir = HsMap::random(&mut rng, d, 1, 1.0)
                .matrix()
                .column(0)
                .into_owned();
            let u = dir * radius;
            let target = trip.char_fn(&HVec::from_dvector(Space::H, u.clone())?, dt)?;
            let (e, se) = ecf(&law.samples, &u);
            worst = worst.max(z((e - target).norm(), se));
            table.row(&[
                name.clone(),
                k.to_string(),
                format!("{radius}"),
                format!("{:e}", e.re),
                format!("{:e}", e.im),
                format!("{:e}", target.re),
                format!("{:e}", target.im),
                format!("{se:e}"),
            ]);
        }
        out.rows.push(
            row(id, &name)
                .measure("max_z", worst)
                .measure("draws", n as f64)
                .tolerance("z", 3.0)
                .judge(3.0 - worst)
                .finite()?,
        );
    }
    out.tables.push(table);
    Ok(out)
}

pub fn contraction_composition(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::ContractionComposition;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let mut rng = s.child(0).rng();
    let drivers = match &cfg.driver {
        Some(dr) => vec![dr.clone()],
        None => vec![
            cp_driver(&mut rng, d, 2, 1.5, 0.3)?,
            cp_driver(&mut rng, d, 4, 0.8, 0.8)?,
        ],
    };
    let modes = [
        ContractionMode::Orthogonal,
        ContractionMode::ScaledSvd,
        ContractionMode::RankOne,
    ];
    let n_mc = cfg.budgets.n_mc.max(1000);
    let mut worst: f64 = 0.0;
    let mut table = Table::new(
        "contraction_composition",
        "driver,contraction,mode,error,stderr",
    );
    for (di, driver) in drivers.iter().enumerate() {
        let phi = HsMap::random(&mut rng, d, driver.d_g(), 1.5);
        let trip = pushforward(driver.chars(), &phi)?;
        for c in 0..20 {
            let o = sample_contraction(&mut rng, d, modes[c % 3]);
            let predicted = compose_contraction(&trip, &o)?.into_inner();
            let est = partition_estimate_b(
                driver,
                &phi.left_compose(o.matrix())?,
                (0.0, 1.0),
                &[9],
                n_mc,
                s.child(1 + (di * 20 + c) as u64),
            )?;
            let err = (DVector::from_vec(est[0].value.clone()) - predicted).norm();
            let se = rss(&est[0].stderr);
            worst = worst.max(z(err, se));
            table.row(&[
                di.to_string(),
                c.to_string(),
                format!("{:?}", modes[c % 3]),
                format!("{err:e}"),
                format!("{se:e}"),
            ]);
        }
    }
    let mc_row = row(id, "monte-carlo")
        .measure("max_z", worst)
        .tolerance("z", 3.0)
        .judge(3.0 - worst)
        .finite()?;

    // single-atom cases: b_(O Phi) = O Phi a + r theta(O Phi h) by direct arithmetic
    let mut exact: f64 = 0.0;
    for case in 0..10 {
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rate = rng.random_range(0.2..2.0);
        let driver = Driver::compound_poisson(
            HVec::new(Space::G, a.clone())?,
            vec![Atom {
                atom: h.clone(),
                rate,
            }],
        )?;
        let phi = HsMap::random(&mut rng, d, d, 0.5 + case as f64 * 0.4);
        let o = sample_contraction(&mut rng, d, modes[case % 3]);
        let composed = compose_contraction(&pushforward(driver.chars(), &phi)?, &o)?;
        let direct = pushforward(driver.chars(), &phi.left_compose(o.matrix())?)?.b_theta;
        let op = o.matrix() * phi.matrix();
        let oph = HVec::from_dvector(Space::H, &op * DVector::from_vec(h))?;
        let hand = &op * DVector::from_vec(a) + theta(&oph).coords() * rate;
        exact = exact
            .max((composed.coords() - direct.coords()).amax())
            .max((composed.coords() - &hand).amax());
    }
    let hand_row = row(id, "single-atom")
        .measure("max_abs_error", exact)
        .tolerance("abs", 1e-10)
        .judge(1e-10 - exact)
        .finite()?;
    Ok(CheckOutput {
        rows: vec![mc_row, hand_row],
        tables: vec![table],
        laws: Vec::new(),
    })
}
