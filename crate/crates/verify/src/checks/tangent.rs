use cyllevy_core::characteristics::{symbol_eval, Atom};
use cyllevy_core::driver::Driver;
use cyllevy_core::integrate::{
    decoupling_ratio as ratio_of, tangent_pair, EmpiricalLaw, Predicate, StepProcess,
};
use cyllevy_core::linalg::{HVec, HsMap, Partition, Space};
use cyllevy_core::modular::StepFunction;
use cyllevy_core::rng::RngStream;
use cyllevy_core::stats::{ecf, ks_pvalue, ks_statistic, pearson};
use nalgebra::DVector;

use super::{cp_driver, driver_kinds, random_step, row, stream};
use crate::report::Table;
use crate::{CheckId, CheckOutput, ExperimentConfig, Result};

/// Two atoms in the plane, total rate 0.9 per unit time.
fn planar_driver() -> Result<Driver> {
    Ok(Driver::compound_poisson(
        HVec::new(Space::G, vec![0.1, -0.1])?,
        vec![
            Atom {
                atom: vec![1.0, 0.3],
                rate: 0.5,
            },
            Atom {
                atom: vec![-0.5, 0.9],
                rate: 0.4,
            },
        ],
    )?)
}

pub fn tangent_laws(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::TangentLaws;
    let s = stream(cfg, id);
    let driver = planar_driver()?;
    let mut rng = s.child(0).rng();
    let theta1 = HsMap::random(&mut rng, 2, 2, 1.5);
    let quiet = HsMap::random(&mut rng, 2, 2, 1.5);
    let busy = HsMap::random(&mut rng, 2, 2, 1.5);
    let part = Partition::new(vec![0.0, 0.5, 1.0])?;
    let dt2 = 0.5;
    let jumps = |lo, hi| Predicate::JumpCount {
        interval: 0,
        min: lo,
        max: hi,
    };
    let psi = StepProcess::new(
        part.clone(),
        vec![
            vec![(Predicate::Always, theta1.clone())],
            vec![
                (jumps(0, 0), quiet.clone()),
                (jumps(1, u64::MAX), busy.clone()),
            ],
        ],
    )?;
    let n = (10 * cfg.budgets.n_mc).max(1000);
    let pair = tangent_pair(&psi, &driver, n, s.child(1), s.child(2))?;

    let us: Vec<DVector<f64>> = (0..5)
        .map(|k| {
            let ang = 0.7 + 1.3 * k as f64;
            DVector::from_vec(vec![ang.cos(), ang.sin()]) * (0.4 + 0.3 * k as f64)
        })
        .collect();
    let mut table = Table::new(
        "tangent_laws",
        "stratum,replicas,term,point,ecf_re,ecf_im,target_re,target_im,stderr",
    );
    let mut worst_z: f64 = 0.0;
    let mut worst_corr: f64 = 0.0;
    for (label, lo, hi) in [("0", 0, 0), ("1", 1, 1), ("2+", 2, u64::MAX)] {
        let idx: Vec<usize> = (0..pair.replicas())
            .filter(|&r| (lo..=hi).contains(&pair.first_jumps[r]))
            .collect();
        if idx.len() < 100 {
            continue;
        }
        let coef = if lo == 0 { &quiet } else { &busy };
        let x2: Vec<DVector<f64>> = idx.iter().map(|&r| pair.x_terms[r][1].clone()).collect();
        let y2: Vec<DVector<f64>> = idx.iter().map(|&r| pair.y_terms[r][1].clone()).collect();
        for (pi, u) in us.iter().enumerate() {
            let g = HVec::from_dvector(Space::G, coef.matrix().transpose() * u)?;
            let target = symbol_eval(driver.chars(), &g, dt2)?;
            for (term, sample) in [("x2", &x2), ("y2", &y2)] {
                let (e, se) = ecf(sample, u);
                let err = (e - target).norm();
                worst_z = worst_z.max(if se > 0.0 {
                    err / se
                } else {
                    f64::from(err > 0.0) * f64::INFINITY
                });
                table.row(&[
                    label.to_string(),
                    idx.len().to_string(),
                    term.to_string(),
                    pi.to_string(),
                    format!("{:e}", e.re),
                    format!("{:e}", e.im),
                    format!("{:e}", target.re),
                    format!("{:e}", target.im),
                    format!("{se:e}"),
                ]);
            }
        }
        // decoupled terms are independent across n given the original path
        let bound = 3.0 / (idx.len() as f64).sqrt();
        for c in 0..2 {
            let a: Vec<f64> = idx.iter().map(|&r| pair.y_terms[r][0][c]).collect();
            let b: Vec<f64> = idx.iter().map(|&r| pair.y_terms[r][1][c]).collect();
            worst_corr = worst_corr.max(pearson(&a, &b).abs() / bound);
        }
    }
    let ecf_row = row(id, "conditional-ecf")
        .measure("max_z", worst_z)
        .tolerance("z", 3.0)
        .judge(3.0 - worst_z)
        .finite()?;
    let corr_row = row(id, "decoupled-independence")
        .measure("max_corr_over_bound", worst_corr)
        .tolerance("corr_over_bound", 1.0)
        .judge(1.0 - worst_corr)
        .finite()?;

    let det = StepProcess::deterministic(&StepFunction::from_intervals(part, vec![theta1, quiet])?);
    let dpair = tangent_pair(&det, &driver, n, s.child(3), s.child(4))?;
    let xn: Vec<f64> = dpair.x_sum().iter().map(|x| x.norm()).collect();
    let yn: Vec<f64> = dpair.y_sum().iter().map(|x| x.norm()).collect();
    let p = ks_pvalue(ks_statistic(&xn, &yn), xn.len(), yn.len());
    let ks_row = row(id, "deterministic-ks")
        .measure("ks_pvalue", p)
        .tolerance("pvalue", 0.01)
        .judge(p - 0.01)
        .finite()?;
    Ok(CheckOutput {
        rows: vec![ecf_row, corr_row, ks_row],
        tables: vec![table],
        laws: vec![
            (
                "tangent_x".into(),
                EmpiricalLaw::new(pair.x_sum(), 2, s.child(1)),
            ),
            (
                "tangent_y".into(),
                EmpiricalLaw::new(pair.y_sum(), 2, s.child(2)),
            ),
        ],
    })
}

type Rules = dyn Fn(usize, &HsMap) -> Vec<(Predicate, HsMap)>;

fn adapted_battery(psi: &StepFunction) -> Result<Vec<(&'static str, StepProcess)>> {
    let n = psi.intervals();
    let build = |f: &Rules| {
        let rules = (0..n)
            .map(|i| {
                let v = psi.on_interval(i);
                if i == 0 {
                    vec![(Predicate::Always, v.clone())]
                } else {
                    f(i, v)
                }
            })
            .collect();
        StepProcess::new(psi.partition().clone(), rules)
    };
    Ok(vec![
        ("sign-flip", StepProcess::sign_flip(psi, 0)),
        (
            "threshold",
            build(&|i, v| {
                let t = |above| Predicate::Threshold {
                    interval: i - 1,
                    coord: 0,
                    level: 0.0,
                    above,
                };
                vec![(t(true), v.clone()), (t(false), v.scale(0.3))]
            })?,
        ),
        (
            "jump-count",
            build(&|i, v| {
                let c = |lo, hi| Predicate::JumpCount {
                    interval: i - 1,
                    min: lo,
                    max: hi,
                };
                vec![(c(0, 0), v.clone()), (c(1, u64::MAX), v.scale(-1.0))]
            })?,
        ),
        (
            "cumulative-sign",
            build(&|i, v| {
                let c = |positive| Predicate::CumulativeSign {
                    upto: i,
                    coord: 0,
                    positive,
                };
                vec![(c(true), v.clone()), (c(false), v.scale(-0.5))]
            })?,
        ),
    ])
}

/// Forward and backward maxima over the adapted battery, unreliable cases excluded.
fn battery_maxima(
    drivers: &[(String, Driver)],
    procs: &[(&'static str, StepProcess)],
    n_mc: usize,
    s: RngStream,
    table: &mut Table,
    draw: u64,
) -> Result<(f64, f64, usize)> {
    let (mut fwd, mut bwd, mut flagged) = (0.0f64, 0.0f64, 0);
    for (di, (dname, driver)) in drivers.iter().enumerate() {
        for (pi, (pname, proc)) in procs.iter().enumerate() {
            let c = s.child((di * 16 + pi) as u64);
            let pair = tangent_pair(proc, driver, n_mc, c.child(0), c.child(1))?;
            let r = ratio_of(&pair, 64, c.child(2));
            table.row(&[
                draw.to_string(),
                dname.clone(),
                pname.to_string(),
                format!("{:e}", r.forward),
                format!("{:e}", r.forward_stderr),
                format!("{:e}", r.backward),
                format!("{:e}", r.backward_stderr),
                r.unreliable.to_string(),
            ]);
            if r.unreliable {
                flagged += 1;
                continue;
            }
            fwd = fwd.max(r.forward);
            bwd = bwd.max(r.backward);
        }
    }
    Ok((fwd, bwd, flagged))
}

pub fn decoupling_ratio(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::DecouplingRatio;
    let s = stream(cfg, id);
    let d = cfg.dims;
    let n_mc = cfg.budgets.n_mc;
    let mut rng = s.child(0).rng();
    let mut out = CheckOutput::default();

    let psi = random_step(&mut rng, d, 4, 0.5, 2.0);
    for (di, (name, driver)) in driver_kinds(cfg, s.child(1))?.into_iter().enumerate() {
        let c = s.child(10 + di as u64);
        let pair = tangent_pair(
            &StepProcess::deterministic(&psi),
            &driver,
            n_mc,
            c.child(0),
            c.child(1),
        )?;
        let r = ratio_of(&pair, 64, c.child(2));
        let mut rw = row(id, &format!("deterministic/{name}"))
            .measure("forward", r.forward)
            .stderr("forward", r.forward_stderr)
            .tolerance("forward_z", 3.0);
        if r.unreliable {
            rw = rw.judge(0.0).flag("denominator within 3 stderr of zero");
            rw.measured.insert("forward".into(), 0.0);
        } else {
            rw = rw.judge(3.0 * r.forward_stderr - (r.forward - 1.0).abs());
        }
        out.rows.push(rw.finite()?);
    }

    let drivers = match &cfg.driver {
        Some(dr) => vec![("config".to_string(), dr.clone())],
        None => vec![
            (
                "compound-poisson".to_string(),
                cp_driver(&mut rng, d, 3, 1.2, 0.5)?,
            ),
            (
                "canonical-stable".to_string(),
                Driver::canonical_stable(d, 1.2)?,
            ),
            ("gaussian".to_string(), Driver::gaussian(d)),
        ],
    };
    let procs = adapted_battery(&psi)?;
    let mut table = Table::new(
        "decoupling_ratio",
        "draw,driver,integrand,forward,forward_stderr,backward,backward_stderr,unreliable",
    );
    let (f1, b1, fl1) = battery_maxima(&drivers, &procs, n_mc, s.child(100), &mut table, 0)?;
    let (f2, b2, fl2) = battery_maxima(&drivers, &procs, n_mc, s.child(200), &mut table, 1)?;
    let fc = (f2 - f1).abs() / f1;
    let bc = (b2 - b1).abs() / b1;
    let mut rw = row(id, "adapted-maxima")
        .measure("c1_forward_max", f1)
        .measure("c1_forward_max_redraw", f2)
        .measure("c2_backward_max", b1)
        .measure("c2_backward_max_redraw", b2)
        .measure("forward_change", fc)
        .measure("backward_change", bc)
        .measure("unreliable_cases", (fl1 + fl2) as f64)
        .tolerance("relative_change", 0.1);
    rw = if f1 > 0.0 && b1 > 0.0 {
        rw.judge((0.1 - fc).min(0.1 - bc))
    } else {
        rw.judge(-1.0).note("every case unreliable")
    };
    out.rows.push(rw.finite()?);
    out.tables.push(table);
    Ok(out)
}
