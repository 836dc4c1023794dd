//! Brute-force law of two-interval compound-Poisson integrals.

use std::collections::HashMap;

use cyllevy_core::characteristics::Atom;
use cyllevy_core::driver::Driver;
use cyllevy_core::integrate::{integrate_step_pred, Predicate, StepProcess};
use cyllevy_core::linalg::{HVec, HsMap, Partition, Space};
use nalgebra::{DMatrix, DVector};

use super::{row, stream};
use crate::report::Table;
use crate::{CheckId, CheckOutput, ExperimentConfig, Result};

const CAP: usize = 12;
const BIN: f64 = 1e-9;
const DT: f64 = 0.5;

fn poisson(mean: f64) -> Vec<f64> {
    let mut p = vec![(-mean).exp()];
    for k in 1..=CAP {
        let prev = p[k - 1];
        p.push(prev * mean / k as f64);
    }
    p
}

fn key(x: &DVector<f64>) -> (i64, i64) {
    ((x[0] / BIN).round() as i64, (x[1] / BIN).round() as i64)
}

/// First-interval increment of `L` for jump counts `(n1, n2)`.
fn increment(a: &DVector<f64>, h: &[DVector<f64>; 2], n: (usize, usize)) -> DVector<f64> {
    a * DT + &h[0] * n.0 as f64 + &h[1] * n.1 as f64
}

/// Second-interval branch from the first increment and its jump count.
type Chooser = dyn Fn(&DVector<f64>, usize) -> usize;

type Case = (&'static str, Vec<(Predicate, HsMap)>, Box<Chooser>);

/// Exact law of `phi0 dL_0 + phi_k dL_1`, the branch `k = choose(dL_0, jumps_0)`.
fn enumerate(
    a: &DVector<f64>,
    h: &[DVector<f64>; 2],
    rates: [f64; 2],
    phi0: &DMatrix<f64>,
    branches: &[DMatrix<f64>],
    choose: &Chooser,
) -> HashMap<(i64, i64), f64> {
    let p = [poisson(rates[0] * DT), poisson(rates[1] * DT)];
    let mut law = HashMap::new();
    for n1 in 0..=CAP {
        for n2 in 0..=CAP {
            let d0 = increment(a, h, (n1, n2));
            let phi1 = &branches[choose(&d0, n1 + n2)];
            let first = phi0 * &d0;
            let w0 = p[0][n1] * p[1][n2];
            for m1 in 0..=CAP {
                for m2 in 0..=CAP {
                    let x = &first + phi1 * increment(a, h, (m1, m2));
                    *law.entry(key(&x)).or_insert(0.0) += w0 * p[0][m1] * p[1][m2];
                }
            }
        }
    }
    law
}

fn total_variation(exact: &HashMap<(i64, i64), f64>, samples: &[DVector<f64>]) -> f64 {
    let n = samples.len() as f64;
    let mut emp: HashMap<(i64, i64), f64> = HashMap::new();
    for x in samples {
        *emp.entry(key(x)).or_insert(0.0) += 1.0 / n;
    }
    let mut tv = 0.0;
    for (k, p) in exact {
        tv += (p - emp.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, q) in &emp {
        if !exact.contains_key(k) {
            tv += q;
        }
    }
    0.5 * tv
}

/// Empirical law of predictable integrals against brute-force enumeration.
pub fn exhaustive_small_case(cfg: &ExperimentConfig) -> Result<CheckOutput> {
    let id = CheckId::PredictableEquivalence;
    let s = stream(cfg, id).child(99);
    let a = DVector::from_vec(vec![0.2, -0.1]);
    let h = [
        DVector::from_vec(vec![0.8, 0.1]),
        DVector::from_vec(vec![-0.3, 0.6]),
    ];
    let rates = [0.5, 0.4];
    let driver = Driver::compound_poisson(
        HVec::from_dvector(Space::G, a.clone())?,
        vec![
            Atom {
                atom: h[0].as_slice().to_vec(),
                rate: rates[0],
            },
            Atom {
                atom: h[1].as_slice().to_vec(),
                rate: rates[1],
            },
        ],
    )?;
    let mut rng = s.child(0).rng();
    let maps: Vec<HsMap> = (0..4).map(|_| HsMap::random(&mut rng, 2, 2, 1.5)).collect();
    let mats: Vec<DMatrix<f64>> = maps.iter().map(|m| m.matrix().clone()).collect();
    let part = Partition::new(vec![0.0, DT, 2.0 * DT])?;
    let n = (10 * cfg.budgets.n_mc).max(1000);

    let sign = |p| Predicate::Sign {
        interval: 0,
        coord: 0,
        positive: p,
    };
    let count = |lo, hi| Predicate::JumpCount {
        interval: 0,
        min: lo,
        max: hi,
    };
    let cases: Vec<Case> = vec![
        (
            "sign",
            vec![
                (sign(true), maps[1].clone()),
                (sign(false), maps[2].clone()),
            ],
            Box::new(|d0: &DVector<f64>, _| if d0[0] > 0.0 { 0 } else { 1 }),
        ),
        (
            "jump-count",
            vec![
                (count(0, 0), maps[1].clone()),
                (count(1, 1), maps[2].clone()),
                (count(2, u64::MAX), maps[3].clone()),
            ],
            Box::new(|_: &DVector<f64>, jumps| jumps.min(2)),
        ),
    ];
    let mut out = CheckOutput::default();
    let mut table = Table::new(
        "exhaustive_oracle",
        "case,samples,atoms_in_law,total_variation",
    );
    for (ci, (label, second, choose)) in cases.into_iter().enumerate() {
        let branches: Vec<DMatrix<f64>> = second.iter().map(|(_, m)| m.matrix().clone()).collect();
        let exact = enumerate(&a, &h, rates, &mats[0], &branches, choose.as_ref());
        let psi = StepProcess::new(
            part.clone(),
            vec![vec![(Predicate::Always, maps[0].clone())], second],
        )?;
        let law = integrate_step_pred(&psi, &driver, n, s.child(1 + ci as u64))?;
        let tv = total_variation(&exact, &law.samples);
        table.row(&[
            label.to_string(),
            n.to_string(),
            exact.len().to_string(),
            format!("{tv:e}"),
        ]);
        out.rows.push(
            row(id, &format!("exhaustive-{label}"))
                .measure("total_variation", tv)
                .measure("samples", n as f64)
                .tolerance("total_variation", 0.02)
                .judge(0.02 - tv)
                .finite()?,
        );
        out.laws.push((format!("exhaustive_{label}"), law));
    }
    out.tables.push(table);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerated_law_is_a_probability() {
        let a = DVector::from_vec(vec![0.2, -0.1]);
        let h = [
            DVector::from_vec(vec![0.8, 0.1]),
            DVector::from_vec(vec![-0.3, 0.6]),
        ];
        let id = DMatrix::identity(2, 2);
        let law = enumerate(&a, &h, [0.5, 0.4], &id, &[id.clone(), -&id], &|d0, _| {
            usize::from(d0[0] <= 0.0)
        });
        let mass: f64 = law.values().sum();
        assert!((mass - 1.0).abs() < 1e-12, "{mass}");
        assert!(law.values().all(|p| *p >= 0.0));
    }

    #[test]
    fn no_jump_atom_has_product_weight() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let h = [
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![0.0, -std::f64::consts::SQRT_2]),
        ];
        let id = DMatrix::identity(2, 2);
        let law = enumerate(
            &a,
            &h,
            [0.5, 0.4],
            &id,
            std::slice::from_ref(&id),
            &|_, _| 0,
        );
        // both intervals quiet: X = 2 a DT
        let p = law[&key(&(&a * (2.0 * DT)))];
        assert!((p - (-(0.5 + 0.4) * 2.0 * DT).exp()).abs() < 1e-12);
    }

    #[test]
    fn total_variation_extremes() {
        let x = DVector::from_vec(vec![0.25, 0.5]);
        let y = DVector::from_vec(vec![1.0, 0.5]);
        let exact = HashMap::from([(key(&x), 1.0)]);
        assert_eq!(total_variation(&exact, &[x.clone(), x.clone()]), 0.0);
        assert!((total_variation(&exact, &[y.clone(), y]) - 1.0).abs() < 1e-15);
        assert!(
            (total_variation(&exact, &[x, DVector::from_vec(vec![3.0, 3.0])]) - 0.5).abs() < 1e-15
        );
    }
}
