//! Batteries behind the check ids.

pub mod characteristics;
pub mod integration;
pub mod modular;
pub mod oracle;
pub mod tangent;

use cyllevy_core::characteristics::{Atom, StableComponent};
use cyllevy_core::driver::Driver;
use cyllevy_core::linalg::{HVec, HsMap, Partition, Space};
use cyllevy_core::modular::StepFunction;
use cyllevy_core::rng::{module, RngStream};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{CheckId, CheckRow, ExperimentConfig, Result};

pub(crate) fn stream(cfg: &ExperimentConfig, id: CheckId) -> RngStream {
    cfg.stream(module::VERIFY).child(100 + id as u64)
}

pub(crate) fn row(id: CheckId, suffix: &str) -> CheckRow {
    let name = if suffix.is_empty() {
        id.name().to_string()
    } else {
        format!("{}/{suffix}", id.name())
    };
    CheckRow::new(&name, id.anchor())
}

/// Compound-Poisson driver with `atoms` Gaussian atoms of norm about `scale`
/// and a drift of norm `drift`.
pub(crate) fn cp_driver<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    atoms: usize,
    scale: f64,
    drift: f64,
) -> Result<Driver> {
    let list = (0..atoms)
        .map(|_| Atom {
            atom: gaussian(rng, d, scale),
            rate: rng.random_range(0.3..1.5),
        })
        .collect();
    Ok(Driver::compound_poisson(
        HVec::new(Space::G, gaussian(rng, d, drift))?,
        list,
    )?)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize, norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * norm / n).collect()
}

/// The five standard driver kinds at dimension `d`, or the configured driver alone.
pub(crate) fn driver_kinds(cfg: &ExperimentConfig, s: RngStream) -> Result<Vec<(String, Driver)>> {
    if let Some(d) = &cfg.driver {
        return Ok(vec![("config".into(), d.clone())]);
    }
    let d = cfg.dims;
    let mut rng = s.rng();
    let comps = (0..d)
        .map(|k| StableComponent {
            alpha: 0.6 + 1.2 * k as f64 / d.max(2) as f64,
            scale: rng.random_range(0.5..1.5),
        })
        .collect();
    let cp = cp_driver(&mut rng, d, 3, 1.2, 0.5)?;
    Ok(vec![
        ("gaussian".into(), Driver::gaussian(d)),
        ("canonical-stable".into(), Driver::canonical_stable(d, 1.2)?),
        ("diagonal-stable".into(), Driver::diagonal_stable(comps)?),
        ("compound-poisson".into(), cp.clone()),
        ("sum".into(), Driver::sum(&[Driver::gaussian(d), cp])?),
    ])
}

/// Random step function on `pieces` equal intervals of `[0, 1]` with
/// log-uniform HS norms in `[lo, hi]`.
pub(crate) fn random_step<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    pieces: usize,
    lo: f64,
    hi: f64,
) -> StepFunction {
    let p = Partition::uniform(0.0, 1.0, pieces).expect("positive piece count");
    let vals = (0..pieces)
        .map(|_| {
            let norm = (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp();
            HsMap::random(rng, d, d, norm)
        })
        .collect();
    StepFunction::from_intervals(p, vals).expect("matching lengths")
}
