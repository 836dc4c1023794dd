//! Exact samplers for the representable cylindrical drivers.
//!
//! Increments are drawn in the truncated space `G` and Radonified by a matrix
//! product. Stable coordinates use the Chambers-Mallows-Stuck formula; the
//! canonical stable driver is drawn as `sqrt(2A) Z` with `A` positive
//! `(alpha/2)`-stable (Laplace transform `exp(-s^{alpha/2})`, Kanter's formula)
//! and `Z` standard normal, which gives the symbol `exp(-||g||^alpha)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::characteristics::{Atom, CharsDoc, CylCharacteristics, LevyMeasureRep, StableComponent};
use crate::error::{CoreError, Result};
use crate::linalg::{HVec, HsMap, Partition, Space};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverKind {
    Gaussian,
    CanonicalStable,
    DiagonalStable,
    CompoundPoisson,
    Sum,
}

impl DriverKind {
    fn matches(self, levy: &LevyMeasureRep) -> bool {
        matches!(
            (self, levy),
            (DriverKind::Gaussian, LevyMeasureRep::Zero)
                | (
                    DriverKind::CanonicalStable,
                    LevyMeasureRep::CanonicalStable { .. }
                )
                | (
                    DriverKind::DiagonalStable,
                    LevyMeasureRep::DiagonalStable(_)
                )
                | (DriverKind::CompoundPoisson, LevyMeasureRep::Atomic(_))
                | (DriverKind::Sum, LevyMeasureRep::Sum(_))
        )
    }
}

#[derive(Clone, Debug)]
enum JumpSampler {
    None,
    Atomic {
        atoms: Vec<DVector<f64>>,
        cumulative: Vec<f64>,
        total: f64,
    },
    Diagonal(Vec<StableComponent>),
    Canonical(f64),
    Sum(Vec<JumpSampler>),
}

impl JumpSampler {
    fn from_rep(rep: &LevyMeasureRep) -> Self {
        match rep {
            LevyMeasureRep::Zero => JumpSampler::None,
            LevyMeasureRep::Atomic(atoms) => {
                let mut acc = 0.0;
                let cumulative = atoms
                    .iter()
                    .map(|a| {
                        acc += a.rate;
                        acc
                    })
                    .collect();
                JumpSampler::Atomic {
                    atoms: atoms
                        .iter()
                        .map(|a| DVector::from_column_slice(&a.atom))
                        .collect(),
                    cumulative,
                    total: acc,
                }
            }
            LevyMeasureRep::DiagonalStable(c) => JumpSampler::Diagonal(c.clone()),
            LevyMeasureRep::CanonicalStable { alpha } => JumpSampler::Canonical(*alpha),
            LevyMeasureRep::Sum(parts) => {
                JumpSampler::Sum(parts.iter().map(JumpSampler::from_rep).collect())
            }
        }
    }

    fn add_into<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, out: &mut DVector<f64>) -> u64 {
        match self {
            JumpSampler::None => 0,
            JumpSampler::Atomic {
                atoms,
                cumulative,
                total,
            } => {
                if atoms.is_empty() {
                    return 0;
                }
                let n = Poisson::new(dt * total).unwrap().sample(rng) as u64;
                for _ in 0..n {
                    let x = rng.random::<f64>() * total;
                    let k = cumulative.partition_point(|c| *c <= x).min(atoms.len() - 1);
                    *out += &atoms[k];
                }
                n
            }
            JumpSampler::Diagonal(comps) => {
                for (k, c) in comps.iter().enumerate() {
                    if c.scale > 0.0 {
                        out[k] += c.scale * dt.powf(1.0 / c.alpha) * symmetric_stable(c.alpha, rng);
                    }
                }
                0
            }
            JumpSampler::Canonical(alpha) => {
                let a = positive_stable(alpha / 2.0, rng);
                let scale = dt.powf(1.0 / alpha) * (2.0 * a).sqrt();
                for x in out.iter_mut() {
                    *x += scale * rng.sample::<f64, _>(StandardNormal);
                }
                0
            }
            JumpSampler::Sum(parts) => parts.iter().map(|p| p.add_into(dt, rng, out)).sum(),
        }
    }
}

/// Standard symmetric stable variable with characteristic function `exp(-|u|^alpha)`.
pub fn symmetric_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let v = (rng.random::<f64>() - 0.5) * std::f64::consts::PI;
    if v.abs() >= half_pi {
        return 0.0;
    }
    let w: f64 = rng.sample(Exp1);
    if (alpha - 1.0).abs() < 1e-12 {
        return v.tan();
    }
    (alpha * v).sin() / v.cos().powf(1.0 / alpha)
        * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Positive stable variable with Laplace transform `exp(-s^beta)`, `0 < beta < 1`.
pub fn positive_stable<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> f64 {
    let u = loop {
        let u = rng.random::<f64>() * std::f64::consts::PI;
        if u > 0.0 {
            break u;
        }
    };
    let e: f64 = rng.sample(Exp1);
    (beta * u).sin() / u.sin().powf(1.0 / beta)
        * (((1.0 - beta) * u).sin() / e).powf((1.0 - beta) / beta)
}

/// A cylindrical Levy driver with a cached sampler.
#[derive(Clone, Debug)]
pub struct Driver {
    kind: DriverKind,
    chars: CylCharacteristics,
    q_sqrt: Option<DMatrix<f64>>,
    jumps: JumpSampler,
    stream: Option<RngStream>,
}

impl PartialEq for Driver {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.chars == other.chars && self.stream == other.stream
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DriverDoc {
    kind: DriverKind,
    a: Vec<f64>,
    #[serde(rename = "Q")]
    q: Vec<f64>,
    levy: LevyMeasureRep,
}

impl Serialize for Driver {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let c = CharsDoc::from(&self.chars);
        DriverDoc {
            kind: self.kind,
            a: c.a,
            q: c.q,
            levy: c.levy,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Driver {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = DriverDoc::deserialize(d)?;
        let chars = CylCharacteristics::try_from(CharsDoc {
            a: doc.a,
            q: doc.q,
            levy: doc.levy,
        })
        .map_err(serde::de::Error::custom)?;
        Driver::new(doc.kind, chars).map_err(serde::de::Error::custom)
    }
}

fn psd_sqrt(q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if q.iter().all(|x| *x == 0.0) {
        return None;
    }
    let eig = q.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

impl Driver {
    pub fn new(kind: DriverKind, chars: CylCharacteristics) -> Result<Self> {
        if !kind.matches(chars.levy()) {
            return Err(CoreError::InvalidParameter(format!(
                "driver kind {kind:?} inconsistent with its Levy measure"
            )));
        }
        Ok(Self {
            kind,
            q_sqrt: psd_sqrt(chars.q()),
            jumps: JumpSampler::from_rep(chars.levy()),
            chars,
            stream: None,
        })
    }

    /// Infers the kind from the Levy measure.
    pub fn from_chars(chars: CylCharacteristics) -> Result<Self> {
        let kind = match chars.levy() {
            LevyMeasureRep::Zero => DriverKind::Gaussian,
            LevyMeasureRep::Atomic(_) => DriverKind::CompoundPoisson,
            LevyMeasureRep::DiagonalStable(_) => DriverKind::DiagonalStable,
            LevyMeasureRep::CanonicalStable { .. } => DriverKind::CanonicalStable,
            LevyMeasureRep::Sum(_) => DriverKind::Sum,
        };
        Self::new(kind, chars)
    }

    pub fn gaussian(d_g: usize) -> Self {
        Self::new(DriverKind::Gaussian, CylCharacteristics::gaussian(d_g)).unwrap()
    }

    pub fn zero(d_g: usize) -> Self {
        Self::new(DriverKind::Gaussian, CylCharacteristics::zero(d_g)).unwrap()
    }

    pub fn canonical_stable(d_g: usize, alpha: f64) -> Result<Self> {
        Self::new(
            DriverKind::CanonicalStable,
            CylCharacteristics::canonical_stable(d_g, alpha)?,
        )
    }

    pub fn diagonal_stable(comps: Vec<StableComponent>) -> Result<Self> {
        Self::new(
            DriverKind::DiagonalStable,
            CylCharacteristics::diagonal_stable(comps)?,
        )
    }

    pub fn compound_poisson(a: HVec, atoms: Vec<Atom>) -> Result<Self> {
        Self::new(
            DriverKind::CompoundPoisson,
            CylCharacteristics::compound_poisson(a, atoms)?,
        )
    }

    /// Independent sum of drivers; Gaussian parts and drifts add up.
    pub fn sum(components: &[Driver]) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| CoreError::InvalidParameter("empty sum of drivers".into()))?;
        let d = first.d_g();
        let mut a = DVector::zeros(d);
        let mut q = DMatrix::zeros(d, d);
        let mut parts = Vec::new();
        for c in components {
            if c.d_g() != d {
                return Err(CoreError::DimensionMismatch {
                    expected: d,
                    found: c.d_g(),
                    context: "summed drivers",
                });
            }
            a += c.chars.a().coords();
            q += c.chars.q();
            match c.chars.levy() {
                LevyMeasureRep::Sum(p) => parts.extend(p.iter().cloned()),
                other => parts.push(other.clone()),
            }
        }
        let chars = CylCharacteristics::new(
            HVec::from_dvector(Space::G, a)?,
            q,
            LevyMeasureRep::Sum(parts),
        )?;
        Self::new(DriverKind::Sum, chars)
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    pub fn chars(&self) -> &CylCharacteristics {
        &self.chars
    }

    pub fn d_g(&self) -> usize {
        self.chars.d_g()
    }

    /// The stream this driver is bound to, if any.
    pub fn stream(&self) -> Option<RngStream> {
        self.stream
    }

    pub fn bind(mut self, stream: RngStream) -> Self {
        self.stream = Some(stream);
        self
    }

    /// Overwrites `out` with one increment over `dt` and returns
    /// the number of compound-Poisson jumps.
    pub(crate) fn g_increment_into<R: Rng + ?Sized>(
        &self,
        dt: f64,
        rng: &mut R,
        out: &mut DVector<f64>,
    ) -> u64 {
        out.copy_from(self.chars.a().coords());
        *out *= dt;
        if let Some(s) = &self.q_sqrt {
            let z = crate::linalg::gaussian_vector(rng, s.ncols());
            out.gemv(dt.sqrt(), s, &z, 1.0);
        }
        self.jumps.add_into(dt, rng, out)
    }

    /// One increment `L(t + dt) - L(t)` in `G` with its jump count.
    pub fn sample_g_increment<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Result<(HVec, u64)> {
        check_dt(dt)?;
        let mut out = DVector::zeros(self.d_g());
        let n = self.g_increment_into(dt, rng, &mut out);
        Ok((HVec::from_dvector_unchecked(Space::G, out), n))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("driver serializes")
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CoreError::InvalidParameter(format!(
            "time step {dt} must be positive"
        )));
    }
    Ok(())
}

fn check_phi(driver: &Driver, phi: &HsMap) -> Result<()> {
    if phi.d_g() != driver.d_g() {
        return Err(CoreError::DimensionMismatch {
            expected: driver.d_g(),
            found: phi.d_g(),
            context: "driver and HS map",
        });
    }
    Ok(())
}

/// One draw of `Phi(L)(t + dt) - Phi(L)(t)`.
pub fn sample_increment<R: Rng + ?Sized>(
    driver: &Driver,
    phi: &HsMap,
    dt: f64,
    rng: &mut R,
) -> Result<HVec> {
    check_phi(driver, phi)?;
    let (g, _) = driver.sample_g_increment(dt, rng)?;
    phi.apply(&g)
}

/// Increment of the driver in `G` over one interval.
#[derive(Clone, Debug, PartialEq)]
pub struct GStep {
    pub inc: DVector<f64>,
    pub jumps: u64,
}

/// Independent increments over every interval of `partition`.
pub fn sample_g_path<R: Rng + ?Sized>(
    driver: &Driver,
    partition: &Partition,
    rng: &mut R,
) -> Vec<GStep> {
    partition
        .lengths()
        .into_iter()
        .map(|dt| {
            let mut inc = DVector::zeros(driver.d_g());
            let jumps = driver.g_increment_into(dt, rng, &mut inc);
            GStep { inc, jumps }
        })
        .collect()
}

/// Radonified increments of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTable {
    pub partition: Partition,
    pub increments: Vec<HVec>,
    pub seed: u64,
    pub stream: RngStream,
}

impl PathTable {
    /// Rows `t, x_1, ..., x_d` with `t` the right endpoint of each interval.
    pub fn to_csv(&self) -> String {
        let d = self.increments.first().map_or(0, |h| h.dim());
        let mut s = String::from("t");
        for k in 0..d {
            let _ = write!(s, ",x{k}");
        }
        s.push('\n');
        for (i, h) in self.increments.iter().enumerate() {
            let _ = write!(s, "{:e}", self.partition.points()[i + 1]);
            for x in h.as_slice() {
                let _ = write!(s, ",{x:e}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn sample_path(
    driver: &Driver,
    phi: &HsMap,
    partition: &Partition,
    stream: RngStream,
) -> Result<PathTable> {
    check_phi(driver, phi)?;
    let mut rng = stream.rng();
    let increments = sample_g_path(driver, partition, &mut rng)
        .into_iter()
        .map(|s| HVec::from_dvector_unchecked(Space::H, phi.matrix() * s.inc))
        .collect();
    Ok(PathTable {
        partition: partition.clone(),
        increments,
        seed: stream.seed(),
        stream,
    })
}

/// Independent copy of `driver` bound to `fresh`.
pub fn decoupled_driver(driver: &Driver, fresh: RngStream) -> Result<Driver> {
    if driver.stream == Some(fresh) {
        return Err(CoreError::StreamCollision);
    }
    Ok(Driver {
        stream: Some(fresh),
        ..driver.clone()
    })
}
