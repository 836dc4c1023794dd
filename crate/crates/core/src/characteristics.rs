//! Characteristic triplets of cylindrical drivers and of their Radonified
//! pushforwards.
//!
//! Conventions for compound-Poisson components: the vector `a` is the drift of
//! the uncompensated process, `L(t)g = t<a,g> + sum of <g, jumps>`. The
//! cylindrical drift functional is therefore
//! `a(g) = <a,g> + sum_k r_k <g,h_k> 1{|<g,h_k>| <= 1}`, and the symbol reads
//! `S(g) = i a(g) - <Qg,g>/2 + sum_k r_k (e^{i<g,h_k>} - 1 - i<g,h_k> 1{|<g,h_k>| <= 1})`.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::driver::Driver;
use crate::error::{CoreError, Result};
use crate::linalg::{theta_vec, Contraction, HVec, HsMap, Partition, Space};
use crate::rng::{batches, RngStream};
use crate::stats::{gaussian_norm_moment, mean_stderr, stable_levy_constant};

/// Jump samples below this size give unreliable integrals.
pub const MIN_JUMP_SAMPLE: usize = 10_000;
/// Default size of stratified stable jump samples.
pub const DEFAULT_JUMP_SAMPLE: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub atom: Vec<f64>,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableComponent {
    pub alpha: f64,
    pub scale: f64,
}

/// Computable cylindrical Levy measures on `G`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "payload", rename_all = "kebab-case")]
pub enum LevyMeasureRep {
    Zero,
    /// Finite measure `sum_k r_k delta_{h_k}`.
    Atomic(Vec<Atom>),
    /// Independent symmetric stable coordinates, `exp(-sum_k s_k^a_k |g_k|^a_k)`.
    DiagonalStable(Vec<StableComponent>),
    /// Isotropic symbol `exp(-||g||^alpha)`.
    CanonicalStable {
        alpha: f64,
    },
    /// Sum of independent components.
    Sum(Vec<LevyMeasureRep>),
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(CoreError::InvalidParameter(format!(
            "stability index {alpha} outside (0, 2)"
        )));
    }
    Ok(())
}

impl LevyMeasureRep {
    pub fn validate(&self, d_g: usize) -> Result<()> {
        match self {
            LevyMeasureRep::Zero => Ok(()),
            LevyMeasureRep::Atomic(atoms) => {
                for a in atoms {
                    if a.atom.len() != d_g {
                        return Err(CoreError::DimensionMismatch {
                            expected: d_g,
                            found: a.atom.len(),
                            context: "atom",
                        });
                    }
                    if a.atom.iter().any(|x| !x.is_finite()) {
                        return Err(CoreError::NonFinite("atom"));
                    }
                    if !(a.rate > 0.0 && a.rate.is_finite()) {
                        return Err(CoreError::InvalidParameter(format!(
                            "atom rate {} must be positive",
                            a.rate
                        )));
                    }
                }
                Ok(())
            }
            LevyMeasureRep::DiagonalStable(comps) => {
                if comps.len() != d_g {
                    return Err(CoreError::DimensionMismatch {
                        expected: d_g,
                        found: comps.len(),
                        context: "diagonal stable components",
                    });
                }
                for c in comps {
                    check_alpha(c.alpha)?;
                    if !(c.scale >= 0.0 && c.scale.is_finite()) {
                        return Err(CoreError::InvalidParameter(format!(
                            "stable scale {} must be nonnegative",
                            c.scale
                        )));
                    }
                }
                Ok(())
            }
            LevyMeasureRep::CanonicalStable { alpha } => check_alpha(*alpha),
            LevyMeasureRep::Sum(parts) => parts.iter().try_for_each(|p| p.validate(d_g)),
        }
    }

    /// Invariance under `h -> -h`.
    pub fn is_symmetric(&self) -> bool {
        match self {
            LevyMeasureRep::Zero
            | LevyMeasureRep::DiagonalStable(_)
            | LevyMeasureRep::CanonicalStable { .. } => true,
            LevyMeasureRep::Atomic(atoms) => atoms_symmetric(
                &atoms
                    .iter()
                    .map(|a| (DVector::from_column_slice(&a.atom), a.rate))
                    .collect::<Vec<_>>(),
            ),
            LevyMeasureRep::Sum(_) => atoms_symmetric(&self.atoms()),
        }
    }

    /// All compound-Poisson atoms, flattened over sums.
    pub fn atoms(&self) -> Vec<(DVector<f64>, f64)> {
        match self {
            LevyMeasureRep::Atomic(atoms) => atoms
                .iter()
                .map(|a| (DVector::from_column_slice(&a.atom), a.rate))
                .collect(),
            LevyMeasureRep::Sum(parts) => parts.iter().flat_map(|p| p.atoms()).collect(),
            _ => Vec::new(),
        }
    }

    /// Jump part of the symbol at `g`, excluding the linear drift.
    fn exponent(&self, g: &DVector<f64>) -> Complex<f64> {
        match self {
            LevyMeasureRep::Zero => Complex::new(0.0, 0.0),
            LevyMeasureRep::Atomic(atoms) => atoms
                .iter()
                .map(|a| {
                    let x = g.dot(&DVector::from_column_slice(&a.atom));
                    let comp = if x.abs() <= 1.0 { x } else { 0.0 };
                    (Complex::new(0.0, x).exp() - 1.0 - Complex::new(0.0, comp)) * a.rate
                })
                .sum(),
            LevyMeasureRep::DiagonalStable(comps) => {
                let s: f64 = comps
                    .iter()
                    .zip(g.iter())
                    .map(|(c, gk)| (c.scale * gk.abs()).powf(c.alpha))
                    .sum();
                Complex::new(-s, 0.0)
            }
            LevyMeasureRep::CanonicalStable { alpha } => Complex::new(-g.norm().powf(*alpha), 0.0),
            LevyMeasureRep::Sum(parts) => parts.iter().map(|p| p.exponent(g)).sum(),
        }
    }
}

fn atoms_symmetric(atoms: &[(DVector<f64>, f64)]) -> bool {
    let close = |x: &DVector<f64>, y: &DVector<f64>| (x - y).norm() <= 1e-12 * (1.0 + x.norm());
    atoms.iter().all(|(h, _)| {
        let plus: f64 = atoms
            .iter()
            .filter(|(k, _)| close(k, h))
            .map(|(_, r)| r)
            .sum();
        let neg = -h;
        let minus: f64 = atoms
            .iter()
            .filter(|(k, _)| close(k, &neg))
            .map(|(_, r)| r)
            .sum();
        (plus - minus).abs() <= 1e-12 * plus.max(1.0)
    })
}

/// The cylindrical triplet `(a, Q, lambda)` on the truncated space `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct CylCharacteristics {
    a: HVec,
    q: DMatrix<f64>,
    levy: LevyMeasureRep,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct CharsDoc {
    pub a: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    pub levy: LevyMeasureRep,
}

impl TryFrom<CharsDoc> for CylCharacteristics {
    type Error = CoreError;
    fn try_from(doc: CharsDoc) -> Result<Self> {
        let d = doc.a.len();
        if doc.q.len() != d * d {
            return Err(CoreError::DimensionMismatch {
                expected: d * d,
                found: doc.q.len(),
                context: "row-major Q",
            });
        }
        CylCharacteristics::new(
            HVec::new(Space::G, doc.a)?,
            DMatrix::from_row_slice(d, d, &doc.q),
            doc.levy,
        )
    }
}

impl From<&CylCharacteristics> for CharsDoc {
    fn from(c: &CylCharacteristics) -> Self {
        let d = c.d_g();
        let mut q = Vec::with_capacity(d * d);
        for r in 0..d {
            for col in 0..d {
                q.push(c.q[(r, col)]);
            }
        }
        CharsDoc {
            a: c.a.as_slice().to_vec(),
            q,
            levy: c.levy.clone(),
        }
    }
}

impl Serialize for CylCharacteristics {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CharsDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CylCharacteristics {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = CharsDoc::deserialize(d)?;
        CylCharacteristics::try_from(doc).map_err(serde::de::Error::custom)
    }
}

impl CylCharacteristics {
    pub fn new(a: HVec, q: DMatrix<f64>, levy: LevyMeasureRep) -> Result<Self> {
        let d = a.dim();
        if q.shape() != (d, d) {
            return Err(CoreError::DimensionMismatch {
                expected: d,
                found: q.nrows(),
                context: "Q must be d_G x d_G",
            });
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("Q"));
        }
        let asym = (&q - q.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + q.abs().max()) {
            return Err(CoreError::InvalidParameter("Q is not symmetric".into()));
        }
        let min_eig = q.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-12 * (1.0 + q.abs().max()) {
            return Err(CoreError::InvalidParameter(format!(
                "Q has negative eigenvalue {min_eig}"
            )));
        }
        levy.validate(d)?;
        Ok(Self {
            a: HVec::from_dvector_unchecked(Space::G, a.into_inner()),
            q,
            levy,
        })
    }

    pub fn zero(d_g: usize) -> Self {
        Self {
            a: HVec::zeros(Space::G, d_g),
            q: DMatrix::zeros(d_g, d_g),
            levy: LevyMeasureRep::Zero,
        }
    }

    /// Standard cylindrical Brownian motion, `Q = I`.
    pub fn gaussian(d_g: usize) -> Self {
        Self {
            a: HVec::zeros(Space::G, d_g),
            q: DMatrix::identity(d_g, d_g),
            levy: LevyMeasureRep::Zero,
        }
    }

    pub fn canonical_stable(d_g: usize, alpha: f64) -> Result<Self> {
        Self::new(
            HVec::zeros(Space::G, d_g),
            DMatrix::zeros(d_g, d_g),
            LevyMeasureRep::CanonicalStable { alpha },
        )
    }

    pub fn diagonal_stable(comps: Vec<StableComponent>) -> Result<Self> {
        let d = comps.len();
        if d == 0 {
            return Err(CoreError::InvalidParameter("no stable components".into()));
        }
        Self::new(
            HVec::zeros(Space::G, d),
            DMatrix::zeros(d, d),
            LevyMeasureRep::DiagonalStable(comps),
        )
    }

    pub fn compound_poisson(a: HVec, atoms: Vec<Atom>) -> Result<Self> {
        let d = a.dim();
        Self::new(a, DMatrix::zeros(d, d), LevyMeasureRep::Atomic(atoms))
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn a(&self) -> &HVec {
        &self.a
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn levy(&self) -> &LevyMeasureRep {
        &self.levy
    }

    pub fn d_g(&self) -> usize {
        self.a.dim()
    }

    /// Triplet of the independent sum of two drivers.
    pub fn sum(&self, other: &CylCharacteristics) -> Result<Self> {
        if self.d_g() != other.d_g() {
            return Err(CoreError::DimensionMismatch {
                expected: self.d_g(),
                found: other.d_g(),
                context: "summed characteristics",
            });
        }
        let parts = |l: &LevyMeasureRep| match l {
            LevyMeasureRep::Sum(p) => p.clone(),
            LevyMeasureRep::Zero => Vec::new(),
            other => vec![other.clone()],
        };
        let mut levy = parts(&self.levy);
        levy.extend(parts(&other.levy));
        let levy = match levy.len() {
            0 => LevyMeasureRep::Zero,
            1 => levy.pop().unwrap(),
            _ => LevyMeasureRep::Sum(levy),
        };
        Self::new(
            HVec::from_dvector_unchecked(Space::G, self.a.coords() + other.a.coords()),
            &self.q + &other.q,
            levy,
        )
    }

    pub fn is_symmetric(&self) -> bool {
        self.levy.is_symmetric()
    }

    fn check_g(&self, g: &HVec) -> Result<()> {
        if g.dim() != self.d_g() {
            return Err(CoreError::DimensionMismatch {
                expected: self.d_g(),
                found: g.dim(),
                context: "vector in G",
            });
        }
        Ok(())
    }

    /// The cylindrical drift functional `a(g)`.
    pub fn cylindrical_drift(&self, g: &HVec) -> Result<f64> {
        self.check_g(g)?;
        Ok(self.drift_at(g.coords()))
    }

    fn drift_at(&self, g: &DVector<f64>) -> f64 {
        let jumps: f64 = self
            .levy
            .atoms()
            .iter()
            .map(|(h, r)| {
                let x = g.dot(h);
                if x.abs() <= 1.0 {
                    r * x
                } else {
                    0.0
                }
            })
            .sum();
        self.a.coords().dot(g) + jumps
    }

    /// The symbol `S(g)`.
    pub fn symbol(&self, g: &HVec) -> Result<Complex<f64>> {
        self.check_g(g)?;
        Ok(self.symbol_at(g.coords()))
    }

    pub(crate) fn symbol_at(&self, g: &DVector<f64>) -> Complex<f64> {
        let quad = (&self.q * g).dot(g);
        Complex::new(-0.5 * quad, self.drift_at(g)) + self.levy.exponent(g)
    }
}

/// `exp(t S(g))`, the characteristic function of `L(t)g`.
pub fn symbol_eval(chars: &CylCharacteristics, g: &HVec, t: f64) -> Result<Complex<f64>> {
    Ok((chars.symbol(g)? * t).exp())
}

/// Finite sample of the restriction of a Levy measure on `H` to the complement
/// of the closed unit ball.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpSample {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// Number of Monte-Carlo draws behind the sample (0 when exact).
    pub draws: usize,
}

impl JumpSample {
    fn empty() -> Self {
        Self {
            points: Vec::new(),
            weights: Vec::new(),
            draws: 0,
        }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// A Levy measure on the truncated space `H`.
#[derive(Clone, Debug, PartialEq)]
pub enum LevyH {
    Zero,
    Atomic(Vec<(DVector<f64>, f64)>),
    /// Image of independent stable coordinates: rays along `v_k = Phi e_k`.
    DiagonalStable(Vec<(StableComponent, DVector<f64>)>),
    /// Image of the canonical stable measure under `phi`.
    CanonicalStable {
        alpha: f64,
        phi: DMatrix<f64>,
    },
    /// Weighted tail sample (only jumps outside the unit ball).
    Sampled(JumpSample),
    Sum(Vec<LevyH>),
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .collect()
}

impl LevyH {
    /// `lambda o phi^{-1}`.
    pub fn pushforward(rep: &LevyMeasureRep, phi: &DMatrix<f64>) -> LevyH {
        match rep {
            LevyMeasureRep::Zero => LevyH::Zero,
            LevyMeasureRep::Atomic(atoms) => LevyH::Atomic(
                atoms
                    .iter()
                    .map(|a| (phi * DVector::from_column_slice(&a.atom), a.rate))
                    .filter(|(h, _)| h.norm() > 0.0)
                    .collect(),
            ),
            LevyMeasureRep::DiagonalStable(comps) => LevyH::DiagonalStable(
                comps
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (*c, phi.column(k).into_owned()))
                    .filter(|(c, v)| c.scale > 0.0 && v.norm() > 0.0)
                    .collect(),
            ),
            LevyMeasureRep::CanonicalStable { alpha } => LevyH::CanonicalStable {
                alpha: *alpha,
                phi: phi.clone(),
            },
            LevyMeasureRep::Sum(parts) => {
                LevyH::Sum(parts.iter().map(|p| LevyH::pushforward(p, phi)).collect())
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            LevyH::Zero | LevyH::DiagonalStable(_) | LevyH::CanonicalStable { .. } => true,
            LevyH::Atomic(atoms) => atoms_symmetric(atoms),
            LevyH::Sampled(s) => s.points.is_empty(),
            LevyH::Sum(parts) => {
                let atoms: Vec<(DVector<f64>, f64)> = parts
                    .iter()
                    .filter_map(|p| match p {
                        LevyH::Atomic(a) => Some(a.clone()),
                        _ => None,
                    })
                    .flatten()
                    .collect();
                atoms_symmetric(&atoms)
                    && parts
                        .iter()
                        .all(|p| matches!(p, LevyH::Atomic(_)) || p.is_symmetric())
            }
        }
    }

    /// `lambda_H({||h|| > 1})`.
    pub fn mass_outside_unit_ball(&self) -> f64 {
        match self {
            LevyH::Zero => 0.0,
            LevyH::Atomic(atoms) => atoms
                .iter()
                .filter(|(h, _)| h.norm() > 1.0)
                .map(|(_, r)| r)
                .sum(),
            LevyH::DiagonalStable(rays) => rays
                .iter()
                .map(|(c, v)| {
                    let a = c.alpha;
                    2.0 * stable_levy_constant(a) * (c.scale * v.norm()).powf(a) / a
                })
                .sum(),
            LevyH::CanonicalStable { alpha, phi } => {
                let p = alpha / 2.0;
                2f64.powf(p) * gaussian_norm_moment(&singular_values(phi), p) / gamma(1.0 - p)
            }
            LevyH::Sampled(s) => s.mass(),
            LevyH::Sum(parts) => parts.iter().map(|p| p.mass_outside_unit_ball()).sum(),
        }
    }

    /// `int (||h||^2 ^ 1) dlambda_H`.
    pub fn small_jump_energy(&self) -> Result<f64> {
        Ok(match self {
            LevyH::Zero => 0.0,
            LevyH::Atomic(atoms) => atoms
                .iter()
                .map(|(h, r)| r * h.norm_squared().min(1.0))
                .sum(),
            LevyH::DiagonalStable(rays) => rays
                .iter()
                .map(|(c, v)| {
                    let a = c.alpha;
                    4.0 * stable_levy_constant(a) * (c.scale * v.norm()).powf(a) / (a * (2.0 - a))
                })
                .sum(),
            LevyH::CanonicalStable { alpha, phi } => {
                let p = alpha / 2.0;
                2f64.powf(p) * gaussian_norm_moment(&singular_values(phi), p) / gamma(2.0 - p)
            }
            LevyH::Sampled(_) => {
                return Err(CoreError::Unsupported(
                    "small-jump energy of a tail sample".into(),
                ))
            }
            LevyH::Sum(parts) => {
                let mut s = 0.0;
                for p in parts {
                    s += p.small_jump_energy()?;
                }
                s
            }
        })
    }

    /// `int_{||h|| <= 1} h h^T dlambda_H`.
    pub fn small_jump_second_moment(&self, d_h: usize) -> Result<DMatrix<f64>> {
        Ok(match self {
            LevyH::Zero => DMatrix::zeros(d_h, d_h),
            LevyH::Atomic(atoms) => {
                let mut m = DMatrix::zeros(d_h, d_h);
                for (h, r) in atoms.iter().filter(|(h, _)| h.norm() <= 1.0) {
                    m += h * h.transpose() * *r;
                }
                m
            }
            LevyH::DiagonalStable(rays) => {
                let mut m = DMatrix::zeros(d_h, d_h);
                for (c, v) in rays {
                    let a = c.alpha;
                    let w = v.norm();
                    let coef = 2.0 * stable_levy_constant(a) * c.scale.powf(a) * w.powf(a - 2.0)
                        / (2.0 - a);
                    m += v * v.transpose() * coef;
                }
                m
            }
            LevyH::CanonicalStable { alpha, phi } => canonical_second_moment(*alpha, phi),
            LevyH::Sampled(_) => {
                return Err(CoreError::Unsupported(
                    "second moment of a tail sample".into(),
                ))
            }
            LevyH::Sum(parts) => {
                let mut m = DMatrix::zeros(d_h, d_h);
                for p in parts {
                    m += p.small_jump_second_moment(d_h)?;
                }
                m
            }
        })
    }

    /// `int (e^{i<u,h>} - 1 - i<u, theta(h)>) dlambda_H`.
    pub fn char_exponent(&self, u: &DVector<f64>) -> Result<Complex<f64>> {
        Ok(match self {
            LevyH::Zero => Complex::new(0.0, 0.0),
            LevyH::Atomic(atoms) => atoms
                .iter()
                .map(|(h, r)| {
                    let x = u.dot(h);
                    let c = u.dot(&theta_vec(h));
                    (Complex::new(0.0, x).exp() - 1.0 - Complex::new(0.0, c)) * *r
                })
                .sum(),
            LevyH::DiagonalStable(rays) => Complex::new(
                -rays
                    .iter()
                    .map(|(c, v)| (c.scale * u.dot(v).abs()).powf(c.alpha))
                    .sum::<f64>(),
                0.0,
            ),
            LevyH::CanonicalStable { alpha, phi } => {
                Complex::new(-phi.tr_mul(u).norm().powf(*alpha), 0.0)
            }
            LevyH::Sampled(_) => {
                return Err(CoreError::Unsupported(
                    "characteristic exponent of a tail sample".into(),
                ))
            }
            LevyH::Sum(parts) => {
                let mut s = Complex::new(0.0, 0.0);
                for p in parts {
                    s += p.char_exponent(u)?;
                }
                s
            }
        })
    }

    /// `int (theta(Oh) - O theta(h)) dlambda_H`; the integrand vanishes on the
    /// closed unit ball and is odd in `h`.
    pub fn contraction_correction(&self, o: &DMatrix<f64>) -> Result<DVector<f64>> {
        let d = o.nrows();
        let term = |h: &DVector<f64>| theta_vec(&(o * h)) - o * theta_vec(h);
        Ok(match self {
            LevyH::Zero | LevyH::DiagonalStable(_) | LevyH::CanonicalStable { .. } => {
                DVector::zeros(d)
            }
            LevyH::Atomic(atoms) => {
                let mut s = DVector::zeros(d);
                for (h, r) in atoms.iter().filter(|(h, _)| h.norm() > 1.0) {
                    s += term(h) * *r;
                }
                s
            }
            LevyH::Sampled(sample) => {
                if sample.draws > 0 && sample.draws < MIN_JUMP_SAMPLE {
                    return Err(CoreError::InsufficientSupport {
                        points: sample.draws,
                        required: MIN_JUMP_SAMPLE,
                    });
                }
                let mut s = DVector::zeros(d);
                for (h, w) in sample.points.iter().zip(&sample.weights) {
                    s += term(h) * *w;
                }
                s
            }
            LevyH::Sum(parts) => {
                let mut s = DVector::zeros(d);
                for p in parts {
                    s += p.contraction_correction(o)?;
                }
                s
            }
        })
    }

    /// Importance-weighted sample of the restriction to `{||h|| > 1}`.
    /// Atomic parts are copied exactly; stable parts use `n` draws each.
    pub fn tail_sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> JumpSample {
        match self {
            LevyH::Zero => JumpSample::empty(),
            LevyH::Atomic(atoms) => {
                let (points, weights) = atoms
                    .iter()
                    .filter(|(h, _)| h.norm() > 1.0)
                    .cloned()
                    .unzip();
                JumpSample {
                    points,
                    weights,
                    draws: 0,
                }
            }
            LevyH::DiagonalStable(rays) => {
                let masses: Vec<f64> = rays
                    .iter()
                    .map(|(c, v)| {
                        2.0 * stable_levy_constant(c.alpha) * (c.scale * v.norm()).powf(c.alpha)
                            / c.alpha
                    })
                    .collect();
                let total: f64 = masses.iter().sum();
                let mut out = JumpSample::empty();
                if total == 0.0 {
                    return out;
                }
                for _ in 0..n {
                    let mut x = rng.random::<f64>() * total;
                    let mut k = 0;
                    while k + 1 < masses.len() && x >= masses[k] {
                        x -= masses[k];
                        k += 1;
                    }
                    let (c, v) = &rays[k];
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let radius = u.powf(-1.0 / c.alpha);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    out.points.push(v * (sign * radius / v.norm()));
                    out.weights.push(total / n as f64);
                }
                out.draws = n;
                out
            }
            LevyH::CanonicalStable { alpha, phi } => {
                let beta = alpha / 2.0;
                let g1b = gamma(1.0 - beta);
                let mut out = JumpSample::empty();
                for _ in 0..n {
                    let y = phi * crate::linalg::gaussian_vector(rng, phi.ncols());
                    let w = y.norm_squared();
                    if w == 0.0 {
                        continue;
                    }
                    let mass = (2.0 * w).powf(beta) / g1b;
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let s = u.powf(-1.0 / beta) / (2.0 * w);
                    out.points.push(y * (2.0 * s).sqrt());
                    out.weights.push(mass / n as f64);
                }
                out.draws = n;
                out
            }
            LevyH::Sampled(s) => s.clone(),
            LevyH::Sum(parts) => {
                let mut out = JumpSample::empty();
                for p in parts {
                    let s = p.tail_sample(rng, n);
                    out.points.extend(s.points);
                    out.weights.extend(s.weights);
                    out.draws = if out.draws == 0 {
                        s.draws
                    } else if s.draws == 0 {
                        out.draws
                    } else {
                        out.draws.min(s.draws)
                    };
                }
                out
            }
        }
    }
}

/// `int_{||h|| <= 1} h h^T` for the image of the canonical stable measure under `phi`,
/// from the subordinated-Gaussian representation `h = sqrt(2s) phi Z`.
fn canonical_second_moment(alpha: f64, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let d_h = phi.nrows();
    let svd = phi.clone().svd(true, false);
    let u = svd.u.unwrap();
    let s2: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let beta = alpha / 2.0;
    let smax = s2.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(d_h, d_h);
    }
    let smin = s2
        .iter()
        .cloned()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let coef = beta * 2f64.powf(beta) / (gamma(2.0 - beta) * gamma(1.0 - beta));
    let lo = crate::stats::log_lower_cut(smax, 1.0 - beta);
    let hi = -smin.ln() + 45.0 / beta;
    let mut diag = vec![0.0; s2.len()];
    for (i, d) in diag.iter_mut().enumerate() {
        if s2[i] == 0.0 {
            continue;
        }
        let head = s2[i] * ((1.0 - beta) * lo).exp() / (1.0 - beta);
        *d = coef
            * (head
                + crate::stats::integrate_log(
                    |x| {
                        let t = x.exp();
                        let log_det: f64 = s2.iter().map(|v| -0.5 * (2.0 * t * v).ln_1p()).sum();
                        ((1.0 - beta) * x).exp() * s2[i] * log_det.exp() / (1.0 + 2.0 * t * s2[i])
                    },
                    lo,
                    hi,
                    0.02,
                ));
    }
    let k = s2.len();
    let uk = u.columns(0, k).into_owned();
    &uk * DMatrix::from_diagonal(&DVector::from_vec(diag)) * uk.transpose()
}

/// Characteristics `(b^theta, Q_H, lambda_H)` of an `H`-valued Levy law.
#[derive(Clone, Debug, PartialEq)]
pub struct GenuineTriplet {
    pub b_theta: HVec,
    pub q_h: DMatrix<f64>,
    pub levy_h: LevyH,
}

impl GenuineTriplet {
    pub fn new(b_theta: HVec, q_h: DMatrix<f64>, levy_h: LevyH) -> Result<Self> {
        let d = b_theta.dim();
        if q_h.shape() != (d, d) {
            return Err(CoreError::DimensionMismatch {
                expected: d,
                found: q_h.nrows(),
                context: "Q_H",
            });
        }
        Ok(Self {
            b_theta: HVec::from_dvector_unchecked(Space::H, b_theta.into_inner()),
            q_h,
            levy_h,
        })
    }

    pub fn d_h(&self) -> usize {
        self.b_theta.dim()
    }

    /// `E exp(i<u, X(t)>)` for the Levy process with this triplet.
    pub fn char_fn(&self, u: &HVec, t: f64) -> Result<Complex<f64>> {
        if u.dim() != self.d_h() {
            return Err(CoreError::DimensionMismatch {
                expected: self.d_h(),
                found: u.dim(),
                context: "GenuineTriplet::char_fn",
            });
        }
        let u = u.coords();
        let quad = (&self.q_h * u).dot(u);
        let e = Complex::new(-0.5 * quad, self.b_theta.coords().dot(u))
            + self.levy_h.char_exponent(u)?;
        Ok((e * t).exp())
    }
}

/// Triplet of `Phi(L)`. The first characteristic follows the conversion
/// `<b, u> = a(Phi^* u) + int (<theta(h), u> - <h, u> 1{|<h, u>| <= 1}) dlambda_H`
/// evaluated along the basis of `H`.
pub fn pushforward(chars: &CylCharacteristics, phi: &HsMap) -> Result<GenuineTriplet> {
    if phi.d_g() != chars.d_g() {
        return Err(CoreError::DimensionMismatch {
            expected: chars.d_g(),
            found: phi.d_g(),
            context: "pushforward",
        });
    }
    let m = phi.matrix();
    let d_h = phi.d_h();
    let q_h = m * chars.q() * m.transpose();
    let levy_h = LevyH::pushforward(chars.levy(), m);
    let h_atoms: Vec<(DVector<f64>, f64)> = chars
        .levy()
        .atoms()
        .into_iter()
        .map(|(h, r)| (m * h, r))
        .collect();
    let mut b = DVector::zeros(d_h);
    for j in 0..d_h {
        let g = m.row(j).transpose();
        let mut v = chars.drift_at(&g);
        for (h, r) in &h_atoms {
            let x = h[j];
            let ind = if x.abs() <= 1.0 { x } else { 0.0 };
            v += r * (theta_vec(h)[j] - ind);
        }
        b[j] = v;
    }
    Ok(GenuineTriplet {
        b_theta: HVec::from_dvector_unchecked(Space::H, b),
        q_h,
        levy_h,
    })
}

/// First characteristic of `O Phi(L)`.
pub fn compose_contraction(triplet: &GenuineTriplet, o: &Contraction) -> Result<HVec> {
    if o.dim() != triplet.d_h() {
        return Err(CoreError::DimensionMismatch {
            expected: triplet.d_h(),
            found: o.dim(),
            context: "compose_contraction",
        });
    }
    let b = o.matrix() * triplet.b_theta.coords()
        + triplet.levy_h.contraction_correction(o.matrix())?;
    Ok(HVec::from_dvector_unchecked(Space::H, b))
}

/// Symmetric positive semi-definite operator `Q_H + int_{||u|| <= 1} u u^T dlambda_H`.
#[derive(Clone, Debug, PartialEq)]
pub struct SOperator {
    pub matrix: DMatrix<f64>,
}

pub fn s_operator(q_h: &DMatrix<f64>, levy_h: &LevyH) -> Result<SOperator> {
    let d = q_h.nrows();
    let m = q_h + levy_h.small_jump_second_moment(d)?;
    Ok(SOperator {
        matrix: (&m + m.transpose()) * 0.5,
    })
}

/// Monte-Carlo estimate with per-coordinate standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VecEstimate {
    pub level: u32,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalarEstimate {
    pub level: u32,
    pub value: f64,
    pub stderr: f64,
}

/// Per-replica partition sums `sum_i theta(d_i)` and `sum_i ||d_i||^2 ^ 1` on
/// nested dyadic partitions, all aggregated from one path on the finest level.
#[derive(Clone, Debug)]
pub struct PartitionSums {
    pub levels: Vec<u32>,
    /// `[level][replica]`
    pub b: Vec<Vec<DVector<f64>>>,
    pub k: Vec<Vec<f64>>,
}

impl PartitionSums {
    pub fn b_estimates(&self) -> Vec<VecEstimate> {
        self.levels
            .iter()
            .zip(&self.b)
            .map(|(lvl, reps)| vec_estimate(*lvl, reps))
            .collect()
    }

    pub fn k_estimates(&self) -> Vec<ScalarEstimate> {
        self.levels
            .iter()
            .zip(&self.k)
            .map(|(lvl, reps)| {
                let (value, stderr) = mean_stderr(reps);
                ScalarEstimate {
                    level: *lvl,
                    value,
                    stderr,
                }
            })
            .collect()
    }

    /// Paired standard error of `k[j+1] - k[j]`.
    pub fn k_increment_stderr(&self, j: usize) -> f64 {
        let d: Vec<f64> = self.k[j + 1]
            .iter()
            .zip(&self.k[j])
            .map(|(a, b)| a - b)
            .collect();
        mean_stderr(&d).1
    }

    /// Paired standard error of `||b[j+1] - b[j]||`, combined over coordinates.
    pub fn b_increment_stderr(&self, j: usize) -> f64 {
        let d: Vec<DVector<f64>> = self.b[j + 1]
            .iter()
            .zip(&self.b[j])
            .map(|(a, b)| a - b)
            .collect();
        vec_estimate(0, &d)
            .stderr
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }
}

fn vec_estimate(level: u32, reps: &[DVector<f64>]) -> VecEstimate {
    let d = reps.first().map_or(0, |v| v.len());
    let mut value = Vec::with_capacity(d);
    let mut stderr = Vec::with_capacity(d);
    for c in 0..d {
        let col: Vec<f64> = reps.iter().map(|v| v[c]).collect();
        let (m, s) = mean_stderr(&col);
        value.push(m);
        stderr.push(s);
    }
    VecEstimate {
        level,
        value,
        stderr,
    }
}

/// Per-level `b` and `k` samples of one batch.
type BatchSums = (Vec<Vec<DVector<f64>>>, Vec<Vec<f64>>);

pub fn partition_sums(
    driver: &Driver,
    phi: &HsMap,
    interval: (f64, f64),
    levels: &[u32],
    mc_samples: usize,
    stream: RngStream,
) -> Result<PartitionSums> {
    if phi.d_g() != driver.d_g() {
        return Err(CoreError::DimensionMismatch {
            expected: driver.d_g(),
            found: phi.d_g(),
            context: "partition estimator",
        });
    }
    if mc_samples < 1000 {
        return Err(CoreError::InvalidParameter(format!(
            "partition estimators need at least 1000 samples, got {mc_samples}"
        )));
    }
    if levels.is_empty() || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::InvalidPartition(
            "dyadic levels must be strictly increasing".into(),
        ));
    }
    let finest = *levels.last().unwrap();
    if finest > 20 {
        return Err(CoreError::InvalidPartition(format!(
            "dyadic level {finest} too fine"
        )));
    }
    let fine = Partition::dyadic(interval.0, interval.1, finest)?;
    let n_fine = fine.intervals();
    let dt = fine.mesh();
    let m = phi.matrix();
    let d_h = phi.d_h();

    let per_batch: Vec<BatchSums> = batches(mc_samples)
        .into_par_iter()
        .enumerate()
        .map(|(bi, (_, len))| {
            let mut rng = stream.child(bi as u64).rng();
            let mut b = vec![Vec::with_capacity(len); levels.len()];
            let mut k = vec![Vec::with_capacity(len); levels.len()];
            let mut incs = vec![DVector::zeros(d_h); n_fine];
            let mut g = DVector::zeros(driver.d_g());
            for _ in 0..len {
                for inc in incs.iter_mut() {
                    driver.g_increment_into(dt, &mut rng, &mut g);
                    inc.gemv(1.0, m, &g, 0.0);
                }
                for (li, &lvl) in levels.iter().enumerate() {
                    let block = 1usize << (finest - lvl);
                    let mut bs = DVector::zeros(d_h);
                    let mut ks = 0.0;
                    for chunk in incs.chunks(block) {
                        let mut d = DVector::zeros(d_h);
                        for x in chunk {
                            d += x;
                        }
                        ks += d.norm_squared().min(1.0);
                        bs += theta_vec(&d);
                    }
                    b[li].push(bs);
                    k[li].push(ks);
                }
            }
            (b, k)
        })
        .collect();

    let mut b = vec![Vec::with_capacity(mc_samples); levels.len()];
    let mut k = vec![Vec::with_capacity(mc_samples); levels.len()];
    for (bb, kk) in per_batch {
        for li in 0..levels.len() {
            b[li].extend(bb[li].iter().cloned());
            k[li].extend(kk[li].iter().cloned());
        }
    }
    Ok(PartitionSums {
        levels: levels.to_vec(),
        b,
        k,
    })
}

/// Estimates of `sum_i E theta(Phi(L)(t_{i+1}) - Phi(L)(t_i))` per dyadic level.
pub fn partition_estimate_b(
    driver: &Driver,
    phi: &HsMap,
    interval: (f64, f64),
    levels: &[u32],
    mc_samples: usize,
    stream: RngStream,
) -> Result<Vec<VecEstimate>> {
    Ok(partition_sums(driver, phi, interval, levels, mc_samples, stream)?.b_estimates())
}

/// Estimates of `sum_i E[||Phi(L)(t_{i+1}) - Phi(L)(t_i)||^2 ^ 1]` per dyadic level.
pub fn partition_estimate_k(
    driver: &Driver,
    phi: &HsMap,
    interval: (f64, f64),
    levels: &[u32],
    mc_samples: usize,
    stream: RngStream,
) -> Result<Vec<ScalarEstimate>> {
    Ok(partition_sums(driver, phi, interval, levels, mc_samples, stream)?.k_estimates())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{haar_orthogonal, sample_contraction, ContractionMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(v: &[f64]) -> HVec {
        HVec::new(Space::G, v.to_vec()).unwrap()
    }

    fn single_atom(h0: &[f64], r: f64, a: &[f64]) -> CylCharacteristics {
        CylCharacteristics::compound_poisson(
            g(a),
            vec![Atom {
                atom: h0.to_vec(),
                rate: r,
            }],
        )
        .unwrap()
    }

    #[test]
    fn canonical_stable_symbol() {
        let c = CylCharacteristics::canonical_stable(3, 1.3).unwrap();
        let x = g(&[0.3, -1.0, 2.0]);
        let got = symbol_eval(&c, &x, 0.7).unwrap();
        let want = (-0.7 * x.norm().powf(1.3)).exp();
        assert!((got - Complex::new(want, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn gaussian_symbol() {
        let c = CylCharacteristics::gaussian(2);
        let x = g(&[1.0, 2.0]);
        let got = symbol_eval(&c, &x, 2.0).unwrap();
        assert!((got.re - (-5.0f64).exp()).abs() < 1e-15 && got.im == 0.0);
    }

    #[test]
    fn single_atom_symbol_matches_direct_arithmetic() {
        let (h0, r, t) = ([0.1, -0.05], 2.5, 0.8);
        // uncompensated drift -r h0 makes the cylindrical drift vanish near 0
        let c = single_atom(&h0, r, &[-r * h0[0], -r * h0[1]]);
        let x = g(&[1.2, 0.4]);
        let dot = 1.2 * 0.1 - 0.4 * 0.05;
        let direct = (Complex::new(0.0, dot).exp() - 1.0 - Complex::new(0.0, dot)) * (t * r);
        let got = symbol_eval(&c, &x, t).unwrap();
        assert!((got - direct.exp()).norm() < 1e-14);
        assert!(got.norm() <= 1.0);
    }

    #[test]
    fn single_atom_pushforward_drift() {
        let r = 1.7;
        let c = single_atom(&[1.0, 0.0], r, &[0.0, 0.0]);
        let phi = HsMap::from_row_major(2, 2, &[3.0, 0.0, 0.0, 1.0]).unwrap();
        let t = pushforward(&c, &phi).unwrap();
        assert!((t.b_theta.as_slice()[0] - r).abs() < 1e-15);
        assert_eq!(t.b_theta.as_slice()[1], 0.0);
    }

    #[test]
    fn gaussian_pushforward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = HsMap::random(&mut rng, 3, 4, 1.0);
        let t = pushforward(&CylCharacteristics::gaussian(4), &phi).unwrap();
        assert!((&t.q_h - phi.matrix() * phi.matrix().transpose()).norm() < 1e-14);
        assert_eq!(t.b_theta.norm(), 0.0);
        assert_eq!(t.levy_h, LevyH::Zero);
    }

    #[test]
    fn symmetric_reps_have_zero_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = HsMap::random(&mut rng, 3, 3, 4.0);
        let atoms = vec![
            Atom {
                atom: vec![2.0, 0.3, 0.0],
                rate: 0.5,
            },
            Atom {
                atom: vec![-2.0, -0.3, 0.0],
                rate: 0.5,
            },
            Atom {
                atom: vec![0.0, 0.1, 0.1],
                rate: 2.0,
            },
            Atom {
                atom: vec![0.0, -0.1, -0.1],
                rate: 2.0,
            },
        ];
        let cp = CylCharacteristics::compound_poisson(HVec::zeros(Space::G, 3), atoms).unwrap();
        assert!(cp.is_symmetric());
        for c in [cp, CylCharacteristics::canonical_stable(3, 0.9).unwrap()] {
            let t = pushforward(&c, &phi).unwrap();
            assert!(t.b_theta.norm() < 1e-14);
            let o = sample_contraction(&mut rng, 3, ContractionMode::ScaledSvd);
            assert!(compose_contraction(&t, &o).unwrap().norm() < 1e-14);
        }
    }

    #[test]
    fn compose_single_atom_hand_case() {
        let r = 0.8;
        let b0 = HVec::new(Space::H, vec![0.2, -0.1]).unwrap();
        let t = GenuineTriplet::new(
            b0.clone(),
            DMatrix::zeros(2, 2),
            LevyH::Atomic(vec![(DVector::from_vec(vec![3.0, 0.0]), r)]),
        )
        .unwrap();
        let o =
            Contraction::new(DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.0, 0.0, 1.0])).unwrap();
        let got = compose_contraction(&t, &o).unwrap();
        let want = o.matrix() * b0.coords() + DVector::from_vec(vec![2.0 / 3.0 * r, 0.0]);
        assert!((got.coords() - want).norm() < 1e-15);
        let id = Contraction::identity(2);
        assert_eq!(compose_contraction(&t, &id).unwrap(), t.b_theta);
    }

    #[test]
    fn s_operator_hand_cases() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(s_operator(&q, &LevyH::Zero).unwrap().matrix, q);
        let r = 3.0;
        let inside = LevyH::Atomic(vec![(DVector::from_vec(vec![0.5, 0.0]), r)]);
        let s = s_operator(&DMatrix::zeros(2, 2), &inside).unwrap().matrix;
        assert!((s - DMatrix::from_row_slice(2, 2, &[r * 0.25, 0.0, 0.0, 0.0])).norm() < 1e-15);
        let outside = LevyH::Atomic(vec![(DVector::from_vec(vec![1.5, 0.0]), r)]);
        assert_eq!(
            s_operator(&DMatrix::zeros(2, 2), &outside).unwrap().matrix,
            DMatrix::zeros(2, 2)
        );
    }

    #[test]
    fn canonical_rank_one_matches_diagonal_closed_forms() {
        // phi = sigma e (x) g with ||g|| = 1 has the law of a 1-d stable ray
        for &alpha in &[0.5, 0.8, 1.0, 1.2, 1.5, 1.9] {
            let sigma = 0.7;
            let e = DVector::from_vec(vec![0.0, 1.0, 0.0]);
            let gv = DVector::from_vec(vec![0.6, 0.0, 0.8]);
            let phi = HsMap::rank_one(&e, &gv, sigma);
            let canon = LevyH::CanonicalStable {
                alpha,
                phi: phi.matrix().clone(),
            };
            let diag = LevyH::DiagonalStable(vec![(
                StableComponent {
                    alpha,
                    scale: sigma,
                },
                e.clone(),
            )]);
            let rel = |a: f64, b: f64| (a / b - 1.0).abs();
            assert!(
                rel(
                    canon.small_jump_energy().unwrap(),
                    diag.small_jump_energy().unwrap()
                ) < 1e-7
            );
            assert!(
                rel(
                    canon.mass_outside_unit_ball(),
                    diag.mass_outside_unit_ball()
                ) < 1e-7
            );
            let sc = canon.small_jump_second_moment(3).unwrap();
            let sd = diag.small_jump_second_moment(3).unwrap();
            assert!((sc - &sd).norm() < 1e-7 * sd.norm());
        }
    }

    #[test]
    fn tail_sample_reproduces_tail_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = HsMap::random(&mut rng, 3, 3, 2.0);
        let canon = LevyH::CanonicalStable {
            alpha: 1.2,
            phi: phi.matrix().clone(),
        };
        let s = canon.tail_sample(&mut rng, 200_000);
        assert!(s.points.iter().all(|p| p.norm() > 1.0));
        assert!((s.mass() / canon.mass_outside_unit_ball() - 1.0).abs() < 0.02);
    }

    #[test]
    fn sampled_rep_requires_enough_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let canon = LevyH::CanonicalStable {
            alpha: 1.2,
            phi: DMatrix::identity(2, 2),
        };
        let small = LevyH::Sampled(canon.tail_sample(&mut rng, 100));
        let t = GenuineTriplet::new(HVec::zeros(Space::H, 2), DMatrix::zeros(2, 2), small).unwrap();
        assert!(matches!(
            compose_contraction(&t, &Contraction::identity(2)),
            Err(CoreError::InsufficientSupport { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let c = single_atom(&[0.5, 0.1], 2.0, &[0.3, 0.0]);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"variant\":\"atomic\""));
        assert_eq!(CylCharacteristics::from_json(&s).unwrap(), c);
        assert!(CylCharacteristics::from_json(
            r#"{"a":[0],"Q":[0],"levy":{"variant":"zero"},"x":1}"#
        )
        .is_err());
        assert!(CylCharacteristics::from_json(
            r#"{"a":[0,0],"Q":[1,2,0,1],"levy":{"variant":"zero"}}"#
        )
        .is_err());
    }

    fn random_atomic(rng: &mut ChaCha8Rng, d: usize, n: usize) -> CylCharacteristics {
        let atoms = (0..n)
            .map(|_| Atom {
                atom: crate::linalg::gaussian_vector(rng, d)
                    .iter()
                    .map(|x| x * 1.5)
                    .collect(),
                rate: 0.1 + rng.random::<f64>(),
            })
            .collect();
        let a = crate::linalg::gaussian_vector(rng, d) * 0.3;
        CylCharacteristics::compound_poisson(HVec::from_dvector(Space::G, a).unwrap(), atoms)
            .unwrap()
    }

    proptest! {
        #[test]
        fn pushforward_then_symbol(seed in any::<u64>(), t in 0.1f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = random_atomic(&mut rng, 4, 3);
            let q = crate::linalg::gaussian_matrix(&mut rng, 4, 4);
            c = c.sum(&CylCharacteristics::new(HVec::zeros(Space::G, 4), &q * q.transpose(), LevyMeasureRep::Zero).unwrap()).unwrap();
            let phi = HsMap::random(&mut rng, 3, 4, 2.0);
            let trip = pushforward(&c, &phi).unwrap();
            let u = HVec::from_dvector(Space::H, crate::linalg::gaussian_vector(&mut rng, 3)).unwrap();
            let lhs = symbol_eval(&c, &phi.adjoint_apply(&u).unwrap(), t).unwrap();
            let rhs = trip.char_fn(&u, t).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn drift_matches_closed_form(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_atomic(&mut rng, 3, 4);
            let phi = HsMap::random(&mut rng, 3, 3, 3.0);
            let trip = pushforward(&c, &phi).unwrap();
            let mut want = phi.matrix() * c.a().coords();
            for (h, r) in c.levy().atoms() {
                want += theta_vec(&(phi.matrix() * h)) * r;
            }
            prop_assert!((trip.b_theta.coords() - want).norm() < 1e-10);
        }

        #[test]
        fn composed_drift_within_contraction_bound(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_atomic(&mut rng, 4, 5);
            let phi = HsMap::random(&mut rng, 4, 4, 4.0);
            let trip = pushforward(&c, &phi).unwrap();
            let bound = trip.b_theta.norm() + 2.0 * trip.levy_h.mass_outside_unit_ball();
            for mode in [ContractionMode::Orthogonal, ContractionMode::ScaledSvd, ContractionMode::RankOne] {
                let o = sample_contraction(&mut rng, 4, mode);
                prop_assert!(compose_contraction(&trip, &o).unwrap().norm() <= bound + 1e-12);
            }
        }

        #[test]
        fn s_operator_is_symmetric_psd(seed in any::<u64>(), alpha in 0.2f64..1.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = HsMap::random(&mut rng, 4, 4, 3.0);
            let c = random_atomic(&mut rng, 4, 4)
                .sum(&CylCharacteristics::canonical_stable(4, alpha).unwrap()).unwrap();
            let trip = pushforward(&c, &phi).unwrap();
            let s = s_operator(&trip.q_h, &trip.levy_h).unwrap().matrix;
            prop_assert!((&s - s.transpose()).norm() < 1e-12);
            prop_assert!(s.symmetric_eigenvalues().min() > -1e-10);
        }

        #[test]
        fn rotated_canonical_energy_is_invariant(seed in any::<u64>(), alpha in 0.3f64..1.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = HsMap::random(&mut rng, 3, 5, 2.0);
            let o = haar_orthogonal(&mut rng, 3);
            let a = LevyH::CanonicalStable { alpha, phi: phi.matrix().clone() };
            let b = LevyH::CanonicalStable { alpha, phi: &o * phi.matrix() };
            let (ka, kb) = (a.small_jump_energy().unwrap(), b.small_jump_energy().unwrap());
            prop_assert!((ka / kb - 1.0).abs() < 1e-9);
        }
    }
}
