//! Truncated Hilbert-space arithmetic.
//!
//! `G` and `H` are represented by their first `d_G` (resp. `d_H`) basis
//! coordinates. Hilbert-Schmidt maps are dense `d_H x d_G` matrices and
//! contractions are dense `d_H x d_H` matrices of operator norm at most one.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Slack allowed on operator norms of contractions.
pub const CONTRACTION_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    G,
    H,
}

/// A vector in the truncated space `G` or `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct HVec {
    coords: DVector<f64>,
    space: Space,
}

impl HVec {
    pub fn new(space: Space, coords: Vec<f64>) -> Result<Self> {
        Self::from_dvector(space, DVector::from_vec(coords))
    }

    pub fn from_dvector(space: Space, coords: DVector<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(CoreError::InvalidParameter("vector of dimension 0".into()));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("HVec coordinates"));
        }
        Ok(Self { coords, space })
    }

    pub(crate) fn from_dvector_unchecked(space: Space, coords: DVector<f64>) -> Self {
        Self { coords, space }
    }

    pub fn zeros(space: Space, dim: usize) -> Self {
        Self {
            coords: DVector::zeros(dim),
            space,
        }
    }

    /// The `k`-th orthonormal basis vector.
    pub fn basis(space: Space, dim: usize, k: usize) -> Self {
        let mut coords = DVector::zeros(dim);
        coords[k] = 1.0;
        Self { coords, space }
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.coords
    }

    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }

    pub fn dot(&self, other: &HVec) -> f64 {
        self.coords.dot(&other.coords)
    }
}

/// The continuous truncation function: identity on the closed unit ball,
/// radial projection onto the unit sphere outside of it.
pub fn theta(h: &HVec) -> HVec {
    HVec {
        coords: theta_vec(&h.coords),
        space: h.space,
    }
}

#[inline]
pub(crate) fn theta_vec(h: &DVector<f64>) -> DVector<f64> {
    let n = h.norm();
    if n <= 1.0 {
        h.clone()
    } else {
        h / n
    }
}

/// A Hilbert-Schmidt operator `G -> H` on the truncated spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct HsMap {
    matrix: DMatrix<f64>,
    hs_norm: f64,
}

impl HsMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(CoreError::InvalidParameter("empty HS matrix".into()));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("HS matrix"));
        }
        Ok(Self::from_matrix_unchecked(matrix))
    }

    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<f64>) -> Self {
        let hs_norm = matrix.norm();
        Self { matrix, hs_norm }
    }

    pub fn from_row_major(d_h: usize, d_g: usize, data: &[f64]) -> Result<Self> {
        if data.len() != d_h * d_g {
            return Err(CoreError::DimensionMismatch {
                expected: d_h * d_g,
                found: data.len(),
                context: "row-major HS matrix",
            });
        }
        Self::new(DMatrix::from_row_slice(d_h, d_g, data))
    }

    pub fn zeros(d_h: usize, d_g: usize) -> Self {
        Self::from_matrix_unchecked(DMatrix::zeros(d_h, d_g))
    }

    pub fn identity(d: usize) -> Self {
        Self::from_matrix_unchecked(DMatrix::identity(d, d))
    }

    /// Random map with i.i.d. Gaussian entries rescaled to the given HS norm.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d_h: usize, d_g: usize, hs_norm: f64) -> Self {
        let m = gaussian_matrix(rng, d_h, d_g);
        let n = m.norm();
        Self::from_matrix_unchecked(m * (hs_norm / n))
    }

    /// Rank-one map `sigma * e (x) g`, i.e. `x -> sigma <g, x> e`.
    pub fn rank_one(e: &DVector<f64>, g: &DVector<f64>, sigma: f64) -> Self {
        Self::from_matrix_unchecked(e * g.transpose() * sigma)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn hs_norm(&self) -> f64 {
        self.hs_norm
    }

    pub fn d_h(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d_g(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_h() * self.d_g());
        for r in 0..self.d_h() {
            for c in 0..self.d_g() {
                out.push(self.matrix[(r, c)]);
            }
        }
        out
    }

    pub fn apply(&self, g: &HVec) -> Result<HVec> {
        if g.dim() != self.d_g() {
            return Err(CoreError::DimensionMismatch {
                expected: self.d_g(),
                found: g.dim(),
                context: "HsMap::apply",
            });
        }
        Ok(HVec::from_dvector_unchecked(
            Space::H,
            &self.matrix * g.coords(),
        ))
    }

    /// `Phi^* u` for `u` in `H`.
    pub fn adjoint_apply(&self, u: &HVec) -> Result<HVec> {
        if u.dim() != self.d_h() {
            return Err(CoreError::DimensionMismatch {
                expected: self.d_h(),
                found: u.dim(),
                context: "HsMap::adjoint_apply",
            });
        }
        Ok(HVec::from_dvector_unchecked(
            Space::G,
            self.matrix.tr_mul(u.coords()),
        ))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_matrix_unchecked(&self.matrix * c)
    }

    pub fn add(&self, other: &HsMap) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_matrix_unchecked(&self.matrix + &other.matrix))
    }

    pub fn sub(&self, other: &HsMap) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_matrix_unchecked(&self.matrix - &other.matrix))
    }

    /// `O Phi` for an operator `O` on `H`.
    pub fn left_compose(&self, o: &DMatrix<f64>) -> Result<Self> {
        if o.ncols() != self.d_h() {
            return Err(CoreError::DimensionMismatch {
                expected: self.d_h(),
                found: o.ncols(),
                context: "HsMap::left_compose",
            });
        }
        Ok(Self::from_matrix_unchecked(o * &self.matrix))
    }

    fn check_same_shape(&self, other: &HsMap) -> Result<()> {
        if self.matrix.shape() != other.matrix.shape() {
            return Err(CoreError::DimensionMismatch {
                expected: self.d_h() * self.d_g(),
                found: other.d_h() * other.d_g(),
                context: "HsMap shapes",
            });
        }
        Ok(())
    }
}

/// A bounded operator on `H` with `||O|| <= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contraction {
    matrix: DMatrix<f64>,
}

impl Contraction {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(CoreError::InvalidParameter(
                "contraction must be a non-empty square matrix".into(),
            ));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("contraction"));
        }
        let n = spectral_norm(&matrix);
        if n > 1.0 + CONTRACTION_SLACK {
            return Err(CoreError::NotAContraction(n));
        }
        Ok(Self { matrix })
    }

    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
        }
    }

    /// `U diag(s) V^T` with `s` in `[0, 1]`.
    pub fn scaled_svd(u: &DMatrix<f64>, s: &[f64], v: &DMatrix<f64>) -> Result<Self> {
        if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(CoreError::InvalidParameter(
                "singular values must lie in [0, 1]".into(),
            ));
        }
        let d = s.len();
        if u.shape() != (d, d) || v.shape() != (d, d) {
            return Err(CoreError::DimensionMismatch {
                expected: d,
                found: u.nrows(),
                context: "scaled_svd factors",
            });
        }
        let sd = DMatrix::from_diagonal(&DVector::from_column_slice(s));
        Self::new(u * sd * v.transpose())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, h: &HVec) -> Result<HVec> {
        if h.dim() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.dim(),
                found: h.dim(),
                context: "Contraction::apply",
            });
        }
        Ok(HVec::from_dvector_unchecked(
            h.space(),
            &self.matrix * h.coords(),
        ))
    }

    pub fn compose(&self, other: &Contraction) -> Contraction {
        Contraction::from_matrix_unchecked(&self.matrix * &other.matrix)
    }

    pub fn neg(&self) -> Contraction {
        Contraction::from_matrix_unchecked(-&self.matrix)
    }

    pub fn op_norm(&self) -> f64 {
        spectral_norm(&self.matrix)
    }
}

/// Largest singular value (via SVD).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Power iteration on `M^T M` with relative tolerance `1e-10` and at most
/// `10 * d` iterations. Returns a lower estimate of the operator norm.
pub fn spectral_norm_power(m: &DMatrix<f64>) -> f64 {
    let d = m.ncols();
    if d == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mtm = m.tr_mul(m);
    // deterministic start with weight on every coordinate
    let mut x = DVector::from_fn(d, |i, _| 1.0 + 0.1 * i as f64);
    x /= x.norm();
    let mut lambda = 0.0;
    for _ in 0..(10 * d).max(10) {
        let y = &mtm * &x;
        let n = y.norm();
        if n == 0.0 {
            return 0.0;
        }
        let next = x.dot(&y);
        x = y / n;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// A strictly increasing grid `s = t_0 < ... < t_N = t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Partition {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Partition {
    type Error = CoreError;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Partition::new(points)
    }
}

impl From<Partition> for Vec<f64> {
    fn from(p: Partition) -> Vec<f64> {
        p.points
    }
}

impl Partition {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(CoreError::InvalidPartition(
                "need at least two points".into(),
            ));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("partition points"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidPartition(
                "points must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn uniform(start: f64, end: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(CoreError::InvalidPartition("zero intervals".into()));
        }
        let h = (end - start) / intervals as f64;
        let mut pts: Vec<f64> = (0..intervals).map(|i| start + h * i as f64).collect();
        pts.push(end);
        Self::new(pts)
    }

    /// `2^level` equal intervals.
    pub fn dyadic(start: f64, end: f64, level: u32) -> Result<Self> {
        Self::uniform(start, end, 1usize << level)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn intervals(&self) -> usize {
        self.points.len() - 1
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.points[i], self.points[i + 1])
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn mesh(&self) -> f64 {
        self.lengths().into_iter().fold(0.0, f64::max)
    }

    /// Index of the interval `(t_i, t_{i+1}]` containing `t`; `t_0` maps to 0.
    pub fn locate(&self, t: f64) -> Option<usize> {
        if t < self.start() || t > self.end() {
            return None;
        }
        let idx = self.points.partition_point(|&p| p < t);
        Some(idx.saturating_sub(1).min(self.intervals() - 1))
    }

    /// Common refinement of two partitions of the same interval.
    pub fn merge(&self, other: &Partition) -> Result<Partition> {
        let tol = 1e-12 * (self.end() - self.start()).abs().max(1.0);
        if (self.start() - other.start()).abs() > tol || (self.end() - other.end()).abs() > tol {
            return Err(CoreError::InvalidPartition(
                "partitions cover different intervals".into(),
            ));
        }
        let mut pts: Vec<f64> = self
            .points
            .iter()
            .chain(other.points.iter())
            .cloned()
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut merged: Vec<f64> = Vec::with_capacity(pts.len());
        for p in pts {
            match merged.last() {
                Some(&last) if (p - last).abs() <= tol => {}
                _ => merged.push(p),
            }
        }
        Partition::new(merged)
    }

    /// True when every point of `coarse` is (numerically) a point of `self`.
    pub fn refines(&self, coarse: &Partition) -> bool {
        let tol = 1e-12 * (self.end() - self.start()).abs().max(1.0);
        coarse.points.iter().all(|p| {
            let i = self.points.partition_point(|q| *q < p - tol);
            i < self.points.len() && (self.points[i] - p).abs() <= tol
        })
    }
}

/// `Phi P_n`: zeroes every column of `Phi` beyond index `n`.
pub fn project_basis(phi: &HsMap, n: usize) -> Result<HsMap> {
    if n > phi.d_g() {
        return Err(CoreError::OutOfRange {
            index: n,
            max: phi.d_g(),
        });
    }
    let mut m = phi.matrix().clone();
    for c in n..phi.d_g() {
        m.column_mut(c).fill(0.0);
    }
    Ok(HsMap::from_matrix_unchecked(m))
}

/// Orthogonal map sending `h` to `||h|| e`, acting as the identity on the
/// orthogonal complement of `span{e, h}`. When `h = lambda e` the result is
/// `sgn(lambda) I` with `sgn(0) = +1`.
pub fn rotation_align(h: &HVec, e: &HVec) -> Result<Contraction> {
    if h.dim() != e.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: e.dim(),
            found: h.dim(),
            context: "rotation_align",
        });
    }
    let en = e.norm();
    if (en - 1.0).abs() > 1e-9 {
        return Err(CoreError::NonUnit(en));
    }
    let d = e.dim();
    let e = e.coords();
    let h = h.coords();
    let hn = h.norm();
    let lambda = h.dot(e);
    let orth = h - e * lambda;
    if hn == 0.0 || orth.norm() <= 1e-12 * hn {
        let s = if lambda < 0.0 { -1.0 } else { 1.0 };
        return Ok(Contraction::from_matrix_unchecked(
            DMatrix::identity(d, d) * s,
        ));
    }
    // orthonormal basis (u1, u2) of span{h, e} with e = cos * u1 + sin * u2
    let u1 = h / hn;
    let cos = u1.dot(e).clamp(-1.0, 1.0);
    let w = e - &u1 * cos;
    let sin = w.norm();
    let u2 = w / sin;
    let p = &u1 * u1.transpose() + &u2 * u2.transpose();
    let skew = &u2 * u1.transpose() - &u1 * u2.transpose();
    let r = DMatrix::identity(d, d) + p * (cos - 1.0) + skew * sin;
    Ok(Contraction::from_matrix_unchecked(r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContractionMode {
    Orthogonal,
    ScaledSvd,
    RankOne,
}

pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn unit_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let v = gaussian_vector(rng, d);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn haar_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, d, d).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn sample_contraction<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    mode: ContractionMode,
) -> Contraction {
    let m = match mode {
        ContractionMode::Orthogonal => haar_orthogonal(rng, d),
        ContractionMode::ScaledSvd => {
            let u = haar_orthogonal(rng, d);
            let v = haar_orthogonal(rng, d);
            let s = DVector::from_fn(d, |_, _| rng.random::<f64>());
            u * DMatrix::from_diagonal(&s) * v.transpose()
        }
        ContractionMode::RankOne => {
            let u = unit_vector(rng, d);
            let v = unit_vector(rng, d);
            let s: f64 = rng.random();
            u * v.transpose() * s
        }
    };
    Contraction::from_matrix_unchecked(m)
}
