//! The modular `m_L = m'_L + m''` on deterministic step functions.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{pushforward, CylCharacteristics, GenuineTriplet, LevyH};
use crate::error::{CoreError, Result};
use crate::linalg::{sample_contraction, Contraction, ContractionMode, HsMap, Partition};
use crate::rng::{module, RngStream};

/// Piecewise-constant `L_2(G, H)`-valued function: `values[0]` at `{0}` and
/// `values[i + 1]` on `(t_i, t_{i+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction {
    partition: Partition,
    values: Vec<HsMap>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDoc {
    points: Vec<f64>,
    d_h: usize,
    d_g: usize,
    values: Vec<Vec<f64>>,
}

impl Serialize for StepFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StepDoc {
            points: self.partition.points().to_vec(),
            d_h: self.d_h(),
            d_g: self.d_g(),
            values: self.values.iter().map(|v| v.to_row_major()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for StepFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = StepDoc::deserialize(d)?;
        let build = || -> Result<StepFunction> {
            let values = doc
                .values
                .iter()
                .map(|v| HsMap::from_row_major(doc.d_h, doc.d_g, v))
                .collect::<Result<Vec<_>>>()?;
            StepFunction::new(Partition::new(doc.points.clone())?, values)
        };
        build().map_err(serde::de::Error::custom)
    }
}

impl StepFunction {
    pub fn new(partition: Partition, values: Vec<HsMap>) -> Result<Self> {
        if values.len() != partition.intervals() + 1 {
            return Err(CoreError::DimensionMismatch {
                expected: partition.intervals() + 1,
                found: values.len(),
                context: "step function values (initial value plus one per interval)",
            });
        }
        let shape = (values[0].d_h(), values[0].d_g());
        if let Some(v) = values.iter().find(|v| (v.d_h(), v.d_g()) != shape) {
            return Err(CoreError::DimensionMismatch {
                expected: shape.0 * shape.1,
                found: v.d_h() * v.d_g(),
                context: "step function values",
            });
        }
        Ok(Self { partition, values })
    }

    /// Value `phi` on every interval, including the initial point.
    pub fn constant(partition: Partition, phi: HsMap) -> Self {
        let values = vec![phi; partition.intervals() + 1];
        Self { partition, values }
    }

    /// Values given per interval; the initial value repeats the first one.
    pub fn from_intervals(partition: Partition, per_interval: Vec<HsMap>) -> Result<Self> {
        let first = per_interval
            .first()
            .cloned()
            .ok_or_else(|| CoreError::InvalidParameter("no interval values".into()))?;
        let mut values = Vec::with_capacity(per_interval.len() + 1);
        values.push(first);
        values.extend(per_interval);
        Self::new(partition, values)
    }

    pub fn zero(partition: Partition, d_h: usize, d_g: usize) -> Self {
        Self::constant(partition, HsMap::zeros(d_h, d_g))
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn values(&self) -> &[HsMap] {
        &self.values
    }

    pub fn initial(&self) -> &HsMap {
        &self.values[0]
    }

    /// Value on the `i`-th interval `(t_i, t_{i+1}]`.
    pub fn on_interval(&self, i: usize) -> &HsMap {
        &self.values[i + 1]
    }

    pub fn intervals(&self) -> usize {
        self.partition.intervals()
    }

    pub fn d_h(&self) -> usize {
        self.values[0].d_h()
    }

    pub fn d_g(&self) -> usize {
        self.values[0].d_g()
    }

    pub fn at(&self, t: f64) -> Option<&HsMap> {
        if t == self.partition.start() {
            return Some(&self.values[0]);
        }
        self.partition.locate(t).map(|i| self.on_interval(i))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            partition: self.partition.clone(),
            values: self.values.iter().map(|v| v.scale(c)).collect(),
        }
    }

    /// Same function on a finer partition.
    pub fn refine_to(&self, fine: &Partition) -> Result<Self> {
        if !fine.refines(&self.partition) {
            return Err(CoreError::InvalidPartition(
                "target partition does not refine the step function's partition".into(),
            ));
        }
        let mut values = Vec::with_capacity(fine.intervals() + 1);
        values.push(self.values[0].clone());
        for j in 0..fine.intervals() {
            let (a, b) = fine.interval(j);
            let i = self.partition.locate(0.5 * (a + b)).unwrap();
            values.push(self.on_interval(i).clone());
        }
        Ok(Self {
            partition: fine.clone(),
            values,
        })
    }

    fn combine(
        &self,
        other: &StepFunction,
        f: impl Fn(&HsMap, &HsMap) -> Result<HsMap>,
    ) -> Result<Self> {
        let merged = self.partition.merge(&other.partition)?;
        let a = self.refine_to(&merged)?;
        let b = other.refine_to(&merged)?;
        let values = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| f(x, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            partition: merged,
            values,
        })
    }

    /// Sum on the common refinement.
    pub fn add(&self, other: &StepFunction) -> Result<Self> {
        self.combine(other, |x, y| x.add(y))
    }

    /// Difference on the common refinement.
    pub fn sub(&self, other: &StepFunction) -> Result<Self> {
        self.combine(other, |x, y| x.sub(y))
    }

    /// `int ||psi(t)||_HS^alpha dt`.
    pub fn lp_integral(&self, alpha: f64) -> f64 {
        self.partition
            .lengths()
            .iter()
            .enumerate()
            .map(|(i, dt)| dt * self.on_interval(i).hs_norm().powf(alpha))
            .sum()
    }

    /// `sup_t ||psi(t)||_HS` over the intervals.
    pub fn sup_norm(&self) -> f64 {
        self.values[1..]
            .iter()
            .map(|v| v.hs_norm())
            .fold(0.0, f64::max)
    }
}

/// Search budget for the `l_L` supremum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LSearch {
    pub budget: usize,
    pub seed: u64,
}

impl Default for LSearch {
    fn default() -> Self {
        Self {
            budget: 200,
            seed: 0,
        }
    }
}

/// Certified interval for `l_L(Phi)` together with the best contraction found.
#[derive(Clone, Debug, PartialEq)]
pub struct LBounds {
    pub lower: f64,
    pub upper: f64,
    pub argmax: Contraction,
    pub evaluations: usize,
}

/// `l_L` and `k_L` are invariant under `Phi -> -Phi`; evaluating on a sign
/// representative makes them exactly symmetric.
fn sign_representative(phi: &HsMap) -> (HsMap, f64) {
    match phi.matrix().iter().find(|x| **x != 0.0) {
        Some(x) if *x < 0.0 => (phi.scale(-1.0), -1.0),
        _ => (phi.clone(), 1.0),
    }
}

/// `k_L(Phi) = int (||h||^2 ^ 1) d(lambda o Phi^{-1}) + Tr(Phi Q Phi^*)`.
pub fn k_of(chars: &CylCharacteristics, phi: &HsMap) -> Result<f64> {
    if phi.d_g() != chars.d_g() {
        return Err(CoreError::DimensionMismatch {
            expected: chars.d_g(),
            found: phi.d_g(),
            context: "k_of",
        });
    }
    let (phi, _) = sign_representative(phi);
    let m = phi.matrix();
    let trace = (m * chars.q()).component_mul(m).sum();
    let jumps = LevyH::pushforward(chars.levy(), m).small_jump_energy()?;
    Ok(trace.max(0.0) + jumps)
}

fn drift_norm(trip: &GenuineTriplet, o: &DMatrix<f64>) -> f64 {
    match trip.levy_h.contraction_correction(o) {
        Ok(c) => (o * trip.b_theta.coords() + c).norm(),
        Err(_) => 0.0,
    }
}

/// Givens rotation in the `(i, j)` plane applied from the left.
fn rotate_rows(m: &mut DMatrix<f64>, i: usize, j: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    for col in 0..m.ncols() {
        let (a, b) = (m[(i, col)], m[(j, col)]);
        m[(i, col)] = c * a - s * b;
        m[(j, col)] = s * a + c * b;
    }
}

#[derive(Clone)]
struct Svd {
    u: DMatrix<f64>,
    s: Vec<f64>,
    vt: DMatrix<f64>,
}

impl Svd {
    fn of(o: &DMatrix<f64>) -> Self {
        let svd = o.clone().svd(true, true);
        Self {
            u: svd.u.unwrap(),
            s: svd
                .singular_values
                .iter()
                .map(|x| x.clamp(0.0, 1.0))
                .collect(),
            vt: svd.v_t.unwrap(),
        }
    }

    fn matrix(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, s) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * &self.vt
    }
}

/// `l_L(Phi) = sup_{||O|| <= 1} ||b^theta_{O Phi}||` as a certified interval:
/// the lower end is the best value found by multistart coordinate ascent over
/// `U diag(s) V^T`, the upper end is `||b^theta_Phi|| + 2 lambda_H(||h|| > 1)`.
/// Symmetric jump measures make every correction vanish, so there the value
/// `||Phi a||` is exact.
const ASCENT_RUNS: usize = 4;

pub fn l_of(chars: &CylCharacteristics, phi: &HsMap, search: &LSearch) -> Result<LBounds> {
    let (rep, sign) = sign_representative(phi);
    let trip = pushforward(chars, &rep)?;
    let d = trip.d_h();
    if chars.is_symmetric() {
        let v = (rep.matrix() * chars.a().coords()).norm();
        return Ok(LBounds {
            lower: v,
            upper: v,
            argmax: Contraction::identity(d),
            evaluations: 0,
        });
    }
    let upper = trip.b_theta.norm() + 2.0 * trip.levy_h.mass_outside_unit_ball();
    let budget = search.budget.max(1);

    // structured starts, then random ones
    let mut starts: Vec<DMatrix<f64>> = vec![DMatrix::identity(d, d)];
    let b = trip.b_theta.coords();
    if b.norm() > 0.0 {
        let u = b / b.norm();
        starts.push(&u * u.transpose());
    }
    for (h, _) in atoms_of(&trip.levy_h).into_iter().take(8) {
        let u = &h / h.norm();
        starts.push(&u * u.transpose());
    }
    let mut rng = RngStream::new(search.seed).child(module::MODULAR).rng();
    let atoms = atoms_of(&trip.levy_h);
    let mut evals = 0;
    if d > 1 && !atoms.is_empty() {
        let mut dirs: Vec<DVector<f64>> = Vec::new();
        if b.norm() > 0.0 {
            dirs.push(b / b.norm());
        }
        dirs.extend(atoms.iter().take(8).map(|(h, _)| h / h.norm()));
        while dirs.len() < (budget / 4).max(1) {
            let g = crate::linalg::unit_vector(&mut rng, d);
            dirs.push(g);
        }
        evals += dirs.len();
        let (w, t, _) = dirs
            .par_iter()
            .map(|w| {
                let (t, v) = rank_one_line(b, &atoms, w);
                (w, t, v)
            })
            .reduce_with(|x, y| if y.2 > x.2 { y } else { x })
            .expect("non-empty directions");
        let mut e1 = DVector::zeros(d);
        e1[0] = 1.0;
        starts.push(e1 * w.transpose() * t);
    }
    let n_random = (budget / 3).saturating_sub(starts.len());
    for k in 0..n_random {
        let mode = [
            ContractionMode::Orthogonal,
            ContractionMode::ScaledSvd,
            ContractionMode::RankOne,
        ][k % 3];
        starts.push(sample_contraction(&mut rng, d, mode).matrix().clone());
    }
    starts.truncate(budget.saturating_sub(evals).max(1));
    let values: Vec<f64> = starts.par_iter().map(|o| drift_norm(&trip, o)).collect();
    evals += starts.len();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let mut best = values[order[0]];
    let mut best_o = Svd::of(&starts[order[0]]);

    // coordinate ascent from the leading starts: singular values, reflections,
    // rotations of the range (G U) and of the co-range (G V^T)
    let n_pairs = d * (d - 1) / 2;
    let n_params = 2 * d + 2 * n_pairs;
    let n_runs = ASCENT_RUNS.min(order.len());
    for (run, &start) in order.iter().take(n_runs).enumerate() {
        let share = evals + (budget - evals.min(budget)) / (n_runs - run);
        let mut cur = Svd::of(&starts[start]);
        let mut cur_v = values[start];
        let mut step_s = 0.25;
        let mut step_a = 0.5;
        while evals < share && step_a > 1e-7 {
            let mut improved = false;
            for p in 0..n_params {
                for dir in [1.0, -1.0] {
                    if evals >= share {
                        break;
                    }
                    let mut cand = cur.clone();
                    if p < d {
                        cand.s[p] = (cand.s[p] + dir * step_s).clamp(0.0, 1.0);
                    } else if p < 2 * d {
                        if dir < 0.0 {
                            continue;
                        }
                        let mut row = cand.vt.row_mut(p - d);
                        row *= -1.0;
                    } else if p < 2 * d + n_pairs {
                        let (i, j) = pair_index(d, p - 2 * d);
                        rotate_rows(&mut cand.u, i, j, dir * step_a);
                    } else {
                        let (i, j) = pair_index(d, p - 2 * d - n_pairs);
                        rotate_rows(&mut cand.vt, i, j, dir * step_a);
                    }
                    let v = drift_norm(&trip, &cand.matrix());
                    evals += 1;
                    if v > cur_v {
                        cur_v = v;
                        cur = cand;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step_s *= 0.5;
                step_a *= 0.5;
            }
        }
        if cur_v > best {
            best = cur_v;
            best_o = cur;
        }
    }
    let cur = best_o;
    Ok(LBounds {
        lower: best.min(upper),
        upper,
        argmax: Contraction::from_matrix_unchecked(cur.matrix() * sign),
        evaluations: evals,
    })
}

/// Exact maximum of `t -> ||b_O||` along `O = e w^T t`, `t in [0, 1]`: with
/// `c = <w, h>` the drift is `t <w, b> + sum r (clip(t c) - t c (1 ^ 1/||h||))`,
/// piecewise linear in `t` with kinks at `1 / |c|`.
fn rank_one_line(b: &DVector<f64>, atoms: &[(DVector<f64>, f64)], w: &DVector<f64>) -> (f64, f64) {
    let c: Vec<(f64, f64, f64)> = atoms
        .iter()
        .map(|(h, r)| (w.dot(h), *r, 1f64.min(1.0 / h.norm())))
        .collect();
    let wb = w.dot(b);
    let f = |t: f64| {
        let mut v = t * wb;
        for &(ck, r, shrink) in &c {
            v += r * ((t * ck).clamp(-1.0, 1.0) - t * ck * shrink);
        }
        v.abs()
    };
    let mut best = (1.0, f(1.0));
    for &(ck, _, _) in &c {
        if ck.abs() > 1.0 {
            let t = 1.0 / ck.abs();
            let v = f(t);
            if v > best.1 {
                best = (t, v);
            }
        }
    }
    best
}

fn pair_index(d: usize, mut k: usize) -> (usize, usize) {
    for i in 0..d {
        let row = d - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    (0, 1)
}

fn atoms_of(l: &LevyH) -> Vec<(DVector<f64>, f64)> {
    match l {
        LevyH::Atomic(a) => a.clone(),
        LevyH::Sampled(js) => js
            .points
            .iter()
            .cloned()
            .zip(js.weights.iter().cloned())
            .collect(),
        LevyH::Sum(parts) => parts.iter().flat_map(atoms_of).collect(),
        _ => Vec::new(),
    }
}

/// Components of `m_L(psi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModularValue {
    pub m_prime: f64,
    pub m_double_prime: f64,
    pub total: f64,
    pub stderr: f64,
    /// `int (l_upper - l_lower) dt`, the width left open by the `l_L` search.
    pub l_gap: f64,
}

impl ModularValue {
    pub const ZERO: ModularValue = ModularValue {
        m_prime: 0.0,
        m_double_prime: 0.0,
        total: 0.0,
        stderr: 0.0,
        l_gap: 0.0,
    };

    pub const CSV_HEADER: &'static str = "m_prime,m_double_prime,total,stderr,l_gap";

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e}",
            self.m_prime, self.m_double_prime, self.total, self.stderr, self.l_gap
        )
    }
}

/// Per-value contributions `(k, l_lower, l_upper, ||F||^2 ^ 1)`.
fn pointwise(
    chars: &CylCharacteristics,
    f: &HsMap,
    search: &LSearch,
) -> Result<(f64, f64, f64, f64)> {
    if f.hs_norm() == 0.0 {
        return Ok((0.0, 0.0, 0.0, 0.0));
    }
    let k = k_of(chars, f)?;
    let l = l_of(chars, f, search)?;
    Ok((k, l.lower, l.upper, f.hs_norm().powi(2).min(1.0)))
}

/// `m_L(psi) = int (k_L + l_L)(psi(t)) dt + int (||psi(t)||^2_HS ^ 1) dt`, with
/// `l_L` replaced by its certified lower bound. The initial value is
/// Lebesgue-null and does not contribute.
pub fn modular_of(
    chars: &CylCharacteristics,
    psi: &StepFunction,
    search: &LSearch,
) -> Result<ModularValue> {
    if psi.d_g() != chars.d_g() {
        return Err(CoreError::DimensionMismatch {
            expected: chars.d_g(),
            found: psi.d_g(),
            context: "modular_of",
        });
    }
    let lengths = psi.partition().lengths();
    let parts = (0..psi.intervals())
        .into_par_iter()
        .map(|i| pointwise(chars, psi.on_interval(i), search).map(|p| (lengths[i], p)))
        .collect::<Result<Vec<_>>>()?;
    let mut v = ModularValue::ZERO;
    for (dt, (k, lo, up, sq)) in parts {
        v.m_prime += dt * (k + lo);
        v.m_double_prime += dt * sq;
        v.l_gap += dt * (up - lo);
    }
    v.total = v.m_prime + v.m_double_prime;
    Ok(v)
}

/// `m_L(psi1 - psi2)` on the common refinement.
pub fn quasi_metric(
    chars: &CylCharacteristics,
    psi1: &StepFunction,
    psi2: &StepFunction,
    search: &LSearch,
) -> Result<f64> {
    Ok(modular_of(chars, &psi1.sub(psi2)?, search)?.total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetrizationParams {
    pub p: f64,
    pub quasi_constant: f64,
}

impl Default for MetrizationParams {
    /// `p = ln 2 / ln (2K)` with `K = 4`.
    fn default() -> Self {
        Self {
            p: std::f64::consts::LN_2 / 8f64.ln(),
            quasi_constant: 4.0,
        }
    }
}

/// Pairwise modular distances, their powers and the chain metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrization {
    pub m: DMatrix<f64>,
    pub m_pow: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Pairs `(i, j)`, `i < j`, where `d <= m^p <= 2d` fails.
    pub violations: Vec<(usize, usize)>,
}

impl Metrization {
    pub fn sandwich_holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Chain-infimum metric over a finite set with edge weights `m(z_j - z_{j+1})^p`
/// (Floyd-Warshall), checked against the sandwich `d <= m^p <= 2d`.
pub fn metrize(
    values: &[StepFunction],
    chars: &CylCharacteristics,
    params: &MetrizationParams,
    search: &LSearch,
) -> Result<Metrization> {
    if values.is_empty() {
        return Err(CoreError::InvalidParameter(
            "metrize needs at least one element".into(),
        ));
    }
    if !(params.p > 0.0 && params.p < 1.0) {
        return Err(CoreError::InvalidParameter(format!(
            "exponent {} outside (0, 1)",
            params.p
        )));
    }
    let n = values.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dist = pairs
        .par_iter()
        .map(|&(i, j)| quasi_metric(chars, &values[i], &values[j], search))
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(dist) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    let m_pow = m.map(|x: f64| x.powf(params.p));
    let mut d = m_pow.clone();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[(i, k)] + d[(k, j)];
                if via < d[(i, j)] {
                    d[(i, j)] = via;
                }
            }
        }
    }
    let tol = 1e-12;
    let violations = pairs
        .into_iter()
        .filter(|&(i, j)| {
            let (dij, mp) = (d[(i, j)], m_pow[(i, j)]);
            dij > mp + tol * (1.0 + mp) || mp > 2.0 * dij + tol * (1.0 + mp)
        })
        .collect();
    Ok(Metrization {
        m,
        m_pow,
        d,
        violations,
    })
}

/// Result of the two-stage approximation: truncation at `2^{n/2}` and
/// midpoint sampling on `2^n` dyadic intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct StepApproximation {
    pub step: StepFunction,
    pub level: u32,
    pub truncation: f64,
    /// `m_L(psi_n - psi_{n+1})` for `n = 0, 1, ...`.
    pub increments: Vec<f64>,
}

pub const MAX_DYADIC_LEVEL: u32 = 16;

pub fn truncation_level(n: u32) -> f64 {
    2f64.powf(n as f64 / 2.0)
}

/// `psi_n`: values `psi(mid) 1{||psi(mid)||_HS <= 2^{n/2}}` on `2^n` intervals of `[0, horizon]`.
pub fn discretize(
    sampler: &(dyn Fn(f64) -> HsMap + Sync),
    horizon: f64,
    n: u32,
) -> Result<StepFunction> {
    let partition = Partition::dyadic(0.0, horizon, n)?;
    let cap = truncation_level(n);
    let vals: Vec<HsMap> = (0..partition.intervals())
        .into_par_iter()
        .map(|i| {
            let (a, b) = partition.interval(i);
            let v = sampler(0.5 * (a + b));
            if v.hs_norm() <= cap {
                v
            } else {
                HsMap::zeros(v.d_h(), v.d_g())
            }
        })
        .collect();
    StepFunction::from_intervals(partition, vals)
}

/// Refines until the modular increment between consecutive levels drops below
/// `tolerance`; returns the coarser member of the first such pair.
pub fn step_approximate(
    sampler: &(dyn Fn(f64) -> HsMap + Sync),
    horizon: f64,
    chars: &CylCharacteristics,
    tolerance: f64,
    search: &LSearch,
) -> Result<StepApproximation> {
    let mut prev = discretize(sampler, horizon, 0)?;
    let mut increments = Vec::new();
    for n in 1..=MAX_DYADIC_LEVEL {
        let next = discretize(sampler, horizon, n)?;
        let inc = quasi_metric(chars, &prev, &next, search)?;
        if !inc.is_finite() {
            return Err(CoreError::NonFinite("modular increment"));
        }
        increments.push(inc);
        if inc < tolerance {
            return Ok(StepApproximation {
                step: prev,
                level: n - 1,
                truncation: truncation_level(n - 1),
                increments,
            });
        }
        prev = next;
    }
    Err(CoreError::NonConvergence(MAX_DYADIC_LEVEL))
}
