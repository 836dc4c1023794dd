//! Integrals of deterministic and predictable step integrands against a
//! driver, the sup-over-contractions Ky Fan search, tangent sequences and
//! the diagnostics built on them.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{compose_contraction, pushforward, CylCharacteristics};
use crate::driver::{decoupled_driver, sample_g_path, Driver, GStep};
use crate::error::{CoreError, Result};
use crate::linalg::{
    rotation_align, sample_contraction, Contraction, ContractionMode, HVec, HsMap, Partition, Space,
};
use crate::modular::{discretize, l_of, modular_of, LSearch, StepFunction};
use crate::rng::{batches, RngStream};
use crate::stats::mean_stderr;

/// Event on the driver history, read from the `G`-increments of the path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Predicate {
    Always,
    /// `x_coord > 0` on the increment over `interval` (`x_coord <= 0` when not `positive`).
    Sign {
        interval: usize,
        coord: usize,
        positive: bool,
    },
    /// `x_coord > level` (or `<= level`).
    Threshold {
        interval: usize,
        coord: usize,
        level: f64,
        above: bool,
    },
    /// Sign of the coordinate of `L(t_upto) - L(t_0)`.
    CumulativeSign {
        upto: usize,
        coord: usize,
        positive: bool,
    },
    /// Jump count over `interval` in `min..=max`.
    JumpCount {
        interval: usize,
        min: u64,
        max: u64,
    },
    And(Vec<Predicate>),
}

impl Predicate {
    /// Number of leading intervals the predicate reads.
    pub fn reads(&self) -> usize {
        match self {
            Predicate::Always => 0,
            Predicate::Sign { interval, .. }
            | Predicate::Threshold { interval, .. }
            | Predicate::JumpCount { interval, .. } => interval + 1,
            Predicate::CumulativeSign { upto, .. } => *upto,
            Predicate::And(ps) => ps.iter().map(Predicate::reads).max().unwrap_or(0),
        }
    }

    fn max_coord(&self) -> Option<usize> {
        match self {
            Predicate::Sign { coord, .. }
            | Predicate::Threshold { coord, .. }
            | Predicate::CumulativeSign { coord, .. } => Some(*coord),
            Predicate::And(ps) => ps.iter().filter_map(Predicate::max_coord).max(),
            _ => None,
        }
    }

    pub fn eval(&self, path: &[GStep]) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::Sign {
                interval,
                coord,
                positive,
            } => (path[*interval].inc[*coord] > 0.0) == *positive,
            Predicate::Threshold {
                interval,
                coord,
                level,
                above,
            } => (path[*interval].inc[*coord] > *level) == *above,
            Predicate::CumulativeSign {
                upto,
                coord,
                positive,
            } => {
                let s: f64 = path[..*upto].iter().map(|g| g.inc[*coord]).sum();
                (s > 0.0) == *positive
            }
            Predicate::JumpCount { interval, min, max } => {
                (*min..=*max).contains(&path[*interval].jumps)
            }
            Predicate::And(ps) => ps.iter().all(|p| p.eval(path)),
        }
    }
}

pub trait StepValue: Clone + Send + Sync {
    /// `(rows, cols)` of the matrix representation.
    fn shape(&self) -> (usize, usize);
    fn mat(&self) -> &DMatrix<f64>;
}

impl StepValue for HsMap {
    fn shape(&self) -> (usize, usize) {
        (self.d_h(), self.d_g())
    }
    fn mat(&self) -> &DMatrix<f64> {
        self.matrix()
    }
}

impl StepValue for Contraction {
    fn shape(&self) -> (usize, usize) {
        (self.dim(), self.dim())
    }
    fn mat(&self) -> &DMatrix<f64> {
        self.matrix()
    }
}

/// Predictable step process `sum_i sum_k 1_{A_ik} V_ik 1_(t_i, t_i+1]`, the
/// events `A_ik` given as predicates on the history before `t_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredStep<V> {
    partition: Partition,
    rules: Vec<Vec<(Predicate, V)>>,
}

pub type StepProcess = PredStep<HsMap>;
pub type ContractionStepProcess = PredStep<Contraction>;

impl<V: StepValue> PredStep<V> {
    pub fn new(partition: Partition, rules: Vec<Vec<(Predicate, V)>>) -> Result<Self> {
        if rules.len() != partition.intervals() {
            return Err(CoreError::DimensionMismatch {
                expected: partition.intervals(),
                found: rules.len(),
                context: "rules per interval",
            });
        }
        let shape = rules
            .iter()
            .flatten()
            .map(|(_, v)| v.shape())
            .next()
            .ok_or_else(|| CoreError::InvalidParameter("step process without values".into()))?;
        for (i, branch) in rules.iter().enumerate() {
            if branch.is_empty() {
                return Err(CoreError::PredicateNotExhaustive {
                    interval: i,
                    selected: 0,
                });
            }
            for (p, v) in branch {
                if p.reads() > i {
                    return Err(CoreError::NotAdapted(format!(
                        "interval {i} reads the path up to interval {}",
                        p.reads() - 1
                    )));
                }
                if v.shape() != shape {
                    return Err(CoreError::DimensionMismatch {
                        expected: shape.0,
                        found: v.shape().0,
                        context: "step process values",
                    });
                }
            }
        }
        Ok(Self { partition, rules })
    }

    pub fn deterministic_from(partition: Partition, values: Vec<V>) -> Result<Self> {
        let rules = values
            .into_iter()
            .map(|v| vec![(Predicate::Always, v)])
            .collect();
        Self::new(partition, rules)
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn rules(&self) -> &[Vec<(Predicate, V)>] {
        &self.rules
    }

    pub fn intervals(&self) -> usize {
        self.partition.intervals()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rules[0][0].1.shape()
    }

    pub fn is_deterministic(&self) -> bool {
        self.rules
            .iter()
            .all(|b| b.len() == 1 && b[0].0 == Predicate::Always)
    }

    fn check_driver(&self, d_g: usize) -> Result<()> {
        for (p, _) in self.rules.iter().flatten() {
            if let Some(c) = p.max_coord() {
                if c >= d_g {
                    return Err(CoreError::OutOfRange {
                        index: c,
                        max: d_g - 1,
                    });
                }
            }
        }
        Ok(())
    }

    /// Index of the unique branch selected on interval `i`.
    pub fn select(&self, i: usize, path: &[GStep]) -> Result<usize> {
        let mut hit = None;
        let mut count = 0;
        for (k, (p, _)) in self.rules[i].iter().enumerate() {
            if p.eval(path) {
                count += 1;
                hit.get_or_insert(k);
            }
        }
        match (count, hit) {
            (1, Some(k)) => Ok(k),
            _ => Err(CoreError::PredicateNotExhaustive {
                interval: i,
                selected: count,
            }),
        }
    }

    pub fn value(&self, i: usize, k: usize) -> &V {
        &self.rules[i][k].1
    }

    /// Same events, values transformed branch by branch.
    pub fn map<W: StepValue>(
        &self,
        f: impl Fn(usize, usize, &V) -> Result<W>,
    ) -> Result<PredStep<W>> {
        let rules = self
            .rules
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.iter()
                    .enumerate()
                    .map(|(k, (p, v))| Ok((p.clone(), f(i, k, v)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        PredStep::new(self.partition.clone(), rules)
    }
}

impl StepProcess {
    pub fn deterministic(psi: &StepFunction) -> Self {
        let values = (0..psi.intervals())
            .map(|i| psi.on_interval(i).clone())
            .collect();
        Self::deterministic_from(psi.partition().clone(), values)
            .expect("step function is a valid process")
    }

    /// `Phi_i` if coordinate `coord` of the previous increment is positive, `-Phi_i` otherwise.
    pub fn sign_flip(psi: &StepFunction, coord: usize) -> Self {
        let rules = (0..psi.intervals())
            .map(|i| {
                let v = psi.on_interval(i).clone();
                if i == 0 {
                    vec![(Predicate::Always, v)]
                } else {
                    vec![
                        (
                            Predicate::Sign {
                                interval: i - 1,
                                coord,
                                positive: true,
                            },
                            v.clone(),
                        ),
                        (
                            Predicate::Sign {
                                interval: i - 1,
                                coord,
                                positive: false,
                            },
                            v.scale(-1.0),
                        ),
                    ]
                }
            })
            .collect();
        Self::new(psi.partition().clone(), rules).expect("sign flip is adapted")
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|_, _, v| Ok(v.scale(c)))
            .expect("scaling keeps shape")
    }

    /// The step function realized by a branch pattern.
    pub fn realized(&self, pattern: &[usize]) -> Result<StepFunction> {
        let vals = pattern
            .iter()
            .enumerate()
            .map(|(i, &k)| self.value(i, k).clone())
            .collect();
        StepFunction::from_intervals(self.partition.clone(), vals)
    }
}

impl ContractionStepProcess {
    pub fn identity(partition: Partition, d: usize) -> Self {
        let n = partition.intervals();
        Self::deterministic_from(partition, vec![Contraction::identity(d); n])
            .expect("identity process")
    }
}

/// Samples of an `H`-valued random variable with their Ky Fan summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalLaw {
    pub samples: Vec<DVector<f64>>,
    pub dim: usize,
    pub stream: RngStream,
    pub ky_fan: f64,
    pub stderr: f64,
}

impl EmpiricalLaw {
    pub fn new(samples: Vec<DVector<f64>>, dim: usize, stream: RngStream) -> Self {
        let (ky_fan, stderr) = crate::stats::ky_fan(&samples);
        Self {
            samples,
            dim,
            stream,
            ky_fan,
            stderr,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.samples.iter().map(|x| x.norm()).collect()
    }

    /// `u64` dims, `u64` count, then the samples row by row as `f64`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dim * self.samples.len());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for x in &self.samples {
            for v in x.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], stream: RngStream) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(8 * i..8 * i + 8)
                .map(|s| s.try_into().expect("eight bytes"))
                .ok_or_else(|| CoreError::InvalidParameter("truncated sample file".into()))
        };
        let dim = u64::from_le_bytes(word(0)?) as usize;
        let count = u64::from_le_bytes(word(1)?) as usize;
        if bytes.len() != 16 + 8 * dim * count {
            return Err(CoreError::InvalidParameter(format!(
                "sample file has {} bytes, header announces {dim} x {count}",
                bytes.len()
            )));
        }
        let samples = (0..count)
            .map(|r| {
                let v = (0..dim)
                    .map(|c| Ok(f64::from_le_bytes(word(2 + r * dim + c)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(DVector::from_vec(v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(samples, dim, stream))
    }

    pub const CSV_HEADER: &'static str = "dim,count,ky_fan,stderr,seed,stream_key";

    pub fn summary_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{}",
            self.dim,
            self.samples.len(),
            self.ky_fan,
            self.stderr,
            self.stream.seed(),
            self.stream.key()
        )
    }

    /// One row per sample.
    pub fn samples_csv(&self) -> String {
        let mut s = (0..self.dim)
            .map(|k| format!("x{k}"))
            .collect::<Vec<_>>()
            .join(",");
        s.push('\n');
        for x in &self.samples {
            let row: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

pub const MIN_MC: usize = 100;

fn check_mc(n_mc: usize) -> Result<()> {
    if n_mc < MIN_MC {
        return Err(CoreError::InvalidParameter(format!(
            "need at least {MIN_MC} replicas, got {n_mc}"
        )));
    }
    Ok(())
}

fn check_process(psi: &StepProcess, driver: &Driver) -> Result<()> {
    if psi.shape().1 != driver.d_g() {
        return Err(CoreError::DimensionMismatch {
            expected: driver.d_g(),
            found: psi.shape().1,
            context: "integrand and driver",
        });
    }
    psi.check_driver(driver.d_g())
}

/// Driver paths over `partition`, replica `r` of batch `b` drawn from `stream.child(b)`.
pub fn simulate_paths(
    driver: &Driver,
    partition: &Partition,
    n: usize,
    stream: RngStream,
) -> Vec<Vec<GStep>> {
    batches(n)
        .into_par_iter()
        .enumerate()
        .map(|(b, (_, len))| {
            let mut rng = stream.child(b as u64).rng();
            (0..len)
                .map(|_| sample_g_path(driver, partition, &mut rng))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Per replica and interval: selected branch and `Psi_i (L(t_i+1) - L(t_i))`.
struct Terms {
    branches: Vec<Vec<usize>>,
    values: Vec<Vec<DVector<f64>>>,
}

fn terms(psi: &StepProcess, paths: &[Vec<GStep>]) -> Result<Terms> {
    let per: Vec<(Vec<usize>, Vec<DVector<f64>>)> = paths
        .par_iter()
        .map(|path| {
            let mut br = Vec::with_capacity(path.len());
            let mut vals = Vec::with_capacity(path.len());
            for (i, step) in path.iter().enumerate() {
                let k = psi.select(i, path)?;
                br.push(k);
                vals.push(psi.value(i, k).matrix() * &step.inc);
            }
            Ok((br, vals))
        })
        .collect::<Result<Vec<_>>>()?;
    let (branches, values) = per.into_iter().unzip();
    Ok(Terms { branches, values })
}

/// Ky Fan functional of the integral.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Functional {
    /// `E[||int_0^T Gamma Psi dL|| ^ 1]`.
    #[default]
    Terminal,
    /// `E[max_k ||int_0^t_k Gamma Psi dL|| ^ 1]` over the partition points.
    RunningSup,
}

fn gamma_values(
    gamma: &ContractionStepProcess,
    paths: &[Vec<GStep>],
    terms: &Terms,
    functional: Functional,
) -> Result<Vec<f64>> {
    paths
        .par_iter()
        .zip(terms.values.par_iter())
        .map(|(path, vals)| {
            let mut s = DVector::zeros(vals.first().map_or(0, |v| v.len()));
            let mut best: f64 = 0.0;
            for (i, x) in vals.iter().enumerate() {
                let k = gamma.select(i, path)?;
                s.gemv(1.0, gamma.value(i, k).matrix(), x, 1.0);
                if functional == Functional::RunningSup {
                    best = best.max(s.norm());
                }
            }
            Ok(match functional {
                Functional::Terminal => s.norm().min(1.0),
                Functional::RunningSup => best.min(1.0),
            })
        })
        .collect()
}

fn integral_samples(psi: &StepProcess, paths: &[Vec<GStep>]) -> Result<Vec<DVector<f64>>> {
    let t = terms(psi, paths)?;
    let d_h = psi.shape().0;
    Ok(t.values
        .into_iter()
        .map(|v| v.into_iter().fold(DVector::zeros(d_h), |acc, x| acc + x))
        .collect())
}

/// `n_mc` draws of `sum_i Phi_i (L(t_i+1) - L(t_i))`.
pub fn integrate_step_det(
    psi: &StepFunction,
    driver: &Driver,
    n_mc: usize,
    stream: RngStream,
) -> Result<EmpiricalLaw> {
    integrate_step_pred(&StepProcess::deterministic(psi), driver, n_mc, stream)
}

/// `n_mc` draws of `sum_i sum_k 1_{A_ik} Phi_ik (L(t_i+1) - L(t_i))`, the events
/// evaluated on the simulated history of each replica.
pub fn integrate_step_pred(
    psi: &StepProcess,
    driver: &Driver,
    n_mc: usize,
    stream: RngStream,
) -> Result<EmpiricalLaw> {
    check_mc(n_mc)?;
    check_process(psi, driver)?;
    let paths = simulate_paths(driver, psi.partition(), n_mc, stream);
    Ok(EmpiricalLaw::new(
        integral_samples(psi, &paths)?,
        psi.shape().0,
        stream,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSearch {
    /// Candidate evaluations on the selection sample.
    pub budget: usize,
    pub l_search: LSearch,
    pub functional: Functional,
}

impl Default for GammaSearch {
    fn default() -> Self {
        Self {
            budget: 24,
            l_search: LSearch::default(),
            functional: Functional::Terminal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaTrial {
    pub index: usize,
    pub label: String,
    pub ky_fan: f64,
    pub stderr: f64,
}

/// Result of the budgeted search over contraction step processes.
#[derive(Clone, Debug, PartialEq)]
pub struct SupGamma {
    /// Ky Fan value of the selected candidate on an independent sample.
    pub lower: f64,
    pub stderr: f64,
    pub best: usize,
    pub gamma: ContractionStepProcess,
    pub trace: Vec<GammaTrial>,
}

/// Drift-aligning candidates: each branch value `Phi` gets `R O*`, where `O*`
/// is the `l_L` argmax for `Phi` (or the identity) and `R` rotates the drift
/// `b_{O* Phi}` onto a common direction.
fn aligned_candidates(
    psi: &StepProcess,
    chars: &CylCharacteristics,
    search: &LSearch,
) -> Result<Vec<(String, ContractionStepProcess)>> {
    let d = psi.shape().0;
    let mut out = Vec::new();
    for use_l in [true, false] {
        let branch_drifts = psi.map(|_, _, phi| {
            let trip = pushforward(chars, phi)?;
            let o = if use_l && !chars.is_symmetric() {
                l_of(chars, phi, search)?.argmax
            } else {
                Contraction::identity(d)
            };
            let h = compose_contraction(&trip, &o)?;
            Ok(DriftPick { o, h })
        })?;
        let lead = branch_drifts
            .rules()
            .iter()
            .flatten()
            .map(|(_, p)| &p.h)
            .fold(None::<&HVec>, |acc, h| match acc {
                Some(a) if a.norm() >= h.norm() => Some(a),
                _ => Some(h),
            });
        let e = match lead {
            Some(h) if h.norm() > 0.0 => {
                HVec::from_dvector_unchecked(Space::H, h.coords() / h.norm())
            }
            _ => HVec::basis(Space::H, d, 0),
        };
        let gamma = branch_drifts.map(|_, _, p| Ok(rotation_align(&p.h, &e)?.compose(&p.o)))?;
        out.push((
            if use_l {
                "aligned-l-argmax"
            } else {
                "aligned-drift"
            }
            .to_string(),
            gamma,
        ));
    }
    Ok(out)
}

#[derive(Clone)]
struct DriftPick {
    o: Contraction,
    h: HVec,
}

impl StepValue for DriftPick {
    fn shape(&self) -> (usize, usize) {
        self.o.shape()
    }
    fn mat(&self) -> &DMatrix<f64> {
        self.o.matrix()
    }
}

fn random_candidate<R: Rng + ?Sized>(
    rng: &mut R,
    partition: &Partition,
    d: usize,
    d_g: usize,
    j: usize,
) -> ContractionStepProcess {
    let modes = [
        ContractionMode::Orthogonal,
        ContractionMode::ScaledSvd,
        ContractionMode::RankOne,
    ];
    let rules = (0..partition.intervals())
        .map(|i| {
            let a = sample_contraction(rng, d, modes[j % 3]);
            if i == 0 || rng.random::<bool>() {
                vec![(Predicate::Always, a)]
            } else {
                let b = sample_contraction(rng, d, modes[(j + 1) % 3]);
                let coord = rng.random_range(0..d_g);
                vec![
                    (
                        Predicate::Sign {
                            interval: i - 1,
                            coord,
                            positive: true,
                        },
                        a,
                    ),
                    (
                        Predicate::Sign {
                            interval: i - 1,
                            coord,
                            positive: false,
                        },
                        b,
                    ),
                ]
            }
        })
        .collect();
    ContractionStepProcess::new(partition.clone(), rules).expect("random candidate is adapted")
}

fn with_signs(base: &ContractionStepProcess, signs: &[f64]) -> ContractionStepProcess {
    base.map(|i, _, o| Ok(if signs[i] < 0.0 { o.neg() } else { o.clone() }))
        .expect("sign change keeps shape")
}

/// Budgeted lower bound for `sup_Gamma E[||int Gamma Psi dL|| ^ 1]` over
/// predictable contraction step processes. Candidates are selected on one
/// sample and the winner is re-evaluated on an independent one; ties go to
/// the lowest candidate index.
pub fn sup_gamma_ky_fan(
    psi: &StepProcess,
    driver: &Driver,
    search: &GammaSearch,
    n_mc: usize,
    stream: RngStream,
) -> Result<SupGamma> {
    if search.budget == 0 {
        return Err(CoreError::InvalidParameter(
            "search budget must be at least 1".into(),
        ));
    }
    check_mc(n_mc)?;
    check_process(psi, driver)?;
    let d = psi.shape().0;
    let part = psi.partition();
    let paths_a = simulate_paths(driver, part, n_mc, stream.child(0));
    let terms_a = terms(psi, &paths_a)?;
    let eval = |g: &ContractionStepProcess| -> Result<(f64, f64)> {
        Ok(mean_stderr(&gamma_values(
            g,
            &paths_a,
            &terms_a,
            search.functional,
        )?))
    };

    let mut cands: Vec<(String, ContractionStepProcess)> = vec![(
        "identity".into(),
        ContractionStepProcess::identity(part.clone(), d),
    )];
    if search.budget > 1 {
        cands.extend(aligned_candidates(psi, driver.chars(), &search.l_search)?);
    }
    cands.truncate(search.budget);
    let n_sign = (search.budget - cands.len()) / 2;
    let n_random = search.budget - cands.len() - n_sign;
    let mut rng = stream.child(2).rng();
    for j in 0..n_random {
        cands.push((
            format!("random-{j}"),
            random_candidate(&mut rng, part, d, driver.d_g(), j),
        ));
    }
    let scores = cands
        .par_iter()
        .map(|(_, g)| eval(g))
        .collect::<Result<Vec<_>>>()?;
    let mut trace: Vec<GammaTrial> = cands
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(index, ((label, _), &(ky_fan, stderr)))| GammaTrial {
            index,
            label: label.clone(),
            ky_fan,
            stderr,
        })
        .collect();
    let mut gammas: Vec<ContractionStepProcess> = cands.into_iter().map(|(_, g)| g).collect();

    // sign ascent from the best structured candidate
    let base_i = (0..gammas.len().min(3)).fold(0, |b, i| {
        if trace[i].ky_fan > trace[b].ky_fan {
            i
        } else {
            b
        }
    });
    let base = gammas[base_i].clone();
    let mut signs = vec![1.0; part.intervals()];
    let mut cur = trace[base_i].ky_fan;
    let mut used = 0;
    'ascent: loop {
        let mut improved = false;
        for i in 0..signs.len() {
            if used >= n_sign {
                break 'ascent;
            }
            signs[i] = -signs[i];
            let g = with_signs(&base, &signs);
            let (v, se) = eval(&g)?;
            used += 1;
            trace.push(GammaTrial {
                index: trace.len(),
                label: format!("signs-{used}"),
                ky_fan: v,
                stderr: se,
            });
            gammas.push(g);
            if v > cur {
                cur = v;
                improved = true;
            } else {
                signs[i] = -signs[i];
            }
        }
        if !improved {
            break;
        }
    }

    let best = (0..trace.len()).fold(0, |b, i| {
        if trace[i].ky_fan > trace[b].ky_fan {
            i
        } else {
            b
        }
    });
    let paths_b = simulate_paths(driver, part, n_mc, stream.child(1));
    let terms_b = terms(psi, &paths_b)?;
    let (lower, stderr) = mean_stderr(&gamma_values(
        &gammas[best],
        &paths_b,
        &terms_b,
        search.functional,
    )?);
    Ok(SupGamma {
        lower,
        stderr,
        best,
        gamma: gammas.swap_remove(best),
        trace,
    })
}

/// Ky Fan values of `int Gamma Psi dL` for a fixed family of `Gamma`, on common paths.
pub fn gamma_family_samples(
    psi: &StepProcess,
    driver: &Driver,
    family: &[ContractionStepProcess],
    n_mc: usize,
    stream: RngStream,
) -> Result<Vec<Vec<f64>>> {
    check_mc(n_mc)?;
    check_process(psi, driver)?;
    let paths = simulate_paths(driver, psi.partition(), n_mc, stream);
    let t = terms(psi, &paths)?;
    family
        .par_iter()
        .map(|g| {
            paths
                .iter()
                .zip(&t.values)
                .map(|(path, vals)| {
                    let mut s = DVector::zeros(psi.shape().0);
                    for (i, x) in vals.iter().enumerate() {
                        s.gemv(1.0, g.value(i, g.select(i, path)?).matrix(), x, 1.0);
                    }
                    Ok(s.norm())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// `n` random contraction step processes on `partition`, reproducible from `stream`.
pub fn random_gamma_family(
    partition: &Partition,
    d: usize,
    d_g: usize,
    n: usize,
    stream: RngStream,
) -> Vec<ContractionStepProcess> {
    (0..n)
        .map(|j| random_candidate(&mut stream.child(j as u64).rng(), partition, d, d_g, j))
        .collect()
}

/// Grid version of the Emery-type diagnostic, `E[sup_t ||int_0^t Gamma Psi dL|| ^ 1]`
/// maximized over the search family, evaluated on common random numbers.
pub fn emery_sup_diagnostic(
    psis: &[StepProcess],
    driver: &Driver,
    search: &GammaSearch,
    n_mc: usize,
    stream: RngStream,
) -> Result<Vec<f64>> {
    let s = GammaSearch {
        functional: Functional::RunningSup,
        ..search.clone()
    };
    psis.iter()
        .map(|p| sup_gamma_ky_fan(p, driver, &s, n_mc, stream).map(|r| r.lower))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Integrable {
        level: u32,
    },
    /// Cauchy criterion not met; `tail_modular` is `m_L` of the last refinement step.
    NonIntegrable {
        tail_modular: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralIntegral {
    /// Law of the finest member when integrable.
    pub law: Option<EmpiricalLaw>,
    /// Sup-Gamma Ky Fan values of `psi_n - psi_{n-1}`, `n = 1, 2, ...`.
    pub certificate: Vec<f64>,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralOptions {
    pub horizon: f64,
    pub tolerance: f64,
    pub max_level: u32,
    pub n_mc: usize,
    pub search: GammaSearch,
}

/// Integral of `psi_sampler` as the limit of its dyadic step approximations,
/// with the Cauchy values as certificate.
pub fn integrate_general(
    sampler: &(dyn Fn(f64) -> HsMap + Sync),
    driver: &Driver,
    opts: &GeneralOptions,
    stream: RngStream,
) -> Result<GeneralIntegral> {
    let mut prev = discretize(sampler, opts.horizon, 0)?;
    let mut certificate = Vec::new();
    let mut tail = 0.0;
    for n in 1..=opts.max_level {
        let cur = discretize(sampler, opts.horizon, n)?;
        let diff = cur.sub(&prev)?;
        let c = sup_gamma_ky_fan(
            &StepProcess::deterministic(&diff),
            driver,
            &opts.search,
            opts.n_mc,
            stream.child(n as u64),
        )?;
        certificate.push(c.lower);
        if c.lower < opts.tolerance {
            let law = integrate_step_det(&cur, driver, opts.n_mc, stream.child(0))?;
            return Ok(GeneralIntegral {
                law: Some(law),
                certificate,
                verdict: Verdict::Integrable { level: n },
            });
        }
        if n == opts.max_level {
            tail = modular_of(driver.chars(), &diff, &opts.search.l_search)?.total;
        }
        prev = cur;
    }
    Ok(GeneralIntegral {
        law: None,
        certificate,
        verdict: Verdict::NonIntegrable { tail_modular: tail },
    })
}

/// Terms `X_n = Theta_n (L(t_n) - L(t_n-1))` and their decoupled versions
/// `Y_n = Theta_n (L~(t_n) - L~(t_n-1))`, per replica.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentPair {
    pub n_terms: usize,
    pub x_terms: Vec<Vec<DVector<f64>>>,
    pub y_terms: Vec<Vec<DVector<f64>>>,
    /// Jump counts of the original path over the first interval.
    pub first_jumps: Vec<u64>,
    /// Branch pattern selected on each replica.
    pub branches: Vec<Vec<usize>>,
}

fn sum_terms(t: &[Vec<DVector<f64>>]) -> Vec<DVector<f64>> {
    t.iter()
        .map(|v| {
            let mut s = DVector::zeros(v[0].len());
            for x in v {
                s += x;
            }
            s
        })
        .collect()
}

impl TangentPair {
    pub fn replicas(&self) -> usize {
        self.x_terms.len()
    }

    pub fn x_sum(&self) -> Vec<DVector<f64>> {
        sum_terms(&self.x_terms)
    }

    pub fn y_sum(&self) -> Vec<DVector<f64>> {
        sum_terms(&self.y_terms)
    }
}

pub fn tangent_pair(
    psi: &StepProcess,
    driver: &Driver,
    n_mc: usize,
    stream: RngStream,
    fresh: RngStream,
) -> Result<TangentPair> {
    check_mc(n_mc)?;
    check_process(psi, driver)?;
    let copy = decoupled_driver(&driver.clone().bind(stream), fresh)?;
    let part = psi.partition();
    let paths = simulate_paths(driver, part, n_mc, stream);
    let shadow = simulate_paths(&copy, part, n_mc, fresh);
    let t = terms(psi, &paths)?;
    let y_terms = shadow
        .par_iter()
        .zip(t.branches.par_iter())
        .map(|(path, br)| {
            path.iter()
                .zip(br)
                .enumerate()
                .map(|(i, (step, &k))| psi.value(i, k).matrix() * &step.inc)
                .collect()
        })
        .collect();
    Ok(TangentPair {
        n_terms: part.intervals(),
        x_terms: t.values,
        y_terms,
        first_jumps: paths.iter().map(|p| p[0].jumps).collect(),
        branches: t.branches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingRatio {
    /// `E[||sum X|| ^ 1] / E[||sum Y|| ^ 1]`.
    pub forward: f64,
    pub forward_stderr: f64,
    /// `E[||sum Y|| ^ 1] / max_eps E[||sum eps_n X_n|| ^ 1]`.
    pub backward: f64,
    pub backward_stderr: f64,
    pub sign_patterns: usize,
    pub exhaustive: bool,
    /// Some denominator is within three standard errors of zero.
    pub unreliable: bool,
}

/// Exhaustive sign search up to this many terms.
pub const EXHAUSTIVE_SIGN_TERMS: usize = 10;

fn ratio_stats(a: &[f64], b: &[f64]) -> (f64, f64, bool) {
    let (ma, _) = mean_stderr(a);
    let (mb, seb) = mean_stderr(b);
    if mb <= 3.0 * seb || mb == 0.0 {
        return (f64::NAN, f64::NAN, true);
    }
    let r = ma / mb;
    let lin: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - r * y) / mb).collect();
    (r, mean_stderr(&lin).1, false)
}

pub fn decoupling_ratio(
    pair: &TangentPair,
    sign_budget: usize,
    stream: RngStream,
) -> DecouplingRatio {
    let kf = |v: &[DVector<f64>]| v.iter().map(|x| x.norm().min(1.0)).collect::<Vec<f64>>();
    let x = kf(&pair.x_sum());
    let y = kf(&pair.y_sum());
    let (forward, forward_stderr, bad_f) = ratio_stats(&x, &y);

    let n = pair.n_terms;
    let exhaustive = n <= EXHAUSTIVE_SIGN_TERMS;
    let patterns: Vec<Vec<f64>> = if exhaustive {
        (0..1usize << n)
            .map(|m| {
                (0..n)
                    .map(|i| if m >> i & 1 == 1 { -1.0 } else { 1.0 })
                    .collect()
            })
            .collect()
    } else {
        let mut rng = stream.rng();
        std::iter::once(vec![1.0; n])
            .chain((1..sign_budget.max(1)).map(|_| {
                (0..n)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            }))
            .collect()
    };
    let signed: Vec<Vec<f64>> = patterns
        .par_iter()
        .map(|eps| {
            pair.x_terms
                .iter()
                .map(|terms| {
                    let mut s = DVector::zeros(terms[0].len());
                    for (e, t) in eps.iter().zip(terms) {
                        s.axpy(*e, t, 1.0);
                    }
                    s.norm().min(1.0)
                })
                .collect()
        })
        .collect();
    let best = (0..signed.len()).fold(0, |b, i| {
        if mean_stderr(&signed[i]).0 > mean_stderr(&signed[b]).0 {
            i
        } else {
            b
        }
    });
    let (backward, backward_stderr, bad_b) = ratio_stats(&y, &signed[best]);
    DecouplingRatio {
        forward,
        forward_stderr,
        backward,
        backward_stderr,
        sign_patterns: patterns.len(),
        exhaustive,
        unreliable: bad_f || bad_b,
    }
}

/// `E[rho_L(Psi) ^ 1]` with `rho_L` the modular of the step function realized
/// on each path. The modular is additive over intervals, so contributions are
/// tabulated once per interval and branch.
pub fn randomized_modular(
    psi: &StepProcess,
    driver: &Driver,
    search: &LSearch,
    n_mc: usize,
    stream: RngStream,
) -> Result<(f64, f64)> {
    check_mc(n_mc)?;
    check_process(psi, driver)?;
    let table = (0..psi.intervals())
        .into_par_iter()
        .map(|i| {
            let (a, b) = psi.partition().interval(i);
            let piece = Partition::new(vec![a, b])?;
            psi.rules()[i]
                .iter()
                .map(|(_, v)| {
                    Ok(modular_of(
                        driver.chars(),
                        &StepFunction::constant(piece.clone(), v.clone()),
                        search,
                    )?
                    .total)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let paths = simulate_paths(driver, psi.partition(), n_mc, stream);
    let vals = paths
        .par_iter()
        .map(|p| {
            let mut m = 0.0;
            for (i, row) in table.iter().enumerate() {
                m += row[psi.select(i, p)?];
            }
            Ok(m.min(1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_stderr(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    use crate::characteristics::{symbol_eval, Atom};
    use crate::stats::{ecf, ks_pvalue, ks_statistic, pearson};
    use nalgebra::Complex;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_atom_driver() -> Driver {
        Driver::compound_poisson(
            HVec::new(Space::G, vec![0.1, -0.2]).unwrap(),
            vec![
                Atom {
                    atom: vec![1.5, 0.0],
                    rate: 0.7,
                },
                Atom {
                    atom: vec![-0.4, 0.8],
                    rate: 1.1,
                },
            ],
        )
        .unwrap()
    }

    fn random_psi(rng: &mut ChaCha8Rng, d_h: usize, d_g: usize, pieces: usize) -> StepFunction {
        let vals = (0..pieces)
            .map(|_| HsMap::random(rng, d_h, d_g, 1.0))
            .collect();
        StepFunction::from_intervals(Partition::uniform(0.0, 1.0, pieces).unwrap(), vals).unwrap()
    }

    #[test]
    fn zero_integrand_gives_zero_law() {
        let psi = StepFunction::zero(Partition::uniform(0.0, 1.0, 3).unwrap(), 2, 2);
        let law = integrate_step_det(&psi, &Driver::gaussian(2), 500, RngStream::new(1)).unwrap();
        assert!(law.samples.iter().all(|x| x.norm() == 0.0));
        assert_eq!(law.ky_fan, 0.0);
        let s = sup_gamma_ky_fan(
            &StepProcess::deterministic(&psi),
            &two_atom_driver(),
            &GammaSearch::default(),
            500,
            RngStream::new(2),
        )
        .unwrap();
        assert_eq!(s.lower, 0.0);
    }

    #[test]
    fn gaussian_constant_integrand_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = HsMap::random(&mut rng, 3, 3, 1.5);
        let psi = StepFunction::constant(Partition::uniform(0.0, 1.0, 4).unwrap(), phi.clone());
        let law =
            integrate_step_det(&psi, &Driver::gaussian(3), 100_000, RngStream::new(4)).unwrap();
        let mut cov = DMatrix::zeros(3, 3);
        for x in &law.samples {
            cov += x * x.transpose();
        }
        cov /= law.len() as f64;
        let target = phi.matrix() * phi.matrix().transpose();
        assert!((cov - &target).norm() < 0.05 * target.norm());
    }

    #[test]
    fn law_ecf_matches_symbol_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let driver = two_atom_driver();
        let psi = random_psi(&mut rng, 2, 2, 3);
        let law = integrate_step_det(&psi, &driver, 50_000, RngStream::new(6)).unwrap();
        for _ in 0..20 {
            let u = crate::linalg::gaussian_vector(&mut rng, 2);
            let mut target = Complex::new(1.0, 0.0);
            for i in 0..psi.intervals() {
                let g = HVec::from_dvector(Space::G, psi.on_interval(i).matrix().transpose() * &u)
                    .unwrap();
                target *= symbol_eval(driver.chars(), &g, psi.partition().lengths()[i]).unwrap();
            }
            let (emp, se) = ecf(&law.samples, &u);
            assert!((emp - target).norm() < 4.0 * se + 1e-3, "{emp} vs {target}");
        }
    }

    #[test]
    fn linearity_on_common_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_psi(&mut rng, 2, 2, 4);
        let b = random_psi(&mut rng, 2, 2, 4);
        let drv = two_atom_driver();
        let s = RngStream::new(8);
        let la = integrate_step_det(&a, &drv, 300, s).unwrap();
        let lb = integrate_step_det(&b, &drv, 300, s).unwrap();
        let lab = integrate_step_det(&a.add(&b).unwrap(), &drv, 300, s).unwrap();
        for ((x, y), z) in la.samples.iter().zip(&lb.samples).zip(&lab.samples) {
            assert!((x + y - z).norm() < 1e-12);
        }
    }

    #[test]
    fn always_predicates_reproduce_deterministic_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi = random_psi(&mut rng, 2, 2, 3);
        let drv = two_atom_driver();
        let split = StepProcess::new(
            psi.partition().clone(),
            (0..3)
                .map(|i| {
                    let v = psi.on_interval(i).clone();
                    if i == 0 {
                        vec![(Predicate::Always, v)]
                    } else {
                        vec![
                            (
                                Predicate::JumpCount {
                                    interval: i - 1,
                                    min: 0,
                                    max: 0,
                                },
                                v.clone(),
                            ),
                            (
                                Predicate::JumpCount {
                                    interval: i - 1,
                                    min: 1,
                                    max: u64::MAX,
                                },
                                v,
                            ),
                        ]
                    }
                })
                .collect(),
        )
        .unwrap();
        let s = RngStream::new(10);
        assert_eq!(
            integrate_step_pred(&split, &drv, 400, s).unwrap(),
            integrate_step_det(&psi, &drv, 400, s).unwrap()
        );
    }

    #[test]
    fn adaptedness_and_exhaustiveness_are_enforced() {
        let p = Partition::uniform(0.0, 1.0, 2).unwrap();
        let v = HsMap::identity(2);
        let peek = StepProcess::new(
            p.clone(),
            vec![
                vec![(
                    Predicate::Sign {
                        interval: 0,
                        coord: 0,
                        positive: true,
                    },
                    v.clone(),
                )],
                vec![(Predicate::Always, v.clone())],
            ],
        );
        assert!(matches!(peek, Err(CoreError::NotAdapted(_))));
        let partial = StepProcess::new(
            p,
            vec![
                vec![(Predicate::Always, v.clone())],
                vec![(
                    Predicate::Sign {
                        interval: 0,
                        coord: 0,
                        positive: true,
                    },
                    v,
                )],
            ],
        )
        .unwrap();
        let r = integrate_step_pred(&partial, &Driver::gaussian(2), 200, RngStream::new(11));
        assert!(matches!(
            r,
            Err(CoreError::PredicateNotExhaustive { interval: 1, .. })
        ));
    }

    #[test]
    fn sign_flip_preserves_ky_fan_for_symmetric_driver() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let psi = random_psi(&mut rng, 2, 2, 2);
        let drv = Driver::canonical_stable(2, 1.3).unwrap();
        let plain = integrate_step_det(&psi, &drv, 40_000, RngStream::new(13)).unwrap();
        let flipped = integrate_step_pred(
            &StepProcess::sign_flip(&psi, 0),
            &drv,
            40_000,
            RngStream::new(14),
        )
        .unwrap();
        let se = (plain.stderr.powi(2) + flipped.stderr.powi(2)).sqrt();
        assert!((plain.ky_fan - flipped.ky_fan).abs() < 3.0 * se);
    }

    /// Law of a 2-interval predictable integral against a compound-Poisson
    /// driver, by enumerating Poisson counts per atom.
    fn enumerate_law(
        psi: &StepProcess,
        chars: &CylCharacteristics,
        atoms: &[Atom],
        cap: u64,
    ) -> HashMap<Vec<i64>, f64> {
        let lens = psi.partition().lengths();
        let a = chars.a().coords().clone();
        let mut per_interval: Vec<Vec<(DVector<f64>, u64, f64)>> = Vec::new();
        for &dt in &lens {
            let mut outcomes = vec![(a.clone() * dt, 0u64, 1.0)];
            for atom in atoms {
                let h = DVector::from_vec(atom.atom.clone());
                let lam = atom.rate * dt;
                let mut next = Vec::new();
                for (x, j, p) in &outcomes {
                    let mut pk = (-lam).exp();
                    for k in 0..=cap {
                        next.push((x + &h * k as f64, j + k, p * pk));
                        pk *= lam / (k + 1) as f64;
                    }
                }
                outcomes = next;
            }
            per_interval.push(outcomes);
        }
        let mut law = HashMap::new();
        for (x0, j0, p0) in &per_interval[0] {
            for (x1, j1, p1) in &per_interval[1] {
                let path = vec![
                    GStep {
                        inc: x0.clone(),
                        jumps: *j0,
                    },
                    GStep {
                        inc: x1.clone(),
                        jumps: *j1,
                    },
                ];
                let mut s = DVector::zeros(psi.shape().0);
                for (i, st) in path.iter().enumerate() {
                    let k = psi.select(i, &path).unwrap();
                    s += psi.value(i, k).matrix() * &st.inc;
                }
                *law.entry(bin(&s)).or_insert(0.0) += p0 * p1;
            }
        }
        law
    }

    fn bin(x: &DVector<f64>) -> Vec<i64> {
        x.iter().map(|v| (v * 1e9).round() as i64).collect()
    }

    #[test]
    fn predictable_law_matches_enumeration() {
        let atoms = vec![
            Atom {
                atom: vec![1.0, 0.5],
                rate: 0.9,
            },
            Atom {
                atom: vec![-0.7, 0.3],
                rate: 0.6,
            },
        ];
        let a = HVec::new(Space::G, vec![0.2, 0.0]).unwrap();
        let drv = Driver::compound_poisson(a, atoms.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let psi = StepProcess::new(
            Partition::uniform(0.0, 1.0, 2).unwrap(),
            vec![
                vec![(Predicate::Always, HsMap::random(&mut rng, 2, 2, 1.0))],
                vec![
                    (
                        Predicate::JumpCount {
                            interval: 0,
                            min: 0,
                            max: 1,
                        },
                        HsMap::random(&mut rng, 2, 2, 1.0),
                    ),
                    (
                        Predicate::JumpCount {
                            interval: 0,
                            min: 2,
                            max: u64::MAX,
                        },
                        HsMap::random(&mut rng, 2, 2, 1.0),
                    ),
                ],
            ],
        )
        .unwrap();
        let exact = enumerate_law(&psi, drv.chars(), &atoms, 12);
        let law = integrate_step_pred(&psi, &drv, 100_000, RngStream::new(16)).unwrap();
        let mut emp: HashMap<Vec<i64>, f64> = HashMap::new();
        for x in &law.samples {
            *emp.entry(bin(x)).or_insert(0.0) += 1.0 / law.len() as f64;
        }
        let mut tv = 0.0;
        for (k, p) in &exact {
            tv += (p - emp.get(k).copied().unwrap_or(0.0)).abs();
        }
        for (k, q) in &emp {
            if !exact.contains_key(k) {
                tv += q;
            }
        }
        tv *= 0.5;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn identity_gamma_is_competitive_for_symmetric_driver() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let psi = random_psi(&mut rng, 2, 2, 2);
        let drv = Driver::canonical_stable(2, 1.5).unwrap();
        let proc_ = StepProcess::deterministic(&psi);
        let n = 20_000;
        let id = integrate_step_det(&psi, &drv, n, RngStream::new(18)).unwrap();
        // exhaustive +-1 diagonal Gamma on 2 intervals
        let paths = simulate_paths(&drv, psi.partition(), n, RngStream::new(19));
        let t = terms(&proc_, &paths).unwrap();
        for m in 0..4usize {
            let signs: Vec<f64> = (0..2)
                .map(|i| if m >> i & 1 == 1 { -1.0 } else { 1.0 })
                .collect();
            let g = with_signs(
                &ContractionStepProcess::identity(psi.partition().clone(), 2),
                &signs,
            );
            let (v, se) = mean_stderr(&gamma_values(&g, &paths, &t, Functional::Terminal).unwrap());
            assert!((v - id.ky_fan).abs() < 3.0 * (se * se + id.stderr * id.stderr).sqrt());
        }
        let best =
            sup_gamma_ky_fan(&proc_, &drv, &GammaSearch::default(), n, RngStream::new(20)).unwrap();
        assert!(
            best.lower <= id.ky_fan + 3.0 * (best.stderr.powi(2) + id.stderr.powi(2)).sqrt() + 0.02
        );
    }

    #[test]
    fn search_dominates_identity_for_asymmetric_driver() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let psi = random_psi(&mut rng, 2, 2, 3).scale(0.4);
        let proc_ = StepProcess::deterministic(&psi);
        let drv = two_atom_driver();
        let s = sup_gamma_ky_fan(
            &proc_,
            &drv,
            &GammaSearch::default(),
            5_000,
            RngStream::new(22),
        )
        .unwrap();
        assert_eq!(s.trace[0].label, "identity");
        assert!(s.trace.iter().all(|t| t.ky_fan <= s.trace[s.best].ky_fan));
        assert!(s.trace[s.best].ky_fan >= s.trace[0].ky_fan);
        assert!(s.trace.len() <= GammaSearch::default().budget);
    }

    #[test]
    fn emery_diagnostic_scales_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let psi = StepProcess::deterministic(&random_psi(&mut rng, 2, 2, 4));
        let seq: Vec<StepProcess> = (1..=4).map(|n| psi.scale(1.0 / n as f64)).collect();
        let search = GammaSearch {
            budget: 6,
            ..Default::default()
        };
        let d = emery_sup_diagnostic(&seq, &two_atom_driver(), &search, 4_000, RngStream::new(24))
            .unwrap();
        assert!(d.windows(2).all(|w| w[1] <= w[0] + 0.01), "{d:?}");
        assert!(d[3] < d[0]);
    }

    #[test]
    fn integrate_general_on_step_sampler_stops_at_matching_level() {
        let p = Partition::dyadic(0.0, 1.0, 1).unwrap();
        let psi = StepFunction::from_intervals(
            p,
            vec![
                HsMap::identity(2).scale(0.5),
                HsMap::identity(2).scale(-0.3),
            ],
        )
        .unwrap();
        let sampler = |t: f64| psi.at(t).unwrap().clone();
        let opts = GeneralOptions {
            horizon: 1.0,
            tolerance: 1e-3,
            max_level: 6,
            n_mc: 500,
            search: GammaSearch {
                budget: 4,
                ..Default::default()
            },
        };
        let r =
            integrate_general(&sampler, &Driver::gaussian(2), &opts, RngStream::new(25)).unwrap();
        assert_eq!(r.verdict, Verdict::Integrable { level: 2 });
        assert_eq!(r.certificate.last(), Some(&0.0));
    }

    #[test]
    fn integrate_general_separates_integrable_and_not() {
        let alpha = 1.5;
        let drv = Driver::canonical_stable(2, alpha).unwrap();
        let phi0 = HsMap::identity(2).scale(0.5);
        let opts = GeneralOptions {
            horizon: 1.0,
            tolerance: 0.05,
            max_level: 10,
            n_mc: 2_000,
            search: GammaSearch {
                budget: 3,
                ..Default::default()
            },
        };
        let good = |t: f64| phi0.scale(t.powf(-1.0 / (2.0 * alpha)));
        let r = integrate_general(&good, &drv, &opts, RngStream::new(26)).unwrap();
        assert!(
            matches!(r.verdict, Verdict::Integrable { .. }),
            "{:?}",
            r.certificate
        );
        assert!(r.certificate.last() < r.certificate.first());
        let bad = |t: f64| phi0.scale(t.powf(-2.0 / alpha));
        let r = integrate_general(&bad, &drv, &opts, RngStream::new(27)).unwrap();
        assert!(
            matches!(r.verdict, Verdict::NonIntegrable { .. }),
            "{:?}",
            r.certificate
        );
        assert!(r.law.is_none());
    }

    #[test]
    fn tangent_pair_rejects_stream_collision() {
        let psi = StepProcess::deterministic(&StepFunction::constant(
            Partition::uniform(0.0, 1.0, 2).unwrap(),
            HsMap::identity(2),
        ));
        let s = RngStream::new(28);
        assert!(matches!(
            tangent_pair(&psi, &Driver::gaussian(2), 200, s, s),
            Err(CoreError::StreamCollision)
        ));
    }

    #[test]
    fn deterministic_tangent_sums_agree_in_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let psi = StepProcess::deterministic(&random_psi(&mut rng, 2, 2, 3));
        let pair = tangent_pair(
            &psi,
            &two_atom_driver(),
            10_000,
            RngStream::new(30),
            RngStream::new(31),
        )
        .unwrap();
        let xn: Vec<f64> = pair.x_sum().iter().map(|x| x.norm()).collect();
        let yn: Vec<f64> = pair.y_sum().iter().map(|x| x.norm()).collect();
        assert!(ks_pvalue(ks_statistic(&xn, &yn), xn.len(), yn.len()) > 0.01);
        let r = decoupling_ratio(&pair, 64, RngStream::new(32));
        assert!(!r.unreliable && r.exhaustive);
        assert!(
            (r.forward - 1.0).abs() < 3.0 * r.forward_stderr + 1e-3,
            "{r:?}"
        );
        let rho = pearson(&xn, &yn);
        assert!(rho.abs() < 3.0 / (xn.len() as f64).sqrt());
    }

    #[test]
    fn single_term_forward_ratio_is_one() {
        let psi = StepProcess::deterministic(&StepFunction::constant(
            Partition::uniform(0.0, 1.0, 1).unwrap(),
            HsMap::identity(2),
        ));
        let pair = tangent_pair(
            &psi,
            &two_atom_driver(),
            20_000,
            RngStream::new(33),
            RngStream::new(34),
        )
        .unwrap();
        let r = decoupling_ratio(&pair, 8, RngStream::new(35));
        assert!((r.forward - 1.0).abs() < 3.0 * r.forward_stderr);
    }

    #[test]
    fn decoupled_terms_follow_realized_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let psi = StepProcess::sign_flip(&random_psi(&mut rng, 2, 2, 2), 0);
        let pair = tangent_pair(
            &psi,
            &two_atom_driver(),
            500,
            RngStream::new(37),
            RngStream::new(38),
        )
        .unwrap();
        assert_eq!(pair.replicas(), 500);
        assert!(pair.branches.iter().any(|b| b[1] == 0) && pair.branches.iter().any(|b| b[1] == 1));
        assert_eq!(pair.first_jumps.len(), 500);
    }

    #[test]
    fn randomized_modular_of_deterministic_process() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let psi = random_psi(&mut rng, 2, 2, 3).scale(0.3);
        let drv = two_atom_driver();
        let exact = modular_of(drv.chars(), &psi, &LSearch::default())
            .unwrap()
            .total
            .min(1.0);
        let (m, se) = randomized_modular(
            &StepProcess::deterministic(&psi),
            &drv,
            &LSearch::default(),
            200,
            RngStream::new(40),
        )
        .unwrap();
        assert!((m - exact).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn law_binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let law = integrate_step_det(
            &random_psi(&mut rng, 3, 2, 2),
            &two_atom_driver(),
            150,
            RngStream::new(42),
        )
        .unwrap();
        let bytes = law.to_bytes();
        assert_eq!(bytes.len(), 16 + 8 * 3 * 150);
        assert_eq!(EmpiricalLaw::from_bytes(&bytes, law.stream).unwrap(), law);
        assert!(EmpiricalLaw::from_bytes(&bytes[..20], law.stream).is_err());
        assert_eq!(law.samples_csv().lines().count(), 151);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ky_fan_in_unit_interval_and_stderr_formula(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = random_psi(&mut rng, 2, 2, 2).scale(3.0);
            let law = integrate_step_det(&psi, &two_atom_driver(), 200, RngStream::new(seed)).unwrap();
            prop_assert!((0.0..=1.0).contains(&law.ky_fan));
            let v: Vec<f64> = law.samples.iter().map(|x| x.norm().min(1.0)).collect();
            prop_assert_eq!(mean_stderr(&v), (law.ky_fan, law.stderr));
        }

        #[test]
        fn search_trace_respects_budget(seed in any::<u64>(), budget in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = StepProcess::deterministic(&random_psi(&mut rng, 2, 2, 2));
            let s = sup_gamma_ky_fan(&psi, &two_atom_driver(), &GammaSearch { budget, ..Default::default() }, 100, RngStream::new(seed)).unwrap();
            prop_assert!(s.trace.len() <= budget);
            prop_assert!(s.gamma.rules().iter().flatten().all(|(_, o)| o.op_norm() <= 1.0 + 1e-9));
        }
    }
}
