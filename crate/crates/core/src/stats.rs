//! Monte-Carlo summaries, rank statistics, and a few special functions.

use nalgebra::{Complex, DVector};
use statrs::function::gamma::gamma;

/// Sample mean and its standard error.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Ky Fan functional `E[||X|| ^ 1]` with its standard error.
pub fn ky_fan(samples: &[DVector<f64>]) -> (f64, f64) {
    let v: Vec<f64> = samples.iter().map(|x| x.norm().min(1.0)).collect();
    mean_stderr(&v)
}

/// Empirical characteristic function at `u` together with the standard error
/// of its modulus error, `sqrt((Var cos + Var sin) / N)`.
pub fn ecf(samples: &[DVector<f64>], u: &DVector<f64>) -> (Complex<f64>, f64) {
    let n = samples.len() as f64;
    let (mut sc, mut ss, mut sc2, mut ss2) = (0.0, 0.0, 0.0, 0.0);
    for x in samples {
        let (s, c) = u.dot(x).sin_cos();
        sc += c;
        ss += s;
        sc2 += c * c;
        ss2 += s * s;
    }
    let mc = sc / n;
    let ms = ss / n;
    let var = (sc2 / n - mc * mc) + (ss2 / n - ms * ms);
    (Complex::new(mc, ms), (var.max(0.0) / n).sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic p-value of the two-sample KS statistic.
pub fn ks_pvalue(d: f64, na: usize, nb: usize) -> f64 {
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let sq = ne.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    kolmogorov_q(lambda)
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Percentile with linear interpolation between order statistics, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Density constant of the standard symmetric 1-d stable Levy measure,
/// `nu(dx) = c |x|^{-1-alpha} dx` for the symbol `exp(-|u|^alpha)`.
pub fn stable_levy_constant(alpha: f64) -> f64 {
    gamma(1.0 + alpha) * (std::f64::consts::PI * alpha / 2.0).sin() / std::f64::consts::PI
}

/// Trapezoid rule for `int_0^inf f(t) dt` after substituting `t = e^x`; the
/// closure receives `x` and must return `f(e^x) e^x`.
pub fn integrate_log(g: impl Fn(f64) -> f64, x_lo: f64, x_hi: f64, step: f64) -> f64 {
    let n = ((x_hi - x_lo) / step).ceil().max(1.0) as usize;
    let h = (x_hi - x_lo) / n as f64;
    let mut sum = 0.0;
    for k in 0..=n {
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        sum += w * g(x_lo + h * k as f64);
    }
    sum * h
}

/// Lower cut-off for log-substituted integrals whose integrand behaves like
/// `e^{c x}` at `-inf`; the neglected part is added in closed form by callers.
pub(crate) fn log_lower_cut(scale: f64, c: f64) -> f64 {
    (-scale.ln() - 45.0 / c).max(-scale.ln() - 600.0)
}

/// `E ||Y||^{2p}` for `Y ~ N(0, diag(s^2))`, `0 < p < 1`, from
/// `w^p = p / Gamma(1-p) int_0^inf (1 - e^{-tw}) t^{-1-p} dt`.
pub fn gaussian_norm_moment(singular: &[f64], p: f64) -> f64 {
    let s2: Vec<f64> = singular
        .iter()
        .map(|s| s * s)
        .filter(|v| *v > 0.0)
        .collect();
    if s2.is_empty() {
        return 0.0;
    }
    let smax = s2.iter().cloned().fold(0.0, f64::max);
    let smin = s2.iter().cloned().fold(f64::INFINITY, f64::min);
    let trace: f64 = s2.iter().sum();
    let lo = log_lower_cut(smax, 1.0 - p);
    let hi = -smin.ln() + 45.0 / p;
    let integrand = |x: f64| {
        let t = x.exp();
        let log_laplace: f64 = s2.iter().map(|v| -0.5 * (2.0 * t * v).ln_1p()).sum();
        -log_laplace.exp_m1() * (-p * x).exp()
    };
    let head = trace * ((1.0 - p) * lo).exp() / (1.0 - p);
    p / gamma(1.0 - p) * (head + integrate_log(integrand, lo, hi, 0.02))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_of_monotone_sequences_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [0.1, 0.5, 0.7, 9.0];
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let z = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&x, &z) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[1.0, 3.0], 50.0), 2.0);
    }

    #[test]
    fn ks_detects_shift_and_accepts_identity() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.0005).collect();
        assert!(ks_pvalue(ks_statistic(&a, &b), 1000, 1000) > 0.5);
        let c: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        assert!(ks_pvalue(ks_statistic(&a, &c), 1000, 1000) < 1e-6);
    }

    #[test]
    fn stable_constant_at_one_is_cauchy() {
        assert!((stable_levy_constant(1.0) - 1.0 / std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn norm_moment_matches_chi_closed_form() {
        // E (chi^2_r)^{p} = 2^p Gamma(r/2 + p) / Gamma(r/2)
        for r in 1..=8usize {
            for &p in &[0.1, 0.4, 0.6, 0.75, 0.95] {
                let exact = 2f64.powf(p) * gamma(r as f64 / 2.0 + p) / gamma(r as f64 / 2.0);
                let got = gaussian_norm_moment(&vec![1.0; r], p);
                assert!(
                    (got / exact - 1.0).abs() < 1e-7,
                    "r={r} p={p}: {got} vs {exact}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn norm_moment_scales_homogeneously(s in proptest::collection::vec(0.01f64..5.0, 1..6), c in 0.1f64..10.0) {
            let p = 0.6;
            let base = gaussian_norm_moment(&s, p);
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            let got = gaussian_norm_moment(&scaled, p);
            prop_assert!((got / (base * c.powf(2.0 * p)) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn ky_fan_lies_in_unit_interval(v in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
            let samples: Vec<DVector<f64>> = v.iter().map(|x| DVector::from_element(2, *x)).collect();
            let (m, se) = ky_fan(&samples);
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(se >= 0.0);
        }
    }
}
