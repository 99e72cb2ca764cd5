//! Estimators: summaries, least squares, bootstrap, tail fits, `ξ`.

use serde::{Deserialize, Serialize};

use crate::env::{derive_seed, to_unit};
use crate::error::{Error, Result};
use crate::numeric::neumaier_sum;

/// Order statistics and moments of one sample. Sums are compensated and
/// taken in index order, so the result depends only on the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub stderr: f64,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
    pub mean_abs: f64,
    pub median_abs: f64,
    /// Excess kurtosis, `NaN` when the variance vanishes.
    pub kurtosis: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    neumaier_sum(v.iter().copied()) / v.len() as f64
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

impl Summary {
    pub fn of(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Samples("summary of an empty sample".into()));
        }
        let n = v.len();
        let m = mean(v);
        let m2 = neumaier_sum(v.iter().map(|x| (x - m).powi(2)));
        let m4 = neumaier_sum(v.iter().map(|x| (x - m).powi(4)));
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        let pop = m2 / n as f64;
        Ok(Self {
            count: n,
            mean: m,
            sd: var.sqrt(),
            stderr: (var / n as f64).sqrt(),
            min: s[0],
            q05: quantile_sorted(&s, 0.05),
            q25: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q75: quantile_sorted(&s, 0.75),
            q95: quantile_sorted(&s, 0.95),
            max: s[n - 1],
            mean_abs: mean(&abs),
            median_abs: median(&abs),
            kurtosis: if pop > 0.0 { m4 / n as f64 / (pop * pop) - 3.0 } else { f64::NAN },
        })
    }
}

/// Least squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
    pub points: usize,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<Fit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Samples(format!("least squares needs at least two paired points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx = neumaier_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let syy = neumaier_sum(y.iter().map(|b| (b - my) * (b - my)));
    if sxx == 0.0 {
        return Err(Error::domain("least squares with constant abscissa"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = neumaier_sum(x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2))).max(0.0);
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if x.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(Fit { slope, intercept, r2, slope_stderr, points: x.len() })
}

/// Slope of `log value` against `log n`.
pub fn estimate_exponent(ns: &[f64], values: &[f64]) -> Result<Fit> {
    if ns.len() < 3 {
        return Err(Error::Samples(format!("exponent fit needs at least 3 grid points, got {}", ns.len())));
    }
    if let Some(v) = values.iter().chain(ns).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!("exponent fit needs positive values, got {v}")));
    }
    let lx: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    ols(&lx, &ly)
}

/// Percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
}

const BOOT_TAG: u64 = 0xb007;

/// Bootstrap of the log-log slope of `stat(samples[i])` against `ns[i]`.
/// Replicas are resampled jointly across the grid, which keeps the pairing
/// of series that share seeds. Draws come from the counter generator keyed
/// by `seed`.
pub fn bootstrap_slope(
    ns: &[f64],
    samples: &[Vec<f64>],
    stat: impl Fn(&[f64]) -> f64,
    resamples: usize,
    seed: u64,
) -> Result<Interval> {
    let reps = samples.first().map_or(0, Vec::len);
    if samples.len() != ns.len() || samples.iter().any(|s| s.len() != reps) || reps < 2 {
        return Err(Error::Samples("bootstrap needs equal replica counts (at least 2) at every grid point".into()));
    }
    if resamples < 10 {
        return Err(Error::Samples("bootstrap needs at least 10 resamples".into()));
    }
    let stream = derive_seed(seed, BOOT_TAG, ns.len() as u64);
    let mut slopes = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; reps];
    for b in 0..resamples {
        let idx: Vec<usize> = (0..reps)
            .map(|i| {
                let u = to_unit(crate::env::key_hash(stream, b as i64, &[i as i64]));
                ((u * reps as f64) as usize).min(reps - 1)
            })
            .collect();
        let vals: Vec<f64> = samples
            .iter()
            .map(|s| {
                for (o, &i) in buf.iter_mut().zip(&idx) {
                    *o = s[i];
                }
                stat(&buf)
            })
            .collect();
        if let Ok(fit) = estimate_exponent(ns, &vals) {
            slopes.push(fit.slope);
        }
    }
    if slopes.len() < resamples / 2 {
        return Err(Error::Samples("bootstrap statistic was degenerate in most resamples".into()));
    }
    slopes.sort_by(f64::total_cmp);
    Ok(Interval {
        lo: quantile_sorted(&slopes, 0.025),
        hi: quantile_sorted(&slopes, 0.975),
        level: 0.95,
        resamples: slopes.len(),
    })
}

/// `ξ = d/2 - (1 + d/2) / min(p*, 2)`.
pub fn compute_xi(pstar: f64, d: usize) -> Result<f64> {
    if !(pstar > 1.0) {
        return Err(Error::domain(format!("p* must exceed 1, got {pstar}")));
    }
    let h = d as f64 / 2.0;
    Ok(h - (1.0 + h) / pstar.min(2.0))
}

/// Critical-exponent proxy and the exponent it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub pstar_proxy: f64,
    pub xi: f64,
}

/// Fits of `-log P(Z <= 1/u)` against `(log u)^γ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailFit {
    pub linear: Option<Fit>,
    pub quadratic: Option<Fit>,
    /// The `γ` with the larger `R²`, if both fits exist.
    pub better_gamma: Option<u8>,
}

pub fn tail_fit(u: &[f64], p: &[f64]) -> TailFit {
    let pts: Vec<(f64, f64)> = u.iter().zip(p).filter(|(_, &q)| q > 0.0 && q < 1.0).map(|(&a, &q)| (a.ln(), -q.ln())).collect();
    let y: Vec<f64> = pts.iter().map(|t| t.1).collect();
    let fit = |g: i32| {
        let x: Vec<f64> = pts.iter().map(|t| t.0.powi(g)).collect();
        (pts.len() >= 3).then(|| ols(&x, &y).ok()).flatten()
    };
    let (linear, quadratic) = (fit(1), fit(2));
    let better_gamma = match (linear, quadratic) {
        (Some(a), Some(b)) => Some(if b.r2 > a.r2 { 2 } else { 1 }),
        _ => None,
    };
    TailFit { linear, quadratic, better_gamma }
}

/// Empirical `P(Z <= 1/u)` for each `u`.
pub fn lower_tail(z: &[f64], u: &[f64]) -> Vec<f64> {
    let mut s = z.to_vec();
    s.sort_by(f64::total_cmp);
    u.iter().map(|&u| s.partition_point(|&v| v <= 1.0 / u) as f64 / s.len() as f64).collect()
}

/// Mean of products `a_i b_i` after centring both at `center`, with its
/// standard error.
pub fn cross_moment(a: &[f64], b: &[f64], center: f64) -> (f64, f64) {
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - center) * (y - center)).collect();
    let m = mean(&prod);
    let v = neumaier_sum(prod.iter().map(|p| (p - m).powi(2))) / (prod.len() as f64 - 1.0).max(1.0);
    (m, (v / prod.len() as f64).sqrt())
}
