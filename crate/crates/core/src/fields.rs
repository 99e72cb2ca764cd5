//! Fluctuation fields of the SHE and KPZ solutions and their decompositions.
//!
//! Scaling convention throughout: a test function `f` on `R^d` enters through
//! the lattice weights `F(x) = n^{-d/2} f(x / √n)`, so
//! `S_n(f) = Σ_x F(x) (Z_n^x - 1)` and `K_n(f) = Σ_x F(x) (log Z_n^x - E log Z_n)`.

use serde::{Deserialize, Serialize};

use crate::env::{derive_seed, key_hash, to_unit, EnvSpec};
use crate::error::{Error, Result};
use crate::lattice::{BoxField, Region, Slab};
use crate::numeric::NeumaierSum;
use crate::polymer::{all_starts_partition, reverse_window_field, reverse_window_len, PolymerSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// `1{|u|_∞ <= L}`.
    IndicatorBox,
    /// `exp(1 - 1/(1 - (|u|/L)^2))` inside the Euclidean ball of radius `L`.
    SmoothBump,
    /// `Π_i max(0, 1 - |u_i|/L)`.
    TensorHat,
}

/// Compactly supported test function, support inside `[-L, L]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub kind: TestKind,
    pub radius: f64,
}

impl TestFunction {
    pub fn new(kind: TestKind, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::domain(format!("test function radius must be positive, got {radius}")));
        }
        Ok(Self { kind, radius })
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let l = self.radius;
        match self.kind {
            TestKind::IndicatorBox => {
                if u.iter().all(|v| v.abs() <= l) {
                    1.0
                } else {
                    0.0
                }
            }
            TestKind::SmoothBump => {
                let r2: f64 = u.iter().map(|v| v * v).sum::<f64>() / (l * l);
                if r2 < 1.0 {
                    (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            }
            TestKind::TensorHat => u.iter().map(|v| (1.0 - v.abs() / l).max(0.0)).product(),
        }
    }

    /// Largest `|x|_∞` with possibly nonzero `f(x/√n)`.
    pub fn lattice_radius(&self, n: usize) -> i64 {
        (self.radius * (n as f64).sqrt() + 1e-9).floor() as i64
    }

    pub fn support(&self, d: usize, n: usize) -> Region {
        Region::centered(d, self.lattice_radius(n))
    }

    /// `x ↦ n^{-d/2} f(x/√n)` on the support box.
    pub fn weights(&self, d: usize, n: usize) -> BoxField {
        let sq = (n as f64).sqrt();
        let scale = (n as f64).powf(-(d as f64) / 2.0);
        let mut u = vec![0.0; d];
        BoxField::from_fn(self.support(d, n), |x| {
            for (a, &c) in u.iter_mut().zip(x) {
                *a = c as f64 / sq;
            }
            scale * self.eval(&u)
        })
    }
}

/// `δ` and the cut time `⌊n^{1-δ}⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    pub delta: f64,
    pub n: usize,
    pub cut: usize,
}

impl WindowParams {
    pub fn new(n: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0 / 6.0) {
            return Err(Error::domain(format!("δ must lie in (0, 1/6), got {delta}")));
        }
        if n < 2 {
            return Err(Error::domain("window decomposition needs n >= 2"));
        }
        let cut = ((n as f64).powf(1.0 - delta) + 1e-9).floor() as usize;
        Ok(Self { delta, n, cut: cut.min(n - 1) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctPair {
    pub s: f64,
    pub k: f64,
}

fn weighted_sum(weights: &BoxField, field: &BoxField, g: impl Fn(f64) -> f64) -> f64 {
    let mut acc = NeumaierSum::new();
    for (x, w) in weights.iter() {
        if w != 0.0 {
            acc.add(w * g(field.get(&x)));
        }
    }
    acc.value()
}

/// `S_n(f)` and `K_n(f)` from an already computed field `x ↦ Z_n^x`.
pub fn fluct_from_field(z: &BoxField, weights: &BoxField, logz_mean: f64) -> FluctPair {
    FluctPair { s: weighted_sum(weights, z, |v| v - 1.0), k: weighted_sum(weights, z, |v| v.ln() - logz_mean) }
}

fn check_mean(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("injected {what} is not finite")))
    }
}

/// `(S_n(f), K_n(f))` from one all-starts sweep. `logz_mean` estimates
/// `E log Z_n` on independent environments.
pub fn fluct_fields(sys: &PolymerSystem, n: usize, f: &TestFunction, logz_mean: f64) -> Result<FluctPair> {
    check_mean(logz_mean, "E log Z_n")?;
    let w = f.weights(sys.dim(), n);
    let z = all_starts_partition(sys, n, w.region())?;
    Ok(fluct_from_field(&z, &w, logz_mean))
}

/// The four windowed pieces of the fields.
#[derive(Debug, Clone)]
pub struct WindowDecomposition {
    pub params: WindowParams,
    /// `s_n^δ(f)`: the early-time part of `S_n(f)`.
    pub s_early: f64,
    /// `S_n^δ(f)`: the late-time part of `S_n(f)`.
    pub s_late: f64,
    /// `k_n^δ(f)`.
    pub k_early: f64,
    /// `x ↦ K_n^δ(x)` on the support of `f`.
    pub k_late: BoxField,
    /// `n^{-d/2} Σ_x f(x/√n) K_n^δ(x)`.
    pub k_late_f: f64,
    /// `S_n(f)` from the same fields, for the exact identity `S = s + S^δ`.
    pub s_total: f64,
    pub z_n: BoxField,
    pub z_cut: BoxField,
}

/// Windowed decomposition at cut `⌊n^{1-δ}⌋`. The two injected constants
/// estimate `E log Z_{cut}` and `E log(Z_n / Z_{cut})`.
pub fn window_decomposition(
    sys: &PolymerSystem,
    n: usize,
    f: &TestFunction,
    delta: f64,
    logz_cut_mean: f64,
    ratio_mean: f64,
) -> Result<WindowDecomposition> {
    let params = WindowParams::new(n, delta)?;
    check_mean(logz_cut_mean, "E log Z_cut")?;
    check_mean(ratio_mean, "E log(Z_n/Z_cut)")?;
    let w = f.weights(sys.dim(), n);
    let region = w.region().clone();
    let z_n = all_starts_partition(sys, n, &region)?;
    let z_cut = all_starts_partition(sys, params.cut, &region)?;
    let mut k_late = BoxField::zeros(region);
    for ((o, &a), &b) in k_late.values_mut().iter_mut().zip(z_n.values()).zip(z_cut.values()) {
        *o = (a / b).ln() - ratio_mean;
    }
    Ok(WindowDecomposition {
        params,
        s_early: weighted_sum(&w, &z_cut, |v| v - 1.0),
        s_late: {
            let mut acc = NeumaierSum::new();
            for ((&wx, &a), &b) in w.values().iter().zip(z_n.values()).zip(z_cut.values()) {
                acc.add(wx * (a - b));
            }
            acc.value()
        },
        k_early: weighted_sum(&w, &z_cut, |v| v.ln() - logz_cut_mean),
        k_late_f: weighted_sum(&w, &k_late, |v| v),
        s_total: weighted_sum(&w, &z_n, |v| v - 1.0),
        k_late,
        z_n,
        z_cut,
    })
}

/// Spatial cutoff of the martingale approximant: `⌈√n log n⌉ + 2` around
/// the support.
pub fn mg_truncation_radius(n: usize) -> i64 {
    let nf = n as f64;
    (nf.sqrt() * nf.ln()).ceil() as i64 + 2
}

/// `Σ_{k=cut+1}^{n} Σ_y ←Z_{[k-m_k,k)}^{k,y} E_{k,y} (p_k * g0)(y)` with the
/// spatial sum cut at distance `radius` from the support of `g0`.
pub fn martingale_sum(sys: &PolymerSystem, n: usize, cut: usize, g0: &BoxField, radius: i64) -> Result<f64> {
    if g0.dim() != sys.dim() {
        return Err(Error::domain("weight field has the wrong dimension"));
    }
    let base = g0.region().clone();
    let reach = radius.min(n as i64).max(0);
    let interior = base.grow(reach);
    let mut slab = Slab::new(interior, base.clone(), sys.budget())?;
    for (x, v) in g0.iter() {
        slab.set(&x, v);
    }
    let mut acc = NeumaierSum::new();
    for k in 1..=n {
        let next = base.grow((k as i64).min(reach));
        slab.average_into(next);
        if k <= cut || sys.env().beta == 0.0 {
            continue;
        }
        let region = slab.valid.clone();
        let g = slab.extract(&region);
        let rev = reverse_window_field(sys, k as i64, reverse_window_len(k as u64), &region)?;
        let w = sys.weight_field(k as i64, &region)?;
        for ((&gv, &rv), &wv) in g.values().iter().zip(rev.values()).zip(w.values()) {
            if gv != 0.0 {
                acc.add(rv * (wv - 1.0) * gv);
            }
        }
    }
    let v = acc.value();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Overflow("martingale approximant is not finite".into()))
    }
}

/// `M_n^δ(x)`.
pub fn martingale_approx_point(sys: &PolymerSystem, n: usize, delta: f64, x: &[i64]) -> Result<f64> {
    let params = WindowParams::new(n, delta)?;
    let g0 = BoxField::from_fn(Region::point(x), |_| 1.0);
    martingale_sum(sys, n, params.cut, &g0, mg_truncation_radius(n))
}

/// `M_n^δ(f) = n^{-d/2} Σ_x f(x/√n) M_n^δ(x)`.
pub fn martingale_approx_f(sys: &PolymerSystem, n: usize, delta: f64, f: &TestFunction) -> Result<f64> {
    let params = WindowParams::new(n, delta)?;
    martingale_sum(sys, n, params.cut, &f.weights(sys.dim(), n), mg_truncation_radius(n))
}

/// `K̂_n(x) = Σ_{k=1}^n Σ_y α_k(x,y) E_{k,y}` from one forward sweep. The
/// spatial range follows the system window.
pub fn khat(sys: &PolymerSystem, n: usize, x: &[i64]) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("K̂_n needs n >= 1"));
    }
    for t in 1..=n as i64 {
        sys.check_time(t)?;
    }
    let mut slab = sys.point_slab(x, n)?;
    let mut z_prev = 1.0;
    let mut acc = NeumaierSum::new();
    for k in 1..=n as i64 {
        slab.average_grow();
        acc.add(sys.apply_weights_noise_sum(&mut slab, k) / z_prev);
        z_prev = slab.sum();
    }
    Ok(acc.value())
}

/// Increments of `log Z_k^x` split into martingale and previsible parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoobIncrements {
    /// `log(Z_k^x / Z_{k-1}^x)`, `k = 1..=n`.
    pub raw: Vec<f64>,
    /// Inner Monte Carlo estimate of `E[log(Z_k^x / Z_{k-1}^x) | F_{k-1}]`.
    pub cond_mean: Vec<f64>,
    pub cond_stderr: Vec<f64>,
    /// `Δ^mg_k(x)`.
    pub mg: Vec<f64>,
    /// `Δ^prev_k(x)`, present when per-`k` ensemble means were injected.
    pub prev: Option<Vec<f64>>,
    pub inner_samples: usize,
}

pub const MIN_INNER_SAMPLES: usize = 1000;

/// Doob decomposition of the increments of `log Z_k^x`. The conditional
/// mean redraws slice `k` from independent sub-streams with `α_k` fixed.
/// `increment_means[k-1]` estimates `E log(Z_k / Z_{k-1})`.
pub fn doob_increments(
    sys: &PolymerSystem,
    n: usize,
    x: &[i64],
    inner_samples: usize,
    increment_means: Option<&[f64]>,
) -> Result<DoobIncrements> {
    if inner_samples < MIN_INNER_SAMPLES {
        return Err(Error::Samples(format!("inner Monte Carlo needs at least {MIN_INNER_SAMPLES} samples, got {inner_samples}")));
    }
    if let Some(m) = increment_means {
        if m.len() != n {
            return Err(Error::domain("one injected increment mean per time step is required"));
        }
    }
    for t in 1..=n as i64 {
        sys.check_time(t)?;
    }
    let mut slab = sys.point_slab(x, n)?;
    let mut z_prev = 1.0;
    let (mut raw, mut cond_mean, mut cond_stderr) = (Vec::new(), Vec::new(), Vec::new());
    for k in 1..=n as i64 {
        slab.average_grow();
        let alpha = slab.to_box().map(|v| v / z_prev);
        let (m, se) = conditional_log_increment(sys, k, &alpha, inner_samples);
        cond_mean.push(m);
        cond_stderr.push(se);
        sys.apply_weights(&mut slab, k);
        let z = slab.sum();
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::Overflow(format!("Z_{k} = {z}")));
        }
        raw.push((z / z_prev).ln());
        z_prev = z;
    }
    let mg = raw.iter().zip(&cond_mean).map(|(r, c)| r - c).collect();
    let prev = increment_means.map(|means| cond_mean.iter().zip(means).map(|(c, m)| c - m).collect());
    Ok(DoobIncrements { raw, cond_mean, cond_stderr, mg, prev, inner_samples })
}

/// Mean and standard error of `log Σ_y α(y) w'_{k,y}` over fresh draws of
/// slice `k`.
pub fn conditional_log_increment(sys: &PolymerSystem, k: i64, alpha: &BoxField, samples: usize) -> (f64, f64) {
    let mut vals = Vec::with_capacity(samples);
    for s in 0..samples as u64 {
        let fresh = sys.clone().with_fresh_slice(k, s);
        vals.push(fresh_slice_sum(&fresh, k, alpha).ln());
    }
    mean_and_stderr(&vals)
}

/// `Σ_y α(y) w_{k,y}` under the system's own slice `k`.
pub fn fresh_slice_sum(sys: &PolymerSystem, k: i64, alpha: &BoxField) -> f64 {
    let d = sys.dim();
    let region = alpha.region();
    let len = (region.hi[d - 1] - region.lo[d - 1] + 1) as usize;
    let mut acc = NeumaierSum::new();
    for (row, prefix) in alpha.values().chunks(len).zip(row_prefixes(region)) {
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let rs = sys.row_sampler(k, &prefix);
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 {
                acc.add(a * rs.weight(region.lo[d - 1] + j as i64));
            }
        }
    }
    acc.value()
}

fn row_prefixes(region: &Region) -> impl Iterator<Item = Vec<i64>> + '_ {
    let d = region.dim();
    let lo = region.lo[..d - 1].to_vec();
    let hi = region.hi[..d - 1].to_vec();
    Region::new(lo, hi).sites().collect::<Vec<_>>().into_iter()
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = crate::numeric::neumaier_sum(v.iter().copied()) / n;
    let var = crate::numeric::neumaier_sum(v.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimates for `U = Σ_i a_i (η_i - 1)`, `φ(x) = x - log(1+x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppendixDiag {
    pub atoms: usize,
    pub samples: usize,
    pub sum_a_sq: f64,
    pub mean_abs_phi: f64,
    pub mean_abs_phi_stderr: f64,
    pub mean_log_sq: f64,
    pub mean_log_sq_stderr: f64,
    /// `-E[log η]` estimated from the same draws.
    pub gamma_app: f64,
    pub min_u: f64,
}

impl AppendixDiag {
    pub fn phi_ratio(&self) -> f64 {
        self.mean_abs_phi / self.sum_a_sq
    }

    pub fn log_sq_ratio(&self) -> f64 {
        self.mean_log_sq / self.sum_a_sq
    }
}

pub fn phi(x: f64) -> f64 {
    x - x.ln_1p()
}

const APPENDIX_TAG: u64 = 0xa99e;

/// `η_i = e^{βω_i - λ(β)}` with `ω_i` drawn from `eta_law`; `samples`
/// independent copies of `U`.
pub fn appendix_phi_diag(a: &[f64], eta_law: &EnvSpec, samples: usize, seed: u64) -> Result<AppendixDiag> {
    if a.is_empty() || a.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::domain("weights must be nonnegative and finite"));
    }
    let total: f64 = a.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::domain(format!("weights must sum to 1, got {total}")));
    }
    if samples < 2 {
        return Err(Error::Samples("need at least two samples".into()));
    }
    let stream = derive_seed(seed, APPENDIX_TAG, a.len() as u64);
    let (mut phis, mut logs) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
    let mut log_eta = NeumaierSum::new();
    let mut min_u = f64::INFINITY;
    for s in 0..samples {
        let mut u = NeumaierSum::new();
        for (i, &ai) in a.iter().enumerate() {
            let omega = eta_law.family.quantile(to_unit(key_hash(stream, s as i64 + 1, &[i as i64])));
            let eta = eta_law.weight_of(omega);
            if i == 0 {
                log_eta.add(eta.ln());
            }
            u.add(ai * (eta - 1.0));
        }
        let u = u.value();
        min_u = min_u.min(u);
        phis.push(phi(u).abs());
        logs.push(u.ln_1p().powi(2));
    }
    let (mean_abs_phi, mean_abs_phi_stderr) = mean_and_stderr(&phis);
    let (mean_log_sq, mean_log_sq_stderr) = mean_and_stderr(&logs);
    Ok(AppendixDiag {
        atoms: a.len(),
        samples,
        sum_a_sq: a.iter().map(|v| v * v).sum(),
        mean_abs_phi,
        mean_abs_phi_stderr,
        mean_log_sq,
        mean_log_sq_stderr,
        gamma_app: -log_eta.value() / samples as f64,
        min_u,
    })
}

/// One environment's realized fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctuationSample {
    pub s_n: f64,
    pub k_n: f64,
    pub m_n_delta: Option<f64>,
    pub s_n_delta_early: f64,
    pub s_n_delta_late: f64,
    pub k_n_delta_early: f64,
    pub k_n_delta_late_f: f64,
    pub logz_mean_used: f64,
}

/// Constants estimated on independent environments and injected into the
/// centred fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedMeans {
    pub logz: f64,
    pub logz_cut: f64,
    pub ratio: f64,
}

pub fn fluctuation_sample(
    sys: &PolymerSystem,
    n: usize,
    f: &TestFunction,
    delta: f64,
    means: &InjectedMeans,
    with_martingale: bool,
) -> Result<FluctuationSample> {
    check_mean(means.logz, "E log Z_n")?;
    let dec = window_decomposition(sys, n, f, delta, means.logz_cut, means.ratio)?;
    let w = f.weights(sys.dim(), n);
    let pair = fluct_from_field(&dec.z_n, &w, means.logz);
    let m_n_delta = if with_martingale { Some(martingale_approx_f(sys, n, delta, f)?) } else { None };
    Ok(FluctuationSample {
        s_n: pair.s,
        k_n: pair.k,
        m_n_delta,
        s_n_delta_early: dec.s_early,
        s_n_delta_late: dec.s_late,
        k_n_delta_early: dec.k_early,
        k_n_delta_late_f: dec.k_late_f,
        logz_mean_used: means.logz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{heat_kernel, SpaceTimePoint};
    use crate::numeric::rel_err;
    use crate::polymer::{forward_partition, polymer_measure_alpha, Window};

    fn gauss(beta: f64) -> EnvSpec {
        EnvSpec::gaussian(beta).unwrap()
    }

    #[test]
    fn test_function_shapes() {
        let b = TestFunction::new(TestKind::SmoothBump, 1.0).unwrap();
        assert_eq!(b.eval(&[0.0, 0.0]), 1.0);
        assert_eq!(b.eval(&[1.0, 0.0]), 0.0);
        let h = TestFunction::new(TestKind::TensorHat, 2.0).unwrap();
        assert_eq!(h.eval(&[1.0, -1.0]), 0.25);
        let i = TestFunction::new(TestKind::IndicatorBox, 0.5).unwrap();
        assert_eq!(i.eval(&[0.5, -0.5]), 1.0);
        assert_eq!(i.lattice_radius(64), 4);
        assert!(TestFunction::new(TestKind::TensorHat, 0.0).is_err());
    }

    #[test]
    fn window_params() {
        let p = WindowParams::new(64, 1.0 / 6.0 - 1e-9).unwrap();
        assert_eq!(p.cut, 32);
        assert!(WindowParams::new(64, 0.2).is_err());
        assert!(WindowParams::new(64, 0.0).is_err());
    }

    #[test]
    fn beta_zero_fields_vanish() {
        let sys = PolymerSystem::new(gauss(0.0), 1, 3).unwrap();
        let f = TestFunction::new(TestKind::SmoothBump, 1.0).unwrap();
        let p = fluct_fields(&sys, 9, &f, 0.0).unwrap();
        assert_eq!((p.s, p.k), (0.0, 0.0));
        let means = InjectedMeans { logz: 0.0, logz_cut: 0.0, ratio: 0.0 };
        let s = fluctuation_sample(&sys, 9, &f, 0.1, &means, true).unwrap();
        assert_eq!(s.m_n_delta, Some(0.0));
        assert_eq!((s.s_n_delta_early, s.s_n_delta_late, s.k_n_delta_early, s.k_n_delta_late_f), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(khat(&sys, 5, &[0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn decomposition_identity_and_linearity() {
        let sys = PolymerSystem::new(gauss(0.5), 7, 2).unwrap();
        let f = TestFunction::new(TestKind::TensorHat, 1.0).unwrap();
        let g = TestFunction::new(TestKind::SmoothBump, 0.7).unwrap();
        let dec = window_decomposition(&sys, 25, &f, 0.1, 0.0, 0.0).unwrap();
        assert!((dec.s_early + dec.s_late - dec.s_total).abs() <= 1e-12);
        let n = 25;
        let wf = f.weights(2, n);
        let wg = g.weights(2, n);
        let reg = wf.region().clone();
        let z = all_starts_partition(&sys, n, &reg).unwrap();
        let combo = BoxField::from_fn(reg.clone(), |x| 2.0 * wf.get(x) - 3.0 * wg.get(x));
        let a = fluct_from_field(&z, &combo, 0.1);
        let (pf, pg) = (fluct_from_field(&z, &wf, 0.1), fluct_from_field(&z, &wg, 0.1));
        assert!((a.s - (2.0 * pf.s - 3.0 * pg.s)).abs() <= 1e-12);
        assert!((a.k - (2.0 * pf.k - 3.0 * pg.k)).abs() <= 1e-12);
    }

    #[test]
    fn khat_small_cases() {
        let sys = PolymerSystem::new(EnvSpec::rademacher(0.6).unwrap(), 11, 3).unwrap();
        let x = [1, 0, -1];
        let k1 = khat(&sys, 1, &x).unwrap();
        let mut want = 0.0;
        for a in 0..3 {
            for s in [-1, 1] {
                let mut y = x;
                y[a] += s;
                want += sys.noise(1, &y).unwrap() / 6.0;
            }
        }
        assert!((k1 - want).abs() < 1e-14);
        // against α_k computed separately
        let n = 5;
        let mut total = 0.0;
        for k in 1..=n {
            let alpha = polymer_measure_alpha(&sys, &x, k).unwrap();
            for (y, a) in alpha.iter() {
                total += a * sys.noise(k as i64, &y).unwrap();
            }
        }
        assert!(rel_err(khat(&sys, n, &x).unwrap(), total) < 1e-10);
    }

    #[test]
    fn martingale_hand_case() {
        // d = 1, n = 2: only k = 2, window {1}
        let sys = PolymerSystem::new(gauss(0.7), 3, 1).unwrap();
        let got = martingale_approx_point(&sys, 2, 0.1, &[0]).unwrap();
        let p2 = heat_kernel(1, 2).unwrap();
        let mut want = 0.0;
        for y in -2..=2i64 {
            let rev = 0.5 * (sys.weight(1, &[y - 1]).unwrap() + sys.weight(1, &[y + 1]).unwrap());
            want += rev * sys.noise(2, &[y]).unwrap() * p2.get(&[y]);
        }
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn martingale_radius_doubling() {
        let sys = PolymerSystem::new(gauss(0.3), 5, 2).unwrap();
        let n = 36;
        let f = TestFunction::new(TestKind::SmoothBump, 0.5).unwrap();
        let w = f.weights(2, n);
        let cut = WindowParams::new(n, 0.1).unwrap().cut;
        let r = mg_truncation_radius(n);
        let a = martingale_sum(&sys, n, cut, &w, r).unwrap();
        let b = martingale_sum(&sys, n, cut, &w, 2 * r).unwrap();
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-3), "{a} {b}");
    }

    #[test]
    fn doob_telescopes() {
        let sys = PolymerSystem::new(gauss(0.5), 2, 2).unwrap();
        let inc = doob_increments(&sys, 4, &[0, 0], 1000, None).unwrap();
        let z = forward_partition(&sys, &SpaceTimePoint::origin(2), 4, None).unwrap();
        assert!((inc.raw.iter().sum::<f64>() - z.ln()).abs() <= 1e-12);
        for (m, c, r) in inc.mg.iter().zip(&inc.cond_mean).zip(&inc.raw).map(|((m, c), r)| (m, c, r)) {
            assert!((m - (r - c)).abs() < 1e-15);
        }
        assert!(doob_increments(&sys, 4, &[0, 0], 999, None).is_err());
        let sys0 = PolymerSystem::new(gauss(0.0), 2, 2).unwrap();
        let inc0 = doob_increments(&sys0, 3, &[0, 0], 1000, Some(&[0.0; 3])).unwrap();
        assert!(inc0.raw.iter().chain(&inc0.mg).chain(inc0.prev.as_ref().unwrap()).all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn doob_centering() {
        // resampling the last slice itself: Δ^mg averages to zero
        let sys = PolymerSystem::new(gauss(0.8), 9, 2).unwrap();
        let n = 5;
        let inc = doob_increments(&sys, n, &[0, 0], 2000, None).unwrap();
        let k = n as i64;
        let reps = 400;
        let mut acc = 0.0;
        let mut alpha_sys = sys.point_slab(&[0, 0], n).unwrap();
        let mut z_prev = 1.0;
        for t in 1..k {
            alpha_sys.average_grow();
            sys.apply_weights(&mut alpha_sys, t);
            z_prev = alpha_sys.sum();
        }
        alpha_sys.average_grow();
        let alpha = alpha_sys.to_box().map(|v| v / z_prev);
        let mut vals = Vec::new();
        for s in 0..reps {
            let other = sys.clone().with_fresh_slice(k, 1_000_000 + s);
            let v = fresh_slice_sum(&other, k, &alpha).ln() - inc.cond_mean[n - 1];
            acc += v;
            vals.push(v);
        }
        let (m, se) = mean_and_stderr(&vals);
        let total_se = (se * se + inc.cond_stderr[n - 1].powi(2)).sqrt();
        assert!(m.abs() <= 4.0 * total_se, "{m} ± {total_se}");
        assert!((acc / reps as f64 - m).abs() < 1e-12);
    }

    #[test]
    fn appendix_small_cases() {
        let eta = gauss(0.5);
        let one = appendix_phi_diag(&[1.0], &eta, 1000, 1).unwrap();
        assert_eq!(one.sum_a_sq, 1.0);
        assert!(one.mean_abs_phi.is_finite() && one.mean_log_sq.is_finite());
        assert!(one.min_u > -1.0);
        // γ = -E log η = λ(β) for Gaussian η
        assert!((one.gamma_app - 0.125).abs() < 5.0 * 0.5 / (1000f64).sqrt());
        let a = vec![0.25; 4];
        let four = appendix_phi_diag(&a, &eta, 1000, 1).unwrap();
        assert!((four.sum_a_sq - 0.25).abs() < 1e-15);
        assert!(appendix_phi_diag(&[0.5, 0.6], &eta, 10, 1).is_err());
        assert!(appendix_phi_diag(&[1.5, -0.5], &eta, 10, 1).is_err());
        assert!(phi(0.3) > 0.0 && phi(-0.5) > 0.0 && phi(0.0) == 0.0);
    }

    #[test]
    fn windowed_fields_match_exact_for_wide_window() {
        let sys = PolymerSystem::new(gauss(0.4), 3, 3).unwrap();
        let f = TestFunction::new(TestKind::SmoothBump, 0.5).unwrap();
        let a = fluct_fields(&sys, 16, &f, -0.01).unwrap();
        let b = fluct_fields(&sys.clone().with_window(Window::Diffusive { sigmas: 100.0 }), 16, &f, -0.01).unwrap();
        assert_eq!(a, b);
    }
}
