//! The experiment kinds. Every kind maps replicas to rows in parallel,
//! collects them in replica order and aggregates sequentially, so the
//! numbers depend on the config alone and not on the thread count.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{CovStatistic, ExperimentConfig, ExperimentKind};
use super::stats::{
    bootstrap_slope, compute_xi, cross_moment, estimate_exponent, lower_tail, mean, median, ols, tail_fit, Fit,
    Interval, ModelParams, Summary, TailFit,
};
use super::{AggregateRow, Check, SampleRow};
use crate::error::{Error, Result};
use crate::fields::{
    appendix_phi_diag, conditional_log_increment, doob_increments, fluct_from_field, fluctuation_sample,
    fresh_slice_sum, AppendixDiag, InjectedMeans, WindowParams,
};
use crate::lattice::{collision_moment, Region, SpaceTimePoint};
use crate::numeric::NeumaierSum;
use crate::polymer::{all_starts_partition, partition_path, polymer_measure_alpha, PolymerSystem, Window};

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub columns: Vec<String>,
    pub samples: Vec<SampleRow>,
    pub aggregate: Vec<AggregateRow>,
    pub results: Results,
    pub checks: Vec<Check>,
    pub wall_time_s: f64,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Column `field` of the samples at horizon `n`, in replica order.
    pub fn column(&self, n: usize, field: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == field)?;
        Some(self.samples.iter().filter(|r| r.n == n).map(|r| r.values[j]).collect())
    }

    pub fn aggregate_for(&self, n: usize, field: &str) -> Option<&Summary> {
        self.aggregate.iter().find(|a| a.n == n && a.field == field).map(|a| &a.summary)
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Results {
    Simulate(SimulateResults),
    Exponent(ExponentResults),
    Tail(TailResults),
    Overlap(OverlapResults),
    Moments(MomentResults),
    Compare(CompareResults),
    Covariance(CovarianceResults),
    Doob(DoobResults),
    AppendixPhi(AppendixResults),
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanPoint {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateResults {
    pub z: Vec<MeanPoint>,
    pub log_z: Vec<MeanPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InjectedEstimate {
    pub n: usize,
    pub logz: f64,
    pub logz_stderr: f64,
    pub cut: Option<usize>,
    pub logz_cut: Option<f64>,
    pub logz_cut_stderr: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeEstimate {
    pub fit: Fit,
    pub ci: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExponentResults {
    pub injected: Vec<InjectedEstimate>,
    pub sd_s: Vec<MeanPoint>,
    pub sd_k: Vec<MeanPoint>,
    pub slope_s: SlopeEstimate,
    pub slope_k: SlopeEstimate,
    /// `-ξ` with `p* ∧ 2 = 2`.
    pub target: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailCurve {
    pub n: usize,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub count: usize,
    pub fit: TailFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailResults {
    pub curves: Vec<TailCurve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapResults {
    pub overlap: Vec<MeanPoint>,
    pub fit: Option<Fit>,
    pub target: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentSeries {
    pub p: f64,
    pub points: Vec<MeanPoint>,
    pub log_slope: Option<f64>,
    pub flat: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentResults {
    pub series: Vec<MomentSeries>,
    /// `E[Z_n^2]` from the two-replica collision recursion.
    pub exact_second_moment: Vec<(usize, f64)>,
    pub model: Option<ModelParams>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparePoint {
    pub n: usize,
    pub median_abs_diff: f64,
    pub median_abs_s: f64,
    pub median_abs_k: f64,
    /// Median over replicas of `|S-K| / min(|S|, |K|)`.
    pub median_ratio: f64,
    /// `median|S-K| / min(median|S|, median|K|)`.
    pub ratio_of_medians: f64,
    /// Shift of `S-K` that a 4-stderr error in the injected mean produces.
    pub injection_shift: f64,
    pub median_abs_s_late: Option<f64>,
    pub median_abs_late_minus_mg: Option<f64>,
    pub max_decomposition_error: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareResults {
    pub injected: Vec<InjectedEstimate>,
    pub points: Vec<ComparePoint>,
    pub slope_abs_diff: Option<Fit>,
    pub slope_abs_s: Option<Fit>,
    pub slope_abs_k: Option<Fit>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovPoint {
    pub r: i64,
    pub cov: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovCurve {
    pub n: usize,
    pub points: Vec<CovPoint>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceResults {
    pub statistic: CovStatistic,
    pub injected: Vec<InjectedEstimate>,
    pub curves: Vec<CovCurve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DoobStep {
    pub k: usize,
    pub mean_mg: f64,
    pub stderr_mg: f64,
    pub mean_prev: f64,
    pub stderr_prev: f64,
    pub injected_increment_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DoobResults {
    pub n: usize,
    pub steps: Vec<DoobStep>,
    pub max_telescope_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AppendixResults {
    pub diags: Vec<AppendixDiag>,
    pub phi_ratio_spread: f64,
    pub log_sq_ratio_spread: f64,
}

fn origin(d: usize) -> Vec<i64> {
    vec![0; d]
}

fn system(cfg: &ExperimentConfig, seed: u64) -> Result<PolymerSystem> {
    let spec = cfg.env_spec()?;
    // nothing fluctuates at β = 0, and the exact window keeps Z_n = 1
    let window = if spec.beta == 0.0 { Window::Exact } else { cfg.window };
    Ok(PolymerSystem::new(spec, seed, cfg.d)?.with_window(window).with_budget(cfg.budget))
}

fn par_map<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..count).into_par_iter().map(f).collect()
}

fn nmax(cfg: &ExperimentConfig) -> usize {
    *cfg.n_grid.last().expect("validated grid")
}

/// `Z_n` at the origin for every `n` of the grid, one sweep per replica.
fn grid_partitions(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let sys = system(cfg, seed)?;
    let path = partition_path(&sys, &SpaceTimePoint::origin(cfg.d), nmax(cfg))?;
    Ok(cfg.n_grid.iter().map(|&n| path[n]).collect())
}

/// Rows in `n`-major order from per-replica vectors of per-`n` rows.
fn n_major(ns: &[usize], per_rep: Vec<Vec<Vec<f64>>>, seed: impl Fn(usize) -> u64) -> Vec<SampleRow> {
    let mut rows = Vec::with_capacity(ns.len() * per_rep.len());
    for (i, &n) in ns.iter().enumerate() {
        for (r, rep) in per_rep.iter().enumerate() {
            rows.push(SampleRow { n, replica: r, seed: seed(r), values: rep[i].clone() });
        }
    }
    rows
}

fn aggregate(columns: &[String], rows: &[SampleRow]) -> Result<Vec<AggregateRow>> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.dedup();
    ns.sort_unstable();
    ns.dedup();
    let mut out = Vec::new();
    for n in ns {
        for (j, c) in columns.iter().enumerate() {
            let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.values[j]).collect();
            out.push(AggregateRow { n, field: c.clone(), summary: Summary::of(&v)? });
        }
    }
    Ok(out)
}

fn mean_point(n: usize, v: &[f64]) -> Result<MeanPoint> {
    let s = Summary::of(v)?;
    Ok(MeanPoint { n, mean: s.mean, stderr: s.stderr, count: s.count })
}

fn sd_point(n: usize, v: &[f64]) -> Result<MeanPoint> {
    let s = Summary::of(v)?;
    // stderr of the sample sd, normal approximation
    Ok(MeanPoint { n, mean: s.sd, stderr: s.sd / (2.0 * (s.count as f64 - 1.0)).sqrt(), count: s.count })
}

fn within(mean: f64, target: f64, stderr: f64, k: f64) -> bool {
    (mean - target).abs() <= k * stderr + 1e-12 * target.abs().max(1.0)
}

struct Partial {
    columns: Vec<&'static str>,
    samples: Vec<SampleRow>,
    results: Results,
    checks: Vec<Check>,
}

/// Run an experiment under a thread pool of the configured size.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let part = pool.install(|| match cfg.kind {
        ExperimentKind::Simulate => simulate(cfg),
        ExperimentKind::Exponent | ExperimentKind::Compare => fluctuations(cfg),
        ExperimentKind::Tail => tail(cfg),
        ExperimentKind::Overlap => overlap(cfg),
        ExperimentKind::Moments => moments(cfg),
        ExperimentKind::Covariance => covariance(cfg),
        ExperimentKind::Doob => doob(cfg),
        ExperimentKind::AppendixPhi => appendix(cfg),
    })?;
    let columns: Vec<String> = part.columns.iter().map(|s| s.to_string()).collect();
    let aggregate = aggregate(&columns, &part.samples)?;
    Ok(RunOutput {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        columns,
        samples: part.samples,
        aggregate,
        results: part.results,
        checks: part.checks,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn simulate(cfg: &ExperimentConfig) -> Result<Partial> {
    let per_rep = par_map(cfg.replicas, |r| {
        let z = grid_partitions(cfg, cfg.replica_seed(r))?;
        Ok(z.into_iter().map(|z| vec![z, z.ln()]).collect::<Vec<_>>())
    })?;
    let samples = n_major(&cfg.n_grid, per_rep, |r| cfg.replica_seed(r));
    let (mut zs, mut logs, mut checks) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &cfg.n_grid {
        let z: Vec<f64> = samples.iter().filter(|r| r.n == n).map(|r| r.values[0]).collect();
        let l: Vec<f64> = samples.iter().filter(|r| r.n == n).map(|r| r.values[1]).collect();
        let p = mean_point(n, &z)?;
        checks.push(Check::new(
            format!("mean_z_n{n}"),
            within(p.mean, 1.0, p.stderr, 4.0),
            format!("mean Z = {:.6} ± {:.2e}, |dev| = {:.2} stderr", p.mean, p.stderr, (p.mean - 1.0).abs() / p.stderr),
        ));
        zs.push(p);
        logs.push(mean_point(n, &l)?);
    }
    Ok(Partial {
        columns: vec!["z", "log_z"],
        samples,
        results: Results::Simulate(SimulateResults { z: zs, log_z: logs }),
        checks,
    })
}

fn tail(cfg: &ExperimentConfig) -> Result<Partial> {
    let family = cfg.env_spec()?.family;
    if !family.conc_ok() {
        return Err(Error::Config(format!("family {} lacks the concentration property", family.name())));
    }
    let per_rep = par_map(cfg.replicas, |r| {
        Ok(grid_partitions(cfg, cfg.replica_seed(r))?.into_iter().map(|z| vec![z]).collect::<Vec<_>>())
    })?;
    let samples = n_major(&cfg.n_grid, per_rep, |r| cfg.replica_seed(r));
    let mut curves = Vec::new();
    let mut checks = Vec::new();
    for &n in &cfg.n_grid {
        let z: Vec<f64> = samples.iter().filter(|r| r.n == n).map(|r| r.values[0]).collect();
        let p = lower_tail(&z, &cfg.u_grid);
        let fit = tail_fit(&cfg.u_grid, &p);
        checks.push(Check::new(
            format!("tail_monotone_n{n}"),
            p.windows(2).all(|w| w[0] >= w[1]) && p.iter().all(|q| (0.0..=1.0).contains(q)),
            format!("{:?}", p),
        ));
        let (r1, r2) = (fit.linear.map(|f| f.r2), fit.quadratic.map(|f| f.r2));
        checks.push(Check::new(
            format!("tail_quadratic_better_n{n}"),
            fit.better_gamma == Some(2),
            format!("R² linear {:?}, quadratic {:?}", r1, r2),
        ));
        curves.push(TailCurve { n, u: cfg.u_grid.clone(), p, count: z.len(), fit });
    }
    Ok(Partial { columns: vec!["z"], samples, results: Results::Tail(TailResults { curves }), checks })
}

/// `Σ_y α_n(0,y)^2` for every `n` of the grid from one sweep.
fn overlap_path(sys: &PolymerSystem, d: usize, ns: &[usize]) -> Result<Vec<f64>> {
    let top = *ns.last().expect("validated grid");
    for t in 1..top as i64 {
        sys.check_time(t)?;
    }
    let mut slab = sys.point_slab(&origin(d), top)?;
    let mut out = Vec::with_capacity(ns.len());
    let mut next = ns.iter().peekable();
    for t in 1..=top {
        slab.average_grow();
        if next.peek() == Some(&&t) {
            next.next();
            let z = slab.sum();
            let mut sq = NeumaierSum::new();
            slab.rows(|_, _, row| {
                for &v in row {
                    sq.add(v * v);
                }
            });
            let o = sq.value() / (z * z);
            if !o.is_finite() {
                return Err(Error::Overflow(format!("overlap at n = {t}")));
            }
            out.push(o);
        }
        if t < top {
            sys.apply_weights(&mut slab, t as i64);
        }
    }
    Ok(out)
}

fn overlap(cfg: &ExperimentConfig) -> Result<Partial> {
    let per_rep = par_map(cfg.replicas, |r| {
        let sys = system(cfg, cfg.replica_seed(r))?;
        Ok(overlap_path(&sys, cfg.d, &cfg.n_grid)?.into_iter().map(|v| vec![v]).collect::<Vec<_>>())
    })?;
    let samples = n_major(&cfg.n_grid, per_rep, |r| cfg.replica_seed(r));
    let mut pts = Vec::new();
    for &n in &cfg.n_grid {
        let v: Vec<f64> = samples.iter().filter(|r| r.n == n).map(|r| r.values[0]).collect();
        pts.push(mean_point(n, &v)?);
    }
    let in_range = samples.iter().all(|r| r.values[0] > 0.0 && r.values[0] <= 1.0 + 1e-12);
    let mut checks = vec![Check::new("overlap_in_unit_interval", in_range, "every Σα² in (0, 1]")];
    let target = -(cfg.d as f64) / 2.0;
    let fit = if pts.len() >= 3 {
        let ns: Vec<f64> = pts.iter().map(|p| p.n as f64).collect();
        let m: Vec<f64> = pts.iter().map(|p| p.mean).collect();
        Some(estimate_exponent(&ns, &m)?)
    } else {
        None
    };
    if let Some(f) = fit {
        checks.push(Check::new(
            "overlap_slope_band",
            (target - 0.4..=target + 0.4).contains(&f.slope),
            format!("slope {:.4}, band [{:.2}, {:.2}]", f.slope, target - 0.4, target + 0.4),
        ));
    }
    Ok(Partial {
        columns: vec!["overlap"],
        samples,
        results: Results::Overlap(OverlapResults { overlap: pts, fit, target }),
        checks,
    })
}

fn moments(cfg: &ExperimentConfig) -> Result<Partial> {
    let per_rep = par_map(cfg.replicas, |r| {
        Ok(grid_partitions(cfg, cfg.replica_seed(r))?.into_iter().map(|z| vec![z]).collect::<Vec<_>>())
    })?;
    let samples = n_major(&cfg.n_grid, per_rep, |r| cfg.replica_seed(r));
    let spec = cfg.env_spec()?;
    let mut series = Vec::new();
    let mut checks = Vec::new();
    let mut exact = Vec::new();
    for &n in &cfg.n_grid {
        let e2 = collision_moment(cfg.d, n, spec.pair_boost(), cfg.window.radius(2 * n, cfg.d), cfg.budget)?;
        exact.push((n, e2));
    }
    for &p in &cfg.p_grid {
        let mut pts = Vec::new();
        for &n in &cfg.n_grid {
            let v: Vec<f64> = samples.iter().filter(|r| r.n == n).map(|r| r.values[0].powf(p)).collect();
            pts.push(mean_point(n, &v)?);
        }
        let log_slope = if pts.len() >= 2 {
            let x: Vec<f64> = pts.iter().map(|q| (q.n as f64).ln()).collect();
            let y: Vec<f64> = pts.iter().map(|q| q.mean.ln()).collect();
            ols(&x, &y).ok().map(|f| f.slope)
        } else {
            None
        };
        // flat: grows slower than n^{0.05} across the grid
        let flat = log_slope.is_some_and(|s| s <= FLAT_SLOPE);
        if p == 1.0 {
            for q in &pts {
                checks.push(Check::new(
                    format!("first_moment_n{}", q.n),
                    within(q.mean, 1.0, q.stderr, 4.0),
                    format!("E Z = {:.6} ± {:.2e}", q.mean, q.stderr),
                ));
            }
        }
        if p == 2.0 {
            for (q, &(_, e2)) in pts.iter().zip(&exact) {
                checks.push(Check::new(
                    format!("second_moment_vs_exact_n{}", q.n),
                    within(q.mean, e2, q.stderr, 4.0),
                    format!("MC {:.6} ± {:.2e}, exact {:.6}", q.mean, q.stderr, e2),
                ));
            }
        }
        series.push(MomentSeries { p, points: pts, log_slope, flat });
    }
    let pstar = series.iter().filter(|s| s.flat && s.p > 1.0).map(|s| s.p).fold(None, |a: Option<f64>, p| Some(a.map_or(p, |a| a.max(p))));
    let model = match pstar {
        Some(p) => Some(ModelParams { pstar_proxy: p, xi: compute_xi(p, cfg.d)? }),
        None => None,
    };
    Ok(Partial {
        columns: vec!["z"],
        samples,
        results: Results::Moments(MomentResults { series, exact_second_moment: exact, model }),
        checks,
    })
}

/// Log-log growth rate below which a moment curve counts as flat.
pub const FLAT_SLOPE: f64 = 0.05;

/// Per injection environment, the estimate of `E log Z_h` for each horizon
/// `h`. Uses `log Z - (Z - 1)`, which has the same mean because `E Z = 1`
/// but a tenth of the spread, averaged over the box `[-mean_box, mean_box]^d`
/// of starting points.
fn injection_block(cfg: &ExperimentConfig, horizons: &[usize]) -> Result<Vec<Vec<f64>>> {
    let cv = |z: f64| z.ln() - (z - 1.0);
    par_map(cfg.mean_replicas, |r| {
        let sys = system(cfg, cfg.injection_seed(r))?;
        if cfg.mean_box == 0 {
            let top = horizons.iter().copied().max().unwrap_or(0);
            let path = partition_path(&sys, &SpaceTimePoint::origin(cfg.d), top)?;
            return Ok(horizons.iter().map(|&h| cv(path[h])).collect());
        }
        let region = Region::centered(cfg.d, cfg.mean_box);
        horizons
            .iter()
            .map(|&h| {
                let z = all_starts_partition(&sys, h, &region)?;
                let vals = z.values();
                Ok(crate::numeric::neumaier_sum(vals.iter().map(|&z| cv(z))) / vals.len() as f64)
            })
            .collect()
    })
}

/// `E log Z_n` (and `E log Z_cut` when `with_cut`) on the injection block.
fn injected_means(cfg: &ExperimentConfig, with_cut: bool) -> Result<Vec<InjectedEstimate>> {
    let cuts: Vec<Option<usize>> = cfg
        .n_grid
        .iter()
        .map(|&n| if with_cut { WindowParams::new(n, cfg.delta).map(|w| Some(w.cut)) } else { Ok(None) })
        .collect::<Result<_>>()?;
    let mut horizons = cfg.n_grid.clone();
    horizons.extend(cuts.iter().flatten());
    let block = injection_block(cfg, &horizons)?;
    let k = cfg.n_grid.len();
    let mut out = Vec::new();
    for (i, &n) in cfg.n_grid.iter().enumerate() {
        let s = Summary::of(&block.iter().map(|v| v[i]).collect::<Vec<_>>())?;
        let (logz_cut, logz_cut_stderr) = match cuts[i] {
            Some(_) => {
                let j = k + cuts[..i].iter().flatten().count();
                let sc = Summary::of(&block.iter().map(|v| v[j]).collect::<Vec<_>>())?;
                (Some(sc.mean), Some(sc.stderr))
            }
            None => (None, None),
        };
        out.push(InjectedEstimate { n, logz: s.mean, logz_stderr: s.stderr, cut: cuts[i], logz_cut, logz_cut_stderr, count: s.count });
    }
    Ok(out)
}

fn fluctuations(cfg: &ExperimentConfig) -> Result<Partial> {
    let compare = cfg.kind == ExperimentKind::Compare;
    let decompose = compare && (cfg.decompose || cfg.martingale);
    let injected = injected_means(cfg, decompose)?;
    let f = &cfg.test_function;
    let weights: Vec<_> = cfg.n_grid.iter().map(|&n| f.weights(cfg.d, n)).collect();
    let per_rep = par_map(cfg.replicas, |r| {
        let sys = system(cfg, cfg.replica_seed(r))?;
        let mut rows = Vec::with_capacity(cfg.n_grid.len());
        for ((&n, inj), w) in cfg.n_grid.iter().zip(&injected).zip(&weights) {
            if decompose {
                let means = InjectedMeans {
                    logz: inj.logz,
                    logz_cut: inj.logz_cut.expect("cut requested"),
                    ratio: inj.logz - inj.logz_cut.expect("cut requested"),
                };
                let s = fluctuation_sample(&sys, n, f, cfg.delta, &means, cfg.martingale)?;
                rows.push(vec![
                    s.s_n,
                    s.k_n,
                    s.s_n - s.k_n,
                    s.s_n_delta_early,
                    s.s_n_delta_late,
                    s.k_n_delta_early,
                    s.k_n_delta_late_f,
                    s.m_n_delta.unwrap_or(f64::NAN),
                ]);
            } else {
                let z = all_starts_partition(&sys, n, w.region())?;
                let p = fluct_from_field(&z, w, inj.logz);
                rows.push(vec![p.s, p.k, p.s - p.k]);
            }
        }
        Ok(rows)
    })?;
    let mut columns = vec!["s_n", "k_n", "s_minus_k"];
    if decompose {
        columns.extend(["s_early", "s_late", "k_early", "k_late", "m_delta"]);
    }
    let samples = n_major(&cfg.n_grid, per_rep, |r| cfg.replica_seed(r));
    let col = |n: usize, j: usize| -> Vec<f64> { samples.iter().filter(|r| r.n == n).map(|r| r.values[j]).collect() };
    let ns: Vec<f64> = cfg.n_grid.iter().map(|&n| n as f64).collect();
    let mut checks = Vec::new();

    if !compare {
        let xi = compute_xi(2.0, cfg.d)?;
        let target = -xi;
        let s_cols: Vec<Vec<f64>> = cfg.n_grid.iter().map(|&n| col(n, 0)).collect();
        let k_cols: Vec<Vec<f64>> = cfg.n_grid.iter().map(|&n| col(n, 1)).collect();
        let sd = |v: &[f64]| Summary::of(v).map(|s| s.sd).unwrap_or(f64::NAN);
        let slope = |cols: &[Vec<f64>], tag: u64| -> Result<SlopeEstimate> {
            let vals: Vec<f64> = cols.iter().map(|c| sd(c)).collect();
            Ok(SlopeEstimate {
                fit: estimate_exponent(&ns, &vals)?,
                ci: bootstrap_slope(&ns, cols, sd, cfg.bootstrap, cfg.env.seed ^ tag)?,
            })
        };
        let slope_s = slope(&s_cols, 0x5)?;
        let slope_k = slope(&k_cols, 0x6)?;
        for (name, s) in [("sd_s_slope_band", &slope_s), ("sd_k_slope_band", &slope_k)] {
            checks.push(Check::new(
                name,
                (target - 0.15..=target + 0.15).contains(&s.fit.slope),
                format!(
                    "slope {:.4} (95% CI [{:.3}, {:.3}]), band [{:.2}, {:.2}]",
                    s.fit.slope,
                    s.ci.lo,
                    s.ci.hi,
                    target - 0.15,
                    target + 0.15
                ),
            ));
        }
        let sd_s = cfg.n_grid.iter().zip(&s_cols).map(|(&n, c)| sd_point(n, c)).collect::<Result<_>>()?;
        let sd_k = cfg.n_grid.iter().zip(&k_cols).map(|(&n, c)| sd_point(n, c)).collect::<Result<_>>()?;
        return Ok(Partial {
            columns,
            samples,
            results: Results::Exponent(ExponentResults { injected, sd_s, sd_k, slope_s, slope_k, target }),
            checks,
        });
    }

    let mut points = Vec::new();
    for ((&n, inj), w) in cfg.n_grid.iter().zip(&injected).zip(&weights) {
        let (s, k, diff) = (col(n, 0), col(n, 1), col(n, 2));
        let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
        let ratios: Vec<f64> = s.iter().zip(&k).zip(&diff).map(|((a, b), c)| c.abs() / a.abs().min(b.abs())).collect();
        let (ms, mk, md) = (median(&abs(&s)), median(&abs(&k)), median(&abs(&diff)));
        let mass: f64 = w.values().iter().sum();
        let (mut late, mut late_mg, mut dec_err) = (None, None, None);
        if decompose {
            let (se, sl) = (col(n, 3), col(n, 4));
            dec_err = Some(s.iter().zip(&se).zip(&sl).map(|((t, a), b)| (a + b - t).abs()).fold(0.0, f64::max));
            late = Some(median(&abs(&sl)));
            if cfg.martingale {
                let m = col(n, 7);
                late_mg = Some(median(&sl.iter().zip(&m).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()));
            }
        }
        points.push(ComparePoint {
            n,
            median_abs_diff: md,
            median_abs_s: ms,
            median_abs_k: mk,
            median_ratio: median(&ratios),
            ratio_of_medians: md / ms.min(mk),
            injection_shift: 4.0 * inj.logz_stderr * mass.abs(),
            median_abs_s_late: late,
            median_abs_late_minus_mg: late_mg,
            max_decomposition_error: dec_err,
            count: s.len(),
        });
    }
    let fit_of = |g: fn(&ComparePoint) -> f64| {
        let v: Vec<f64> = points.iter().map(g).collect();
        (points.len() >= 3).then(|| estimate_exponent(&ns, &v).ok()).flatten()
    };
    let slope_abs_diff = fit_of(|p| p.median_abs_diff);
    let slope_abs_s = fit_of(|p| p.median_abs_s);
    let slope_abs_k = fit_of(|p| p.median_abs_k);
    let big: Vec<&ComparePoint> = points.iter().filter(|p| p.n >= 32).collect();
    if !big.is_empty() {
        checks.push(Check::new(
            "median_ratio_below_one",
            big.iter().all(|p| p.median_ratio < 1.0),
            format!("{:?}", big.iter().map(|p| (p.n, p.median_ratio)).collect::<Vec<_>>()),
        ));
        checks.push(Check::new(
            "median_ratio_decreasing",
            big.windows(2).all(|w| w[1].median_ratio < w[0].median_ratio),
            format!("{:?}", big.iter().map(|p| (p.n, p.median_ratio)).collect::<Vec<_>>()),
        ));
    }
    if let (Some(a), Some(b)) = (slope_abs_diff, slope_abs_s) {
        checks.push(Check::new(
            "diff_decays_faster",
            a.slope <= b.slope - 0.05,
            format!("slope |S-K| {:.4}, slope |S| {:.4}", a.slope, b.slope),
        ));
    }
    if decompose {
        let worst = points.iter().filter_map(|p| p.max_decomposition_error).fold(0.0, f64::max);
        checks.push(Check::new("decomposition_exact", worst <= 1e-12, format!("max |s + S^δ - S| = {worst:.2e}")));
    }
    if cfg.martingale {
        let late: Vec<&ComparePoint> = points.iter().filter(|p| p.n >= 64).collect();
        if !late.is_empty() {
            checks.push(Check::new(
                "martingale_approximates_late_part",
                late.iter().all(|p| p.median_abs_late_minus_mg < p.median_abs_s_late),
                format!(
                    "{:?}",
                    late.iter().map(|p| (p.n, p.median_abs_late_minus_mg, p.median_abs_s_late)).collect::<Vec<_>>()
                ),
            ));
        }
    }
    Ok(Partial {
        columns,
        samples,
        results: Results::Compare(CompareResults { injected, points, slope_abs_diff, slope_abs_s, slope_abs_k }),
        checks,
    })
}

/// Default separations `0, √n, √n log n, 2√n log n`.
pub fn default_separations(n: usize) -> Vec<i64> {
    let s = (n as f64).sqrt();
    let l = (n as f64).ln();
    vec![0, s.round() as i64, (s * l).round() as i64, (2.0 * s * l).round() as i64]
}

/// Increment statistic `A_n(x)`; the `cond` part is computed only when
/// needed.
fn increment_stat(cfg: &ExperimentConfig, sys: &PolymerSystem, n: usize, x: &[i64], mean_inc: f64) -> Result<f64> {
    match cfg.covariance_statistic {
        CovStatistic::Raw => {
            let path = partition_path(sys, &SpaceTimePoint::new(0, x.to_vec()), n)?;
            Ok((path[n] / path[n - 1]).ln() - mean_inc)
        }
        stat => {
            let alpha = polymer_measure_alpha(sys, x, n)?;
            let raw = fresh_slice_sum(sys, n as i64, &alpha).ln();
            let (cond, _) = conditional_log_increment(sys, n as i64, &alpha, cfg.inner_samples);
            Ok(if stat == CovStatistic::Martingale { raw - cond } else { cond - mean_inc })
        }
    }
}

fn covariance(cfg: &ExperimentConfig) -> Result<Partial> {
    if cfg.n_grid[0] < 2 {
        return Err(Error::Config("covariance needs n >= 2".into()));
    }
    // E log(Z_n/Z_{n-1}) per n from the injection block
    let mut horizons = cfg.n_grid.clone();
    horizons.extend(cfg.n_grid.iter().map(|&n| n - 1));
    let block = injection_block(cfg, &horizons)?;
    let k = cfg.n_grid.len();
    let mut injected = Vec::new();
    for (i, &n) in cfg.n_grid.iter().enumerate() {
        let s = Summary::of(&block.iter().map(|v| v[i] - v[k + i]).collect::<Vec<_>>())?;
        injected.push(InjectedEstimate { n, logz: s.mean, logz_stderr: s.stderr, cut: None, logz_cut: None, logz_cut_stderr: None, count: s.count });
    }
    let seps: Vec<Vec<i64>> =
        cfg.n_grid.iter().map(|&n| if cfg.separations.is_empty() { default_separations(n) } else { cfg.separations.clone() }).collect();
    let mut columns: Vec<&'static str> = vec!["a_origin"];
    let width = seps.iter().map(Vec::len).max().unwrap_or(0);
    const NAMES: [&str; 8] = ["a_r0", "a_r1", "a_r2", "a_r3", "a_r4", "a_r5", "a_r6", "a_r7"];
    if width > NAMES.len() {
        return Err(Error::Config(format!("at most {} separations are supported", NAMES.len())));
    }
    columns.extend(&NAMES[..width]);
    let per_rep = par_map(cfg.replicas, |r| {
        let sys = system(cfg, cfg.replica_seed(r))?;
        let mut rows = Vec::new();
        for ((&n, inj), sep) in cfg.n_grid.iter().zip(&injected).zip(&seps) {
            let o = origin(cfg.d);
            let a0 = increment_stat(cfg, &sys, n, &o, inj.logz)?;
            let mut row = vec![a0];
            for &dist in sep {
                if dist == 0 {
                    row.push(a0);
                } else {
                    let mut x = o.clone();
                    x[0] = dist;
                    row.push(increment_stat(cfg, &sys, n, &x, inj.logz)?);
                }
            }
            row.resize(width + 1, f64::NAN);
            rows.push(row);
        }
        Ok(rows)
    })?;
    let samples = n_major(&cfg.n_grid, per_rep, |r| cfg.replica_seed(r));
    let mut curves = Vec::new();
    let mut checks = Vec::new();
    for (&n, sep) in cfg.n_grid.iter().zip(&seps) {
        let rows: Vec<&SampleRow> = samples.iter().filter(|r| r.n == n).collect();
        let a0: Vec<f64> = rows.iter().map(|r| r.values[0]).collect();
        let mut points = Vec::new();
        for (j, &dist) in sep.iter().enumerate() {
            let b: Vec<f64> = rows.iter().map(|r| r.values[j + 1]).collect();
            let (cov, stderr) = cross_moment(&a0, &b, 0.0);
            points.push(CovPoint { r: dist, cov, stderr });
        }
        if cfg.separations.is_empty() && cfg.env.beta > 0.0 {
            checks.push(Check::new(format!("variance_positive_n{n}"), points[0].cov > 0.0, format!("{:.3e}", points[0].cov)));
            let (near, far) = (points[1].cov.abs(), points[3].cov.abs());
            checks.push(Check::new(
                format!("covariance_decay_n{n}"),
                far * 5.0 < near,
                format!("|cov(r={})| = {:.3e}, |cov(r={})| = {:.3e}", points[1].r, near, points[3].r, far),
            ));
        }
        for p in points.iter().filter(|p| p.r > 2 * n as i64) {
            checks.push(Check::new(
                format!("disjoint_cones_uncorrelated_n{n}_r{}", p.r),
                p.cov.abs() <= 4.0 * p.stderr + 1e-300,
                format!("{:.3e} ± {:.3e}", p.cov, p.stderr),
            ));
        }
        curves.push(CovCurve { n, points, count: rows.len() });
    }
    Ok(Partial {
        columns,
        samples,
        results: Results::Covariance(CovarianceResults { statistic: cfg.covariance_statistic, injected, curves }),
        checks,
    })
}

fn doob(cfg: &ExperimentConfig) -> Result<Partial> {
    let n = nmax(cfg);
    let incs = par_map(cfg.mean_replicas, |r| {
        let sys = system(cfg, cfg.injection_seed(r))?;
        let path = partition_path(&sys, &SpaceTimePoint::origin(cfg.d), n)?;
        Ok((1..=n).map(|k| (path[k] / path[k - 1]).ln()).collect::<Vec<_>>())
    })?;
    let inc_means: Vec<f64> = (0..n).map(|k| mean(&incs.iter().map(|v| v[k]).collect::<Vec<_>>())).collect();
    let o = origin(cfg.d);
    let per_rep = par_map(cfg.replicas, |r| {
        let sys = system(cfg, cfg.replica_seed(r))?;
        let inc = doob_increments(&sys, n, &o, cfg.inner_samples, Some(&inc_means))?;
        let z = crate::polymer::forward_partition(&sys, &SpaceTimePoint::origin(cfg.d), n, None)?;
        let total: f64 = crate::numeric::neumaier_sum(inc.raw.iter().copied());
        let prev = inc.prev.expect("means injected");
        let rows: Vec<Vec<f64>> =
            (0..n).map(|k| vec![inc.raw[k], inc.cond_mean[k], inc.cond_stderr[k], inc.mg[k], prev[k]]).collect();
        Ok((rows, (total - z.ln()).abs()))
    })?;
    let tele = per_rep.iter().map(|p| p.1).fold(0.0, f64::max);
    let ks: Vec<usize> = (1..=n).collect();
    let samples = n_major(&ks, per_rep.into_iter().map(|p| p.0).collect(), |r| cfg.replica_seed(r));
    let mut steps = Vec::new();
    let mut checks = vec![Check::new("telescoping", tele <= 1e-12, format!("max |Σ raw - log Z_n| = {tele:.2e}"))];
    for k in 1..=n {
        let rows: Vec<&SampleRow> = samples.iter().filter(|r| r.n == k).collect();
        let mg = Summary::of(&rows.iter().map(|r| r.values[3]).collect::<Vec<_>>())?;
        let pv = Summary::of(&rows.iter().map(|r| r.values[4]).collect::<Vec<_>>())?;
        checks.push(Check::new(
            format!("mg_centered_k{k}"),
            within(mg.mean, 0.0, mg.stderr, 4.0),
            format!("mean Δ^mg = {:.3e} ± {:.2e}", mg.mean, mg.stderr),
        ));
        steps.push(DoobStep {
            k,
            mean_mg: mg.mean,
            stderr_mg: mg.stderr,
            mean_prev: pv.mean,
            stderr_prev: pv.stderr,
            injected_increment_mean: inc_means[k - 1],
        });
    }
    Ok(Partial {
        columns: vec!["raw", "cond_mean", "cond_stderr", "mg", "prev"],
        samples,
        results: Results::Doob(DoobResults { n, steps, max_telescope_error: tele }),
        checks,
    })
}

fn appendix(cfg: &ExperimentConfig) -> Result<Partial> {
    let spec = cfg.env_spec()?;
    let diags = par_map(cfg.atoms.len(), |i| {
        let m = cfg.atoms[i];
        appendix_phi_diag(&vec![1.0 / m as f64; m], &spec, cfg.samples, cfg.env.seed)
    })?;
    let spread = |g: fn(&AppendixDiag) -> f64| {
        let v: Vec<f64> = diags.iter().map(g).collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let phi_ratio_spread = spread(AppendixDiag::phi_ratio);
    let log_sq_ratio_spread = spread(AppendixDiag::log_sq_ratio);
    let samples = diags
        .iter()
        .map(|g| SampleRow {
            n: g.atoms,
            replica: 0,
            seed: cfg.env.seed,
            values: vec![
                g.sum_a_sq,
                g.mean_abs_phi,
                g.mean_abs_phi_stderr,
                g.mean_log_sq,
                g.mean_log_sq_stderr,
                g.phi_ratio(),
                g.log_sq_ratio(),
                g.gamma_app,
                g.min_u,
            ],
        })
        .collect();
    let checks = vec![
        Check::new("phi_ratio_stable", phi_ratio_spread < 3.0, format!("max/min E|φ(U)|/Σa² = {phi_ratio_spread:.3}")),
        Check::new(
            "log_sq_ratio_stable",
            log_sq_ratio_spread < 3.0,
            format!("max/min E[log²(1+U)]/Σa² = {log_sq_ratio_spread:.3}"),
        ),
        Check::new("u_above_minus_one", diags.iter().all(|g| g.min_u > -1.0), "every sampled U > -1"),
    ];
    Ok(Partial {
        columns: vec![
            "sum_a_sq",
            "mean_abs_phi",
            "mean_abs_phi_stderr",
            "mean_log_sq",
            "mean_log_sq_stderr",
            "phi_ratio",
            "log_sq_ratio",
            "gamma_app",
            "min_u",
        ],
        samples,
        results: Results::AppendixPhi(AppendixResults { diags, phi_ratio_spread, log_sq_ratio_spread }),
        checks,
    })
}
