//! Partition functions of the directed polymer.
//!
//! Every variant is a sweep of the averaging stencil over a slab, with the
//! slab multiplied by environment weights at the times the Hamiltonian
//! covers. Conventions:
//!
//! * point-to-plane `Z` from `(s, x)` with horizon `n` weights times
//!   `s+1 ..= s+n`; the start point never carries a weight;
//! * pinned `Z^{m,x;n,y}` weights the open interval `(m, n)`: neither endpoint;
//! * reverse `←Z_I^{t,y}` walks backwards from `(t, y)` and weights `I ⊆ [1, t)`;
//! * horizon zero gives `Z = 1`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::env::{row_hash, absorb, to_unit, derive_seed, EnvSpec, Family};
use crate::error::{Error, Result};
use crate::lattice::{parity_connected, BoxField, Region, Slab, SpaceTimePoint, DEFAULT_CELL_BUDGET};
use crate::numeric::NeumaierSum;

/// Spatial truncation of sweeps.
///
/// `Exact` follows every site a walk can reach. `Diffusive` kills walks that
/// wander more than `ceil(sigmas * sqrt(n/d))` from their start in sup norm
/// (per-coordinate standard deviations); the lost mass is of order
/// `2d · P(|N(0,1)| > sigmas)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Window {
    Exact,
    Diffusive { sigmas: f64 },
}

impl Window {
    pub fn radius(&self, steps: usize, d: usize) -> usize {
        match *self {
            Window::Exact => steps,
            Window::Diffusive { sigmas } => {
                let r = (sigmas * (steps as f64 / d as f64).sqrt()).ceil() as usize;
                r.clamp(1, steps.max(1))
            }
        }
    }
}

/// The window `m = ⌈k^{1/8}⌉` (at least one) of the reverse factor used by
/// the polymer-measure approximation and the martingale approximant.
pub fn reverse_window_len(k: u64) -> u64 {
    let mut m = 1u64;
    while m.checked_pow(8).is_some_and(|p| p < k) {
        m += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
struct Override {
    t: i64,
    x: Vec<i64>,
    omega: f64,
}

/// One environment realization seen through a space-time shift.
///
/// Immutable; every sweep reads `ω` through [`PolymerSystem::omega`] or its
/// row-wise equivalent, so all partition variants share one field.
#[derive(Debug, Clone)]
pub struct PolymerSystem {
    env: EnvSpec,
    seed: u64,
    dim: usize,
    shift: SpaceTimePoint,
    window: Window,
    budget: usize,
    reflect_about: Option<i64>,
    fresh_slice: Option<(i64, u64)>,
    overrides: Vec<Override>,
}

const FRESH_SLICE_TAG: u64 = 0x51ce;

impl PolymerSystem {
    pub fn new(env: EnvSpec, seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("dimension must be >= 1"));
        }
        env.family.validate()?;
        Ok(Self {
            env,
            seed,
            dim,
            shift: SpaceTimePoint::origin(dim),
            window: Window::Exact,
            budget: DEFAULT_CELL_BUDGET,
            reflect_about: None,
            fresh_slice: None,
            overrides: Vec::new(),
        })
    }

    /// `θ_{k,x}`: all reads are offset by `(k, x)`. Shifts compose.
    pub fn with_shift(mut self, by: &SpaceTimePoint) -> Self {
        assert_eq!(by.x.len(), self.dim);
        assert!(by.t >= 0, "time shifts must be nonnegative");
        self.shift.t += by.t;
        for (a, b) in self.shift.x.iter_mut().zip(&by.x) {
            *a += b;
        }
        self
    }

    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    /// Read time `k` as `t - k`.
    pub fn time_reflected(mut self, t: i64) -> Self {
        self.reflect_about = Some(t);
        self
    }

    /// Replace slice `k` by an independent draw from sub-stream `stream`.
    pub fn with_fresh_slice(mut self, k: i64, stream: u64) -> Self {
        self.fresh_slice = Some((k, stream));
        self
    }

    /// Pin `ω_{t,x}` to a given value.
    pub fn with_override(mut self, t: i64, x: &[i64], omega: f64) -> Self {
        self.overrides.retain(|o| !(o.t == t && o.x == x));
        self.overrides.push(Override { t, x: x.to_vec(), omega });
        self
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    fn absolute_time(&self, k: i64) -> i64 {
        let k = self.reflect_about.map_or(k, |t| t - k);
        k + self.shift.t
    }

    pub(crate) fn check_time(&self, k: i64) -> Result<()> {
        if self.absolute_time(k) < 1 {
            return Err(Error::domain(format!("environment read at time {k} maps before time 1")));
        }
        Ok(())
    }

    pub(crate) fn row_sampler(&self, k: i64, prefix: &[i64]) -> RowSampler {
        let d = self.dim;
        let ka = self.absolute_time(k);
        debug_assert!(ka >= 1, "environment read at absolute time {ka}");
        let seed = match self.fresh_slice {
            Some((t, stream)) if t == k => derive_seed(self.seed, FRESH_SLICE_TAG, stream),
            _ => self.seed,
        };
        let overrides = if self.overrides.is_empty() {
            Vec::new()
        } else {
            self.overrides.iter().filter(|o| o.t == k && o.x[..d - 1] == *prefix).map(|o| (o.x[d - 1], o.omega)).collect()
        };
        let mut hash = row_hash(seed, ka, &[]);
        for (a, b) in prefix.iter().zip(&self.shift.x) {
            hash = absorb(hash, a + b);
        }
        let two_point = match self.env.family {
            Family::Rademacher => Some((0.5, self.env.weight_of(-1.0), self.env.weight_of(1.0))),
            Family::Bernoulli { p } => Some((p, self.env.weight_of(1.0 - p), self.env.weight_of(-p))),
            _ => None,
        };
        RowSampler {
            hash,
            last_shift: self.shift.x[d - 1],
            family: self.env.family,
            beta: self.env.beta,
            lambda: self.env.lambda,
            two_point,
            overrides,
        }
    }

    /// `ω_{k,x}` as seen by this system.
    pub fn omega(&self, k: i64, x: &[i64]) -> Result<f64> {
        self.check_time(k)?;
        let d = self.dim;
        Ok(self.row_sampler(k, &x[..d - 1]).omega(x[d - 1]))
    }

    /// `e^{βω_{k,x} - λ}`.
    pub fn weight(&self, k: i64, x: &[i64]) -> Result<f64> {
        Ok(self.env.weight_of(self.omega(k, x)?))
    }

    /// `E_{k,x} = e^{βω_{k,x} - λ} - 1`.
    pub fn noise(&self, k: i64, x: &[i64]) -> Result<f64> {
        Ok(self.weight(k, x)? - 1.0)
    }

    /// Weights of slice `k` over a box.
    pub fn weight_field(&self, k: i64, region: &Region) -> Result<BoxField> {
        self.check_time(k)?;
        let mut slab = Slab::new(region.clone(), region.clone(), self.budget)?;
        slab.fill_valid(1.0);
        self.apply_weights(&mut slab, k);
        Ok(slab.to_box())
    }

    /// Multiply the slab by the slice-`k` weights wherever it is nonzero.
    pub(crate) fn apply_weights(&self, slab: &mut Slab, k: i64) {
        if self.env.beta == 0.0 {
            return;
        }
        slab.site_rows_mut(|prefix, lo, row, skip, step| {
            let rs = self.row_sampler(k, prefix);
            for j in (skip..row.len()).step_by(step) {
                let v = &mut row[j];
                if *v != 0.0 {
                    *v *= rs.weight(lo + j as i64);
                }
            }
        });
    }

    /// Like [`apply_weights`](Self::apply_weights) but also returns
    /// `Σ_y v(y) E_{k,y}` over the slab before weighting.
    pub(crate) fn apply_weights_noise_sum(&self, slab: &mut Slab, k: i64) -> f64 {
        let mut acc = NeumaierSum::new();
        if self.env.beta == 0.0 {
            return 0.0;
        }
        slab.site_rows_mut(|prefix, lo, row, skip, step| {
            let rs = self.row_sampler(k, prefix);
            for j in (skip..row.len()).step_by(step) {
                let v = &mut row[j];
                if *v != 0.0 {
                    let w = rs.weight(lo + j as i64);
                    acc.add(*v * (w - 1.0));
                    *v *= w;
                }
            }
        });
        acc.value()
    }

    pub(crate) fn point_slab(&self, center: &[i64], steps: usize) -> Result<Slab> {
        if center.len() != self.dim {
            return Err(Error::domain("start point has the wrong dimension"));
        }
        let r = self.window.radius(steps, self.dim) as i64;
        let mut slab = Slab::new(Region::cube(center, r), Region::point(center), self.budget)?;
        slab.set(center, 1.0);
        slab.track_cone(center);
        Ok(slab)
    }
}

/// Per-row environment reader: the hash of `(seed, k, x[..d-1])` is computed
/// once and the last coordinate absorbed per cell.
pub(crate) struct RowSampler {
    hash: u64,
    last_shift: i64,
    family: Family,
    beta: f64,
    lambda: f64,
    /// `(threshold, weight below, weight above)` for two-valued families.
    two_point: Option<(f64, f64, f64)>,
    overrides: Vec<(i64, f64)>,
}

impl RowSampler {
    #[inline]
    pub fn omega(&self, x_last: i64) -> f64 {
        if !self.overrides.is_empty() {
            if let Some(&(_, w)) = self.overrides.iter().find(|(x, _)| *x == x_last) {
                return w;
            }
        }
        self.family.quantile(to_unit(absorb(self.hash, x_last + self.last_shift)))
    }

    #[inline]
    pub fn weight(&self, x_last: i64) -> f64 {
        if let (Some((thr, lo, hi)), true) = (self.two_point, self.overrides.is_empty()) {
            let u = to_unit(absorb(self.hash, x_last + self.last_shift));
            return if u < thr { lo } else { hi };
        }
        (self.beta * self.omega(x_last) - self.lambda).exp()
    }
}

/// Integer time interval with explicit endpoint inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub lo: i64,
    pub hi: i64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl TimeInterval {
    /// `(lo, hi)`.
    pub fn open(lo: i64, hi: i64) -> Self {
        Self { lo, hi, lo_closed: false, hi_closed: false }
    }

    /// `[lo, hi]`.
    pub fn closed(lo: i64, hi: i64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: true }
    }

    /// `[lo, hi)`.
    pub fn closed_open(lo: i64, hi: i64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: false }
    }

    /// `(lo, hi]`.
    pub fn open_closed(lo: i64, hi: i64) -> Self {
        Self { lo, hi, lo_closed: false, hi_closed: true }
    }

    pub fn first(&self) -> i64 {
        if self.lo_closed {
            self.lo
        } else {
            self.lo + 1
        }
    }

    pub fn last(&self) -> i64 {
        if self.hi_closed {
            self.hi
        } else {
            self.hi - 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.first() > self.last()
    }

    pub fn len(&self) -> usize {
        (self.last() - self.first() + 1).max(0) as usize
    }

    pub fn contains(&self, t: i64) -> bool {
        self.first() <= t && t <= self.last()
    }
}

/// Per-time restriction of the walk.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteMask {
    /// Walk must lie in the box.
    Confine(Region),
    /// `{X_t = z}`.
    Point(Vec<i64>),
    /// Bounded real weight per site (zero outside the field's box).
    Weights(BoxField),
}

impl SiteMask {
    fn factor(&self, x: &[i64]) -> f64 {
        match self {
            SiteMask::Confine(r) => {
                if r.contains(x) {
                    1.0
                } else {
                    0.0
                }
            }
            SiteMask::Point(z) => {
                if z.as_slice() == x {
                    1.0
                } else {
                    0.0
                }
            }
            SiteMask::Weights(f) => f.get(x),
        }
    }

    fn apply(&self, slab: &mut Slab) {
        let d = slab.geom.dim();
        let mut x = vec![0i64; d];
        if let SiteMask::Confine(r) = self {
            if r.contains_region(&slab.valid) {
                return;
            }
        }
        slab.rows_mut(|prefix, lo, row| {
            x[..d - 1].copy_from_slice(prefix);
            for (j, v) in row.iter_mut().enumerate() {
                if *v != 0.0 {
                    x[d - 1] = lo + j as i64;
                    let f = self.factor(&x);
                    if f != 1.0 {
                        *v *= f;
                    }
                }
            }
        });
    }
}

/// Weight depending on the position of the walk at its time-zero end.
#[derive(Clone)]
pub struct StartWeight(Arc<dyn Fn(&[i64]) -> f64 + Send + Sync>);

impl fmt::Debug for StartWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("StartWeight(..)")
    }
}

/// A path functional expressible slice by slice: masks keyed by absolute
/// time, plus an optional weight `g(X_0)`.
#[derive(Debug, Clone, Default)]
pub struct PathConstraint {
    masks: Vec<(i64, SiteMask)>,
    start_weight: Option<StartWeight>,
}

impl PathConstraint {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn pin(t: i64, z: &[i64]) -> Self {
        Self::none().with_mask(t, SiteMask::Point(z.to_vec()))
    }

    pub fn confine(t: i64, region: Region) -> Self {
        Self::none().with_mask(t, SiteMask::Confine(region))
    }

    pub fn with_mask(mut self, t: i64, mask: SiteMask) -> Self {
        self.masks.push((t, mask));
        self
    }

    pub fn with_start_weight(mut self, g: impl Fn(&[i64]) -> f64 + Send + Sync + 'static) -> Self {
        self.start_weight = Some(StartWeight(Arc::new(g)));
        self
    }

    fn apply_at(&self, t: i64, slab: &mut Slab) {
        for (_, m) in self.masks.iter().filter(|(s, _)| *s == t) {
            m.apply(slab);
        }
    }

    fn mask_times(&self) -> impl Iterator<Item = i64> + '_ {
        self.masks.iter().map(|(t, _)| *t)
    }

    fn start_factor(&self, x: &[i64]) -> f64 {
        self.start_weight.as_ref().map_or(1.0, |g| (g.0)(x))
    }
}

fn finite_or_overflow(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Overflow(format!("{what} is not finite; lower β or the horizon")))
    }
}

fn check_field(f: &BoxField, what: &str) -> Result<()> {
    if f.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow(format!("{what} contains non-finite values")))
    }
}

/// Forward sweep from a point through `start.t + 1 ..= last`, weighting the
/// times accepted by `weighted`.
fn forward_sweep(
    sys: &PolymerSystem,
    start: &SpaceTimePoint,
    last: i64,
    weighted: impl Fn(i64) -> bool,
    constraint: Option<&PathConstraint>,
) -> Result<Slab> {
    let steps = (last - start.t).max(0) as usize;
    for t in start.t + 1..=last {
        if weighted(t) {
            sys.check_time(t)?;
        }
    }
    let mut slab = sys.point_slab(&start.x, steps)?;
    if let Some(c) = constraint {
        c.apply_at(start.t, &mut slab);
    }
    for t in start.t + 1..=last {
        slab.average_grow();
        if weighted(t) {
            sys.apply_weights(&mut slab, t);
        }
        if let Some(c) = constraint {
            c.apply_at(t, &mut slab);
        }
    }
    Ok(slab)
}

/// Point-to-plane partition function `Z_n ∘ θ_{start}` (optionally
/// `Z[g]` for a path constraint).
pub fn forward_partition(
    sys: &PolymerSystem,
    start: &SpaceTimePoint,
    n: usize,
    constraint: Option<&PathConstraint>,
) -> Result<f64> {
    let last = start.t + n as i64;
    let last = constraint.map_or(last, |c| c.mask_times().fold(last, i64::max));
    let horizon_end = start.t + n as i64;
    let slab = forward_sweep(sys, start, last, |t| t <= horizon_end, constraint)?;
    let g = constraint.map_or(1.0, |c| c.start_factor(&start.x));
    finite_or_overflow(slab.sum() * g, "partition function")
}

/// `Z_I^{s,x}[g]`: only times in `I` carry weights.
pub fn restricted_partition(
    sys: &PolymerSystem,
    start: &SpaceTimePoint,
    interval: TimeInterval,
    constraint: Option<&PathConstraint>,
) -> Result<f64> {
    if !interval.is_empty() && interval.first() <= start.t {
        return Err(Error::domain("restricted interval must lie after the start time"));
    }
    let mut last = if interval.is_empty() { start.t } else { interval.last() };
    if let Some(c) = constraint {
        last = c.mask_times().fold(last, i64::max);
    }
    let slab = forward_sweep(sys, start, last, |t| interval.contains(t), constraint)?;
    let g = constraint.map_or(1.0, |c| c.start_factor(&start.x));
    finite_or_overflow(slab.sum() * g, "restricted partition function")
}

/// `Z_k` for `k = 0..=n` along one forward sweep from `start`.
pub fn partition_path(sys: &PolymerSystem, start: &SpaceTimePoint, n: usize) -> Result<Vec<f64>> {
    for t in start.t + 1..=start.t + n as i64 {
        sys.check_time(t)?;
    }
    let mut slab = sys.point_slab(&start.x, n)?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    for t in start.t + 1..=start.t + n as i64 {
        slab.average_grow();
        sys.apply_weights(&mut slab, t);
        out.push(finite_or_overflow(slab.sum(), "partition function")?);
    }
    Ok(out)
}

/// `(Z_n, E[Z_{n+1} | F_n])`, the conditional mean obtained by extending the
/// sweep one step with every weight replaced by its mean, 1.
pub fn conditional_mean_next(sys: &PolymerSystem, start: &SpaceTimePoint, n: usize) -> Result<(f64, f64)> {
    let last = start.t + n as i64;
    let mut slab = forward_sweep(sys, start, last, |_| true, None)?;
    let z = slab.sum();
    // one more step of room if the window clipped the support
    if !slab.geom.interior.contains_region(&slab.valid.grow(1)) {
        slab = slab.enlarged(slab.geom.interior.grow(1), sys.budget)?;
    }
    slab.average_grow();
    Ok((z, slab.sum()))
}

/// Backward sweep for all starting points in `start_box` at time `t0` with
/// horizon `n`. `on_slice(t, slab)` sees `V_t(x) = Z_{n-t} ∘ θ_{t0+t, x}` on
/// the valid region, for `t = n, n-1, ..., 0`.
fn backward_sweep(
    sys: &PolymerSystem,
    t0: i64,
    n: usize,
    start_box: &Region,
    mut on_slice: impl FnMut(usize, &Slab),
) -> Result<BoxField> {
    if start_box.dim() != sys.dim {
        return Err(Error::domain("start box has the wrong dimension"));
    }
    for t in t0 + 1..=t0 + n as i64 {
        sys.check_time(t)?;
    }
    let r = sys.window.radius(n, sys.dim);
    let reg = |t: usize| start_box.grow(t.min(r) as i64);
    let top = reg(n);
    let mut slab = Slab::new(top.clone(), top, sys.budget)?;
    slab.fill_valid(1.0);
    on_slice(n, &slab);
    if n > 0 {
        sys.apply_weights(&mut slab, t0 + n as i64);
        for t in (0..n).rev() {
            slab.average_into(reg(t));
            on_slice(t, &slab);
            if t > 0 {
                sys.apply_weights(&mut slab, t0 + t as i64);
            }
        }
    }
    let out = slab.extract(start_box);
    check_field(&out, "partition field")?;
    Ok(out)
}

/// `x ↦ Z_n^x = Z_n ∘ θ_{0,x}` for every `x` in `start_box`, from a single
/// backward sweep.
pub fn all_starts_partition(sys: &PolymerSystem, n: usize, start_box: &Region) -> Result<BoxField> {
    backward_sweep(sys, 0, n, start_box, |_, _| {})
}

/// `x ↦ Z_n ∘ θ_{t0,x}`.
pub fn all_starts_partition_from(sys: &PolymerSystem, t0: i64, n: usize, start_box: &Region) -> Result<BoxField> {
    backward_sweep(sys, t0, n, start_box, |_, _| {})
}

/// Plane-to-point partition function `←Z_I^{t,y}[g]` of the walk that ends
/// at `end` and runs backwards in time.
pub fn reverse_partition(
    sys: &PolymerSystem,
    end: &SpaceTimePoint,
    interval: TimeInterval,
    constraint: Option<&PathConstraint>,
) -> Result<f64> {
    if !interval.is_empty() {
        if interval.last() >= end.t {
            return Err(Error::domain("reverse interval must end before the terminal time"));
        }
        if interval.first() < 1 {
            return Err(Error::domain("reverse interval must start at time >= 1"));
        }
    }
    let mut lowest = if interval.is_empty() { end.t } else { interval.first() };
    if let Some(c) = constraint {
        lowest = c.mask_times().filter(|&t| t < end.t).fold(lowest, i64::min);
        if c.start_weight.is_some() {
            lowest = 0;
        }
    }
    if lowest < 0 {
        return Err(Error::domain("reverse walk cannot run before time 0"));
    }
    for t in lowest..end.t {
        if interval.contains(t) {
            sys.check_time(t)?;
        }
    }
    let mut slab = sys.point_slab(&end.x, (end.t - lowest) as usize)?;
    if let Some(c) = constraint {
        c.apply_at(end.t, &mut slab);
    }
    for t in (lowest..end.t).rev() {
        slab.average_grow();
        if interval.contains(t) {
            sys.apply_weights(&mut slab, t);
        }
        if let Some(c) = constraint {
            c.apply_at(t, &mut slab);
        }
    }
    let value = match constraint.and_then(|c| c.start_weight.as_ref()) {
        Some(g) => {
            let mut acc = NeumaierSum::new();
            let d = sys.dim;
            let mut x = vec![0i64; d];
            slab.rows(|prefix, lo, row| {
                x[..d - 1].copy_from_slice(prefix);
                for (j, &v) in row.iter().enumerate() {
                    if v != 0.0 {
                        x[d - 1] = lo + j as i64;
                        acc.add(v * (g.0)(&x));
                    }
                }
            });
            acc.value()
        }
        None => slab.sum(),
    };
    finite_or_overflow(value, "reverse partition function")
}

/// `y ↦ ←Z_{[k-m,k)}^{k,y}` over `region`, with the interval clipped at time 1.
pub fn reverse_window_field(sys: &PolymerSystem, k: i64, m: u64, region: &Region) -> Result<BoxField> {
    let lo = (k - m as i64).max(1);
    if lo > k - 1 {
        return Ok(BoxField::from_fn(region.clone(), |_| 1.0));
    }
    for t in lo..k {
        sys.check_time(t)?;
    }
    let depth = k - lo;
    let top = region.grow(depth);
    let mut slab = Slab::new(top.clone(), top, sys.budget)?;
    slab.fill_valid(1.0);
    sys.apply_weights(&mut slab, lo);
    for s in lo + 1..k {
        slab.average_into(region.grow(k - s));
        sys.apply_weights(&mut slab, s);
    }
    slab.average_into(region.clone());
    let out = slab.extract(region);
    check_field(&out, "reverse partition field")?;
    Ok(out)
}

/// Forward sweep from `a` weighting `a.t+1 ..= b.t-1`, evaluated at `b.x`
/// after the final step; the twin without weights gives the bridge
/// normalisation within the same window.
fn pinned_numerator(sys: &PolymerSystem, a: &SpaceTimePoint, b: &SpaceTimePoint, weighted: bool) -> Result<f64> {
    let steps = (b.t - a.t) as usize;
    let mut slab = sys.point_slab(&a.x, steps)?;
    for t in a.t + 1..b.t {
        slab.average_grow();
        if weighted {
            sys.apply_weights(&mut slab, t);
        }
    }
    slab.average_grow();
    Ok(slab.get(&b.x))
}

/// Pinned partition function `Z_{(m,n)}^{m,x;n,y}` under the bridge from `a`
/// to `b`; the weights at both endpoints are excluded.
pub fn pinned_partition(sys: &PolymerSystem, a: &SpaceTimePoint, b: &SpaceTimePoint) -> Result<f64> {
    if !parity_connected(a, b)? {
        return Err(Error::domain("pinned endpoints are not parity connected"));
    }
    if b.t - a.t < 2 {
        return Err(Error::domain("pinned partition function needs b.t - a.t >= 2"));
    }
    for t in a.t + 1..b.t {
        sys.check_time(t)?;
    }
    let p = pinned_numerator(sys, a, b, false)?;
    if p == 0.0 {
        return Err(Error::domain("bridge probability vanishes (endpoint outside the window)"));
    }
    let num = pinned_numerator(sys, a, b, true)?;
    finite_or_overflow(num / p, "pinned partition function")
}

/// Polymer endpoint law `α_n(x, ·) = Z_{n-1}^x[1{X_n = ·}] / Z_{n-1}^x`:
/// environment up to time `n-1`, walk read at time `n`.
pub fn polymer_measure_alpha(sys: &PolymerSystem, x: &[i64], n: usize) -> Result<BoxField> {
    if n == 0 {
        return Err(Error::domain("α_n needs n >= 1"));
    }
    for t in 1..n as i64 {
        sys.check_time(t)?;
    }
    let mut slab = sys.point_slab(x, n)?;
    for t in 1..n as i64 {
        slab.average_grow();
        sys.apply_weights(&mut slab, t);
    }
    slab.average_grow();
    let z = slab.sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Overflow(format!("normalisation Z_{{n-1}} = {z}")));
    }
    Ok(slab.to_box().map(|v| v / z))
}

/// `Σ_y α_n(x,y)^2`, the overlap of two replicas at time `n`.
pub fn replica_overlap(sys: &PolymerSystem, x: &[i64], n: usize) -> Result<f64> {
    let alpha = polymer_measure_alpha(sys, x, n)?;
    let mut acc = NeumaierSum::new();
    for &v in alpha.values() {
        acc.add(v * v);
    }
    Ok(acc.value())
}

/// `α̃_k(x, ·)` together with how many entries were clipped at 1.
#[derive(Debug, Clone)]
pub struct AlphaTilde {
    pub values: BoxField,
    pub clipped: usize,
}

/// `α̃_k(x,y) = min(p_k(y-x) ←Z_{[k-m,k)}^{k,y}, 1)` with `m = ⌈k^{1/8}⌉`.
pub fn alpha_tilde(sys: &PolymerSystem, x: &[i64], k: usize) -> Result<AlphaTilde> {
    if k < 2 {
        return Err(Error::domain("α̃_k needs k >= 2"));
    }
    let mut kernel = sys.point_slab(x, k)?;
    for _ in 0..k {
        kernel.average_grow();
    }
    let region = kernel.valid.clone();
    let rev = reverse_window_field(sys, k as i64, reverse_window_len(k as u64), &region)?;
    let p = kernel.extract(&region);
    let mut clipped = 0usize;
    let mut values = BoxField::zeros(region);
    for ((out, &pv), &rv) in values.values_mut().iter_mut().zip(p.values()).zip(rev.values()) {
        let v = pv * rv;
        if v > 1.0 {
            clipped += 1;
        }
        *out = v.min(1.0);
    }
    Ok(AlphaTilde { values, clipped })
}

/// `μ_{ω,n}(X_t = x)` from one pinned sweep over the unconstrained one.
pub fn path_marginal(sys: &PolymerSystem, n: usize, t: usize, x: &[i64]) -> Result<f64> {
    if t == 0 || t > n {
        return Err(Error::domain("path marginal needs 1 <= t <= n"));
    }
    let origin = SpaceTimePoint::origin(sys.dim);
    let pinned = PathConstraint::pin(t as i64, x);
    let num = forward_partition(sys, &origin, n, Some(&pinned))?;
    let den = forward_partition(sys, &origin, n, None)?;
    Ok(num / den)
}

/// The whole slice `x ↦ μ_{ω,n}(X_t = x)`: forward mass up to `t` times the
/// shifted partition function from `(t, x)`.
pub fn path_marginal_slice(sys: &PolymerSystem, n: usize, t: usize) -> Result<BoxField> {
    if t == 0 || t > n {
        return Err(Error::domain("path marginal needs 1 <= t <= n"));
    }
    let origin = SpaceTimePoint::origin(sys.dim);
    let front = forward_sweep(sys, &origin, t as i64, |_| true, None)?;
    let support = front.valid.clone();
    let back = all_starts_partition_from(sys, t as i64, n - t, &support)?;
    let front = front.extract(&support);
    let mut joint = BoxField::zeros(support);
    for ((o, &a), &b) in joint.values_mut().iter_mut().zip(front.values()).zip(back.values()) {
        *o = a * b;
    }
    let z = joint.sum();
    Ok(joint.map(|v| v / z))
}

/// Discrete SHE solution and its Cole-Hopf transform on a box.
///
/// `u(k)` is the solution at equation time `k` (`u(0) ≡ 1`), equal to
/// `Z_k ∘ θ_{n-k, ·}`; equivalently `shifted(t) = Z_{n-t} ∘ θ_{t, ·}` with
/// `shifted(n) ≡ 1`.
#[derive(Debug, Clone)]
pub struct SheKpzField {
    pub n: usize,
    pub region: Region,
    shifted: Vec<BoxField>,
    /// Max over interior `(k, x)` of the equation residual.
    pub residual: f64,
    /// Number of `(k, x)` left out of the residual because a neighbour lies
    /// outside the box.
    pub boundary_excluded: usize,
}

impl SheKpzField {
    pub fn u(&self, k: usize) -> &BoxField {
        &self.shifted[self.n - k]
    }

    pub fn h(&self, k: usize) -> BoxField {
        self.u(k).map(f64::ln)
    }

    pub fn shifted(&self, t: usize) -> &BoxField {
        &self.shifted[t]
    }
}

/// Build `U` and `H = log U` over `region` from one backward sweep and
/// certify the difference equation
/// `U(k+1,x) - U(k,x) = ΔU(k,·)(x) + (2d)^{-1} Σ_{y~x} U(k,y) X(k,y)` with
/// `X(k,y) = e^{βω_{n-k,y} - λ} - 1`.
pub fn she_kpz_fields(sys: &PolymerSystem, n: usize, region: &Region) -> Result<SheKpzField> {
    let mut shifted: Vec<Option<BoxField>> = vec![None; n + 1];
    backward_sweep(sys, 0, n, region, |t, slab| shifted[t] = Some(slab.extract(region)))?;
    let shifted: Vec<BoxField> = shifted.into_iter().map(|f| f.expect("every slice visited")).collect();
    let d = sys.dim;
    let inv = 1.0 / (2 * d) as f64;
    let mut residual = 0.0f64;
    let mut boundary_excluded = 0usize;
    let inner = if region.extents().iter().all(|&e| e >= 3) {
        Some(Region::new(region.lo.iter().map(|v| v + 1).collect(), region.hi.iter().map(|v| v - 1).collect()))
    } else {
        None
    };
    let cells = region.cells().unwrap_or(0);
    let inner_cells = inner.as_ref().and_then(|r| r.cells()).unwrap_or(0);
    for k in 0..n {
        let u_k = &shifted[n - k];
        let u_next = &shifted[n - k - 1];
        let time = (n - k) as i64;
        boundary_excluded += cells - inner_cells;
        let Some(inner) = &inner else { continue };
        for x in inner.sites() {
            let here = u_k.get(&x);
            let mut lap = 0.0;
            let mut noise = 0.0;
            let mut y = x.clone();
            for a in 0..d {
                for s in [-1, 1] {
                    y[a] = x[a] + s;
                    let uy = u_k.get(&y);
                    lap += uy - here;
                    noise += uy * sys.noise(time, &y)?;
                    y[a] = x[a];
                }
            }
            let lhs = u_next.get(&x) - here;
            let rhs = inv * lap + inv * noise;
            residual = residual.max((lhs - rhs).abs());
        }
    }
    Ok(SheKpzField { n, region: region.clone(), shifted, residual, boundary_excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvSpec;
    use crate::lattice::heat_kernel;
    use crate::numeric::rel_err;
    use approx::assert_relative_eq;

    /// Enumerate all (2d)^n nearest-neighbour paths from `x0`.
    pub(crate) fn for_each_path(d: usize, x0: &[i64], n: usize, f: &mut dyn FnMut(&[Vec<i64>])) {
        let mut path = vec![x0.to_vec()];
        fn rec(d: usize, n: usize, path: &mut Vec<Vec<i64>>, f: &mut dyn FnMut(&[Vec<i64>])) {
            if path.len() == n + 1 {
                f(path);
                return;
            }
            for a in 0..d {
                for s in [-1, 1] {
                    let mut next = path.last().unwrap().clone();
                    next[a] += s;
                    path.push(next);
                    rec(d, n, path, f);
                    path.pop();
                }
            }
        }
        rec(d, n, &mut path, f);
    }

    fn forward_oracle(sys: &PolymerSystem, x0: &[i64], t0: i64, n: usize) -> f64 {
        let d = sys.dim();
        let mut total = 0.0;
        for_each_path(d, x0, n, &mut |p| {
            let w: f64 = (1..=n).map(|j| sys.weight(t0 + j as i64, &p[j]).unwrap()).product();
            total += w;
        });
        total / ((2 * d) as f64).powi(n as i32)
    }

    fn gauss(beta: f64) -> EnvSpec {
        EnvSpec::gaussian(beta).unwrap()
    }

    #[test]
    fn beta_zero_is_one() {
        let sys = PolymerSystem::new(gauss(0.0), 3, 3).unwrap();
        let z = forward_partition(&sys, &SpaceTimePoint::origin(3), 7, None).unwrap();
        assert_relative_eq!(z, 1.0, max_relative = 1e-14);
        let f = all_starts_partition(&sys, 5, &Region::centered(3, 2)).unwrap();
        assert!(f.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert_eq!(forward_partition(&sys, &SpaceTimePoint::origin(3), 0, None).unwrap(), 1.0);
    }

    #[test]
    fn forward_matches_enumeration_d1() {
        for seed in 0..10 {
            let sys = PolymerSystem::new(EnvSpec::rademacher(0.7).unwrap(), seed, 1).unwrap();
            for n in 1..=6 {
                let z = forward_partition(&sys, &SpaceTimePoint::new(2, vec![1]), n, None).unwrap();
                let want = forward_oracle(&sys, &[1], 2, n);
                assert!(rel_err(z, want) < 1e-12, "n={n}: {z} vs {want}");
            }
        }
    }

    #[test]
    fn trivial_confinement_is_bit_identical() {
        let sys = PolymerSystem::new(gauss(0.5), 9, 2).unwrap();
        let o = SpaceTimePoint::origin(2);
        let plain = forward_partition(&sys, &o, 6, None).unwrap();
        let c = PathConstraint::confine(3, Region::centered(2, 1_000));
        let constrained = forward_partition(&sys, &o, 6, Some(&c)).unwrap();
        assert_eq!(plain.to_bits(), constrained.to_bits());
    }

    #[test]
    fn all_starts_agree_with_forward() {
        let sys = PolymerSystem::new(gauss(0.6), 21, 2).unwrap();
        let boxr = Region::centered(2, 3);
        let field = all_starts_partition(&sys, 9, &boxr).unwrap();
        for (x, v) in field.iter() {
            let z = forward_partition(&sys, &SpaceTimePoint::new(0, x.clone()), 9, None).unwrap();
            assert!(rel_err(v, z) < 1e-12, "{x:?}");
        }
    }

    #[test]
    fn reverse_matches_enumeration_and_reflection() {
        let sys = PolymerSystem::new(EnvSpec::rademacher(0.8).unwrap(), 5, 1).unwrap();
        let end = SpaceTimePoint::new(7, vec![2]);
        for len in 0..=6 {
            let iv = TimeInterval::closed_open(7 - len, 7);
            let got = reverse_partition(&sys, &end, iv, None).unwrap();
            let mut total = 0.0;
            for_each_path(1, &[2], len as usize, &mut |p| {
                total += (1..=len as usize).map(|j| sys.weight(7 - j as i64, &p[j]).unwrap()).product::<f64>();
            });
            let want = total / 2f64.powi(len as i32);
            assert!(rel_err(got, want) < 1e-12);
        }
        // time reflection: (0,t) backwards equals forward on the reflected field
        let full = reverse_partition(&sys, &end, TimeInterval::open(0, 7), None).unwrap();
        let refl = sys.clone().time_reflected(7);
        let fwd = forward_partition(&refl, &SpaceTimePoint::new(0, vec![2]), 6, None).unwrap();
        assert_eq!(full.to_bits(), fwd.to_bits());
        assert!(reverse_partition(&sys, &end, TimeInterval::closed_open(0, 7), None).is_err());
    }

    #[test]
    fn reverse_start_weight() {
        let sys = PolymerSystem::new(gauss(0.4), 8, 1).unwrap();
        let end = SpaceTimePoint::new(4, vec![0]);
        let c = PathConstraint::none().with_start_weight(|x| if x[0] > 0 { 2.0 } else { 0.5 });
        let got = reverse_partition(&sys, &end, TimeInterval::open(0, 4), Some(&c)).unwrap();
        let mut total = 0.0;
        for_each_path(1, &[0], 4, &mut |p| {
            let w: f64 = (1..4).map(|j| sys.weight(4 - j as i64, &p[j]).unwrap()).product();
            total += w * if p[4][0] > 0 { 2.0 } else { 0.5 };
        });
        assert!(rel_err(got, total / 16.0) < 1e-12);
    }

    #[test]
    fn reverse_window_examples() {
        assert_eq!(reverse_window_len(1), 1);
        assert_eq!(reverse_window_len(2), 2);
        assert_eq!(reverse_window_len(256), 2);
        assert_eq!(reverse_window_len(257), 3);
        let sys = PolymerSystem::new(gauss(0.3), 4, 3).unwrap();
        for k in [2i64, 9, 300] {
            let m = reverse_window_len(k as u64);
            let v = reverse_partition(&sys, &SpaceTimePoint::new(k, vec![1, 0, 0]), TimeInterval::closed_open((k - m as i64).max(1), k), None).unwrap();
            assert!(v.is_finite() && v > 0.0);
            let field = reverse_window_field(&sys, k, m, &Region::centered(3, 1)).unwrap();
            assert!(rel_err(field.get(&[1, 0, 0]), v) < 1e-12);
        }
    }

    #[test]
    fn pinned_examples() {
        let sys0 = PolymerSystem::new(gauss(0.0), 1, 3).unwrap();
        let v = pinned_partition(&sys0, &SpaceTimePoint::new(0, vec![0, 0, 0]), &SpaceTimePoint::new(2, vec![1, 1, 0])).unwrap();
        assert_relative_eq!(v, 1.0, max_relative = 1e-14);
        let sys = PolymerSystem::new(EnvSpec::rademacher(0.9).unwrap(), 2, 1).unwrap();
        let a = SpaceTimePoint::new(1, vec![0]);
        let b = SpaceTimePoint::new(5, vec![2]);
        let got = pinned_partition(&sys, &a, &b).unwrap();
        let (mut num, mut cnt) = (0.0, 0.0);
        for_each_path(1, &[0], 4, &mut |p| {
            if p[4] == vec![2] {
                cnt += 1.0;
                num += (1..4).map(|j| sys.weight(1 + j as i64, &p[j]).unwrap()).product::<f64>();
            }
        });
        assert!(rel_err(got, num / cnt) < 1e-12);
        assert!(pinned_partition(&sys, &a, &SpaceTimePoint::new(5, vec![1])).is_err());
        assert!(pinned_partition(&sys, &a, &SpaceTimePoint::new(2, vec![1])).is_err());
    }

    #[test]
    fn alpha_examples() {
        let sys = PolymerSystem::new(gauss(0.7), 13, 3).unwrap();
        let a1 = polymer_measure_alpha(&sys, &[0, 0, 0], 1).unwrap();
        assert_relative_eq!(a1.get(&[0, 1, 0]), 1.0 / 6.0, max_relative = 1e-15);
        assert_relative_eq!(a1.sum(), 1.0, max_relative = 1e-15);
        let a5 = polymer_measure_alpha(&sys, &[1, 0, 2], 5).unwrap();
        assert!((a5.sum() - 1.0).abs() < 1e-14);
        // β = 0: one free step of p_{n-1}
        let sys0 = PolymerSystem::new(gauss(0.0), 13, 2).unwrap();
        let a = polymer_measure_alpha(&sys0, &[0, 0], 4).unwrap();
        let p4 = heat_kernel(2, 4).unwrap();
        for (y, v) in a.iter() {
            assert!((v - p4.get(&y)).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_tilde_beta_zero_is_kernel() {
        let sys = PolymerSystem::new(gauss(0.0), 1, 2).unwrap();
        let at = alpha_tilde(&sys, &[0, 0], 6).unwrap();
        let p = heat_kernel(2, 6).unwrap();
        for (y, v) in at.values.iter() {
            assert!((v - p.get(&y)).abs() < 1e-15);
        }
        assert_eq!(at.clipped, 0);
        let sys = PolymerSystem::new(gauss(0.5), 1, 2).unwrap();
        let at = alpha_tilde(&sys, &[0, 0], 6).unwrap();
        assert!(at.values.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn path_marginal_slice_agrees_with_pinning() {
        let sys = PolymerSystem::new(gauss(0.5), 17, 2).unwrap();
        let slice = path_marginal_slice(&sys, 8, 3).unwrap();
        assert!((slice.sum() - 1.0).abs() < 1e-14);
        for x in [[1, 0], [0, -1], [2, 1], [-3, 0]] {
            let v = path_marginal(&sys, 8, 3, &x).unwrap();
            assert!(rel_err(v, slice.get(&x)) < 1e-12);
        }
        let sys0 = PolymerSystem::new(gauss(0.0), 17, 2).unwrap();
        let p3 = heat_kernel(2, 3).unwrap();
        assert!((path_marginal(&sys0, 8, 3, &[1, 0]).unwrap() - p3.get(&[1, 0])).abs() < 1e-15);
    }

    #[test]
    fn shift_is_bit_exact() {
        let sys = PolymerSystem::new(gauss(0.5), 2, 3).unwrap();
        let s = SpaceTimePoint::new(4, vec![3, -1, 2]);
        let shifted = sys.clone().with_shift(&s);
        let a = forward_partition(&shifted, &SpaceTimePoint::origin(3), 6, None).unwrap();
        let b = forward_partition(&sys, &s, 6, None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn she_identity_holds() {
        let sys = PolymerSystem::new(EnvSpec::rademacher(0.6).unwrap(), 3, 2).unwrap();
        let f = she_kpz_fields(&sys, 6, &Region::centered(2, 3)).unwrap();
        assert!(f.residual <= 1e-12, "residual {}", f.residual);
        assert!(f.u(0).values().iter().all(|&v| v == 1.0));
        assert!(f.shifted(6).values().iter().all(|&v| v == 1.0));
        assert!(f.boundary_excluded > 0);
        // U(k, x) = Z_k ∘ θ_{n-k, x}
        let z = forward_partition(&sys, &SpaceTimePoint::new(2, vec![1, -1]), 4, None).unwrap();
        assert!(rel_err(f.u(4).get(&[1, -1]), z) < 1e-12);
        let sys0 = PolymerSystem::new(gauss(0.0), 3, 2).unwrap();
        let f0 = she_kpz_fields(&sys0, 5, &Region::centered(2, 2)).unwrap();
        assert_eq!(f0.residual, 0.0);
        assert!(f0.h(3).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditional_mean_is_martingale() {
        let sys = PolymerSystem::new(gauss(0.8), 6, 3).unwrap();
        let (z, next) = conditional_mean_next(&sys, &SpaceTimePoint::origin(3), 8).unwrap();
        assert!((z - next).abs() <= 1e-14 * z);
        let win = sys.clone().with_window(Window::Diffusive { sigmas: 2.0 });
        let (z, next) = conditional_mean_next(&win, &SpaceTimePoint::origin(3), 8).unwrap();
        assert!((z - next).abs() <= 1e-14 * z);
    }

    #[test]
    fn restricted_partition_skips_times() {
        let sys = PolymerSystem::new(gauss(0.5), 6, 1).unwrap();
        let start = SpaceTimePoint::origin(1);
        let got = restricted_partition(&sys, &start, TimeInterval::closed(2, 3), None).unwrap();
        let mut total = 0.0;
        for_each_path(1, &[0], 3, &mut |p| total += sys.weight(2, &p[2]).unwrap() * sys.weight(3, &p[3]).unwrap());
        assert!(rel_err(got, total / 8.0) < 1e-12);
        let full = restricted_partition(&sys, &start, TimeInterval::open_closed(0, 5), None).unwrap();
        assert_eq!(full, forward_partition(&sys, &start, 5, None).unwrap());
    }

    #[test]
    fn window_radius() {
        assert_eq!(Window::Exact.radius(17, 3), 17);
        assert_eq!(Window::Diffusive { sigmas: 5.0 }.radius(128, 3), 33);
        assert_eq!(Window::Diffusive { sigmas: 5.0 }.radius(4, 3), 4);
    }

    #[test]
    fn reads_before_time_one_fail() {
        let sys = PolymerSystem::new(gauss(0.5), 6, 1).unwrap().time_reflected(3);
        assert!(forward_partition(&sys, &SpaceTimePoint::origin(1), 4, None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn alpha_is_a_probability(seed in any::<u64>(), d in 1usize..=3, n in 1usize..=8, beta in 0.0f64..1.0) {
                let sys = PolymerSystem::new(gauss(beta), seed, d).unwrap();
                let a = polymer_measure_alpha(&sys, &vec![0; d], n).unwrap();
                prop_assert!(a.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn all_starts_agree_with_points(seed in any::<u64>(), d in 1usize..=3, n in 1usize..=6, x in -3i64..=3) {
                let sys = PolymerSystem::new(gauss(0.4), seed, d).unwrap();
                let mut p = vec![0; d];
                p[0] = x;
                let field = all_starts_partition(&sys, n, &Region::point(&p)).unwrap();
                let z = forward_partition(&sys, &SpaceTimePoint::new(0, p.clone()), n, None).unwrap();
                prop_assert!(z > 0.0);
                prop_assert!(rel_err(field.get(&p), z) < 1e-12);
            }

            #[test]
            fn diffusive_window_never_exceeds_exact(seed in any::<u64>(), n in 1usize..=20, sigmas in 0.5f64..3.0) {
                // positive weights, so dropping paths only loses mass
                let exact = PolymerSystem::new(gauss(0.3), seed, 2).unwrap();
                let cut = exact.clone().with_window(Window::Diffusive { sigmas });
                let o = SpaceTimePoint::origin(2);
                let (a, b) = (forward_partition(&exact, &o, n, None).unwrap(), forward_partition(&cut, &o, n, None).unwrap());
                prop_assert!(b <= a * (1.0 + 1e-12));
            }
        }
    }
}
