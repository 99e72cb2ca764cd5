//! Boxes on Z^d, dense slab storage and the nearest-neighbour averaging
//! stencil, plus the exact simple random walk kernels built from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::NeumaierSum;

/// Default guard against accidental huge allocations.
pub const DEFAULT_CELL_BUDGET: usize = 200_000_000;

/// Axis-aligned box `lo ..= hi` in Z^d.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl Region {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "corner dimensions differ");
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b), "empty region {lo:?}..={hi:?}");
        Self { lo, hi }
    }

    pub fn point(x: &[i64]) -> Self {
        Self::new(x.to_vec(), x.to_vec())
    }

    /// `[-r, r]^d`.
    pub fn centered(d: usize, r: i64) -> Self {
        Self::new(vec![-r; d], vec![r; d])
    }

    pub fn cube(center: &[i64], r: i64) -> Self {
        Self::point(center).grow(r)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a + 1) as usize).collect()
    }

    /// Number of sites, `None` on overflow.
    pub fn cells(&self) -> Option<usize> {
        self.extents().into_iter().try_fold(1usize, |acc, e| acc.checked_mul(e))
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| a <= v && v <= b)
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        self.lo.iter().zip(&other.lo).all(|(a, b)| a <= b) && self.hi.iter().zip(&other.hi).all(|(a, b)| a >= b)
    }

    pub fn grow(&self, r: i64) -> Region {
        Region::new(self.lo.iter().map(|v| v - r).collect(), self.hi.iter().map(|v| v + r).collect())
    }

    pub fn intersect(&self, other: &Region) -> Option<Region> {
        let lo: Vec<i64> = self.lo.iter().zip(&other.lo).map(|(a, b)| *a.max(b)).collect();
        let hi: Vec<i64> = self.hi.iter().zip(&other.hi).map(|(a, b)| *a.min(b)).collect();
        lo.iter().zip(&hi).all(|(a, b)| a <= b).then(|| Region::new(lo, hi))
    }

    pub fn translate(&self, by: &[i64]) -> Region {
        Region::new(
            self.lo.iter().zip(by).map(|(a, b)| a + b).collect(),
            self.hi.iter().zip(by).map(|(a, b)| a + b).collect(),
        )
    }

    /// All sites in row-major order (last coordinate fastest).
    pub fn sites(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        let total = self.cells().unwrap_or(0);
        let mut cur = self.lo.clone();
        (0..total).map(move |i| {
            if i > 0 {
                for a in (0..cur.len()).rev() {
                    if cur[a] < self.hi[a] {
                        cur[a] += 1;
                        break;
                    }
                    cur[a] = self.lo[a];
                }
            }
            cur.clone()
        })
    }
}

/// A point of space-time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub t: i64,
    pub x: Vec<i64>,
}

impl SpaceTimePoint {
    pub fn new(t: i64, x: impl Into<Vec<i64>>) -> Self {
        Self { t, x: x.into() }
    }

    pub fn origin(d: usize) -> Self {
        Self { t: 0, x: vec![0; d] }
    }
}

pub fn l1_norm(x: &[i64]) -> i64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Whether a walk at `a` can be at `b`: `P(X_{b.t-a.t} = b.x - a.x) > 0`.
pub fn parity_connected(a: &SpaceTimePoint, b: &SpaceTimePoint) -> Result<bool> {
    if a.t > b.t {
        return Err(Error::domain(format!("time order violated: {} > {}", a.t, b.t)));
    }
    if a.x.len() != b.x.len() {
        return Err(Error::domain("points live in different dimensions"));
    }
    let dt = b.t - a.t;
    let diff: Vec<i64> = b.x.iter().zip(&a.x).map(|(p, q)| p - q).collect();
    let l1 = l1_norm(&diff);
    Ok(l1 <= dt && (dt - l1) % 2 == 0)
}

/// A real field on a box; reads outside the box return zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxField {
    region: Region,
    strides: Vec<usize>,
    values: Vec<f64>,
}

/// Alias used for one time slice of weights, kernels or partition values.
pub type SlabField = BoxField;

fn row_major_strides(ext: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; ext.len()];
    for a in (0..ext.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * ext[a + 1];
    }
    strides
}

impl BoxField {
    pub fn zeros(region: Region) -> Self {
        let ext = region.extents();
        let n = region.cells().expect("region size overflows usize");
        Self { strides: row_major_strides(&ext), values: vec![0.0; n], region }
    }

    pub fn from_fn(region: Region, mut f: impl FnMut(&[i64]) -> f64) -> Self {
        let mut out = Self::zeros(region.clone());
        for (i, x) in region.sites().enumerate() {
            out.values[i] = f(&x);
        }
        out
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offset(&self, x: &[i64]) -> Option<usize> {
        if !self.region.contains(x) {
            return None;
        }
        Some(x.iter().zip(&self.region.lo).zip(&self.strides).map(|((v, l), s)| (v - l) as usize * s).sum())
    }

    pub fn get(&self, x: &[i64]) -> f64 {
        self.offset(x).map_or(0.0, |i| self.values[i])
    }

    pub fn set(&mut self, x: &[i64], v: f64) {
        let i = self.offset(x).unwrap_or_else(|| panic!("{x:?} outside {:?}", self.region));
        self.values[i] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<i64>, f64)> + '_ {
        self.region.sites().zip(self.values.iter().copied())
    }

    pub fn sum(&self) -> f64 {
        let mut acc = NeumaierSum::new();
        for &v in &self.values {
            acc.add(v);
        }
        acc.value()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> BoxField {
        BoxField { region: self.region.clone(), strides: self.strides.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }
}

/// Padded row-major layout: the interior box plus a one-cell zero halo, so
/// the stencil never needs bounds checks.
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    pub interior: Region,
    pub strides: Vec<usize>,
    pub len: usize,
}

impl Geometry {
    pub fn new(interior: Region, budget: usize) -> Result<Self> {
        let padded: Vec<usize> = interior.extents().iter().map(|e| e + 2).collect();
        let len = padded.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).unwrap_or(usize::MAX);
        if len > budget {
            return Err(Error::Budget { requested: len, budget });
        }
        Ok(Self { strides: row_major_strides(&padded), len, interior })
    }

    pub fn dim(&self) -> usize {
        self.interior.dim()
    }

    #[inline]
    pub fn index(&self, x: &[i64]) -> usize {
        x.iter()
            .zip(&self.interior.lo)
            .zip(&self.strides)
            .map(|((v, l), s)| (v - l + 1) as usize * s)
            .sum()
    }

    /// Calls `f(prefix, base_index, first_last_coord, len)` for every row of
    /// `region` along the last axis.
    pub fn for_each_row(&self, region: &Region, mut f: impl FnMut(&[i64], usize, i64, usize)) {
        let d = region.dim();
        let len = (region.hi[d - 1] - region.lo[d - 1] + 1) as usize;
        let mut prefix: Vec<i64> = region.lo[..d - 1].to_vec();
        let last_off = (region.lo[d - 1] - self.interior.lo[d - 1] + 1) as usize;
        loop {
            let base: usize = prefix
                .iter()
                .zip(&self.interior.lo)
                .zip(&self.strides)
                .map(|((v, l), s)| (v - l + 1) as usize * s)
                .sum::<usize>()
                + last_off;
            f(&prefix, base, region.lo[d - 1], len);
            // odometer over the prefix
            let mut a = d - 1;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                if prefix[a] < region.hi[a] {
                    prefix[a] += 1;
                    break;
                }
                prefix[a] = region.lo[a];
            }
        }
    }
}

/// Reachable set of a walk started at `center` after `radius` steps: sites
/// with `|x - center|_1 <= radius` and matching parity.
#[derive(Debug, Clone)]
pub(crate) struct Cone {
    pub center: Vec<i64>,
    pub radius: i64,
}

impl Geometry {
    /// Rows of `region` clipped to the ℓ¹ ball of `cone`. Calls
    /// `f(prefix, base, first, len, skip)` where `[first, first+len)` is the
    /// clipped range and `first + skip` is its first site of the cone parity.
    pub fn for_each_cone_row(&self, region: &Region, cone: &Cone, mut f: impl FnMut(&[i64], usize, i64, usize, usize)) {
        let d = region.dim();
        let c_last = cone.center[d - 1];
        self.for_each_row(region, |prefix, base, lo, len| {
            let p1: i64 = prefix.iter().zip(&cone.center).map(|(a, b)| (a - b).abs()).sum();
            let rem = cone.radius - p1;
            if rem < 0 {
                return;
            }
            let a = lo.max(c_last - rem);
            let b = (lo + len as i64 - 1).min(c_last + rem);
            if a > b {
                return;
            }
            let skip = (a - c_last - rem).rem_euclid(2) as usize;
            f(prefix, base + (a - lo) as usize, a, (b - a + 1) as usize, skip);
        });
    }
}

#[inline]
fn average_row_const<const D: usize>(strides: &[usize], src: &[f64], dst: &mut [f64], base: usize, len: usize, inv: f64) {
    let dst = &mut dst[base..base + len];
    let lows: [&[f64]; D] = std::array::from_fn(|a| &src[base - strides[a]..base - strides[a] + len]);
    let highs: [&[f64]; D] = std::array::from_fn(|a| &src[base + strides[a]..base + strides[a] + len]);
    for (j, out) in dst.iter_mut().enumerate() {
        let mut s = 0.0;
        for a in 0..D {
            s += lows[a][j] + highs[a][j];
        }
        *out = s * inv;
    }
}

#[inline]
fn average_row_stride2<const D: usize>(strides: &[usize], src: &[f64], dst: &mut [f64], start: usize, end: usize, inv: f64) {
    let mut st = [0usize; D];
    st.copy_from_slice(&strides[..D]);
    if start >= end {
        return;
    }
    // the halo guarantees every neighbour index of an interior cell is in range
    assert!(start >= st[0] && end + st[0] <= src.len() && end <= dst.len());
    let mut i = start;
    while i < end {
        let mut s = 0.0;
        for &o in &st {
            // SAFETY: strides are decreasing, so st[0] is the largest offset; both
            // i - o and i + o lie in [start - st[0], end + st[0]) ⊆ [0, len), checked above.
            unsafe {
                s += *src.get_unchecked(i - o) + *src.get_unchecked(i + o);
            }
        }
        // SAFETY: i < end <= dst.len().
        unsafe {
            *dst.get_unchecked_mut(i) = s * inv;
        }
        i += 2;
    }
}

fn average_row_stride2_dyn(strides: &[usize], src: &[f64], dst: &mut [f64], start: usize, end: usize, inv: f64) {
    let mut i = start;
    while i < end {
        let mut s = 0.0;
        for &o in strides {
            s += src[i - o] + src[i + o];
        }
        dst[i] = s * inv;
        i += 2;
    }
}

/// Stencil restricted to the cone: sites outside it or of the wrong parity
/// are left untouched (they hold zeros from two steps earlier).
pub(crate) fn average_cone(geom: &Geometry, src: &[f64], dst: &mut [f64], region: &Region, cone: &Cone) {
    let d = geom.dim();
    let inv = 1.0 / (2 * d) as f64;
    let strides = &geom.strides;
    geom.for_each_cone_row(region, cone, |_, base, _, len, skip| {
        let (start, end) = (base + skip, base + len);
        match d {
            1 => average_row_stride2::<1>(strides, src, dst, start, end, inv),
            2 => average_row_stride2::<2>(strides, src, dst, start, end, inv),
            3 => average_row_stride2::<3>(strides, src, dst, start, end, inv),
            4 => average_row_stride2::<4>(strides, src, dst, start, end, inv),
            _ => average_row_stride2_dyn(strides, src, dst, start, end, inv),
        }
    });
}

fn average_row_dyn(strides: &[usize], src: &[f64], dst: &mut [f64], base: usize, len: usize, inv: f64) {
    for i in base..base + len {
        let mut s = 0.0;
        for &o in strides {
            s += src[i - o] + src[i + o];
        }
        dst[i] = s * inv;
    }
}

/// `dst(y) = (2d)^{-1} Σ_{y'~y} src(y')` for `y` in `region`.
pub(crate) fn average(geom: &Geometry, src: &[f64], dst: &mut [f64], region: &Region) {
    let d = geom.dim();
    let inv = 1.0 / (2 * d) as f64;
    let strides = &geom.strides;
    geom.for_each_row(region, |_, base, _, len| match d {
        1 => average_row_const::<1>(strides, src, dst, base, len, inv),
        2 => average_row_const::<2>(strides, src, dst, base, len, inv),
        3 => average_row_const::<3>(strides, src, dst, base, len, inv),
        4 => average_row_const::<4>(strides, src, dst, base, len, inv),
        _ => average_row_dyn(strides, src, dst, base, len, inv),
    });
}

/// Double-buffered field on a padded box.
///
/// Invariant: every cell of `cur` outside `valid` is zero, so reading past
/// the support behaves like reading outside the box.
#[derive(Debug, Clone)]
pub(crate) struct Slab {
    pub geom: Geometry,
    pub cur: Vec<f64>,
    tmp: Vec<f64>,
    pub valid: Region,
    tmp_valid: Option<Region>,
    cone: Option<Cone>,
}

impl Slab {
    /// Zero field on `interior` with `valid` initially set to `start`.
    pub fn new(interior: Region, start: Region, budget: usize) -> Result<Self> {
        debug_assert!(interior.contains_region(&start));
        let geom = Geometry::new(interior, budget.saturating_mul(1))?;
        let cur = vec![0.0; geom.len];
        let tmp = vec![0.0; geom.len];
        Ok(Self { geom, cur, tmp, valid: start, tmp_valid: None, cone: None })
    }

    pub fn set(&mut self, x: &[i64], v: f64) {
        debug_assert!(self.valid.contains(x));
        let i = self.geom.index(x);
        self.cur[i] = v;
    }

    /// Overwrite the valid region with a constant.
    pub fn fill_valid(&mut self, v: f64) {
        let cur = &mut self.cur;
        self.geom.for_each_row(&self.valid, |_, base, _, len| cur[base..base + len].fill(v));
    }

    /// Replace the field by its neighbour average on `next`.
    pub fn average_into(&mut self, next: Region) {
        debug_assert!(self.geom.interior.contains_region(&next), "{next:?} outside interior");
        if let Some(old) = self.tmp_valid.take() {
            if !next.contains_region(&old) {
                let tmp = &mut self.tmp;
                self.geom.for_each_row(&old, |_, base, _, len| tmp[base..base + len].fill(0.0));
            }
        }
        match &mut self.cone {
            Some(cone) => {
                cone.radius += 1;
                average_cone(&self.geom, &self.cur, &mut self.tmp, &next, cone);
            }
            None => average(&self.geom, &self.cur, &mut self.tmp, &next),
        }
        std::mem::swap(&mut self.cur, &mut self.tmp);
        self.tmp_valid = Some(std::mem::replace(&mut self.valid, next));
    }

    /// Average onto the valid region grown by one, clipped to the interior.
    pub fn average_grow(&mut self) {
        let next = self.valid.grow(1).intersect(&self.geom.interior).expect("valid region inside interior");
        self.average_into(next);
    }

    /// Declare that the field is supported on the cone of a walk started at
    /// `center` now. Must be called while the field is a point mass there.
    pub fn track_cone(&mut self, center: &[i64]) {
        self.cone = Some(Cone { center: center.to_vec(), radius: 0 });
    }

    /// Visit the rows of the valid region; with a tracked cone, rows are
    /// clipped to it (everything outside is zero).
    pub fn rows_mut(&mut self, mut f: impl FnMut(&[i64], i64, &mut [f64])) {
        let cur = &mut self.cur;
        match &self.cone {
            Some(cone) => self
                .geom
                .for_each_cone_row(&self.valid, cone, |prefix, base, lo, len, _| f(prefix, lo, &mut cur[base..base + len])),
            None => self.geom.for_each_row(&self.valid, |prefix, base, lo, len| f(prefix, lo, &mut cur[base..base + len])),
        }
    }

    pub fn rows(&self, mut f: impl FnMut(&[i64], i64, &[f64])) {
        let cur = &self.cur;
        match &self.cone {
            Some(cone) => {
                self.geom.for_each_cone_row(&self.valid, cone, |prefix, base, lo, len, _| f(prefix, lo, &cur[base..base + len]))
            }
            None => self.geom.for_each_row(&self.valid, |prefix, base, lo, len| f(prefix, lo, &cur[base..base + len])),
        }
    }

    /// Like [`rows_mut`](Self::rows_mut) but only hands out sites that can be
    /// nonzero: `f(prefix, lo, row, skip, step)` should touch
    /// `row[skip], row[skip + step], ...`.
    pub fn site_rows_mut(&mut self, mut f: impl FnMut(&[i64], i64, &mut [f64], usize, usize)) {
        let cur = &mut self.cur;
        match &self.cone {
            Some(cone) => self.geom.for_each_cone_row(&self.valid, cone, |prefix, base, lo, len, skip| {
                f(prefix, lo, &mut cur[base..base + len], skip, 2)
            }),
            None => self.geom.for_each_row(&self.valid, |prefix, base, lo, len| f(prefix, lo, &mut cur[base..base + len], 0, 1)),
        }
    }

    /// Same field on a larger interior.
    pub fn enlarged(&self, interior: Region, budget: usize) -> Result<Slab> {
        let mut big = Slab::new(interior, self.valid.clone(), budget)?;
        let d = self.geom.dim();
        let mut x = vec![0i64; d];
        self.rows(|prefix, lo, row| {
            x[..d - 1].copy_from_slice(prefix);
            for (j, &v) in row.iter().enumerate() {
                x[d - 1] = lo + j as i64;
                big.set(&x, v);
            }
        });
        big.cone = self.cone.clone();
        Ok(big)
    }

    pub fn get(&self, x: &[i64]) -> f64 {
        if self.valid.contains(x) {
            self.cur[self.geom.index(x)]
        } else {
            0.0
        }
    }

    pub fn sum(&self) -> f64 {
        let mut acc = NeumaierSum::new();
        self.rows(|_, _, row| row.iter().for_each(|&v| acc.add(v)));
        acc.value()
    }

    /// Copy of the field restricted to `region` (zero where not valid).
    pub fn extract(&self, region: &Region) -> BoxField {
        let mut out = BoxField::zeros(region.clone());
        if let Some(common) = region.intersect(&self.valid) {
            let d = region.dim();
            let out_strides = out.strides.clone();
            let out_lo = region.lo.clone();
            let vals = &mut out.values;
            self.geom.for_each_row(&common, |prefix, base, lo, len| {
                let mut o = 0usize;
                for a in 0..d - 1 {
                    o += (prefix[a] - out_lo[a]) as usize * out_strides[a];
                }
                o += (lo - out_lo[d - 1]) as usize;
                vals[o..o + len].copy_from_slice(&self.cur[base..base + len]);
            });
        }
        out
    }

    pub fn to_box(&self) -> BoxField {
        self.extract(&self.valid)
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::domain("dimension must be >= 1"));
    }
    Ok(())
}

/// Exact heat kernels `p_0, ..., p_n` of the simple random walk.
pub fn heat_kernels_upto(d: usize, n: usize, budget: usize) -> Result<Vec<BoxField>> {
    check_dim(d)?;
    let interior = Region::centered(d, n as i64);
    let mut slab = Slab::new(interior, Region::centered(d, 0), budget)?;
    slab.set(&vec![0; d], 1.0);
    slab.track_cone(&vec![0; d]);
    let mut out = Vec::with_capacity(n + 1);
    out.push(slab.to_box());
    for _ in 0..n {
        slab.average_grow();
        out.push(slab.to_box());
    }
    Ok(out)
}

/// `p_n(·)` on `[-n, n]^d`, by `n` averaging steps from `δ_0`.
pub fn heat_kernel(d: usize, n: usize) -> Result<BoxField> {
    heat_kernel_with_budget(d, n, DEFAULT_CELL_BUDGET)
}

pub fn heat_kernel_with_budget(d: usize, n: usize, budget: usize) -> Result<BoxField> {
    check_dim(d)?;
    let interior = Region::centered(d, n as i64);
    let mut slab = Slab::new(interior, Region::centered(d, 0), budget)?;
    slab.set(&vec![0; d], 1.0);
    for _ in 0..n {
        slab.average_grow();
    }
    Ok(slab.to_box())
}

/// Random walk bridge marginal `P^{s,x;t,y}(X_k = z)`.
pub fn bridge_prob(from: &SpaceTimePoint, to: &SpaceTimePoint, k: i64, z: &[i64]) -> Result<f64> {
    if !(from.t <= k && k <= to.t) {
        return Err(Error::domain(format!("bridge time {k} outside [{}, {}]", from.t, to.t)));
    }
    if !parity_connected(from, to)? {
        return Err(Error::domain("bridge endpoints are not connected: p_{t-s}(y-x) = 0"));
    }
    let d = from.x.len();
    let kernels = heat_kernels_upto(d, (to.t - from.t) as usize, DEFAULT_CELL_BUDGET)?;
    let diff = |a: &[i64], b: &[i64]| -> Vec<i64> { a.iter().zip(b).map(|(p, q)| p - q).collect() };
    let first = kernels[(k - from.t) as usize].get(&diff(z, &from.x));
    let second = kernels[(to.t - k) as usize].get(&diff(&to.x, z));
    let total = kernels[(to.t - from.t) as usize].get(&diff(&to.x, &from.x));
    if first == 0.0 || second == 0.0 {
        return Ok(0.0);
    }
    Ok(first * second / total)
}

/// Leading-order local CLT approximation of `p_n(x)`, including the factor
/// two from the parity restriction. Zero off the parity sublattice.
pub fn lclt_approx(d: usize, n: usize, x: &[i64]) -> Result<f64> {
    check_dim(d)?;
    if n == 0 {
        return Err(Error::domain("local CLT needs n >= 1"));
    }
    if !parity_connected(&SpaceTimePoint::origin(d), &SpaceTimePoint::new(n as i64, x.to_vec()))? {
        return Ok(0.0);
    }
    let nf = n as f64;
    let df = d as f64;
    let r2: f64 = x.iter().map(|&v| (v * v) as f64).sum();
    Ok(2.0 * (df / (2.0 * std::f64::consts::PI * nf)).powf(df / 2.0) * (-df * r2 / (2.0 * nf)).exp())
}

/// `E[boost^{N_n}]` where `N_n = #{1 <= k <= n : X_k = Y_k}` for two
/// independent walks from the origin. The difference walk after `k` steps is
/// a simple random walk after `2k` steps, so this is a boosted kernel
/// recursion. Mass leaving `[-radius, radius]^d` is kept with its current
/// weight and no longer collects boosts.
pub fn collision_moment(d: usize, n: usize, boost: f64, radius: usize, budget: usize) -> Result<f64> {
    check_dim(d)?;
    let r = radius.min(2 * n).max(1) as i64;
    let mut slab = Slab::new(Region::centered(d, r), Region::centered(d, 0), budget)?;
    let origin = vec![0; d];
    slab.set(&origin, 1.0);
    let mut escaped = NeumaierSum::new();
    let mut mass = 1.0;
    for _ in 0..n {
        slab.average_grow();
        slab.average_grow();
        let after = slab.sum();
        escaped.add(mass - after);
        let i = slab.geom.index(&origin);
        slab.cur[i] *= boost;
        mass = slab.sum();
    }
    Ok(mass + escaped.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn binom(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn parity_examples() {
        let o = SpaceTimePoint::origin(1);
        assert!(parity_connected(&o, &SpaceTimePoint::new(1, vec![1])).unwrap());
        assert!(!parity_connected(&o, &SpaceTimePoint::new(1, vec![0])).unwrap());
        let o3 = SpaceTimePoint::origin(3);
        assert!(parity_connected(&o3, &SpaceTimePoint::new(2, vec![1, 1, 0])).unwrap());
        assert!(!parity_connected(&o3, &SpaceTimePoint::new(2, vec![3, 0, 0])).unwrap());
        assert!(parity_connected(&SpaceTimePoint::new(3, vec![0]), &o).is_err());
    }

    #[test]
    fn kernel_examples() {
        let p0 = heat_kernel(3, 0).unwrap();
        assert_eq!(p0.get(&[0, 0, 0]), 1.0);
        assert_eq!(p0.sum(), 1.0);
        let p1 = heat_kernel(3, 1).unwrap();
        assert_relative_eq!(p1.get(&[1, 0, 0]), 1.0 / 6.0, max_relative = 1e-15);
        let p10 = heat_kernel(1, 10).unwrap();
        assert_relative_eq!(p10.get(&[2]), 210.0 / 1024.0, max_relative = 1e-14);
    }

    #[test]
    fn d1_kernel_is_binomial() {
        for n in 0..40u64 {
            let p = heat_kernel(1, n as usize).unwrap();
            for x in -(n as i64)..=n as i64 {
                let want = if (n as i64 + x) % 2 == 0 {
                    binom(n, ((n as i64 + x) / 2) as u64) / 2f64.powi(n as i32)
                } else {
                    0.0
                };
                assert!((p.get(&[x]) - want).abs() <= 1e-15 * want.max(1e-300) + 1e-300, "n={n} x={x}");
            }
        }
    }

    #[test]
    fn budget_guard() {
        assert!(matches!(heat_kernel_with_budget(3, 50, 1000), Err(Error::Budget { .. })));
    }

    #[test]
    fn bridge_examples() {
        let a = SpaceTimePoint::new(0, vec![0]);
        let b = SpaceTimePoint::new(4, vec![0]);
        assert_eq!(bridge_prob(&a, &b, 0, &[0]).unwrap(), 1.0);
        assert_relative_eq!(bridge_prob(&a, &b, 4, &[0]).unwrap(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(bridge_prob(&a, &b, 2, &[0]).unwrap(), 2.0 / 3.0, max_relative = 1e-14);
        assert!(bridge_prob(&a, &SpaceTimePoint::new(3, vec![0]), 1, &[1]).is_err());
        // a bridge marginal is a probability vector
        let a3 = SpaceTimePoint::new(1, vec![0, 0, 0]);
        let b3 = SpaceTimePoint::new(7, vec![1, 1, 0]);
        let total: f64 = Region::centered(3, 7).sites().map(|z| bridge_prob(&a3, &b3, 4, &z).unwrap()).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-13);
    }

    #[test]
    fn lclt_parity_and_accuracy() {
        assert_eq!(lclt_approx(3, 10, &[1, 0, 0]).unwrap(), 0.0);
        let p = heat_kernel(3, 100).unwrap();
        let mut worst: f64 = 0.0;
        for (x, v) in p.iter() {
            let r2: i64 = x.iter().map(|c| c * c).sum();
            if r2 > 4 * 100 || v == 0.0 {
                continue;
            }
            let approx = lclt_approx(3, 100, &x).unwrap();
            worst = worst.max((approx - v).abs() / v);
        }
        // lattice anisotropy dominates near |x| = 2√n, strongest along the axes
        assert!(worst <= 0.07, "worst relative LCLT error {worst}");
        let mut inner: f64 = 0.0;
        for (x, v) in p.iter() {
            let r2: i64 = x.iter().map(|c| c * c).sum();
            if r2 <= 100 && v > 0.0 {
                inner = inner.max((lclt_approx(3, 100, &x).unwrap() - v).abs() / v);
            }
        }
        assert!(inner <= 0.01, "{inner}");
    }

    #[test]
    fn collision_moment_small_cases() {
        // n = 1: returns with probability 1/(2d)
        let m1 = collision_moment(3, 1, 2.0, 10, DEFAULT_CELL_BUDGET).unwrap();
        assert_relative_eq!(m1, 1.0 + 1.0 / 6.0, max_relative = 1e-14);
        // boost 1 keeps the total mass
        let m = collision_moment(3, 20, 1.0, 6, DEFAULT_CELL_BUDGET).unwrap();
        assert_relative_eq!(m, 1.0, max_relative = 1e-13);
        // a wider radius changes the answer only marginally
        let a = collision_moment(3, 40, 1.1, 80, DEFAULT_CELL_BUDGET).unwrap();
        let b = collision_moment(3, 40, 1.1, 30, DEFAULT_CELL_BUDGET).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn slab_shrinking_clears_stale_cells() {
        let d = 2;
        let mut slab = Slab::new(Region::centered(d, 4), Region::centered(d, 4), DEFAULT_CELL_BUDGET).unwrap();
        slab.fill_valid(1.0);
        slab.average_into(Region::centered(d, 3));
        slab.average_into(Region::centered(d, 1));
        slab.average_into(Region::centered(d, 1));
        // the outer ring of the second buffer must not leak back in
        let b = slab.to_box();
        assert_relative_eq!(b.get(&[1, 1]), 0.5, max_relative = 1e-15);
        assert_eq!(slab.get(&[3, 3]), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kernel_is_normalised_and_even(d in 1usize..=3, n in 0usize..=12) {
                let p = heat_kernel(d, n).unwrap();
                prop_assert!((p.sum() - 1.0).abs() < 1e-13);
                for (x, v) in p.iter() {
                    let neg: Vec<i64> = x.iter().map(|a| -a).collect();
                    prop_assert!((p.get(&neg) - v).abs() <= 1e-16);
                }
            }

            #[test]
            fn region_grow_contains(lo in -5i64..5, w in 0i64..4, r in 0i64..3) {
                let a = Region::new(vec![lo, lo - 1], vec![lo + w, lo + w]);
                let g = a.grow(r);
                prop_assert!(g.contains_region(&a));
                prop_assert_eq!(g.cells().unwrap(), a.extents().iter().map(|e| e + 2 * r as usize).product::<usize>());
            }
        }
    }
}
