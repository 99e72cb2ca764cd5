//! Random environments.
//!
//! The environment `ω_{k,x}` is never stored. Every value is a pure function
//! of `(seed, k, x)`: the key is hashed with a splitmix-style finalizer to 53
//! uniform bits, which are pushed through the inverse CDF of the family. Any
//! partition function variant, any shift and any thread therefore sees the
//! same field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal quantile, Wichura's algorithm AS241 (PPND16); relative
/// accuracy about 1e-16 over (0,1).
pub fn normal_quantile(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_6e3 * r + 3.343_057_558_358_813e4) * r + 6.726_577_092_700_87e4) * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_854e3 * r + 2.872_908_573_572_194_3e4) * r + 3.930_789_580_009_271e4) * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let v = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r + 2.417_807_251_774_506e-1) * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r + 1.519_866_656_361_645_7e-2) * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r + 1.242_660_947_388_078_4e-3) * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103_8;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r + 1.846_318_317_510_054_8e-5) * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_879e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

/// Law of a single environment variable. All families are centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Family {
    /// Standard normal.
    Gaussian,
    /// Uniform on {-1, +1}.
    Rademacher,
    /// `1{U < p} - p`.
    Bernoulli { p: f64 },
    /// Uniform on `[a, b]`, shifted to mean zero.
    Uniform { a: f64, b: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Family::Bernoulli { p } if !(p > 0.0 && p < 1.0) => {
                Err(Error::domain(format!("bernoulli parameter must lie in (0,1), got {p}")))
            }
            Family::Uniform { a, b } if !(a.is_finite() && b.is_finite() && a < b) => {
                Err(Error::domain(format!("uniform bounds must satisfy a < b, got [{a}, {b}]")))
            }
            _ => Ok(()),
        }
    }

    /// Whether the family satisfies the convex concentration property needed
    /// for the lower-tail experiments. Bounded and Gaussian laws do; every
    /// family offered here is one of those.
    pub fn conc_ok(&self) -> bool {
        true
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Rademacher => "rademacher",
            Family::Bernoulli { .. } => "bernoulli",
            Family::Uniform { .. } => "uniform",
        }
    }

    /// Map a uniform in (0,1) to a centered draw.
    #[inline]
    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Family::Gaussian => normal_quantile(u),
            Family::Rademacher => {
                if u < 0.5 {
                    -1.0
                } else {
                    1.0
                }
            }
            Family::Bernoulli { p } => {
                if u < p {
                    1.0 - p
                } else {
                    -p
                }
            }
            Family::Uniform { a, b } => (b - a) * (u - 0.5),
        }
    }

    /// Variance of one draw.
    pub fn variance(&self) -> f64 {
        match *self {
            Family::Gaussian | Family::Rademacher => 1.0,
            Family::Bernoulli { p } => p * (1.0 - p),
            Family::Uniform { a, b } => (b - a) * (b - a) / 12.0,
        }
    }
}

/// `log E[e^{βω}]` in closed form.
pub fn lambda_cgf(family: Family, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::domain(format!("inverse temperature must be finite and >= 0, got {beta}")));
    }
    family.validate()?;
    if beta == 0.0 {
        return Ok(0.0);
    }
    let value = match family {
        Family::Gaussian => 0.5 * beta * beta,
        // log cosh β = β + log(1 + e^{-2β}) - log 2, stable for large β
        Family::Rademacher => beta + (-2.0 * beta).exp().ln_1p() - std::f64::consts::LN_2,
        Family::Bernoulli { p } => (p * beta.exp_m1()).ln_1p() - beta * p,
        Family::Uniform { a, b } => {
            // log(sinh(βh)/(βh)) with h the half width
            let x = beta * 0.5 * (b - a);
            if x < 1e-4 {
                let x2 = x * x;
                x2 / 6.0 - x2 * x2 / 180.0
            } else {
                x + (-(-2.0 * x).exp()).ln_1p() - (2.0 * x).ln()
            }
        }
    };
    Ok(value)
}

/// Environment law together with the inverse temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: Family,
    pub beta: f64,
    pub lambda: f64,
}

impl EnvSpec {
    pub fn new(family: Family, beta: f64) -> Result<Self> {
        let lambda = lambda_cgf(family, beta)?;
        Ok(Self { family, beta, lambda })
    }

    pub fn gaussian(beta: f64) -> Result<Self> {
        Self::new(Family::Gaussian, beta)
    }

    pub fn rademacher(beta: f64) -> Result<Self> {
        Self::new(Family::Rademacher, beta)
    }

    /// `E[w^2] = e^{λ(2β) - 2λ(β)}`, the factor two replicas pick up at
    /// every space-time point they share.
    pub fn pair_boost(&self) -> f64 {
        let l2 = lambda_cgf(self.family, 2.0 * self.beta).expect("validated at construction");
        (l2 - 2.0 * self.lambda).exp()
    }

    #[inline]
    pub fn weight_of(&self, omega: f64) -> f64 {
        (self.beta * omega - self.lambda).exp()
    }
}

/// Key of a single environment variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvKey {
    pub seed: u64,
    pub k: i64,
    pub x: Vec<i64>,
}

impl EnvKey {
    pub fn new(seed: u64, k: i64, x: impl Into<Vec<i64>>) -> Self {
        Self { seed, k, x: x.into() }
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub(crate) fn absorb(h: u64, v: i64) -> u64 {
    mix64(h.wrapping_add(GOLDEN) ^ (v as u64))
}

/// Hash of `(seed, k, x[..d-1])`; the last coordinate is absorbed per cell.
#[inline]
pub(crate) fn row_hash(seed: u64, k: i64, prefix: &[i64]) -> u64 {
    let mut h = absorb(mix64(seed ^ 0x5851_f42d_4c95_7f2d), k);
    for &c in prefix {
        h = absorb(h, c);
    }
    h
}

/// Seed of an independent sub-stream (inner Monte Carlo, resampled slices).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix64(absorb(absorb(mix64(seed), tag as i64), index as i64))
}

#[inline]
pub(crate) fn to_unit(h: u64) -> f64 {
    // midpoint of one of 2^53 bins: strictly inside (0,1)
    ((h >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Hash of a full key.
#[inline]
pub(crate) fn key_hash(seed: u64, k: i64, x: &[i64]) -> u64 {
    match x.split_last() {
        Some((&last, prefix)) => absorb(row_hash(seed, k, prefix), last),
        None => row_hash(seed, k, &[]),
    }
}

/// Deterministic draw of `ω_{k,x}`.
pub fn sample_omega(spec: &EnvSpec, key: &EnvKey) -> Result<f64> {
    if key.k < 1 {
        return Err(Error::domain(format!("environment time must be >= 1, got {}", key.k)));
    }
    Ok(spec.family.quantile(to_unit(key_hash(key.seed, key.k, &key.x))))
}

/// `(w, e)` with `w = e^{βω - λ}` and `e = w - 1`.
pub fn weight_and_noise(spec: &EnvSpec, key: &EnvKey) -> Result<(f64, f64)> {
    let omega = sample_omega(spec, key)?;
    let w = spec.weight_of(omega);
    Ok((w, w - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn all_families() -> Vec<Family> {
        vec![
            Family::Gaussian,
            Family::Rademacher,
            Family::Bernoulli { p: 0.3 },
            Family::Uniform { a: -1.0, b: 2.0 },
        ]
    }

    /// log of the MGF by direct numerical integration / summation.
    fn lambda_oracle(family: Family, beta: f64) -> f64 {
        match family {
            Family::Gaussian => {
                let h = 1e-3;
                let mut acc = 0.0;
                let mut x = -40.0;
                while x <= 40.0 {
                    acc += (beta * x - 0.5 * x * x).exp();
                    x += h;
                }
                (acc * h / (2.0 * std::f64::consts::PI).sqrt()).ln()
            }
            Family::Rademacher => (0.5 * (beta.exp() + (-beta).exp())).ln(),
            Family::Bernoulli { p } => (p * (beta * (1.0 - p)).exp() + (1.0 - p) * (-beta * p).exp()).ln(),
            Family::Uniform { a, b } => {
                let half = 0.5 * (b - a);
                let m = 200_000;
                let h = 2.0 * half / m as f64;
                // midpoint rule
                let acc: f64 = (0..m).map(|i| (beta * (-half + (i as f64 + 0.5) * h)).exp()).sum();
                (acc * h / (2.0 * half)).ln()
            }
        }
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_cgf(Family::Gaussian, 0.5).unwrap(), 0.125);
        assert_eq!(lambda_cgf(Family::Rademacher, 0.0).unwrap(), 0.0);
        let lc1 = lambda_cgf(Family::Rademacher, 1.0).unwrap();
        assert_relative_eq!(lc1, 1f64.cosh().ln(), max_relative = 1e-14);
        assert_relative_eq!(lc1, 0.433_780_830_483_027, max_relative = 1e-12);
    }

    #[test]
    fn lambda_matches_quadrature() {
        for fam in all_families() {
            for &beta in &[0.1, 0.5, 1.0, 2.0] {
                let got = lambda_cgf(fam, beta).unwrap();
                let want = lambda_oracle(fam, beta);
                assert!((got - want).abs() < 1e-9, "{fam:?} β={beta}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn lambda_rejects_negative_beta() {
        assert!(matches!(lambda_cgf(Family::Gaussian, -0.1), Err(Error::Domain(_))));
        assert!(lambda_cgf(Family::Bernoulli { p: 1.5 }, 0.1).is_err());
    }

    #[test]
    fn lambda_is_nondecreasing() {
        for fam in all_families() {
            let mut prev = 0.0;
            for i in 0..=200 {
                let l = lambda_cgf(fam, i as f64 * 0.05).unwrap();
                assert!(l >= prev - 1e-15, "{fam:?}");
                prev = l;
            }
        }
    }

    #[test]
    fn sampling_is_pure() {
        let spec = EnvSpec::gaussian(0.3).unwrap();
        let key = EnvKey::new(7, 3, vec![1, -2, 5]);
        let a = sample_omega(&spec, &key).unwrap();
        let b = sample_omega(&spec, &key).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(sample_omega(&spec, &EnvKey::new(7, 0, vec![0])).is_err());
    }

    #[test]
    fn rademacher_support() {
        let spec = EnvSpec::rademacher(1.0).unwrap();
        for i in 0..1000 {
            let w = sample_omega(&spec, &EnvKey::new(1, 1 + i % 7, vec![i, -i])).unwrap();
            assert!(w == 1.0 || w == -1.0);
        }
    }

    #[test]
    fn gaussian_empirical_moments() {
        let spec = EnvSpec::gaussian(1.0).unwrap();
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let w = sample_omega(&spec, &EnvKey::new(42, 1 + i / 1000, vec![i % 1000, 3])).unwrap();
            s1 += w;
            s2 += w * w;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 6e-3, "var {var}");
    }

    #[test]
    fn weight_examples() {
        let spec0 = EnvSpec::gaussian(0.0).unwrap();
        for i in 0..50 {
            assert_eq!(weight_and_noise(&spec0, &EnvKey::new(3, 1, vec![i])).unwrap(), (1.0, 0.0));
        }
        let spec = EnvSpec::rademacher(1.0).unwrap();
        assert_relative_eq!(spec.weight_of(1.0), 1f64.exp() / 1f64.cosh(), max_relative = 1e-15);
    }

    #[test]
    fn mean_weight_is_one() {
        let n = 100_000i64;
        for fam in all_families() {
            for &beta in &[0.0, 0.1, 0.5, 1.0] {
                let spec = EnvSpec::new(fam, beta).unwrap();
                let ws: Vec<f64> = (0..n)
                    .map(|i| weight_and_noise(&spec, &EnvKey::new(11, 1 + i / 317, vec![i % 317, -1])).unwrap().0)
                    .collect();
                let mean = ws.iter().sum::<f64>() / n as f64;
                let var = ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                assert!((mean - 1.0).abs() <= 4.0 * se + 1e-15, "{fam:?} β={beta}: {mean} ± {se}");
            }
        }
    }

    #[test]
    fn pair_boost_gaussian() {
        let spec = EnvSpec::gaussian(0.2).unwrap();
        assert_relative_eq!(spec.pair_boost(), (0.04f64).exp(), max_relative = 1e-14);
    }
    #[test]
    fn normal_quantile_matches_erfc_inv() {
        use statrs::function::erf::erfc_inv;
        for i in 1..20_000 {
            let u = i as f64 / 20_000.0;
            let want = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u);
            assert!((normal_quantile(u) - want).abs() <= 1e-13 * want.abs().max(1e-3), "u={u}");
        }
        for u in [1e-300, 1e-100, 1e-20, 1e-10, 1e-5, 0.02425, 0.975, 1.0 - 1e-12] {
            let want = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u);
            assert!((normal_quantile(u) - want).abs() <= 1e-12 * want.abs(), "u={u}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }


    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantile_is_monotone(a in 1e-12f64..1.0, b in 1e-12f64..1.0) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(normal_quantile(lo) <= normal_quantile(hi));
            }

            #[test]
            fn draws_are_reproducible(seed in any::<u64>(), k in 1i64..1000, x in -50i64..50, beta in 0.0f64..2.0) {
                let spec = EnvSpec::gaussian(beta).unwrap();
                let key = EnvKey::new(seed, k, vec![x, -x, 3]);
                let (w, e) = weight_and_noise(&spec, &key).unwrap();
                prop_assert_eq!(sample_omega(&spec, &key).unwrap().to_bits(), sample_omega(&spec, &key).unwrap().to_bits());
                prop_assert!(w > 0.0);
                prop_assert_eq!(e, w - 1.0);
            }
        }
    }
}
