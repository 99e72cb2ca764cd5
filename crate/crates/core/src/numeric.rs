//! Small numerical helpers shared by the sweeps and the estimators.

/// Neumaier-compensated running sum. Addition order still matters for the
/// last bit, so callers that need schedule independence sum in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = NeumaierSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_recovers_small_terms() {
        let mut v = vec![1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(v.drain(..)), 2.0);
        let naive: f64 = (0..10_000).map(|_| 0.1).sum();
        let comp = neumaier_sum((0..10_000).map(|_| 0.1));
        assert!((comp - 1000.0).abs() <= (naive - 1000.0).abs());
        assert!((comp - 1000.0).abs() < 1e-12);
    }
}
