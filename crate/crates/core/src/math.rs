//! Log-domain arithmetic helpers.

/// Numerically stable `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let max = a.max(b);
    max + ((a - max).exp() + (b - max).exp()).ln()
}

/// Log-sum-exp over a slice. Empty input yields negative infinity.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Maximum over a slice. Empty input yields negative infinity.
pub fn max_slice(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Streaming log-sum-exp with Kahan-compensated accumulation, so the result
/// is independent of summand order to well under 1e-12 even for millions of
/// terms.
#[derive(Debug, Clone, Copy)]
pub struct StreamingLogSumExp {
    max: f64,
    sum: f64,
    compensation: f64,
}

impl Default for StreamingLogSumExp {
    fn default() -> Self {
        StreamingLogSumExp {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            compensation: 0.0,
        }
    }
}

impl StreamingLogSumExp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        if value == f64::NEG_INFINITY {
            return;
        }
        if value > self.max {
            // Rescale the accumulated sum to the new reference point.
            if self.max > f64::NEG_INFINITY {
                let factor = (self.max - value).exp();
                self.sum *= factor;
                self.compensation *= factor;
            }
            self.max = value;
        }
        let term = (value - self.max).exp();
        let y = term - self.compensation;
        let t = self.sum + y;
        self.compensation = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_error(actual: f64, expected: f64, abs_floor: f64) -> f64 {
    let diff = (actual - expected).abs();
    let scale = expected.abs().max(abs_floor);
    diff / scale
}
