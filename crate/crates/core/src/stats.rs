//! Small descriptive-statistics helpers shared by the estimators.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two observations.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Running sums for a single arm of a node.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, y: f64) {
        self.n += 1;
        self.sum += y;
        self.sum_sq += y * y;
    }

    pub fn from_slice(ys: &[f64]) -> Self {
        let mut m = Moments::default();
        ys.iter().for_each(|&y| m.push(y));
        m
    }

    pub fn minus(&self, other: &Moments) -> Moments {
        Moments {
            n: self.n - other.n,
            sum: self.sum - other.sum,
            sum_sq: self.sum_sq - other.sum_sq,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    /// Unbiased variance, clamped at zero against cancellation.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let centered = self.sum_sq - self.sum * self.sum / n;
        (centered / (n - 1.0)).max(0.0)
    }
}

/// `count` evenly spaced empirical quantiles of already sorted data,
/// deduplicated. Interior positions only, so every threshold leaves at
/// least one observation on each side.
pub fn interior_quantiles(sorted: &[f64], count: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut out = Vec::with_capacity(count);
    if n < 2 || count == 0 {
        return out;
    }
    for q in 1..=count {
        let pos = (q * n) / (count + 1);
        let pos = pos.clamp(1, n - 1);
        let t = sorted[pos];
        // a threshold equal to the minimum would leave the left side empty
        if t > sorted[0] && out.last().is_none_or(|&last| t > last) {
            out.push(t);
        }
    }
    out
}
