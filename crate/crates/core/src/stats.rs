//! Small statistical helpers: log-log slope fits and running moments.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    /// Least-squares slope of `log(error)` against `log(h)`; `None` when
    /// the errors sit at the noise floor and no rate can be read off.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub floor_limited: bool,
}

impl SlopeFit {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.slope.is_some_and(|s| (lo..=hi).contains(&s))
    }

    /// Accepts a slope inside `[lo, hi]` or a floor-limited fit.
    pub fn acceptable(&self, lo: f64, hi: f64) -> bool {
        self.floor_limited || self.within(lo, hi)
    }
}

/// Fits `error ~ C h^p`. Errors at or below `floor` count as floor-limited;
/// if every error is at the floor the slope is omitted.
pub fn fit_loglog_slope(h: &[f64], errors: &[f64], floor: f64) -> SlopeFit {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > floor && e.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return SlopeFit { slope: None, intercept: None, floor_limited: true };
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    SlopeFit {
        slope: Some(slope),
        intercept: Some(my - slope * mx),
        floor_limited: pts.len() < h.len(),
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Sample mean and unbiased variance.
pub fn mean_and_var(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = if n < 2 {
        0.0
    } else {
        samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    (mean, var)
}

/// Empirical quantile by linear interpolation of the sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}
