//! Estimators for correlated Monte Carlo output and small regressions.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

/// A Monte Carlo estimate with its autocorrelation-aware standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub err: f64,
    pub iact: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            err: 0.0,
            iact: 1.0,
        }
    }

    /// Whether `target` lies within `k` error bars (exact equality counts when `err = 0`).
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.err + 1e-12 * target.abs().max(1.0)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `1/N` normalization.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.len() as f64
}

/// Autocovariance `γ_k` for `k < max_lag`, computed by zero-padded FFT.
pub fn autocovariance(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    if n == 0 {
        return Vec::new();
    }
    let m = mean(xs);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = xs
        .iter()
        .map(|&x| Complex::new(x - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = 1.0 / (size as f64 * n as f64);
    buf.iter()
        .take(max_lag.min(n))
        .map(|c| c.re * scale)
        .collect()
}

/// Integrated autocorrelation time by Geyer's initial monotone positive
/// sequence. Returns at least 1.
pub fn geyer_iact(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let gamma = autocovariance(xs, n);
    let g0 = gamma[0];
    if !(g0 > 0.0) {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < gamma.len() {
        let pair = gamma[2 * k] + gamma[2 * k + 1];
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 1;
    }
    (2.0 * sum / g0 - 1.0).max(1.0)
}

/// Mean of a correlated series with error `sd·√(τ/N)`.
pub fn estimate_mean(xs: &[f64]) -> Estimate {
    let tau = geyer_iact(xs);
    let sd = variance(xs).sqrt();
    Estimate {
        value: mean(xs),
        err: sd * (tau / xs.len() as f64).sqrt(),
        iact: tau,
    }
}

/// Ratio `E[a]/E[b]` of two correlated means, error by the delta method on
/// the linearized series `a - r·b`.
pub fn estimate_ratio(a: &[f64], b: &[f64]) -> Estimate {
    let (ma, mb) = (mean(a), mean(b));
    let r = ma / mb;
    let lin: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - r * y) / mb).collect();
    let e = estimate_mean(&lin);
    Estimate {
        value: r,
        err: e.err,
        iact: e.iact,
    }
}

/// Two-sided 95% Student-t quantile.
pub fn t975(dof: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179,
        2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
        2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    match dof {
        0 => f64::INFINITY,
        d if d <= 30 => TABLE[d - 1],
        _ => 1.96,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_err: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_ci: f64,
}

/// Ordinary least squares `y ≈ a + b x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    weighted_linear_fit(x, y, &vec![1.0; x.len()], true)
}

/// Weighted least squares. With `scale_by_residuals` the slope error uses the
/// residual variance (OLS convention); otherwise the weights are taken as
/// inverse variances.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64], scale_by_residuals: bool) -> LinearFit {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (a - mx) * (c - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = x.len().saturating_sub(2);
    let slope_err = if scale_by_residuals {
        let rss: f64 = x
            .iter()
            .zip(y)
            .zip(w)
            .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
            .sum();
        if dof == 0 {
            0.0
        } else {
            (rss / dof as f64 / sxx).sqrt()
        }
    } else {
        (1.0 / sxx).sqrt()
    };
    let q = if scale_by_residuals { t975(dof) } else { 1.96 };
    LinearFit {
        slope,
        intercept,
        slope_err,
        slope_ci: q * slope_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn autocovariance_matches_direct_sum() {
        let xs: Vec<f64> = (0..200).map(|k| ((k * 37 % 11) as f64).sin()).collect();
        let g = autocovariance(&xs, 10);
        let m = mean(&xs);
        for (lag, gl) in g.iter().enumerate() {
            let direct: f64 = (0..xs.len() - lag)
                .map(|t| (xs[t] - m) * (xs[t + lag] - m))
                .sum::<f64>()
                / xs.len() as f64;
            assert_abs_diff_eq!(*gl, direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn iact_of_ar1_process() {
        // AR(1) with coefficient a has τ = (1+a)/(1-a).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in [0.0, 0.5, 0.9] {
            let mut x = 0.0;
            let xs: Vec<f64> = (0..400_000)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x = a * x + z;
                    x
                })
                .collect();
            let tau = geyer_iact(&xs);
            let exact = (1.0 + a) / (1.0 - a);
            assert!((tau - exact).abs() < 0.08 * exact, "a={a}: {tau} vs {exact}");
        }
    }

    #[test]
    fn iact_is_at_least_one() {
        let xs: Vec<f64> = (0..1000).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(geyer_iact(&xs), 1.0);
        assert_eq!(geyer_iact(&[1.0; 50]), 1.0);
    }

    #[test]
    fn fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 - 2.0 * v).collect();
        let f = linear_fit(&x, &y);
        assert_abs_diff_eq!(f.slope, -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, 0.5, epsilon = 1e-12);
        assert!(f.slope_err < 1e-10);
    }
}
