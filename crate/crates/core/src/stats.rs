//! Shared statistics helpers for the Monte Carlo estimators: sample moments,
//! log-mean-exp with jackknife bias diagnostics, and least-squares line fits
//! with both residual-based and propagated standard errors.

/// Arithmetic mean. Panics on empty input.
pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of empty sample");
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for samples of size one.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

/// log(mean(exp(x_i))) computed with a max shift.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "log_mean_exp of empty sample");
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

/// Delta-method standard error of `log(mean(exp(x_i)))`.
pub fn log_mean_exp_se(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let mw = mean(&ws);
    if mw == 0.0 {
        return f64::INFINITY;
    }
    std_error(&ws) / mw
}

/// Jackknife estimate of the bias of `log(mean(exp(x_i)))`.
pub fn log_mean_exp_jackknife_bias(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = ws.iter().sum();
    let full = (total / n as f64).ln();
    let loo_mean = ws
        .iter()
        .map(|w| ((total - w) / (n - 1) as f64).ln())
        .sum::<f64>()
        / n as f64;
    (n - 1) as f64 * (loo_mean - full)
}

/// Ordinary least-squares line fit `y = intercept + slope * t`.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from fit residuals.
    pub slope_se: f64,
}

/// Fit a line by least squares. Needs at least two distinct abscissae.
pub fn fit_line(ts: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(ts.len(), ys.len());
    assert!(ts.len() >= 2, "line fit needs at least two points");
    let n = ts.len() as f64;
    let tbar = mean(ts);
    let ybar = mean(ys);
    let sxx: f64 = ts.iter().map(|t| (t - tbar) * (t - tbar)).sum();
    assert!(sxx > 0.0, "line fit needs distinct abscissae");
    let sxy: f64 = ts
        .iter()
        .zip(ys)
        .map(|(t, y)| (t - tbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * tbar;
    let slope_se = if ts.len() > 2 {
        let ss_res: f64 = ts
            .iter()
            .zip(ys)
            .map(|(t, y)| {
                let r = y - intercept - slope * t;
                r * r
            })
            .sum();
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LineFit {
        slope,
        intercept,
        slope_se,
    }
}

/// Standard error of the OLS slope when each ordinate carries its own
/// standard error: se^2 = sum(w_i^2 se_i^2) with w_i = (t_i - tbar)/Sxx.
pub fn slope_se_propagated(ts: &[f64], ses: &[f64]) -> f64 {
    assert_eq!(ts.len(), ses.len());
    let tbar = mean(ts);
    let sxx: f64 = ts.iter().map(|t| (t - tbar) * (t - tbar)).sum();
    ts.iter()
        .zip(ses)
        .map(|(t, se)| {
            let w = (t - tbar) / sxx;
            w * w * se * se
        })
        .sum::<f64>()
        .sqrt()
}
