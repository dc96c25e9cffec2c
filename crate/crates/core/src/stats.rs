//! Small descriptive statistics used by the experiment reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(data: &[f64], q: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("data", "quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("q", format!("must lie in [0, 1], got {q}")));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(data: &[f64]) -> Result<f64> {
    quantile(data, 0.5)
}

pub fn mean(data: &[f64]) -> f64 {
    data.iter().sum::<f64>() / data.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for a single point.
pub fn std_dev(data: &[f64]) -> f64 {
    if data.len() < 2 {
        return 0.0;
    }
    let m = mean(data);
    (data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (data.len() - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(data: &[f64]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("data", "summary of an empty set"));
        }
        let mut sorted = data.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Summary {
            median: quantile_sorted(&sorted, 0.5),
            q1: quantile_sorted(&sorted, 0.25),
            q3: quantile_sorted(&sorted, 0.75),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            mean: mean(&sorted),
        })
    }
}

/// Wilson score interval for `successes` out of `trials` at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("x", "slope needs two or more paired points"));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("x", "abscissae are all equal"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub resamples: usize,
}

/// Slope of `ln(median error)` against `ln h`, with a percentile bootstrap
/// interval obtained by resampling realizations independently at each `h`.
pub fn bootstrap_loglog_slope(
    hs: &[f64],
    errors: &[Vec<f64>],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<SlopeFit> {
    if hs.len() != errors.len() || hs.len() < 2 {
        return Err(Error::invalid("h", "slope fit needs two or more h values"));
    }
    if errors.iter().any(|e| e.is_empty()) {
        return Err(Error::invalid(
            "errors",
            "every h needs at least one realization",
        ));
    }
    let log_h: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let log_med =
        |meds: &[f64]| -> Vec<f64> { meds.iter().map(|m| m.max(f64::MIN_POSITIVE).ln()).collect() };
    let medians: Vec<f64> = errors.iter().map(|e| median(e)).collect::<Result<_>>()?;
    let slope = ols_slope(&log_h, &log_med(&medians))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(resamples);
    let mut buf = Vec::new();
    let mut meds = vec![0.0; hs.len()];
    for _ in 0..resamples {
        for (m, e) in meds.iter_mut().zip(errors) {
            buf.clear();
            buf.extend((0..e.len()).map(|_| e[rng.random_range(0..e.len())]));
            buf.sort_by(f64::total_cmp);
            *m = quantile_sorted(&buf, 0.5);
        }
        slopes.push(ols_slope(&log_h, &log_med(&meds))?);
    }
    slopes.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let (ci_low, ci_high) = if slopes.is_empty() {
        (slope, slope)
    } else {
        (
            quantile_sorted(&slopes, alpha),
            quantile_sorted(&slopes, 1.0 - alpha),
        )
    };
    Ok(SlopeFit {
        slope,
        ci_low,
        ci_high,
        level,
        resamples,
    })
}
