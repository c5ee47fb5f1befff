//! Estimate containers, batch-means errors, weighted statistics, the Hill
//! estimator, and Kolmogorov-Smirnov machinery.

use serde::Serialize;

use crate::error::{Error, Result};

/// A Monte Carlo estimate with its standard error and provenance.
#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: u64,
    pub method: String,
    pub seed: u64,
}

/// Mergeable sufficient statistics `(n, sum, sumsq)` for a scalar sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub n: u64,
    pub sum: f64,
    pub sumsq: f64,
}

impl Accumulator {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sumsq += v * v;
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            n: self.n + other.n,
            sum: self.sum + other.sum,
            sumsq: self.sumsq + other.sumsq,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let m = self.mean();
        ((self.sumsq - self.sum * m) / (self.n as f64 - 1.0)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn estimate(&self, method: &str, seed: u64) -> Estimate {
        Estimate {
            value: self.mean(),
            stderr: self.stderr(),
            n: self.n,
            method: method.to_string(),
            seed,
        }
    }
}

/// Batch-means standard error of the mean with a fixed batch count.
/// Robust to heavy-tailed summands; falls back to the naive stderr when
/// there are fewer values than batches.
pub fn batch_means_stderr(values: &[f64], batches: usize) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n < 2 * batches {
        let mut acc = Accumulator::default();
        for &v in values {
            acc.push(v);
        }
        return acc.stderr();
    }
    let per = n / batches;
    let used = per * batches;
    let mut means = Vec::with_capacity(batches);
    for b in 0..batches {
        let chunk = &values[b * per..(b + 1) * per];
        means.push(chunk.iter().sum::<f64>() / per as f64);
    }
    let _ = used;
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means
        .iter()
        .map(|m| (m - grand) * (m - grand))
        .sum::<f64>()
        / (batches as f64 - 1.0);
    (var / batches as f64).sqrt()
}

/// Weighted mean and (population) variance.
pub fn weighted_mean_var(samples: &[f64], weights: &[f64]) -> (f64, f64) {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples
        .iter()
        .zip(weights)
        .map(|(x, w)| x * w)
        .sum::<f64>()
        / wsum;
    let var = samples
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / wsum;
    (mean, var)
}

/// Effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 <= 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Weighted Hill estimator of a Pareto tail index over the top-`k` order
/// statistics. Uniform weights reduce to the classical estimator
/// `k / sum ln(x_i / x_{(k+1)})`.
pub fn hill(samples: &[f64], weights: &[f64], k: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if k == 0 || k >= samples.len() {
        return Err(Error::Range(format!(
            "hill k = {k} outside (0, n = {})",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&i, &j| samples[j].partial_cmp(&samples[i]).unwrap());
    let x_thr = samples[idx[k]];
    if x_thr <= 0.0 {
        return Err(Error::Range("hill threshold must be positive".into()));
    }
    let mut wsum = 0.0;
    let mut lsum = 0.0;
    for &i in &idx[..k] {
        wsum += weights[i];
        lsum += weights[i] * (samples[i] / x_thr).ln();
    }
    if lsum <= 0.0 {
        return Err(Error::InsufficientTail("degenerate log-spacings".into()));
    }
    Ok(wsum / lsum)
}

/// Weighted Hill estimator at a fixed threshold `u > 0`:
/// `sum w / sum w ln(x/u)` over the exceedances `x >= u`. The Pareto MLE
/// for the tail beyond `u`.
pub fn hill_at_threshold(samples: &[f64], weights: &[f64], u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Range(format!("hill threshold u = {u} must be > 0")));
    }
    let mut wsum = 0.0;
    let mut lsum = 0.0;
    let mut n_tail = 0usize;
    for (x, w) in samples.iter().zip(weights) {
        if *x >= u {
            wsum += w;
            lsum += w * (x / u).ln();
            n_tail += 1;
        }
    }
    if n_tail < 2 || lsum <= 0.0 {
        return Err(Error::InsufficientTail(format!(
            "{n_tail} exceedances above u = {u}"
        )));
    }
    Ok(wsum / lsum)
}

/// One-sample KS statistic against a continuous CDF. `sorted` must be
/// ascending.
pub fn ks_statistic<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Asymptotic KS p-value with the Stephens small-sample correction.
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    if n <= 0.0 || !d.is_finite() {
        return f64::NAN;
    }
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    kolmogorov_sf(lambda)
}

/// Survival function of the Kolmogorov distribution,
/// `Q(l) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 l^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Weighted one-sample KS test against the Pareto(`index`) CDF
/// `F(y) = 1 - y^{-index}` on `[1, inf)`. The p-value uses the effective
/// sample size of the weights.
pub fn pareto_ks(samples: &[f64], weights: &[f64], index: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&i, &j| samples[i].partial_cmp(&samples[j]).unwrap());
    let wsum: f64 = weights.iter().sum();
    let mut cum = 0.0;
    let mut d: f64 = 0.0;
    for &i in &idx {
        let x = samples[i];
        let f = if x <= 1.0 { 0.0 } else { 1.0 - x.powf(-index) };
        let lo = cum / wsum;
        cum += weights[i];
        let hi = cum / wsum;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let n_eff = effective_sample_size(weights);
    Ok((d, ks_pvalue(d, n_eff)))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exp(rate) CDF.
pub fn exp_cdf(x: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        1.0 - (-rate * x).exp()
    }
}
