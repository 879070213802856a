//! Goodness-of-fit tests for weighted samples.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Sample mean and its standard error.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0) / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub effective_n: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test of weighted samples `(x, w)` against
/// `cdf`, using the self-normalized weighted empirical distribution and the
/// effective sample size in the asymptotic p-value.
pub fn weighted_ks(samples: &[(f64, f64)], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if samples.len() < 2 {
        return Err(Error::EmptyEnsemble(samples.len()));
    }
    if samples.iter().any(|&(x, w)| !x.is_finite() || !(w >= 0.0)) {
        return Err(Error::InvalidArgument(
            "samples need finite values and non-negative weights".into(),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = sorted.iter().map(|s| s.1).sum();
    let total_sq: f64 = sorted.iter().map(|s| s.1 * s.1).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let mut acc = 0.0;
    let mut d = 0.0f64;
    for &(x, w) in &sorted {
        let f = cdf(x);
        let before = acc / total;
        acc += w;
        let after = acc / total;
        d = d.max((f - before).abs()).max((after - f).abs());
    }
    let n = total * total / total_sq;
    let sn = n.sqrt();
    let p = kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d);
    Ok(KsResult {
        statistic: d,
        effective_n: n,
        p_value: p,
    })
}

/// Upper tail of the chi-squared distribution.
pub fn chi_square_survival(statistic: f64, dof: usize) -> Result<f64> {
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.sf(statistic))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Weighted histogram of `n` samples: per-bin `sum w` and `sum w^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedHistogram {
    pub n: usize,
    pub sum_w: Vec<f64>,
    pub sum_w2: Vec<f64>,
}

impl WeightedHistogram {
    pub fn new(nbins: usize) -> Self {
        Self {
            n: 0,
            sum_w: vec![0.0; nbins],
            sum_w2: vec![0.0; nbins],
        }
    }

    /// Counts one sample; `bin = None` for samples outside every bin.
    pub fn add(&mut self, bin: Option<usize>, w: f64) {
        self.n += 1;
        if let Some(k) = bin {
            self.sum_w[k] += w;
            self.sum_w2[k] += w * w;
        }
    }

    /// Chi-squared statistic `sum_k (O_k - n p_k)^2 / sum w^2` against bin
    /// probabilities `p_k`. With importance weights the bin totals are not
    /// constrained, so every bin is a degree of freedom.
    pub fn chi_square(&self, probs: &[f64]) -> Result<ChiSquareResult> {
        if probs.len() != self.sum_w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.sum_w.len(),
                found: probs.len(),
            });
        }
        let n = self.n as f64;
        let mut stat = 0.0;
        for ((o, v), p) in self.sum_w.iter().zip(&self.sum_w2).zip(probs) {
            if *v <= 0.0 {
                return Err(Error::InvalidArgument(
                    "every chi-squared bin needs at least one sample".into(),
                ));
            }
            let e = n * p;
            stat += (o - e) * (o - e) / v;
        }
        let dof = probs.len();
        Ok(ChiSquareResult {
            statistic: stat,
            dof,
            p_value: chi_square_survival(stat, dof)?,
        })
    }
}
