//! Gaussian-kernel smoothing: Silverman bandwidth, Nadaraya-Watson
//! conditional means and the KDE baseline density.

use rayon::prelude::*;

use crate::density::{DensityEstimate, MethodTag};
use crate::error::{invalid, Error, Result};
use crate::quadrature::{pairwise_sum, pairwise_sum_by};

/// Points with fewer effective samples than this are flagged.
pub const MIN_EFFECTIVE: f64 = 10.0;

/// Default reporting range, as quantile levels of `F`.
pub const REPORT_QUANTILES: (f64, f64) = (0.005, 0.995);

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Nearest-rank quantile `x_(ceil(p n))` of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn sorted_copy(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn quantiles(samples: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("no samples".into()));
    }
    let s = sorted_copy(samples);
    Ok(levels.iter().map(|p| quantile_sorted(&s, *p)).collect())
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample standard deviation.
pub fn sample_sd(values: &[f64]) -> f64 {
    let m = mean(values);
    let n = values.len();
    (pairwise_sum_by(n, |i| (values[i] - m).powi(2)) / (n as f64 - 1.0)).sqrt()
}

/// `1.06 min(sd, IQR / 1.34) n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateData(format!("bandwidth needs at least 2 samples, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("non-finite sample".into()));
    }
    let sd = sample_sd(samples);
    let s = sorted_copy(samples);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::DegenerateData("samples have zero spread".into()));
    }
    Ok(1.06 * spread * (n as f64).powf(-0.2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionEstimate {
    pub x_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    /// `(sum w)^2 / sum w^2` per grid point.
    pub n_effective: Vec<f64>,
    /// Inside the reporting range with enough effective samples.
    pub trusted: Vec<bool>,
    pub range: (f64, f64),
}

impl RegressionEstimate {
    pub fn flagged_count(&self) -> usize {
        self.trusted.iter().filter(|t| !**t).count()
    }
}

/// Gaussian-kernel weighted mean of `z` given `f` at each grid point.
///
/// Weights are taken relative to the nearest sample, so they never all
/// underflow; far from the data the estimate tends to the nearest samples'
/// values and is flagged.
pub fn nadaraya_watson(f: &[f64], z: &[f64], x_grid: &[f64], bandwidth: f64) -> Result<RegressionEstimate> {
    if f.len() != z.len() {
        return Err(invalid("regression pairs have mismatched lengths"));
    }
    if f.is_empty() {
        return Err(Error::DegenerateData("no regression pairs".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let s = sorted_copy(f);
    let range = (
        quantile_sorted(&s, REPORT_QUANTILES.0),
        quantile_sorted(&s, REPORT_QUANTILES.1),
    );
    let inv2h2 = 0.5 / (bandwidth * bandwidth);
    let per_point: Vec<(f64, f64)> = x_grid
        .par_iter()
        .map(|&x| {
            let d2min = f.iter().fold(f64::INFINITY, |m, fi| m.min((fi - x) * (fi - x)));
            let w: Vec<f64> = f.iter().map(|fi| (-((fi - x) * (fi - x) - d2min) * inv2h2).exp()).collect();
            let sw = pairwise_sum(&w);
            let swz = pairwise_sum_by(w.len(), |i| w[i] * z[i]);
            let sw2 = pairwise_sum_by(w.len(), |i| w[i] * w[i]);
            (swz / sw, sw * sw / sw2)
        })
        .collect();
    let values: Vec<f64> = per_point.iter().map(|p| p.0).collect();
    let n_effective: Vec<f64> = per_point.iter().map(|p| p.1).collect();
    let trusted = x_grid
        .iter()
        .zip(&n_effective)
        .map(|(x, ne)| *x >= range.0 && *x <= range.1 && *ne >= MIN_EFFECTIVE)
        .collect();
    Ok(RegressionEstimate {
        x_grid: x_grid.to_vec(),
        values,
        bandwidth,
        n_effective,
        trusted,
        range,
    })
}

/// Gaussian kernel density estimate.
pub fn kde_density(samples: &[f64], x_grid: &[f64], bandwidth: f64) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("no samples".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let n = samples.len() as f64;
    let values: Vec<f64> = x_grid
        .par_iter()
        .map(|&x| {
            let k = pairwise_sum_by(samples.len(), |i| {
                let u = (x - samples[i]) / bandwidth;
                (-0.5 * u * u).exp()
            });
            k * INV_SQRT_2PI / (n * bandwidth)
        })
        .collect();
    DensityEstimate::new(MethodTag::Kde, x_grid.to_vec(), values)
}
