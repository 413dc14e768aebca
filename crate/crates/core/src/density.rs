//! Densities from conditional estimates, and Gaussian envelope certificates.

use std::fmt;

use log::warn;

use crate::engine::FunctionalSamples;
use crate::error::{invalid, Error, Result};
use crate::quadrature::{cumulative_trapezoid, pairwise_sum, pairwise_sum_by};
use crate::regression::{mean, nadaraya_watson, silverman_bandwidth, RegressionEstimate};

/// Floor applied to the estimated `g_F` before dividing by it.
pub const G_FLOOR: f64 = 1e-8;
/// Largest tolerated fraction of clamped `g_F` grid points.
pub const MAX_CLAMPED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    NourdinViens,
    NewRepr,
    ClarkOcone,
    Indicator,
    Kde,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::NourdinViens => "nourdin_viens",
            MethodTag::NewRepr => "new_repr",
            MethodTag::ClarkOcone => "clark_ocone",
            MethodTag::Indicator => "indicator",
            MethodTag::Kde => "kde",
        }
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trapezoid rule on an arbitrary increasing grid.
pub fn trapezoid_on(x: &[f64], values: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    pairwise_sum_by(x.len() - 1, |i| 0.5 * (values[i] + values[i + 1]) * (x[i + 1] - x[i]))
}

fn check_grid(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(invalid("evaluation grid is empty"));
    }
    if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("evaluation grid must be finite and strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub method: MethodTag,
    pub x_grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Trapezoid integral over `x_grid`.
    pub mass: f64,
    /// Grid points whose conditional estimate was clamped or flagged.
    pub clamped: usize,
    pub flagged: usize,
    /// Per-point Monte Carlo standard errors, when available.
    pub se: Option<Vec<f64>>,
}

impl DensityEstimate {
    pub fn new(method: MethodTag, x_grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_grid(&x_grid)?;
        if values.len() != x_grid.len() {
            return Err(invalid("density values do not match the grid"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numerical(format!("{method} density has negative or non-finite values")));
        }
        let mass = trapezoid_on(&x_grid, &values);
        Ok(Self {
            method,
            x_grid,
            values,
            mass,
            clamped: 0,
            flagged: 0,
            se: None,
        })
    }

    pub fn mass_ok(&self) -> bool {
        (0.98..=1.02).contains(&self.mass)
    }
}

/// Optional inputs shared by the formula densities.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReconstructionOptions {
    /// Defaults to Silverman on the `F` samples.
    pub bandwidth: Option<f64>,
    /// Replaces the sample mean of `|F|`.
    pub e_abs_f: Option<f64>,
}

/// Grid with 0 inserted (if absent), and the index of 0 in it.
fn with_origin(x_grid: &[f64]) -> (Vec<f64>, usize, bool) {
    match x_grid.iter().position(|x| *x == 0.0) {
        Some(i) => (x_grid.to_vec(), i, false),
        None => {
            let i = x_grid.partition_point(|x| *x < 0.0);
            let mut g = x_grid.to_vec();
            g.insert(i, 0.0);
            (g, i, true)
        }
    }
}

/// `int_0^x integrand` on each grid point, by cumulative trapezoid anchored
/// at 0.
fn integral_from_origin(grid: &[f64], integrand: &[f64], origin: usize) -> Vec<f64> {
    let cum = cumulative_trapezoid(integrand, grid);
    cum.iter().map(|c| c - cum[origin]).collect()
}

fn drop_origin(v: Vec<f64>, origin: usize, inserted: bool) -> Vec<f64> {
    let mut v = v;
    if inserted {
        v.remove(origin);
    }
    v
}

fn regress(samples: &FunctionalSamples, z: &[f64], grid: &[f64], bw: Option<f64>) -> Result<RegressionEstimate> {
    let f = samples.f_values();
    let h = match bw {
        Some(h) => h,
        None => silverman_bandwidth(&f)?,
    };
    nadaraya_watson(&f, z, grid, h)
}

fn flagged_outside(est: &RegressionEstimate, origin: usize, inserted: bool) -> usize {
    est.trusted
        .iter()
        .enumerate()
        .filter(|(i, t)| !(inserted && *i == origin) && !**t)
        .count()
}

/// `rho(x) = E|F| / (2 g(x)) exp(-int_0^x z / g(z) dz)` with
/// `g(x) = E[G | F = x]` estimated by Nadaraya-Watson.
pub fn density_nourdin_viens(
    samples: &FunctionalSamples,
    x_grid: &[f64],
    opts: &ReconstructionOptions,
) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("no samples".into()));
    }
    check_grid(x_grid)?;
    let (grid, origin, inserted) = with_origin(x_grid);
    let est = regress(samples, &samples.g_values(), &grid, opts.bandwidth)?;
    let mut clamped = 0;
    let g: Vec<f64> = est
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if *v < G_FLOOR || !v.is_finite() {
                if !(inserted && i == origin) {
                    clamped += 1;
                }
                G_FLOOR
            } else {
                *v
            }
        })
        .collect();
    if clamped as f64 > MAX_CLAMPED_FRACTION * x_grid.len() as f64 {
        return Err(Error::RegressionFailure(format!(
            "estimated g_F fell below {G_FLOOR:e} at {clamped} of {} grid points",
            x_grid.len()
        )));
    }
    if clamped > 0 {
        warn!("clamped g_F at {clamped} grid points");
    }
    let e_abs = match opts.e_abs_f {
        Some(v) => v,
        None => mean(&samples.f_values().iter().map(|f| f.abs()).collect::<Vec<_>>()),
    };
    let integrand: Vec<f64> = grid.iter().zip(&g).map(|(x, g)| x / g).collect();
    let expo = integral_from_origin(&grid, &integrand, origin);
    let values: Vec<f64> = g.iter().zip(&expo).map(|(g, e)| e_abs / (2.0 * g) * (-e).exp()).collect();
    let mut d = DensityEstimate::new(MethodTag::NourdinViens, x_grid.to_vec(), drop_origin(values, origin, inserted))?;
    d.clamped = clamped;
    d.flagged = flagged_outside(&est, origin, inserted);
    Ok(d)
}

/// `rho(x) = rho(0) exp(-int_0^x (h + w)(z) dz)` with `w = E[F/G | F]`,
/// `h` the conditional h-term, and `rho(0)` fixed by unit mass on `x_grid`.
/// `method` is `NewRepr` (Mehler samples) or `ClarkOcone` (Phi samples).
pub fn density_new_representation(
    samples: &FunctionalSamples,
    x_grid: &[f64],
    opts: &ReconstructionOptions,
    method: MethodTag,
) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("no samples".into()));
    }
    check_grid(x_grid)?;
    let h = samples
        .h_values()
        .ok_or_else(|| invalid("new representation needs h-samples on every record"))?;
    let (grid, origin, inserted) = with_origin(x_grid);
    // w_F(z) = E[F/G | F = z] = z E[1/G | F = z]; regressing 1/G avoids
    // smoothing F against itself
    let inv_g: Vec<f64> = samples.g_values().iter().map(|g| 1.0 / g).collect();
    let w_est = regress(samples, &inv_g, &grid, opts.bandwidth)?;
    let h_est = regress(samples, &h, &grid, Some(w_est.bandwidth))?;
    let integrand: Vec<f64> = (0..grid.len())
        .map(|i| grid[i] * w_est.values[i] + h_est.values[i])
        .collect();
    let expo = integral_from_origin(&grid, &integrand, origin);
    let shape = drop_origin(expo.iter().map(|e| (-e).exp()).collect(), origin, inserted);
    let total = trapezoid_on(x_grid, &shape);
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::RegressionFailure("new-representation shape has no finite mass".into()));
    }
    let mut d = DensityEstimate::new(method, x_grid.to_vec(), shape.iter().map(|s| s / total).collect())?;
    d.flagged = flagged_outside(&w_est, origin, inserted);
    Ok(d)
}

/// `E[1_{F > x} delta]` and its standard error.
pub fn indicator_density(samples: &FunctionalSamples, x: f64) -> Result<(f64, f64)> {
    indicator_mean(samples, |f| f > x, 1.0)
}

/// `-E[1_{F <= x} delta]`: equal in expectation to the upper-tail form since
/// `E[delta] = 0`, with far smaller variance for `x` below the centre.
pub fn indicator_density_lower(samples: &FunctionalSamples, x: f64) -> Result<(f64, f64)> {
    indicator_mean(samples, |f| f <= x, -1.0)
}

fn indicator_mean(samples: &FunctionalSamples, pick: impl Fn(f64) -> bool, sign: f64) -> Result<(f64, f64)> {
    let delta = samples
        .delta_values()
        .ok_or_else(|| invalid("indicator estimator needs delta values on every record"))?;
    let n = delta.len();
    if n < 2 {
        return Err(Error::DegenerateData("indicator estimator needs at least 2 samples".into()));
    }
    let terms: Vec<f64> = samples
        .records()
        .iter()
        .zip(&delta)
        .map(|(r, d)| if pick(r.f) { sign * d } else { 0.0 })
        .collect();
    let m = pairwise_sum(&terms) / n as f64;
    let var = pairwise_sum_by(n, |i| (terms[i] - m).powi(2)) / (n as f64 - 1.0);
    Ok((m, (var / n as f64).sqrt()))
}

/// The indicator estimator on a grid, using the lower-tail form for `x < 0`
/// (samples are centred) and self-normalized by `E[F delta] = 1`, which holds
/// exactly by duality. Negative Monte Carlo values are clipped to zero and
/// counted in `clamped`.
pub fn indicator_density_curve(samples: &FunctionalSamples, x_grid: &[f64]) -> Result<DensityEstimate> {
    check_grid(x_grid)?;
    let delta = samples
        .delta_values()
        .ok_or_else(|| invalid("indicator estimator needs delta values on every record"))?;
    let recs = samples.records();
    let norm = pairwise_sum_by(delta.len(), |i| recs[i].f * delta[i]) / delta.len() as f64;
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateData(format!("sample mean of F delta is {norm}, expected near 1")));
    }
    let pts: Vec<(f64, f64)> = x_grid
        .iter()
        .map(|x| {
            if *x < 0.0 {
                indicator_density_lower(samples, *x)
            } else {
                indicator_density(samples, *x)
            }
        })
        .collect::<Result<_>>()?;
    let clipped = pts.iter().filter(|p| p.0 < 0.0).count();
    let mut d = DensityEstimate::new(
        MethodTag::Indicator,
        x_grid.to_vec(),
        pts.iter().map(|p| p.0.max(0.0) / norm).collect(),
    )?;
    d.clamped = clipped;
    d.se = Some(pts.iter().map(|p| p.1 / norm).collect());
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct BoundCertificate {
    pub sigma_min_sq: f64,
    pub sigma_max_sq: Option<f64>,
    /// `h_F >= m1`
    pub m1: Option<f64>,
    /// `h_F <= m2`
    pub m2: Option<f64>,
    /// `|h_F| <= M_h`
    pub m_h: Option<f64>,
    pub rho0: f64,
    pub e_abs_f: Option<f64>,
}

impl BoundCertificate {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min_sq > 0.0) {
            return Err(invalid("sigma_min^2 must be positive"));
        }
        if let Some(mx) = self.sigma_max_sq {
            if !(mx >= self.sigma_min_sq) {
                return Err(invalid("sigma_max^2 must not be below sigma_min^2"));
            }
        }
        if !(self.rho0 > 0.0) {
            return Err(invalid("rho(0) estimate must be positive"));
        }
        if let Some(m) = self.m_h {
            if m < 0.0 {
                return Err(invalid("M_h must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Lower (and, with `sigma_max^2`, upper) Gaussian envelopes. A side with
/// no h-bound is unconstrained: lower 0, upper infinity.
pub fn gaussian_envelopes(cert: &BoundCertificate, x_grid: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    cert.validate()?;
    if cert.m1.is_none() && cert.m2.is_none() && cert.m_h.is_none() {
        return Err(invalid("envelope needs at least one of m1, m2, M_h"));
    }
    let quad = |x: f64, s2: f64| x * x / (2.0 * s2);
    let lower = x_grid
        .iter()
        .map(|&x| {
            let side = if x <= 0.0 { cert.m1 } else { cert.m2 };
            let mut best: f64 = 0.0;
            if let Some(m) = side {
                best = best.max(cert.rho0 * (-quad(x, cert.sigma_min_sq) - m * x).exp());
            }
            if x == 0.0 && (cert.m1.is_some() || cert.m2.is_some()) {
                best = best.max(cert.rho0);
            }
            if let Some(mh) = cert.m_h {
                best = best.max(cert.rho0 * (-quad(x, cert.sigma_min_sq) - mh * x.abs()).exp());
            }
            best
        })
        .collect();
    let upper = cert.sigma_max_sq.map(|s2| {
        x_grid
            .iter()
            .map(|&x| {
                // -int_0^x h <= -m1 x for x >= 0 and <= -m2 x for x <= 0
                let side = if x >= 0.0 { cert.m1 } else { cert.m2 };
                let mut best = f64::INFINITY;
                if let Some(m) = side {
                    best = best.min(cert.rho0 * (-quad(x, s2) - m * x).exp());
                }
                if let Some(mh) = cert.m_h {
                    best = best.min(cert.rho0 * (-quad(x, s2) + mh * x.abs()).exp());
                }
                best
            })
            .collect()
    });
    Ok((lower, upper))
}

/// `E|F| / (2 s_max) exp(-x^2 / (2 s_min)) <= rho <= E|F| / (2 s_min) exp(-x^2 / (2 s_max))`.
pub fn sandwich_envelopes(
    sigma_min_sq: f64,
    sigma_max_sq: f64,
    e_abs_f: f64,
    x_grid: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma_min_sq > 0.0 && sigma_min_sq <= sigma_max_sq) {
        return Err(invalid("need 0 < sigma_min^2 <= sigma_max^2"));
    }
    if !(e_abs_f > 0.0) {
        return Err(invalid("E|F| must be positive"));
    }
    let lower = x_grid
        .iter()
        .map(|x| e_abs_f / (2.0 * sigma_max_sq) * (-x * x / (2.0 * sigma_min_sq)).exp())
        .collect();
    let upper = x_grid
        .iter()
        .map(|x| e_abs_f / (2.0 * sigma_min_sq) * (-x * x / (2.0 * sigma_max_sq)).exp())
        .collect();
    Ok((lower, upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Violation {
    pub index: usize,
    pub x: f64,
    pub density: f64,
    pub bound: f64,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ViolationReport {
    pub method: MethodTag,
    pub slack: f64,
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Grid points where `density < lower (1 - slack)` or
/// `density > upper (1 + slack)`, in grid order.
pub fn check_envelope(
    density: &DensityEstimate,
    lower: &[f64],
    upper: Option<&[f64]>,
    slack: f64,
) -> Result<ViolationReport> {
    let n = density.x_grid.len();
    if lower.len() != n || upper.is_some_and(|u| u.len() != n) {
        return Err(invalid("envelope does not match the density grid"));
    }
    let mut violations = Vec::new();
    for i in 0..n {
        let (x, d) = (density.x_grid[i], density.values[i]);
        if d < lower[i] * (1.0 - slack) {
            violations.push(Violation {
                index: i,
                x,
                density: d,
                bound: lower[i],
                side: Side::Lower,
            });
        }
        if let Some(u) = upper {
            if d > u[i] * (1.0 + slack) {
                violations.push(Violation {
                    index: i,
                    x,
                    density: d,
                    bound: u[i],
                    side: Side::Upper,
                });
            }
        }
    }
    Ok(ViolationReport {
        method: density.method,
        slack,
        checked: n,
        violations,
    })
}
