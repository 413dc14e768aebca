//! The functionals whose densities are estimated: linear functionals of a
//! Brownian driver, additive functionals `Y_T = int_0^T f(X_s) ds - E[...]` of
//! a centered Gaussian process, and one-dimensional SDEs driven by fBm.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::engine::HElement;
use crate::error::{invalid, Error, Result};
use crate::gaussian::{sample_paths_in, CovarianceModel};
use crate::quadrature::{cumulative_trapezoid, pairwise_sum, trapezoid, TimeGrid};
use crate::rng::Domain;
use crate::volterra::KernelMatrix;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type TimeStateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// `F = int h dW` under Brownian driving; `DF = h`.
#[derive(Debug, Clone)]
pub struct LinearFunctionalModel {
    grid: TimeGrid,
    /// `h` on grid points; cell `j` uses `h[j]`.
    h: Vec<f64>,
    sigma: f64,
}

impl LinearFunctionalModel {
    pub fn new(grid: TimeGrid, h: Vec<f64>) -> Result<Self> {
        if h.len() != grid.len() {
            return Err(invalid("h must have one value per grid point"));
        }
        let var = pairwise_sum(
            &(0..grid.n_cells())
                .map(|j| h[j] * h[j] * grid.cell_width(j))
                .collect::<Vec<_>>(),
        );
        Ok(Self {
            sigma: var.sqrt(),
            grid,
            h,
        })
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `||h||`, the exact standard deviation of `F` on the grid.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `(F, DF)` for one path of driver increments.
    pub fn eval(&self, dw: &[f64]) -> Result<(f64, HElement)> {
        let m = self.grid.n_cells();
        if dw.len() != m {
            return Err(invalid(format!("expected {m} increments, got {}", dw.len())));
        }
        let f = pairwise_sum(&(0..m).map(|j| self.h[j] * dw[j]).collect::<Vec<_>>());
        Ok((f, HElement::cells(self.h[..m].to_vec())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convexity {
    Convex,
    Concave,
    Neither,
}

/// `Y_T = int_0^T f(X_s) ds - centering` for a centered Gaussian process `X`.
#[derive(Clone)]
pub struct AdditiveFunctionalModel {
    pub name: String,
    pub f: ScalarFn,
    pub f1: ScalarFn,
    pub f2: ScalarFn,
    /// Asserted lower bound `|f'| >= c`.
    pub c: f64,
    pub convexity: Convexity,
    pub cov: CovarianceModel,
    pub grid: TimeGrid,
    /// `int_0^T E[f(X_s)] ds` (trapezoid).
    pub centering: f64,
    /// `f` is affine, so the centering is known to be `T f(0)`.
    pub affine: bool,
}

impl fmt::Debug for AdditiveFunctionalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdditiveFunctionalModel")
            .field("name", &self.name)
            .field("c", &self.c)
            .field("convexity", &self.convexity)
            .field("cov", &self.cov)
            .field("grid_len", &self.grid.len())
            .field("centering", &self.centering)
            .finish()
    }
}

impl AdditiveFunctionalModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(invalid(format!("derivative floor c must be positive, got {}", self.c)));
        }
        Ok(())
    }

    /// `(Y, DY)` where `DY` has indicator density `f'(X_s)`.
    pub fn eval(&self, path: &[f64]) -> Result<(f64, HElement)> {
        if path.len() != self.grid.len() {
            return Err(invalid("path does not match the model grid"));
        }
        let fx: Vec<f64> = path.iter().map(|x| (self.f)(*x)).collect();
        let y = trapezoid(&fx, &self.grid)? - self.centering;
        let dy: Vec<f64> = path.iter().map(|x| (self.f1)(*x)).collect();
        Ok((y, HElement::indicator(dy)))
    }

    /// Monte Carlo estimate of `int_0^T E[f(X_s)] ds` from a dedicated stream.
    /// Affine `f` gets the exact value `T f(0)`.
    pub fn estimate_centering(&self, n_paths: usize, seed: u64) -> Result<f64> {
        if self.affine {
            return Ok(self.grid.horizon() * (self.f)(0.0));
        }
        if n_paths == 0 {
            return Err(invalid("centering pre-pass needs at least one path"));
        }
        let n = self.grid.len();
        // chunked so memory stays bounded for large pre-pass budgets
        const CHUNK: usize = 20_000;
        let mut sums = vec![0.0; n];
        let mut done = 0;
        let mut chunk_idx = 0u64;
        while done < n_paths {
            let take = CHUNK.min(n_paths - done);
            let ps = sample_paths_in(
                &self.cov,
                &self.grid,
                take,
                seed.wrapping_add(chunk_idx.wrapping_mul(0x9E37_79B9)),
                Domain::Centering,
            )?;
            let partial: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|k| (0..take).map(|i| (self.f)(ps.path(i)[k])).collect())
                .collect();
            for k in 0..n {
                sums[k] += pairwise_sum(&partial[k]);
            }
            done += take;
            chunk_idx += 1;
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n_paths as f64).collect();
        trapezoid(&means, &self.grid)
    }
}

/// `dX = b(t, X) dt + sigma(t, X) dB^H`, `X_0 = x0`, as a pathwise
/// Riemann-Stieltjes equation.
#[derive(Clone)]
pub struct FbmSdeModel {
    pub name: String,
    pub x0: f64,
    pub horizon: f64,
    pub hurst: f64,
    pub b: TimeStateFn,
    pub sigma: TimeStateFn,
    /// `db/dx`
    pub b_x: TimeStateFn,
    /// `dsigma/dt`
    pub sigma_t: TimeStateFn,
    /// `dsigma/dx`
    pub sigma_x: TimeStateFn,
    /// Asserted floor `|sigma| >= c`.
    pub c: f64,
    /// Asserted joint bound on `|m|`, `|m_x sigma|`, `|sigma_x|`.
    pub big_m: f64,
    /// Asserted bound on `|m|` alone (never above `big_m`).
    pub m_bound: f64,
}

impl fmt::Debug for FbmSdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbmSdeModel")
            .field("name", &self.name)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("hurst", &self.hurst)
            .field("c", &self.c)
            .field("big_m", &self.big_m)
            .field("m_bound", &self.m_bound)
            .finish()
    }
}

impl FbmSdeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.5 && self.hurst < 1.0) {
            return Err(invalid(format!("SDE needs H in (1/2, 1), got {}", self.hurst)));
        }
        if !(self.c > 0.0) {
            return Err(invalid(format!("diffusion floor c must be positive, got {}", self.c)));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon must be positive"));
        }
        if self.big_m < 0.0 || self.m_bound < 0.0 {
            return Err(invalid("bounds M must be non-negative"));
        }
        Ok(())
    }

    /// `m(t, x) = b_x - b sigma_x / sigma - sigma_t / sigma`.
    pub fn m_function(&self, t: f64, x: f64) -> Result<f64> {
        self.m_and_sigma(t, x).map(|(m, _)| m)
    }

    fn m_and_sigma(&self, t: f64, x: f64) -> Result<(f64, f64)> {
        let s = (self.sigma)(t, x);
        if !(s.abs() >= self.c) {
            return Err(Error::ModelViolation(format!(
                "|sigma({t}, {x})| = {} is below the asserted floor c = {}",
                s.abs(),
                self.c
            )));
        }
        let m = (self.b_x)(t, x) - (self.b)(t, x) * (self.sigma_x)(t, x) / s - (self.sigma_t)(t, x) / s;
        Ok((m, s))
    }
}

/// Running record of `m` / `sigma` evaluations, for the hypothesis audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub evaluations: u64,
    pub max_abs_m: f64,
    pub min_abs_sigma: f64,
}

impl Default for EvalStats {
    fn default() -> Self {
        Self {
            evaluations: 0,
            max_abs_m: 0.0,
            min_abs_sigma: f64::INFINITY,
        }
    }
}

impl EvalStats {
    pub fn merge(&mut self, other: &EvalStats) {
        self.evaluations += other.evaluations;
        self.max_abs_m = self.max_abs_m.max(other.max_abs_m);
        self.min_abs_sigma = self.min_abs_sigma.min(other.min_abs_sigma);
    }
}

/// `m(t_k, X_k)` for `k` in `from..=to`.
pub(crate) fn m_along(
    model: &FbmSdeModel,
    points: &[f64],
    path: &[f64],
    from: usize,
    to: usize,
    stats: &mut EvalStats,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(to + 1 - from);
    for k in from..=to {
        let (m, s) = model.m_and_sigma(points[k], path[k])?;
        stats.evaluations += 1;
        stats.max_abs_m = stats.max_abs_m.max(m.abs());
        stats.min_abs_sigma = stats.min_abs_sigma.min(s.abs());
        out.push(m);
    }
    Ok(out)
}

/// Slopes of `v -> exp(int_v^{t_to} m du)` on cells `from..to`, given `m`
/// on the points `from..=to`. `None` when `m` vanishes identically.
pub(crate) fn exp_slopes(mvals: &[f64], points: &[f64], from: usize) -> Option<Vec<f64>> {
    if mvals.iter().all(|v| *v == 0.0) {
        return None;
    }
    let to = from + mvals.len() - 1;
    let cum = cumulative_trapezoid(mvals, &points[from..=to]);
    let last = cum[cum.len() - 1];
    let e: Vec<f64> = cum.iter().map(|c| (last - c).exp()).collect();
    Some(
        (0..mvals.len() - 1)
            .map(|r| (e[r + 1] - e[r]) / (points[from + r + 1] - points[from + r]))
            .collect(),
    )
}

/// Left-point Euler scheme for given noise increments `dB` (one per cell).
pub fn solve_with_increments(model: &FbmSdeModel, grid: &TimeGrid, db: &[f64], out: &mut [f64]) -> Result<()> {
    let p = grid.points();
    out[0] = model.x0;
    for k in 0..grid.n_cells() {
        let (t, x) = (p[k], out[k]);
        let next = x + (model.b)(t, x) * (p[k + 1] - t) + (model.sigma)(t, x) * db[k];
        if !next.is_finite() {
            return Err(Error::NumericalBlowup { step: k + 1, value: next });
        }
        out[k + 1] = next;
    }
    Ok(())
}

/// Solves the SDE on the kernel's grid from Brownian increments `dw`.
pub fn sde_solve(model: &FbmSdeModel, kmat: &KernelMatrix, dw: &[f64]) -> Result<Vec<f64>> {
    let grid = kmat.grid();
    if dw.len() != grid.n_cells() {
        return Err(invalid(format!(
            "expected {} increments, got {}",
            grid.n_cells(),
            dw.len()
        )));
    }
    if (kmat.hurst() - model.hurst).abs() > 0.0 {
        return Err(invalid("kernel Hurst parameter differs from the model's"));
    }
    let mut bh = vec![0.0; grid.len()];
    kmat.synthesize(dw, &mut bh);
    let db: Vec<f64> = bh.windows(2).map(|w| w[1] - w[0]).collect();
    let mut out = vec![0.0; grid.len()];
    solve_with_increments(model, grid, &db, &mut out)?;
    Ok(out)
}

/// Cell-averaged `phi(t_i, s)` over each cell `j < i`:
/// `phi(t, s) = int_s^t dK/dt(v, s) exp(int_v^t m(u, X_u) du) dv`.
///
/// Integration by parts in `v` with `exp(...)` linear between grid points gives
/// `phibar(i, j) = Kbar(i, j) - sum_{k=j}^{i-1} slope_k P[j][k]`, where the
/// `P` coefficients are path independent.
pub fn sde_phi(model: &FbmSdeModel, kmat: &KernelMatrix, path: &[f64], t_index: usize) -> Result<(Vec<f64>, EvalStats)> {
    let grid = kmat.grid();
    let p = grid.points();
    let m_cells = grid.n_cells();
    if path.len() != grid.len() || t_index >= grid.len() {
        return Err(invalid("path or time index does not match the kernel grid"));
    }
    let mut stats = EvalStats::default();
    let mvals = m_along(model, p, path, 0, t_index, &mut stats)?;
    let mut phi = vec![0.0; m_cells];
    let row = kmat.row(t_index);
    match exp_slopes(&mvals, p, 0) {
        None => phi[..t_index].copy_from_slice(&row[..t_index]),
        Some(slopes) => {
            let moments = kmat.moments();
            for j in 0..t_index {
                let pj = &moments[j * m_cells..(j + 1) * m_cells];
                let corr: f64 = (j..t_index).map(|k| slopes[k] * pj[k]).sum();
                phi[j] = row[j] - corr;
            }
        }
    }
    Ok((phi, stats))
}

/// Cell-averaged Malliavin derivative `D_s X_t = sigma(t, X_t) phi(t, s)`
/// for `t = t_index`; zero on cells at or after `t`.
pub fn sde_malliavin_derivative(
    model: &FbmSdeModel,
    kmat: &KernelMatrix,
    path: &[f64],
    t_index: usize,
) -> Result<HElement> {
    let (phi, _) = sde_phi(model, kmat, path, t_index)?;
    let t = kmat.grid().points()[t_index];
    let s = (model.sigma)(t, path[t_index]);
    Ok(HElement::cells(phi.into_iter().map(|v| s * v).collect()))
}

pub mod presets {
    //! Named model presets.

    use super::*;

    pub fn linear(grid: TimeGrid) -> Result<LinearFunctionalModel> {
        LinearFunctionalModel::constant(grid, 1.0)
    }

    /// `f(x) = x + e^x`: `f' = 1 + e^x >= 1`, convex.
    pub fn additive_exp(cov: CovarianceModel, grid: TimeGrid) -> AdditiveFunctionalModel {
        AdditiveFunctionalModel {
            name: "additive-exp".into(),
            f: Arc::new(|x| x + x.exp()),
            f1: Arc::new(|x| 1.0 + x.exp()),
            f2: Arc::new(|x| x.exp()),
            c: 1.0,
            convexity: Convexity::Convex,
            cov,
            grid,
            centering: 0.0,
            affine: false,
        }
    }

    /// `f(x) = slope * x`.
    pub fn additive_linear(cov: CovarianceModel, grid: TimeGrid, slope: f64) -> AdditiveFunctionalModel {
        AdditiveFunctionalModel {
            name: "additive-linear".into(),
            f: Arc::new(move |x| slope * x),
            f1: Arc::new(move |_| slope),
            f2: Arc::new(|_| 0.0),
            c: slope.abs(),
            convexity: Convexity::Neither,
            cov,
            grid,
            centering: 0.0,
            affine: true,
        }
    }

    /// `f(x) = x - e^{-x}`: `f' = 1 + e^{-x} >= 1`, concave.
    pub fn additive_concave(cov: CovarianceModel, grid: TimeGrid) -> AdditiveFunctionalModel {
        AdditiveFunctionalModel {
            name: "additive-concave".into(),
            f: Arc::new(|x| x - (-x).exp()),
            f1: Arc::new(|x| 1.0 + (-x).exp()),
            f2: Arc::new(|x| -(-x).exp()),
            c: 1.0,
            convexity: Convexity::Concave,
            cov,
            grid,
            centering: 0.0,
            affine: false,
        }
    }

    /// `b = sigma = 2 + sin x`: `m = 0`, `|sigma| >= 1`, `|sigma_x| <= 1`.
    pub fn sde_sine(hurst: f64, horizon: f64, x0: f64) -> FbmSdeModel {
        FbmSdeModel {
            name: "sde-sine".into(),
            x0,
            horizon,
            hurst,
            b: Arc::new(|_, x| 2.0 + x.sin()),
            sigma: Arc::new(|_, x| 2.0 + x.sin()),
            b_x: Arc::new(|_, x| x.cos()),
            sigma_t: Arc::new(|_, _| 0.0),
            sigma_x: Arc::new(|_, x| x.cos()),
            c: 1.0,
            big_m: 1.0,
            m_bound: 0.0,
        }
    }

    /// `b = drift0 + drift1 x`, `sigma = diff0 + diff1 sin x` with
    /// `c = diff0 - |diff1|`; the bounds `M` are the caller's assertion.
    #[allow(clippy::too_many_arguments)]
    pub fn sde_custom(
        hurst: f64,
        horizon: f64,
        x0: f64,
        drift0: f64,
        drift1: f64,
        diff0: f64,
        diff1: f64,
        big_m: f64,
    ) -> Result<FbmSdeModel> {
        let c = diff0.abs() - diff1.abs();
        if !(c > 0.0) {
            return Err(invalid("sde-custom needs |diff0| > |diff1| so that |sigma| stays away from 0"));
        }
        Ok(FbmSdeModel {
            name: "sde-custom".into(),
            x0,
            horizon,
            hurst,
            b: Arc::new(move |_, x| drift0 + drift1 * x),
            sigma: Arc::new(move |_, x| diff0 + diff1 * x.sin()),
            b_x: Arc::new(move |_, _| drift1),
            sigma_t: Arc::new(|_, _| 0.0),
            sigma_x: Arc::new(move |_, x| diff1 * x.cos()),
            c,
            big_m,
            m_bound: big_m,
        })
    }
}
