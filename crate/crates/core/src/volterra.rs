//! Volterra kernel of fractional Brownian motion for `H in (1/2, 1)`:
//!
//! `K_H(t, s) = c_H s^{1/2-H} int_s^t (u - s)^{H-3/2} u^{H-1/2} du`,
//! `c_H = sqrt(H (2H - 1) / B(2 - 2H, H - 1/2))`,
//!
//! so that `B^H_t = int_0^t K_H(t, s) dW_s`.
//!
//! On a grid the kernel is used through cell averages
//! `Kbar(i, j) = (1 / dt_j) int_{cell j} K_H(t_i, s) ds`, which keep the
//! variance identity `int_0^t K_H(t, s)^2 ds = t^{2H}` accurate despite the
//! `s^{1/2-H}` singularity at `s = 0`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::gaussian::PathSet;
use crate::quadrature::{QuadratureRule, TimeGrid, DEFAULT_JACOBI_NODES};

const CELL_NODES: usize = 12;
const PANEL_NODES: usize = 12;

/// `c_H` via log-Gamma evaluation of the Beta function.
pub fn c_h_constant(hurst: f64) -> Result<f64> {
    check_hurst(hurst)?;
    let a = 2.0 - 2.0 * hurst;
    let b = hurst - 0.5;
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    Ok((hurst * (2.0 * hurst - 1.0) * (-ln_beta).exp()).sqrt())
}

fn check_hurst(hurst: f64) -> Result<()> {
    if !(hurst > 0.5 && hurst < 1.0) {
        return Err(invalid(format!(
            "Volterra kernel needs H in (1/2, 1), got {hurst}"
        )));
    }
    Ok(())
}

#[derive(Debug)]
struct KernelCore {
    hurst: f64,
    c_h: f64,
    inner: QuadratureRule,
    legendre: QuadratureRule,
    // weights s^{1/2-H}, (t-s)^{H-1/2}, s^{1-2H}, (t-s)^{2H-1}
    left: QuadratureRule,
    right: QuadratureRule,
    left_sq: QuadratureRule,
    right_sq: QuadratureRule,
}

impl KernelCore {
    /// `int_s^t (u - s)^{H-3/2} u^{H-1/2} du` for `0 < s < t`: a Jacobi rule
    /// absorbs the singular end on `[s, min(2s, t)]`, geometric Legendre panels
    /// cover the rest.
    fn inner(&self, t: f64, s: f64) -> f64 {
        let h = self.hurst;
        let split = (2.0 * s).min(t);
        let mut acc = self.inner.integrate_left(s, split, |u| u.powf(h - 0.5));
        let mut a = split;
        while a < t {
            let b = (2.0 * a).min(t);
            let len = b - a;
            acc += len
                * self.legendre.apply(|w| {
                    let u = a + len * w;
                    (u - s).powf(h - 1.5) * u.powf(h - 0.5)
                });
            a = b;
        }
        acc
    }

    fn k(&self, t: f64, s: f64) -> f64 {
        if s >= t {
            return 0.0;
        }
        self.c_h * s.powf(0.5 - self.hurst) * self.inner(t, s)
    }

    fn dt(&self, t: f64, s: f64) -> f64 {
        let h = self.hurst;
        self.c_h * s.powf(0.5 - h) * (t - s).powf(h - 1.5) * t.powf(h - 0.5)
    }

    /// `int_a^b K_H(t, s)^power ds` for `0 <= a < b <= t`, `power` 1 or 2,
    /// with Jacobi rules at the singular ends `s = 0` and `s = t`.
    fn cell_integral(&self, t: f64, a: f64, b: f64, power: i32) -> f64 {
        let h = self.hurst;
        let at_zero = a == 0.0;
        let at_t = b >= t;
        if at_zero && at_t {
            let mid = 0.5 * (a + b);
            return self.cell_integral(t, a, mid, power) + self.cell_integral(t, mid, b, power);
        }
        if at_zero {
            let rule = if power == 1 { &self.left } else { &self.left_sq };
            // K / s^{1/2-H} = c_H * inner
            rule.integrate_left(a, b, |s| (self.c_h * self.inner(t, s)).powi(power))
        } else if at_t {
            let rule = if power == 1 { &self.right } else { &self.right_sq };
            let p = power as f64;
            rule.integrate_right(a, b, |s| self.k(t, s).powi(power) / (t - s).powf(p * (h - 0.5)))
        } else {
            let len = b - a;
            len * self.legendre.apply(|w| self.k(t, a + len * w).powi(power))
        }
    }

    /// `int_{s in [a, b]} int_{v in [c, d], v >= s} K(v, s) dv ds` for a cell
    /// pair with `c >= a`.
    fn cell_pair(&self, a: f64, b: f64, c: f64, d: f64) -> f64 {
        let h = self.hurst;
        let same = c == a;
        let inner_v = |s: f64| -> f64 {
            if same {
                // K(v, s) ~ (v - s)^{H-1/2} as v -> s
                self.right.integrate_left(s, d, |v| self.k(v, s) / (v - s).powf(h - 0.5))
            } else {
                let len = d - c;
                len * self.legendre.apply(|w| self.k(c + len * w, s))
            }
        };
        if a == 0.0 {
            self.left.integrate_left(a, b, |s| inner_v(s) / s.powf(0.5 - h))
        } else {
            let len = b - a;
            len * self.legendre.apply(|w| inner_v(a + len * w))
        }
    }
}

/// The fBm Volterra kernel for one Hurst parameter, with a cache of grid
/// matrices.
#[derive(Debug)]
pub struct VolterraKernel {
    core: Arc<KernelCore>,
    cache: Mutex<HashMap<Vec<u64>, Arc<KernelMatrix>>>,
}

impl VolterraKernel {
    pub fn new(hurst: f64) -> Result<Self> {
        Self::with_jacobi_nodes(hurst, DEFAULT_JACOBI_NODES)
    }

    pub fn with_jacobi_nodes(hurst: f64, jacobi_nodes: usize) -> Result<Self> {
        let c_h = c_h_constant(hurst)?;
        let core = KernelCore {
            hurst,
            c_h,
            inner: QuadratureRule::jacobi(hurst - 1.5, jacobi_nodes)?,
            legendre: QuadratureRule::legendre(PANEL_NODES)?,
            left: QuadratureRule::jacobi(0.5 - hurst, CELL_NODES)?,
            right: QuadratureRule::jacobi(hurst - 0.5, CELL_NODES)?,
            left_sq: QuadratureRule::jacobi(1.0 - 2.0 * hurst, CELL_NODES)?,
            right_sq: QuadratureRule::jacobi(2.0 * hurst - 1.0, CELL_NODES)?,
        };
        Ok(Self {
            core: Arc::new(core),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn hurst(&self) -> f64 {
        self.core.hurst
    }

    pub fn c_h(&self) -> f64 {
        self.core.c_h
    }

    /// `K_H(t, s)` for `0 < s <= t`.
    pub fn kernel(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(invalid(format!("K_H(t, s) needs s > 0, got s = {s}")));
        }
        if s > t {
            return Err(invalid(format!("K_H(t, s) needs s <= t, got s = {s} > t = {t}")));
        }
        Ok(self.core.k(t, s))
    }

    /// `dK_H/dt (t, s) = c_H s^{1/2-H} (t - s)^{H-3/2} t^{H-1/2}` for `0 < s < t`.
    pub fn kernel_dt(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(invalid(format!("dK_H/dt needs s > 0, got s = {s}")));
        }
        if s >= t {
            return Err(invalid(format!("dK_H/dt needs s < t, got s = {s}, t = {t}")));
        }
        Ok(self.core.dt(t, s))
    }

    /// `int_0^t K_H(t, s)^2 ds` over `n_points` equal cells, each integrated by
    /// a Gauss rule (Jacobi at both singular ends).
    pub fn square_integral(&self, t: f64, n_points: usize) -> Result<f64> {
        let grid = TimeGrid::uniform(t, n_points)?;
        let p = grid.points();
        let parts: Vec<f64> = (0..grid.n_cells())
            .map(|j| self.core.cell_integral(t, p[j], p[j + 1], 2))
            .collect();
        Ok(crate::quadrature::pairwise_sum(&parts))
    }

    /// Cell-averaged kernel matrix for `grid`, built once and cached.
    pub fn matrix(&self, grid: &TimeGrid) -> Result<Arc<KernelMatrix>> {
        let key: Vec<u64> = grid.points().iter().map(|p| p.to_bits()).collect();
        if let Some(m) = self.cache.lock().map_err(|_| poisoned())?.get(&key) {
            return Ok(Arc::clone(m));
        }
        let built = Arc::new(KernelMatrix::build(Arc::clone(&self.core), grid));
        let mut cache = self.cache.lock().map_err(|_| poisoned())?;
        let entry = cache.entry(key).or_insert(built);
        Ok(Arc::clone(entry))
    }
}

fn poisoned() -> Error {
    Error::Numerical("kernel cache lock poisoned".into())
}

/// Cell-averaged kernel weights on a fixed grid plus the path-independent
/// coefficients used by the Malliavin derivative of the fBm SDE.
#[derive(Debug)]
pub struct KernelMatrix {
    grid: TimeGrid,
    core: Arc<KernelCore>,
    // row i (time index), column j < i (cell index); row-major n x n_cells
    avg: Vec<f64>,
    // P[j][k] = (1/dt_j) int_{s in cell j} int_{v in cell k, v >= s} K_H(v, s) dv ds
    moments: OnceLock<Vec<f64>>,
}

impl KernelMatrix {
    fn build(core: Arc<KernelCore>, grid: &TimeGrid) -> Self {
        let n = grid.len();
        let m = grid.n_cells();
        let p = grid.points().to_vec();
        let mut avg = vec![0.0; n * m];
        avg.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            for j in 0..i {
                row[j] = core.cell_integral(p[i], p[j], p[j + 1], 1) / (p[j + 1] - p[j]);
            }
        });
        Self {
            grid: grid.clone(),
            core,
            avg,
            moments: OnceLock::new(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> f64 {
        self.core.hurst
    }

    pub fn c_h(&self) -> f64 {
        self.core.c_h
    }

    /// `Kbar(i, j)`; zero for `j >= i`.
    pub fn avg(&self, i: usize, j: usize) -> f64 {
        self.avg[i * self.grid.n_cells() + j]
    }

    /// Row `i` of the averaged kernel (length `n_cells`, zero beyond `i`).
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.grid.n_cells();
        &self.avg[i * m..(i + 1) * m]
    }

    /// `B^H(t_i) = sum_{j < i} Kbar(i, j) dW_j` for one path.
    pub fn synthesize(&self, dw: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..i {
                acc += row[j] * dw[j];
            }
            *o = acc;
        }
    }

    /// Coefficients `P[j][k]` (row-major `n_cells x n_cells`, zero for `k < j`).
    pub fn moments(&self) -> &[f64] {
        self.moments.get_or_init(|| {
            let m = self.grid.n_cells();
            let p = self.grid.points().to_vec();
            let core = &self.core;
            let mut out = vec![0.0; m * m];
            out.par_chunks_mut(m).enumerate().for_each(|(j, row)| {
                let dj = p[j + 1] - p[j];
                for k in j..m {
                    row[k] = core.cell_pair(p[j], p[j + 1], p[k], p[k + 1]) / dj;
                }
            });
            out
        })
    }

    pub fn moment(&self, j: usize, k: usize) -> f64 {
        self.moments()[j * self.grid.n_cells() + k]
    }
}

/// Synthesizes fBm paths from Brownian increments (row-major
/// `n_paths x n_cells`). The increments are retained as the driver.
pub fn fbm_from_bm(kernel: &VolterraKernel, dw: &[f64], grid: &TimeGrid, seed: u64) -> Result<PathSet> {
    let m = grid.n_cells();
    if !dw.len().is_multiple_of(m) {
        return Err(invalid(format!(
            "increment matrix of length {} does not split into rows of {m} cells",
            dw.len()
        )));
    }
    let mat = kernel.matrix(grid)?;
    let n = grid.len();
    let n_paths = dw.len() / m;
    let mut values = vec![0.0; n_paths * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        mat.synthesize(&dw[i * m..(i + 1) * m], row);
    });
    PathSet::new_driven(grid.clone(), values, dw.to_vec(), seed)
}

/// One row of the kernel identity check.
#[derive(Debug, Clone, Copy)]
pub struct KernelIdentityRow {
    pub hurst: f64,
    pub t: f64,
    pub integral: f64,
    pub target: f64,
    pub rel_error: f64,
}

/// `int_0^t K_H(t, s)^2 ds` against `t^{2H}` for each `(H, t)` pair.
pub fn kernel_identity_suite(hursts: &[f64], times: &[f64], n_points: usize) -> Result<Vec<KernelIdentityRow>> {
    let mut rows = Vec::new();
    for &h in hursts {
        let k = VolterraKernel::new(h)?;
        for &t in times {
            let integral = k.square_integral(t, n_points)?;
            let target = t.powf(2.0 * h);
            rows.push(KernelIdentityRow {
                hurst: h,
                t,
                integral,
                target,
                rel_error: (integral - target).abs() / target,
            });
        }
    }
    Ok(rows)
}
