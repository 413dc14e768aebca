//! Per-path samples of `G_F = <DF, -DL^{-1}F>`, of the h-term
//! `<DG_F, -DL^{-1}F> / G_F^2`, and of the Clark-Ocone quantity
//! `Phi_F = int D_sF E[D_sF | F_s] ds`.
//!
//! `-DL^{-1}F` is evaluated through the Mehler representation with
//! independent copies of the noise; the conditional expectations in `Phi_F`
//! by nested re-simulation of the future noise.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::gaussian::{galerkin_covariance, sample_paths_in, CovarianceModel};
use crate::models::{exp_slopes, m_along, sde_phi, AdditiveFunctionalModel, EvalStats, FbmSdeModel};
use crate::quadrature::{pairwise_sum, pairwise_sum_by, QuadratureRule, TimeGrid};
use crate::rng::{fill_standard_normal, keyed_stream, Domain};
use crate::volterra::KernelMatrix;

/// Below this `|G|` (or `|Phi|`) a sample is rejected as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// Density `a` of `int_0^T a(s) 1_{[0,s]} ds`, one value per grid point;
    /// paired through the covariance `R`.
    Indicator,
    /// Piecewise constant `L^2[0,T]` function, one value per cell.
    Cells,
}

/// An element of the Hilbert space of the underlying Gaussian process.
#[derive(Debug, Clone, PartialEq)]
pub struct HElement {
    basis: Basis,
    values: Vec<f64>,
}

impl HElement {
    pub fn indicator(values: Vec<f64>) -> Self {
        Self {
            basis: Basis::Indicator,
            values,
        }
    }

    pub fn cells(values: Vec<f64>) -> Self {
        Self {
            basis: Basis::Cells,
            values,
        }
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `L^2` pairing of two cell elements.
    pub fn inner_cells(&self, other: &HElement, grid: &TimeGrid) -> Result<f64> {
        let m = grid.n_cells();
        if self.basis != Basis::Cells || other.basis != Basis::Cells {
            return Err(invalid("L2 pairing needs cell elements"));
        }
        if self.values.len() != m || other.values.len() != m {
            return Err(invalid("cell element does not match the grid"));
        }
        Ok(pairwise_sum_by(m, |j| self.values[j] * other.values[j] * grid.cell_width(j)))
    }
}

/// The covariance operator on nodal values: `<a, b> = a^T A b` with `A` the
/// hat-function Galerkin matrix of `R`, stored as `(R b)_i = sum_j A_ij b_j / w_i`
/// with trapezoid weights `w`, so `<a, b> = sum_i w_i a_i (R b)_i`.
#[derive(Debug, Clone)]
pub struct Gram {
    n: usize,
    weights: Vec<f64>,
    rw: Vec<f64>,
}

impl Gram {
    pub fn new(cov: &CovarianceModel, grid: &TimeGrid) -> Result<Self> {
        let n = grid.len();
        let weights = grid.trapezoid_weights();
        let mut rw = galerkin_covariance(cov, grid)?;
        for i in 0..n {
            for j in 0..n {
                rw[i * n + j] /= weights[i];
            }
        }
        Ok(Self { n, weights, rw })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| pairwise_sum_by(self.n, |j| self.rw[i * self.n + j] * b[j]))
            .collect()
    }

    /// `sum_i w_i a_i rb_i` for a precomputed `rb = R b`.
    pub fn pair(&self, a: &[f64], rb: &[f64]) -> f64 {
        pairwise_sum_by(self.n, |i| self.weights[i] * a[i] * rb[i])
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.n || b.len() != self.n {
            return Err(invalid("element does not match the grid"));
        }
        Ok(self.pair(a, &self.apply(b)))
    }
}

/// `<a, b>`: Galerkin pairing against `R` for indicator elements, plain `L^2`
/// for cell elements.
pub fn h_inner(a: &HElement, b: &HElement, cov: &CovarianceModel, grid: &TimeGrid) -> Result<f64> {
    if a.basis != b.basis {
        return Err(invalid("cannot pair elements of different bases"));
    }
    match a.basis {
        Basis::Cells => a.inner_cells(b, grid),
        Basis::Indicator => Gram::new(cov, grid)?.inner(&a.values, &b.values),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MehlerConfig {
    pub laguerre_nodes: usize,
    pub n_copies: usize,
    pub copy_seed: u64,
}

impl Default for MehlerConfig {
    fn default() -> Self {
        Self {
            laguerre_nodes: crate::quadrature::DEFAULT_LAGUERRE_NODES,
            n_copies: 64,
            copy_seed: 0x5eed_c0de,
        }
    }
}

impl MehlerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.laguerre_nodes == 0 || self.n_copies == 0 {
            return Err(invalid("Mehler node and copy counts must be at least 1"));
        }
        Ok(())
    }
}

/// Nodes `u_q` and weights for `int_0^inf e^{-u} (.) du`, with the
/// interpolation coefficients `e^{-u}` and `sqrt(1 - e^{-2u})`.
#[derive(Debug, Clone, PartialEq)]
pub struct MehlerNodes {
    weights: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl MehlerNodes {
    /// Gauss-Laguerre rule with weights rescaled to sum to one.
    pub fn laguerre(n: usize) -> Result<Self> {
        let rule = QuadratureRule::laguerre(n)?;
        let total = pairwise_sum(rule.weights());
        let weights = rule.weights().iter().map(|w| w / total).collect();
        Ok(Self::from_parts(rule.nodes(), weights))
    }

    /// A single node at `u` with unit weight.
    pub fn single(u: f64) -> Self {
        Self::from_parts(&[u], vec![1.0])
    }

    fn from_parts(nodes: &[f64], weights: Vec<f64>) -> Self {
        let a = nodes.iter().map(|u| (-u).exp()).collect();
        let b = nodes.iter().map(|u| (-(-2.0 * u).exp_m1()).sqrt()).collect();
        Self { weights, a, b }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// One per-path record.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SampleRecord {
    pub f: f64,
    /// `G_F` or `Phi_F`.
    pub g: f64,
    pub w: f64,
    pub h: Option<f64>,
    pub delta: Option<f64>,
    /// Monte Carlo standard error of `g` (nested estimates only).
    pub se: Option<f64>,
}

impl SampleRecord {
    pub fn new(f: f64, g: f64, h: Option<f64>) -> Self {
        let w = f / g;
        Self {
            f,
            g,
            w,
            h,
            delta: h.map(|h| w + h),
            se: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    G,
    Phi,
}

/// Records in path order.
#[derive(Debug, Clone)]
pub struct FunctionalSamples {
    kind: SampleKind,
    records: Vec<SampleRecord>,
}

impl FunctionalSamples {
    pub fn new(kind: SampleKind, records: Vec<SampleRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            check_nonzero(i, if kind == SampleKind::G { "G" } else { "Phi" }, r.g)?;
        }
        Ok(Self { kind, records })
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn f_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.f).collect()
    }

    pub fn g_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.g).collect()
    }

    pub fn w_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.w).collect()
    }

    /// `None` unless every record carries an h-sample.
    pub fn h_values(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.h).collect()
    }

    pub fn delta_values(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.delta).collect()
    }
}

fn check_nonzero(path: usize, quantity: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!("{quantity} on path {path} is not finite")));
    }
    if value.abs() < DEGENERACY_TOL {
        return Err(Error::DegenerateSample { path, quantity, value });
    }
    Ok(())
}

/// Maps `f` over `0..n` in parallel; results are ordered by index and the
/// reported error is the one with the smallest index.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = (0..n).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

/// Everything the additive pipeline produces for one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdditiveSample {
    pub y: f64,
    pub g: f64,
    pub h: f64,
    pub min_abs_fprime: f64,
    pub min_fsecond: f64,
    pub max_fsecond: f64,
}

/// Shared state for the Mehler evaluation of additive functionals: the copy
/// pool (common to every path and node), the Laguerre nodes and the
/// covariance operator.
pub struct AdditiveEngine<'a> {
    model: &'a AdditiveFunctionalModel,
    gram: Gram,
    nodes: MehlerNodes,
    copies: Vec<f64>,
    n_copies: usize,
}

impl<'a> AdditiveEngine<'a> {
    pub fn new(model: &'a AdditiveFunctionalModel, cfg: &MehlerConfig) -> Result<Self> {
        cfg.validate()?;
        let copies = sample_paths_in(&model.cov, &model.grid, cfg.n_copies, cfg.copy_seed, Domain::Copies)?;
        Self::with_copies(model, MehlerNodes::laguerre(cfg.laguerre_nodes)?, copies.values().to_vec())
    }

    /// Explicit nodes and copy pool (row-major `n_copies x n_times`).
    pub fn with_copies(model: &'a AdditiveFunctionalModel, nodes: MehlerNodes, copies: Vec<f64>) -> Result<Self> {
        model.validate()?;
        let n = model.grid.len();
        if copies.is_empty() || !copies.len().is_multiple_of(n) {
            return Err(invalid("copy pool does not match the model grid"));
        }
        if nodes.is_empty() {
            return Err(invalid("Mehler rule needs at least one node"));
        }
        Ok(Self {
            gram: Gram::new(&model.cov, &model.grid)?,
            n_copies: copies.len() / n,
            model,
            nodes,
            copies,
        })
    }

    pub fn gram(&self) -> &Gram {
        &self.gram
    }

    /// `psi(s) = sum_q w_q E'[f'(a_q X_s + b_q X'_s)]` and
    /// `chi(s) = sum_q w_q a_q E'[f''(a_q X_s + b_q X'_s)]`.
    fn psi_chi(&self, path: &[f64], want_chi: bool) -> (Vec<f64>, Vec<f64>) {
        let n = path.len();
        let nc = self.n_copies;
        let mut psi = vec![0.0; n];
        let mut chi = vec![0.0; n];
        let mut buf1 = vec![0.0; nc];
        let mut buf2 = vec![0.0; nc];
        let nq = self.nodes.len();
        let mut q1 = vec![0.0; nq];
        let mut q2 = vec![0.0; nq];
        for s in 0..n {
            let x = path[s];
            for q in 0..nq {
                let (a, b) = (self.nodes.a[q], self.nodes.b[q]);
                for c in 0..nc {
                    let z = a * x + b * self.copies[c * n + s];
                    buf1[c] = (self.model.f1)(z);
                    if want_chi {
                        buf2[c] = (self.model.f2)(z);
                    }
                }
                q1[q] = self.nodes.weights[q] * (pairwise_sum(&buf1) / nc as f64);
                if want_chi {
                    q2[q] = self.nodes.weights[q] * a * (pairwise_sum(&buf2) / nc as f64);
                }
            }
            psi[s] = pairwise_sum(&q1);
            if want_chi {
                chi[s] = pairwise_sum(&q2);
            }
        }
        (psi, chi)
    }

    /// `-DL^{-1}Y` as an indicator element.
    pub fn u_density(&self, path: &[f64]) -> Result<HElement> {
        self.check_path(path)?;
        Ok(HElement::indicator(self.psi_chi(path, false).0))
    }

    fn check_path(&self, path: &[f64]) -> Result<()> {
        if path.len() != self.model.grid.len() {
            return Err(invalid("path does not match the model grid"));
        }
        Ok(())
    }

    /// `Y`, `G` and the h-term for path number `index`.
    pub fn sample(&self, index: usize, path: &[f64]) -> Result<AdditiveSample> {
        self.check_path(path)?;
        let (y, dy) = self.model.eval(path)?;
        let a = dy.values();
        let (psi, chi) = self.psi_chi(path, true);
        let r_psi = self.gram.apply(&psi);
        let g = self.gram.pair(a, &r_psi);
        check_nonzero(index, "G", g)?;
        let r_a = self.gram.apply(a);
        let f2: Vec<f64> = path.iter().map(|x| (self.model.f2)(*x)).collect();
        // density of DG: f''(X_t) (R psi)(t) + chi(t) (R f'(X))(t)
        let dg: Vec<f64> = (0..path.len()).map(|t| f2[t] * r_psi[t] + chi[t] * r_a[t]).collect();
        let h = self.gram.pair(&dg, &r_psi) / (g * g);
        let min_abs_fprime = a.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let (min_fsecond, max_fsecond) = f2
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        Ok(AdditiveSample {
            y,
            g,
            h,
            min_abs_fprime,
            min_fsecond,
            max_fsecond,
        })
    }
}

/// `-DL^{-1}Y_T` for one path with a fresh engine.
pub fn mehler_u_density(
    model: &AdditiveFunctionalModel,
    path: &[f64],
    copies: &[f64],
    cfg: &MehlerConfig,
) -> Result<HElement> {
    AdditiveEngine::with_copies(model, MehlerNodes::laguerre(cfg.laguerre_nodes)?, copies.to_vec())?.u_density(path)
}

/// `G_{Y_T}` for one path.
pub fn g_sample_additive(
    model: &AdditiveFunctionalModel,
    path: &[f64],
    copies: &[f64],
    cfg: &MehlerConfig,
) -> Result<f64> {
    AdditiveEngine::with_copies(model, MehlerNodes::laguerre(cfg.laguerre_nodes)?, copies.to_vec())?
        .sample(0, path)
        .map(|s| s.g)
}

/// The h-term `<DG, -DL^{-1}Y> / G^2` for one path.
pub fn h_term_additive(
    model: &AdditiveFunctionalModel,
    path: &[f64],
    copies: &[f64],
    cfg: &MehlerConfig,
) -> Result<f64> {
    AdditiveEngine::with_copies(model, MehlerNodes::laguerre(cfg.laguerre_nodes)?, copies.to_vec())?
        .sample(0, path)
        .map(|s| s.h)
}

/// `D X_t` (cell averaged) with the evaluation record.
fn sde_derivative(
    model: &FbmSdeModel,
    kmat: &KernelMatrix,
    path: &[f64],
    t_index: usize,
) -> Result<(Vec<f64>, EvalStats)> {
    let (mut phi, stats) = sde_phi(model, kmat, path, t_index)?;
    let t = kmat.grid().points()[t_index];
    let s = (model.sigma)(t, path[t_index]);
    phi.iter_mut().for_each(|v| *v *= s);
    Ok((phi, stats))
}

/// `G` for `F = X_t - E[X_t]` under Brownian driving: `DX_t` paired in
/// `L^2` with its Mehler average over solutions driven by
/// `a_q dW + b_q dW'_c`. `copies_dw` is row-major `n_copies x n_cells`.
pub fn g_sample_sde(
    model: &FbmSdeModel,
    kmat: &KernelMatrix,
    dw: &[f64],
    copies_dw: &[f64],
    nodes: &MehlerNodes,
    t_index: usize,
) -> Result<(f64, EvalStats)> {
    let grid = kmat.grid();
    let m = grid.n_cells();
    if copies_dw.is_empty() || !copies_dw.len().is_multiple_of(m) {
        return Err(invalid("copy increments do not match the grid"));
    }
    let n_copies = copies_dw.len() / m;
    let x = crate::models::sde_solve(model, kmat, dw)?;
    let (d, mut stats) = sde_derivative(model, kmat, &x, t_index)?;
    let mut psi = vec![0.0; m];
    let mut mixed = vec![0.0; m];
    for q in 0..nodes.len() {
        let (a, b) = (nodes.a[q], nodes.b[q]);
        let scale = nodes.weights[q] / n_copies as f64;
        for c in 0..n_copies {
            let cw = &copies_dw[c * m..(c + 1) * m];
            for j in 0..m {
                mixed[j] = a * dw[j] + b * cw[j];
            }
            let xm = crate::models::sde_solve(model, kmat, &mixed)?;
            let (dm, st) = sde_derivative(model, kmat, &xm, t_index)?;
            stats.merge(&st);
            for j in 0..m {
                psi[j] += scale * dm[j];
            }
        }
    }
    let g = pairwise_sum_by(m, |j| d[j] * psi[j] * grid.cell_width(j));
    Ok((g, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NestedConfig {
    pub n_sub: usize,
    pub sub_seed: u64,
    /// Use the path's own future increments instead of fresh draws
    /// (degenerate check configuration).
    pub reuse_actual_future: bool,
}

impl Default for NestedConfig {
    fn default() -> Self {
        Self {
            n_sub: 128,
            sub_seed: 0x00c1_a4c0,
            reuse_actual_future: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiSample {
    /// `X_t` on the main path.
    pub x_t: f64,
    pub phi: f64,
    /// Nested Monte Carlo standard error of `phi`.
    pub se: f64,
    pub stats: EvalStats,
}

/// `Phi = int D_sX_t E[D_sX_t | F_s] ds` on path `path_index`, with the
/// conditional expectation at each cell `s_j` estimated from `n_sub`
/// re-simulations whose increments before `s_j` are frozen.
pub fn phi_clark_ocone(
    model: &FbmSdeModel,
    kmat: &KernelMatrix,
    dw: &[f64],
    t_index: usize,
    cfg: &NestedConfig,
    path_index: usize,
) -> Result<PhiSample> {
    let grid = kmat.grid();
    let p = grid.points();
    let m = grid.n_cells();
    if cfg.n_sub == 0 {
        return Err(invalid("nested sample count must be at least 1"));
    }
    if t_index == 0 || t_index >= grid.len() {
        return Err(invalid("Phi needs a time index in 1..n"));
    }
    let x = crate::models::sde_solve(model, kmat, dw)?;
    let (d, mut stats) = sde_derivative(model, kmat, &x, t_index)?;
    let i = t_index;
    let moments = kmat.moments();

    // prefix[k * m + j] = sum_{l < j} Kbar(k, l) dW_l
    let mut prefix = vec![0.0; grid.len() * (m + 1)];
    for k in 0..=i {
        let row = kmat.row(k);
        let base = k * (m + 1);
        for j in 0..m {
            prefix[base + j + 1] = prefix[base + j] + if j < k { row[j] * dw[j] } else { 0.0 };
        }
    }

    let mut terms = vec![0.0; i];
    let mut se2 = vec![0.0; i];
    let mut fresh = vec![0.0; i];
    let mut sub = x.clone();
    let mut bh = vec![0.0; i + 1];
    let mut samples = vec![0.0; cfg.n_sub];
    for j in 0..i {
        let mut rng = keyed_stream(cfg.sub_seed, Domain::Nested, path_index as u64, j as u64);
        let pj = &moments[j * m..(j + 1) * m];
        // earlier cells overwrote the tail of `sub`
        sub[j] = x[j];
        for r in 0..cfg.n_sub {
            let future = &mut fresh[j..i];
            if cfg.reuse_actual_future {
                future.copy_from_slice(&dw[j..i]);
            } else {
                fill_standard_normal(&mut rng, future);
                for (l, v) in future.iter_mut().enumerate() {
                    *v *= grid.cell_width(j + l).sqrt();
                }
            }
            // B^H on points j..=i; X before and at t_j equals the main path
            for k in j..=i {
                let row = kmat.row(k);
                let mut acc = prefix[k * (m + 1) + j];
                for l in j..k {
                    acc += row[l] * fresh[l];
                }
                bh[k] = acc;
            }
            for k in j..i {
                let (t, xs) = (p[k], sub[k]);
                let next = xs + (model.b)(t, xs) * (p[k + 1] - t) + (model.sigma)(t, xs) * (bh[k + 1] - bh[k]);
                if !next.is_finite() {
                    return Err(Error::NumericalBlowup { step: k + 1, value: next });
                }
                sub[k + 1] = next;
            }
            let mvals = m_along(model, p, &sub, j, i, &mut stats)?;
            let mut phi_j = kmat.avg(i, j);
            if let Some(slopes) = exp_slopes(&mvals, p, j) {
                phi_j -= (j..i).map(|k| slopes[k - j] * pj[k]).sum::<f64>();
            }
            samples[r] = (model.sigma)(p[i], sub[i]) * phi_j;
        }
        let mean = pairwise_sum(&samples) / cfg.n_sub as f64;
        let var = if cfg.n_sub > 1 {
            pairwise_sum_by(cfg.n_sub, |r| (samples[r] - mean).powi(2)) / (cfg.n_sub - 1) as f64
        } else {
            0.0
        };
        let wd = grid.cell_width(j) * d[j];
        terms[j] = wd * mean;
        se2[j] = wd * wd * var / cfg.n_sub as f64;
    }
    let phi = pairwise_sum(&terms);
    check_nonzero(path_index, "Phi", phi)?;
    Ok(PhiSample {
        x_t: x[i],
        phi,
        se: pairwise_sum(&se2).sqrt(),
        stats,
    })
}

/// `M_h = 2 M (1 + T) e^{2 M T} / c`, the analytic bound on the SDE h-term.
pub fn sde_h_bound(model: &FbmSdeModel) -> Result<f64> {
    if !(model.c > 0.0) {
        return Err(invalid(format!("c must be positive, got {}", model.c)));
    }
    let (mm, t) = (model.big_m, model.horizon);
    Ok(2.0 * mm * (1.0 + t) * (2.0 * mm * t).exp() / model.c)
}
