//! Centered Gaussian processes on a time grid: covariance models, path
//! sampling and the double integral `sigma_T^2 = int int R(s, v) ds dv`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::quadrature::TimeGrid;
use crate::rng::{fill_standard_normal, stream, Domain};

pub type CovarianceFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum CovarianceModel {
    Brownian,
    Fbm { hurst: f64 },
    Custom { name: String, cov: CovarianceFn },
}

impl fmt::Debug for CovarianceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceModel::Brownian => write!(f, "Brownian"),
            CovarianceModel::Fbm { hurst } => write!(f, "Fbm {{ hurst: {hurst} }}"),
            CovarianceModel::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl CovarianceModel {
    pub fn fbm(hurst: f64) -> Result<Self> {
        check_hurst(hurst)?;
        Ok(CovarianceModel::Fbm { hurst })
    }

    pub fn covariance(&self, s: f64, t: f64) -> f64 {
        match self {
            CovarianceModel::Brownian => s.min(t),
            CovarianceModel::Fbm { hurst } => fbm_cov_unchecked(s, t, *hurst),
            CovarianceModel::Custom { cov, .. } => cov(s, t),
        }
    }

    pub fn name(&self) -> String {
        match self {
            CovarianceModel::Brownian => "brownian".into(),
            CovarianceModel::Fbm { hurst } => format!("fbm(H={hurst})"),
            CovarianceModel::Custom { name, .. } => format!("custom({name})"),
        }
    }
}

fn check_hurst(hurst: f64) -> Result<()> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(invalid(format!("Hurst parameter must lie in (0, 1), got {hurst}")));
    }
    Ok(())
}

fn fbm_cov_unchecked(s: f64, t: f64, hurst: f64) -> f64 {
    let h2 = 2.0 * hurst;
    0.5 * (s.powf(h2) + t.powf(h2) - (t - s).abs().powf(h2))
}

/// `R(s, t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2`.
pub fn fbm_covariance(s: f64, t: f64, hurst: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if s < 0.0 || t < 0.0 {
        return Err(invalid("fBm covariance needs non-negative times"));
    }
    Ok(fbm_cov_unchecked(s, t, hurst))
}

/// Covariance matrix of the process on the grid points.
pub fn covariance_matrix(cov: &CovarianceModel, grid: &TimeGrid) -> Vec<Vec<f64>> {
    let p = grid.points();
    p.iter()
        .map(|&s| p.iter().map(|&t| cov.covariance(s, t)).collect())
        .collect()
}

/// Dense lower-triangular factor of the covariance restricted to the grid
/// points with positive variance (`first..n`).
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    first: usize,
    dim: usize,
    // packed row-major lower triangle
    lower: Vec<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn first_index(&self) -> usize {
        self.first
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.lower[i * (i + 1) / 2 + j]
        }
    }

    /// `out[first + i] = sum_j L[i][j] z[j]`; entries before `first` are zero.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        for v in out[..self.first].iter_mut() {
            *v = 0.0;
        }
        for i in 0..self.dim {
            let row = &self.lower[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            let mut acc = 0.0;
            for (l, zj) in row.iter().zip(z) {
                acc += l * zj;
            }
            out[self.first + i] = acc;
        }
    }

    fn try_factor(mat: &[Vec<f64>], first: usize, jitter: f64) -> std::result::Result<Self, usize> {
        let dim = mat.len() - first;
        let mut lower = vec![0.0; dim * (dim + 1) / 2];
        for i in 0..dim {
            let ri = i * (i + 1) / 2;
            for j in 0..=i {
                let rj = j * (j + 1) / 2;
                let mut acc = mat[first + i][first + j];
                if i == j {
                    acc += jitter;
                }
                for k in 0..j {
                    acc -= lower[ri + k] * lower[rj + k];
                }
                if i == j {
                    if !(acc > 0.0) {
                        return Err(i + 1);
                    }
                    lower[ri + i] = acc.sqrt();
                } else {
                    lower[ri + j] = acc / lower[rj + j];
                }
            }
        }
        Ok(Self {
            first,
            dim,
            lower,
            jitter,
        })
    }

    /// Factorizes with escalating diagonal jitter: none, then `1e-12` and
    /// `1e-11` times the largest diagonal entry.
    pub fn factor(mat: &[Vec<f64>], first: usize) -> Result<Self> {
        let max_diag = (first..mat.len()).map(|i| mat[i][i]).fold(0.0f64, f64::max);
        let mut minor = 0;
        let mut jitter = 0.0;
        for scale in [0.0, 1e-12, 1e-11] {
            jitter = scale * max_diag;
            match Self::try_factor(mat, first, jitter) {
                Ok(f) => {
                    if jitter > 0.0 {
                        log::warn!("covariance factorization needed jitter {jitter:e}");
                    }
                    return Ok(f);
                }
                Err(m) => minor = first + m,
            }
        }
        Err(Error::NumericDegeneracy { minor, jitter })
    }
}

#[derive(Debug, Clone)]
pub enum PathSource {
    /// `X = L Z` with `Z` drawn from stream `(seed, Paths, path)`.
    Cholesky(Arc<CholeskyFactor>),
    /// Cumulative sums of the stored driver increments.
    Driver,
}

/// A batch of sampled paths on a common grid.
#[derive(Debug, Clone)]
pub struct PathSet {
    grid: TimeGrid,
    n_paths: usize,
    values: Vec<f64>,
    driver_increments: Option<Vec<f64>>,
    seed: u64,
    source: PathSource,
}

impl PathSet {
    pub fn new_driven(grid: TimeGrid, values: Vec<f64>, increments: Vec<f64>, seed: u64) -> Result<Self> {
        let n_times = grid.len();
        if !values.len().is_multiple_of(n_times) || increments.len() != (values.len() / n_times) * grid.n_cells() {
            return Err(invalid("path/increment matrix shapes do not match the grid"));
        }
        Ok(Self {
            n_paths: values.len() / n_times,
            grid,
            values,
            driver_increments: Some(increments),
            seed,
            source: PathSource::Driver,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source(&self) -> &PathSource {
        &self.source
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.n_times();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn increments(&self, i: usize) -> Option<&[f64]> {
        let m = self.grid.n_cells();
        self.driver_increments.as_ref().map(|d| &d[i * m..(i + 1) * m])
    }

    pub fn has_driver(&self) -> bool {
        self.driver_increments.is_some()
    }

    /// Regenerates the standard normal innovations of a Cholesky-sampled path.
    pub fn innovations(&self, i: usize) -> Option<Vec<f64>> {
        match &self.source {
            PathSource::Cholesky(f) => {
                let mut z = vec![0.0; f.dim()];
                fill_standard_normal(&mut stream(self.seed, Domain::Paths, i as u64), &mut z);
                Some(z)
            }
            PathSource::Driver => None,
        }
    }
}

/// Brownian increments `dW_j ~ N(0, dt_j)` for `n_paths` paths, path `i` from
/// stream `(seed, domain, i)`. Row-major `n_paths x n_cells`.
pub fn brownian_increments(grid: &TimeGrid, n_paths: usize, seed: u64, domain: Domain) -> Vec<f64> {
    let m = grid.n_cells();
    let sq: Vec<f64> = (0..m).map(|j| grid.cell_width(j).sqrt()).collect();
    let mut out = vec![0.0; n_paths * m];
    if m == 0 {
        return out;
    }
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        fill_standard_normal(&mut stream(seed, domain, i as u64), row);
        for (v, s) in row.iter_mut().zip(&sq) {
            *v *= s;
        }
    });
    out
}

/// Samples `n_paths` i.i.d. centered Gaussian paths with covariance `cov` on
/// `grid`. Brownian motion is sampled through its increments (which are kept);
/// other models through a dense Cholesky factor of the grid covariance with
/// the zero-variance point `t = 0` pinned to 0.
pub fn sample_paths(cov: &CovarianceModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    sample_paths_in(cov, grid, n_paths, seed, Domain::Paths)
}

pub(crate) fn sample_paths_in(
    cov: &CovarianceModel,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    domain: Domain,
) -> Result<PathSet> {
    let n = grid.len();
    if let CovarianceModel::Brownian = cov {
        let inc = brownian_increments(grid, n_paths, seed, domain);
        let m = grid.n_cells();
        let mut values = vec![0.0; n_paths * n];
        values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let d = &inc[i * m..(i + 1) * m];
            row[0] = 0.0;
            for j in 0..m {
                row[j + 1] = row[j] + d[j];
            }
        });
        let mut ps = PathSet::new_driven(grid.clone(), values, inc, seed)?;
        ps.n_paths = n_paths;
        return Ok(ps);
    }

    let mat = covariance_matrix(cov, grid);
    for (i, row) in mat.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("covariance is {v} at ({i}, {j})")));
            }
        }
    }
    let first = if mat[0][0] == 0.0 { 1 } else { 0 };
    let factor = Arc::new(CholeskyFactor::factor(&mat, first)?);
    let mut values = vec![0.0; n_paths * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let mut z = vec![0.0; factor.dim()];
        fill_standard_normal(&mut stream(seed, domain, i as u64), &mut z);
        factor.apply(&z, row);
    });
    Ok(PathSet {
        grid: grid.clone(),
        n_paths,
        values,
        driver_increments: None,
        seed,
        source: PathSource::Cholesky(factor),
    })
}

/// `sigma_T^2` together with the smallest covariance entry on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaT {
    pub value: f64,
    /// Smallest covariance entry on the grid (for the `R >= 0` hypothesis).
    pub min_covariance: f64,
}

const CELL_RULE_NODES: usize = 8;

/// `A_ij = int int phi_i(s) phi_j(v) R(s, v) ds dv` for the hat functions
/// `phi_i` of `grid`, row-major `n x n`.
///
/// Pairs of distinct cells use a tensor Gauss rule; a cell paired with itself
/// is split along the diagonal into two triangles so the kink of `R` at
/// `s = v` sits on the boundary of each piece. All entries are nonnegative
/// when `R >= 0`, and `sum_ij A_ij` is the double integral of `R`.
pub fn galerkin_covariance(cov: &CovarianceModel, grid: &TimeGrid) -> Result<Vec<f64>> {
    let rule = crate::quadrature::QuadratureRule::legendre(CELL_RULE_NODES)?;
    let (x, w) = (rule.nodes(), rule.weights());
    let p = grid.points();
    let n = p.len();
    let m = n - 1;
    // (cell k, cell l >= k) -> 2x2 block of hat-piece integrals
    let blocks: Vec<(usize, usize, [[f64; 2]; 2])> = (0..m)
        .into_par_iter()
        .flat_map_iter(|k| (k..m).map(move |l| (k, l)))
        .map(|(k, l)| {
            let (a, da) = (p[k], p[k + 1] - p[k]);
            let (b, db) = (p[l], p[l + 1] - p[l]);
            let mut acc = [[0.0; 2]; 2];
            let mut add = |u: f64, v: f64, wt: f64| {
                // u, v are unit-interval positions inside cells k and l
                let r = wt * cov.covariance(a + da * u, b + db * v);
                let pu = [1.0 - u, u];
                let pv = [1.0 - v, v];
                for i in 0..2 {
                    for j in 0..2 {
                        acc[i][j] += pu[i] * pv[j] * r;
                    }
                }
            };
            if k != l {
                for (xi, wi) in x.iter().zip(w) {
                    for (xj, wj) in x.iter().zip(w) {
                        add(*xi, *xj, wi * wj);
                    }
                }
                for row in acc.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= da * db;
                    }
                }
            } else {
                // triangles u < v and u > v, each mapped from the unit square
                for (xi, wi) in x.iter().zip(w) {
                    for (yj, wj) in x.iter().zip(w) {
                        let wt = wi * wj * yj;
                        add(yj * xi, *yj, wt);
                        add(*yj, yj * xi, wt);
                    }
                }
                for row in acc.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= da * da;
                    }
                }
            }
            (k, l, acc)
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for (k, l, acc) in &blocks {
        for i in 0..2 {
            for j in 0..2 {
                out[(k + i) * n + l + j] += acc[i][j];
                if k != l {
                    out[(l + j) * n + k + i] += acc[i][j];
                }
            }
        }
    }
    Ok(out)
}

/// `sigma_T^2 = int_0^T int_0^T R(s, v) ds dv`, integrated cell by cell
/// (exact for piecewise-polynomial `R` such as Brownian motion's).
pub fn sigma_t_squared(cov: &CovarianceModel, grid: &TimeGrid) -> SigmaT {
    let p = grid.points();
    let n = p.len();
    let min_cov = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| cov.covariance(p[i], p[j]))
        .fold(f64::INFINITY, f64::min);
    let a = galerkin_covariance(cov, grid).expect("a fixed-size Legendre rule always exists");
    SigmaT {
        value: crate::quadrature::pairwise_sum(&a),
        min_covariance: min_cov,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn fbm_covariance_examples() {
        assert_relative_eq!(fbm_covariance(0.7, 0.7, 0.3).unwrap(), 0.7f64.powf(0.6), epsilon = 1e-15);
        assert_relative_eq!(fbm_covariance(0.3, 0.8, 0.5).unwrap(), 0.3, epsilon = 1e-15);
        assert_relative_eq!(fbm_covariance(1.0, 2.0, 0.75).unwrap(), 2f64.sqrt(), epsilon = 1e-14);
        assert!(fbm_covariance(1.0, 1.0, 1.0).is_err());
        assert!(fbm_covariance(1.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn fbm_covariance_symmetric(s in 0.0f64..5.0, t in 0.0f64..5.0, h in 0.01f64..0.99) {
            prop_assert_eq!(fbm_covariance(s, t, h).unwrap(), fbm_covariance(t, s, h).unwrap());
        }

        #[test]
        fn fbm_covariance_nonnegative_above_half(s in 0.0f64..3.0, t in 0.0f64..3.0, h in 0.5f64..0.99) {
            prop_assert!(fbm_covariance(s, t, h).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn empty_path_set() {
        let g = TimeGrid::uniform(1.0, 5).unwrap();
        let ps = sample_paths(&CovarianceModel::fbm(0.7).unwrap(), &g, 0, 1).unwrap();
        assert_eq!(ps.n_paths(), 0);
        let ps = sample_paths(&CovarianceModel::Brownian, &g, 0, 1).unwrap();
        assert_eq!(ps.n_paths(), 0);
    }

    fn sample_var(xs: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = xs.collect();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn brownian_terminal_variance() {
        let g = TimeGrid::uniform(1.0, 17).unwrap();
        let ps = sample_paths(&CovarianceModel::Brownian, &g, 10_000, 11).unwrap();
        let v = sample_var((0..ps.n_paths()).map(|i| ps.path(i)[16]));
        assert!((0.94..=1.06).contains(&v), "{v}");
        assert!(ps.has_driver());
    }

    #[test]
    fn fbm_terminal_variance() {
        let g = TimeGrid::uniform(1.0, 17).unwrap();
        let ps = sample_paths(&CovarianceModel::fbm(0.75).unwrap(), &g, 10_000, 12).unwrap();
        let v = sample_var((0..ps.n_paths()).map(|i| ps.path(i)[16]));
        assert!((v - 1.0).abs() <= 0.06, "{v}");
        assert!((0..ps.n_paths()).all(|i| ps.path(i)[0] == 0.0));
    }

    #[test]
    fn brownian_empirical_covariance_within_five_se() {
        let g = TimeGrid::uniform(1.0, 6).unwrap();
        let n = 100_000;
        let ps = sample_paths(&CovarianceModel::Brownian, &g, n, 5).unwrap();
        let p = g.points();
        for a in 1..6 {
            for b in a..6 {
                let est = (0..n).map(|i| ps.path(i)[a] * ps.path(i)[b]).sum::<f64>() / n as f64;
                let r = p[a].min(p[b]);
                let se = ((p[a] * p[b] + r * r) / n as f64).sqrt();
                assert!((est - r).abs() < 5.0 * se, "({a},{b}) {est} vs {r}");
            }
        }
    }

    #[test]
    fn cholesky_reconstruction_is_exact() {
        let g = TimeGrid::uniform(1.0, 9).unwrap();
        let ps = sample_paths(&CovarianceModel::fbm(0.6).unwrap(), &g, 4, 3).unwrap();
        let PathSource::Cholesky(f) = ps.source() else {
            panic!("expected Cholesky source")
        };
        for i in 0..4 {
            let z = ps.innovations(i).unwrap();
            let mut x = vec![0.0; 9];
            f.apply(&z, &mut x);
            assert_eq!(x.as_slice(), ps.path(i));
        }
    }

    #[test]
    fn sampling_is_thread_count_independent() {
        let g = TimeGrid::uniform(1.0, 12).unwrap();
        let cov = CovarianceModel::fbm(0.8).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample_paths(&cov, &g, 257, 9).unwrap());
        let b = many.install(|| sample_paths(&cov, &g, 257, 9).unwrap());
        assert_eq!(a.values(), b.values());
        // a prefix of a larger batch is the same batch
        let c = sample_paths(&cov, &g, 300, 9).unwrap();
        assert_eq!(a.values(), &c.values()[..257 * 12]);
    }

    #[test]
    fn factorization_failure_names_minor() {
        // indefinite on {0, 0.5, 1}: the third leading minor is negative
        let cov = CovarianceModel::Custom {
            name: "indefinite".into(),
            cov: Arc::new(|s, t| 1.0 - (s - t) * (s - t)),
        };
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        let err = sample_paths(&cov, &g, 2, 1).unwrap_err();
        assert!(matches!(err, Error::NumericDegeneracy { minor: 3, .. }), "{err}");
    }

    #[test]
    fn sigma_t_examples() {
        let g = TimeGrid::uniform(1.0, 201).unwrap();
        let s = sigma_t_squared(&CovarianceModel::Brownian, &g);
        assert!((s.value - 1.0 / 3.0).abs() < 1e-14);
        let coarse = sigma_t_squared(&CovarianceModel::Brownian, &TimeGrid::uniform(1.0, 5).unwrap());
        assert!((coarse.value - 1.0 / 3.0).abs() < 1e-14);
        assert_eq!(s.min_covariance, 0.0);

        let tiny = TimeGrid::uniform(1e-9, 3).unwrap();
        assert!(sigma_t_squared(&CovarianceModel::Brownian, &tiny).value < 1e-26);

        let cov = CovarianceModel::fbm(0.75).unwrap();
        let coarse = sigma_t_squared(&cov, &TimeGrid::uniform(1.0, 101).unwrap()).value;
        let fine = sigma_t_squared(&cov, &TimeGrid::uniform(1.0, 1001).unwrap()).value;
        assert!((coarse - fine).abs() < 1e-3, "{coarse} vs {fine}");
        // closed form: int int R = T^{2H+2} / (2H + 2)
        assert!((fine - 1.0 / 3.5).abs() < 1e-4);
    }
}
