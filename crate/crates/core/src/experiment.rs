//! Config-driven experiments: model -> samples -> densities -> certificates,
//! with CSV/JSON outputs that are byte-identical for identical configs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_covariance, Audit, AuditRecord, HypothesisId};
use crate::density::{
    check_envelope, density_new_representation, density_nourdin_viens, gaussian_envelopes,
    indicator_density_curve, BoundCertificate, DensityEstimate, MethodTag, ReconstructionOptions, ViolationReport,
};
use crate::engine::{
    par_map_indexed, phi_clark_ocone, sde_h_bound, AdditiveEngine, FunctionalSamples, Gram, MehlerConfig,
    NestedConfig, SampleKind, SampleRecord, DEGENERACY_TOL,
};
use crate::error::{Error, Result};
use crate::gaussian::{brownian_increments, sample_paths, sigma_t_squared, CovarianceModel};
use crate::models::{
    presets, sde_solve, AdditiveFunctionalModel, Convexity, FbmSdeModel, LinearFunctionalModel,
};
use crate::quadrature::{pairwise_sum, TimeGrid};
use crate::regression::{kde_density, mean, quantile_sorted, sample_sd, silverman_bandwidth, sorted_copy, REPORT_QUANTILES};
use crate::rng::Domain;
use crate::volterra::VolterraKernel;

pub const SCHEMA_VERSION: u32 = 1;

/// Relative rounding allowance on quadrature-level inequalities.
const ROUNDING_REL: f64 = 1e-12;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Linear,
    AdditiveExp,
    AdditiveLinear,
    AdditiveConcave,
    SdeSine,
    SdeCustom,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Linear,
        Preset::AdditiveExp,
        Preset::AdditiveLinear,
        Preset::AdditiveConcave,
        Preset::SdeSine,
        Preset::SdeCustom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Linear => "linear",
            Preset::AdditiveExp => "additive-exp",
            Preset::AdditiveLinear => "additive-linear",
            Preset::AdditiveConcave => "additive-concave",
            Preset::SdeSine => "sde-sine",
            Preset::SdeCustom => "sde-custom",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Preset::Linear => "F = int h dW with h = sigma / sqrt(T); exact N(0, sigma^2) baseline",
            Preset::AdditiveExp => "Y_T = int f(X_s) ds, f(x) = x + e^x (convex, c = 1)",
            Preset::AdditiveLinear => "Y_T = int f(X_s) ds, f(x) = slope * x (default slope 2)",
            Preset::AdditiveConcave => "Y_T = int f(X_s) ds, f(x) = x - e^{-x} (concave, c = 1)",
            Preset::SdeSine => "fBm SDE with b = sigma = 2 + sin x (m = 0, c = 1, M = 1)",
            Preset::SdeCustom => "fBm SDE with b = drift0 + drift1 x, sigma = diff0 + diff1 sin x",
        }
    }

    fn is_sde(&self) -> bool {
        matches!(self, Preset::SdeSine | Preset::SdeCustom)
    }
}

/// Numeric parameters; which ones apply depends on the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    /// Overrides the preset's asserted floor `c`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hurst: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diff0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diff1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CovarianceSpec {
    #[default]
    Brownian,
    Fbm {
        hurst: f64,
    },
}

impl CovarianceSpec {
    pub fn model(&self) -> Result<CovarianceModel> {
        match self {
            CovarianceSpec::Brownian => Ok(CovarianceModel::Brownian),
            CovarianceSpec::Fbm { hurst } => CovarianceModel::fbm(*hurst).map_err(|e| config_err(e.to_string())),
        }
    }
}

fn default_laguerre() -> usize {
    crate::quadrature::DEFAULT_LAGUERRE_NODES
}
fn default_copies() -> usize {
    64
}
fn default_n_sub() -> usize {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MehlerSpec {
    #[serde(default = "default_laguerre")]
    pub laguerre_nodes: usize,
    #[serde(default = "default_copies")]
    pub n_copies: usize,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copy_seed: Option<u64>,
}

impl Default for MehlerSpec {
    fn default() -> Self {
        Self {
            laguerre_nodes: default_laguerre(),
            n_copies: default_copies(),
            copy_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestedSpec {
    #[serde(default = "default_n_sub")]
    pub n_sub: usize,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_seed: Option<u64>,
}

impl Default for NestedSpec {
    fn default() -> Self {
        Self {
            n_sub: default_n_sub(),
            sub_seed: None,
        }
    }
}

fn default_points() -> usize {
    201
}

/// An evaluation grid for densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GridSpec {
    /// `[q_0.001 - 3 h, q_0.999 + 3 h]` of the KDE samples.
    Auto {
        #[serde(default = "default_points")]
        points: usize,
    },
    Range {
        min: f64,
        max: f64,
        points: usize,
    },
    /// Between two sample quantiles.
    Quantile {
        lo: f64,
        hi: f64,
        points: usize,
    },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto {
            points: default_points(),
        }
    }
}

impl GridSpec {
    fn resolve(&self, sorted: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
        let (a, b, n) = match *self {
            GridSpec::Auto { points } => (
                quantile_sorted(sorted, 0.001) - 3.0 * bandwidth,
                quantile_sorted(sorted, 0.999) + 3.0 * bandwidth,
                points,
            ),
            GridSpec::Range { min, max, points } => (min, max, points),
            GridSpec::Quantile { lo, hi, points } => {
                if !(0.0 < lo && lo < hi && hi < 1.0) {
                    return Err(config_err("quantile grid needs 0 < lo < hi < 1"));
                }
                (quantile_sorted(sorted, lo), quantile_sorted(sorted, hi), points)
            }
        };
        if n < 2 || !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(config_err(format!("grid [{a}, {b}] with {n} points is not usable")));
        }
        Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
    }
}

fn default_grid_points() -> usize {
    65
}
fn default_horizon() -> f64 {
    1.0
}
fn default_slack() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: Preset,
    #[serde(default)]
    pub params: ModelParams,
    pub n_paths: usize,
    /// Time grid points (cells + 1).
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub seed: u64,
    /// Covariance of `X` for the additive presets.
    #[serde(default)]
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub mehler: MehlerSpec,
    #[serde(default)]
    pub nested: NestedSpec,
    #[serde(default)]
    pub x_grid: GridSpec,
    /// Grid for the envelope check; defaults depend on the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_grid: Option<GridSpec>,
    #[serde(default = "default_slack")]
    pub slack: f64,
    /// Paths used for the KDE baseline (at least `n_paths`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde_paths: Option<usize>,
    /// Pre-pass paths for the additive centering (default `10 n_paths`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centering_paths: Option<usize>,
    /// Shared regression bandwidth (default Silverman on `F`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Also check the formula densities against the envelope.
    #[serde(default)]
    pub check_formula_densities: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// A ready-to-run config for `preset` with `n_paths` paths.
    pub fn preset(preset: Preset, n_paths: usize, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset,
            params: ModelParams::default(),
            n_paths,
            grid_points: default_grid_points(),
            horizon: 1.0,
            seed,
            covariance: CovarianceSpec::Brownian,
            mehler: MehlerSpec::default(),
            nested: NestedSpec::default(),
            x_grid: GridSpec::default(),
            check_grid: None,
            slack: default_slack(),
            kde_paths: None,
            centering_paths: None,
            bandwidth: None,
            check_formula_densities: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_paths < 2 {
            return Err(config_err("n_paths must be at least 2"));
        }
        if self.grid_points < 2 {
            return Err(config_err("grid_points must be at least 2"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config_err("horizon must be positive"));
        }
        if self.mehler.laguerre_nodes == 0 || self.mehler.n_copies == 0 || self.nested.n_sub == 0 {
            return Err(config_err("Mehler and nested counts must be positive"));
        }
        if !(self.slack >= 0.0 && self.slack < 1.0) {
            return Err(config_err("slack must lie in [0, 1)"));
        }
        if self.kde_paths.is_some_and(|k| k < self.n_paths) {
            return Err(config_err("kde_paths must be at least n_paths"));
        }
        if self.centering_paths == Some(0) {
            return Err(config_err("centering_paths must be positive"));
        }
        if self.bandwidth.is_some_and(|b| !(b > 0.0)) {
            return Err(config_err("bandwidth must be positive"));
        }
        let sde_only = [self.params.hurst, self.params.x0, self.params.big_m];
        if !self.preset.is_sde() && sde_only.iter().any(|p| p.is_some()) {
            return Err(config_err("hurst/x0/big_m apply to the SDE presets only"));
        }
        if self.preset != Preset::SdeCustom
            && [self.params.drift0, self.params.drift1, self.params.diff0, self.params.diff1]
                .iter()
                .any(|p| p.is_some())
        {
            return Err(config_err("drift/diffusion coefficients apply to sde-custom only"));
        }
        if self.params.sigma.is_some() && self.preset != Preset::Linear {
            return Err(config_err("sigma applies to the linear preset only"));
        }
        if self.params.slope.is_some() && self.preset != Preset::AdditiveLinear {
            return Err(config_err("slope applies to additive-linear only"));
        }
        Ok(())
    }

    fn kde_paths(&self) -> usize {
        self.kde_paths.unwrap_or(self.n_paths).max(self.n_paths)
    }
}

/// Scalar diagnostics; absent entries do not apply to the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n_paths: usize,
    pub kde_paths: usize,
    pub bandwidth: f64,
    pub kde_bandwidth: f64,
    pub reporting_range: (f64, f64),
    pub e_abs_f: f64,
    pub mean_f: f64,
    pub sd_f: f64,
    pub rho0_kde: f64,
    pub g_min: f64,
    pub g_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_t_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centering: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_x_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_h: Option<f64>,
}

/// The envelope check against one density on the check grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeCheck {
    pub density: DensityEstimate,
    pub lower: Vec<f64>,
    pub upper: Option<Vec<f64>>,
    pub report: ViolationReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Pass,
    EnvelopeViolation,
    HypothesisBreach,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::EnvelopeViolation => 2,
            Outcome::HypothesisBreach => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: Option<ExperimentConfig>,
    pub x_grid: Vec<f64>,
    /// Ordered by method tag.
    pub densities: Vec<DensityEstimate>,
    pub lower_env: Option<Vec<f64>>,
    pub upper_env: Option<Vec<f64>>,
    pub certificate: Option<BoundCertificate>,
    pub certificate_issued: bool,
    pub checks: Vec<EnvelopeCheck>,
    pub audits: Vec<AuditRecord>,
    pub diagnostics: Diagnostics,
    pub samples: Option<FunctionalSamples>,
    /// Runtime in seconds per stage (not part of the emitted files).
    pub timings: Vec<(String, f64)>,
}

impl ExperimentReport {
    pub fn empty() -> Self {
        Self {
            config: None,
            x_grid: Vec::new(),
            densities: Vec::new(),
            lower_env: None,
            upper_env: None,
            certificate: None,
            certificate_issued: false,
            checks: Vec::new(),
            audits: Vec::new(),
            diagnostics: Diagnostics::default(),
            samples: None,
            timings: Vec::new(),
        }
    }

    pub fn density(&self, method: MethodTag) -> Option<&DensityEstimate> {
        self.densities.iter().find(|d| d.method == method)
    }

    pub fn audit(&self, id: HypothesisId) -> Option<&AuditRecord> {
        self.audits.iter().find(|a| a.id == id)
    }

    pub fn outcome(&self) -> Outcome {
        if self.audits.iter().any(|a| !a.passed()) || (self.certificate.is_some() && !self.certificate_issued) {
            Outcome::HypothesisBreach
        } else if self.checks.iter().any(|c| !c.report.passed()) {
            Outcome::EnvelopeViolation
        } else {
            Outcome::Pass
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.outcome().exit_code()
    }
}

/// Per-preset output of the sampling stage.
struct Sampled {
    samples: FunctionalSamples,
    kde_f: Vec<f64>,
    audit: Audit,
    cert: BoundCertificate,
    linked: Vec<HypothesisId>,
    default_check: GridSpec,
    formula_densities: bool,
    diagnostics: Diagnostics,
}

fn central_check() -> GridSpec {
    GridSpec::Quantile {
        lo: 0.05,
        hi: 0.95,
        points: 21,
    }
}

fn time_grid(cfg: &ExperimentConfig) -> Result<TimeGrid> {
    TimeGrid::uniform(cfg.horizon, cfg.grid_points).map_err(|e| config_err(e.to_string()))
}

fn sample_linear(cfg: &ExperimentConfig) -> Result<Sampled> {
    let grid = time_grid(cfg)?;
    let sigma = cfg.params.sigma.unwrap_or(1.0);
    if !(sigma > 0.0) {
        return Err(config_err("sigma must be positive"));
    }
    if cfg.params.c.is_some() {
        return Err(config_err("c does not apply to the linear preset"));
    }
    let model = LinearFunctionalModel::constant(grid.clone(), sigma / cfg.horizon.sqrt())?;
    let m = grid.n_cells();
    let n_kde = cfg.kde_paths();
    let dw = brownian_increments(&grid, n_kde, cfg.seed, Domain::Driver);
    let (_, df) = model.eval(&vec![0.0; m])?;
    // G = <DF, -DL^{-1}F> = ||h||^2 for a first-chaos functional
    let var = df.inner_cells(&df, &grid)?;
    let records = par_map_indexed(cfg.n_paths, |i| {
        let (f, df) = model.eval(&dw[i * m..(i + 1) * m])?;
        Ok(SampleRecord::new(f, df.inner_cells(&df, &grid)?, Some(0.0)))
    })?;
    let kde_f = par_map_indexed(n_kde, |i| model.eval(&dw[i * m..(i + 1) * m]).map(|r| r.0))?;
    let mut audit = Audit::new(&[HypothesisId::GFloor]);
    for r in &records {
        audit.observe(HypothesisId::GFloor, r.g - var);
    }
    Ok(Sampled {
        samples: FunctionalSamples::new(SampleKind::G, records)?,
        kde_f,
        audit,
        cert: BoundCertificate {
            sigma_min_sq: var,
            sigma_max_sq: Some(var),
            m1: Some(0.0),
            m2: Some(0.0),
            ..Default::default()
        },
        linked: vec![HypothesisId::GFloor],
        default_check: central_check(),
        formula_densities: true,
        diagnostics: Diagnostics::default(),
    })
}

fn additive_model(cfg: &ExperimentConfig, grid: &TimeGrid, cov: CovarianceModel) -> Result<AdditiveFunctionalModel> {
    let mut model = match cfg.preset {
        Preset::AdditiveExp => presets::additive_exp(cov, grid.clone()),
        Preset::AdditiveLinear => presets::additive_linear(cov, grid.clone(), cfg.params.slope.unwrap_or(2.0)),
        Preset::AdditiveConcave => presets::additive_concave(cov, grid.clone()),
        _ => unreachable!("not an additive preset"),
    };
    if let Some(c) = cfg.params.c {
        model.c = c;
    }
    model.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(model)
}

fn sample_additive(cfg: &ExperimentConfig) -> Result<Sampled> {
    let grid = time_grid(cfg)?;
    let cov = cfg.covariance.model()?;
    let mut model = additive_model(cfg, &grid, cov.clone())?;
    let t0 = Instant::now();
    model.centering = model.estimate_centering(cfg.centering_paths.unwrap_or(10 * cfg.n_paths), cfg.seed)?;
    info!("centering pre-pass: {:.2}s", t0.elapsed().as_secs_f64());

    let n_kde = cfg.kde_paths();
    let paths = sample_paths(&cov, &grid, n_kde, cfg.seed)?;
    let mehler = MehlerConfig {
        laguerre_nodes: cfg.mehler.laguerre_nodes,
        n_copies: cfg.mehler.n_copies,
        copy_seed: cfg.mehler.copy_seed.unwrap_or(cfg.seed),
    };
    let engine = AdditiveEngine::new(&model, &mehler)?;
    let t0 = Instant::now();
    let samples = par_map_indexed(cfg.n_paths, |i| engine.sample(i, paths.path(i)))?;
    info!("Mehler samples: {:.2}s", t0.elapsed().as_secs_f64());
    let kde_f = par_map_indexed(n_kde, |i| model.eval(paths.path(i)).map(|r| r.0))?;

    // sigma_T^2 through the same weighted Gram as G, so the floor is exact
    let gram: &Gram = engine.gram();
    let ones = vec![1.0; grid.len()];
    let sigma2 = gram.inner(&ones, &ones)?;
    let floor = model.c * model.c * sigma2;

    let affine_like = model.affine;
    let mut ids = vec![
        HypothesisId::CovarianceNonnegative,
        HypothesisId::FprimeFloor,
        HypothesisId::GFloor,
        HypothesisId::FsecondSign,
    ];
    let (m1, m2) = match (model.convexity, affine_like) {
        (_, true) => (Some(0.0), Some(0.0)),
        (Convexity::Convex, _) => (Some(0.0), None),
        (Convexity::Concave, _) => (None, Some(0.0)),
        (Convexity::Neither, _) => (None, None),
    };
    if !affine_like && model.convexity != Convexity::Neither {
        ids.push(HypothesisId::HSign);
    }
    let mut audit = Audit::new(&ids);
    audit.insert(audit_covariance(&cov, &grid));
    let h: Vec<f64> = samples.iter().map(|s| s.h).collect();
    let h_se = sample_sd(&h) / (h.len() as f64).sqrt();
    for s in &samples {
        audit.observe(HypothesisId::FprimeFloor, s.min_abs_fprime - model.c);
        audit.observe(HypothesisId::GFloor, s.g - floor * (1.0 - ROUNDING_REL));
        let sign_margin = match (affine_like, model.convexity) {
            (true, _) => -s.min_fsecond.abs().max(s.max_fsecond.abs()),
            (false, Convexity::Convex) => s.min_fsecond,
            (false, Convexity::Concave) => -s.max_fsecond,
            (false, Convexity::Neither) => 0.0,
        };
        audit.observe(HypothesisId::FsecondSign, sign_margin);
        match model.convexity {
            Convexity::Convex => audit.observe(HypothesisId::HSign, s.h + 3.0 * h_se),
            Convexity::Concave => audit.observe(HypothesisId::HSign, 3.0 * h_se - s.h),
            Convexity::Neither => {}
        }
    }
    let records = samples.iter().map(|s| SampleRecord::new(s.y, s.g, Some(s.h))).collect();
    let default_check = match (affine_like, model.convexity) {
        (false, Convexity::Convex) => GridSpec::Range {
            min: -2.0,
            max: 0.0,
            points: 21,
        },
        (false, Convexity::Concave) => GridSpec::Range {
            min: 0.0,
            max: 2.0,
            points: 21,
        },
        _ => central_check(),
    };
    let mut linked = ids.clone();
    linked.retain(|id| *id != HypothesisId::HSign || m1.is_some() || m2.is_some());
    Ok(Sampled {
        samples: FunctionalSamples::new(SampleKind::G, records)?,
        kde_f,
        audit,
        cert: BoundCertificate {
            sigma_min_sq: floor,
            m1,
            m2,
            ..Default::default()
        },
        linked,
        default_check,
        formula_densities: true,
        diagnostics: Diagnostics {
            sigma_t_sq: Some(sigma_t_squared(&cov, &grid).value),
            centering: Some(model.centering),
            h_min: Some(h.iter().cloned().fold(f64::INFINITY, f64::min)),
            h_max: Some(h.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
            ..Default::default()
        },
    })
}

fn sde_model(cfg: &ExperimentConfig) -> Result<FbmSdeModel> {
    let p = &cfg.params;
    let hurst = p.hurst.unwrap_or(0.75);
    let x0 = p.x0.unwrap_or(0.0);
    let mut model = match cfg.preset {
        Preset::SdeSine => {
            let mut m = presets::sde_sine(hurst, cfg.horizon, x0);
            if let Some(bm) = p.big_m {
                m.big_m = bm;
            }
            m
        }
        Preset::SdeCustom => {
            let need = |v: Option<f64>, name: &str| v.ok_or_else(|| config_err(format!("sde-custom needs params.{name}")));
            presets::sde_custom(
                hurst,
                cfg.horizon,
                x0,
                need(p.drift0, "drift0")?,
                need(p.drift1, "drift1")?,
                need(p.diff0, "diff0")?,
                need(p.diff1, "diff1")?,
                need(p.big_m, "big_m")?,
            )
            .map_err(|e| config_err(e.to_string()))?
        }
        _ => unreachable!("not an SDE preset"),
    };
    if let Some(c) = p.c {
        model.c = c;
    }
    model.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(model)
}

fn sample_sde(cfg: &ExperimentConfig) -> Result<Sampled> {
    let grid = time_grid(cfg)?;
    let model = sde_model(cfg)?;
    let kernel = VolterraKernel::new(model.hurst)?;
    let kmat = kernel.matrix(&grid)?;
    let m = grid.n_cells();
    let last = grid.len() - 1;
    let n_kde = cfg.kde_paths();
    let dw = brownian_increments(&grid, n_kde, cfg.seed, Domain::Driver);
    let t0 = Instant::now();
    let x_t = par_map_indexed(n_kde, |i| sde_solve(&model, &kmat, &dw[i * m..(i + 1) * m]).map(|x| x[last]))?;
    let mean_x_t = mean(&x_t);
    let nested = NestedConfig {
        n_sub: cfg.nested.n_sub,
        sub_seed: cfg.nested.sub_seed.unwrap_or(cfg.seed),
        reuse_actual_future: false,
    };
    let phis = par_map_indexed(cfg.n_paths, |i| {
        phi_clark_ocone(&model, &kmat, &dw[i * m..(i + 1) * m], last, &nested, i)
    })?;
    info!("nested Clark-Ocone samples: {:.2}s", t0.elapsed().as_secs_f64());

    let t = grid.horizon();
    let sigma_min_sq = model.c * model.c * (-2.0 * model.m_bound * t).exp() * t.powf(2.0 * model.hurst);
    let ids = [
        HypothesisId::SigmaFloor,
        HypothesisId::MBound,
        HypothesisId::PhiNonzero,
        HypothesisId::PhiFloor,
    ];
    let mut audit = Audit::new(&ids);
    for p in &phis {
        audit.observe(HypothesisId::SigmaFloor, p.stats.min_abs_sigma - model.c);
        audit.observe(HypothesisId::MBound, model.m_bound + 1e-12 - p.stats.max_abs_m);
        audit.observe(HypothesisId::PhiNonzero, p.phi.abs() - DEGENERACY_TOL);
        audit.observe(HypothesisId::PhiFloor, p.phi - (sigma_min_sq - 3.0 * p.se));
    }
    let records: Vec<SampleRecord> = phis
        .iter()
        .map(|p| SampleRecord {
            se: Some(p.se),
            ..SampleRecord::new(p.x_t - mean_x_t, p.phi, None)
        })
        .collect();
    let kde_f = x_t.iter().map(|x| x - mean_x_t).collect();
    let m_h = sde_h_bound(&model)?;
    Ok(Sampled {
        samples: FunctionalSamples::new(SampleKind::Phi, records)?,
        kde_f,
        audit,
        cert: BoundCertificate {
            sigma_min_sq,
            m_h: Some(m_h),
            ..Default::default()
        },
        linked: ids.to_vec(),
        default_check: central_check(),
        formula_densities: false,
        diagnostics: Diagnostics {
            c_h: Some(kmat.c_h()),
            mean_x_t: Some(mean_x_t),
            m_h: Some(m_h),
            se_max: Some(phis.iter().map(|p| p.se).fold(0.0, f64::max)),
            ..Default::default()
        },
    })
}

/// Runs `cfg` on a dedicated pool of `threads` workers (default: rayon's
/// global pool). Results do not depend on the thread count.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentReport> {
    match threads {
        None => run_experiment(cfg),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
            pool.install(|| run_experiment(cfg))
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timings = Vec::new();
    let sampled = match cfg.preset {
        Preset::Linear => sample_linear(cfg)?,
        Preset::AdditiveExp | Preset::AdditiveLinear | Preset::AdditiveConcave => sample_additive(cfg)?,
        Preset::SdeSine | Preset::SdeCustom => sample_sde(cfg)?,
    };
    timings.push(("sampling".to_string(), start.elapsed().as_secs_f64()));
    let t0 = Instant::now();
    let Sampled {
        samples,
        kde_f,
        audit,
        mut cert,
        linked,
        default_check,
        formula_densities,
        mut diagnostics,
    } = sampled;

    let f = samples.f_values();
    let bandwidth = match cfg.bandwidth {
        Some(b) => b,
        None => silverman_bandwidth(&f)?,
    };
    let kde_bandwidth = silverman_bandwidth(&kde_f)?;
    let kde_sorted = sorted_copy(&kde_f);
    let x_grid = cfg.x_grid.resolve(&kde_sorted, kde_bandwidth)?;
    let f_sorted = sorted_copy(&f);

    let opts = ReconstructionOptions {
        bandwidth: Some(bandwidth),
        e_abs_f: None,
    };
    let mut densities = Vec::new();
    if formula_densities {
        densities.push(density_nourdin_viens(&samples, &x_grid, &opts)?);
        if samples.h_values().is_some() {
            let tag = match samples.kind() {
                SampleKind::G => MethodTag::NewRepr,
                SampleKind::Phi => MethodTag::ClarkOcone,
            };
            densities.push(density_new_representation(&samples, &x_grid, &opts, tag)?);
        }
        if samples.delta_values().is_some() {
            densities.push(indicator_density_curve(&samples, &x_grid)?);
        }
    }
    densities.push(kde_density(&kde_f, &x_grid, kde_bandwidth)?);
    densities.sort_by_key(|d| d.method);

    let rho0 = kde_density(&kde_f, &[0.0], kde_bandwidth)?.values[0];
    let e_abs_f = mean(&f.iter().map(|v| v.abs()).collect::<Vec<_>>());
    cert.rho0 = rho0;
    cert.e_abs_f = Some(e_abs_f);
    let certificate_issued = audit.gate(&linked) && cert.validate().is_ok();

    let mut checks = Vec::new();
    let (mut lower_env, mut upper_env) = (None, None);
    if certificate_issued {
        let (lo, up) = gaussian_envelopes(&cert, &x_grid)?;
        let check_x = cfg.check_grid.unwrap_or(default_check).resolve(&kde_sorted, kde_bandwidth)?;
        let (clo, cup) = gaussian_envelopes(&cert, &check_x)?;
        let kde_check = kde_density(&kde_f, &check_x, kde_bandwidth)?;
        let report = check_envelope(&kde_check, &clo, cup.as_deref(), cfg.slack)?;
        checks.push(EnvelopeCheck {
            density: kde_check,
            lower: clo,
            upper: cup,
            report,
        });
        if cfg.check_formula_densities {
            for d in densities.iter().filter(|d| d.method != MethodTag::Kde) {
                let report = check_envelope(d, &lo, up.as_deref(), cfg.slack)?;
                checks.push(EnvelopeCheck {
                    density: d.clone(),
                    lower: lo.clone(),
                    upper: up.clone(),
                    report,
                });
            }
        }
        lower_env = Some(lo);
        upper_env = up;
    }

    let g = samples.g_values();
    diagnostics.n_paths = cfg.n_paths;
    diagnostics.kde_paths = kde_f.len();
    diagnostics.bandwidth = bandwidth;
    diagnostics.kde_bandwidth = kde_bandwidth;
    diagnostics.reporting_range = (
        quantile_sorted(&f_sorted, REPORT_QUANTILES.0),
        quantile_sorted(&f_sorted, REPORT_QUANTILES.1),
    );
    diagnostics.e_abs_f = e_abs_f;
    diagnostics.mean_f = pairwise_sum(&f) / f.len() as f64;
    diagnostics.sd_f = sample_sd(&f);
    diagnostics.rho0_kde = rho0;
    diagnostics.g_min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    diagnostics.g_max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    timings.push(("reconstruction".to_string(), t0.elapsed().as_secs_f64()));

    let report = ExperimentReport {
        config: Some(cfg.clone()),
        x_grid,
        densities,
        lower_env,
        upper_env,
        certificate: Some(cert),
        certificate_issued,
        checks,
        audits: audit.records(),
        diagnostics,
        samples: Some(samples),
        timings,
    };
    info!("experiment {} finished: {:?}", cfg.preset.name(), report.outcome());
    Ok(report)
}

/// Paths of the emitted files.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub density_csv: PathBuf,
    pub diagnostics_json: PathBuf,
    pub violations_csv: PathBuf,
    pub check_csv: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            density_csv: dir.join("density.csv"),
            diagnostics_json: dir.join("diagnostics.json"),
            violations_csv: dir.join("violations.csv"),
            check_csv: dir.join("envelope_check.csv"),
        }
    }
}

/// 17 significant digits; `inf` for unbounded envelopes.
pub fn format_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Serialize)]
struct DensitySummary {
    method: MethodTag,
    mass: f64,
    mass_ok: bool,
    clamped: usize,
    flagged: usize,
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    method: MethodTag,
    slack: f64,
    checked: usize,
    violations: usize,
    grid: (f64, f64),
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violating_x: Vec<f64>,
    #[serde(skip)]
    _r: std::marker::PhantomData<&'a ()>,
}

#[derive(Serialize)]
struct StatusDoc {
    outcome: Outcome,
    exit_code: i32,
}

#[derive(Serialize)]
struct DiagnosticsDoc<'a> {
    schema_version: u32,
    version: &'static str,
    config: &'a Option<ExperimentConfig>,
    status: StatusDoc,
    audit_note: &'static str,
    audits: &'a [AuditRecord],
    certificate: &'a Option<BoundCertificate>,
    certificate_issued: bool,
    densities: Vec<DensitySummary>,
    checks: Vec<CheckSummary<'a>>,
    diagnostics: &'a Diagnostics,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

pub fn diagnostics_json(report: &ExperimentReport) -> Result<String> {
    let outcome = report.outcome();
    let doc = DiagnosticsDoc {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        config: &report.config,
        status: StatusDoc {
            outcome,
            exit_code: outcome.exit_code(),
        },
        audit_note: "audits check sampled evaluations only; a pass is evidence, not proof",
        audits: &report.audits,
        certificate: &report.certificate,
        certificate_issued: report.certificate_issued,
        densities: report
            .densities
            .iter()
            .map(|d| DensitySummary {
                method: d.method,
                mass: d.mass,
                mass_ok: d.mass_ok(),
                clamped: d.clamped,
                flagged: d.flagged,
            })
            .collect(),
        checks: report
            .checks
            .iter()
            .map(|c| CheckSummary {
                method: c.report.method,
                slack: c.report.slack,
                checked: c.report.checked,
                violations: c.report.violations.len(),
                grid: (
                    c.density.x_grid.first().copied().unwrap_or(0.0),
                    c.density.x_grid.last().copied().unwrap_or(0.0),
                ),
                violating_x: c.report.violations.iter().map(|v| v.x).collect(),
                _r: std::marker::PhantomData,
            })
            .collect(),
        diagnostics: &report.diagnostics,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::Numerical(format!("serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Writes `density.csv`, `diagnostics.json`, `violations.csv` and
/// `envelope_check.csv` into `dir`.
pub fn emit_outputs(report: &ExperimentReport, dir: &Path) -> Result<OutputPaths> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths = OutputPaths::in_dir(dir);

    let p = &paths.density_csv;
    let mut w = csv::Writer::from_path(p).map_err(csv_err(p))?;
    let mut header = vec!["x".to_string()];
    header.extend(report.densities.iter().map(|d| d.method.as_str().to_string()));
    header.push("lower_env".into());
    header.push("upper_env".into());
    w.write_record(&header).map_err(csv_err(p))?;
    for (i, x) in report.x_grid.iter().enumerate() {
        let mut row = vec![format_float(*x)];
        row.extend(report.densities.iter().map(|d| format_float(d.values[i])));
        row.push(report.lower_env.as_ref().map(|v| format_float(v[i])).unwrap_or_default());
        row.push(report.upper_env.as_ref().map(|v| format_float(v[i])).unwrap_or_default());
        w.write_record(&row).map_err(csv_err(p))?;
    }
    w.flush().map_err(io_err(p))?;

    let p = &paths.violations_csv;
    let mut w = csv::Writer::from_path(p).map_err(csv_err(p))?;
    w.write_record(["method", "side", "index", "x", "density", "bound"]).map_err(csv_err(p))?;
    for c in &report.checks {
        for v in &c.report.violations {
            let side = match v.side {
                crate::density::Side::Lower => "lower",
                crate::density::Side::Upper => "upper",
            };
            w.write_record([
                c.report.method.as_str().to_string(),
                side.to_string(),
                v.index.to_string(),
                format_float(v.x),
                format_float(v.density),
                format_float(v.bound),
            ])
            .map_err(csv_err(p))?;
        }
    }
    w.flush().map_err(io_err(p))?;

    let p = &paths.check_csv;
    let mut w = csv::Writer::from_path(p).map_err(csv_err(p))?;
    w.write_record(["method", "x", "density", "lower", "upper"]).map_err(csv_err(p))?;
    for c in &report.checks {
        for i in 0..c.density.x_grid.len() {
            w.write_record([
                c.density.method.as_str().to_string(),
                format_float(c.density.x_grid[i]),
                format_float(c.density.values[i]),
                format_float(c.lower[i]),
                c.upper.as_ref().map(|u| format_float(u[i])).unwrap_or_default(),
            ])
            .map_err(csv_err(p))?;
        }
    }
    w.flush().map_err(io_err(p))?;

    let p = &paths.diagnostics_json;
    let mut file = fs::File::create(p).map_err(io_err(p))?;
    file.write_all(diagnostics_json(report)?.as_bytes()).map_err(io_err(p))?;
    Ok(paths)
}

/// Parsed `density.csv`: column names and one row of numbers per grid point
/// (`None` for empty cells).
pub type DensityTable = (Vec<String>, Vec<Vec<Option<f64>>>);

pub fn read_density_csv(path: &Path) -> Result<DensityTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let row = rec
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|e| config_err(format!("{}: bad number {s:?}: {e}", path.display())))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}
