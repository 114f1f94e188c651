//! The five-model ladder: latent layout, prior precision, constraints and
//! hyperparameter priors.
//!
//! Latent vector order: global intercept, covariate coefficients, period
//! intercepts (MOD2+), then the random-effect field (MOD3+). The field is
//! stored period-major: entry `period * n_units + unit`.

use std::fmt;
use std::str::FromStr;

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::graph::SlopeUnitGraph;
use crate::sparse::{SparseSym, TripletBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum ModelFamily {
    /// Covariates only.
    Mod1,
    /// Covariates and period intercepts.
    Mod2,
    /// MOD2 plus a Besag spatial field replicated per period.
    Mod3,
    /// MOD2 plus an AR1 temporal effect replicated per unit.
    Mod4,
    /// MOD2 plus a separable AR1 × Besag space-time field.
    Mod5,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 5] = [Self::Mod1, Self::Mod2, Self::Mod3, Self::Mod4, Self::Mod5];

    pub fn has_time_intercepts(self) -> bool {
        self != Self::Mod1
    }

    pub fn has_field(self) -> bool {
        matches!(self, Self::Mod3 | Self::Mod4 | Self::Mod5)
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, Self::Mod3 | Self::Mod5)
    }

    pub fn has_ar1(self) -> bool {
        matches!(self, Self::Mod4 | Self::Mod5)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Mod1 => "mod1",
            Self::Mod2 => "mod2",
            Self::Mod3 => "mod3",
            Self::Mod4 => "mod4",
            Self::Mod5 => "mod5",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mod1" => Ok(Self::Mod1),
            "mod2" => Ok(Self::Mod2),
            "mod3" => Ok(Self::Mod3),
            "mod4" => Ok(Self::Mod4),
            "mod5" => Ok(Self::Mod5),
            other => Err(Error::Validation(format!("unknown model family '{other}'"))),
        }
    }
}

/// Model choice and prior settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Prior sd of the global intercept and covariate coefficients.
    pub fixed_prior_sd: f64,
    /// Rate of the exponential prior on each standard deviation.
    pub pc_sd_rate: f64,
    /// Calibration `P(|beta| > pc_cor_u) = pc_cor_alpha` of the AR1 coefficient prior.
    pub pc_cor_u: f64,
    pub pc_cor_alpha: f64,
    /// Give isolated units an independent `N(0, 1/tau)` effect instead of rejecting them.
    pub allow_isolated: bool,
}

impl ModelSpec {
    pub fn new(family: ModelFamily) -> Self {
        Self {
            family,
            fixed_prior_sd: 1.0,
            pc_sd_rate: pc_prec_rate(1.0, 0.5),
            pc_cor_u: 0.5,
            pc_cor_alpha: 0.5,
            allow_isolated: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_prior_sd > 0.0) {
            return Err(Error::Validation("fixed_prior_sd must be positive".into()));
        }
        if !(self.pc_sd_rate > 0.0) {
            return Err(Error::Validation("pc_sd_rate must be positive".into()));
        }
        if !(self.pc_cor_u > 0.0 && self.pc_cor_u < 1.0 && self.pc_cor_alpha > 0.0 && self.pc_cor_alpha < 1.0) {
            return Err(Error::Validation("AR1 prior calibration needs 0 < u < 1 and 0 < alpha < 1".into()));
        }
        Ok(())
    }

    pub fn correlation_prior(&self) -> PcCorrelation {
        PcCorrelation::calibrated(self.pc_cor_u, self.pc_cor_alpha)
    }
}

// ---------------------------------------------------------------------------
// Priors

/// Rate `lambda` with `P(sd > u) = alpha` under an exponential sd prior.
pub fn pc_prec_rate(u: f64, alpha: f64) -> f64 {
    -alpha.ln() / u
}

/// Log density of `log(precision)` when `sd = precision^(-1/2)` is
/// exponential with rate `lambda`.
pub fn log_pc_prec(log_prec: f64, lambda: f64) -> f64 {
    let sd = (-0.5 * log_prec).exp();
    (0.5 * lambda).ln() - lambda * sd - 0.5 * log_prec
}

/// Penalized-complexity prior for an AR1 coefficient with base model `beta = 0`
/// and distance `d(beta) = sqrt(-ln(1 - beta²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcCorrelation {
    pub lambda: f64,
}

impl PcCorrelation {
    /// Solves `P(|beta| > u) = alpha`. The distance is exponential with rate
    /// `lambda`, so `exp(-lambda d(u)) = alpha`.
    pub fn calibrated(u: f64, alpha: f64) -> Self {
        Self { lambda: -alpha.ln() / Self::distance(u) }
    }

    pub fn distance(beta: f64) -> f64 {
        (-(-beta * beta).ln_1p()).sqrt()
    }

    /// `|beta| / ((1 - beta²) d(beta))`, continuous at 0 with value 1.
    fn abs_d_prime(beta: f64) -> f64 {
        let b2 = beta * beta;
        if b2 < 1e-12 {
            1.0 / (1.0 - b2)
        } else {
            beta.abs() / ((1.0 - b2) * Self::distance(beta))
        }
    }

    pub fn log_density(&self, beta: f64) -> f64 {
        if beta.abs() >= 1.0 {
            return f64::NEG_INFINITY;
        }
        (0.5 * self.lambda).ln() - self.lambda * Self::distance(beta) + Self::abs_d_prime(beta).ln()
    }

    /// Log density of `psi = atanh(beta)`, evaluated without forming
    /// `1 - beta²` so the tails stay finite.
    pub fn log_density_atanh(&self, psi: f64) -> f64 {
        let a = psi.abs();
        if a < 1e-6 {
            return (0.5 * self.lambda).ln() - self.lambda * a;
        }
        // ln cosh ψ = |ψ| + ln(1 + e^{-2|ψ|}) - ln 2 = -½ ln(1 - β²)
        let log_cosh = a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2;
        let d = (2.0 * log_cosh).sqrt();
        (0.5 * self.lambda).ln() - self.lambda * d + a.tanh().ln() - d.ln()
    }

    /// `P(|beta| > u)`.
    pub fn exceedance(&self, u: f64) -> f64 {
        (-self.lambda * Self::distance(u)).exp()
    }
}

/// Stationary variance of an AR1 with innovation precision `tau`.
pub fn stationary_variance_ar1(tau: f64, beta: f64) -> f64 {
    1.0 / (tau * (1.0 - beta * beta))
}

/// `T × T` AR1 precision: `tau * (1, 1+β², …, 1+β², 1)` on the diagonal,
/// `-tau β` beside it.
pub fn ar1_precision(n_periods: usize, tau: f64, beta: f64) -> SparseSym {
    let mut b = TripletBuilder::new(n_periods);
    if n_periods == 1 {
        b.add(0, 0, tau * (1.0 - beta * beta));
        return b.build();
    }
    for t in 0..n_periods {
        let d = if t == 0 || t + 1 == n_periods { 1.0 } else { 1.0 + beta * beta };
        b.add(t, t, tau * d);
        if t + 1 < n_periods {
            b.add(t, t + 1, -tau * beta);
        }
    }
    b.build()
}

// ---------------------------------------------------------------------------
// Hyperparameters

/// Hyperparameters on the transformed scale.
///
/// | family | values |
/// |---|---|
/// | MOD1 | – |
/// | MOD2 | log τ_time |
/// | MOD3 | log τ_time, log τ_spatial |
/// | MOD4 | log τ_time, log κ, atanh β |
/// | MOD5 | log τ_time, log κ, atanh β |
///
/// κ is the stationary marginal precision of the AR1 part; the innovation
/// precision is `κ / (1 - β²)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct HyperState {
    pub family: ModelFamily,
    pub values: Vec<f64>,
}

impl HyperState {
    pub fn names(family: ModelFamily) -> &'static [&'static str] {
        match family {
            ModelFamily::Mod1 => &[],
            ModelFamily::Mod2 => &["log_tau_time"],
            ModelFamily::Mod3 => &["log_tau_time", "log_tau_spatial"],
            ModelFamily::Mod4 => &["log_tau_time", "log_kappa_temporal", "atanh_beta"],
            ModelFamily::Mod5 => &["log_tau_time", "log_kappa_spacetime", "atanh_beta"],
        }
    }

    pub fn dim(family: ModelFamily) -> usize {
        Self::names(family).len()
    }

    /// All transformed values at zero: unit precisions, β = 0.
    pub fn initial(family: ModelFamily) -> Self {
        Self { family, values: vec![0.0; Self::dim(family)] }
    }

    pub fn from_values(family: ModelFamily, values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::dim(family) {
            return Err(Error::Validation(format!("{family} has {} hyperparameters, got {}", Self::dim(family), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite hyperparameter".into()));
        }
        Ok(Self { family, values })
    }

    pub fn mod2(tau_time: f64) -> Self {
        Self { family: ModelFamily::Mod2, values: vec![tau_time.ln()] }
    }

    pub fn mod3(tau_time: f64, tau_spatial: f64) -> Self {
        Self { family: ModelFamily::Mod3, values: vec![tau_time.ln(), tau_spatial.ln()] }
    }

    pub fn mod4(tau_time: f64, kappa: f64, beta: f64) -> Self {
        Self { family: ModelFamily::Mod4, values: vec![tau_time.ln(), kappa.ln(), beta.atanh()] }
    }

    pub fn mod5(tau_time: f64, kappa: f64, beta: f64) -> Self {
        Self { family: ModelFamily::Mod5, values: vec![tau_time.ln(), kappa.ln(), beta.atanh()] }
    }

    pub fn tau_time(&self) -> Option<f64> {
        self.family.has_time_intercepts().then(|| self.values[0].exp())
    }

    pub fn tau_spatial(&self) -> Option<f64> {
        (self.family == ModelFamily::Mod3).then(|| self.values[1].exp())
    }

    /// Stationary precision κ (MOD4/MOD5).
    pub fn kappa(&self) -> Option<f64> {
        self.family.has_ar1().then(|| self.values[1].exp())
    }

    pub fn beta(&self) -> Option<f64> {
        self.family.has_ar1().then(|| self.values[2].tanh())
    }

    /// Innovation precision τ = κ / (1 - β²) (MOD4/MOD5).
    pub fn tau_innovation(&self) -> Option<f64> {
        let beta = self.beta()?;
        Some(self.kappa()? / (1.0 - beta * beta))
    }

    /// Standard deviation implied by the field's precision parameter: 1/√τ
    /// for MOD3, 1/√κ for MOD4/MOD5.
    pub fn field_sd(&self) -> Option<f64> {
        match self.family {
            ModelFamily::Mod3 => Some(self.values[1].mul_add(-0.5, 0.0).exp()),
            ModelFamily::Mod4 | ModelFamily::Mod5 => Some((-0.5 * self.values[1]).exp()),
            _ => None,
        }
    }

    /// `(name, value)` pairs on the natural scale.
    pub fn natural(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(t) = self.tau_time() {
            out.push(("tau_time", t));
        }
        if let Some(t) = self.tau_spatial() {
            out.push(("tau_spatial", t));
            out.push(("sd_spatial", 1.0 / t.sqrt()));
        }
        if let (Some(k), Some(b)) = (self.kappa(), self.beta()) {
            out.push(("kappa", k));
            out.push(("sd", 1.0 / k.sqrt()));
            out.push(("beta", b));
            out.push(("tau_innovation", self.tau_innovation().unwrap_or(f64::NAN)));
        }
        out
    }
}

/// Log prior density of the transformed hyperparameters.
pub fn log_hyper_prior(spec: &ModelSpec, theta: &HyperState) -> f64 {
    let lambda = spec.pc_sd_rate;
    match theta.family {
        ModelFamily::Mod1 => 0.0,
        ModelFamily::Mod2 => log_pc_prec(theta.values[0], lambda),
        ModelFamily::Mod3 => log_pc_prec(theta.values[0], lambda) + log_pc_prec(theta.values[1], lambda),
        ModelFamily::Mod4 | ModelFamily::Mod5 => {
            log_pc_prec(theta.values[0], lambda)
                + log_pc_prec(theta.values[1], lambda)
                + spec.correlation_prior().log_density_atanh(theta.values[2])
        }
    }
}

// ---------------------------------------------------------------------------
// Layout

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BlockKind {
    GlobalIntercept,
    CovariateCoefs,
    TimeIntercepts,
    SpatialFieldReplicated,
    TemporalFieldReplicated,
    SpacetimeField,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
}

/// Sparse linear constraint `Σ coef·x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub entries: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentLayout {
    pub family: ModelFamily,
    pub blocks: Vec<Block>,
    pub total_dim: usize,
    pub constraints: Vec<Constraint>,
    n_units: usize,
    n_periods: usize,
    n_covariates: usize,
    isolated: Vec<usize>,
}

impl LatentLayout {
    pub fn build(spec: &ModelSpec, data: &PanelDataset) -> Result<Self> {
        Self::for_graph(spec, data.graph(), data.n_periods(), data.n_covariates())
    }

    /// Layout from dimensions alone.
    pub fn for_graph(spec: &ModelSpec, graph: &SlopeUnitGraph, n_periods: usize, n_covariates: usize) -> Result<Self> {
        spec.validate()?;
        let n = graph.n_units();
        let family = spec.family;
        let isolated = graph.isolated_units();
        if family.is_spatial() && !isolated.is_empty() && !spec.allow_isolated {
            return Err(Error::Validation(format!(
                "{family}: {} isolated unit(s) (first '{}'); set allow-isolated to model them independently",
                isolated.len(),
                graph.ids()[isolated[0]]
            )));
        }
        let mut blocks = vec![Block { name: "intercept".into(), kind: BlockKind::GlobalIntercept, offset: 0, len: 1 }];
        blocks.push(Block { name: "covariates".into(), kind: BlockKind::CovariateCoefs, offset: 1, len: n_covariates });
        let mut next = 1 + n_covariates;
        let mut constraints = Vec::new();
        if family.has_time_intercepts() {
            blocks.push(Block { name: "time_intercepts".into(), kind: BlockKind::TimeIntercepts, offset: next, len: n_periods });
            constraints.push(Constraint { entries: (0..n_periods).map(|j| (next + j, 1.0)).collect() });
            next += n_periods;
        }
        if family.has_field() {
            let kind = match family {
                ModelFamily::Mod3 => BlockKind::SpatialFieldReplicated,
                ModelFamily::Mod4 => BlockKind::TemporalFieldReplicated,
                _ => BlockKind::SpacetimeField,
            };
            let name = match family {
                ModelFamily::Mod3 => "spatial_field",
                ModelFamily::Mod4 => "temporal_field",
                _ => "spacetime_field",
            };
            blocks.push(Block { name: name.into(), kind, offset: next, len: n * n_periods });
            if family.is_spatial() {
                let members = graph.component_members();
                for j in 0..n_periods {
                    for comp in members.iter().filter(|m| m.len() >= 2) {
                        constraints.push(Constraint { entries: comp.iter().map(|&i| (next + j * n + i, 1.0)).collect() });
                    }
                }
            }
            next += n * n_periods;
        }
        Ok(Self {
            family,
            blocks,
            total_dim: next,
            constraints,
            n_units: n,
            n_periods,
            n_covariates,
            isolated: if family.is_spatial() { isolated } else { Vec::new() },
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_observations(&self) -> usize {
        self.n_units * self.n_periods
    }

    /// Intercept plus covariate coefficients.
    pub fn n_fixed_with_intercept(&self) -> usize {
        1 + self.n_covariates
    }

    pub fn n_fixed_without_intercept(&self) -> usize {
        self.n_covariates
    }

    pub fn block(&self, kind: BlockKind) -> Option<&Block> {
        self.blocks.iter().find(|b| b.kind == kind && b.len > 0)
    }

    pub fn field_block(&self) -> Option<&Block> {
        self.blocks.iter().find(|b| {
            matches!(b.kind, BlockKind::SpatialFieldReplicated | BlockKind::TemporalFieldReplicated | BlockKind::SpacetimeField)
        })
    }

    pub fn time_index(&self, period: usize) -> Option<usize> {
        self.block(BlockKind::TimeIntercepts).map(|b| b.offset + period)
    }

    pub fn field_index(&self, unit: usize, period: usize) -> Option<usize> {
        self.field_block().map(|b| b.offset + period * self.n_units + unit)
    }

    /// Indices outside the field block, in order.
    pub fn fixed_indices(&self) -> Vec<usize> {
        let end = self.field_block().map_or(self.total_dim, |b| b.offset);
        (0..end).collect()
    }

    /// Names for every non-field latent entry.
    pub fn fixed_names(&self, covariate_names: &[String], period_labels: &[String]) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        names.extend(covariate_names.iter().cloned());
        if self.family.has_time_intercepts() {
            names.extend(period_labels.iter().map(|l| format!("period_{l}")));
        }
        names
    }

    /// Sparse design row of the linear predictor (excluding the offset).
    pub fn design_row(&self, data: &PanelDataset, unit: usize, period: usize) -> Vec<(usize, f64)> {
        let mut row = Vec::with_capacity(3 + self.n_covariates);
        row.push((0, 1.0));
        for k in 0..self.n_covariates {
            row.push((1 + k, data.covariate(unit, k)));
        }
        if let Some(t) = self.time_index(period) {
            row.push((t, 1.0));
        }
        if let Some(f) = self.field_index(unit, period) {
            row.push((f, 1.0));
        }
        row
    }

    pub fn isolated_units(&self) -> &[usize] {
        &self.isolated
    }
}

// ---------------------------------------------------------------------------
// Prior precision

fn spatial_structure(graph: &SlopeUnitGraph, tau: f64, isolated: &[usize]) -> SparseSym {
    let q = graph.besag_precision(tau);
    if isolated.is_empty() {
        return q;
    }
    let mut b = TripletBuilder::new(graph.n_units());
    b.add_matrix(&q, 1.0);
    for &i in isolated {
        b.add(i, i, tau);
    }
    b.build()
}

/// Block-diagonal prior precision of the full latent vector at `theta`.
pub fn prior_precision(layout: &LatentLayout, spec: &ModelSpec, theta: &HyperState, graph: &SlopeUnitGraph) -> SparseSym {
    let mut b = TripletBuilder::new(layout.total_dim);
    let fixed_prec = 1.0 / (spec.fixed_prior_sd * spec.fixed_prior_sd);
    for i in 0..layout.n_fixed_with_intercept() {
        b.add(i, i, fixed_prec);
    }
    if let (Some(block), Some(tau)) = (layout.block(BlockKind::TimeIntercepts), theta.tau_time()) {
        for j in 0..block.len {
            b.add(block.offset + j, block.offset + j, tau);
        }
    }
    if let Some(block) = layout.field_block() {
        let t = layout.n_periods();
        let field = match layout.family {
            ModelFamily::Mod3 => {
                let q = spatial_structure(graph, theta.tau_spatial().unwrap(), layout.isolated_units());
                SparseSym::kron(&SparseSym::identity(t, 1.0), &q)
            }
            ModelFamily::Mod4 => {
                let q = ar1_precision(t, theta.tau_innovation().unwrap(), theta.beta().unwrap());
                SparseSym::kron(&q, &SparseSym::identity(layout.n_units(), 1.0))
            }
            ModelFamily::Mod5 => {
                let q_time = ar1_precision(t, 1.0, theta.beta().unwrap());
                let q_space = spatial_structure(graph, theta.tau_innovation().unwrap(), layout.isolated_units());
                SparseSym::kron(&q_time, &q_space)
            }
            _ => unreachable!("families without a field have no field block"),
        };
        b.add_block(&field, block.offset, 1.0);
    }
    b.build()
}

/// `log |Vᵀ Q V|` where `V` is an orthonormal basis of the constraint null
/// space; for an intrinsic field this is the log of its nonzero eigenvalue
/// product. `log_pseudo_det_r` is [`SlopeUnitGraph::log_pseudo_det`].
pub fn prior_restricted_log_det(layout: &LatentLayout, spec: &ModelSpec, theta: &HyperState, log_pseudo_det_r: f64) -> f64 {
    let n = layout.n_units() as f64;
    let t = layout.n_periods() as f64;
    let mut total = -(layout.n_fixed_with_intercept() as f64) * 2.0 * spec.fixed_prior_sd.ln();
    if layout.family.has_time_intercepts() {
        total += (t - 1.0) * theta.values[0];
    }
    let n_constrained_comps = || (layout.constraints.len() - 1) as f64 / t;
    match layout.family {
        ModelFamily::Mod3 => {
            let rank = n - n_constrained_comps();
            total += t * (rank * theta.values[1] + log_pseudo_det_r);
        }
        ModelFamily::Mod4 => {
            let tau = theta.tau_innovation().unwrap();
            let beta = theta.beta().unwrap();
            total += n * (t * tau.ln() + (-beta * beta).ln_1p());
        }
        ModelFamily::Mod5 => {
            let rank = n - n_constrained_comps();
            let tau = theta.tau_innovation().unwrap();
            let beta = theta.beta().unwrap();
            // |Q_ar1(β,1)| = 1 - β² for any T.
            total += rank * (-beta * beta).ln_1p() + t * (rank * tau.ln() + log_pseudo_det_r);
        }
        _ => {}
    }
    total
}
