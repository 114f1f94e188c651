//! Constrained Gaussian approximation of the latent field at fixed
//! hyperparameters and the Laplace approximation of the marginal likelihood.

use nalgebra::{DMatrix, DVector};
use statrs::function::factorial::ln_factorial;

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::graph::SlopeUnitGraph;
use crate::model::{prior_precision, prior_restricted_log_det, HyperState, LatentLayout, ModelSpec};
use crate::sparse::{dot, EnvelopeCholesky, Ordering, SelectedInverse, SparseSym, TripletBuilder};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_GRAD_TOL: f64 = 1e-6;

/// Likelihood of one cell given its linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum ObservationModel {
    Poisson,
    /// Gaussian with known standard deviation; the Laplace step is exact.
    Gaussian { sd: f64 },
}

impl ObservationModel {
    /// `(log density, first derivative, negative second derivative)` in `eta`.
    #[inline]
    fn terms(self, y: f64, eta: f64, log_norm: f64) -> (f64, f64, f64) {
        match self {
            ObservationModel::Poisson => {
                let mu = eta.exp();
                (y * eta - mu - log_norm, y - mu, mu)
            }
            ObservationModel::Gaussian { sd } => {
                let r = y - eta;
                let w = 1.0 / (sd * sd);
                (-0.5 * r * r * w - log_norm, r * w, w)
            }
        }
    }

    fn log_norm(self, y: f64) -> f64 {
        match self {
            ObservationModel::Poisson => ln_factorial(y as u64),
            ObservationModel::Gaussian { sd } => sd.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln(),
        }
    }
}

/// Cell-by-latent design matrix in compressed-row form. Cell `c` is
/// `unit * n_periods + period`.
#[derive(Debug, Clone)]
pub struct Design {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    n_cols: usize,
}

impl Design {
    pub fn build(layout: &LatentLayout, data: &PanelDataset) -> Self {
        let t = data.n_periods();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..data.n_units() {
            for j in 0..t {
                for (c, v) in layout.design_row(data, i, j) {
                    cols.push(c);
                    vals.push(v);
                }
                row_ptr.push(cols.len());
            }
        }
        Self { row_ptr, cols, vals, n_cols: layout.total_dim }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[c]..self.row_ptr[c + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn row_dot(&self, c: usize, x: &[f64]) -> f64 {
        self.row(c).map(|(j, v)| v * x[j]).sum()
    }

    /// Columns as lists of `(cell, value)`.
    pub fn columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.n_cols];
        for c in 0..self.n_rows() {
            for (j, v) in self.row(c) {
                out[j].push((c, v));
            }
        }
        out
    }
}

/// Sparse equality constraints `C x = 0`.
#[derive(Debug, Clone)]
pub struct Constraints {
    rows: Vec<Vec<(usize, f64)>>,
    cct_inv: DMatrix<f64>,
    log_det_cct: f64,
}

impl Constraints {
    pub fn new(layout: &LatentLayout) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = layout.constraints.iter().map(|c| c.entries.clone()).collect();
        let k = rows.len();
        let mut dense = vec![0.0; layout.total_dim];
        let mut cct = DMatrix::zeros(k, k);
        for a in 0..k {
            for &(j, v) in &rows[a] {
                dense[j] = v;
            }
            for b in 0..k {
                cct[(a, b)] = rows[b].iter().map(|&(j, v)| v * dense[j]).sum();
            }
            for &(j, _) in &rows[a] {
                dense[j] = 0.0;
            }
        }
        let (cct_inv, log_det_cct) = if k == 0 {
            (cct, 0.0)
        } else {
            let ch = cct.cholesky().expect("constraint rows are linearly independent");
            let ld = 2.0 * ch.l().diagonal().iter().map(|d: &f64| d.ln()).sum::<f64>();
            (ch.inverse(), ld)
        };
        Self { rows, cct_inv, log_det_cct }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()))
    }

    fn apply_transpose_add(&self, w: &DVector<f64>, scale: f64, out: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[j] += scale * v * w[r];
            }
        }
    }

    /// Euclidean projection onto the null space of `C`.
    pub fn project(&self, x: &mut [f64]) {
        if self.is_empty() {
            return;
        }
        let w = &self.cct_inv * self.apply(x);
        self.apply_transpose_add(&w, -1.0, x);
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        self.apply(x).amax()
    }
}

/// Observed data and model structure, independent of hyperparameters.
#[derive(Debug, Clone)]
pub struct LatentProblem<'a> {
    pub layout: &'a LatentLayout,
    pub spec: &'a ModelSpec,
    pub graph: &'a SlopeUnitGraph,
    design: Design,
    offsets: Vec<f64>,
    y: Vec<f64>,
    log_norm: Vec<f64>,
    observed: Vec<bool>,
    observation: ObservationModel,
    constraints: Constraints,
    log_pseudo_det: f64,
    n_fixed: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl<'a> LatentProblem<'a> {
    pub fn new(layout: &'a LatentLayout, spec: &'a ModelSpec, data: &'a PanelDataset) -> Result<Self> {
        Self::with_observation(layout, spec, data, ObservationModel::Poisson, None)
    }

    /// `observed`, if given, marks the cells (unit-major) entering the likelihood.
    pub fn with_observation(
        layout: &'a LatentLayout,
        spec: &'a ModelSpec,
        data: &'a PanelDataset,
        observation: ObservationModel,
        observed: Option<Vec<bool>>,
    ) -> Result<Self> {
        let y: Vec<f64> = data.counts().iter().map(|&c| c as f64).collect();
        Self::from_response(layout, spec, data, y, observation, observed)
    }

    /// Like [`Self::with_observation`] with an explicit real-valued response.
    pub fn from_response(
        layout: &'a LatentLayout,
        spec: &'a ModelSpec,
        data: &'a PanelDataset,
        y: Vec<f64>,
        observation: ObservationModel,
        observed: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n_cells = data.n_cells();
        if y.len() != n_cells {
            return Err(Error::Validation(format!("response has {} cells, expected {n_cells}", y.len())));
        }
        if let ObservationModel::Gaussian { sd } = observation {
            if !(sd > 0.0) {
                return Err(Error::Validation("Gaussian observation sd must be positive".into()));
            }
        }
        let observed = observed.unwrap_or_else(|| vec![true; n_cells]);
        if observed.len() != n_cells {
            return Err(Error::Validation("observation mask has the wrong length".into()));
        }
        let t = data.n_periods();
        let offsets: Vec<f64> = (0..n_cells).map(|c| data.offsets()[c / t]).collect();
        let log_norm = y.iter().map(|&v| observation.log_norm(v)).collect();
        let log_pseudo_det = if layout.family.is_spatial() { data.graph().log_pseudo_det()? } else { 0.0 };
        Ok(Self {
            layout,
            spec,
            graph: data.graph(),
            design: Design::build(layout, data),
            offsets,
            y,
            log_norm,
            observed,
            observation,
            constraints: Constraints::new(layout),
            log_pseudo_det,
            n_fixed: layout.field_block().map_or(layout.total_dim, |b| b.offset),
            max_iters: DEFAULT_MAX_ITERS,
            grad_tol: DEFAULT_GRAD_TOL,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.total_dim
    }

    pub fn n_cells(&self) -> usize {
        self.design.n_rows()
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn response(&self) -> &[f64] {
        &self.y
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn observation(&self) -> ObservationModel {
        self.observation
    }

    pub fn constraints(&self) -> &Constraints {
        &self.constraints
    }

    /// Number of leading latent entries outside the field block.
    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_cells()).map(|c| self.offsets[c] + self.design.row_dot(c, x)).collect()
    }

    /// Log-likelihood of the observed cells at `eta`.
    pub fn log_likelihood(&self, eta: &[f64]) -> f64 {
        (0..self.n_cells())
            .filter(|&c| self.observed[c])
            .map(|c| self.observation.terms(self.y[c], eta[c], self.log_norm[c]).0)
            .sum()
    }

    /// Log-likelihood contribution of a single cell (0 when unobserved).
    #[inline]
    pub fn cell_log_likelihood(&self, c: usize, eta: f64) -> f64 {
        if self.observed[c] {
            self.observation.terms(self.y[c], eta, self.log_norm[c]).0
        } else {
            0.0
        }
    }

    /// Restricted log-determinant of the prior precision at `theta`.
    pub fn prior_log_det(&self, theta: &HyperState) -> f64 {
        prior_restricted_log_det(self.layout, self.spec, theta, self.log_pseudo_det)
    }

    pub fn at(&self, theta: &HyperState) -> Result<Conditional<'_, 'a>> {
        if theta.family != self.layout.family {
            return Err(Error::Validation(format!("hyperparameters for {} used with a {} layout", theta.family, self.layout.family)));
        }
        let q = prior_precision(self.layout, self.spec, theta, self.graph);
        Ok(Conditional { problem: self, theta: theta.clone(), q })
    }

    /// Feasible starting point: intercept at the log of the pooled rate.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let obs: Vec<usize> = (0..self.n_cells()).filter(|&c| self.observed[c]).collect();
        if obs.is_empty() {
            return x;
        }
        x[0] = match self.observation {
            ObservationModel::Poisson => {
                let total: f64 = obs.iter().map(|&c| self.y[c]).sum();
                let exposure: f64 = obs.iter().map(|&c| self.offsets[c].exp()).sum();
                ((total + 0.5) / exposure).ln()
            }
            ObservationModel::Gaussian { .. } => obs.iter().map(|&c| self.y[c] - self.offsets[c]).sum::<f64>() / obs.len() as f64,
        };
        x
    }
}

/// The latent posterior `π(x | y, θ)` up to a constant.
pub struct Conditional<'p, 'a> {
    pub problem: &'p LatentProblem<'a>,
    pub theta: HyperState,
    pub q: SparseSym,
}

/// State of one Newton iterate.
struct Iterate {
    value: f64,
    grad: Vec<f64>,
    curvature: Vec<f64>,
}

impl<'p, 'a> Conditional<'p, 'a> {
    /// `Σ log p(y_c | η_c) - ½ xᵀ Q x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let eta = self.problem.eta(x);
        self.problem.log_likelihood(&eta) - 0.5 * self.q.quad_form(x)
    }

    fn evaluate(&self, x: &[f64]) -> Result<Iterate> {
        let p = self.problem;
        let mut value = -0.5 * self.q.quad_form(x);
        let qx = self.q.mul_vec(x);
        let mut grad: Vec<f64> = qx.iter().map(|v| -v).collect();
        let mut curvature = vec![0.0; p.n_cells()];
        for c in 0..p.n_cells() {
            if !p.observed[c] {
                continue;
            }
            let eta = p.offsets[c] + p.design.row_dot(c, x);
            if !eta.is_finite() || eta > 700.0 {
                return Err(Error::NonFinite(format!("cell {c}: eta = {eta}")));
            }
            let (l, d1, w) = p.observation.terms(p.y[c], eta, p.log_norm[c]);
            value += l;
            curvature[c] = w;
            for (j, v) in p.design.row(c) {
                grad[j] += v * d1;
            }
        }
        Ok(Iterate { value, grad, curvature })
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(x)?.grad)
    }

    /// Negative Hessian `Q + Aᵀ W A` at `x`.
    pub fn precision(&self, x: &[f64]) -> Result<SparseSym> {
        Ok(self.assemble(&self.evaluate(x)?.curvature))
    }

    fn assemble(&self, curvature: &[f64]) -> SparseSym {
        let p = self.problem;
        let d = p.dim();
        let nf = p.n_fixed;
        let mut b = TripletBuilder::with_capacity(d, self.q.nnz() + p.n_cells() * (nf + 1) + nf * nf);
        b.add_matrix(&self.q, 1.0);
        let mut dense = vec![0.0; nf * nf];
        let mut fixed: Vec<(usize, f64)> = Vec::with_capacity(nf);
        let mut field: Vec<(usize, f64)> = Vec::with_capacity(2);
        for c in 0..p.n_cells() {
            let w = curvature[c];
            fixed.clear();
            field.clear();
            for (j, v) in p.design.row(c) {
                if j < nf {
                    fixed.push((j, v));
                } else {
                    field.push((j, v));
                }
            }
            if w != 0.0 {
                for (ia, &(a, va)) in fixed.iter().enumerate() {
                    for &(bb, vb) in &fixed[ia..] {
                        let (r, s) = if a <= bb { (a, bb) } else { (bb, a) };
                        dense[r * nf + s] += w * va * vb;
                    }
                }
            }
            // Cross entries are kept even at zero weight so the sparsity
            // pattern, and with it the factor profile, never depends on the mask.
            for (ia, &(f, vf)) in field.iter().enumerate() {
                for &(g, vg) in &field[ia..] {
                    b.add(f, g, w * vf * vg);
                }
                for &(a, va) in &fixed {
                    b.add(a, f, w * va * vf);
                }
            }
        }
        for r in 0..nf {
            for s in r..nf {
                let v = dense[r * nf + s];
                if v != 0.0 {
                    b.add(r, s, v);
                }
            }
        }
        b.build()
    }

    fn factor(&self, h: &SparseSym, ordering: &Ordering) -> Result<EnvelopeCholesky> {
        match EnvelopeCholesky::factor(h, ordering) {
            Ok(f) => Ok(f),
            Err(_) => {
                // Singular only along directions removed by the constraints
                // (e.g. an intrinsic component with no observed cell).
                let ridge = 1e-8 * h.diag().iter().cloned().fold(0.0, f64::max).max(1.0);
                let mut b = TripletBuilder::new(h.dim());
                b.add_matrix(h, 1.0);
                for i in 0..h.dim() {
                    b.add(i, i, ridge);
                }
                Ok(EnvelopeCholesky::factor(&b.build(), ordering)?)
            }
        }
    }

    fn kriging(&self, chol: &EnvelopeCholesky) -> Result<Option<Kriging>> {
        let cons = &self.problem.constraints;
        if cons.is_empty() {
            return Ok(None);
        }
        let d = self.problem.dim();
        let u: Vec<Vec<f64>> = cons
            .rows
            .iter()
            .map(|row| {
                let mut e = vec![0.0; d];
                for &(j, v) in row {
                    e[j] = v;
                }
                chol.solve(&e)
            })
            .collect();
        let k = u.len();
        let s = DMatrix::from_fn(k, k, |a, b| cons.rows[a].iter().map(|&(j, v)| v * u[b][j]).sum());
        let ch = s
            .cholesky()
            .ok_or_else(|| Error::Numeric("constraint covariance is not positive definite".into()))?;
        let log_det_s = 2.0 * ch.l().diagonal().iter().map(|d: &f64| d.ln()).sum::<f64>();
        Ok(Some(Kriging { u, s_inv: ch.inverse(), log_det_s }))
    }

    /// Projected gradient norm relative to `max(1, |x|∞)`.
    fn stationarity(&self, x: &[f64], grad: &[f64]) -> f64 {
        let mut g = grad.to_vec();
        self.problem.constraints.project(&mut g);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let xmax = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        gmax / xmax
    }

    /// Newton iterations with step halving, each step projected onto the
    /// constraint space through the current precision.
    pub fn find_mode(&self, start: Option<&[f64]>) -> Result<GaussianApproximation> {
        let p = self.problem;
        let mut x = match start {
            Some(s) if s.len() == p.dim() => s.to_vec(),
            _ => p.initial_point(),
        };
        p.constraints.project(&mut x);
        let mut it = match self.evaluate(&x) {
            Ok(it) => it,
            Err(_) => {
                x = p.initial_point();
                p.constraints.project(&mut x);
                self.evaluate(&x)?
            }
        };
        let ordering = {
            let h = self.assemble(&it.curvature);
            Ordering::rcm_with_tail(&h, &(0..p.n_fixed).collect::<Vec<_>>())
        };
        let mut trajectory = vec![it.value];
        let mut iters = 0;
        loop {
            let grad_norm = self.stationarity(&x, &it.grad);
            let h = self.assemble(&it.curvature);
            let chol = self.factor(&h, &ordering)?;
            let krig = self.kriging(&chol)?;
            if grad_norm < p.grad_tol {
                return Ok(self.finish(x, it, h, chol, krig, iters, grad_norm));
            }
            if iters == p.max_iters {
                return Err(Error::Divergence { iters, grad_norm, trajectory });
            }
            let mut step = chol.solve(&it.grad);
            if let Some(k) = &krig {
                k.correct(&p.constraints, &mut step);
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + t * b).collect();
                if let Ok(next) = self.evaluate(&trial) {
                    if next.value >= it.value {
                        accepted = Some((trial, next));
                        break;
                    }
                }
                t *= 0.5;
            }
            iters += 1;
            match accepted {
                Some((nx, nit)) => {
                    let gain = nit.value - it.value;
                    x = nx;
                    it = nit;
                    trajectory.push(it.value);
                    if gain <= 1e-14 * it.value.abs().max(1.0) {
                        // No further progress is representable; accept if nearly stationary.
                        let gn = self.stationarity(&x, &it.grad);
                        if gn < p.grad_tol * 1e3 {
                            let h = self.assemble(&it.curvature);
                            let chol = self.factor(&h, &ordering)?;
                            let krig = self.kriging(&chol)?;
                            return Ok(self.finish(x, it, h, chol, krig, iters, gn));
                        }
                    }
                }
                None => {
                    return Err(Error::Divergence { iters, grad_norm, trajectory });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        mode: Vec<f64>,
        it: Iterate,
        h: SparseSym,
        chol: EnvelopeCholesky,
        krig: Option<Kriging>,
        newton_iters: usize,
        grad_norm: f64,
    ) -> GaussianApproximation {
        let p = self.problem;
        let quad = self.q.quad_form(&mode);
        let log_lik = it.value + 0.5 * quad;
        let cholesky_logdet = chol.log_det();
        let post_restricted = cholesky_logdet + krig.as_ref().map_or(0.0, |k| k.log_det_s) - p.constraints.log_det_cct;
        let prior_restricted = p.prior_log_det(&self.theta);
        let log_evidence = log_lik - 0.5 * quad + 0.5 * prior_restricted - 0.5 * post_restricted;
        GaussianApproximation {
            theta: self.theta.clone(),
            mode,
            precision_at_mode: h,
            cholesky_logdet,
            constraints_applied: krig.is_some(),
            newton_iters,
            grad_norm_at_mode: grad_norm,
            log_likelihood: log_lik,
            log_evidence,
            chol,
            krig,
        }
    }
}

/// `U = H⁻¹ Cᵀ` and `(C U)⁻¹` for conditioning on `C x = 0`.
#[derive(Debug, Clone)]
struct Kriging {
    u: Vec<Vec<f64>>,
    s_inv: DMatrix<f64>,
    log_det_s: f64,
}

impl Kriging {
    /// `v ← v - U (C U)⁻¹ C v`.
    fn correct(&self, cons: &Constraints, v: &mut [f64]) {
        let w = &self.s_inv * cons.apply(v);
        for (r, ur) in self.u.iter().enumerate() {
            let s = w[r];
            for (vi, ui) in v.iter_mut().zip(ur) {
                *vi -= s * ui;
            }
        }
    }

    fn ut_sparse(&self, a: &[(usize, f64)]) -> DVector<f64> {
        DVector::from_iterator(self.u.len(), self.u.iter().map(|ur| a.iter().map(|&(j, v)| v * ur[j]).sum()))
    }
}

/// Gaussian approximation of `π(x | y, θ)` at its constrained mode.
#[derive(Debug, Clone)]
pub struct GaussianApproximation {
    pub theta: HyperState,
    pub mode: Vec<f64>,
    pub precision_at_mode: SparseSym,
    pub cholesky_logdet: f64,
    pub constraints_applied: bool,
    pub newton_iters: usize,
    pub grad_norm_at_mode: f64,
    pub log_likelihood: f64,
    /// Laplace approximation of `log p(y | θ)`.
    pub log_evidence: f64,
    chol: EnvelopeCholesky,
    krig: Option<Kriging>,
}

impl GaussianApproximation {
    pub fn cholesky(&self) -> &EnvelopeCholesky {
        &self.chol
    }

    pub fn selected_inverse(&self) -> SelectedInverse {
        self.chol.selected_inverse()
    }

    /// `aᵀ Σ a` under the constrained Gaussian, for sparse `a`.
    pub fn variance_of(&self, a: &[(usize, f64)], sel: Option<&SelectedInverse>) -> f64 {
        let mut v = None;
        if let Some(sel) = sel {
            let mut acc = 0.0;
            let mut ok = true;
            'outer: for (ia, &(i, vi)) in a.iter().enumerate() {
                for (jb, &(j, vj)) in a.iter().enumerate().skip(ia) {
                    match sel.get(i, j) {
                        Some(s) => acc += if ia == jb { vi * vi * s } else { 2.0 * vi * vj * s },
                        None => {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
            if ok {
                v = Some(acc);
            }
        }
        let base = v.unwrap_or_else(|| {
            let mut e = vec![0.0; self.mode.len()];
            for &(j, vj) in a {
                e[j] += vj;
            }
            let z = self.chol.solve(&e);
            dot(&e, &z)
        });
        let correction = self.krig.as_ref().map_or(0.0, |k| {
            let w = k.ut_sparse(a);
            (&k.s_inv * &w).dot(&w)
        });
        (base - correction).max(0.0)
    }

    /// Marginal variances of the listed latent entries.
    pub fn marginal_variances(&self, indices: &[usize], sel: Option<&SelectedInverse>) -> Vec<f64> {
        indices.iter().map(|&i| self.variance_of(&[(i, 1.0)], sel)).collect()
    }

    /// Second-order shift from the mode towards the posterior mean,
    /// `½ Σ Aᵀ (ℓ₃ ∘ Var η)` with `ℓ₃` the third derivative of each cell
    /// log-likelihood at the mode. `eta_var` holds the per-cell predictor
    /// variances. Zero for the Gaussian observation model.
    pub fn mean_shift(&self, problem: &LatentProblem<'_>, eta_var: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.mode.len()];
        if let ObservationModel::Gaussian { .. } = problem.observation {
            return b;
        }
        for c in (0..problem.n_cells()).filter(|&c| problem.observed[c]) {
            let eta = problem.offsets[c] + problem.design.row_dot(c, &self.mode);
            let s = -0.5 * eta.exp() * eta_var[c];
            for (j, v) in problem.design.row(c) {
                b[j] += v * s;
            }
        }
        let mut d = self.chol.solve(&b);
        if let Some(k) = &self.krig {
            k.correct(&problem.constraints, &mut d);
        }
        d
    }

    /// Draw from the constrained Gaussian given standard normal `z`.
    pub fn sample_from(&self, z: &[f64], constraints: &Constraints) -> Vec<f64> {
        let mut dx = self.chol.solve_lt(z);
        if let Some(k) = &self.krig {
            k.correct(constraints, &mut dx);
        }
        dx.iter().zip(&self.mode).map(|(a, b)| a + b).collect()
    }
}

/// Laplace approximation of `log π(θ | y)` up to a constant.
pub fn log_marginal_hyper(problem: &LatentProblem<'_>, theta: &HyperState, start: Option<&[f64]>) -> Result<(f64, GaussianApproximation)> {
    let approx = problem.at(theta)?.find_mode(start)?;
    let lp = approx.log_evidence + crate::model::log_hyper_prior(problem.spec, theta);
    if !lp.is_finite() {
        return Err(Error::NonFinite(format!("log posterior at {:?}", theta.values)));
    }
    Ok((lp, approx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelFamily;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Poisson};
    use std::sync::Arc;

    fn toy_data(w: usize, h: usize, t: usize, p: usize, seed: u64) -> PanelDataset {
        let g = Arc::new(SlopeUnitGraph::lattice(w, h, 1.0));
        let n = g.n_units();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>()).collect();
        let counts: Vec<u32> = (0..n * t).map(|_| Poisson::new(1.5).unwrap().sample(&mut rng) as u32).collect();
        PanelDataset::new(g, (0..t).map(|j| format!("T{j}")).collect(), counts, (0..p).map(|k| format!("z{k}")).collect(), &raw, Default::default())
            .unwrap()
    }

    fn single_cell(count: u32) -> PanelDataset {
        let g = Arc::new(SlopeUnitGraph::new(vec!["a".into()], vec![1.0], &[]).unwrap());
        PanelDataset::new(g, vec!["T1".into()], vec![count], vec![], &[], Default::default()).unwrap()
    }

    #[test]
    fn scalar_mode_matches_newton_oracle() {
        let data = single_cell(5);
        let mut spec = ModelSpec::new(ModelFamily::Mod1);
        spec.fixed_prior_sd = 10.0;
        let layout = LatentLayout::build(&spec, &data).unwrap();
        let problem = LatentProblem::new(&layout, &spec, &data).unwrap();
        let approx = problem.at(&HyperState::initial(ModelFamily::Mod1)).unwrap().find_mode(None).unwrap();
        // Independent scalar Newton on 5b - e^b - b²/200.
        let mut b = 0.0f64;
        for _ in 0..50 {
            let g = 5.0 - b.exp() - b / 100.0;
            let h = -b.exp() - 0.01;
            b -= g / h;
        }
        assert!((approx.mode[0] - b).abs() < 1e-8);
        assert!((approx.mode[0] - 5f64.ln()).abs() < 0.01);
    }

    #[test]
    fn mean_shift_moves_towards_exact_posterior_mean() {
        for count in [0u32, 1, 2, 8] {
            let data = single_cell(count);
            let spec = ModelSpec::new(ModelFamily::Mod1);
            let layout = LatentLayout::build(&spec, &data).unwrap();
            let problem = LatentProblem::new(&layout, &spec, &data).unwrap();
            let approx = problem.at(&HyperState::initial(ModelFamily::Mod1)).unwrap().find_mode(None).unwrap();
            let var = approx.variance_of(&[(0, 1.0)], None);
            let corrected = approx.mode[0] + approx.mean_shift(&problem, &[var])[0];
            // Midpoint rule on y·b - e^b - b²/2.
            let y = count as f64;
            let (mut z, mut m) = (0.0, 0.0);
            for k in 0..40_000 {
                let b = -10.0 + (k as f64 + 0.5) * 5e-4;
                let w = (y * b - b.exp() - 0.5 * b * b).exp();
                z += w;
                m += w * b;
            }
            let exact = m / z;
            let (err_mode, err_shift) = ((approx.mode[0] - exact).abs(), (corrected - exact).abs());
            assert!(err_shift < 0.25 * err_mode, "y={count}: mode {err_mode}, shifted {err_shift}");
        }
    }

    #[test]
    fn zero_counts_mode_is_stationary() {
        let g = Arc::new(SlopeUnitGraph::lattice(3, 3, 1.0));
        let raw: Vec<f64> = (0..18).map(|k| (k as f64 * 0.37).sin()).collect();
        let data = PanelDataset::new(g, vec!["A".into(), "B".into()], vec![0; 18], vec!["u".into(), "v".into()], &raw, Default::default()).unwrap();
        let spec = ModelSpec::new(ModelFamily::Mod1);
        let layout = LatentLayout::build(&spec, &data).unwrap();
        let problem = LatentProblem::new(&layout, &spec, &data).unwrap();
        let cond = problem.at(&HyperState::initial(ModelFamily::Mod1)).unwrap();
        let approx = cond.find_mode(None).unwrap();
        let h = 1e-5;
        for i in 0..layout.total_dim {
            let mut xp = approx.mode.clone();
            let mut xm = approx.mode.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (cond.log_density(&xp) - cond.log_density(&xm)) / (2.0 * h);
            assert!(fd.abs() < 1e-6, "{i}: {fd}");
        }
        assert!(approx.mode[0] < 0.0);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let data = toy_data(3, 4, 3, 2, 3);
        let spec = ModelSpec::new(ModelFamily::Mod3);
        let layout = LatentLayout::build(&spec, &data).unwrap();
        let problem = LatentProblem::new(&layout, &spec, &data).unwrap();
        let cond = problem.at(&HyperState::mod3(1.3, 0.8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nrm = Normal::new(0.0, 0.5).unwrap();
        let d = layout.total_dim;
        for _ in 0..3 {
            let x: Vec<f64> = (0..d).map(|_| nrm.sample(&mut rng)).collect();
            let g = cond.gradient(&x).unwrap();
            let hm = cond.precision(&x).unwrap().to_dense();
            let h = 1e-5;
            for i in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (cond.log_density(&xp) - cond.log_density(&xm)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "grad {i}");
                let gp = cond.gradient(&xp).unwrap();
                let gm = cond.gradient(&xm).unwrap();
                for j in 0..d {
                    let fdh = -(gp[j] - gm[j]) / (2.0 * h);
                    assert!((fdh - hm[(i, j)]).abs() <= 1e-5 * hm[(i, j)].abs().max(1.0), "hess {i},{j}");
                }
            }
        }
    }

    #[test]
    fn constraints_hold_at_mode() {
        let data = toy_data(3, 3, 4, 1, 5);
        for (fam, theta) in [
            (ModelFamily::Mod2, HyperState::mod2(2.0)),
            (ModelFamily::Mod3, HyperState::mod3(2.0, 1.0)),
            (ModelFamily::Mod5, HyperState::mod5(2.0, 1.0, 0.5)),
        ] {
            let spec = ModelSpec::new(fam);
            let layout = LatentLayout::build(&spec, &data).unwrap();
            let problem = LatentProblem::new(&layout, &spec, &data).unwrap();
            let approx = problem.at(&theta).unwrap().find_mode(None).unwrap();
            assert!(problem.constraints().residual(&approx.mode).abs() <= 1e-8, "{fam}");
            assert!(approx.grad_norm_at_mode <= DEFAULT_GRAD_TOL);
            assert!(approx.constraints_applied);
        }
    }

    /// Dense closed form: `y ~ N(offset, A Σ_c Aᵀ + s² I)` with `Σ_c` the
    /// constrained prior covariance.
    fn gaussian_evidence(problem: &LatentProblem<'_>, theta: &HyperState, sd: f64) -> f64 {
        let d = problem.dim();
        let q = problem.at(theta).unwrap().q.to_dense();
        let k = problem.constraints().len();
        let mut c = DMatrix::zeros(k, d);
        for (r, row) in problem.layout.constraints.iter().enumerate() {
            for &(j, v) in &row.entries {
                c[(r, j)] = v;
            }
        }
        let basis = if k == 0 {
            DMatrix::identity(d, d)
        } else {
            let proj = DMatrix::identity(d, d) - c.transpose() * (&c * c.transpose()).try_inverse().unwrap() * &c;
            let e = proj.symmetric_eigen();
            let cols: Vec<_> = (0..d).filter(|&i| e.eigenvalues[i] > 0.5).map(|i| e.eigenvectors.column(i).into_owned()).collect();
            DMatrix::from_columns(&cols)
        };
        let cov = &basis * (basis.transpose() * q * &basis).try_inverse().unwrap() * basis.transpose();
        let m = problem.n_cells();
        let mut a = DMatrix::zeros(m, d);
        for cell in 0..m {
            for (j, v) in problem.design().row(cell) {
                a[(cell, j)] = v;
            }
        }
        let s = &a * cov * a.transpose() + DMatrix::identity(m, m) * (sd * sd);
        let r = DVector::from_iterator(m, (0..m).map(|c| problem.response()[c] - problem.offsets()[c]));
        let ch = s.cholesky().unwrap();
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&ch.solve(&r)))
    }

    #[test]
    fn gaussian_surrogate_evidence_is_exact() {
        let data = toy_data(3, 2, 3, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..data.n_cells()).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
        for (fam, theta) in [
            (ModelFamily::Mod1, HyperState::initial(ModelFamily::Mod1)),
            (ModelFamily::Mod2, HyperState::mod2(3.0)),
            (ModelFamily::Mod3, HyperState::mod3(2.0, 0.7)),
            (ModelFamily::Mod4, HyperState::mod4(1.5, 0.9, 0.6)),
            (ModelFamily::Mod5, HyperState::mod5(1.5, 1.2, -0.4)),
        ] {
            let spec = ModelSpec::new(fam);
            let layout = LatentLayout::build(&spec, &data).unwrap();
            let sd = 0.8;
            let problem =
                LatentProblem::from_response(&layout, &spec, &data, y.clone(), ObservationModel::Gaussian { sd }, None).unwrap();
            let approx = problem.at(&theta).unwrap().find_mode(None).unwrap();
            let exact = gaussian_evidence(&problem, &theta, sd);
            assert!((approx.log_evidence - exact).abs() < 1e-8, "{fam}: {} vs {exact}", approx.log_evidence);
        }
    }

    #[test]
    fn marginal_variances_match_dense_constrained_covariance() {
        let data = toy_data(3, 3, 2, 1, 21);
        let spec = ModelSpec::new(ModelFamily::Mod5);
        let layout = LatentLayout::build(&spec, &data).unwrap();
        let mut observed = vec![true; data.n_cells()];
        observed[0] = false;
        observed[1] = false;
        let problem = LatentProblem::with_observation(&layout, &spec, &data, ObservationModel::Poisson, Some(observed)).unwrap();
        let approx = problem.at(&HyperState::mod5(1.0, 1.0, 0.3)).unwrap().find_mode(None).unwrap();
        let d = layout.total_dim;
        let h = approx.precision_at_mode.to_dense();
        let hinv = h.try_inverse().unwrap();
        let k = problem.constraints().len();
        let mut c = DMatrix::zeros(k, d);
        for (r, row) in layout.constraints.iter().enumerate() {
            for &(j, v) in &row.entries {
                c[(r, j)] = v;
            }
        }
        let u = &hinv * c.transpose();
        let cov = &hinv - &u * (&c * &u).try_inverse().unwrap() * u.transpose();
        let sel = approx.selected_inverse();
        for cell in 0..problem.n_cells() {
            let a: Vec<(usize, f64)> = problem.design().row(cell).collect();
            let mut av = DVector::zeros(d);
            for &(j, v) in &a {
                av[j] = v;
            }
            let expect = av.dot(&(&cov * &av));
            let got = approx.variance_of(&a, Some(&sel));
            assert!((got - expect).abs() < 1e-9 * expect.max(1.0), "cell {cell}");
            assert!((approx.variance_of(&a, None) - expect).abs() < 1e-9 * expect.max(1.0));
        }
    }

    #[test]
    fn newton_objective_increases() {
        // A far start forces several damped steps.
        let data = toy_data(4, 4, 2, 1, 2);
        let spec = ModelSpec::new(ModelFamily::Mod3);
        let layout = LatentLayout::build(&spec, &data).unwrap();
        let mut problem = LatentProblem::new(&layout, &spec, &data).unwrap();
        let cond_theta = HyperState::mod3(1.0, 0.5);
        let start: Vec<f64> = (0..layout.total_dim).map(|i| if i % 3 == 0 { 3.0 } else { -2.0 }).collect();
        problem.max_iters = 1;
        let err = problem.at(&cond_theta).unwrap().find_mode(Some(&start)).unwrap_err();
        match err {
            Error::Divergence { trajectory, .. } => {
                assert!(trajectory.windows(2).all(|w| w[1] >= w[0]));
            }
            other => panic!("{other}"),
        }
        problem.max_iters = DEFAULT_MAX_ITERS;
        let approx = problem.at(&cond_theta).unwrap().find_mode(Some(&start)).unwrap();
        assert!(approx.newton_iters > 1);
    }
}
