//! Reference samplers: single-site Metropolis over latent field and
//! hyperparameters, and tensor-grid quadrature for small toys.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::csv_writer;
use crate::error::{Error, Result};
use crate::laplace::LatentProblem;
use crate::model::{log_hyper_prior, prior_precision, HyperState};
use crate::sparse::SparseSym;

pub const DEFAULT_DIM_CAP: usize = 500;
const TARGET_ACCEPT: f64 = 0.44;
const ADAPT_BATCH: usize = 50;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial proposal sd per layout block, then one for the hyperparameters.
    /// Missing entries default to 0.5.
    pub proposal_sds: Vec<f64>,
    pub seed: u64,
    pub dim_cap: usize,
    /// Starting hyperparameters; `None` uses the family's initial values.
    pub initial_theta: Option<HyperState>,
    /// Keep the hyperparameters at their starting values.
    pub fix_theta: bool,
}

impl ChainConfig {
    pub fn new(n_iter: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        Self { n_iter, burn_in, thin, proposal_sds: Vec::new(), seed, dim_cap: DEFAULT_DIM_CAP, initial_theta: None, fix_theta: false }
    }

    fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::Validation("burn_in must be smaller than n_iter".into()));
        }
        if self.thin == 0 {
            return Err(Error::Validation("thin must be at least 1".into()));
        }
        if self.proposal_sds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("proposal sds must be positive".into()));
        }
        Ok(())
    }
}

/// Stored draws: one row per kept iteration, columns named in `names`.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub names: Vec<String>,
    pub iterations: Vec<usize>,
    pub samples: Vec<Vec<f64>>,
    /// Post-adaptation acceptance rate per layout block, then hyperparameters.
    pub acceptance: Vec<(String, f64)>,
}

impl ChainOutput {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|r| r[j]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn mean(&self, j: usize) -> f64 {
        let c = self.column(j);
        c.iter().sum::<f64>() / c.len() as f64
    }

    pub fn sd(&self, j: usize) -> f64 {
        let c = self.column(j);
        let m = c.iter().sum::<f64>() / c.len() as f64;
        (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (c.len() as f64 - 1.0)).sqrt()
    }

    pub fn ess(&self, j: usize) -> f64 {
        effective_sample_size(&self.column(j))
    }

    /// Monte Carlo standard error of the mean of column `j`.
    pub fn mcse(&self, j: usize) -> f64 {
        self.sd(j) / self.ess(j).sqrt()
    }

    /// Long format `iter,name,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["iter", "name", "value"]).map_err(|e| Error::csv(path, e))?;
        for (it, row) in self.iterations.iter().zip(&self.samples) {
            for (name, v) in self.names.iter().zip(row) {
                w.write_record([it.to_string(), name.clone(), format!("{v:.17e}")]).map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Geyer's initial positive sequence estimator.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let mut pair = acf(2 * k) + acf(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        // Monotone sequence.
        pair = pair.min(prev);
        prev = pair;
        sum += pair;
        k += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    n as f64 / tau
}

/// Mutable chain state with cached products.
struct State<'p, 'a> {
    problem: &'p LatentProblem<'a>,
    x: Vec<f64>,
    eta: Vec<f64>,
    theta: HyperState,
    q: SparseSym,
    qx: Vec<f64>,
    /// `Q 1_G` per constraint group, dense.
    q1: Vec<Vec<f64>>,
    log_det: f64,
    log_prior_theta: f64,
}

impl<'p, 'a> State<'p, 'a> {
    fn set_theta(&mut self, theta: HyperState, q: SparseSym, groups: &[Vec<usize>]) {
        self.qx = q.mul_vec(&self.x);
        self.q1 = groups
            .iter()
            .map(|g| {
                let mut one = vec![0.0; self.x.len()];
                for &i in g {
                    one[i] = 1.0;
                }
                q.mul_vec(&one)
            })
            .collect();
        self.log_det = self.problem.prior_log_det(&theta);
        self.log_prior_theta = log_hyper_prior(self.problem.spec, &theta);
        self.theta = theta;
        self.q = q;
    }
}

/// Single-site random-walk Metropolis. Coordinates inside a sum-to-zero group
/// move along `e_i - 1_G / |G|`, which keeps every state on the constraint.
pub fn run_chain(problem: &LatentProblem<'_>, cfg: &ChainConfig) -> Result<ChainOutput> {
    cfg.validate()?;
    let d = problem.dim();
    let layout = problem.layout;
    let d_theta = HyperState::dim(layout.family);
    if d + d_theta > cfg.dim_cap {
        return Err(Error::Validation(format!("model dimension {} exceeds the sampler cap {}", d + d_theta, cfg.dim_cap)));
    }
    // Disjoint unit-coefficient groups.
    let mut group_of = vec![usize::MAX; d];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for c in &layout.constraints {
        if c.entries.iter().any(|&(j, v)| v != 1.0 || group_of[j] != usize::MAX) {
            return Err(Error::Validation("sampler supports disjoint sum-to-zero constraints only".into()));
        }
        for &(j, _) in &c.entries {
            group_of[j] = groups.len();
        }
        groups.push(c.entries.iter().map(|e| e.0).collect());
    }
    let block_of: Vec<usize> = (0..d)
        .map(|i| layout.blocks.iter().position(|b| i >= b.offset && i < b.offset + b.len).unwrap())
        .collect();
    let n_blocks = layout.blocks.len();
    let sd_for = |b: usize| cfg.proposal_sds.get(b).copied().unwrap_or(0.5);
    let mut step: Vec<f64> = (0..d).map(|i| sd_for(block_of[i])).collect();
    let mut step_theta = vec![sd_for(n_blocks); d_theta];

    let columns = problem.design().columns();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x = problem.initial_point();
    problem.constraints().project(&mut x);
    let theta0 = match &cfg.initial_theta {
        Some(t) if t.family == layout.family => t.clone(),
        Some(t) => return Err(Error::Validation(format!("initial hyperparameters for {} used with a {} layout", t.family, layout.family))),
        None => HyperState::initial(layout.family),
    };
    let q0 = prior_precision(layout, problem.spec, &theta0, problem.graph);
    let mut st = State {
        problem,
        eta: problem.eta(&x),
        x,
        theta: theta0.clone(),
        q: SparseSym::zeros(d),
        qx: Vec::new(),
        q1: Vec::new(),
        log_det: 0.0,
        log_prior_theta: 0.0,
    };
    st.set_theta(theta0, q0, &groups);

    let mut names: Vec<String> = Vec::with_capacity(d + d_theta);
    for b in &layout.blocks {
        for k in 0..b.len {
            names.push(if b.len == 1 { b.name.clone() } else { format!("{}[{k}]", b.name) });
        }
    }
    names.extend(HyperState::names(layout.family).iter().map(|s| s.to_string()));

    let mut acc = vec![0usize; d];
    let mut tries = vec![0usize; d];
    let mut acc_theta = vec![0usize; d_theta];
    let mut tries_theta = vec![0usize; d_theta];
    let mut block_acc = vec![(0usize, 0usize); n_blocks + 1];
    let mut samples = Vec::new();
    let mut iterations = Vec::new();
    let mut affected: Vec<usize> = Vec::new();
    let mut mark = vec![false; problem.n_cells()];
    let mut eta_new: Vec<f64> = Vec::new();

    for iter in 0..cfg.n_iter {
        for i in 0..d {
            let delta = step[i] * rng.sample::<f64, _>(StandardNormal);
            let g = group_of[i];
            // Direction d = e_i - 1_G/m (or e_i).
            let (m, members): (f64, &[usize]) = if g == usize::MAX { (f64::INFINITY, &[]) } else { (groups[g].len() as f64, &groups[g]) };
            let inv_m = if g == usize::MAX { 0.0 } else { 1.0 / m };
            let (dqx, dqd) = if g == usize::MAX {
                (st.qx[i], st.q.get(i, i))
            } else {
                let sum_qx: f64 = members.iter().map(|&j| st.qx[j]).sum();
                let sum_q1: f64 = members.iter().map(|&j| st.q1[g][j]).sum();
                (st.qx[i] - inv_m * sum_qx, st.q.get(i, i) - 2.0 * inv_m * st.q1[g][i] + inv_m * inv_m * sum_q1)
            };
            let d_prior = -delta * dqx - 0.5 * delta * delta * dqd;
            affected.clear();
            let mut touch = |c: usize, affected: &mut Vec<usize>| {
                if !mark[c] {
                    mark[c] = true;
                    affected.push(c);
                }
            };
            for &(c, _) in &columns[i] {
                touch(c, &mut affected);
            }
            for &j in members {
                for &(c, _) in &columns[j] {
                    touch(c, &mut affected);
                }
            }
            eta_new.clear();
            eta_new.extend(affected.iter().map(|&c| st.eta[c]));
            let pos = |c: usize, affected: &[usize]| affected.iter().position(|&a| a == c).unwrap();
            for &(c, v) in &columns[i] {
                let k = pos(c, &affected);
                eta_new[k] += delta * v;
            }
            for &j in members {
                for &(c, v) in &columns[j] {
                    let k = pos(c, &affected);
                    eta_new[k] -= delta * inv_m * v;
                }
            }
            let mut d_lik = 0.0;
            for (k, &c) in affected.iter().enumerate() {
                d_lik += problem.cell_log_likelihood(c, eta_new[k]) - problem.cell_log_likelihood(c, st.eta[c]);
            }
            for &c in &affected {
                mark[c] = false;
            }
            tries[i] += 1;
            let log_alpha = d_prior + d_lik;
            if log_alpha.is_finite() && rng.random::<f64>().ln() < log_alpha {
                acc[i] += 1;
                for (k, &c) in affected.iter().enumerate() {
                    st.eta[c] = eta_new[k];
                }
                st.x[i] += delta;
                for (j, v) in st.q.row(i) {
                    st.qx[j] += delta * v;
                }
                if g != usize::MAX {
                    for &j in members {
                        st.x[j] -= delta * inv_m;
                    }
                    for (j, v) in st.q1[g].iter().enumerate() {
                        st.qx[j] -= delta * inv_m * v;
                    }
                }
            }
        }

        for k in 0..if cfg.fix_theta { 0 } else { d_theta } {
            let mut values = st.theta.values.clone();
            values[k] += step_theta[k] * rng.sample::<f64, _>(StandardNormal);
            tries_theta[k] += 1;
            let theta = HyperState { family: layout.family, values };
            if theta.values.iter().any(|v| v.abs() > 30.0) {
                continue;
            }
            let q = prior_precision(layout, problem.spec, &theta, problem.graph);
            let log_det = problem.prior_log_det(&theta);
            let log_prior = log_hyper_prior(problem.spec, &theta);
            let log_alpha = -0.5 * q.quad_form(&st.x) + 0.5 * log_det + log_prior
                - (-0.5 * crate::sparse::dot(&st.x, &st.qx) + 0.5 * st.log_det + st.log_prior_theta);
            if log_alpha.is_finite() && rng.random::<f64>().ln() < log_alpha {
                acc_theta[k] += 1;
                st.set_theta(theta, q, &groups);
            }
        }

        if iter < cfg.burn_in && (iter + 1) % ADAPT_BATCH == 0 {
            for i in 0..d {
                let r = acc[i] as f64 / tries[i].max(1) as f64;
                step[i] *= (r - TARGET_ACCEPT).exp();
                acc[i] = 0;
                tries[i] = 0;
            }
            for k in 0..d_theta {
                let r = acc_theta[k] as f64 / tries_theta[k].max(1) as f64;
                step_theta[k] *= (r - TARGET_ACCEPT).exp();
                acc_theta[k] = 0;
                tries_theta[k] = 0;
            }
        }
        if iter + 1 == cfg.burn_in {
            acc.iter_mut().for_each(|a| *a = 0);
            tries.iter_mut().for_each(|a| *a = 0);
            acc_theta.iter_mut().for_each(|a| *a = 0);
            tries_theta.iter_mut().for_each(|a| *a = 0);
        }
        if iter >= cfg.burn_in && (iter - cfg.burn_in).is_multiple_of(cfg.thin) {
            let mut row = st.x.clone();
            row.extend_from_slice(&st.theta.values);
            samples.push(row);
            iterations.push(iter);
        }
    }
    for i in 0..d {
        block_acc[block_of[i]].0 += acc[i];
        block_acc[block_of[i]].1 += tries[i];
    }
    block_acc[n_blocks] = (acc_theta.iter().sum(), tries_theta.iter().sum());
    let acceptance = layout
        .blocks
        .iter()
        .map(|b| b.name.clone())
        .chain(std::iter::once("hyper".to_string()))
        .zip(&block_acc)
        .filter(|(_, (_, t))| *t > 0)
        .map(|(n, (a, t))| (n, *a as f64 / *t as f64))
        .collect();
    Ok(ChainOutput { names, iterations, samples, acceptance })
}

/// Normalized tensor-grid density with moments.
#[derive(Debug, Clone)]
pub struct QuadratureResult {
    /// `log ∫ exp(log_target)`.
    pub log_normalizer: f64,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Grid coordinates per dimension.
    pub axes: Vec<Vec<f64>>,
    /// Normalized density at every grid point, first dimension fastest.
    pub density: Vec<f64>,
}

/// Trapezoid-rule integration of `exp(log_target)` over a box of at most three
/// dimensions. Fails when the normalized marginal density at any face, times
/// the box width along that dimension, exceeds `1e-4`.
pub fn quadrature_posterior<F: Fn(&[f64]) -> f64>(log_target: F, bounds: &[(f64, f64, usize)]) -> Result<QuadratureResult> {
    let dim = bounds.len();
    if dim == 0 || dim > 3 {
        return Err(Error::Validation("quadrature supports 1 to 3 dimensions".into()));
    }
    if bounds.iter().any(|&(lo, hi, n)| !(hi > lo) || n < 3) {
        return Err(Error::Validation("each dimension needs lo < hi and at least 3 points".into()));
    }
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi, n)| (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()).collect();
    let steps: Vec<f64> = bounds.iter().map(|&(lo, hi, n)| (hi - lo) / (n - 1) as f64).collect();
    let total: usize = bounds.iter().map(|b| b.2).product();
    let mut point = vec![0.0; dim];
    let mut idx = vec![0usize; dim];
    let mut lp = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        for k in 0..dim {
            idx[k] = rem % bounds[k].2;
            rem /= bounds[k].2;
            point[k] = axes[k][idx[k]];
        }
        let v = log_target(&point);
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFinite(format!("target at {point:?}")));
        }
        lp.push(v);
    }
    let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("target is -inf on the whole box".into()));
    }
    let weight = |flat: usize| -> f64 {
        let mut rem = flat;
        let mut w = 1.0;
        for k in 0..dim {
            let i = rem % bounds[k].2;
            rem /= bounds[k].2;
            w *= if i == 0 || i + 1 == bounds[k].2 { 0.5 * steps[k] } else { steps[k] };
        }
        w
    };
    let unnorm: Vec<f64> = lp.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = (0..total).map(|f| weight(f) * unnorm[f]).sum();
    let density: Vec<f64> = unnorm.iter().map(|u| u / z).collect();
    let mut means = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    let mut marg: Vec<Vec<f64>> = bounds.iter().map(|b| vec![0.0; b.2]).collect();
    for flat in 0..total {
        let w = weight(flat) * density[flat];
        let mut rem = flat;
        for k in 0..dim {
            let i = rem % bounds[k].2;
            rem /= bounds[k].2;
            let xk = axes[k][i];
            means[k] += w * xk;
            second[k] += w * xk * xk;
            marg[k][i] += w / steps[k] * if i == 0 || i + 1 == bounds[k].2 { 2.0 } else { 1.0 };
        }
    }
    let boundary = (0..dim)
        .map(|k| {
            let width = bounds[k].1 - bounds[k].0;
            marg[k][0].max(*marg[k].last().unwrap()) * width
        })
        .fold(0.0, f64::max);
    if boundary > 1e-4 {
        return Err(Error::BoxTooSmall(boundary));
    }
    let variances = (0..dim).map(|k| second[k] - means[k] * means[k]).collect();
    Ok(QuadratureResult { log_normalizer: max + z.ln(), means, variances, axes, density })
}
