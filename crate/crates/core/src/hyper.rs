//! Hyperparameter posterior: simplex search for the mode, curvature from
//! finite differences, grid integration, and mixture summaries of the latent
//! posterior.

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::laplace::{log_marginal_hyper, GaussianApproximation, LatentProblem};
use crate::model::{HyperState, LatentLayout, ModelFamily, ModelSpec};

/// Bounds of the transformed hyperparameters: log precisions, then atanh β.
const LOG_PREC_BOUNDS: (f64, f64) = (-15.0, 20.0);
const ATANH_BOUNDS: (f64, f64) = (-4.0, 4.0);

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GridConfig {
    /// Half-width of the grid in steps; `(2k+1)^d` points.
    pub k: usize,
    /// Step in units of the curvature-implied standard deviation.
    pub h: f64,
    /// Central-difference step for the curvature.
    pub fd_step: f64,
    /// Largest standard deviation used along a grid axis.
    pub max_axis_sd: f64,
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { k: 3, h: 0.75, fd_step: 0.05, max_axis_sd: 3.0, max_evals: 600, f_tol: 1e-8, x_tol: 1e-4 }
    }
}

// ---------------------------------------------------------------------------
// Generic pieces

/// Nelder–Mead maximization. Returns `(argmax, max, evaluations)`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], step: f64, cfg: &GridConfig) -> Result<(Vec<f64>, f64, usize)> {
    let d = x0.len();
    let mut neg = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() { f64::INFINITY } else { -v }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let v0 = neg(x0);
    simplex.push((x0.to_vec(), v0));
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = neg(&x);
        simplex.push((x, v));
    }
    let mut evals = d + 1;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if best.is_finite() && spread <= cfg.f_tol * best.abs().max(1.0) && size <= cfg.x_tol {
            return Ok((simplex[0].0.clone(), -best, evals));
        }
        if evals >= cfg.max_evals {
            return Err(Error::OptimizerFailed { best: simplex[0].0.clone(), value: -best });
        }
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|(x, _)| x[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[d].0).map(|(c, w)| c + t * (w - c)).collect() };
        let xr = along(-1.0);
        let fr = neg(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = neg(&xe);
            evals += 1;
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = along(-0.5);
                let fc = neg(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = neg(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (x, v) in simplex.iter_mut().skip(1) {
                    for (xi, bi) in x.iter_mut().zip(&x_best) {
                        *xi = bi + 0.5 * (*xi - bi);
                    }
                    *v = neg(x);
                }
                evals += d;
            }
        }
    }
}

/// Central-difference Hessian of `f` at `x` (with `fx = f(x)`).
pub fn fd_hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], fx: f64, step: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut h = DMatrix::zeros(d, d);
    let mut at = |di: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in di {
            y[i] += s;
        }
        f(&y)
    };
    for i in 0..d {
        let fp = at(&[(i, step)]);
        let fm = at(&[(i, -step)]);
        h[(i, i)] = (fp - 2.0 * fx + fm) / (step * step);
        for j in 0..i {
            let fpp = at(&[(i, step), (j, step)]);
            let fpm = at(&[(i, step), (j, -step)]);
            let fmp = at(&[(i, -step), (j, step)]);
            let fmm = at(&[(i, -step), (j, -step)]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Regular grid along the principal axes of `neg_hessian` (restricted to
/// `active`), centered at `mode`. Returns the points, the axis standard
/// deviations, and the volume of one grid cell.
pub fn grid_design(mode: &[f64], neg_hessian: &DMatrix<f64>, active: &[usize], cfg: &GridConfig) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    let m = active.len();
    if m == 0 {
        return (vec![mode.to_vec()], Vec::new(), 1.0);
    }
    let sub = DMatrix::from_fn(m, m, |a, b| neg_hessian[(active[a], active[b])]);
    let eig = sub.symmetric_eigen();
    let sds: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > 0.0 { (1.0 / l.sqrt()).min(cfg.max_axis_sd) } else { cfg.max_axis_sd })
        .collect();
    let k = cfg.k as i64;
    let side = 2 * cfg.k + 1;
    let total = side.pow(m as u32);
    let mut points = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut p = mode.to_vec();
        for axis in 0..m {
            let z = (rem % side) as i64 - k;
            rem /= side;
            let s = z as f64 * cfg.h * sds[axis];
            for a in 0..m {
                p[active[a]] += s * eig.eigenvectors[(a, axis)];
            }
        }
        points.push(p);
    }
    let volume = sds.iter().map(|s| s * cfg.h).product();
    (points, sds, volume)
}

/// Normalized weights `∝ exp(lp)` and `log Σ exp(lp)`.
pub fn normalize_log_weights(lps: &[f64]) -> (Vec<f64>, f64) {
    let max = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (vec![0.0; lps.len()], f64::NEG_INFINITY);
    }
    let raw: Vec<f64> = lps.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = raw.iter().sum();
    (raw.iter().map(|r| r / s).collect(), max + s.ln())
}

fn in_bounds(family: ModelFamily, theta: &[f64]) -> bool {
    theta.iter().enumerate().all(|(i, &v)| {
        let (lo, hi) = if family.has_ar1() && i == 2 { ATANH_BOUNDS } else { LOG_PREC_BOUNDS };
        v >= lo && v <= hi
    })
}

// ---------------------------------------------------------------------------
// Hyperparameter posterior

/// Latent summaries of one grid point.
#[derive(Debug, Clone)]
pub struct PointSummary {
    pub eta_mean: Vec<f64>,
    pub eta_var: Vec<f64>,
    /// Mode plus the skewness correction of the latent mean.
    pub latent_mean: Vec<f64>,
    /// Marginal variances of the non-field latent entries.
    pub fixed_var: Vec<f64>,
}

impl PointSummary {
    pub fn from_approximation(problem: &LatentProblem<'_>, approx: &GaussianApproximation) -> Self {
        let sel = approx.selected_inverse();
        let n = problem.n_cells();
        let mut row = Vec::new();
        let eta_var: Vec<f64> = (0..n)
            .map(|c| {
                row.clear();
                row.extend(problem.design().row(c));
                approx.variance_of(&row, Some(&sel))
            })
            .collect();
        let shift = approx.mean_shift(problem, &eta_var);
        let latent_mean: Vec<f64> = approx.mode.iter().zip(&shift).map(|(m, d)| m + d).collect();
        let eta_mean = problem.eta(&latent_mean);
        let fixed: Vec<usize> = (0..problem.n_fixed()).collect();
        Self { eta_mean, eta_var, latent_mean, fixed_var: approx.marginal_variances(&fixed, Some(&sel)) }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GridPoint {
    pub theta: HyperState,
    pub log_posterior: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct HyperPosterior {
    pub grid_points: Vec<GridPoint>,
    pub mode_theta: HyperState,
    pub mode_log_posterior: f64,
    /// `log Σ exp(lp) · cell volume`, an estimate of `log p(y)`.
    pub normalization: f64,
    /// Hyperparameter dimensions spanned by the grid; the rest stay at the mode.
    pub active: Vec<usize>,
    pub axis_sd: Vec<f64>,
    pub optimizer_evals: usize,
    pub(crate) summaries: Vec<Option<PointSummary>>,
}

impl HyperPosterior {
    /// Posterior mean and sd of a function of the hyperparameters.
    pub fn moments(&self, f: impl Fn(&HyperState) -> f64) -> (f64, f64) {
        let mut m = 0.0;
        let mut s = 0.0;
        for p in self.grid_points.iter().filter(|p| p.weight > 0.0) {
            let v = f(&p.theta);
            m += p.weight * v;
            s += p.weight * v * v;
        }
        (m, (s - m * m).max(0.0).sqrt())
    }

    /// Posterior `(name, mean, sd)` of the natural-scale hyperparameters.
    pub fn natural_summaries(&self) -> Vec<(String, f64, f64)> {
        let names: Vec<&'static str> = self.mode_theta.natural().iter().map(|(n, _)| *n).collect();
        names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let (m, s) = self.moments(|t| t.natural()[k].1);
                (name.to_string(), m, s)
            })
            .collect()
    }
}

/// Active grid dimensions. With three hyperparameters the period-intercept
/// precision stays at its mode and the grid spans the other two.
pub fn active_dims(family: ModelFamily) -> Vec<usize> {
    match HyperState::dim(family) {
        3 => vec![1, 2],
        d => (0..d).collect(),
    }
}

/// Mode search, curvature and grid evaluation of `log π(θ | y)`.
pub fn explore_hyper(problem: &LatentProblem<'_>, cfg: &GridConfig) -> Result<HyperPosterior> {
    let family = problem.layout.family;
    let d = HyperState::dim(family);
    if d == 0 {
        let theta = HyperState::initial(family);
        let (lp, approx) = log_marginal_hyper(problem, &theta, None)?;
        return Ok(HyperPosterior {
            grid_points: vec![GridPoint { theta: theta.clone(), log_posterior: lp, weight: 1.0 }],
            mode_theta: theta,
            mode_log_posterior: lp,
            normalization: lp,
            active: Vec::new(),
            axis_sd: Vec::new(),
            optimizer_evals: 1,
            summaries: vec![Some(PointSummary::from_approximation(problem, &approx))],
        });
    }

    let mut warm: Option<Vec<f64>> = None;
    let mut eval = |values: &[f64]| -> f64 {
        if !in_bounds(family, values) {
            return f64::NEG_INFINITY;
        }
        let theta = HyperState { family, values: values.to_vec() };
        match log_marginal_hyper(problem, &theta, warm.as_deref()) {
            Ok((lp, approx)) => {
                warm = Some(approx.mode);
                lp
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let start = HyperState::initial(family).values;
    let (mode, mode_lp, evals) = nelder_mead(&mut eval, &start, 1.0, cfg)?;
    // Restart once from the reported mode to guard against a collapsed simplex.
    let (mode, mode_lp, evals2) = nelder_mead(&mut eval, &mode, 0.25, cfg).unwrap_or((mode, mode_lp, 0));
    let mode_theta = HyperState { family, values: mode.clone() };
    let (_, mode_approx) = log_marginal_hyper(problem, &mode_theta, warm.as_deref())?;
    let mode_x = mode_approx.mode.clone();

    let hess = fd_hessian(
        |v| {
            if !in_bounds(family, v) {
                return mode_lp;
            }
            let theta = HyperState { family, values: v.to_vec() };
            log_marginal_hyper(problem, &theta, Some(&mode_x)).map_or(mode_lp, |r| r.0)
        },
        &mode,
        mode_lp,
        cfg.fd_step,
    );
    let active = active_dims(family);
    let (points, axis_sd, volume) = grid_design(&mode, &(-hess), &active, cfg);

    let evaluated: Vec<(f64, Option<PointSummary>)> = points
        .par_iter()
        .map(|values| {
            if !in_bounds(family, values) {
                return (f64::NEG_INFINITY, None);
            }
            let theta = HyperState { family, values: values.clone() };
            match log_marginal_hyper(problem, &theta, Some(&mode_x)) {
                Ok((lp, approx)) => (lp, Some(PointSummary::from_approximation(problem, &approx))),
                Err(_) => (f64::NEG_INFINITY, None),
            }
        })
        .collect();
    let lps: Vec<f64> = evaluated.iter().map(|e| e.0).collect();
    let (weights, log_sum) = normalize_log_weights(&lps);
    if !log_sum.is_finite() {
        return Err(Error::Numeric("every grid point failed to evaluate".into()));
    }
    let grid_points = points
        .into_iter()
        .zip(lps.iter().zip(&weights))
        .map(|(values, (&lp, &w))| GridPoint { theta: HyperState { family, values }, log_posterior: lp, weight: w })
        .collect();
    Ok(HyperPosterior {
        grid_points,
        mode_theta,
        mode_log_posterior: mode_lp,
        normalization: log_sum + volume.ln(),
        active,
        axis_sd,
        optimizer_evals: evals + evals2,
        summaries: evaluated.into_iter().map(|e| e.1).collect(),
    })
}

/// Hyperposterior restricted to a single fixed `theta`.
pub fn fixed_hyper(problem: &LatentProblem<'_>, theta: &HyperState) -> Result<HyperPosterior> {
    let (lp, approx) = log_marginal_hyper(problem, theta, None)?;
    Ok(HyperPosterior {
        grid_points: vec![GridPoint { theta: theta.clone(), log_posterior: lp, weight: 1.0 }],
        mode_theta: theta.clone(),
        mode_log_posterior: lp,
        normalization: lp,
        active: Vec::new(),
        axis_sd: Vec::new(),
        optimizer_evals: 1,
        summaries: vec![Some(PointSummary::from_approximation(problem, &approx))],
    })
}

// ---------------------------------------------------------------------------
// Posterior summaries

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FixedEffectSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Latent posterior summaries mixed over the hyperparameter grid.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub family: ModelFamily,
    pub n_units: usize,
    pub n_periods: usize,
    /// Linear predictor including the offset; cell `unit * n_periods + period`.
    pub eta_mean: Vec<f64>,
    pub eta_sd: Vec<f64>,
    /// Posterior mean of the full latent vector.
    pub latent_mean: Vec<f64>,
    /// Intercept, covariate coefficients and period intercepts.
    pub fixed_effects: Vec<FixedEffectSummary>,
    /// `(name, mean, sd)` of the natural-scale hyperparameters.
    pub hyper: Vec<(String, f64, f64)>,
}

impl PosteriorSummary {
    pub fn cell(&self, unit: usize, period: usize) -> usize {
        unit * self.n_periods + period
    }

    /// `exp(E[η])`.
    pub fn intensity_plugin(&self) -> Vec<f64> {
        self.eta_mean.iter().map(|m| m.exp()).collect()
    }

    /// `E[exp(η)]` under the Gaussian marginal of `η`.
    pub fn intensity_mean(&self) -> Vec<f64> {
        self.eta_mean.iter().zip(&self.eta_sd).map(|(m, s)| (m + 0.5 * s * s).exp()).collect()
    }

    /// Posterior means of the field block as `[unit][period]`, if present.
    pub fn field_means(&self, layout: &LatentLayout) -> Option<Vec<Vec<f64>>> {
        layout.field_block()?;
        Some(
            (0..self.n_units)
                .map(|i| (0..self.n_periods).map(|j| self.latent_mean[layout.field_index(i, j).unwrap()]).collect())
                .collect(),
        )
    }

    pub fn fixed_effect(&self, name: &str) -> Option<&FixedEffectSummary> {
        self.fixed_effects.iter().find(|f| f.name == name)
    }
}

/// Quantile of a Gaussian mixture by bisection on its CDF.
pub fn mixture_quantile(weights: &[f64], means: &[f64], sds: &[f64], p: f64) -> f64 {
    let comps: Vec<(f64, f64, f64)> = weights
        .iter()
        .zip(means.iter().zip(sds))
        .filter(|(w, _)| **w > 0.0)
        .map(|(&w, (&m, &s))| (w, m, s))
        .collect();
    let cdf = |x: f64| -> f64 {
        comps
            .iter()
            .map(|&(w, m, s)| {
                if s > 0.0 {
                    w * Normal::new(m, s).map_or(0.0, |n| n.cdf(x))
                } else if x >= m {
                    w
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut lo = comps.iter().map(|&(_, m, s)| m - 12.0 * s - 1e-12).fold(f64::INFINITY, f64::min);
    let mut hi = comps.iter().map(|&(_, m, s)| m + 12.0 * s + 1e-12).fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Mixes the per-point Gaussian summaries with the grid weights.
pub fn posterior_summaries(problem: &LatentProblem<'_>, hyper: &HyperPosterior, fixed_names: &[String]) -> Result<PosteriorSummary> {
    let used: Vec<(f64, &PointSummary)> = hyper
        .grid_points
        .iter()
        .zip(&hyper.summaries)
        .filter_map(|(g, s)| s.as_ref().filter(|_| g.weight > 0.0).map(|s| (g.weight, s)))
        .collect();
    if used.is_empty() {
        return Err(Error::Numeric("no grid point carries posterior weight".into()));
    }
    let wsum: f64 = used.iter().map(|u| u.0).sum();
    let n = problem.n_cells();
    let mut eta_mean = vec![0.0; n];
    let mut eta_sq = vec![0.0; n];
    let mut latent_mean = vec![0.0; problem.dim()];
    for &(w, s) in &used {
        let w = w / wsum;
        for c in 0..n {
            eta_mean[c] += w * s.eta_mean[c];
            eta_sq[c] += w * (s.eta_var[c] + s.eta_mean[c] * s.eta_mean[c]);
        }
        for (m, x) in latent_mean.iter_mut().zip(&s.latent_mean) {
            *m += w * x;
        }
    }
    let eta_sd: Vec<f64> = eta_mean.iter().zip(&eta_sq).map(|(m, s2)| (s2 - m * m).max(0.0).sqrt()).collect();
    let weights: Vec<f64> = used.iter().map(|u| u.0 / wsum).collect();
    let fixed_effects = (0..problem.n_fixed())
        .map(|j| {
            let means: Vec<f64> = used.iter().map(|u| u.1.latent_mean[j]).collect();
            let sds: Vec<f64> = used.iter().map(|u| u.1.fixed_var[j].sqrt()).collect();
            let mean: f64 = weights.iter().zip(&means).map(|(w, m)| w * m).sum();
            let second: f64 = weights.iter().zip(means.iter().zip(&sds)).map(|(w, (m, s))| w * (s * s + m * m)).sum();
            FixedEffectSummary {
                name: fixed_names.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
                mean,
                sd: (second - mean * mean).max(0.0).sqrt(),
                q025: mixture_quantile(&weights, &means, &sds, 0.025),
                q975: mixture_quantile(&weights, &means, &sds, 0.975),
            }
        })
        .collect();
    Ok(PosteriorSummary {
        family: problem.layout.family,
        n_units: problem.layout.n_units(),
        n_periods: problem.layout.n_periods(),
        eta_mean,
        eta_sd,
        latent_mean,
        fixed_effects,
        hyper: hyper.natural_summaries(),
    })
}

/// Result of a full fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub layout: LatentLayout,
    pub hyper: HyperPosterior,
    pub summary: PosteriorSummary,
}

/// Fits `spec` to `data`, optionally with some cells left out of the likelihood.
pub fn fit_model(spec: &ModelSpec, data: &PanelDataset, observed: Option<Vec<bool>>, cfg: &GridConfig) -> Result<Fit> {
    let layout = LatentLayout::build(spec, data)?;
    let (hyper, summary) = {
        let problem = LatentProblem::with_observation(&layout, spec, data, crate::laplace::ObservationModel::Poisson, observed)?;
        let hyper = explore_hyper(&problem, cfg)?;
        let names = layout.fixed_names(data.covariate_names(), data.period_labels());
        let summary = posterior_summaries(&problem, &hyper, &names)?;
        (hyper, summary)
    };
    Ok(Fit { layout, hyper, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SlopeUnitGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};
    use std::sync::Arc;

    #[test]
    fn nelder_mead_finds_quadratic_maximum() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 2.0).powi(2) - (x[0] - 1.0) * (x[1] + 2.0);
        let (x, v, _) = nelder_mead(f, &[0.0, 0.0], 1.0, &GridConfig::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3);
        assert!(v.abs() < 1e-7);
    }

    #[test]
    fn nelder_mead_reports_best_point_on_failure() {
        let cfg = GridConfig { max_evals: 10, ..Default::default() };
        let err = nelder_mead(|x: &[f64]| x[0], &[0.0], 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::OptimizerFailed { .. }));
    }

    #[test]
    fn symmetric_posterior_grid_mean_is_mode() {
        // Correlated Gaussian log density with a quartic symmetric perturbation.
        let mode = [0.7, -1.2];
        let lp = |x: &[f64]| {
            let a = x[0] - mode[0];
            let b = x[1] - mode[1];
            -(2.0 * a * a + a * b + b * b) - 0.1 * (a * a + b * b).powi(2)
        };
        let cfg = GridConfig::default();
        let (m, fm, _) = nelder_mead(lp, &[0.0, 0.0], 1.0, &cfg).unwrap();
        let h = fd_hessian(lp, &m, fm, cfg.fd_step);
        let (points, sds, _) = grid_design(&m, &(-h), &[0, 1], &cfg);
        assert_eq!(points.len(), 49);
        let lps: Vec<f64> = points.iter().map(|p| lp(p)).collect();
        let (w, _) = normalize_log_weights(&lps);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let min_step = cfg.h * sds.iter().cloned().fold(f64::INFINITY, f64::min);
        for dim in 0..2 {
            let mean: f64 = points.iter().zip(&w).map(|(p, w)| w * p[dim]).sum();
            assert!((mean - mode[dim]).abs() < min_step / 10.0, "{dim}: {mean}");
        }
    }

    #[test]
    fn mixture_quantile_reduces_to_gaussian() {
        let q = mixture_quantile(&[1.0], &[2.0], &[0.5], 0.975);
        assert!((q - (2.0 + 0.5 * 1.959963984540054)).abs() < 1e-9);
        let q = mixture_quantile(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0], 0.5);
        assert!(q.abs() < 1e-9);
    }

    fn sim_data(seed: u64) -> PanelDataset {
        let g = Arc::new(SlopeUnitGraph::lattice(4, 3, 1.0));
        let n = g.n_units();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let counts = (0..n * 3).map(|c| Poisson::new(1.0 + (c % 5) as f64).unwrap().sample(&mut rng) as u32).collect();
        PanelDataset::new(g, vec!["A".into(), "B".into(), "C".into()], counts, vec!["z".into()], &raw, Default::default()).unwrap()
    }

    #[test]
    fn mod1_has_one_degenerate_point() {
        let data = sim_data(1);
        let spec = ModelSpec::new(ModelFamily::Mod1);
        let fit = fit_model(&spec, &data, None, &GridConfig::default()).unwrap();
        assert_eq!(fit.hyper.grid_points.len(), 1);
        assert_eq!(fit.hyper.grid_points[0].weight, 1.0);
        assert_eq!(fit.summary.fixed_effects.len(), 2);
    }

    #[test]
    fn single_point_mixture_equals_gaussian_approximation() {
        let data = sim_data(2);
        let spec = ModelSpec::new(ModelFamily::Mod3);
        let layout = LatentLayout::build(&spec, &data).unwrap();
        let problem = LatentProblem::new(&layout, &spec, &data).unwrap();
        let theta = HyperState::mod3(2.0, 1.5);
        let hyper = fixed_hyper(&problem, &theta).unwrap();
        let names = layout.fixed_names(data.covariate_names(), data.period_labels());
        let s = posterior_summaries(&problem, &hyper, &names).unwrap();
        let approx = problem.at(&theta).unwrap().find_mode(None).unwrap();
        let eta_var: Vec<f64> = (0..problem.n_cells())
            .map(|c| approx.variance_of(&problem.design().row(c).collect::<Vec<_>>(), None))
            .collect();
        let shift = approx.mean_shift(&problem, &eta_var);
        for (j, fe) in s.fixed_effects.iter().enumerate() {
            assert!((fe.mean - approx.mode[j] - shift[j]).abs() < 1e-10);
            let sd = approx.variance_of(&[(j, 1.0)], None).sqrt();
            assert!((fe.sd - sd).abs() < 1e-9);
            assert!((fe.q975 - (fe.mean + 1.959963984540054 * sd)).abs() < 1e-7);
        }
    }

    #[test]
    fn mod3_grid_weights_and_variances() {
        let data = sim_data(3);
        let spec = ModelSpec::new(ModelFamily::Mod3);
        let fit = fit_model(&spec, &data, None, &GridConfig::default()).unwrap();
        assert_eq!(fit.hyper.grid_points.len(), 49);
        let total: f64 = fit.hyper.grid_points.iter().map(|g| g.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(fit.hyper.grid_points.iter().all(|g| g.weight >= 0.0));
        assert!(fit.summary.eta_sd.iter().all(|s| *s >= 0.0 && s.is_finite()));
        assert_eq!(fit.summary.fixed_effects.len(), 1 + 1 + 3);
    }

    #[test]
    fn extreme_precision_ranks_below_moderate() {
        // Counts drawn with a spatial field of precision 1.
        let g = Arc::new(SlopeUnitGraph::lattice(6, 6, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let field = crate::simulate::sample_besag(&g, 1.0, &mut rng).unwrap();
        let n = g.n_units();
        let raw: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let counts: Vec<u32> = (0..n * 2)
            .map(|c| Poisson::new((1.0 + field[c / 2]).exp()).unwrap().sample(&mut rng) as u32)
            .collect();
        let data = PanelDataset::new(g, vec!["A".into(), "B".into()], counts, vec!["z".into()], &raw, Default::default()).unwrap();
        let spec = ModelSpec::new(ModelFamily::Mod3);
        let layout = LatentLayout::build(&spec, &data).unwrap();
        let problem = LatentProblem::new(&layout, &spec, &data).unwrap();
        let (moderate, _) = log_marginal_hyper(&problem, &HyperState::mod3(1.0, 1.0), None).unwrap();
        let (extreme, _) = log_marginal_hyper(&problem, &HyperState::mod3(1.0, 1e6), None).unwrap();
        assert!(extreme < moderate);
    }
}
