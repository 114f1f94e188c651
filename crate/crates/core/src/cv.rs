//! Spatial k-fold and temporal leave-one-period-out cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::hyper::{fit_model, GridConfig};
use crate::model::ModelSpec;
use crate::predict::{count_calibration, roc_auc, IntensityEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CvScheme {
    Spatial,
    Temporal,
}

impl std::fmt::Display for CvScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spatial => "spatial",
            Self::Temporal => "temporal",
        })
    }
}

/// Metrics of one held-out group (fold or period).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GroupMetric {
    pub group: usize,
    pub n_cells: usize,
    /// `None` when the held-out labels are single-class.
    pub auc: Option<f64>,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub scheme: CvScheme,
    /// Group of every unit (spatial) or period (temporal).
    pub assignment: Vec<usize>,
    /// Held-out predictive moments of the linear predictor, cell `unit * T + period`.
    pub eta_mean: Vec<f64>,
    pub eta_sd: Vec<f64>,
    pub groups: Vec<GroupMetric>,
    /// AUC and coverage pooled over all held-out cells.
    pub auc: Option<f64>,
    pub coverage: f64,
    pub warnings: Vec<String>,
}

impl CvResult {
    pub fn intensities(&self, estimator: IntensityEstimator) -> Vec<f64> {
        self.eta_mean.iter().zip(&self.eta_sd).map(|(&m, &s)| estimator.apply(m, s)).collect()
    }
}

/// Seeded shuffle then round-robin: fold sizes differ by at most one.
pub fn spatial_folds(n_units: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n_units {
        return Err(Error::Validation(format!("k must lie in [2, {n_units}], got {k}")));
    }
    let mut order: Vec<usize> = (0..n_units).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n_units];
    for (pos, &unit) in order.iter().enumerate() {
        fold[unit] = pos % k;
    }
    Ok(fold)
}

fn metric(group: usize, cells: &[usize], data: &PanelDataset, intensity: &[f64], warnings: &mut Vec<String>, label: &str) -> GroupMetric {
    let scores: Vec<f64> = cells.iter().map(|&c| intensity[c]).collect();
    let labels: Vec<bool> = cells.iter().map(|&c| data.counts()[c] >= 1).collect();
    let observed: Vec<u32> = cells.iter().map(|&c| data.counts()[c]).collect();
    let auc = match roc_auc(&scores, &labels) {
        Ok((_, a)) => Some(a),
        Err(_) => {
            warnings.push(format!("{label} {group}: single-class labels, AUC skipped"));
            None
        }
    };
    let coverage = count_calibration(&observed, &scores).map_or(f64::NAN, |t| t.coverage);
    GroupMetric { group, n_cells: cells.len(), auc, coverage }
}

/// Held-out cells, their predictor means and sds.
type HeldOut = (Vec<usize>, Vec<f64>, Vec<f64>);

#[allow(clippy::too_many_arguments)]
fn run(
    scheme: CvScheme,
    data: &PanelDataset,
    spec: &ModelSpec,
    assignment: Vec<usize>,
    n_groups: usize,
    cell_group: impl Fn(usize) -> usize + Sync,
    cfg: &GridConfig,
    estimator: IntensityEstimator,
) -> Result<CvResult> {
    let n_cells = data.n_cells();
    let fits: Vec<Result<HeldOut>> = (0..n_groups)
        .into_par_iter()
        .map(|g| {
            let observed: Vec<bool> = (0..n_cells).map(|c| cell_group(c) != g).collect();
            let held: Vec<usize> = (0..n_cells).filter(|&c| cell_group(c) == g).collect();
            let fit = fit_model(spec, data, Some(observed), cfg)?;
            let m = held.iter().map(|&c| fit.summary.eta_mean[c]).collect();
            let s = held.iter().map(|&c| fit.summary.eta_sd[c]).collect();
            Ok((held, m, s))
        })
        .collect();
    let mut eta_mean = vec![f64::NAN; n_cells];
    let mut eta_sd = vec![f64::NAN; n_cells];
    let mut held_by_group = Vec::with_capacity(n_groups);
    for f in fits {
        let (held, m, s) = f?;
        for (k, &c) in held.iter().enumerate() {
            eta_mean[c] = m[k];
            eta_sd[c] = s[k];
        }
        held_by_group.push(held);
    }
    let intensity: Vec<f64> = eta_mean.iter().zip(&eta_sd).map(|(&m, &s)| estimator.apply(m, s)).collect();
    let mut warnings = Vec::new();
    let label = match scheme {
        CvScheme::Spatial => "fold",
        CvScheme::Temporal => "period",
    };
    let groups = held_by_group.iter().enumerate().map(|(g, cells)| metric(g, cells, data, &intensity, &mut warnings, label)).collect();
    let all: Vec<usize> = (0..n_cells).collect();
    let pooled = metric(0, &all, data, &intensity, &mut warnings, "pooled");
    Ok(CvResult { scheme, assignment, eta_mean, eta_sd, groups, auc: pooled.auc, coverage: pooled.coverage, warnings })
}

/// Units split into `k` folds; each fold's cells are held out in every period.
pub fn cv_spatial_kfold(
    data: &PanelDataset,
    spec: &ModelSpec,
    k: usize,
    seed: u64,
    cfg: &GridConfig,
    estimator: IntensityEstimator,
) -> Result<CvResult> {
    let folds = spatial_folds(data.n_units(), k, seed)?;
    let t = data.n_periods();
    let f = folds.clone();
    run(CvScheme::Spatial, data, spec, folds, k, move |c| f[c / t], cfg, estimator)
}

/// Each period held out in turn and predicted from the others.
pub fn cv_temporal_loo(data: &PanelDataset, spec: &ModelSpec, cfg: &GridConfig, estimator: IntensityEstimator) -> Result<CvResult> {
    let t = data.n_periods();
    if t < 2 {
        return Err(Error::Validation("temporal cross-validation needs at least two periods".into()));
    }
    run(CvScheme::Temporal, data, spec, (0..t).collect(), t, move |c| c % t, cfg, estimator)
}
