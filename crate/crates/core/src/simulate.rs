//! Forward sampling of the model hierarchy.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::dataset::{csv_writer, standardize, PanelDataset, SdKind};
use crate::error::{Error, Result};
use crate::graph::SlopeUnitGraph;
use crate::model::{HyperState, LatentLayout, ModelFamily, ModelSpec};
use crate::sparse::{EnvelopeCholesky, Ordering, TripletBuilder};

/// Ridge added to the intrinsic precision before reconditioning.
pub const BESAG_RIDGE: f64 = 1e-8;
/// Largest linear predictor accepted by the simulator.
pub const MAX_ETA: f64 = 30.0;

/// Draws from the intrinsic Besag field restricted to zero sum on every
/// component with at least two units. Isolated units are independent
/// `N(0, 1/tau)`.
#[derive(Debug, Clone)]
pub struct BesagSampler {
    tau: f64,
    chol: EnvelopeCholesky,
    groups: Vec<Vec<usize>>,
    isolated: Vec<usize>,
    /// `Q_ε⁻¹ Cᵀ`, one vector per constraint.
    u: Vec<Vec<f64>>,
    s_inv: DMatrix<f64>,
}

impl BesagSampler {
    pub fn new(g: &SlopeUnitGraph, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Validation("tau must be positive".into()));
        }
        let n = g.n_units();
        let isolated = g.isolated_units();
        let mut b = TripletBuilder::new(n);
        b.add_matrix(&g.besag_precision(tau), 1.0);
        for i in 0..n {
            b.add(i, i, if isolated.contains(&i) { tau } else { BESAG_RIDGE * tau });
        }
        let q = b.build();
        let chol = EnvelopeCholesky::factor(&q, &Ordering::rcm_with_tail(&q, &[]))?;
        let groups: Vec<Vec<usize>> = g.component_members().into_iter().filter(|m| m.len() >= 2).collect();
        let u: Vec<Vec<f64>> = groups
            .iter()
            .map(|m| {
                let mut e = vec![0.0; n];
                for &i in m {
                    e[i] = 1.0;
                }
                chol.solve(&e)
            })
            .collect();
        let k = groups.len();
        let s = DMatrix::from_fn(k, k, |a, c| groups[a].iter().map(|&i| u[c][i]).sum());
        let s_inv = if k == 0 { s } else { s.try_inverse().ok_or_else(|| Error::Numeric("singular constraint block".into()))? };
        Ok(Self { tau, chol, groups, isolated, u, s_inv })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.chol.dim()
    }

    /// Maps a standard normal vector to a constrained field draw.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.chol.solve_lt(z);
        self.condition(&mut x);
        x
    }

    fn condition(&self, x: &mut [f64]) {
        if self.groups.is_empty() {
            return;
        }
        let cx = nalgebra::DVector::from_iterator(self.groups.len(), self.groups.iter().map(|m| m.iter().map(|&i| x[i]).sum::<f64>()));
        let w = &self.s_inv * cx;
        for (r, ur) in self.u.iter().enumerate() {
            for (xi, ui) in x.iter_mut().zip(ur) {
                *xi -= w[r] * ui;
            }
        }
        // Exact zero sums after the near-cancellation above.
        for m in &self.groups {
            let mean = m.iter().map(|&i| x[i]).sum::<f64>() / m.len() as f64;
            for &i in m {
                x[i] -= mean;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.transform(&z)
    }

    /// Marginal variances of the constrained field.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let sel = self.chol.selected_inverse();
        (0..self.dim())
            .map(|i| {
                if self.isolated.contains(&i) {
                    return 1.0 / self.tau;
                }
                let ui = nalgebra::DVector::from_iterator(self.u.len(), self.u.iter().map(|u| u[i]));
                let base = sel.get(i, i).expect("diagonal is always in the profile");
                base - (&self.s_inv * &ui).dot(&ui)
            })
            .collect()
    }
}

/// One draw of the constrained Besag field.
pub fn sample_besag<R: Rng + ?Sized>(g: &SlopeUnitGraph, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    Ok(BesagSampler::new(g, tau)?.sample(rng))
}

/// Average marginal variance of the constrained Besag field at precision `tau`.
pub fn besag_mean_marginal_variance(g: &SlopeUnitGraph, tau: f64) -> Result<f64> {
    let v = BesagSampler::new(g, tau)?.marginal_variances();
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Stationary AR1 trajectory with innovation precision `tau`.
pub fn sample_ar1<R: Rng + ?Sized>(n_periods: usize, tau: f64, beta: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !(beta.abs() < 1.0) {
        return Err(Error::Validation("AR1 needs tau > 0 and |beta| < 1".into()));
    }
    let mut out = Vec::with_capacity(n_periods);
    let sd0 = (1.0 / (tau * (1.0 - beta * beta))).sqrt();
    let sd = 1.0 / tau.sqrt();
    for t in 0..n_periods {
        let z: f64 = rng.sample(StandardNormal);
        let w = if t == 0 { sd0 * z } else { beta * out[t - 1] + sd * z };
        out.push(w);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub graph: Arc<SlopeUnitGraph>,
    pub n_periods: usize,
    pub n_covariates: usize,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Period intercepts; drawn from `N(0, 1/tau_time)` and centered when absent.
    pub time_intercepts: Option<Vec<f64>>,
    pub family: ModelFamily,
    /// True hyperparameters; must belong to `family`.
    pub hyper: HyperState,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(graph: Arc<SlopeUnitGraph>, n_periods: usize, family: ModelFamily, hyper: HyperState, seed: u64) -> Self {
        Self { graph, n_periods, n_covariates: 0, intercept: 0.0, coefficients: Vec::new(), time_intercepts: None, family, hyper, seed }
    }

    pub fn with_fixed(mut self, intercept: f64, coefficients: Vec<f64>) -> Self {
        self.n_covariates = coefficients.len();
        self.intercept = intercept;
        self.coefficients = coefficients;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.hyper.family != self.family {
            return Err(Error::Validation(format!("hyperparameters for {} given to a {} simulation", self.hyper.family, self.family)));
        }
        if self.coefficients.len() != self.n_covariates {
            return Err(Error::Validation("one coefficient per covariate is required".into()));
        }
        if self.n_periods == 0 {
            return Err(Error::Validation("at least one period is required".into()));
        }
        if let Some(t) = &self.time_intercepts {
            if t.len() != self.n_periods {
                return Err(Error::Validation("one time intercept per period is required".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TruthEntry {
    pub name: String,
    pub unit: String,
    pub period: String,
    pub value: f64,
}

/// Every latent value used to generate a dataset.
#[derive(Debug, Clone)]
pub struct Truth {
    pub family: ModelFamily,
    pub hyper: HyperState,
    /// Latent vector in the order of [`LatentLayout`].
    pub latent: Vec<f64>,
    pub eta: Vec<f64>,
    pub entries: Vec<TruthEntry>,
}

impl Truth {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Simulates covariates, latent effects and Poisson counts.
pub fn sample_dataset(cfg: &SimConfig) -> Result<(PanelDataset, Truth)> {
    cfg.validate()?;
    let g = &cfg.graph;
    let n = g.n_units();
    let t = cfg.n_periods;
    let p = cfg.n_covariates;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..p).map(|k| format!("z{}", k + 1)).collect();
    let raw: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let z = if p > 0 { standardize(&raw, n, &names, g.ids(), SdKind::Sample)?.0 } else { Vec::new() };

    let mut spec = ModelSpec::new(cfg.family);
    spec.allow_isolated = true;
    let layout = LatentLayout::for_graph(&spec, g, t, p)?;
    let mut latent = vec![0.0; layout.total_dim];
    latent[0] = cfg.intercept;
    latent[1..1 + p].copy_from_slice(&cfg.coefficients);

    if let Some(tau_time) = cfg.hyper.tau_time() {
        let ti = match &cfg.time_intercepts {
            Some(v) => v.clone(),
            None => {
                let sd = 1.0 / tau_time.sqrt();
                let mut v: Vec<f64> = (0..t).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
                let mean = v.iter().sum::<f64>() / t as f64;
                v.iter_mut().for_each(|x| *x -= mean);
                v
            }
        };
        for (j, v) in ti.into_iter().enumerate() {
            latent[layout.time_index(j).unwrap()] = v;
        }
    }

    match cfg.family {
        ModelFamily::Mod3 => {
            let sampler = BesagSampler::new(g, cfg.hyper.tau_spatial().unwrap())?;
            for j in 0..t {
                let w = sampler.sample(&mut rng);
                for i in 0..n {
                    latent[layout.field_index(i, j).unwrap()] = w[i];
                }
            }
        }
        ModelFamily::Mod4 => {
            let tau = cfg.hyper.tau_innovation().unwrap();
            let beta = cfg.hyper.beta().unwrap();
            for i in 0..n {
                let w = sample_ar1(t, tau, beta, &mut rng)?;
                for j in 0..t {
                    latent[layout.field_index(i, j).unwrap()] = w[j];
                }
            }
        }
        ModelFamily::Mod5 => {
            let beta = cfg.hyper.beta().unwrap();
            let sampler = BesagSampler::new(g, cfg.hyper.tau_innovation().unwrap())?;
            let scale0 = 1.0 / (1.0 - beta * beta).sqrt();
            let mut prev: Vec<f64> = Vec::new();
            for j in 0..t {
                let e = sampler.sample(&mut rng);
                let w: Vec<f64> = if j == 0 { e.iter().map(|v| scale0 * v).collect() } else { prev.iter().zip(&e).map(|(a, b)| beta * a + b).collect() };
                for i in 0..n {
                    latent[layout.field_index(i, j).unwrap()] = w[i];
                }
                prev = w;
            }
        }
        _ => {}
    }

    let offsets: Vec<f64> = g.areas().iter().map(|a| a.ln()).collect();
    let mut eta = vec![0.0; n * t];
    let mut counts = vec![0u32; n * t];
    for i in 0..n {
        for j in 0..t {
            let mut e = offsets[i] + latent[0];
            for k in 0..p {
                e += z[i * p + k] * latent[1 + k];
            }
            if let Some(ti) = layout.time_index(j) {
                e += latent[ti];
            }
            if let Some(fi) = layout.field_index(i, j) {
                e += latent[fi];
            }
            if !(e <= MAX_ETA) {
                return Err(Error::Validation(format!(
                    "simulated linear predictor {e:.3} exceeds {MAX_ETA} at unit '{}', period {}",
                    g.ids()[i],
                    j + 1
                )));
            }
            eta[i * t + j] = e;
            let mu = e.exp();
            counts[i * t + j] = if mu > 0.0 { Poisson::new(mu).map_err(|e| Error::Numeric(e.to_string()))?.sample(&mut rng) as u32 } else { 0 };
        }
    }

    let labels: Vec<String> = (0..t).map(|j| format!("T{}", j + 1)).collect();
    let data = PanelDataset::new(Arc::clone(g), labels.clone(), counts, names.clone(), &z, SdKind::Sample)?;

    let mut entries = vec![TruthEntry { name: "intercept".into(), unit: String::new(), period: String::new(), value: latent[0] }];
    for k in 0..p {
        entries.push(TruthEntry { name: names[k].clone(), unit: String::new(), period: String::new(), value: latent[1 + k] });
    }
    for (name, v) in cfg.hyper.natural() {
        entries.push(TruthEntry { name: name.into(), unit: String::new(), period: String::new(), value: v });
    }
    for j in 0..t {
        if let Some(ti) = layout.time_index(j) {
            entries.push(TruthEntry { name: "time_intercept".into(), unit: String::new(), period: labels[j].clone(), value: latent[ti] });
        }
    }
    if layout.field_block().is_some() {
        for j in 0..t {
            for i in 0..n {
                entries.push(TruthEntry { name: "field".into(), unit: g.ids()[i].clone(), period: labels[j].clone(), value: latent[layout.field_index(i, j).unwrap()] });
            }
        }
    }
    for i in 0..n {
        for j in 0..t {
            entries.push(TruthEntry { name: "eta".into(), unit: g.ids()[i].clone(), period: labels[j].clone(), value: eta[i * t + j] });
        }
    }
    Ok((data, Truth { family: cfg.family, hyper: cfg.hyper.clone(), latent, eta, entries }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_pinv(q: &DMatrix<f64>) -> DMatrix<f64> {
        let e = q.clone().symmetric_eigen();
        let n = q.nrows();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let l = e.eigenvalues[k];
            if l > 1e-9 {
                let v = e.eigenvectors.column(k);
                out += v * v.transpose() / l;
            }
        }
        out
    }

    #[test]
    fn two_node_draws_are_antisymmetric() {
        let g = SlopeUnitGraph::new(vec!["a".into(), "b".into()], vec![1.0, 1.0], &[(0, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w = sample_besag(&g, 1.0, &mut rng).unwrap();
            assert_eq!(w[0], -w[1]);
        }
    }

    #[test]
    fn ridge_route_matches_eigen_route() {
        for (w, h) in [(5usize, 5usize), (7, 3), (2, 2)] {
            let g = SlopeUnitGraph::lattice(w, h, 1.0);
            let n = g.n_units();
            let tau = 1.7;
            let sampler = BesagSampler::new(&g, tau).unwrap();
            // Covariance of the linear map z -> x.
            let m = DMatrix::from_fn(n, n, |_, _| 0.0);
            let mut m = m;
            for k in 0..n {
                let mut z = vec![0.0; n];
                z[k] = 1.0;
                let x = sampler.transform(&z);
                for i in 0..n {
                    m[(i, k)] = x[i];
                }
            }
            let cov = &m * m.transpose();
            let pinv = dense_pinv(&g.besag_precision(tau).to_dense());
            assert!((&cov - &pinv).amax() < 1e-6, "{w}x{h}: {}", (&cov - &pinv).amax());
            let mv = sampler.marginal_variances();
            for i in 0..n {
                assert!((mv[i] - pinv[(i, i)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conditional_mean_is_neighbor_average() {
        let g = SlopeUnitGraph::lattice(5, 5, 1.0);
        let sampler = BesagSampler::new(&g, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nb = g.neighbors(12).to_vec();
        let slope = |draws: &[Vec<f64>]| {
            let (mut sxy, mut sxx, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0);
            let k = draws.len() as f64;
            for w in draws {
                let m = nb.iter().map(|&j| w[j]).sum::<f64>() / nb.len() as f64;
                sxy += m * w[12];
                sxx += m * m;
                sx += m;
                sy += w[12];
            }
            (sxy - sx * sy / k) / (sxx - sx * sx / k)
        };
        // Intrinsic field before conditioning: slope 1 as in the full conditional.
        let raw: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let z: Vec<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
                sampler.chol.solve_lt(&z)
            })
            .collect();
        let s_raw = slope(&raw);
        assert!((s_raw - 1.0).abs() < 0.05, "{s_raw}");
        // Conditioned on zero sum the slope shrinks to Cov(w_i, m)/Var(m) under the pseudo-inverse.
        let cov = dense_pinv(&g.besag_precision(1.0).to_dense());
        let k = nb.len() as f64;
        let c_im: f64 = nb.iter().map(|&j| cov[(12, j)]).sum::<f64>() / k;
        let v_m: f64 = nb.iter().flat_map(|&a| nb.iter().map(move |&b| (a, b))).map(|(a, b)| cov[(a, b)]).sum::<f64>() / (k * k);
        let draws: Vec<Vec<f64>> = (0..10_000).map(|_| sampler.sample(&mut rng)).collect();
        let s_con = slope(&draws);
        assert!((s_con - c_im / v_m).abs() < 0.05, "{s_con} vs {}", c_im / v_m);
    }

    #[test]
    fn scaling_tau_by_four_halves_sd() {
        let g = SlopeUnitGraph::lattice(5, 5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = BesagSampler::new(&g, 1.0).unwrap();
        let s4 = BesagSampler::new(&g, 4.0).unwrap();
        let ss = |s: &BesagSampler, rng: &mut ChaCha8Rng| -> f64 {
            (0..4000).map(|_| s.sample(rng).iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        };
        let ratio = (ss(&s4, &mut rng) / ss(&s1, &mut rng)).sqrt();
        assert!((ratio - 0.5).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn ar1_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(beta, tol) in &[(0.0, 0.03), (0.9, 0.03)] {
            let tau = 2.0;
            let series: Vec<Vec<f64>> = (0..10_000).map(|_| sample_ar1(6, tau, beta, &mut rng).unwrap()).collect();
            let var0 = 1.0 / (tau * (1.0 - beta * beta));
            for j in 0..6 {
                let v = series.iter().map(|s| s[j] * s[j]).sum::<f64>() / series.len() as f64;
                assert!((v / var0 - 1.0).abs() < 0.05, "beta {beta} period {j}: {}", v / var0);
            }
            let c = series.iter().map(|s| s[2] * s[3]).sum::<f64>() / series.len() as f64;
            assert!((c / var0 - beta).abs() < tol);
        }
    }

    #[test]
    fn zero_effects_give_poisson_mean() {
        let g = Arc::new(SlopeUnitGraph::lattice(50, 40, 1.0));
        let cfg = SimConfig::new(g, 5, ModelFamily::Mod1, HyperState::initial(ModelFamily::Mod1), 4).with_fixed(0.7, vec![]);
        let (data, _) = sample_dataset(&cfg).unwrap();
        let n = data.n_cells() as f64;
        let mean = data.total_count() as f64 / n;
        let se = (0.7f64.exp() / n).sqrt();
        assert!((mean - 0.7f64.exp()).abs() < 3.0 * se);
        let var = data.counts().iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn seeds_are_reproducible_and_layout_consistent() {
        let g = Arc::new(SlopeUnitGraph::lattice(4, 4, 2.0));
        let cfg = SimConfig::new(g, 3, ModelFamily::Mod5, HyperState::mod5(4.0, 1.0, 0.5), 17).with_fixed(-0.2, vec![0.3, -0.1]);
        let (a, ta) = sample_dataset(&cfg).unwrap();
        let (b, tb) = sample_dataset(&cfg).unwrap();
        assert_eq!(a.counts(), b.counts());
        assert_eq!(ta.latent, tb.latent);
        // Field replicates sum to zero per period, period-major.
        let spec = ModelSpec::new(ModelFamily::Mod5);
        let layout = LatentLayout::for_graph(&spec, a.graph(), 3, 2).unwrap();
        for c in &layout.constraints {
            let s: f64 = c.entries.iter().map(|&(j, v)| v * ta.latent[j]).sum();
            assert!(s.abs() < 1e-9);
        }
        let q = crate::model::prior_precision(&layout, &spec, &cfg.hyper, a.graph());
        assert!(q.quad_form(&ta.latent).is_finite());
    }

    #[test]
    fn oversized_predictor_is_rejected() {
        let g = Arc::new(SlopeUnitGraph::lattice(2, 2, 1.0));
        let cfg = SimConfig::new(g, 1, ModelFamily::Mod1, HyperState::initial(ModelFamily::Mod1), 1).with_fixed(31.0, vec![]);
        assert!(matches!(sample_dataset(&cfg), Err(Error::Validation(_))));
    }
}
