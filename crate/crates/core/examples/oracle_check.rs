//! Laplace approximation against a Metropolis chain and against tensor-grid
//! quadrature on small problems.

use slope_lgcp::hyper::{fit_model, GridConfig};
use slope_lgcp::laplace::{log_marginal_hyper, LatentProblem};
use slope_lgcp::mcmc::{quadrature_posterior, run_chain, ChainConfig};
use slope_lgcp::model::{HyperState, LatentLayout, ModelFamily, ModelSpec};
use slope_lgcp::simulate::{sample_dataset, SimConfig};

fn main() -> slope_lgcp::Result<()> {
    let graph = std::sync::Arc::new(slope_lgcp::graph::SlopeUnitGraph::lattice(4, 3, 1.0));
    let cfg = SimConfig::new(graph.clone(), 3, ModelFamily::Mod3, HyperState::mod3(4.0, 1.0), 3).with_fixed(0.5, vec![0.5, -0.3]);
    let (data, _) = sample_dataset(&cfg)?;
    let spec = ModelSpec::new(ModelFamily::Mod3);
    let fit = fit_model(&spec, &data, None, &GridConfig::default())?;
    let problem = LatentProblem::new(&fit.layout, &spec, &data)?;
    let chain = run_chain(&problem, &ChainConfig::new(40_000, 5_000, 5, 1))?;
    println!("{:<10} {:>9} {:>9} {:>9} {:>9} {:>7}", "name", "laplace", "mcmc", "sd_lap", "sd_mcmc", "ess");
    for (f, j) in fit.summary.fixed_effects.iter().zip(fit.layout.fixed_indices()) {
        println!("{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7.0}", f.name, f.mean, chain.mean(j), f.sd, chain.sd(j), chain.ess(j));
    }
    for (block, rate) in &chain.acceptance {
        println!("acceptance {block}: {rate:.2}");
    }

    // Two-dimensional toy: intercept and slope only.
    let cfg = SimConfig::new(graph, 2, ModelFamily::Mod1, HyperState::initial(ModelFamily::Mod1), 4).with_fixed(0.5, vec![0.4]);
    let (data, _) = sample_dataset(&cfg)?;
    let spec = ModelSpec::new(ModelFamily::Mod1);
    let layout = LatentLayout::build(&spec, &data)?;
    let problem = LatentProblem::new(&layout, &spec, &data)?;
    let (_, approx) = log_marginal_hyper(&problem, &HyperState::initial(ModelFamily::Mod1), None)?;
    let target = |x: &[f64]| problem.log_likelihood(&problem.eta(x)) - 0.5 * (x[0] * x[0] + x[1] * x[1]) - (2.0 * std::f64::consts::PI).ln();
    let q = quadrature_posterior(target, &[(-4.0, 4.0, 401), (-4.0, 4.0, 401)])?;
    println!("log p(y): Laplace {:.4}, quadrature {:.4}", approx.log_evidence, q.log_normalizer);
    println!("means: Laplace {:.4?}, quadrature {:.4?}", approx.mode, q.means);
    Ok(())
}
