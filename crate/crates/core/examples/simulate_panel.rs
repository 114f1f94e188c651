//! Simulate a separable space-time dataset and inspect the latent truth.

use std::sync::Arc;

use slope_lgcp::graph::SlopeUnitGraph;
use slope_lgcp::model::{HyperState, ModelFamily};
use slope_lgcp::simulate::{besag_mean_marginal_variance, sample_dataset, SimConfig};

fn main() -> slope_lgcp::Result<()> {
    let graph = Arc::new(SlopeUnitGraph::lattice(8, 6, 1.0));
    let tau = besag_mean_marginal_variance(&graph, 1.0)?;
    let hyper = HyperState::mod5(4.0, tau, 0.7);
    let cfg = SimConfig::new(graph, 5, ModelFamily::Mod5, hyper, 2024).with_fixed(-0.5, vec![0.6, -0.4]);
    let (data, truth) = sample_dataset(&cfg)?;

    println!("{} units x {} periods, {} landslides", data.n_units(), data.n_periods(), data.total_count());
    for (name, v) in truth.hyper.natural() {
        println!("{name:>16} = {v:.4}");
    }
    let per_period: Vec<u64> = (0..data.n_periods()).map(|j| (0..data.n_units()).map(|i| data.count(i, j) as u64).sum()).collect();
    println!("counts per period: {per_period:?}");

    let dir = std::env::temp_dir().join("slope-lgcp-simulated");
    std::fs::create_dir_all(&dir).map_err(|e| slope_lgcp::Error::Validation(e.to_string()))?;
    slope_lgcp::dataset::write_graph(data.graph(), &dir)?;
    data.write_csv(&dir)?;
    truth.write_csv(&dir.join("truth.csv"))?;
    println!("wrote units/edges/covariates/counts/truth CSVs to {}", dir.display());
    Ok(())
}
