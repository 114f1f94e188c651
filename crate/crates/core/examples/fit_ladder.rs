//! Fit the five model families to one simulated dataset and compare their
//! evidence, fixed effects and hyperparameters.

use slope_lgcp::hyper::{fit_model, GridConfig};
use slope_lgcp::model::{HyperState, ModelFamily, ModelSpec};
use slope_lgcp::simulate::{sample_dataset, SimConfig};

fn main() -> slope_lgcp::Result<()> {
    let graph = std::sync::Arc::new(slope_lgcp::graph::SlopeUnitGraph::lattice(7, 7, 1.0));
    let cfg = SimConfig::new(graph, 4, ModelFamily::Mod3, HyperState::mod3(4.0, 0.6), 7).with_fixed(0.2, vec![0.5, -0.3]);
    let (data, _) = sample_dataset(&cfg)?;

    for family in ModelFamily::ALL {
        let fit = fit_model(&ModelSpec::new(family), &data, None, &GridConfig::default())?;
        println!("{family}: log p(y) ≈ {:.2}, {} grid points", fit.hyper.normalization, fit.hyper.grid_points.len());
        for f in fit.summary.fixed_effects.iter().take(3) {
            println!("    {:<10} {:+.3} ± {:.3}  [{:+.3}, {:+.3}]", f.name, f.mean, f.sd, f.q025, f.q975);
        }
        for (name, m, s) in &fit.summary.hyper {
            println!("    {name:<14} {m:.3} ± {s:.3}");
        }
    }
    Ok(())
}
