//! Spatial 10-fold and temporal leave-one-period-out cross-validation.

use slope_lgcp::cv::{cv_spatial_kfold, cv_temporal_loo};
use slope_lgcp::hyper::GridConfig;
use slope_lgcp::model::{HyperState, ModelFamily, ModelSpec};
use slope_lgcp::predict::IntensityEstimator;
use slope_lgcp::simulate::{besag_mean_marginal_variance, sample_dataset, SimConfig};

fn main() -> slope_lgcp::Result<()> {
    let graph = std::sync::Arc::new(slope_lgcp::graph::SlopeUnitGraph::lattice(8, 8, 1.0));
    let tau = besag_mean_marginal_variance(&graph, 1.0)?;
    let cfg = SimConfig::new(graph, 3, ModelFamily::Mod3, HyperState::mod3(4.0, tau), 99).with_fixed(0.0, vec![0.5, -0.3]);
    let (data, _) = sample_dataset(&cfg)?;
    let grid = GridConfig::default();

    for family in [ModelFamily::Mod1, ModelFamily::Mod3] {
        let spec = ModelSpec::new(family);
        let spatial = cv_spatial_kfold(&data, &spec, 10, 1, &grid, IntensityEstimator::Mean)?;
        let temporal = cv_temporal_loo(&data, &spec, &grid, IntensityEstimator::Mean)?;
        println!(
            "{family}: spatial AUC {:.3} coverage {:.3} | temporal AUC {:.3} coverage {:.3}",
            spatial.auc.unwrap_or(f64::NAN),
            spatial.coverage,
            temporal.auc.unwrap_or(f64::NAN),
            temporal.coverage
        );
        for w in spatial.warnings.iter().chain(&temporal.warnings) {
            println!("    warning: {w}");
        }
    }
    Ok(())
}
