//! Intensity classes, ratio maps, ROC/AUC, count calibration, temporal trends
//! and the aspect effect curve from fitted models.

use slope_lgcp::hyper::{fit_model, GridConfig};
use slope_lgcp::model::{HyperState, ModelFamily, ModelSpec};
use slope_lgcp::predict::{aspect_effect, classify, count_calibration, ratio_maps, roc_auc, temporal_trend, ClassLabel, IntensityEstimator};
use slope_lgcp::simulate::{sample_dataset, SimConfig};

fn main() -> slope_lgcp::Result<()> {
    let graph = std::sync::Arc::new(slope_lgcp::graph::SlopeUnitGraph::lattice(6, 6, 1.0));
    let cfg = SimConfig::new(graph, 4, ModelFamily::Mod4, HyperState::mod4(4.0, 1.0, 0.8), 5).with_fixed(0.3, vec![0.7, 0.2]);
    let (data, _) = sample_dataset(&cfg)?;
    let grid = GridConfig::default();
    let base = fit_model(&ModelSpec::new(ModelFamily::Mod1), &data, None, &grid)?;
    let adv = fit_model(&ModelSpec::new(ModelFamily::Mod4), &data, None, &grid)?;

    let est = IntensityEstimator::Mean;
    let lam_adv: Vec<f64> = adv.summary.eta_mean.iter().zip(&adv.summary.eta_sd).map(|(&m, &s)| est.apply(m, s)).collect();
    let lam_base: Vec<f64> = base.summary.eta_mean.iter().zip(&base.summary.eta_sd).map(|(&m, &s)| est.apply(m, s)).collect();

    for class in ClassLabel::ALL {
        let k = lam_adv.iter().filter(|&&l| classify(l) == class).count();
        println!("{:<17} {k:>4} cells", class.to_string());
    }
    let (ir, _sr, zeros) = ratio_maps(&lam_adv, &lam_base)?;
    let max_ir = ir.iter().cloned().fold(0.0, f64::max);
    println!("largest intensity ratio mod4/mod1: {max_ir:.2} ({zeros} cells 0/0)");

    let labels: Vec<bool> = data.counts().iter().map(|&c| c > 0).collect();
    for (name, lam) in [("mod1", &lam_base), ("mod4", &lam_adv)] {
        let (_, auc) = roc_auc(lam, &labels)?;
        let cal = count_calibration(data.counts(), lam)?;
        println!("{name}: in-sample AUC {auc:.3}, 95% Poisson band coverage {:.3}", cal.coverage);
    }

    let field = adv.summary.field_means(&adv.layout).expect("mod4 has a field");
    let trends: Vec<String> = field.iter().map(|w| temporal_trend(w).to_string()).collect();
    for label in ["CLUSTERING", "REPELLENCY", "ERRATIC"] {
        println!("{label:<11} {}", trends.iter().filter(|t| *t == label).count());
    }

    let east = adv.summary.fixed_effects[1].mean;
    let north = adv.summary.fixed_effects[2].mean;
    let curve = aspect_effect(east, north, &[0.0, 90.0, 180.0, 270.0]);
    println!("aspect effect at 0/90/180/270 degrees: {curve:+.3?}");
    Ok(())
}
