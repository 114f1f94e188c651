#![allow(dead_code)]

use std::io::Write;
use std::sync::Arc;

use slope_lgcp::dataset::PanelDataset;
use slope_lgcp::graph::SlopeUnitGraph;
use slope_lgcp::model::{HyperState, ModelFamily};
use slope_lgcp::simulate::{sample_dataset, SimConfig, Truth};

/// Simulated panel on a `w × h` lattice of unit-area slope units (zero offsets).
pub fn lattice_panel(
    w: usize,
    h: usize,
    periods: usize,
    hyper: HyperState,
    intercept: f64,
    coefs: &[f64],
    seed: u64,
) -> (PanelDataset, Truth) {
    let g = Arc::new(SlopeUnitGraph::lattice(w, h, 1.0));
    let family: ModelFamily = hyper.family;
    let cfg = SimConfig::new(g, periods, family, hyper, seed).with_fixed(intercept, coefs.to_vec());
    sample_dataset(&cfg).expect("simulation succeeds")
}

/// Writes one line straight to stdout so it shows even when output is captured.
pub fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{line}");
}
