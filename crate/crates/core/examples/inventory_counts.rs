//! Landslide inventory to a model-ready panel: overlap counting, slice
//! aggregation and covariate standardization.

use std::sync::Arc;

use slope_lgcp::dataset::{aggregate_periods, count_landslides, OverlapRecord, PanelDataset, SdKind, SliceMap, OVERLAP_THRESHOLD};
use slope_lgcp::graph::SlopeUnitGraph;

fn main() -> slope_lgcp::Result<()> {
    let graph = Arc::new(SlopeUnitGraph::lattice(3, 2, 8.0e4));
    println!("{} units, {} edges, {} component(s)", graph.n_units(), graph.n_edges(), graph.n_components());

    let rec = |l: &str, su: &str, f: f64, s: &str| OverlapRecord { landslide_id: l.into(), su_id: su.into(), overlap_fraction: f, slice_id: s.into() };
    let records = vec![
        rec("L1", "su00000", 0.40, "1941"),
        rec("L1", "su00001", 0.01, "1941"),
        rec("L2", "su00001", 0.30, "1954"),
        rec("L3", "su00004", 0.05, "1977"),
        rec("L4", "su00004", 0.90, "2009"),
        rec("L5", "su00005", 0.12, "2010"),
    ];
    let slices: Vec<String> = ["1941", "1954", "1977", "2009", "2010"].iter().map(|s| s.to_string()).collect();
    let per_slice = count_landslides(&records, &graph, &slices, OVERLAP_THRESHOLD)?;

    let map = SliceMap {
        entries: vec![
            ("1941".into(), 0, "T1".into()),
            ("1954".into(), 0, "T1".into()),
            ("1977".into(), 1, "T2".into()),
            ("2009".into(), 2, "T3".into()),
            ("2010".into(), 2, "T3".into()),
        ],
    };
    let counts = aggregate_periods(&per_slice, &map)?;

    let raw = [310.0, 12.0, 295.0, 18.0, 402.0, 9.0, 350.0, 22.0, 288.0, 15.0, 371.0, 11.0];
    let names = vec!["elevation".to_string(), "slope".to_string()];
    let data = PanelDataset::new(graph.clone(), map.period_labels(), counts, names, &raw, SdKind::Sample)?;
    for i in 0..data.n_units() {
        let row: Vec<u32> = (0..data.n_periods()).map(|j| data.count(i, j)).collect();
        println!("{}  counts {:?}  z = {:+.3?}  offset {:.3}", graph.ids()[i], row, data.covariate_row(i), data.offsets()[i]);
    }
    Ok(())
}
