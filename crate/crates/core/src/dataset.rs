//! Model-ready panel of counts, standardized covariates and area offsets.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{bad_row, csv_reader, expect_headers, SlopeUnitGraph};

/// Divisor used for the covariate standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SdKind {
    /// Divisor `n - 1`.
    #[default]
    Sample,
    /// Divisor `n`.
    Population,
}

/// Column-wise centering and scaling, kept so effects can be back-transformed.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub kind: SdKind,
}

impl Standardization {
    /// Maps a standardized row-major matrix back to the raw scale.
    pub fn invert(&self, standardized: &[f64]) -> Vec<f64> {
        let p = self.means.len();
        standardized.iter().enumerate().map(|(k, &z)| z * self.sds[k % p] + self.means[k % p]).collect()
    }
}

/// Standardizes the columns of a row-major `n × p` matrix. `NaN` marks a
/// missing cell.
pub fn standardize(raw: &[f64], n: usize, names: &[String], unit_ids: &[String], kind: SdKind) -> Result<(Vec<f64>, Standardization)> {
    let p = names.len();
    assert_eq!(raw.len(), n * p);
    if n < 2 {
        return Err(Error::Validation("standardization needs at least two units".into()));
    }
    for i in 0..n {
        for k in 0..p {
            if !raw[i * p + k].is_finite() {
                return Err(Error::MissingValue { unit: unit_ids[i].clone(), column: names[k].clone() });
            }
        }
    }
    let divisor = match kind {
        SdKind::Sample => (n - 1) as f64,
        SdKind::Population => n as f64,
    };
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for k in 0..p {
        let mean = (0..n).map(|i| raw[i * p + k]).sum::<f64>() / n as f64;
        let ss = (0..n).map(|i| (raw[i * p + k] - mean).powi(2)).sum::<f64>();
        let sd = (ss / divisor).sqrt();
        let scale = (0..n).map(|i| raw[i * p + k].abs()).fold(0.0, f64::max).max(1.0);
        if !(sd > 1e-12 * scale) {
            return Err(Error::ConstantCovariate(names[k].clone()));
        }
        means[k] = mean;
        sds[k] = sd;
    }
    let z = raw.iter().enumerate().map(|(idx, &v)| (v - means[idx % p]) / sds[idx % p]).collect();
    Ok((z, Standardization { means, sds, kind }))
}

/// Counts, standardized covariates and log-area offsets for `n` units × `T`
/// periods.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    graph: Arc<SlopeUnitGraph>,
    n_periods: usize,
    counts: Vec<u32>,
    covariates: Vec<f64>,
    covariate_names: Vec<String>,
    offsets: Vec<f64>,
    period_labels: Vec<String>,
    standardization: Standardization,
}

impl PanelDataset {
    /// `counts` is unit-major (`counts[i * T + j]`), `raw_covariates` is
    /// row-major `n × p` on the original scale.
    pub fn new(
        graph: Arc<SlopeUnitGraph>,
        period_labels: Vec<String>,
        counts: Vec<u32>,
        covariate_names: Vec<String>,
        raw_covariates: &[f64],
        sd_kind: SdKind,
    ) -> Result<Self> {
        let n = graph.n_units();
        let t = period_labels.len();
        if t == 0 {
            return Err(Error::Validation("at least one period is required".into()));
        }
        if counts.len() != n * t {
            return Err(Error::Validation(format!("expected {} counts, got {}", n * t, counts.len())));
        }
        if raw_covariates.len() != n * covariate_names.len() {
            return Err(Error::Validation("covariate matrix shape does not match units × names".into()));
        }
        let (covariates, standardization) = if covariate_names.is_empty() {
            (Vec::new(), Standardization { means: vec![], sds: vec![], kind: sd_kind })
        } else {
            standardize(raw_covariates, n, &covariate_names, graph.ids(), sd_kind)?
        };
        let offsets = graph.areas().iter().map(|a| a.ln()).collect();
        Ok(Self { graph, n_periods: t, counts, covariates, covariate_names, offsets, period_labels, standardization })
    }

    /// Loads units/edges, covariates and either a long-format counts file or
    /// overlap records plus a slice map.
    pub fn load(graph: Arc<SlopeUnitGraph>, covariates: &Path, counts: CountsSource<'_>, sd_kind: SdKind) -> Result<Self> {
        let (names, raw) = read_covariates(covariates, &graph)?;
        let (labels, counts) = match counts {
            CountsSource::Long(path) => read_counts(path, &graph)?,
            CountsSource::Overlaps { overlaps, slices, threshold } => {
                let map = SliceMap::read(slices)?;
                let records = read_overlaps(overlaps)?;
                let per_slice = count_landslides(&records, &graph, &map.slice_ids(), threshold)?;
                let counts = aggregate_periods(&per_slice, &map)?;
                (map.period_labels(), counts)
            }
        };
        Self::new(graph, labels, counts, names, &raw, sd_kind)
    }

    pub fn graph(&self) -> &SlopeUnitGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> Arc<SlopeUnitGraph> {
        Arc::clone(&self.graph)
    }

    pub fn n_units(&self) -> usize {
        self.graph.n_units()
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_units() * self.n_periods
    }

    #[inline]
    pub fn count(&self, unit: usize, period: usize) -> u32 {
        self.counts[unit * self.n_periods + period]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    #[inline]
    pub fn covariate(&self, unit: usize, k: usize) -> f64 {
        self.covariates[unit * self.n_covariates() + k]
    }

    pub fn covariate_row(&self, unit: usize) -> &[f64] {
        let p = self.n_covariates();
        &self.covariates[unit * p..(unit + 1) * p]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Writes `covariates.csv` (standardized values) and `counts.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let ids = self.graph.ids();
        let path = dir.join("covariates.csv");
        let mut w = csv_writer(&path)?;
        let mut header = vec!["id".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
        for i in 0..self.n_units() {
            let mut rec = vec![ids[i].clone()];
            rec.extend(self.covariate_row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("counts.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["id", "period_index", "period_label", "count"]).map_err(|e| Error::csv(&path, e))?;
        for i in 0..self.n_units() {
            for j in 0..self.n_periods {
                w.write_record([ids[i].as_str(), &(j + 1).to_string(), &self.period_labels[j], &self.count(i, j).to_string()])
                    .map_err(|e| Error::csv(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Where the counts come from.
#[derive(Debug, Clone, Copy)]
pub enum CountsSource<'a> {
    /// `id,period_index,period_label,count` with 1-based periods.
    Long(&'a Path),
    /// `landslide_id,su_id,overlap_fraction,slice_id` and a slice map.
    Overlaps { overlaps: &'a Path, slices: &'a Path, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRecord {
    pub landslide_id: String,
    pub su_id: String,
    pub overlap_fraction: f64,
    pub slice_id: String,
}

/// Per-slice counts, unit-major `n × S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCounts {
    pub slice_ids: Vec<String>,
    pub counts: Vec<u32>,
}

impl SliceCounts {
    pub fn get(&self, unit: usize, slice: usize) -> u32 {
        self.counts[unit * self.slice_ids.len() + slice]
    }
}

/// Default share of a unit's area a landslide must exceed to be counted there.
pub const OVERLAP_THRESHOLD: f64 = 0.02;

/// Counts each (landslide, unit) pair whose overlap fraction strictly exceeds
/// `threshold`; one landslide can count in several units.
pub fn count_landslides(records: &[OverlapRecord], graph: &SlopeUnitGraph, slices: &[String], threshold: f64) -> Result<SliceCounts> {
    let s = slices.len();
    let slice_pos: HashMap<&str, usize> = slices.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut counts = vec![0u32; graph.n_units() * s];
    for (row, r) in records.iter().enumerate() {
        let row = row + 2;
        let unit = graph.index_of(&r.su_id).ok_or_else(|| Error::BadRow {
            context: "overlaps".into(),
            row,
            message: format!("unknown su_id '{}'", r.su_id),
        })?;
        let slice = *slice_pos.get(r.slice_id.as_str()).ok_or_else(|| Error::BadRow {
            context: "overlaps".into(),
            row,
            message: format!("unknown slice_id '{}'", r.slice_id),
        })?;
        if !(0.0..=1.0).contains(&r.overlap_fraction) {
            return Err(Error::BadRow {
                context: "overlaps".into(),
                row,
                message: format!("overlap_fraction {} outside [0, 1]", r.overlap_fraction),
            });
        }
        if r.overlap_fraction > threshold {
            counts[unit * s + slice] += 1;
        }
    }
    Ok(SliceCounts { slice_ids: slices.to_vec(), counts })
}

/// Slice → period assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMap {
    /// `(slice_id, 0-based period, period label)`
    pub entries: Vec<(String, usize, String)>,
}

impl SliceMap {
    /// Reads `slice_id,period_index,period_label` with 1-based periods.
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv_reader(path)?;
        expect_headers(&mut rdr, path, &["slice_id", "period_index", "period_label"])?;
        let mut entries = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let row = row + 2;
            let idx: usize = rec.get(1).unwrap_or("").parse().map_err(|_| bad_row(path, row, "period_index is not an integer"))?;
            if idx == 0 {
                return Err(bad_row(path, row, "period_index is 1-based"));
            }
            entries.push((rec.get(0).unwrap_or("").to_string(), idx - 1, rec.get(2).unwrap_or("").to_string()));
        }
        let map = Self { entries };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut labels: BTreeMap<usize, &str> = BTreeMap::new();
        for (s, p, l) in &self.entries {
            if let Some(prev) = seen.insert(s.as_str(), *p) {
                if prev != *p {
                    return Err(Error::Validation(format!("slice '{s}' mapped to two periods")));
                }
            }
            if let Some(prev) = labels.insert(*p, l.as_str()) {
                if prev != l {
                    return Err(Error::Validation(format!("period {} has two labels", p + 1)));
                }
            }
        }
        let t = self.n_periods();
        if labels.len() != t {
            return Err(Error::Validation("period indices must be contiguous from 1".into()));
        }
        Ok(())
    }

    pub fn n_periods(&self) -> usize {
        self.entries.iter().map(|e| e.1 + 1).max().unwrap_or(0)
    }

    pub fn slice_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.0.clone()).collect()
    }

    pub fn period_labels(&self) -> Vec<String> {
        let mut labels = vec![String::new(); self.n_periods()];
        for (_, p, l) in &self.entries {
            labels[*p] = l.clone();
        }
        labels
    }

    fn period_of(&self, slice: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.0 == slice).map(|e| e.1)
    }
}

/// Sums slice counts into periods (`n × T`, unit-major).
pub fn aggregate_periods(slice_counts: &SliceCounts, map: &SliceMap) -> Result<Vec<u32>> {
    let t = map.n_periods();
    let s = slice_counts.slice_ids.len();
    let n = slice_counts.counts.len() / s.max(1);
    let period: Vec<usize> = slice_counts
        .slice_ids
        .iter()
        .map(|id| map.period_of(id).ok_or_else(|| Error::Validation(format!("slice '{id}' is not mapped to a period"))))
        .collect::<Result<_>>()?;
    let mut out = vec![0u32; n * t];
    for i in 0..n {
        for (k, &p) in period.iter().enumerate() {
            out[i * t + p] += slice_counts.get(i, k);
        }
    }
    Ok(out)
}

/// Reads `id,<name1>,...` and returns names plus a row-major matrix in graph
/// order. Empty cells become `NaN`.
pub fn read_covariates(path: &Path, graph: &SlopeUnitGraph) -> Result<(Vec<String>, Vec<f64>)> {
    let mut rdr = csv_reader(path)?;
    let headers = expect_headers(&mut rdr, path, &["id"])?;
    let names: Vec<String> = headers[1..].to_vec();
    let p = names.len();
    let n = graph.n_units();
    let mut raw = vec![f64::NAN; n * p];
    let mut seen = vec![false; n];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = row + 2;
        let id = rec.get(0).unwrap_or("");
        let i = graph.index_of(id).ok_or_else(|| bad_row(path, row, &format!("unknown unit id '{id}'")))?;
        if seen[i] {
            return Err(bad_row(path, row, &format!("duplicate unit id '{id}'")));
        }
        seen[i] = true;
        for k in 0..p {
            let cell = rec.get(k + 1).unwrap_or("");
            raw[i * p + k] = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse().map_err(|_| bad_row(path, row, &format!("'{cell}' is not a number")))?
            };
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!("{}: no covariates for unit '{}'", path.display(), graph.ids()[i])));
    }
    Ok((names, raw))
}

pub fn read_counts(path: &Path, graph: &SlopeUnitGraph) -> Result<(Vec<String>, Vec<u32>)> {
    let mut rdr = csv_reader(path)?;
    expect_headers(&mut rdr, path, &["id", "period_index", "period_label", "count"])?;
    let mut rows = Vec::new();
    let mut labels: BTreeMap<usize, String> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = row + 2;
        let id = rec.get(0).unwrap_or("");
        let i = graph.index_of(id).ok_or_else(|| bad_row(path, row, &format!("unknown unit id '{id}'")))?;
        let p: usize = rec.get(1).unwrap_or("").parse().map_err(|_| bad_row(path, row, "period_index is not an integer"))?;
        if p == 0 {
            return Err(bad_row(path, row, "period_index is 1-based"));
        }
        let c: u32 = rec.get(3).unwrap_or("").parse().map_err(|_| bad_row(path, row, "count is not a nonnegative integer"))?;
        labels.entry(p - 1).or_insert_with(|| rec.get(2).unwrap_or("").to_string());
        rows.push((i, p - 1, c, row));
    }
    let t = labels.len();
    if labels.keys().last().map(|&k| k + 1) != Some(t) {
        return Err(Error::Validation(format!("{}: period indices must be contiguous from 1", path.display())));
    }
    let n = graph.n_units();
    let mut counts = vec![u32::MAX; n * t];
    for (i, j, c, row) in rows {
        if counts[i * t + j] != u32::MAX {
            return Err(bad_row(path, row, "duplicate (id, period_index)"));
        }
        counts[i * t + j] = c;
    }
    if let Some(k) = counts.iter().position(|&c| c == u32::MAX) {
        return Err(Error::Validation(format!(
            "{}: missing count for unit '{}' period {}",
            path.display(),
            graph.ids()[k / t],
            k % t + 1
        )));
    }
    Ok((labels.into_values().collect(), counts))
}

pub fn read_overlaps(path: &Path) -> Result<Vec<OverlapRecord>> {
    let mut rdr = csv_reader(path)?;
    expect_headers(&mut rdr, path, &["landslide_id", "su_id", "overlap_fraction", "slice_id"])?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = row + 2;
        let frac: f64 = rec.get(2).unwrap_or("").parse().map_err(|_| bad_row(path, row, "overlap_fraction is not a number"))?;
        out.push(OverlapRecord {
            landslide_id: rec.get(0).unwrap_or("").to_string(),
            su_id: rec.get(1).unwrap_or("").to_string(),
            overlap_fraction: frac,
            slice_id: rec.get(3).unwrap_or("").to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

/// Writes `units.csv` and `edges.csv` for a graph.
pub fn write_graph(graph: &SlopeUnitGraph, dir: &Path) -> Result<()> {
    let path = dir.join("units.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    let io = |e| Error::io(dir, e);
    writeln!(f, "id,area_m2").map_err(io)?;
    for (id, a) in graph.ids().iter().zip(graph.areas()) {
        writeln!(f, "{id},{a}").map_err(io)?;
    }
    f.flush().map_err(io)?;
    let path = dir.join("edges.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    writeln!(f, "id_a,id_b").map_err(io)?;
    for (i, j) in graph.edges() {
        writeln!(f, "{},{}", graph.ids()[i], graph.ids()[j]).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph3() -> SlopeUnitGraph {
        SlopeUnitGraph::new(vec!["a".into(), "b".into(), "c".into()], vec![1.0, 2.0, 3.0], &[(0, 1)]).unwrap()
    }

    fn rec(l: &str, su: &str, f: f64, s: &str) -> OverlapRecord {
        OverlapRecord { landslide_id: l.into(), su_id: su.into(), overlap_fraction: f, slice_id: s.into() }
    }

    #[test]
    fn multi_unit_landslide_counts_in_each_qualifying_unit() {
        let g = graph3();
        let recs = vec![rec("L1", "a", 0.50, "s1"), rec("L1", "b", 0.03, "s1"), rec("L1", "c", 0.01, "s1")];
        let c = count_landslides(&recs, &g, &["s1".into()], OVERLAP_THRESHOLD).unwrap();
        assert_eq!(c.counts, vec![1, 1, 0]);
    }

    #[test]
    fn threshold_is_strict() {
        let g = graph3();
        let c = count_landslides(&[rec("L1", "a", 0.02, "s1")], &g, &["s1".into()], 0.02).unwrap();
        assert_eq!(c.counts, vec![0, 0, 0]);
    }

    #[test]
    fn empty_overlaps_give_zero_counts() {
        let c = count_landslides(&[], &graph3(), &["s1".into(), "s2".into()], 0.02).unwrap();
        assert!(c.counts.iter().all(|&x| x == 0));
        assert_eq!(c.counts.len(), 6);
    }

    #[test]
    fn unknown_unit_or_slice_rejected_with_row() {
        let g = graph3();
        let err = count_landslides(&[rec("L1", "a", 0.5, "s1"), rec("L2", "zz", 0.5, "s1")], &g, &["s1".into()], 0.02).unwrap_err();
        assert!(err.to_string().contains("row 3"));
        assert!(count_landslides(&[rec("L1", "a", 0.5, "s9")], &g, &["s1".into()], 0.02).is_err());
    }

    #[test]
    fn slices_sum_into_periods() {
        let sc = SliceCounts { slice_ids: vec!["s1".into(), "s2".into()], counts: vec![2, 3] };
        let map = SliceMap { entries: vec![("s1".into(), 1, "T2".into()), ("s2".into(), 1, "T2".into()), ("s0".into(), 0, "T1".into())] };
        assert_eq!(aggregate_periods(&sc, &map).unwrap(), vec![0, 5]);
    }

    #[test]
    fn nineteen_slices_into_six_periods() {
        let groups = [3usize, 4, 2, 1, 8, 1];
        let mut entries = Vec::new();
        let mut s = 0;
        for (p, &g) in groups.iter().enumerate() {
            for _ in 0..g {
                entries.push((format!("s{s}"), p, format!("T{}", p + 1)));
                s += 1;
            }
        }
        assert_eq!(s, 19);
        let map = SliceMap { entries };
        let counts: Vec<u32> = (0..19).collect();
        let sc = SliceCounts { slice_ids: map.slice_ids(), counts: counts.clone() };
        let agg = aggregate_periods(&sc, &map).unwrap();
        assert_eq!(agg.len(), 6);
        assert_eq!(agg.iter().sum::<u32>(), counts.iter().sum::<u32>());
    }

    #[test]
    fn identity_mapping_is_unchanged_and_unmapped_rejected() {
        let sc = SliceCounts { slice_ids: vec!["a".into(), "b".into()], counts: vec![4, 7, 1, 0] };
        let map = SliceMap { entries: vec![("a".into(), 0, "A".into()), ("b".into(), 1, "B".into())] };
        assert_eq!(aggregate_periods(&sc, &map).unwrap(), sc.counts);
        let partial = SliceMap { entries: vec![("a".into(), 0, "A".into())] };
        assert!(aggregate_periods(&sc, &partial).is_err());
    }

    #[test]
    fn standardize_examples() {
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let names = vec!["x".to_string()];
        let (z, st) = standardize(&[1.0, 2.0, 3.0], 3, &names, &ids, SdKind::Sample).unwrap();
        assert_eq!(z, vec![-1.0, 0.0, 1.0]);
        assert_eq!(st.sds, vec![1.0]);
        let (z2, _) = standardize(&z, 3, &names, &ids, SdKind::Sample).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-12);
        }
        let err = standardize(&[5.0, 5.0, 5.0], 3, &names, &ids, SdKind::Sample).unwrap_err();
        assert!(err.to_string().contains("constant covariate"));
        let err = standardize(&[1.0, f64::NAN, 3.0], 3, &names, &ids, SdKind::Sample).unwrap_err();
        assert!(matches!(err, Error::MissingValue { .. }));
    }

    proptest! {
        #[test]
        fn lowering_threshold_never_decreases_counts(
            fracs in proptest::collection::vec((0usize..3, 0.0f64..1.0, 0usize..2), 0..40),
            t_hi in 0.0f64..0.5, dt in 0.0f64..0.5,
        ) {
            let g = graph3();
            let ids = ["a", "b", "c"];
            let slices = vec!["s0".to_string(), "s1".to_string()];
            let recs: Vec<_> = fracs.iter().enumerate()
                .map(|(k, &(u, f, s))| rec(&k.to_string(), ids[u], f, &slices[s])).collect();
            let hi = count_landslides(&recs, &g, &slices, t_hi).unwrap();
            let lo = count_landslides(&recs, &g, &slices, (t_hi - dt).max(0.0)).unwrap();
            prop_assert!(hi.counts.iter().zip(&lo.counts).all(|(h, l)| l >= h));
            let map = SliceMap { entries: vec![("s0".into(), 0, "T1".into()), ("s1".into(), 0, "T1".into())] };
            let agg = aggregate_periods(&lo, &map).unwrap();
            prop_assert_eq!(agg.iter().sum::<u32>(), lo.counts.iter().sum::<u32>());
        }

        #[test]
        fn standardization_is_idempotent_and_invertible(xs in proptest::collection::vec(-100.0f64..100.0, 4..30)) {
            let n = xs.len();
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let names = vec!["x".to_string()];
            let (z, st) = standardize(&xs, n, &names, &ids, SdKind::Sample).unwrap();
            let mean = z.iter().sum::<f64>() / n as f64;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
            let (z2, _) = standardize(&z, n, &names, &ids, SdKind::Sample).unwrap();
            prop_assert!(z.iter().zip(&z2).all(|(a, b)| (a - b).abs() < 1e-9));
            let back = st.invert(&z);
            prop_assert!(back.iter().zip(&xs).all(|(a, b)| (a - b).abs() < 1e-9 * b.abs().max(1.0)));
        }
    }
}
