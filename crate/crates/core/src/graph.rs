//! Areal-unit adjacency graph and the intrinsic Besag precision.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::{EnvelopeCholesky, Ordering, SparseSym, TripletBuilder};

/// Slope units with their areas and symmetric, loop-free adjacency.
///
/// Immutable once built; indices follow the order of the units file.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeUnitGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    areas: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
    components: Vec<usize>,
    n_components: usize,
}

impl SlopeUnitGraph {
    /// Builds a graph from unit ids, areas (m²) and index pairs. Duplicate and
    /// reversed pairs collapse to one edge.
    pub fn new(ids: Vec<String>, areas: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        if ids.len() != areas.len() {
            return Err(Error::Validation(format!("{} ids but {} areas", ids.len(), areas.len())));
        }
        if ids.is_empty() {
            return Err(Error::Validation("graph has no units".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate unit id '{id}'")));
            }
        }
        for (id, &a) in ids.iter().zip(&areas) {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Validation(format!("unit '{id}' has nonpositive area {a}")));
            }
        }
        let n = ids.len();
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::SelfLoop(ids[a].clone()));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let (components, n_components) = label_components(&neighbors);
        Ok(Self { ids, index, areas, neighbors, components, n_components })
    }

    /// Reads `id,area_m2` and `id_a,id_b` CSV files.
    pub fn load(units: &Path, edges: &Path) -> Result<Self> {
        let mut ids = Vec::new();
        let mut areas = Vec::new();
        let mut rdr = csv_reader(units)?;
        expect_headers(&mut rdr, units, &["id", "area_m2"])?;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(units, e))?;
            let row = row + 2;
            let id = rec.get(0).unwrap_or("").trim().to_string();
            let area: f64 = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| bad_row(units, row, "area_m2 is not a number"))?;
            if !(area > 0.0) {
                return Err(bad_row(units, row, &format!("nonpositive area {area} for unit '{id}'")));
            }
            ids.push(id);
            areas.push(area);
        }
        let lookup: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut pairs = Vec::new();
        let mut rdr = csv_reader(edges)?;
        expect_headers(&mut rdr, edges, &["id_a", "id_b"])?;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(edges, e))?;
            let row = row + 2;
            let a = rec.get(0).unwrap_or("").trim();
            let b = rec.get(1).unwrap_or("").trim();
            let ia = *lookup.get(a).ok_or_else(|| bad_row(edges, row, &format!("unknown unit id '{a}'")))?;
            let ib = *lookup.get(b).ok_or_else(|| bad_row(edges, row, &format!("unknown unit id '{b}'")))?;
            if ia == ib {
                return Err(bad_row(edges, row, &format!("self-loop on unit '{a}'")));
            }
            pairs.push((ia, ib));
        }
        Self::new(ids, areas, &pairs)
    }

    /// Rook-adjacency lattice of `width × height` cells with a common area.
    pub fn lattice(width: usize, height: usize, area_m2: f64) -> Self {
        let id = |x: usize, y: usize| y * width + x;
        let ids = (0..width * height).map(|i| format!("su{i:05}")).collect();
        let mut edges = Vec::new();
        for y in 0..height {
            for x in 0..width {
                if x + 1 < width {
                    edges.push((id(x, y), id(x + 1, y)));
                }
                if y + 1 < height {
                    edges.push((id(x, y), id(x, y + 1)));
                }
            }
        }
        Self::new(ids, vec![area_m2; width * height], &edges).expect("lattice is valid")
    }

    pub fn n_units(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn components(&self) -> &[usize] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Member lists, indexed by component label.
    pub fn component_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_components];
        for (i, &c) in self.components.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn isolated_units(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| self.neighbors[i].is_empty()).collect()
    }

    /// Intrinsic Besag precision: `tau * degree` on the diagonal, `-tau` per edge.
    pub fn besag_precision(&self, tau: f64) -> SparseSym {
        let mut b = TripletBuilder::with_capacity(self.n_units(), self.n_units() + self.n_edges());
        for i in 0..self.n_units() {
            b.add(i, i, tau * self.degree(i) as f64);
        }
        for (i, j) in self.edges() {
            b.add(i, j, -tau);
        }
        b.build()
    }

    /// Log of the product of nonzero eigenvalues of the unit-`tau` Besag
    /// precision, by the matrix-tree theorem on each component.
    pub fn log_pseudo_det(&self) -> Result<f64> {
        let mut total = 0.0;
        for members in self.component_members() {
            let m = members.len();
            if m < 2 {
                continue;
            }
            // Reduced Laplacian: drop the last member.
            let keep = &members[..m - 1];
            let pos: HashMap<usize, usize> = keep.iter().enumerate().map(|(k, &i)| (i, k)).collect();
            let mut b = TripletBuilder::new(m - 1);
            for (k, &i) in keep.iter().enumerate() {
                b.add(k, k, self.degree(i) as f64);
                for &j in &self.neighbors[i] {
                    if let Some(&kj) = pos.get(&j) {
                        if kj > k {
                            b.add(k, kj, -1.0);
                        }
                    }
                }
            }
            let lap = b.build();
            let chol = EnvelopeCholesky::factor(&lap, &Ordering::rcm_with_tail(&lap, &[]))?;
            total += chol.log_det() + (m as f64).ln();
        }
        Ok(total)
    }
}

/// Component labels `0..k`, numbered by first appearance.
pub fn connected_components(g: &SlopeUnitGraph) -> Vec<usize> {
    label_components(&g.neighbors).0
}

fn label_components(neighbors: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let n = neighbors.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            for &w in &neighbors[v] {
                if label[w] == usize::MAX {
                    label[w] = next;
                    queue.push_back(w);
                }
            }
        }
        next += 1;
    }
    (label, next)
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

pub(crate) fn expect_headers(rdr: &mut csv::Reader<std::fs::File>, path: &Path, expected: &[&str]) -> Result<Vec<String>> {
    let headers: Vec<String> = rdr.headers().map_err(|e| Error::csv(path, e))?.iter().map(str::to_string).collect();
    if headers.len() < expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Validation(format!(
            "{}: expected header starting with '{}', found '{}'",
            path.display(),
            expected.join(","),
            headers.join(",")
        )));
    }
    Ok(headers)
}

pub(crate) fn bad_row(path: &Path, row: usize, message: &str) -> Error {
    Error::BadRow { context: path.display().to_string(), row, message: message.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = SlopeUnitGraph::new(ids(&["a", "b", "c"]), vec![100.0, 200.0, 300.0], &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.degrees(), vec![1, 1, 0]);
        assert_eq!(g.n_components(), 2);
    }

    #[test]
    fn self_loop_is_rejected() {
        let err = SlopeUnitGraph::new(ids(&["a"]), vec![1.0], &[(0, 0)]).unwrap_err();
        assert!(err.to_string().contains("self-loop"));
    }

    #[test]
    fn nonpositive_area_is_rejected() {
        assert!(SlopeUnitGraph::new(ids(&["a", "b"]), vec![1.0, 0.0], &[]).is_err());
    }

    #[test]
    fn path_graph_precision() {
        let g = SlopeUnitGraph::new(ids(&["a", "b", "c"]), vec![1.0; 3], &[(0, 1), (1, 2)]).unwrap();
        let q = g.besag_precision(1.0).to_dense();
        let expect = nalgebra::DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(q, expect);
    }

    #[test]
    fn full_conditional_is_neighbour_mean() {
        // Node b of the path a-b-c with neighbours at 1 and 3.
        let g = SlopeUnitGraph::new(ids(&["a", "b", "c"]), vec![1.0; 3], &[(0, 1), (1, 2)]).unwrap();
        let q = g.besag_precision(1.0);
        let x = [1.0, 0.0, 3.0];
        let qbb = q.get(1, 1);
        let mean = -(q.get(1, 0) * x[0] + q.get(1, 2) * x[2]) / qbb;
        assert_eq!(mean, 2.0);
        assert_eq!(1.0 / qbb, 0.5);
    }

    #[test]
    fn components_examples() {
        let g = SlopeUnitGraph::new(ids(&["a", "b", "c"]), vec![1.0; 3], &[(0, 1)]).unwrap();
        assert_eq!(connected_components(&g), vec![0, 0, 1]);
        let tri = SlopeUnitGraph::new(ids(&["a", "b", "c"]), vec![1.0; 3], &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(connected_components(&tri), vec![0, 0, 0]);
        let empty = SlopeUnitGraph::new(ids(&["a", "b", "c", "d"]), vec![1.0; 4], &[]).unwrap();
        assert_eq!(connected_components(&empty), vec![0, 1, 2, 3]);
    }

    #[test]
    fn pseudo_det_matches_eigenvalues() {
        let g = SlopeUnitGraph::lattice(3, 3, 1.0);
        let eig = g.besag_precision(1.0).to_dense().symmetric_eigenvalues();
        let expect: f64 = eig.iter().filter(|&&e| e > 1e-9).map(|e| e.ln()).sum();
        assert!((g.log_pseudo_det().unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn load_rejects_unknown_id_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let units = dir.path().join("units.csv");
        let edges = dir.path().join("edges.csv");
        std::fs::write(&units, "id,area_m2\na,100\nb,200\n").unwrap();
        std::fs::write(&edges, "id_a,id_b\na,b\nb,zz\n").unwrap();
        let err = SlopeUnitGraph::load(&units, &edges).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("zz"), "{msg}");
    }

    fn arb_graph() -> impl Strategy<Value = SlopeUnitGraph> {
        (2usize..15).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..(2 * n)).prop_map(move |pairs| {
                let edges: Vec<(usize, usize)> = pairs.into_iter().filter(|(a, b)| a != b).collect();
                SlopeUnitGraph::new((0..n).map(|i| i.to_string()).collect(), vec![1.0; n], &edges).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn besag_rows_sum_to_zero_and_scale(g in arb_graph(), tau in 0.01f64..100.0) {
            let q = g.besag_precision(tau);
            let q1 = g.besag_precision(1.0);
            for i in 0..g.n_units() {
                let s: f64 = q.row(i).map(|(_, v)| v).sum();
                prop_assert!(s.abs() < 1e-9 * tau.max(1.0));
                for (j, v) in q.row(i) {
                    prop_assert_eq!(v, q.get(j, i));
                    prop_assert!((v - tau * q1.get(i, j)).abs() <= 1e-12 * tau);
                }
            }
            let eig = q1.to_dense().symmetric_eigenvalues();
            let zeros = eig.iter().filter(|e| e.abs() < 1e-9).count();
            prop_assert_eq!(zeros, g.n_components());
            for (i, j) in g.edges() {
                prop_assert_eq!(g.components()[i], g.components()[j]);
            }
        }
    }
}
