//! Sparse symmetric matrices and an envelope (profile) Cholesky factorization.
//!
//! Precision matrices in this crate are sparse in the latent-field block and
//! dense in a handful of trailing fixed-effect rows. A profile factorization
//! with a reverse Cuthill-McKee ordering of the sparse part and the dense rows
//! placed last keeps fill confined to the band plus the trailing rows.

use std::collections::VecDeque;

use nalgebra::DMatrix;

/// Symmetric sparse matrix stored in compressed-row form with both triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates symmetric entries; duplicates are summed.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self { n, entries: Vec::with_capacity(cap) }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` at `(i, j)` and, when `i != j`, at `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((r, c, v));
    }

    /// Adds `scale * m` entrywise.
    pub fn add_matrix(&mut self, m: &SparseSym, scale: f64) {
        assert_eq!(m.n, self.n);
        for (i, j, v) in m.iter_upper() {
            self.entries.push((i, j, scale * v));
        }
    }

    /// Adds `scale * m` with `m`'s indices shifted by `offset`.
    pub fn add_block(&mut self, m: &SparseSym, offset: usize, scale: f64) {
        for (i, j, v) in m.iter_upper() {
            self.entries.push((offset + i, offset + j, scale * v));
        }
    }

    pub fn build(mut self) -> SparseSym {
        let mut full: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len() * 2);
        self.entries.sort_unstable_by_key(|e| (e.0, e.1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for (r, c, v) in self.entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        for &(r, c, v) in &merged {
            full.push((r, c, v));
            if r != c {
                full.push((c, r, v));
            }
        }
        full.sort_unstable_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; self.n + 1];
        for &(r, _, _) in &full {
            row_ptr[r + 1] += 1;
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSym {
            n: self.n,
            row_ptr,
            col_idx: full.iter().map(|e| e.1).collect(),
            values: full.iter().map(|e| e.2).collect(),
        }
    }
}

impl SparseSym {
    pub fn zeros(n: usize) -> Self {
        TripletBuilder::new(n).build()
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.add(i, i, scale);
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// Entries with `i <= j`.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).filter(move |&(j, _)| j >= i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            for j in i..n {
                if m[(i, j)] != 0.0 {
                    b.add(i, j, m[(i, j)]);
                }
            }
        }
        b.build()
    }

    /// Kronecker product `a ⊗ b`; index `(ia * b.n + ib)`.
    pub fn kron(a: &SparseSym, b: &SparseSym) -> Self {
        let mut out = TripletBuilder::with_capacity(a.n * b.n, a.nnz() * b.nnz());
        for (ia, ja, va) in a.iter_upper() {
            for i in 0..b.n {
                for (j, vb) in b.row(i) {
                    let r = ia * b.n + i;
                    let c = ja * b.n + j;
                    // Off-diagonal blocks of `a` are mirrored by `add`; within a
                    // diagonal block keep only the upper half of `b`.
                    if ia == ja && j < i {
                        continue;
                    }
                    out.add(r, c, va * vb);
                }
            }
        }
        out.build()
    }
}

/// Fill-reducing symmetric permutation: `perm[new] = old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering {
    pub perm: Vec<usize>,
    pub inv: Vec<usize>,
}

impl Ordering {
    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect(), inv: (0..n).collect() }
    }

    fn from_perm(perm: Vec<usize>) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        Self { perm, inv }
    }

    /// Reverse Cuthill-McKee on the graph of `a` restricted to indices not in
    /// `tail`, followed by the `tail` indices in the given order.
    pub fn rcm_with_tail(a: &SparseSym, tail: &[usize]) -> Self {
        let n = a.dim();
        let mut is_tail = vec![false; n];
        for &t in tail {
            is_tail[t] = true;
        }
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                if is_tail[i] {
                    return Vec::new();
                }
                a.row(i).map(|(j, _)| j).filter(|&j| j != i && !is_tail[j]).collect()
            })
            .collect();
        let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

        let mut visited = is_tail.clone();
        let mut order = Vec::with_capacity(n);
        for seed in 0..n {
            if visited[seed] {
                continue;
            }
            let start = pseudo_peripheral(&adj, seed, &is_tail);
            let mut queue = VecDeque::new();
            queue.push_back(start);
            visited[start] = true;
            while let Some(v) = queue.pop_front() {
                order.push(v);
                let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
                next.sort_by_key(|&w| (degree[w], w));
                for w in next {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
        order.reverse();
        order.extend_from_slice(tail);
        Self::from_perm(order)
    }
}

fn bfs_levels(adj: &[Vec<usize>], start: usize, blocked: &[bool]) -> Vec<usize> {
    let mut level = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    level[start] = 0;
    queue.push_back(start);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if level[w] == usize::MAX && !blocked[w] {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    level
}

fn pseudo_peripheral(adj: &[Vec<usize>], seed: usize, blocked: &[bool]) -> usize {
    let mut current = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let level = bfs_levels(adj, current, blocked);
        let far = level
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != usize::MAX)
            .max_by_key(|&(i, &l)| (l, std::cmp::Reverse(adj[i].len()), std::cmp::Reverse(i)))
            .map(|(i, &l)| (i, l))
            .unwrap_or((current, 0));
        if far.1 <= ecc {
            break;
        }
        ecc = far.1;
        current = far.0;
    }
    current
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

/// Lower-triangular profile storage: row `r` holds columns `first[r]..=r`.
#[derive(Debug, Clone)]
pub struct Envelope {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Envelope {
    fn from_first(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut acc = 0;
        for (r, &f) in first.iter().enumerate() {
            start.push(acc);
            acc += r - f + 1;
        }
        start.push(acc);
        Self { first, start, data: vec![0.0; acc] }
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(c <= r && c >= self.first[r]);
        self.start[r] + (c - self.first[r])
    }

    #[inline]
    fn row(&self, r: usize) -> &[f64] {
        &self.data[self.start[r]..self.start[r + 1]]
    }

    /// Entry `(r, c)` of the symmetric matrix, or `None` outside the profile.
    pub fn get_sym(&self, r: usize, c: usize) -> Option<f64> {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        if c < self.first[r] {
            None
        } else {
            Some(self.data[self.idx(r, c)])
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `P A Pᵀ = L Lᵀ` with `L` held in profile form.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    ordering: Ordering,
    l: Envelope,
}

impl EnvelopeCholesky {
    pub fn factor(a: &SparseSym, ordering: &Ordering) -> Result<Self, NotPositiveDefinite> {
        let n = a.dim();
        assert_eq!(ordering.perm.len(), n);
        let mut first: Vec<usize> = (0..n).collect();
        for (new_r, &old_r) in ordering.perm.iter().enumerate() {
            for (old_c, _) in a.row(old_r) {
                let new_c = ordering.inv[old_c];
                if new_c < first[new_r] {
                    first[new_r] = new_c;
                }
            }
        }
        let mut l = Envelope::from_first(first);
        for (new_r, &old_r) in ordering.perm.iter().enumerate() {
            for (old_c, v) in a.row(old_r) {
                let new_c = ordering.inv[old_c];
                if new_c <= new_r {
                    let k = l.idx(new_r, new_c);
                    l.data[k] += v;
                }
            }
        }

        for i in 0..n {
            let fi = l.first[i];
            let si = l.start[i];
            for j in fi..i {
                let fj = l.first[j];
                let lo = fi.max(fj);
                let sj = l.start[j];
                let mut s = l.data[si + (j - fi)];
                let ri = &l.data[si + (lo - fi)..si + (j - fi)];
                let rj = &l.data[sj + (lo - fj)..sj + (j - fj)];
                s -= dot(ri, rj);
                let djj = l.data[sj + (j - fj)];
                l.data[si + (j - fi)] = s / djj;
            }
            let row = &l.data[si..si + (i - fi)];
            let d = l.data[si + (i - fi)] - dot(row, row);
            if !(d > 0.0) || !d.is_finite() {
                return Err(NotPositiveDefinite { pivot: ordering.perm[i], value: d });
            }
            l.data[si + (i - fi)] = d.sqrt();
        }
        Ok(Self { n, ordering: ordering.clone(), l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        self.l.data[self.l.start[i + 1] - 1]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// `y = L⁻¹ P b` (result in permuted coordinates).
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.ordering.perm.iter().map(|&o| b[o]).collect();
        self.forward_in_place(&mut y);
        y
    }

    fn forward_in_place(&self, y: &mut [f64]) {
        for i in 0..self.n {
            let fi = self.l.first[i];
            let row = self.l.row(i);
            let s = dot(&row[..i - fi], &y[fi..i]);
            y[i] = (y[i] - s) / row[i - fi];
        }
    }

    fn backward_in_place(&self, y: &mut [f64]) {
        for i in (0..self.n).rev() {
            let fi = self.l.first[i];
            let row = self.l.row(i);
            y[i] /= row[i - fi];
            let xi = y[i];
            for (k, &lik) in row[..i - fi].iter().enumerate() {
                y[fi + k] -= lik * xi;
            }
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = self.forward(b);
        self.backward_in_place(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.ordering.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// `x = P ᵀ L⁻ᵀ z`, i.e. a draw from `N(0, A⁻¹)` when `z` is standard normal.
    pub fn solve_lt(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.backward_in_place(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.ordering.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Entries of `A⁻¹` on the profile of `L` (Takahashi recursions), in
    /// permuted coordinates. Use [`SelectedInverse::get`] with original indices.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let n = self.n;
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for r in 0..n {
            for c in self.l.first[r]..r {
                cols[c].push(r);
            }
        }
        let mut s = Envelope { first: self.l.first.clone(), start: self.l.start.clone(), data: vec![0.0; self.l.len()] };
        let mut lcol: Vec<f64> = Vec::new();
        for i in (0..n).rev() {
            let lii = self.diag(i);
            let below = &cols[i];
            lcol.clear();
            lcol.extend(below.iter().map(|&k| self.l.data[self.l.idx(k, i)]));
            // Off-diagonal entries of column i only need rows and columns > i.
            for &j in below {
                let mut acc = 0.0;
                for (&k, &lki) in below.iter().zip(&lcol) {
                    let v = s.get_sym(k, j).expect("profile is closed under the recursion");
                    acc += lki * v;
                }
                let k = s.idx(j, i);
                s.data[k] = -acc / lii;
            }
            let mut acc = 0.0;
            for (&k, &lki) in below.iter().zip(&lcol) {
                acc += lki * s.data[s.idx(k, i)];
            }
            let k = s.idx(i, i);
            s.data[k] = 1.0 / (lii * lii) - acc / lii;
        }
        SelectedInverse { inv: self.ordering.inv.clone(), env: s }
    }
}

/// Entries of an inverse on the factor's profile.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    inv: Vec<usize>,
    env: Envelope,
}

impl SelectedInverse {
    /// `(A⁻¹)_{ij}` for original indices, if inside the profile.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.env.get_sym(self.inv[i], self.inv[j])
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, seed: u64) -> SparseSym {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TripletBuilder::new(n);
        let mut rowsum = vec![0.0; n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < density {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    b.add(i, j, v);
                    rowsum[i] += v.abs();
                    rowsum[j] += v.abs();
                }
            }
        }
        for (i, s) in rowsum.iter().enumerate() {
            b.add(i, i, s + 0.5);
        }
        b.build()
    }

    #[test]
    fn builder_sums_duplicates_and_mirrors() {
        let mut b = TripletBuilder::new(3);
        b.add(0, 1, 1.0);
        b.add(1, 0, 2.0);
        b.add(2, 2, 4.0);
        let m = b.build();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(m.get(2, 2), 4.0);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn cholesky_matches_dense_solve_and_logdet() {
        for seed in 0..5 {
            let a = random_spd(40, 0.08, seed);
            let dense = a.to_dense();
            let ord = Ordering::rcm_with_tail(&a, &[38, 39]);
            let chol = EnvelopeCholesky::factor(&a, &ord).unwrap();
            let b: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
            let x = chol.solve(&b);
            let r = &dense * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
            assert!(r.amax() < 1e-10);
            let ld = dense.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
            assert!((chol.log_det() - ld).abs() < 1e-9);
        }
    }

    #[test]
    fn selected_inverse_matches_dense_inverse() {
        let a = random_spd(30, 0.1, 7);
        let inv = a.to_dense().try_inverse().unwrap();
        let ord = Ordering::rcm_with_tail(&a, &[29]);
        let chol = EnvelopeCholesky::factor(&a, &ord).unwrap();
        let sel = chol.selected_inverse();
        let mut checked = 0;
        for i in 0..30 {
            for j in 0..30 {
                if let Some(v) = sel.get(i, j) {
                    assert!((v - inv[(i, j)]).abs() < 1e-10, "({i},{j})");
                    checked += 1;
                }
            }
            assert!(sel.get(i, i).is_some());
        }
        assert!(checked > 30);
    }

    #[test]
    fn not_positive_definite_is_reported() {
        let mut b = TripletBuilder::new(2);
        b.add(0, 0, 1.0);
        b.add(1, 1, 1.0);
        b.add(0, 1, 2.0);
        let a = b.build();
        assert!(EnvelopeCholesky::factor(&a, &Ordering::identity(2)).is_err());
    }

    #[test]
    fn kron_matches_dense() {
        let a = random_spd(3, 0.9, 1);
        let b = random_spd(4, 0.6, 2);
        let k = SparseSym::kron(&a, &b).to_dense();
        let expect = a.to_dense().kronecker(&b.to_dense());
        assert!((k - expect).amax() < 1e-14);
    }
}
