//! Sparse matrices and sparse Cholesky factorisation.
//!
//! [`CscMatrix`] is a small compressed-sparse-column container used for every
//! precision and observation operator in the crate. Factorisation is delegated
//! to faer's supernodal Cholesky (AMD ordering); selected inversion of the
//! factor (Takahashi recursions) and the transposed triangular solve used for
//! sampling are implemented here on an extracted column-compressed factor.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LltRef, SymbolicCholesky as FaerSymbolic,
    SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, Mat, Par, Side};

use crate::error::{Error, Result};

/// Compressed sparse column matrix. Row indices are sorted and unique within
/// each column; explicit zeros are kept so that patterns stay fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            counts[j + 1] += 1;
        }
        for j in 0..ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            let p = next[j];
            rows[p] = i;
            vals[p] = v;
            next[j] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for j in 0..ncols {
            scratch.clear();
            scratch.extend((counts[j]..counts[j + 1]).map(|p| (rows[p], vals[p])));
            scratch.sort_by_key(|&(i, _)| i);
            let mut last = usize::MAX;
            for &(i, v) in &scratch {
                if i == last {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                    last = i;
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self { nrows, ncols, col_ptr, row_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, col_ptr: vec![0; ncols + 1], row_idx: Vec::new(), values: Vec::new() }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    /// Position of entry `(i, j)` in the value array, if structurally present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.col_ptr[j];
        let rows = &self.row_idx[start..self.col_ptr[j + 1]];
        rows.binary_search(&i).ok().map(|p| start + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], j, self.values[p]))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
        y
    }

    /// `selfᵀ x`
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| (self.col_ptr[j]..self.col_ptr[j + 1]).map(|p| self.values[p] * x[self.row_idx[p]]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let trips: Vec<_> = self.iter().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &trips)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self + s * other`
    pub fn add_scaled(&self, other: &Self, s: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut trips: Vec<_> = self.iter().collect();
        trips.extend(other.iter().map(|(i, j, v)| (i, j, s * v)));
        Self::from_triplets(self.nrows, self.ncols, &trips)
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut trips = Vec::new();
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut touched = Vec::new();
        for j in 0..other.ncols {
            touched.clear();
            for p in other.col_ptr[j]..other.col_ptr[j + 1] {
                let k = other.row_idx[p];
                let b = other.values[p];
                for q in self.col_ptr[k]..self.col_ptr[k + 1] {
                    let i = self.row_idx[q];
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        touched.push(i);
                    }
                    acc[i] += self.values[q] * b;
                }
            }
            for &i in &touched {
                trips.push((i, j, acc[i]));
            }
        }
        Self::from_triplets(self.nrows, other.ncols, &trips)
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        let mut trips = Vec::with_capacity(self.nnz() * other.nnz());
        for (i, j, a) in self.iter() {
            for (k, l, b) in other.iter() {
                trips.push((i * other.nrows + k, j * other.ncols + l, a * b));
            }
        }
        Self::from_triplets(self.nrows * other.nrows, self.ncols * other.ncols, &trips)
    }

    /// Lower triangle (including the diagonal).
    pub fn lower_triangle(&self) -> Self {
        let trips: Vec<_> = self.iter().filter(|&(i, j, _)| i >= j).collect();
        Self::from_triplets(self.nrows, self.ncols, &trips)
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.iter() {
            d[i][j] += v;
        }
        d
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.nrows == self.ncols && self.iter().all(|(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }

    fn faer_symbolic(&self) -> SymbolicSparseColMatRef<'_, usize> {
        SymbolicSparseColMatRef::new_checked(self.nrows, self.ncols, &self.col_ptr, None, &self.row_idx)
    }
}

/// Symbolic analysis (fill-reducing ordering plus elimination structure) for
/// a fixed lower-triangular pattern. Reused across numeric factorisations.
#[derive(Debug)]
pub struct SymbolicCholesky {
    inner: FaerSymbolic<usize>,
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyses the pattern of `lower`, which must hold the lower triangle
    /// (diagonal included) of a symmetric matrix.
    pub fn analyze(lower: &CscMatrix) -> Result<Arc<Self>> {
        if lower.nrows != lower.ncols {
            return Err(Error::Dimension(format!(
                "cholesky needs a square matrix, got {}x{}",
                lower.nrows, lower.ncols
            )));
        }
        let params = CholeskySymbolicParams {
            supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
            ..Default::default()
        };
        let inner = factorize_symbolic_cholesky(lower.faer_symbolic(), Side::Lower, SymmetricOrdering::Amd, params)
            .map_err(|e| Error::Numerical(format!("symbolic cholesky failed: {e:?}")))?;
        Ok(Arc::new(Self { inner, n: lower.nrows, col_ptr: lower.col_ptr.clone(), row_idx: lower.row_idx.clone() }))
    }

    /// Like [`SymbolicCholesky::analyze`], but also tries a nested-dissection
    /// ordering driven by vertex coordinates and keeps whichever ordering
    /// gives the smaller factor. Vertices without coordinates go last.
    pub fn analyze_with_coordinates(lower: &CscMatrix, coords: &[Option<[f64; 3]>]) -> Result<Arc<Self>> {
        let amd = Self::analyze(lower)?;
        if coords.len() != lower.nrows {
            return Err(Error::Dimension(format!("{} coordinates for a {}-dimensional matrix", coords.len(), lower.nrows)));
        }
        let fwd = nested_dissection(lower, coords);
        let mut inv = vec![0usize; fwd.len()];
        for (new, &old) in fwd.iter().enumerate() {
            inv[old] = new;
        }
        let params = CholeskySymbolicParams {
            supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
            ..Default::default()
        };
        let perm = faer::perm::PermRef::new_checked(&fwd, &inv, fwd.len());
        let inner = factorize_symbolic_cholesky(lower.faer_symbolic(), Side::Lower, SymmetricOrdering::Custom(perm), params)
            .map_err(|e| Error::Numerical(format!("symbolic cholesky failed: {e:?}")))?;
        let nd = Arc::new(Self { inner, n: lower.nrows, col_ptr: lower.col_ptr.clone(), row_idx: lower.row_idx.clone() });
        log::debug!("factorisation flops: amd {:.3e} nested dissection {:.3e}", amd.flops(), nd.flops());
        Ok(if nd.flops() < amd.flops() { nd } else { amd })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor values (a proxy for fill-in).
    pub fn factor_len(&self) -> usize {
        self.inner.len_val()
    }

    /// Approximate multiply-add count of one numeric factorisation.
    pub fn flops(&self) -> f64 {
        let SymbolicCholeskyRaw::Supernodal(sym) = self.inner.raw() else {
            return self.inner.len_val() as f64;
        };
        let (begin, end, ptr) = (sym.supernode_begin(), sym.supernode_end(), sym.col_ptr_for_row_idx());
        let mut total = 0.0;
        for s in 0..sym.n_supernodes() {
            let ncols = end[s] - begin[s];
            let nrows = ncols + ptr[s + 1] - ptr[s];
            total += (0..ncols).map(|c| ((nrows - c) as f64).powi(2)).sum::<f64>();
        }
        total
    }

    fn matches(&self, lower: &CscMatrix) -> bool {
        lower.nrows == self.n && lower.col_ptr == self.col_ptr && lower.row_idx == self.row_idx
    }
}

/// Nested-dissection elimination order (new position -> original index).
/// Each level splits at the coordinate median along the axis giving the
/// smallest one-sided vertex separator.
fn nested_dissection(lower: &CscMatrix, coords: &[Option<[f64; 3]>]) -> Vec<usize> {
    let n = lower.nrows;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in lower.iter() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut side = vec![0u8; n];
    let mut order = Vec::with_capacity(n);
    let placed: Vec<usize> = (0..n).filter(|&i| coords[i].is_some()).collect();
    // (set, emit): emit appends the set without further splitting
    let mut stack = vec![(placed, false)];
    while let Some((set, emit)) = stack.pop() {
        if emit || set.len() <= 48 {
            order.extend_from_slice(&set);
            continue;
        }
        let mut best: Option<(Vec<usize>, Vec<usize>, Vec<usize>)> = None;
        for axis in 0..3 {
            let mut sorted = set.clone();
            sorted.sort_by(|&a, &b| {
                let (ca, cb) = (coords[a].unwrap()[axis], coords[b].unwrap()[axis]);
                ca.total_cmp(&cb).then(a.cmp(&b))
            });
            let half = sorted.len() / 2;
            for &v in &set {
                side[v] = 2;
            }
            for &v in &sorted[..half] {
                side[v] = 1;
            }
            let (mut a, mut sep) = (Vec::new(), Vec::new());
            for &v in &sorted[..half] {
                if adj[v].iter().any(|&u| side[u] == 2) {
                    sep.push(v);
                } else {
                    a.push(v);
                }
            }
            let b = sorted[half..].to_vec();
            for &v in &set {
                side[v] = 0;
            }
            if a.is_empty() || b.is_empty() {
                continue;
            }
            if best.as_ref().is_none_or(|(_, _, s)| sep.len() < s.len()) {
                best = Some((a, b, sep));
            }
        }
        match best {
            // stack is LIFO: separator emitted after both halves
            Some((a, b, sep)) => {
                stack.push((sep, true));
                stack.push((b, false));
                stack.push((a, false));
            }
            None => order.extend_from_slice(&set),
        }
    }
    order.extend((0..n).filter(|&i| coords[i].is_none()));
    order
}

/// Numeric Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    /// Factorises the symmetric matrix whose lower triangle is `lower`. The
    /// pattern must equal the one `symbolic` was built from.
    pub fn factorize(symbolic: &Arc<SymbolicCholesky>, lower: &CscMatrix) -> Result<Self> {
        if !symbolic.matches(lower) {
            return Err(Error::Dimension("matrix pattern differs from the analysed pattern".into()));
        }
        if lower.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in matrix to factorise".into()));
        }
        let mut values = vec![0.0; symbolic.inner.len_val()];
        let a = SparseColMatRef::new(lower.faer_symbolic(), &lower.values);
        let par = Par::Seq;
        let mut mem = MemBuffer::new(symbolic.inner.factorize_numeric_llt_scratch::<f64>(par, Default::default()));
        let regularization =
            LltRegularization { dynamic_regularization_delta: 0.0, dynamic_regularization_epsilon: 0.0 };
        symbolic
            .inner
            .factorize_numeric_llt(
                &mut values,
                a,
                Side::Lower,
                regularization,
                par,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| Error::Numerical(format!("matrix is not positive definite: {e:?}")))?;
        Ok(Self { symbolic: symbolic.clone(), values })
    }

    /// Analyse and factorise in one step.
    pub fn new(lower: &CscMatrix) -> Result<Self> {
        let symbolic = SymbolicCholesky::analyze(lower)?;
        Self::factorize(&symbolic, lower)
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    fn llt(&self) -> LltRef<'_, usize, f64> {
        LltRef::new(&self.symbolic.inner, &self.values)
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_column(|_, rows, vals| {
            debug_assert!(!rows.is_empty());
            acc += vals[0].ln();
        });
        2.0 * acc
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.dim();
        assert_eq!(rhs.len(), n);
        let mut mat = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
        self.solve_mat_in_place(&mut mat);
        for (i, r) in rhs.iter_mut().enumerate() {
            *r = mat[(i, 0)];
        }
    }

    /// Solves `A X = B` for a block of right-hand sides (columns of `rhs`).
    pub fn solve_columns(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.dim();
        if rhs.is_empty() {
            return Vec::new();
        }
        let mut mat = Mat::<f64>::from_fn(n, rhs.len(), |i, j| rhs[j][i]);
        self.solve_mat_in_place(&mut mat);
        (0..rhs.len()).map(|j| (0..n).map(|i| mat[(i, j)]).collect()).collect()
    }

    fn solve_mat_in_place(&self, mat: &mut Mat<f64>) {
        let llt = self.llt();
        let k = mat.ncols();
        let mut mem = MemBuffer::new(self.symbolic.inner.solve_in_place_scratch::<f64>(k, Par::Seq));
        llt.solve_in_place_with_conj(Conj::No, mat.as_mut(), Par::Seq, MemStack::new(&mut mem));
    }

    /// Visits the columns of `L` in factor order, giving `(column, rows, values)`
    /// with the diagonal first and remaining rows ascending.
    fn for_each_column(&self, mut f: impl FnMut(usize, &[usize], &[f64])) {
        let SymbolicCholeskyRaw::Supernodal(sym) = self.symbolic.inner.raw() else {
            unreachable!("supernodal factorisation is forced during analysis")
        };
        let begin = sym.supernode_begin();
        let end = sym.supernode_end();
        let col_ptr_row = sym.col_ptr_for_row_idx();
        let col_ptr_val = sym.col_ptr_for_val();
        let row_idx = sym.row_idx();
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        for s in 0..sym.n_supernodes() {
            let start = begin[s];
            let ncols = end[s] - start;
            let pattern = &row_idx[col_ptr_row[s]..col_ptr_row[s + 1]];
            let nrows = ncols + pattern.len();
            let block = &self.values[col_ptr_val[s]..col_ptr_val[s + 1]];
            debug_assert_eq!(block.len(), nrows * ncols);
            for c in 0..ncols {
                rows.clear();
                vals.clear();
                let colvals = &block[c * nrows..(c + 1) * nrows];
                for r in c..ncols {
                    rows.push(start + r);
                    vals.push(colvals[r]);
                }
                for (r, &pr) in pattern.iter().enumerate() {
                    rows.push(pr);
                    vals.push(colvals[ncols + r]);
                }
                f(start + c, &rows, &vals);
            }
        }
    }

    /// Extracts `L` as a column-compressed lower-triangular factor together
    /// with the fill-reducing permutation.
    pub fn lower_factor(&self) -> LowerFactor {
        let n = self.dim();
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut cols: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n];
        self.for_each_column(|j, rows, vals| {
            cols[j] = (rows.to_vec(), vals.to_vec());
        });
        for (j, (rows, vals)) in cols.into_iter().enumerate() {
            row_idx.extend(rows);
            values.extend(vals);
            col_ptr[j + 1] = row_idx.len();
        }
        let (fwd, inv) = match self.symbolic.inner.perm() {
            Some(p) => {
                let (f, i) = p.arrays();
                (f.to_vec(), i.to_vec())
            }
            None => ((0..n).collect(), (0..n).collect()),
        };
        LowerFactor { n, col_ptr, row_idx, values, perm_fwd: fwd, perm_inv: inv }
    }
}

/// Lower Cholesky factor in CSC form: `A[fwd[i], fwd[j]] = (L Lᵀ)[i, j]`.
#[derive(Debug, Clone)]
pub struct LowerFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
    perm_fwd: Vec<usize>,
    perm_inv: Vec<usize>,
}

impl LowerFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Solves `Lᵀ w = z` and returns `x = Pᵀ w` in the original ordering.
    /// With `z ~ N(0, I)` this gives `x ~ N(0, A⁻¹)`.
    pub fn transpose_solve(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n);
        let mut w = z.to_vec();
        for j in (0..self.n).rev() {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let mut s = w[j];
            for p in start + 1..end {
                s -= self.values[p] * w[self.row_idx[p]];
            }
            w[j] = s / self.values[start];
        }
        let mut x = vec![0.0; self.n];
        for (i, wi) in w.into_iter().enumerate() {
            x[self.perm_fwd[i]] = wi;
        }
        x
    }

    /// Takahashi recursions: entries of `A⁻¹` on the pattern of `L + Lᵀ`.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let n = self.n;
        let mut sigma = vec![0.0; self.values.len()];
        let lookup = |sigma: &[f64], i: usize, k: usize| -> f64 {
            let (r, c) = if i >= k { (i, k) } else { (k, i) };
            let start = self.col_ptr[c];
            let rows = &self.row_idx[start..self.col_ptr[c + 1]];
            match rows.binary_search(&r) {
                Ok(p) => sigma[start + p],
                Err(_) => unreachable!("selected inverse entry outside the filled pattern"),
            }
        };
        for j in (0..n).rev() {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let ljj = self.values[start];
            // off-diagonal entries of column j, last row first
            for p in (start + 1..end).rev() {
                let i = self.row_idx[p];
                let mut s = 0.0;
                for q in start + 1..end {
                    let k = self.row_idx[q];
                    s += self.values[q] * lookup(&sigma, k, i);
                }
                sigma[p] = -s / ljj;
            }
            let mut s = 0.0;
            for q in start + 1..end {
                s += self.values[q] * sigma[q];
            }
            sigma[start] = 1.0 / (ljj * ljj) - s / ljj;
        }
        SelectedInverse {
            col_ptr: self.col_ptr.clone(),
            row_idx: self.row_idx.clone(),
            sigma,
            perm_inv: self.perm_inv.clone(),
        }
    }
}

/// Entries of the inverse of a sparse SPD matrix restricted to the filled
/// Cholesky pattern. Always contains the full diagonal.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    sigma: Vec<f64>,
    perm_inv: Vec<usize>,
}

impl SelectedInverse {
    /// Diagonal of the inverse in the original ordering.
    pub fn diagonal(&self) -> Vec<f64> {
        self.perm_inv.iter().map(|&pi| self.sigma[self.col_ptr[pi]]).collect()
    }

    /// Entry `(i, j)` of the inverse (original ordering), if it lies in the
    /// computed pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = (self.perm_inv[i], self.perm_inv[j]);
        let (r, c) = if a >= b { (a, b) } else { (b, a) };
        let start = self.col_ptr[c];
        let rows = &self.row_idx[start..self.col_ptr[c + 1]];
        rows.binary_search(&r).ok().map(|p| self.sigma[start + p])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> CscMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CscMatrix::from_triplets(n, n, &t)
    }

    fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, p);
            inv.swap(c, p);
            let d = m[c][c];
            for j in 0..n {
                m[c][j] /= d;
                inv[c][j] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    for j in 0..n {
                        m[r][j] -= f * m[c][j];
                        inv[r][j] -= f * inv[c][j];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = CscMatrix::from_triplets(3, 2, &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 3.0), (1, 1, 0.0)]);
        assert_eq!(m.col(0), (&[0usize, 2][..], &[2.0, 4.0][..]));
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 1), 0.0);
        assert!(m.position(1, 1).is_some());
    }

    #[test]
    fn kron_and_matmul_match_dense() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 1, 3.0)]);
        let b = laplacian_1d(3, 0.5);
        let k = a.kron(&b).to_dense();
        let bd = b.to_dense();
        for i in 0..6 {
            for j in 0..6 {
                let expect = a.get(i / 3, j / 3) * bd[i % 3][j % 3];
                assert_eq!(k[i][j], expect);
            }
        }
        let ab = b.matmul(&b).to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let e: f64 = (0..3).map(|k| bd[i][k] * bd[k][j]).sum();
                assert!((ab[i][j] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cholesky_solve_logdet_and_selected_inverse() {
        let n = 30;
        let mut a = laplacian_1d(n, 0.3);
        // couple a few distant entries to force fill-in
        a = a.add_scaled(&CscMatrix::from_triplets(n, n, &[(0, 20, 0.2), (20, 0, 0.2), (5, 17, -0.1), (17, 5, -0.1)]), 1.0);
        let f = CholeskyFactor::new(&a.lower_triangle()).unwrap();
        let dense = a.to_dense();
        let inv = dense_inverse(&dense);

        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        f.solve_in_place(&mut x);
        let r = a.matvec(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }

        // log det through the LU pivots of the dense copy
        let mut m = dense.clone();
        let mut ld = 0.0;
        for c in 0..n {
            for r in c + 1..n {
                let f = m[r][c] / m[c][c];
                for j in c..n {
                    m[r][j] -= f * m[c][j];
                }
            }
            ld += m[c][c].ln();
        }
        assert!((f.log_det() - ld).abs() < 1e-10);

        let lf = f.lower_factor();
        let sel = lf.selected_inverse();
        let diag = sel.diagonal();
        for i in 0..n {
            assert!((diag[i] - inv[i][i]).abs() < 1e-12, "diag {i}");
        }
        for i in 0..n {
            for j in 0..n {
                if let Some(v) = sel.get(i, j) {
                    assert!((v - inv[i][j]).abs() < 1e-12);
                }
            }
        }
        assert!(sel.get(0, 1).is_some());
    }

    #[test]
    fn transpose_solve_gives_inverse_covariance_factor() {
        // x = Pᵀ L⁻ᵀ z  ⇒  Cov(x) = A⁻¹; check via columns: X = Pᵀ L⁻ᵀ I, X Xᵀ = A⁻¹
        let n = 12;
        let a = laplacian_1d(n, 1.0);
        let f = CholeskyFactor::new(&a.lower_triangle()).unwrap();
        let lf = f.lower_factor();
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let mut e = vec![0.0; n];
                e[k] = 1.0;
                lf.transpose_solve(&e)
            })
            .collect();
        let inv = dense_inverse(&a.to_dense());
        for i in 0..n {
            for j in 0..n {
                let s: f64 = cols.iter().map(|c| c[i] * c[j]).sum();
                assert!((s - inv[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 2.0), (0, 1, 2.0), (1, 1, 1.0)]);
        assert!(CholeskyFactor::new(&a.lower_triangle()).is_err());
    }
}
