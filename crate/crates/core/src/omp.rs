//! Dictionaries and Orthogonal Matching Pursuit.
//!
//! The active-set least-squares problem is kept as an incrementally built
//! QR factorization (Gram-Schmidt with one reorthogonalization pass). The
//! correlations with every atom are updated through the Gram matrix of the
//! dictionary, so one pursuit step costs O((N + M)·s) instead of O(N·M).

use ndarray::{Array2, ShapeBuilder};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance on atom norms.
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// Default residual tolerance: small enough that pursuit normally runs the
/// full `q` iterations.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-9;

/// An atom whose component orthogonal to the active set is shorter than
/// this is treated as linearly dependent on it.
const DEPENDENCE_TOL: f64 = 1e-10;

/// Inner product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// N×M matrix of unit-norm atoms, stored column-major, with an optional class
/// tag per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
    tags: Vec<Option<usize>>,
}

impl Dictionary {
    /// Wraps `atoms` after checking finiteness and unit column norms.
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        let m = atoms.ncols();
        Self::with_tags(atoms, vec![None; m])
    }

    pub fn with_tags(atoms: Array2<f64>, tags: Vec<Option<usize>>) -> Result<Self> {
        let (n, m) = atoms.dim();
        if n == 0 || m == 0 {
            return Err(Error::InvalidDictionary(format!("empty shape {n}x{m}")));
        }
        if tags.len() != m {
            return Err(Error::InvalidDictionary(format!(
                "{} tags for {m} atoms",
                tags.len()
            )));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDictionary("non-finite entry".into()));
        }
        let atoms = to_column_major(atoms);
        let dict = Self { atoms, tags };
        for j in 0..m {
            let nrm = norm(dict.atom(j));
            if (nrm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidDictionary(format!(
                    "atom {j} has norm {nrm}"
                )));
            }
        }
        Ok(dict)
    }

    /// Builds a dictionary from arbitrary non-zero columns, normalizing each.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "column {j} has length {}, expected {n}",
                    c.len()
                )));
            }
            let nrm = norm(c);
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::InvalidDictionary(format!("column {j} cannot be normalized")));
            }
            data.extend(c.iter().map(|v| v / nrm));
        }
        let atoms = Array2::from_shape_vec((n, columns.len()).f(), data)
            .map_err(|e| Error::InvalidDictionary(e.to_string()))?;
        Self::new(atoms)
    }

    /// Signal dimension N.
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of atoms M.
    pub fn len(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.ncols() == 0
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.atoms.as_slice_memory_order().expect("column-major")[j * n..(j + 1) * n]
    }

    pub fn tags(&self) -> &[Option<usize>] {
        &self.tags
    }

    pub(crate) fn set_atom(&mut self, j: usize, values: &[f64]) {
        let n = self.dim();
        self.atoms.as_slice_memory_order_mut().expect("column-major")[j * n..(j + 1) * n]
            .copy_from_slice(values);
    }

    /// Gram matrix ΦᵀΦ.
    pub fn gram(&self) -> Array2<f64> {
        self.atoms.t().dot(&self.atoms)
    }

    /// Reconstruction Φ·a for one sparse code.
    pub fn reconstruct(&self, code: &SparseCode) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (&j, &v) in code.indices.iter().zip(&code.values) {
            for (o, a) in out.iter_mut().zip(self.atom(j)) {
                *o += v * a;
            }
        }
        out
    }
}

pub(crate) fn to_column_major(m: Array2<f64>) -> Array2<f64> {
    if m.t().is_standard_layout() {
        m
    } else {
        let mut f = Array2::zeros(m.raw_dim().f());
        f.assign(&m);
        f
    }
}

/// Sparse M-vector: atom indices (ascending) and their coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCode {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.indices.iter().zip(&self.values).filter(|(_, v)| **v != 0.0).count()
    }

    pub fn get(&self, j: usize) -> f64 {
        self.indices
            .binary_search(&j)
            .map_or(0.0, |pos| self.values[pos])
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (&j, &v) in self.indices.iter().zip(&self.values) {
            out[j] = v;
        }
        out
    }

    /// Builds a code from (index, value) pairs in any order.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let (indices, values) = pairs.into_iter().unzip();
        Self { indices, values }
    }
}

/// Result of one pursuit.
#[derive(Debug, Clone, PartialEq)]
pub struct OmpOutput {
    pub code: SparseCode,
    /// Atoms in the order they were selected.
    pub selection: Vec<usize>,
    /// ‖residual‖₂ after each selection.
    pub residual_trace: Vec<f64>,
    /// ‖x − Φa‖₂ of the returned code.
    pub residual_norm: f64,
    /// The next selected atom was numerically dependent on the active set
    /// and the loop stopped early.
    pub degenerate: bool,
}

fn check_request(dict: &Dictionary, q: usize, residual_tol: f64) -> Result<()> {
    if q == 0 || q > dict.dim().min(dict.len()) {
        return Err(Error::InvalidSparsity(format!(
            "q = {q} must lie in 1..={}",
            dict.dim().min(dict.len())
        )));
    }
    if residual_tol.is_nan() || residual_tol < 0.0 {
        return Err(Error::InvalidSparsity(format!(
            "residual tolerance {residual_tol} must be non-negative"
        )));
    }
    Ok(())
}

/// Reusable pursuit context for one dictionary (holds its Gram matrix).
pub struct SparseCoder<'a> {
    dict: &'a Dictionary,
    gram: Array2<f64>,
}

impl<'a> SparseCoder<'a> {
    pub fn new(dict: &'a Dictionary) -> Self {
        let gram = to_column_major(dict.gram());
        Self { dict, gram }
    }

    fn gram_col(&self, j: usize) -> &[f64] {
        let m = self.dict.len();
        &self.gram.as_slice_memory_order().expect("column-major")[j * m..(j + 1) * m]
    }

    pub fn encode(&self, x: &[f64], q: usize, residual_tol: f64) -> Result<OmpOutput> {
        check_request(self.dict, q, residual_tol)?;
        if x.len() != self.dict.dim() {
            return Err(Error::DimensionMismatch(format!(
                "signal of length {} for dictionary of dimension {}",
                x.len(),
                self.dict.dim()
            )));
        }
        let corr: Vec<f64> = (0..self.dict.len()).map(|j| dot(self.dict.atom(j), x)).collect();
        Ok(self.pursue(x, corr, q, residual_tol))
    }

    /// Core loop; `corr` holds Φᵀx on entry.
    fn pursue(&self, x: &[f64], mut corr: Vec<f64>, q: usize, residual_tol: f64) -> OmpOutput {
        let n = self.dict.dim();
        let m = self.dict.len();
        let mut residual = x.to_vec();
        let mut selected = vec![false; m];
        let mut selection = Vec::with_capacity(q);
        // Q (n×q), R (q×q, column s holds Qᵀφ and the diagonal), P = ΦᵀQ (m×q)
        let mut qmat: Vec<f64> = Vec::with_capacity(n * q);
        let mut rmat = vec![0.0; q * q];
        let mut pmat: Vec<f64> = Vec::with_capacity(m * q);
        let mut z = Vec::with_capacity(q);
        let mut trace = Vec::with_capacity(q);
        let mut degenerate = false;
        let mut w = vec![0.0; n];
        let mut coef = vec![0.0; q];

        for s in 0..q {
            if norm(&residual) < residual_tol {
                break;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, &c) in corr.iter().enumerate() {
                if !selected[j] && best.is_none_or(|(_, b)| c.abs() > b) {
                    best = Some((j, c.abs()));
                }
            }
            let Some((j, _)) = best else { break };

            w.copy_from_slice(self.dict.atom(j));
            coef[..s].iter_mut().for_each(|c| *c = 0.0);
            for _pass in 0..2 {
                for i in 0..s {
                    let qi = &qmat[i * n..(i + 1) * n];
                    let h = dot(qi, &w);
                    coef[i] += h;
                    for (wv, qv) in w.iter_mut().zip(qi) {
                        *wv -= h * qv;
                    }
                }
            }
            let rho = norm(&w);
            if rho < DEPENDENCE_TOL {
                degenerate = true;
                break;
            }
            selected[j] = true;
            selection.push(j);
            w.iter_mut().for_each(|v| *v /= rho);
            qmat.extend_from_slice(&w);
            for i in 0..s {
                rmat[i * q + s] = coef[i];
            }
            rmat[s * q + s] = rho;

            // Φᵀq_s = (G[:, j] − P·coef) / ρ
            let g = self.gram_col(j);
            let start = pmat.len();
            pmat.extend_from_slice(g);
            for i in 0..s {
                let (prev, cur) = pmat.split_at_mut(start);
                let pi = &prev[i * m..(i + 1) * m];
                for (c, p) in cur.iter_mut().zip(pi) {
                    *c -= coef[i] * p;
                }
            }
            pmat[start..].iter_mut().for_each(|v| *v /= rho);

            let gamma = dot(&w, &residual);
            z.push(gamma);
            for (r, qv) in residual.iter_mut().zip(&w) {
                *r -= gamma * qv;
            }
            for (c, p) in corr.iter_mut().zip(&pmat[start..]) {
                *c -= gamma * p;
            }
            trace.push(norm(&residual));
        }

        // back substitution R·β = z
        let k = selection.len();
        let mut beta = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = z[i];
            for l in i + 1..k {
                acc -= rmat[i * q + l] * beta[l];
            }
            beta[i] = acc / rmat[i * q + i];
        }
        let code = SparseCode::from_pairs(selection.iter().copied().zip(beta).collect());
        let recon = self.dict.reconstruct(&code);
        let residual_norm = x
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        OmpOutput {
            code,
            selection,
            residual_trace: trace,
            residual_norm,
            degenerate,
        }
    }
}

/// Orthogonal Matching Pursuit for a single signal.
pub fn omp(x: &[f64], dict: &Dictionary, q: usize, residual_tol: f64) -> Result<OmpOutput> {
    SparseCoder::new(dict).encode(x, q, residual_tol)
}

/// M×n code matrix stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodeMatrix {
    atoms: usize,
    q: usize,
    columns: Vec<SparseCode>,
}

impl SparseCodeMatrix {
    pub fn new(atoms: usize, q: usize, columns: Vec<SparseCode>) -> Result<Self> {
        for (i, c) in columns.iter().enumerate() {
            if c.indices.len() != c.values.len() {
                return Err(Error::DimensionMismatch(format!("column {i}: index/value lengths differ")));
            }
            if c.indices.iter().any(|&j| j >= atoms) {
                return Err(Error::DimensionMismatch(format!("column {i}: atom index out of range")));
            }
            if c.nnz() > q {
                return Err(Error::InvalidSparsity(format!(
                    "column {i} has {} non-zeros, bound is {q}",
                    c.nnz()
                )));
            }
        }
        Ok(Self { atoms, q, columns })
    }

    /// Reads a dense M×n matrix, keeping the non-zero entries.
    pub fn from_dense(codes: &Array2<f64>, q: usize) -> Result<Self> {
        let columns = codes
            .columns()
            .into_iter()
            .map(|col| {
                SparseCode::from_pairs(
                    col.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(j, v)| (j, *v))
                        .collect(),
                )
            })
            .collect();
        Self::new(codes.nrows(), q, columns)
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn sparsity(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, i: usize) -> &SparseCode {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[SparseCode] {
        &self.columns
    }

    /// Dense M×n copy.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.atoms, self.columns.len()).f());
        for (i, c) in self.columns.iter().enumerate() {
            for (&j, &v) in c.indices.iter().zip(&c.values) {
                out[[j, i]] = v;
            }
        }
        out
    }
}

/// Batch pursuit result: the codes plus how many columns stopped early on a
/// numerically dependent atom.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    pub codes: SparseCodeMatrix,
    pub degenerate_columns: usize,
}

/// Full pursuit outputs for every column; shapes and `q` must already be
/// validated.
pub(crate) fn encode_columns(
    x: &Array2<f64>,
    dict: &Dictionary,
    q: usize,
    residual_tol: f64,
) -> Vec<OmpOutput> {
    let coder = SparseCoder::new(dict);
    let m = dict.len();
    (0..x.ncols())
        .into_par_iter()
        .map(|i| {
            let xi: Vec<f64> = x.column(i).to_vec();
            let corr = (0..m).map(|j| dot(dict.atom(j), &xi)).collect();
            coder.pursue(&xi, corr, q, residual_tol)
        })
        .collect()
}

/// Column-wise OMP of the N×n signal matrix `x`.
pub fn encode_matrix(
    x: &Array2<f64>,
    dict: &Dictionary,
    q: usize,
    residual_tol: f64,
) -> Result<EncodeOutput> {
    check_request(dict, q, residual_tol)?;
    if x.nrows() != dict.dim() {
        return Err(Error::DimensionMismatch(format!(
            "signals of dimension {} for dictionary of dimension {}",
            x.nrows(),
            dict.dim()
        )));
    }
    let m = dict.len();
    let outputs = encode_columns(x, dict, q, residual_tol);
    let degenerate_columns = outputs.iter().filter(|o| o.degenerate).count();
    if degenerate_columns > 0 {
        log::warn!("{degenerate_columns} columns stopped early on dependent atoms");
    }
    let codes = SparseCodeMatrix::new(m, q, outputs.into_iter().map(|o| o.code).collect())?;
    Ok(EncodeOutput {
        codes,
        degenerate_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn identity(n: usize) -> Dictionary {
        Dictionary::new(Array2::eye(n)).unwrap()
    }

    fn random_dict(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Dictionary {
        let cols: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Dictionary::from_columns(&cols).unwrap()
    }

    #[test]
    fn identity_single_axis() {
        let out = omp(&[0.0, 3.0, 0.0, -2.0], &identity(4), 1, DEFAULT_RESIDUAL_TOL).unwrap();
        assert_eq!(out.code.to_dense(4), vec![0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_exact_recovery() {
        let out = omp(&[0.0, 3.0, 0.0, -2.0], &identity(4), 2, DEFAULT_RESIDUAL_TOL).unwrap();
        assert_eq!(out.code.to_dense(4), vec![0.0, 3.0, 0.0, -2.0]);
        assert!(out.residual_norm < 1e-15);
    }

    #[test]
    fn stops_when_residual_vanishes() {
        let out = omp(&[0.0, 3.0, 0.0, 0.0], &identity(4), 3, DEFAULT_RESIDUAL_TOL).unwrap();
        assert_eq!(out.selection, vec![1]);
    }

    #[test]
    fn rejects_bad_sparsity() {
        let d = identity(4);
        assert!(matches!(omp(&[1.0; 4], &d, 0, 0.0), Err(Error::InvalidSparsity(_))));
        assert!(matches!(omp(&[1.0; 4], &d, 5, 0.0), Err(Error::InvalidSparsity(_))));
        assert!(matches!(omp(&[1.0; 4], &d, 1, -1.0), Err(Error::InvalidSparsity(_))));
    }

    #[test]
    fn duplicated_atom_is_degenerate() {
        let a = vec![1.0, 1.0, 0.0];
        let dict = Dictionary::from_columns(&[a.clone(), a, vec![0.0, 0.0, 1.0]]).unwrap();
        // after the first atom, its twin has maximal |correlation| only if the
        // residual is not orthogonal to it; force that with q=2 on a signal
        // orthogonal to atom 2.
        let out = omp(&[2.0, 1.0, 0.0], &dict, 2, 0.0).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.selection.len(), 1);
    }

    #[test]
    fn dictionary_rejects_non_unit_columns() {
        let bad = Array2::from_elem((2, 2), 1.0);
        assert!(matches!(Dictionary::new(bad), Err(Error::InvalidDictionary(_))));
    }

    #[test]
    fn orthonormal_dictionary_picks_largest_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // random orthonormal basis by Gram-Schmidt
            let mut basis: Vec<Vec<f64>> = Vec::new();
            while basis.len() < 8 {
                let mut v: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
                for b in &basis {
                    let h = dot(b, &v);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= h * y);
                }
                let nv = norm(&v);
                basis.push(v.into_iter().map(|x| x / nv).collect());
            }
            let dict = Dictionary::from_columns(&basis).unwrap();
            let x: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            let out = omp(&x, &dict, 3, DEFAULT_RESIDUAL_TOL).unwrap();

            let mut proj: Vec<(usize, f64)> = (0..8).map(|j| (j, dot(&basis[j], &x).abs())).collect();
            proj.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let mut top: Vec<usize> = proj[..3].iter().map(|p| p.0).collect();
            top.sort();
            assert_eq!(out.code.indices, top);

            // exhaustive subset search agrees on the optimum
            let total: f64 = dot(&x, &x);
            let mut best = f64::INFINITY;
            for a in 0..8 {
                for b in a + 1..8 {
                    for c in b + 1..8 {
                        let kept: f64 = [a, b, c].iter().map(|&j| dot(&basis[j], &x).powi(2)).sum();
                        best = best.min(total - kept);
                    }
                }
            }
            assert_abs_diff_eq!(out.residual_norm.powi(2), best, epsilon = 1e-10);
        }
    }

    #[test]
    fn residual_orthogonal_to_selected_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dict = random_dict(16, 32, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            let out = omp(&x, &dict, 6, DEFAULT_RESIDUAL_TOL).unwrap();
            let recon = dict.reconstruct(&out.code);
            let r: Vec<f64> = x.iter().zip(&recon).map(|(a, b)| a - b).collect();
            for &j in &out.selection {
                assert!(dot(&r, dict.atom(j)).abs() < 1e-8);
            }
            for w in out.residual_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn encode_matrix_of_the_atoms_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dict = random_dict(10, 6, &mut rng);
        let out = encode_matrix(dict.atoms(), &dict, 1, DEFAULT_RESIDUAL_TOL).unwrap();
        let dense = out.codes.to_dense();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dense[[j, i]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn encode_matrix_empty_batch() {
        let dict = identity(3);
        let out = encode_matrix(&Array2::zeros((3, 0)), &dict, 1, 0.0).unwrap();
        assert!(out.codes.is_empty());
        assert_eq!(out.codes.to_dense().dim(), (3, 0));
    }

    #[test]
    fn encode_matrix_matches_single_pursuits() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dict = random_dict(16, 32, &mut rng);
        let x = Array2::from_shape_fn((16, 20), |_| rng.sample::<f64, _>(StandardNormal));
        let batch = encode_matrix(&x, &dict, 4, DEFAULT_RESIDUAL_TOL).unwrap();
        for i in 0..20 {
            let single = omp(&x.column(i).to_vec(), &dict, 4, DEFAULT_RESIDUAL_TOL).unwrap();
            assert_eq!(&single.code, batch.codes.column(i));
        }
    }
}
