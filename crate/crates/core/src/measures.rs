//! Per-atom discriminative measures.
//!
//! Every atom gets a dominant class ℓ⁺ (highest conditional activation
//! probability) and a runner-up ℓ*. Three relative gaps between ℓ⁺ and ℓ*
//! are computed, one each from activation frequency, mean coefficient
//! magnitude and leave-one-atom-out representation error, and blended with
//! simplex weights (α, β, 1 − α − β).
//!
//! Undefined ratios (zero denominator) are 0, negative gaps are clamped to 0,
//! and all ties go to the smallest index.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::omp::{dot, Dictionary, SparseCodeMatrix};

/// Slack on the α + β ≤ 1 constraint.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Activation counts η (classes × atoms) and probabilities p = η / n_ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTable {
    counts: Array2<usize>,
    class_sizes: Vec<usize>,
    probabilities: Array2<f64>,
}

impl ActivationTable {
    pub fn from_counts(counts: Array2<usize>, class_sizes: Vec<usize>) -> Result<Self> {
        if counts.nrows() != class_sizes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} count rows for {} classes",
                counts.nrows(),
                class_sizes.len()
            )));
        }
        if let Some(empty) = class_sizes.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(empty));
        }
        for ((l, _), &c) in counts.indexed_iter() {
            if c > class_sizes[l] {
                return Err(Error::InvalidParameter(format!(
                    "class {l} has count {c} above its size {}",
                    class_sizes[l]
                )));
            }
        }
        let probabilities =
            Array2::from_shape_fn(counts.dim(), |(l, j)| counts[[l, j]] as f64 / class_sizes[l] as f64);
        Ok(Self {
            counts,
            class_sizes,
            probabilities,
        })
    }

    pub fn counts(&self) -> &Array2<usize> {
        &self.counts
    }

    pub fn probabilities(&self) -> &Array2<f64> {
        &self.probabilities
    }

    pub fn class_sizes(&self) -> &[usize] {
        &self.class_sizes
    }

    pub fn classes(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn atoms(&self) -> usize {
        self.counts.ncols()
    }
}

fn class_sizes(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![0; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InvalidParameter(format!("label {l} out of range for {k} classes")));
        }
        sizes[l] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(empty));
    }
    Ok(sizes)
}

fn check_labels(codes: &SparseCodeMatrix, labels: &[usize]) -> Result<()> {
    if codes.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} code columns for {} labels",
            codes.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Counts, per class, how many signals activate each atom.
pub fn activation_table(codes: &SparseCodeMatrix, labels: &[usize], k: usize) -> Result<ActivationTable> {
    check_labels(codes, labels)?;
    let sizes = class_sizes(labels, k)?;
    let mut counts = Array2::<usize>::zeros((k, codes.atoms()));
    for (code, &l) in codes.columns().iter().zip(labels) {
        for (&j, &v) in code.indices.iter().zip(&code.values) {
            if v != 0.0 {
                counts[[l, j]] += 1;
            }
        }
    }
    ActivationTable::from_counts(counts, sizes)
}

/// Dominant class ℓ⁺ and runner-up ℓ* of every atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DominantClasses {
    pub dominant: Vec<usize>,
    pub runner_up: Vec<usize>,
}

pub fn dominant_classes(table: &ActivationTable) -> Result<DominantClasses> {
    let k = table.classes();
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 classes, got {k}")));
    }
    let p = table.probabilities();
    let mut dominant = Vec::with_capacity(table.atoms());
    let mut runner_up = Vec::with_capacity(table.atoms());
    let mut ties = 0;
    for col in p.columns() {
        let top = argmax_excluding(col.iter().copied(), None);
        let second = argmax_excluding(col.iter().copied(), Some(top));
        if col[top] == col[second] && col[top] > 0.0 {
            ties += 1;
        }
        dominant.push(top);
        runner_up.push(second);
    }
    if ties > 0 {
        log::debug!("{ties} atoms with tied dominant classes");
    }
    Ok(DominantClasses { dominant, runner_up })
}

fn argmax_excluding(values: impl Iterator<Item = f64>, skip: Option<usize>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.expect("at least two classes").0
}

/// (top − second) / top, with 0 for a zero denominator and negative gaps
/// clamped to 0.
fn relative_gap(top: f64, second: f64) -> f64 {
    if top > 0.0 {
        ((top - second) / top).max(0.0)
    } else {
        0.0
    }
}

/// Gap measure over any per-(class, atom) statistic.
fn gap_measure(stat: &Array2<f64>, classes: &DominantClasses) -> Vec<f64> {
    classes
        .dominant
        .iter()
        .zip(&classes.runner_up)
        .enumerate()
        .map(|(j, (&top, &second))| relative_gap(stat[[top, j]], stat[[second, j]]))
        .collect()
}

/// Activation frequency measure m_af.
pub fn measure_af(table: &ActivationTable, classes: &DominantClasses) -> Vec<f64> {
    gap_measure(table.probabilities(), classes)
}

/// Mean absolute coefficient q_ℓ^j = ‖[A_ℓ]_{j,:}‖₁ / n_ℓ, classes × atoms.
pub fn mean_magnitudes(codes: &SparseCodeMatrix, labels: &[usize], k: usize) -> Result<Array2<f64>> {
    check_labels(codes, labels)?;
    let sizes = class_sizes(labels, k)?;
    let mut q = Array2::<f64>::zeros((k, codes.atoms()));
    for (code, &l) in codes.columns().iter().zip(labels) {
        for (&j, &v) in code.indices.iter().zip(&code.values) {
            q[[l, j]] += v.abs();
        }
    }
    for (l, mut row) in q.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v / sizes[l] as f64);
    }
    Ok(q)
}

/// Coefficient magnitude measure m_cm.
pub fn measure_cm(
    codes: &SparseCodeMatrix,
    labels: &[usize],
    k: usize,
    classes: &DominantClasses,
) -> Result<Vec<f64>> {
    Ok(gap_measure(&mean_magnitudes(codes, labels, k)?, classes))
}

/// Squared errors below this fraction of the class energy are round-off.
pub const ROUNDOFF: f64 = 1e-12;

/// Per-class error with atom j removed, r_ℓ^j = ‖E_ℓ^j‖_F² / n_ℓ.
///
/// Uses E_ℓ^j = R_ℓ + φ_j [A_ℓ]_{j,:}, so only the signals that use atom j
/// contribute beyond the class residual ‖R_ℓ‖_F². Errors at round-off level
/// relative to ‖X_ℓ‖_F² are reported as 0.
pub fn leave_one_out_errors(
    x: &Array2<f64>,
    dict: &Dictionary,
    codes: &SparseCodeMatrix,
    labels: &[usize],
    k: usize,
) -> Result<Array2<f64>> {
    check_labels(codes, labels)?;
    if x.nrows() != dict.dim() || x.ncols() != codes.len() || codes.atoms() != dict.len() {
        return Err(Error::DimensionMismatch(format!(
            "signals {}x{}, dictionary {}x{}, codes {}x{}",
            x.nrows(),
            x.ncols(),
            dict.dim(),
            dict.len(),
            codes.atoms(),
            codes.len()
        )));
    }
    let sizes = class_sizes(labels, k)?;
    let m = dict.len();
    let atom_sq: Vec<f64> = (0..m).map(|j| dot(dict.atom(j), dict.atom(j))).collect();
    let mut base = vec![0.0; k];
    let mut energy = vec![0.0; k];
    let mut extra = Array2::<f64>::zeros((k, m));
    for (i, (code, &l)) in codes.columns().iter().zip(labels).enumerate() {
        energy[l] += x.column(i).iter().map(|v| v * v).sum::<f64>();
        let recon = dict.reconstruct(code);
        let r: Vec<f64> = x.column(i).iter().zip(&recon).map(|(a, b)| a - b).collect();
        base[l] += dot(&r, &r);
        for (&j, &a) in code.indices.iter().zip(&code.values) {
            if a != 0.0 {
                extra[[l, j]] += 2.0 * a * dot(&r, dict.atom(j)) + a * a * atom_sq[j];
            }
        }
    }
    Ok(Array2::from_shape_fn((k, m), |(l, j)| {
        let e = base[l] + extra[[l, j]];
        if e <= ROUNDOFF * energy[l] {
            0.0
        } else {
            e / sizes[l] as f64
        }
    }))
}

/// Representation error measure m_re.
pub fn measure_re(
    x: &Array2<f64>,
    dict: &Dictionary,
    codes: &SparseCodeMatrix,
    labels: &[usize],
    k: usize,
    classes: &DominantClasses,
) -> Result<Vec<f64>> {
    Ok(gap_measure(&leave_one_out_errors(x, dict, codes, labels, k)?, classes))
}

pub fn check_simplex(alpha: f64, beta: f64) -> Result<()> {
    let ok = alpha.is_finite()
        && beta.is_finite()
        && alpha >= 0.0
        && beta >= 0.0
        && alpha + beta <= 1.0 + SIMPLEX_TOL;
    if ok {
        Ok(())
    } else {
        Err(Error::WeightOutOfSimplex { alpha, beta })
    }
}

/// m = α·m_af + β·m_cm + (1 − α − β)·m_re, atom by atom.
pub fn combined_measure(af: &[f64], cm: &[f64], re: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_simplex(alpha, beta)?;
    if af.len() != cm.len() || af.len() != re.len() {
        return Err(Error::DimensionMismatch(format!(
            "measure lengths {}, {}, {}",
            af.len(),
            cm.len(),
            re.len()
        )));
    }
    let gamma = 1.0 - alpha - beta;
    Ok(af
        .iter()
        .zip(cm)
        .zip(re)
        .map(|((a, c), r)| alpha * a + beta * c + gamma * r)
        .collect())
}

/// All measures for one atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomScore {
    pub index: usize,
    pub dominant: usize,
    pub runner_up: usize,
    pub af: f64,
    pub cm: f64,
    pub re: f64,
    pub combined: f64,
    pub discriminative: bool,
}

/// Scores every atom of `dict` from the codes of the labeled signals `x`.
pub fn score_atoms(
    x: &Array2<f64>,
    dict: &Dictionary,
    codes: &SparseCodeMatrix,
    labels: &[usize],
    k: usize,
    alpha: f64,
    beta: f64,
) -> Result<Vec<AtomScore>> {
    check_simplex(alpha, beta)?;
    let table = activation_table(codes, labels, k)?;
    let classes = dominant_classes(&table)?;
    let af = measure_af(&table, &classes);
    let cm = measure_cm(codes, labels, k, &classes)?;
    let re = measure_re(x, dict, codes, labels, k, &classes)?;
    let combined = combined_measure(&af, &cm, &re, alpha, beta)?;
    Ok((0..dict.len())
        .map(|j| AtomScore {
            index: j,
            dominant: classes.dominant[j],
            runner_up: classes.runner_up[j],
            af: af[j],
            cm: cm[j],
            re: re[j],
            combined: combined[j],
            discriminative: combined[j] > 0.0,
        })
        .collect())
}

/// For each class, the atom with the highest combined measure among those
/// dominated by that class with a positive measure.
pub fn select_discriminant_atoms(scores: &[AtomScore], k: usize) -> Result<Vec<usize>> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; k];
    for s in scores {
        if s.dominant >= k || s.combined <= 0.0 {
            continue;
        }
        let slot = &mut best[s.dominant];
        let better = match *slot {
            None => true,
            Some((idx, val)) => s.combined > val || (s.combined == val && s.index < idx),
        };
        if better {
            *slot = Some((s.index, s.combined));
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(l, b)| b.map(|(idx, _)| idx).ok_or(Error::NoDiscriminativeAtom(l)))
        .collect()
}

/// One CSV row per atom: index, ℓ⁺, ℓ*, m_af, m_cm, m_re, combined.
pub fn write_scores_csv<W: Write>(writer: W, scores: &[AtomScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "dominant", "runner_up", "m_af", "m_cm", "m_re", "m_combined"])?;
    for s in scores {
        w.write_record([
            s.index.to_string(),
            s.dominant.to_string(),
            s.runner_up.to_string(),
            s.af.to_string(),
            s.cm.to_string(),
            s.re.to_string(),
            s.combined.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
