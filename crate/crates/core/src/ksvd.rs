//! Unstructured KSVD dictionary learning.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::omp::{self, dot, norm, Dictionary, SparseCode, SparseCodeMatrix, DEFAULT_RESIDUAL_TOL};

/// Convergence tolerance and iteration cap of the rank-1 power iteration.
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 1000;

/// Draws `atoms` distinct non-zero columns of `x` (seeded) and normalizes them.
/// Zero columns are skipped and replaced by further draws.
pub fn init_dictionary(x: &Array2<f64>, atoms: usize, seed: u64) -> Result<Dictionary> {
    let m = x.ncols();
    if atoms == 0 || m < atoms {
        return Err(Error::InsufficientSamples {
            available: m,
            required: atoms.max(1),
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut columns = Vec::with_capacity(atoms);
    for i in order {
        let col = x.column(i).to_vec();
        if norm(&col) > 0.0 {
            columns.push(col);
            if columns.len() == atoms {
                return Dictionary::from_columns(&columns);
            }
        }
    }
    Err(Error::InsufficientSamples {
        available: columns.len(),
        required: atoms,
    })
}

fn check_shapes(x: &Array2<f64>, dict: &Dictionary, codes: &SparseCodeMatrix) -> Result<()> {
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
    Ok(())
}

/// ‖X − ΦA‖_F².
pub fn representation_objective(
    x: &Array2<f64>,
    dict: &Dictionary,
    codes: &SparseCodeMatrix,
) -> Result<f64> {
    check_shapes(x, dict, codes)?;
    Ok((0..x.ncols())
        .map(|i| {
            let recon = dict.reconstruct(codes.column(i));
            x.column(i)
                .iter()
                .zip(&recon)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum())
}

/// Leading left singular vector of an N×s matrix given as `s` contiguous
/// columns, refined from `start` by power iteration on E·Eᵀ.
///
/// The sign is fixed so the largest-magnitude entry is positive.
fn leading_left_vector(columns: &[f64], n: usize, start: &[f64]) -> Vec<f64> {
    let s = columns.len() / n;
    let mut u = start.to_vec();
    let mut v = vec![0.0; s];
    let mut next = vec![0.0; n];
    for _ in 0..POWER_MAX_ITER {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = dot(&columns[i * n..(i + 1) * n], &u);
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            for (x, e) in next.iter_mut().zip(&columns[i * n..(i + 1) * n]) {
                *x += vi * e;
            }
        }
        let nrm = norm(&next);
        if nrm == 0.0 {
            // E is zero: every unit vector is optimal, keep the start.
            return u;
        }
        next.iter_mut().for_each(|x| *x /= nrm);
        let delta = next
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut u, &mut next);
        if delta < POWER_TOL {
            break;
        }
    }
    let pivot = u
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
    }
    u
}

/// New atom and coefficient row for atom `j` (the rank-1 update of KSVD).
///
/// Returns the updated unit atom and the new non-zero entries of code row `j`
/// as (signal index, value) pairs; the support of the row is unchanged.
pub fn atom_update(
    dict: &Dictionary,
    codes: &SparseCodeMatrix,
    x: &Array2<f64>,
    j: usize,
) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    check_shapes(x, dict, codes)?;
    let n = dict.dim();
    let users: Vec<usize> = (0..codes.len())
        .filter(|&i| codes.column(i).get(j) != 0.0)
        .collect();
    if users.is_empty() {
        return Err(Error::UnusedAtom(j));
    }
    let atom = dict.atom(j);
    let mut e = Vec::with_capacity(n * users.len());
    for &i in &users {
        let code = codes.column(i);
        let recon = dict.reconstruct(code);
        let a = code.get(j);
        e.extend(
            x.column(i)
                .iter()
                .zip(&recon)
                .zip(atom)
                .map(|((xv, r), p)| xv - r + a * p),
        );
    }
    let u = leading_left_vector(&e, n, atom);
    let row = users
        .iter()
        .enumerate()
        .map(|(k, &i)| (i, dot(&u, &e[k * n..(k + 1) * n])))
        .collect();
    Ok((u, row))
}

/// Learned dictionary plus the bookkeeping of the run.
#[derive(Debug, Clone)]
pub struct KsvdOutput {
    pub dictionary: Dictionary,
    pub codes: Option<SparseCodeMatrix>,
    /// ‖X − ΦA‖_F² after every round.
    pub objective_trace: Vec<f64>,
    /// Number of unused atoms replaced by badly represented signals.
    pub replaced_atoms: usize,
}

/// KSVD: `iterations` rounds of OMP coding followed by a sweep of rank-1
/// atom updates in index order.
///
/// A column whose previous code represents it better than the fresh OMP code
/// keeps the previous one, so the objective never increases from one round
/// to the next.
pub fn ksvd_train(
    x: &Array2<f64>,
    atoms: usize,
    q: usize,
    iterations: usize,
    seed: u64,
) -> Result<KsvdOutput> {
    let mut dict = init_dictionary(x, atoms, seed)?;
    if q == 0 || q > dict.dim().min(dict.len()) {
        return Err(Error::InvalidSparsity(format!(
            "q = {q} must lie in 1..={}",
            dict.dim().min(dict.len())
        )));
    }
    let n = x.nrows();
    let m = x.ncols();
    let xs: Array2<f64> = omp::to_column_major(x.to_owned());
    let xs = xs.as_slice_memory_order().expect("column-major");

    let mut codes: Vec<SparseCode> = vec![SparseCode::default(); m];
    // residual matrix R = X − ΦA, column-major
    let mut resid = xs.to_vec();
    let mut trace = Vec::with_capacity(iterations);
    let mut replaced = 0;

    for _round in 0..iterations {
        // sparse coding stage
        let fresh = omp::encode_columns(x, &dict, q, DEFAULT_RESIDUAL_TOL);
        for (i, out) in fresh.into_iter().enumerate() {
            let old_err = norm(&resid[i * n..(i + 1) * n]);
            if out.residual_norm <= old_err {
                let recon = dict.reconstruct(&out.code);
                for ((r, xv), rc) in resid[i * n..(i + 1) * n].iter_mut().zip(&xs[i * n..(i + 1) * n]).zip(&recon) {
                    *r = xv - rc;
                }
                codes[i] = out.code;
            }
        }

        // users of every atom: (signal, position in its code)
        let mut users: Vec<Vec<(usize, usize)>> = vec![Vec::new(); atoms];
        for (i, c) in codes.iter().enumerate() {
            for (pos, &j) in c.indices.iter().enumerate() {
                users[j].push((i, pos));
            }
        }

        let mut used_for_repair = vec![false; m];
        for j in 0..atoms {
            let atom: Vec<f64> = dict.atom(j).to_vec();
            let active: Vec<(usize, usize)> = users[j]
                .iter()
                .copied()
                .filter(|&(i, pos)| codes[i].values[pos] != 0.0)
                .collect();
            if active.is_empty() {
                // Replace with the worst represented signal not used yet.
                let worst = (0..m)
                    .filter(|&i| !used_for_repair[i])
                    .map(|i| (i, norm(&resid[i * n..(i + 1) * n])))
                    .fold(None, |best: Option<(usize, f64)>, cur| match best {
                        Some(b) if b.1 >= cur.1 => Some(b),
                        _ => Some(cur),
                    });
                if let Some((i, err)) = worst {
                    if err > 1e-12 {
                        used_for_repair[i] = true;
                        let r = &resid[i * n..(i + 1) * n];
                        let fresh: Vec<f64> = r.iter().map(|v| v / err).collect();
                        dict.set_atom(j, &fresh);
                        replaced += 1;
                    }
                }
                continue;
            }

            let mut e = Vec::with_capacity(n * active.len());
            for &(i, pos) in &active {
                let a = codes[i].values[pos];
                e.extend(resid[i * n..(i + 1) * n].iter().zip(&atom).map(|(r, p)| r + a * p));
            }
            let u = leading_left_vector(&e, n, &atom);
            for (k, &(i, pos)) in active.iter().enumerate() {
                let ek = &e[k * n..(k + 1) * n];
                let coef = dot(&u, ek);
                codes[i].values[pos] = coef;
                for ((r, ev), uv) in resid[i * n..(i + 1) * n].iter_mut().zip(ek).zip(&u) {
                    *r = ev - coef * uv;
                }
            }
            dict.set_atom(j, &u);
        }

        let objective: f64 = resid.iter().map(|r| r * r).sum();
        log::debug!("ksvd round {}: objective {objective:.6e}", _round + 1);
        trace.push(objective);
    }

    let codes = if iterations > 0 {
        Some(SparseCodeMatrix::new(atoms, q, codes)?)
    } else {
        None
    };
    Ok(KsvdOutput {
        dictionary: dict,
        codes,
        objective_trace: trace,
        replaced_atoms: replaced,
    })
}

/// Convenience wrapper returning only the dictionary.
pub fn ksvd(x: &Array2<f64>, atoms: usize, q: usize, iterations: usize, seed: u64) -> Result<Dictionary> {
    ksvd_train(x, atoms, q, iterations, seed).map(|o| o.dictionary)
}
