//! Grid search over the measure weights (α, β), classification accuracy and
//! the Gaussian significance comparison of two accuracies.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::measures::SIMPLEX_TOL;

/// A point of the simplex α, β ≥ 0, α + β ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
}

impl GridPoint {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    pub fn on_simplex(&self) -> bool {
        self.alpha >= -SIMPLEX_TOL && self.beta >= -SIMPLEX_TOL && self.alpha + self.beta <= 1.0 + SIMPLEX_TOL
    }

    fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.alpha.total_cmp(&other.alpha).then(self.beta.total_cmp(&other.beta))
    }
}

/// Returns `s` when `step` is `1/s` for an integer `s ≥ 1`.
fn unit_fraction(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::NonUnitFractionStep(step));
    }
    let s = (1.0 / step).round();
    if ((1.0 / s) - step).abs() > 1e-9 * step {
        return Err(Error::NonUnitFractionStep(step));
    }
    Ok(s as usize)
}

/// All lattice points `(iΔ, jΔ)` with `i + j ≤ 1/Δ`, lexicographic order.
pub fn enumerate_grid(step: f64) -> Result<Vec<GridPoint>> {
    let s = unit_fraction(step)?;
    let mut out = Vec::with_capacity((s + 1) * (s + 2) / 2);
    for i in 0..=s {
        for j in 0..=s - i {
            out.push(GridPoint::new(i as f64 / s as f64, j as f64 / s as f64));
        }
    }
    Ok(out)
}

/// Points of the Δ₂-lattice within distance 2Δ₂ of `center` that lie on the
/// simplex, lexicographic order. The center itself is always included.
pub fn refine_disc(center: GridPoint, step: f64) -> Result<Vec<GridPoint>> {
    let s = unit_fraction(step)? as f64;
    let radius = 2.0 * step;
    let eps = 1e-9 * step;
    let ci = (center.alpha * s).round() as i64;
    let cj = (center.beta * s).round() as i64;
    let mut out = vec![center];
    for i in ci - 3..=ci + 3 {
        for j in cj - 3..=cj + 3 {
            let p = GridPoint::new(i as f64 / s, j as f64 / s);
            let (da, db) = (p.alpha - center.alpha, p.beta - center.beta);
            if i < 0 || j < 0 || i + j > s as i64 || (da * da + db * db).sqrt() > radius + eps {
                continue;
            }
            if (da.abs() > eps || db.abs() > eps) && p.on_simplex() {
                out.push(p);
            }
        }
    }
    out.sort_by(GridPoint::lex_cmp);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Coarse,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub point: GridPoint,
    pub mean: f64,
    pub max: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub evaluations: Vec<Evaluation>,
    pub best: GridPoint,
    pub best_value: f64,
}

fn best_of(evaluations: &[Evaluation]) -> (GridPoint, f64) {
    let mut best: Option<&Evaluation> = None;
    for e in evaluations {
        best = match best {
            None => Some(e),
            Some(b) if e.mean > b.mean || (e.mean == b.mean && e.point.lex_cmp(&b.point).is_lt()) => Some(e),
            keep => keep,
        };
    }
    let b = best.expect("non-empty evaluations");
    (b.point, b.mean)
}

/// Evaluates `objective` once per point and round. The objective receives the
/// point, its position in `points` and the round index.
pub fn grid_search_rounds<F>(points: &[GridPoint], rounds: usize, stage: Stage, mut objective: F) -> Result<SearchResult>
where
    F: FnMut(GridPoint, usize, usize) -> Result<f64>,
{
    if points.is_empty() || rounds == 0 {
        return Err(Error::InvalidParameter("grid search needs points and at least one round".into()));
    }
    let mut evaluations = Vec::with_capacity(points.len());
    for (g, &p) in points.iter().enumerate() {
        if !p.on_simplex() {
            return Err(Error::WeightOutOfSimplex {
                alpha: p.alpha,
                beta: p.beta,
            });
        }
        let mut values = Vec::with_capacity(rounds);
        for r in 0..rounds {
            values.push(objective(p, g, r)?);
        }
        let mean = values.iter().sum::<f64>() / rounds as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        log::info!("({:.4}, {:.4}): mean {mean:.4}, max {max:.4}", p.alpha, p.beta);
        evaluations.push(Evaluation { point: p, mean, max, stage });
    }
    let (best, best_value) = best_of(&evaluations);
    Ok(SearchResult {
        evaluations,
        best,
        best_value,
    })
}

/// Single-round search: argmax with lexicographic tie-break.
pub fn grid_search<F>(points: &[GridPoint], mut objective: F) -> Result<SearchResult>
where
    F: FnMut(GridPoint) -> Result<f64>,
{
    grid_search_rounds(points, 1, Stage::Coarse, |p, _, _| objective(p))
}

/// Coarse search on the Δ₁ grid, then refined searches on Δ₂ discs around the
/// two best coarse points. Points shared by both discs are evaluated once.
pub fn two_stage_search<F>(coarse_step: f64, fine_step: f64, rounds: usize, mut objective: F) -> Result<SearchResult>
where
    F: FnMut(GridPoint, usize, usize) -> Result<f64>,
{
    let coarse_points = enumerate_grid(coarse_step)?;
    unit_fraction(fine_step)?;
    let coarse = grid_search_rounds(&coarse_points, rounds, Stage::Coarse, &mut objective)?;

    let mut ranked = coarse.evaluations.clone();
    ranked.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.point.lex_cmp(&b.point)));
    let mut fine_points: Vec<GridPoint> = Vec::new();
    for e in ranked.iter().take(2) {
        for p in refine_disc(e.point, fine_step)? {
            let seen = coarse_points.iter().chain(&fine_points).any(|q| close(q, &p));
            if !seen {
                fine_points.push(p);
            }
        }
    }
    fine_points.sort_by(GridPoint::lex_cmp);
    let offset = coarse_points.len();
    let mut evaluations = coarse.evaluations;
    if !fine_points.is_empty() {
        let fine = grid_search_rounds(&fine_points, rounds, Stage::Refined, |p, g, r| objective(p, offset + g, r))?;
        evaluations.extend(fine.evaluations);
    }
    let (best, best_value) = best_of(&evaluations);
    Ok(SearchResult {
        evaluations,
        best,
        best_value,
    })
}

fn close(a: &GridPoint, b: &GridPoint) -> bool {
    (a.alpha - b.alpha).abs() < 1e-9 && (a.beta - b.beta).abs() < 1e-9
}

/// `alpha,beta,mean_acc,max_acc,stage` rows.
pub fn write_search_csv<W: Write>(writer: W, result: &SearchResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["alpha", "beta", "mean_acc", "max_acc", "stage"])?;
    for e in &result.evaluations {
        let stage = match e.stage {
            Stage::Coarse => "coarse",
            Stage::Refined => "refined",
        };
        w.write_record([
            e.point.alpha.to_string(),
            e.point.beta.to_string(),
            e.mean.to_string(),
            e.max.to_string(),
            stage.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

/// Fraction of positions where the two label lists agree.
pub fn accuracy(labels: &[usize], predictions: &[usize]) -> Result<f64> {
    if labels.len() != predictions.len() || labels.is_empty() {
        return Err(Error::LengthMismatch(labels.len(), predictions.len()));
    }
    let errors = labels.iter().zip(predictions).filter(|(a, b)| a != b).count();
    Ok(1.0 - errors as f64 / labels.len() as f64)
}

/// Accuracy restricted to each class, `NaN` for classes absent from `labels`.
pub fn per_class_accuracy(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Vec<f64>> {
    if labels.len() != predictions.len() {
        return Err(Error::LengthMismatch(labels.len(), predictions.len()));
    }
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        total[l] += 1;
        if l == p {
            hit[l] += 1;
        }
    }
    Ok(hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect())
}

/// `counts[true][predicted]`.
pub fn confusion_matrix(labels: &[usize], predictions: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        m[l][p] += 1;
    }
    m
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Probability that the candidate's error rate is below the reference's,
/// approximating both binomial error counts over `n` samples by Gaussians.
pub fn significance(acc_ref: f64, acc: f64, n: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc_ref) || !(0.0..=1.0).contains(&acc) {
        return Err(Error::InvalidParameter(format!("accuracies {acc_ref}, {acc} must lie in [0, 1]")));
    }
    if n < 30 {
        return Err(Error::InvalidParameter(format!("normal approximation needs n ≥ 30, got {n}")));
    }
    let (e, e_ref) = (1.0 - acc, 1.0 - acc_ref);
    let variance = (e * (1.0 - e) + e_ref * (1.0 - e_ref)) / n as f64;
    if variance <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok(std_normal_cdf((e_ref - e) / variance.sqrt()))
}
