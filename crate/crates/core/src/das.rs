//! Iterative construction of a class-structured dictionary.
//!
//! Each iteration draws a learning set of `t` signals per class under a
//! sampling distribution that decays the weight of already-drawn signals,
//! degrades it with Gaussian noise growing with the iteration index, trains a
//! KSVD dictionary on it, scores the atoms on the clean learning set and keeps
//! the most discriminative atom of every class.

use ndarray::{Array2, ArrayView2, ShapeBuilder};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::ksvd::ksvd_train;
use crate::measures::{check_simplex, score_atoms, select_discriminant_atoms};
use crate::omp::{dot, encode_matrix, Dictionary, DEFAULT_RESIDUAL_TOL};
use crate::seeds;

/// Sampling distribution over the training columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingState {
    probabilities: Vec<f64>,
    iteration: usize,
}

impl SamplingState {
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Number of completed updates.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Normalized copy of non-negative `weights`.
    pub fn from_probabilities(weights: Vec<f64>) -> Result<SamplingState> {
        if weights.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("weights sum to zero".into()));
        }
        Ok(SamplingState {
            probabilities: weights.into_iter().map(|w| w / total).collect(),
            iteration: 0,
        })
    }

    /// Multiplies the weight of every selected column by `decay`, then
    /// renormalizes to a probability distribution.
    pub fn decayed(&self, selected: &[usize], decay: f64) -> SamplingState {
        let mut p = self.probabilities.clone();
        for &i in selected {
            p[i] *= decay;
        }
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        }
        SamplingState {
            probabilities: p,
            iteration: self.iteration + 1,
        }
    }
}

/// Uniform distribution over `n` training columns.
pub fn init_distribution(n: usize) -> Result<SamplingState> {
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(SamplingState {
        probabilities: vec![1.0 / n as f64; n],
        iteration: 0,
    })
}

/// A sampled learning set and the distribution for the next iteration.
#[derive(Debug, Clone)]
pub struct LearningSample {
    pub signals: Array2<f64>,
    pub labels: Vec<usize>,
    /// Columns of the training matrix, grouped by class in draw order.
    pub indices: Vec<usize>,
    pub next: SamplingState,
}

/// Draws `per_class` distinct columns of every class, each draw proportional
/// to the current probabilities restricted to the not-yet-drawn members of
/// that class.
pub fn sample_learning_set<R: Rng + ?Sized>(
    data: &LabeledDataset,
    state: &SamplingState,
    per_class: usize,
    decay: f64,
    rng: &mut R,
) -> Result<LearningSample> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidParameter(format!("decay {decay} must lie in [0, 1)")));
    }
    if state.probabilities.len() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "distribution over {} columns for {} signals",
            state.probabilities.len(),
            data.len()
        )));
    }
    let mut indices = Vec::with_capacity(per_class * data.classes());
    for class in 0..data.classes() {
        let members = data.class_indices(class);
        let mut weights: Vec<f64> = members.iter().map(|&i| state.probabilities[i]).collect();
        let positive = weights.iter().filter(|&&w| w > 0.0).count();
        if positive < per_class {
            return Err(Error::InsufficientClassSamples {
                class,
                available: positive,
                required: per_class,
            });
        }
        for _ in 0..per_class {
            let total: f64 = weights.iter().sum();
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (pos, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(pos);
                if target < acc {
                    break;
                }
            }
            let pos = pick.expect("positive weight remains");
            weights[pos] = 0.0;
            indices.push(members[pos]);
        }
    }
    let subset = data.select(&indices);
    Ok(LearningSample {
        signals: subset.signals().clone(),
        labels: subset.labels().to_vec(),
        next: state.decayed(&indices, decay),
        indices,
    })
}

/// Population standard deviation of every column.
fn column_std(x: &Array2<f64>) -> Vec<f64> {
    x.columns()
        .into_iter()
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.sum() / n;
            (c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Noise standard deviation per column at (1-based) iteration `iteration`:
/// `iteration · σ_i · noise`, except that the first iteration is noise-free.
pub fn noise_scales(x: &Array2<f64>, iteration: usize, noise: f64) -> Vec<f64> {
    if iteration <= 1 {
        return vec![0.0; x.ncols()];
    }
    column_std(x)
        .into_iter()
        .map(|s| iteration as f64 * s * noise)
        .collect()
}

/// Adds zero-mean Gaussian noise with the scales of [`noise_scales`].
pub fn degrade<R: Rng + ?Sized>(x: &Array2<f64>, iteration: usize, noise: f64, rng: &mut R) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::InvalidParameter(format!("noise factor {noise} must lie in [0, 1)")));
    }
    if iteration == 0 {
        return Err(Error::InvalidParameter("iterations are numbered from 1".into()));
    }
    let mut out = x.clone();
    if iteration == 1 || noise == 0.0 {
        return Ok(out);
    }
    let scales = noise_scales(x, iteration, noise);
    for (mut col, s) in out.columns_mut().into_iter().zip(scales) {
        for v in col.iter_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// How the atom of every class is chosen from each KSVD dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AtomSelection {
    /// Highest combined discriminative measure per class.
    #[default]
    Discriminative,
    /// Uniformly random distinct atoms (comparison baseline).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DasConfig {
    /// Non-zeros per code; `None` means 20 % of the atom count.
    pub sparsity: Option<usize>,
    /// Atoms per signal dimension of the KSVD dictionaries.
    pub redundancy: f64,
    /// Signals drawn per class and iteration.
    pub per_class: usize,
    /// Number of iterations (atoms per class in the result).
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Factor applied to the probability of drawn signals.
    pub decay: f64,
    /// Noise factor.
    pub noise: f64,
    pub ksvd_iterations: usize,
    pub max_restarts: usize,
    pub selection: AtomSelection,
}

impl Default for DasConfig {
    fn default() -> Self {
        Self {
            sparsity: None,
            redundancy: 1.0,
            per_class: 500,
            iterations: 20,
            alpha: 1.0 / 3.0,
            beta: 1.0 / 6.0,
            decay: 0.5,
            noise: 0.1,
            ksvd_iterations: 50,
            max_restarts: 10,
            selection: AtomSelection::Discriminative,
        }
    }
}

/// Default sparsity: 20 % of `atoms`, at least 1.
pub fn default_sparsity(atoms: usize) -> usize {
    ((0.2 * atoms as f64).round() as usize).max(1)
}

impl DasConfig {
    pub fn atoms(&self, dim: usize) -> usize {
        (self.redundancy * dim as f64).round() as usize
    }

    pub fn sparsity_for(&self, atoms: usize) -> usize {
        self.sparsity.unwrap_or_else(|| default_sparsity(atoms))
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex(self.alpha, self.beta)?;
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("at least one iteration is required".into()));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidParameter("per-class sample count must be positive".into()));
        }
        if !(self.redundancy > 0.0) {
            return Err(Error::InvalidParameter(format!("redundancy {} must be positive", self.redundancy)));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::InvalidParameter(format!("decay {} must lie in [0, 1)", self.decay)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::InvalidParameter(format!("noise {} must lie in [0, 1)", self.noise)));
        }
        Ok(())
    }
}

/// k class blocks of equally many atoms, stacked side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredDictionary {
    atoms: Array2<f64>,
    class_tags: Vec<usize>,
    source_iterations: Vec<usize>,
    classes: usize,
}

impl StructuredDictionary {
    /// `per_class[ℓ]` holds the atoms of class ℓ with the iteration each
    /// came from.
    pub fn from_class_atoms(per_class: &[Vec<(Vec<f64>, usize)>]) -> Result<Self> {
        let classes = per_class.len();
        let block = per_class.first().map_or(0, Vec::len);
        if classes == 0 || block == 0 {
            return Err(Error::InvalidDictionary("structured dictionary without atoms".into()));
        }
        if per_class.iter().any(|b| b.len() != block) {
            return Err(Error::InvalidDictionary("class blocks differ in size".into()));
        }
        let dim = per_class[0][0].0.len();
        let mut data = Vec::with_capacity(dim * block * classes);
        let mut class_tags = Vec::with_capacity(block * classes);
        let mut source_iterations = Vec::with_capacity(block * classes);
        for (l, atoms) in per_class.iter().enumerate() {
            for (atom, iter) in atoms {
                if atom.len() != dim {
                    return Err(Error::DimensionMismatch("atoms of different lengths".into()));
                }
                data.extend_from_slice(atom);
                class_tags.push(l);
                source_iterations.push(*iter);
            }
        }
        let atoms = Array2::from_shape_vec((dim, block * classes).f(), data).expect("shape");
        Self::from_parts(atoms, class_tags, source_iterations, classes)
    }

    pub fn from_parts(
        atoms: Array2<f64>,
        class_tags: Vec<usize>,
        source_iterations: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let m = atoms.ncols();
        if class_tags.len() != m || source_iterations.len() != m || classes == 0 || m % classes != 0 {
            return Err(Error::InvalidDictionary(format!(
                "{m} atoms, {} tags, {} iterations, {classes} classes",
                class_tags.len(),
                source_iterations.len()
            )));
        }
        let block = m / classes;
        for (pos, &tag) in class_tags.iter().enumerate() {
            if tag != pos / block {
                return Err(Error::InvalidDictionary(format!(
                    "atom {pos} tagged {tag}, expected class block {}",
                    pos / block
                )));
            }
        }
        // validates unit norms
        let tags = class_tags.iter().map(|&t| Some(t)).collect();
        let dict = Dictionary::with_tags(atoms, tags)?;
        Ok(Self {
            atoms: dict.atoms().clone(),
            class_tags,
            source_iterations,
            classes,
        })
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn class_tags(&self) -> &[usize] {
        &self.class_tags
    }

    pub fn source_iterations(&self) -> &[usize] {
        &self.source_iterations
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn atoms_per_class(&self) -> usize {
        self.atoms.ncols() / self.classes
    }

    pub fn len(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.ncols() == 0
    }

    /// The N×I sub-dictionary of class `class`.
    pub fn class_block(&self, class: usize) -> ArrayView2<'_, f64> {
        let b = self.atoms_per_class();
        self.atoms.slice(ndarray::s![.., class * b..(class + 1) * b])
    }

    /// The assembled matrix as a tagged [`Dictionary`].
    pub fn dictionary(&self) -> Dictionary {
        Dictionary::with_tags(
            self.atoms.clone(),
            self.class_tags.iter().map(|&t| Some(t)).collect(),
        )
        .expect("validated on construction")
    }

    /// Keeps only the atoms from the first `iterations` iterations
    /// (the dictionary a shorter run would have produced).
    pub fn truncated(&self, iterations: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&j| self.source_iterations[j] <= iterations)
            .collect();
        let n = self.atoms.nrows();
        let mut data = Vec::with_capacity(n * keep.len());
        for &j in &keep {
            data.extend(self.atoms.column(j).iter());
        }
        let atoms = Array2::from_shape_vec((n, keep.len()).f(), data).expect("shape");
        Self::from_parts(
            atoms,
            keep.iter().map(|&j| self.class_tags[j]).collect(),
            keep.iter().map(|&j| self.source_iterations[j]).collect(),
            self.classes,
        )
    }
}

/// Progress record of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// 1-based.
    pub iteration: usize,
    pub restarts: usize,
    /// Final KSVD objective on the degraded learning set.
    pub objective: f64,
    /// Atom index within that iteration's KSVD dictionary, per class.
    pub atoms: Vec<usize>,
    /// Combined measure of each selected atom (NaN for random selection).
    pub measures: Vec<f64>,
    /// Selected atoms nearly parallel (|cos| > 0.999) to an earlier one.
    pub duplicates: usize,
}

#[derive(Debug, Clone)]
pub struct DasOutput {
    pub dictionary: StructuredDictionary,
    pub log: Vec<IterationLog>,
}

/// Builds the structured dictionary of `config.iterations · k` atoms.
///
/// A learning set whose KSVD dictionary lacks a discriminative atom for some
/// class is redrawn from the distribution at the start of the iteration, at
/// most `config.max_restarts` times.
pub fn das_ksvd(data: &LabeledDataset, config: &DasConfig, seed: u64) -> Result<DasOutput> {
    config.validate()?;
    let k = data.classes();
    let dim = data.dim();
    let atoms = config.atoms(dim);
    let q = config.sparsity_for(atoms);
    if atoms == 0 || q == 0 || q > atoms.min(dim) {
        return Err(Error::InvalidSparsity(format!("q = {q} with {atoms} atoms of dimension {dim}")));
    }
    if config.per_class * k < atoms {
        return Err(Error::InsufficientSamples {
            available: config.per_class * k,
            required: atoms,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random selection draws from its own stream so the sampled learning
    // sets and KSVD dictionaries match a discriminative run with the same seed.
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0xA70E));
    let mut state = init_distribution(data.len())?;
    let mut per_class: Vec<Vec<(Vec<f64>, usize)>> = vec![Vec::new(); k];
    let mut log = Vec::with_capacity(config.iterations);

    for it in 1..=config.iterations {
        let mut restarts = 0;
        loop {
            let sample = sample_learning_set(data, &state, config.per_class, config.decay, &mut rng)?;
            let noisy = degrade(&sample.signals, it, config.noise, &mut rng)?;
            let ksvd = ksvd_train(&noisy, atoms, q, config.ksvd_iterations, rng.next_u64())?;
            let dict = ksvd.dictionary;

            let (chosen, measures) = match config.selection {
                AtomSelection::Discriminative => {
                    let codes = encode_matrix(&sample.signals, &dict, q, DEFAULT_RESIDUAL_TOL)?.codes;
                    let scores = score_atoms(&sample.signals, &dict, &codes, &sample.labels, k, config.alpha, config.beta)?;
                    match select_discriminant_atoms(&scores, k) {
                        Ok(chosen) => {
                            let measures = chosen.iter().map(|&j| scores[j].combined).collect();
                            (chosen, measures)
                        }
                        Err(Error::NoDiscriminativeAtom(class)) => {
                            restarts += 1;
                            log::warn!("iteration {it}: no discriminative atom for class {class}, restart {restarts}");
                            if restarts > config.max_restarts {
                                return Err(Error::RestartLimitExceeded {
                                    iteration: it,
                                    restarts: config.max_restarts,
                                });
                            }
                            continue;
                        }
                        Err(e) => return Err(e),
                    }
                }
                AtomSelection::Random => {
                    let chosen = index::sample(&mut pick_rng, atoms, k).into_vec();
                    (chosen, vec![f64::NAN; k])
                }
            };

            let mut duplicates = 0;
            for (class, &j) in chosen.iter().enumerate() {
                let atom = dict.atom(j).to_vec();
                if per_class
                    .iter()
                    .flatten()
                    .any(|(prev, _)| dot(prev, &atom).abs() > 0.999)
                {
                    duplicates += 1;
                }
                per_class[class].push((atom, it));
            }
            if duplicates > 0 {
                log::info!("iteration {it}: {duplicates} selected atoms duplicate earlier ones");
            }
            let objective = ksvd.objective_trace.last().copied().unwrap_or(f64::NAN);
            log::info!(
                "iteration {it}/{}: objective {objective:.4e}, atoms {chosen:?}, measures {measures:.3?}",
                config.iterations
            );
            log.push(IterationLog {
                iteration: it,
                restarts,
                objective,
                atoms: chosen,
                measures,
                duplicates,
            });
            state = sample.next;
            break;
        }
    }

    Ok(DasOutput {
        dictionary: StructuredDictionary::from_class_atoms(&per_class)?,
        log,
    })
}
