//! Run configuration and the end-to-end experiment: partitions, dictionary,
//! sparse features, MLP training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::das::{das_ksvd, default_sparsity, AtomSelection, DasConfig, IterationLog, StructuredDictionary};
use crate::data::{build_partitions, load_mnist, prepare_test, LabeledDataset};
use crate::error::{Error, Result};
use crate::ksvd::ksvd_train;
use crate::mlp::{init_mlp, one_hot, scg_train, write_loss_csv, MlpModel, StopReason, TrainConfig};
use crate::omp::{encode_matrix, Dictionary, DEFAULT_RESIDUAL_TOL};
use crate::seeds::{self, Stage};
use crate::tuning::{self, GridPoint, SearchResult};

/// Source of the MLP input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Sparse codes over the discriminative structured dictionary.
    #[default]
    Das,
    /// Same construction with uniformly random atom selection.
    RandomAtoms,
    /// Plain KSVD dictionary with as many atoms as the structured one.
    Ksvd,
    /// The reduced images themselves.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub features: FeatureMode,
    pub das: DasConfig,
    /// Non-zeros per feature vector; `None` means 20 % of the atom count.
    pub feature_sparsity: Option<usize>,
    /// Hidden units; `None` means as many as inputs.
    pub hidden: Option<usize>,
    pub train: TrainConfig,
    pub seed: u64,
    /// Re-seeds dictionary construction and MLP initialization.
    pub round: u64,
    /// Accuracy of a reference method on the same test set, for the
    /// significance comparison.
    pub reference_accuracy: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/mnist"),
            per_class_train: 4000,
            per_class_val: 1000,
            features: FeatureMode::Das,
            das: DasConfig::default(),
            feature_sparsity: None,
            hidden: None,
            train: TrainConfig::default(),
            seed: 0,
            round: 0,
            reference_accuracy: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.das.validate()?;
        self.train.validate()?;
        if self.per_class_train == 0 {
            return Err(Error::InvalidParameter("per-class training count must be positive".into()));
        }
        if let Some(a) = self.reference_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidParameter(format!("reference accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Seeds of the randomized stages of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub partition: u64,
    pub dictionary: u64,
    pub mlp: u64,
}

impl SeedPlan {
    pub fn for_run(seed: u64, round: u64) -> Self {
        Self {
            partition: seeds::stage_seed(seed, Stage::Partition),
            dictionary: seeds::derive(seeds::stage_seed(seed, Stage::Dictionary), round),
            mlp: seeds::derive(seeds::stage_seed(seed, Stage::Mlp), round),
        }
    }

    /// Grid point `g` keeps the partition seed and derives the others.
    pub fn for_grid_point(seed: u64, point: usize, round: u64) -> Self {
        Self::for_run(seeds::derive(seed, 1000 + point as u64), round)
            .with_partition(seeds::stage_seed(seed, Stage::Partition))
    }

    fn with_partition(mut self, partition: u64) -> Self {
        self.partition = partition;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Partitions {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads both MNIST splits from `config.data_dir` and draws the partitions.
pub fn prepare(config: &RunConfig) -> Result<Partitions> {
    let ingest = || -> Result<Partitions> {
        let train_raw = load_mnist(&config.data_dir, "train")?;
        let test_raw = load_mnist(&config.data_dir, "t10k")?;
        let plan = SeedPlan::for_run(config.seed, config.round);
        let (train, val) = build_partitions(&train_raw, config.per_class_train, config.per_class_val, plan.partition)?;
        Ok(Partitions {
            train,
            val,
            test: prepare_test(&test_raw),
        })
    };
    ingest().map_err(|e| e.in_stage("ingest"))
}

/// The dictionary used for feature extraction.
#[derive(Debug, Clone)]
pub struct FeatureDictionary {
    pub dictionary: Option<Dictionary>,
    pub structured: Option<StructuredDictionary>,
    pub log: Vec<IterationLog>,
}

impl FeatureDictionary {
    pub fn atoms(&self) -> Option<usize> {
        self.dictionary.as_ref().map(Dictionary::len)
    }
}

/// Builds the feature dictionary for `mode` from the training partition.
pub fn build_dictionary(train: &LabeledDataset, config: &RunConfig, seed: u64) -> Result<FeatureDictionary> {
    let build = || -> Result<FeatureDictionary> {
        match config.features {
            FeatureMode::Das | FeatureMode::RandomAtoms => {
                let das = DasConfig {
                    selection: if config.features == FeatureMode::Das {
                        AtomSelection::Discriminative
                    } else {
                        AtomSelection::Random
                    },
                    ..config.das.clone()
                };
                let out = das_ksvd(train, &das, seed)?;
                Ok(FeatureDictionary {
                    dictionary: Some(out.dictionary.dictionary()),
                    structured: Some(out.dictionary),
                    log: out.log,
                })
            }
            FeatureMode::Ksvd => {
                let dict = plain_ksvd(train, &config.das, seed)?;
                Ok(FeatureDictionary {
                    dictionary: Some(dict),
                    structured: None,
                    log: Vec::new(),
                })
            }
            FeatureMode::Raw => Ok(FeatureDictionary {
                dictionary: None,
                structured: None,
                log: Vec::new(),
            }),
        }
    };
    build().map_err(|e| e.in_stage("dictionary"))
}

/// KSVD with `iterations · k` atoms trained on a uniformly drawn learning set
/// of `per_class` signals per class.
pub fn plain_ksvd(train: &LabeledDataset, das: &DasConfig, seed: u64) -> Result<Dictionary> {
    das.validate()?;
    let k = train.classes();
    let atoms = das.iterations * k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(das.per_class * k);
    for class in 0..k {
        let members = train.class_indices(class);
        if members.len() < das.per_class {
            return Err(Error::InsufficientClassSamples {
                class,
                available: members.len(),
                required: das.per_class,
            });
        }
        picked.extend(index::sample(&mut rng, members.len(), das.per_class).iter().map(|i| members[i]));
    }
    let learning = train.select(&picked);
    let q = default_sparsity(atoms).min(train.dim());
    Ok(ksvd_train(learning.signals(), atoms, q, das.ksvd_iterations, seeds::derive(seed, 1))?.dictionary)
}

/// Dense d×n features of `data`.
pub fn extract_features(dict: &FeatureDictionary, data: &LabeledDataset, sparsity: Option<usize>) -> Result<Array2<f64>> {
    let Some(d) = &dict.dictionary else {
        return Ok(data.signals().clone());
    };
    let q = sparsity.unwrap_or_else(|| default_sparsity(d.len())).min(d.len()).min(d.dim());
    encode_matrix(data.signals(), d, q, DEFAULT_RESIDUAL_TOL)
        .map(|out| out.codes.to_dense())
        .map_err(|e| e.in_stage("encode"))
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: MlpModel,
    pub losses: Vec<f64>,
    pub stop: StopReason,
}

pub fn train_classifier(
    features: &Array2<f64>,
    labels: &[usize],
    classes: usize,
    config: &RunConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    let train = || -> Result<TrainedClassifier> {
        let d = features.nrows();
        let model = init_mlp(d, config.hidden.unwrap_or(d), classes, seed)?;
        let targets = one_hot(labels, classes);
        let out = scg_train(&model, features.view(), targets.view(), &config.train)?;
        Ok(TrainedClassifier {
            model: out.model,
            losses: out.losses,
            stop: out.stop,
        })
    };
    train().map_err(|e| e.in_stage("mlp"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

pub fn score(model: &MlpModel, features: &Array2<f64>, labels: &[usize], classes: usize) -> Result<Scores> {
    let predictions = model.predict(features.view());
    Ok(Scores {
        accuracy: tuning::accuracy(labels, &predictions)?,
        per_class_accuracy: tuning::per_class_accuracy(labels, &predictions, classes)?,
        confusion: tuning::confusion_matrix(labels, &predictions, classes),
        n: labels.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub dictionary: f64,
    pub encode: f64,
    pub train: f64,
    pub evaluate: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub n_test: usize,
    pub weight_count: usize,
    pub config: RunConfig,
    pub seed: u64,
    pub seed_rule: String,
    pub seeds: SeedPlan,
    pub architecture: String,
    pub validation_accuracy: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub dictionary_atoms: Option<usize>,
    pub epochs: usize,
    pub final_mse: f64,
    pub stop: StopReason,
    pub significance: Option<f64>,
    pub timing: Timing,
}

impl Report {
    /// The report without wall-clock fields, for reproducibility checks.
    pub fn without_timing(&self) -> Report {
        Report {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub dictionary: FeatureDictionary,
    pub classifier: TrainedClassifier,
}

/// Runs dictionary construction, feature extraction, training and testing
/// on prepared partitions.
pub fn run_on(partitions: &Partitions, config: &RunConfig, plan: SeedPlan) -> Result<RunOutput> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let classes = partitions.train.classes();
    let start = Instant::now();
    let mut timing = Timing::default();

    let t = Instant::now();
    let dictionary = build_dictionary(&partitions.train, config, plan.dictionary)?;
    timing.dictionary = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let f_train = extract_features(&dictionary, &partitions.train, config.feature_sparsity)?;
    let f_val = if partitions.val.is_empty() {
        None
    } else {
        Some(extract_features(&dictionary, &partitions.val, config.feature_sparsity)?)
    };
    let f_test = extract_features(&dictionary, &partitions.test, config.feature_sparsity)?;
    timing.encode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let classifier = train_classifier(&f_train, partitions.train.labels(), classes, config, plan.mlp)?;
    timing.train = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let eval = || -> Result<(Scores, Option<Scores>, Option<f64>)> {
        let test = score(&classifier.model, &f_test, partitions.test.labels(), classes)?;
        let val = f_val
            .as_ref()
            .map(|f| score(&classifier.model, f, partitions.val.labels(), classes))
            .transpose()?;
        let significance = config
            .reference_accuracy
            .map(|r| tuning::significance(r, test.accuracy, test.n))
            .transpose()?;
        Ok((test, val, significance))
    };
    let (test, val, significance) = eval().map_err(|e| e.in_stage("evaluate"))?;
    timing.evaluate = t.elapsed().as_secs_f64();
    timing.total = start.elapsed().as_secs_f64();

    log::info!(
        "{} on {:?} features: test accuracy {:.4}",
        classifier.model.architecture(),
        config.features,
        test.accuracy
    );
    let report = Report {
        accuracy: test.accuracy,
        per_class_accuracy: test.per_class_accuracy,
        n_test: test.n,
        weight_count: classifier.model.weight_count(),
        config: config.clone(),
        seed: config.seed,
        seed_rule: seeds::SEED_RULE.to_string(),
        seeds: plan,
        architecture: classifier.model.architecture(),
        validation_accuracy: val.map(|v| v.accuracy),
        confusion: test.confusion,
        dictionary_atoms: dictionary.atoms(),
        epochs: classifier.losses.len() - 1,
        final_mse: *classifier.losses.last().expect("initial loss recorded"),
        stop: classifier.stop,
        significance,
        timing,
    };
    Ok(RunOutput {
        report,
        dictionary,
        classifier,
    })
}

/// Writes the dictionary, model, loss curve, iteration log and report into `dir`.
pub fn write_outputs(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = vec![
        ("seed".to_string(), output.report.seed.to_string()),
        ("config".to_string(), serde_json::to_string(&output.report.config)?),
    ];
    if let Some(s) = &output.dictionary.structured {
        artifact::save(&dir.join("dictionary.dksv"), s, &meta)?;
    } else if let Some(d) = &output.dictionary.dictionary {
        artifact::save(&dir.join("dictionary.dksv"), d, &meta)?;
    }
    artifact::save(&dir.join("model.dksv"), &output.classifier.model, &meta)?;
    let loss_path = dir.join("mlp_loss.csv");
    let f = fs::File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    write_loss_csv(f, &output.classifier.losses)?;
    if !output.dictionary.log.is_empty() {
        write_json(&dir.join("iterations.json"), &output.dictionary.log)?;
    }
    write_json(&dir.join("report.json"), &output.report)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads the data, runs the experiment and, when `out_dir` is given, writes
/// all artifacts there.
pub fn run_pipeline(config: &RunConfig, out_dir: Option<&Path>) -> Result<Report> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let partitions = prepare(config)?;
    let output = run_on(&partitions, config, SeedPlan::for_run(config.seed, config.round))?;
    if let Some(dir) = out_dir {
        write_outputs(dir, &output).map_err(|e| e.in_stage("output"))?;
    }
    Ok(output.report)
}

/// Two-stage (α, β) search maximizing validation accuracy. Each point and
/// round builds its own dictionary and classifier.
pub fn search_weights(
    partitions: &Partitions,
    config: &RunConfig,
    coarse_step: f64,
    fine_step: f64,
    rounds: usize,
) -> Result<SearchResult> {
    if partitions.val.is_empty() {
        return Err(Error::InvalidParameter("grid search needs a validation partition".into()));
    }
    tuning::two_stage_search(coarse_step, fine_step, rounds, |p: GridPoint, g, r| {
        validation_accuracy(partitions, config, p, SeedPlan::for_grid_point(config.seed, g, r as u64))
    })
}

/// Validation accuracy of the pipeline with measure weights `point`.
pub fn validation_accuracy(partitions: &Partitions, config: &RunConfig, point: GridPoint, plan: SeedPlan) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.das.alpha = point.alpha;
    cfg.das.beta = point.beta;
    cfg.features = FeatureMode::Das;
    let classes = partitions.train.classes();
    let dictionary = build_dictionary(&partitions.train, &cfg, plan.dictionary)?;
    let f_train = extract_features(&dictionary, &partitions.train, cfg.feature_sparsity)?;
    let f_val = extract_features(&dictionary, &partitions.val, cfg.feature_sparsity)?;
    let classifier = train_classifier(&f_train, partitions.train.labels(), classes, &cfg, plan.mlp)?;
    Ok(score(&classifier.model, &f_val, partitions.val.labels(), classes)?.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_data_is_an_ingest_error() {
        let cfg = RunConfig {
            data_dir: PathBuf::from("/nonexistent/mnist"),
            ..RunConfig::default()
        };
        match run_pipeline(&cfg, None) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "ingest"),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn grid_points_share_partitions_only() {
        let a = SeedPlan::for_grid_point(9, 0, 0);
        let b = SeedPlan::for_grid_point(9, 1, 0);
        assert_eq!(a.partition, b.partition);
        assert_eq!(a.partition, SeedPlan::for_run(9, 0).partition);
        assert_ne!(a.dictionary, b.dictionary);
        assert_ne!(a.mlp, SeedPlan::for_grid_point(9, 0, 1).mlp);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 3, "das": {"iterations": 5}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.das.iterations, 5);
        assert_eq!(partial.das.decay, 0.5);
    }
}
