use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dasksvd::artifact::{self, Artifact, ArtifactKind, Persist};
use dasksvd::das::{das_ksvd, default_sparsity, AtomSelection, DasConfig, StructuredDictionary};
use dasksvd::data::{build_partitions, load_mnist, prepare_test, LabeledDataset};
use dasksvd::ksvd::ksvd_train;
use dasksvd::mlp::{init_mlp, one_hot, scg_train, write_loss_csv, MlpModel, TrainConfig};
use dasksvd::omp::{encode_matrix, Dictionary, SparseCodeMatrix, DEFAULT_RESIDUAL_TOL};
use dasksvd::pipeline::{self, FeatureMode, Partitions, RunConfig, SeedPlan};
use dasksvd::seeds::{self, Stage};
use dasksvd::tuning::{self, write_search_csv};
use dasksvd::ErrorCategory;

#[derive(Parser)]
#[command(name = "dasksvd", version, about = "Discriminative structured dictionaries and sparse-feature MLP classification")]
struct Cli {
    /// Run seed; every randomized stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output format of reports printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce MNIST and write train, validation and test dataset artifacts.
    PrepareData {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a plain KSVD dictionary on a dataset artifact.
    TrainDict {
        #[arg(long)]
        data: PathBuf,
        /// Number of atoms (default: signal dimension).
        #[arg(long)]
        atoms: Option<usize>,
        /// Non-zeros per code (default: 20 % of the atoms).
        #[arg(long)]
        sparsity: Option<usize>,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a discriminative structured dictionary.
    DasKsvd {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        das: DasArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-iteration log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Structured dictionary of the same size with random atom selection.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        das: DasArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparse-code a dataset with a dictionary.
    Encode {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Non-zeros per code (default: 20 % of the atoms).
        #[arg(long)]
        sparsity: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the MLP classifier on codes.
    TrainMlp {
        #[arg(long)]
        codes: PathBuf,
        /// Dataset artifact providing the labels of the coded signals.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        mlp: MlpArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-epoch loss as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Accuracy of a trained model on coded data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Reference accuracy for the significance comparison.
        #[arg(long)]
        reference_accuracy: Option<f64>,
    },
    /// Two-stage search of the measure weights on the validation accuracy.
    GridSearch {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[command(flatten)]
        das: DasArgs,
        #[command(flatten)]
        mlp: MlpArgs,
        #[arg(long, default_value_t = 1.0 / 6.0)]
        delta1: f64,
        #[arg(long, default_value_t = 0.01)]
        delta2: f64,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// Write all evaluated points as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probability that a method beats a reference, from two accuracies.
    Significance {
        #[arg(long)]
        reference: f64,
        #[arg(long)]
        accuracy: f64,
        /// Test-set size.
        #[arg(short, long)]
        n: usize,
    },
    /// Full experiment from MNIST files to a JSON report.
    Run {
        /// JSON run configuration; command-line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        das: DasArgs,
        #[command(flatten)]
        mlp: MlpArgs,
        #[arg(long, value_enum)]
        features: Option<Features>,
        #[arg(long)]
        round: Option<u64>,
        #[arg(long)]
        reference_accuracy: Option<f64>,
        /// Directory receiving the dictionary, model, loss curve and report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "DASKSVD_DATA_DIR")]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    per_class_train: Option<usize>,
    #[arg(long)]
    per_class_val: Option<usize>,
}

#[derive(Args)]
struct DasArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Iterations, i.e. atoms per class.
    #[arg(long)]
    iterations: Option<usize>,
    /// Learning signals drawn per class and iteration.
    #[arg(long)]
    per_class: Option<usize>,
    /// Probability decay of drawn signals.
    #[arg(long)]
    decay: Option<f64>,
    /// Noise factor of the degradation schedule.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    ksvd_iterations: Option<usize>,
    /// KSVD atoms per signal dimension.
    #[arg(long)]
    redundancy: Option<f64>,
    /// KSVD sparsity (default: 20 % of the atoms).
    #[arg(long)]
    sparsity: Option<usize>,
    #[arg(long)]
    max_restarts: Option<usize>,
}

impl DasArgs {
    fn apply(&self, c: &mut DasConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(alpha, beta, iterations, per_class, decay, noise, ksvd_iterations, redundancy, max_restarts);
        if self.sparsity.is_some() {
            c.sparsity = self.sparsity;
        }
    }

    fn config(&self) -> DasConfig {
        let mut c = DasConfig::default();
        self.apply(&mut c);
        c
    }
}

#[derive(Args)]
struct MlpArgs {
    /// Hidden units (default: input size).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop when an epoch changes the loss by less than this.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Non-zeros per feature vector (default: 20 % of the atoms).
    #[arg(long)]
    feature_sparsity: Option<usize>,
}

impl MlpArgs {
    fn apply(&self, c: &mut RunConfig) {
        if self.hidden.is_some() {
            c.hidden = self.hidden;
        }
        if let Some(e) = self.epochs {
            c.train.max_epochs = e;
        }
        if let Some(t) = self.tolerance {
            c.train.tolerance = t;
        }
        if self.feature_sparsity.is_some() {
            c.feature_sparsity = self.feature_sparsity;
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Das,
    RandomAtoms,
    Ksvd,
    Raw,
}

impl From<Features> for FeatureMode {
    fn from(f: Features) -> Self {
        match f {
            Features::Das => FeatureMode::Das,
            Features::RandomAtoms => FeatureMode::RandomAtoms,
            Features::Ksvd => FeatureMode::Ksvd,
            Features::Raw => FeatureMode::Raw,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<dasksvd::Error>() {
        return match e.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        };
    }
    if err.downcast_ref::<io::Error>().is_some() {
        return 3;
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let format = cli.format;
    match cli.command {
        Command::PrepareData { data, out } => prepare_data(&data, seed, &out, format),
        Command::TrainDict {
            data,
            atoms,
            sparsity,
            iterations,
            out,
        } => {
            let (ds, _) = artifact::load::<LabeledDataset>(&data)?;
            let m = atoms.unwrap_or(ds.dim());
            let q = sparsity.unwrap_or_else(|| default_sparsity(m));
            let dict_seed = seeds::stage_seed(seed, Stage::Dictionary);
            let result = ksvd_train(ds.signals(), m, q, iterations, dict_seed)?;
            let meta = meta(&[("seed", seed.to_string()), ("sparsity", q.to_string()), ("iterations", iterations.to_string())]);
            artifact::save(&out, &result.dictionary, &meta)?;
            emit(
                format,
                json!({"atoms": m, "sparsity": q, "objective": result.objective_trace.last(), "replaced_atoms": result.replaced_atoms}),
            )
        }
        Command::DasKsvd { data, das, out, log } => {
            structured(&data, das.config(), AtomSelection::Discriminative, seed, &out, log.as_deref(), format)
        }
        Command::Baseline { data, das, out } => structured(&data, das.config(), AtomSelection::Random, seed, &out, None, format),
        Command::Encode {
            dict,
            data,
            sparsity,
            out,
        } => {
            let d = load_any_dictionary(&dict)?;
            let (ds, _) = artifact::load::<LabeledDataset>(&data)?;
            let q = sparsity.unwrap_or_else(|| default_sparsity(d.len()));
            let enc = encode_matrix(ds.signals(), &d, q, DEFAULT_RESIDUAL_TOL)?;
            artifact::save(&out, &enc.codes, &meta(&[("dictionary", dict.display().to_string())]))?;
            emit(
                format,
                json!({"signals": ds.len(), "atoms": d.len(), "sparsity": q, "degenerate_columns": enc.degenerate_columns}),
            )
        }
        Command::TrainMlp {
            codes,
            data,
            mlp,
            out,
            loss_csv,
        } => {
            let (codes, _) = artifact::load::<SparseCodeMatrix>(&codes)?;
            let (ds, _) = artifact::load::<LabeledDataset>(&data)?;
            if codes.len() != ds.len() {
                bail!("{} codes for {} labelled signals", codes.len(), ds.len());
            }
            let features = codes.to_dense();
            let d = features.nrows();
            let mut cfg = TrainConfig::default();
            if let Some(e) = mlp.epochs {
                cfg.max_epochs = e;
            }
            if let Some(t) = mlp.tolerance {
                cfg.tolerance = t;
            }
            let model = init_mlp(d, mlp.hidden.unwrap_or(d), ds.classes(), seeds::stage_seed(seed, Stage::Mlp))?;
            let targets = one_hot(ds.labels(), ds.classes());
            let trained = scg_train(&model, features.view(), targets.view(), &cfg)?;
            artifact::save(&out, &trained.model, &meta(&[("seed", seed.to_string())]))?;
            if let Some(p) = loss_csv {
                let f = fs::File::create(&p).with_context(|| p.display().to_string())?;
                write_loss_csv(f, &trained.losses)?;
            }
            emit(
                format,
                json!({
                    "architecture": trained.model.architecture(),
                    "weight_count": trained.model.weight_count(),
                    "epochs": trained.losses.len() - 1,
                    "initial_mse": trained.losses[0],
                    "final_mse": trained.losses.last(),
                }),
            )
        }
        Command::Evaluate {
            model,
            codes,
            data,
            reference_accuracy,
        } => {
            let (model, _) = artifact::load::<MlpModel>(&model)?;
            let (codes, _) = artifact::load::<SparseCodeMatrix>(&codes)?;
            let (ds, _) = artifact::load::<LabeledDataset>(&data)?;
            let s = pipeline::score(&model, &codes.to_dense(), ds.labels(), ds.classes())?;
            let significance = reference_accuracy
                .map(|r| tuning::significance(r, s.accuracy, s.n))
                .transpose()?;
            emit(
                format,
                json!({
                    "accuracy": s.accuracy,
                    "per_class_accuracy": s.per_class_accuracy,
                    "n_test": s.n,
                    "weight_count": model.weight_count(),
                    "architecture": model.architecture(),
                    "confusion": s.confusion,
                    "significance": significance,
                }),
            )
        }
        Command::GridSearch {
            train,
            val,
            das,
            mlp,
            delta1,
            delta2,
            rounds,
            out,
        } => {
            let (train, _) = artifact::load::<LabeledDataset>(&train)?;
            let (val, _) = artifact::load::<LabeledDataset>(&val)?;
            let mut cfg = RunConfig {
                das: das.config(),
                seed,
                ..RunConfig::default()
            };
            mlp.apply(&mut cfg);
            let test = val.select(&[]);
            let parts = Partitions { train, val, test };
            let result = pipeline::search_weights(&parts, &cfg, delta1, delta2, rounds)?;
            if let Some(p) = out {
                let f = fs::File::create(&p).with_context(|| p.display().to_string())?;
                write_search_csv(f, &result)?;
            }
            match format {
                Format::Json => print_json(&serde_json::to_value(&result)?),
                Format::Csv => {
                    write_search_csv(io::stdout().lock(), &result)?;
                    Ok(())
                }
            }
        }
        Command::Significance { reference, accuracy, n } => {
            let p = tuning::significance(reference, accuracy, n)?;
            emit(format, json!({"reference": reference, "accuracy": accuracy, "n": n, "probability": p}))
        }
        Command::Run {
            config,
            data,
            das,
            mlp,
            features,
            round,
            reference_accuracy,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
                    serde_json::from_str::<RunConfig>(&text).map_err(dasksvd::Error::from)?
                }
                None => RunConfig::default(),
            };
            if let Some(d) = data.mnist_dir {
                cfg.data_dir = d;
            }
            if let Some(v) = data.per_class_train {
                cfg.per_class_train = v;
            }
            if let Some(v) = data.per_class_val {
                cfg.per_class_val = v;
            }
            das.apply(&mut cfg.das);
            mlp.apply(&mut cfg);
            if let Some(f) = features {
                cfg.features = f.into();
            }
            if let Some(r) = round {
                cfg.round = r;
            }
            if reference_accuracy.is_some() {
                cfg.reference_accuracy = reference_accuracy;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let report = pipeline::run_pipeline(&cfg, out.as_deref())?;
            emit(format, serde_json::to_value(&report)?)
        }
    }
}

fn meta(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn prepare_data(args: &DataArgs, seed: u64, out: &Path, format: Format) -> anyhow::Result<()> {
    let dir = args
        .mnist_dir
        .clone()
        .unwrap_or_else(|| RunConfig::default().data_dir);
    let defaults = RunConfig::default();
    let per_train = args.per_class_train.unwrap_or(defaults.per_class_train);
    let per_val = args.per_class_val.unwrap_or(defaults.per_class_val);
    let train_raw = load_mnist(&dir, "train")?;
    let test_raw = load_mnist(&dir, "t10k")?;
    let plan = SeedPlan::for_run(seed, 0);
    let (train, val) = build_partitions(&train_raw, per_train, per_val, plan.partition)?;
    let test = prepare_test(&test_raw);
    let m = meta(&[
        ("seed", seed.to_string()),
        ("per_class_train", per_train.to_string()),
        ("per_class_val", per_val.to_string()),
    ]);
    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        artifact::save(&out.join(format!("{name}.dksv")), ds, &m)?;
    }
    emit(
        format,
        json!({"train": train.len(), "val": val.len(), "test": test.len(), "dim": train.dim(), "out": out.display().to_string()}),
    )
}

fn structured(
    data: &Path,
    das: DasConfig,
    selection: AtomSelection,
    seed: u64,
    out: &Path,
    log: Option<&Path>,
    format: Format,
) -> anyhow::Result<()> {
    let (ds, _) = artifact::load::<LabeledDataset>(data)?;
    let config = DasConfig { selection, ..das };
    let result = das_ksvd(&ds, &config, SeedPlan::for_run(seed, 0).dictionary)?;
    let m = meta(&[("seed", seed.to_string()), ("das_config", serde_json::to_string(&config)?)]);
    artifact::save(out, &result.dictionary, &m)?;
    if let Some(p) = log {
        fs::write(p, serde_json::to_string_pretty(&result.log)?).with_context(|| p.display().to_string())?;
    }
    emit(
        format,
        json!({
            "atoms": result.dictionary.len(),
            "classes": result.dictionary.classes(),
            "restarts": result.log.iter().map(|l| l.restarts).sum::<usize>(),
            "duplicates": result.log.iter().map(|l| l.duplicates).sum::<usize>(),
        }),
    )
}

fn load_any_dictionary(path: &Path) -> anyhow::Result<Dictionary> {
    let a: Artifact = artifact::load_artifact(path)?;
    Ok(match a.kind {
        ArtifactKind::StructuredDictionary => StructuredDictionary::from_artifact(&a)?.dictionary(),
        _ => Dictionary::from_artifact(&a)?,
    })
}

fn print_json(v: &Value) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

/// Prints `v` as JSON, or as `key,value` CSV rows with nested values
/// flattened to dotted keys.
fn emit(format: Format, v: Value) -> anyhow::Result<()> {
    match format {
        Format::Json => print_json(&v),
        Format::Csv => {
            let mut rows = Vec::new();
            flatten("", &v, &mut rows);
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(["key", "value"])?;
            for (k, v) in rows {
                w.write_record([k, v])?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => map.iter().for_each(|(k, v)| flatten(&key(k), v, rows)),
        Value::Array(items) => items.iter().enumerate().for_each(|(i, v)| flatten(&key(&i.to_string()), v, rows)),
        Value::String(s) => rows.push((prefix.to_string(), s.clone())),
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}
