//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line and then
//! asserts, so a failing criterion fails the target.
//!
//! The end-to-end criteria read MNIST from `$DASKSVD_DATA_DIR`, falling back
//! to `data/mnist` at the workspace root.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dasksvd::das::{degrade, init_distribution, noise_scales, sample_learning_set, DasConfig};
use dasksvd::data::LabeledDataset;
use dasksvd::ksvd::ksvd_train;
use dasksvd::measures::{
    activation_table, combined_measure, dominant_classes, measure_af, measure_cm, measure_re, ActivationTable, ROUNDOFF,
};
use dasksvd::mlp::{init_mlp, one_hot, scg_train, weight_count, MlpModel, TrainConfig};
use dasksvd::omp::{encode_matrix, omp, Dictionary, SparseCodeMatrix};
use dasksvd::pipeline::{prepare, run_on, FeatureMode, RunConfig, SeedPlan};
use dasksvd::tuning::{enumerate_grid, significance};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    // written directly so the line survives output capture
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{status}] {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_dictionary(n: usize, m: usize, r: &mut ChaCha8Rng) -> Dictionary {
    let cols: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    Dictionary::from_columns(&cols).unwrap()
}

fn random_signal(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("DASKSVD_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn criterion_01_grid_combinatorics() {
    let start = Instant::now();
    let counts: Vec<usize> = [6usize, 4, 14]
        .iter()
        .map(|&s| enumerate_grid(1.0 / s as f64).unwrap().len())
        .collect();
    let oracle: Vec<usize> = [6usize, 4, 14].iter().map(|&s| (0..=s).map(|i| s + 1 - i).sum()).collect();
    let elapsed = start.elapsed();
    let pass = counts == vec![28, 15, 120] && counts == oracle && elapsed < Duration::from_secs(1);
    report(1, "grid combinatorics", pass, &format!("sizes {counts:?} (lattice oracle {oracle:?}) in {elapsed:?}"));
}

/// Greedy pursuit with a fresh least-squares fit at every step.
fn greedy_replay(x: &[f64], dict: &Dictionary, q: usize) -> (Vec<usize>, f64) {
    let n = dict.dim();
    let xv = DVector::from_column_slice(x);
    let mut support: Vec<usize> = Vec::new();
    let mut residual = xv.clone();
    for _ in 0..q {
        let j = (0..dict.len())
            .filter(|j| !support.contains(j))
            .max_by(|&a, &b| {
                let ca = DVector::from_column_slice(dict.atom(a)).dot(&residual).abs();
                let cb = DVector::from_column_slice(dict.atom(b)).dot(&residual).abs();
                ca.partial_cmp(&cb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        support.push(j);
        residual = &xv - projection(&xv, dict, &support, n);
    }
    (support, residual.norm())
}

fn projection(x: &DVector<f64>, dict: &Dictionary, support: &[usize], n: usize) -> DVector<f64> {
    let a = DMatrix::from_fn(n, support.len(), |r, c| dict.atom(support[c])[r]);
    let coef = a.clone().svd(true, true).solve(x, 1e-14).unwrap();
    a * coef
}

fn subsets(m: usize, q: usize) -> Vec<Vec<usize>> {
    if q == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for last in q - 1..m {
        for mut s in subsets(last, q - 1) {
            s.push(last);
            out.push(s);
        }
    }
    out
}

#[test]
fn criterion_02_omp_properties() {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut support_ok, mut worst_orth) = (true, 0.0f64);
    for _ in 0..500 {
        let n = r.random_range(2..=16);
        let m = r.random_range(1..=32);
        let q = r.random_range(1..=4usize.min(n).min(m));
        let dict = random_dictionary(n, m, &mut r);
        let x = random_signal(n, &mut r);
        let out = omp(&x, &dict, q, 0.0).unwrap();
        support_ok &= out.code.nnz() <= q;
        let recon = dict.reconstruct(&out.code);
        let res: Vec<f64> = x.iter().zip(&recon).map(|(a, b)| a - b).collect();
        for &j in &out.code.indices {
            let c: f64 = dict.atom(j).iter().zip(&res).map(|(a, b)| a * b).sum();
            worst_orth = worst_orth.max(c.abs());
        }
    }
    let (mut replay_gap, mut optimum_violation, mut replay_same) = (0.0f64, 0.0f64, true);
    for _ in 0..200 {
        let q = r.random_range(1..=3);
        let dict = random_dictionary(8, 10, &mut r);
        let x = random_signal(8, &mut r);
        let out = omp(&x, &dict, q, 0.0).unwrap();
        let (support, replay_res) = greedy_replay(&x, &dict, q);
        replay_same &= support == out.selection;
        replay_gap = replay_gap.max((replay_res - out.residual_norm).abs());
        let xv = DVector::from_column_slice(&x);
        let best = subsets(10, q)
            .iter()
            .map(|s| (&xv - projection(&xv, &dict, s, 8)).norm())
            .fold(f64::INFINITY, f64::min);
        optimum_violation = optimum_violation.max(best - out.residual_norm);
    }
    let elapsed = start.elapsed();
    let pass = support_ok
        && worst_orth < 1e-8
        && replay_same
        && replay_gap < 1e-9
        && optimum_violation < 1e-9
        && elapsed < Duration::from_secs(60);
    report(
        2,
        "OMP property suite",
        pass,
        &format!(
            "support ≤ q: {support_ok}, max |Φ_Sᵀr| {worst_orth:.2e}, greedy replay identical: {replay_same}, \
             residual gap {replay_gap:.2e}, exhaustive optimum never beaten: {}, {elapsed:?}",
            optimum_violation < 1e-9
        ),
    );
}

#[test]
fn criterion_03_ksvd_recovery() {
    let start = Instant::now();
    let (n, m, q, signals) = (20, 30, 3, 1500);
    let mut r = rng(3);
    let planted = random_dictionary(n, m, &mut r);
    let mut data = Vec::with_capacity(n * signals);
    for _ in 0..signals {
        let support = rand::seq::index::sample(&mut r, m, q);
        let mut x = vec![0.0; n];
        for j in support.iter() {
            let c: f64 = r.sample::<f64, _>(StandardNormal);
            for (xi, a) in x.iter_mut().zip(planted.atom(j)) {
                *xi += c * a;
            }
        }
        data.extend(x);
    }
    let x = Array2::from_shape_vec((n, signals).f(), data).unwrap();
    let out = ksvd_train(&x, m, q, 50, 11).unwrap();
    let recovered = (0..m)
        .filter(|&p| {
            (0..m).any(|j| {
                let c: f64 = planted.atom(p).iter().zip(out.dictionary.atom(j)).map(|(a, b)| a * b).sum();
                c.abs() >= 0.95
            })
        })
        .count();
    let monotone = out
        .objective_trace
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + 1e-8));
    let elapsed = start.elapsed();
    let rate = recovered as f64 / m as f64;
    let pass = rate >= 0.8 && monotone && elapsed < Duration::from_secs(120);
    report(
        3,
        "KSVD planted recovery",
        pass,
        &format!("{recovered}/{m} atoms recovered ({:.0}%), objective non-increasing: {monotone}, {elapsed:?}", rate * 100.0),
    );
}

/// Leave-one-atom-out errors by explicit reconstruction without the atom.
fn brute_force_re(x: &Array2<f64>, dict: &Dictionary, codes: &SparseCodeMatrix, labels: &[usize], k: usize) -> Vec<f64> {
    let m = dict.len();
    let mut err = vec![vec![0.0; m]; k];
    let mut sizes = vec![0usize; k];
    let mut energy = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        sizes[l] += 1;
        energy[l] += x.column(i).iter().map(|v| v * v).sum::<f64>();
        for (j, row) in err[l].iter_mut().enumerate() {
            let mut e: Vec<f64> = x.column(i).to_vec();
            for (&a, &v) in codes.column(i).indices.iter().zip(&codes.column(i).values) {
                if a != j {
                    for (ei, p) in e.iter_mut().zip(dict.atom(a)) {
                        *ei -= v * p;
                    }
                }
            }
            *row += e.iter().map(|v| v * v).sum::<f64>();
        }
    }
    // dominant and runner-up classes from activation counts
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let mut hits = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            if codes.column(i).get(j) != 0.0 {
                hits[l] += 1;
            }
        }
        let p: Vec<f64> = hits.iter().zip(&sizes).map(|(&h, &s)| h as f64 / s as f64).collect();
        let top = (0..k).fold(0, |b, l| if p[l] > p[b] { l } else { b });
        let second = (0..k).filter(|&l| l != top).fold(usize::MAX, |b, l| {
            if b == usize::MAX || p[l] > p[b] {
                l
            } else {
                b
            }
        });
        let r = |l: usize| if err[l][j] <= ROUNDOFF * energy[l] { 0.0 } else { err[l][j] / sizes[l] as f64 };
        let (rt, rs) = (r(top), r(second));
        out.push(if rt > 0.0 { ((rt - rs) / rt).max(0.0) } else { 0.0 });
    }
    out
}

#[test]
fn criterion_04_measure_oracles() {
    let start = Instant::now();
    let mut r = rng(4);
    let (mut worst_rel, mut in_range, mut corners_exact) = (0.0f64, true, true);
    for _ in 0..100 {
        let n = r.random_range(2..=16);
        let m = r.random_range(2..=20);
        let k = r.random_range(2..=4);
        let count = r.random_range(k..=100);
        let q = r.random_range(1..=3usize.min(n).min(m));
        let dict = random_dictionary(n, m, &mut r);
        let labels: Vec<usize> = (0..count).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
        let x = Array2::from_shape_fn((n, count), |_| r.sample::<f64, _>(StandardNormal));
        let codes = encode_matrix(&x, &dict, q, 0.0).unwrap().codes;
        let table = activation_table(&codes, &labels, k).unwrap();
        let classes = dominant_classes(&table).unwrap();
        let af = measure_af(&table, &classes);
        let cm = measure_cm(&codes, &labels, k, &classes).unwrap();
        let re = measure_re(&x, &dict, &codes, &labels, k, &classes).unwrap();
        let oracle = brute_force_re(&x, &dict, &codes, &labels, k);
        for (a, b) in re.iter().zip(&oracle) {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                worst_rel = worst_rel.max((a - b).abs() / scale);
            }
        }
        in_range &= af.iter().chain(&cm).chain(&re).all(|v| (0.0..=1.0).contains(v));
        corners_exact &= combined_measure(&af, &cm, &re, 1.0, 0.0).unwrap() == af
            && combined_measure(&af, &cm, &re, 0.0, 1.0).unwrap() == cm
            && combined_measure(&af, &cm, &re, 0.0, 0.0).unwrap() == re;
    }
    let elapsed = start.elapsed();
    let pass = worst_rel < 1e-9 && in_range && corners_exact && elapsed < Duration::from_secs(30);
    report(
        4,
        "measure oracle equivalence",
        pass,
        &format!(
            "m_re vs brute force max rel err {worst_rel:.2e}, all in [0,1]: {in_range}, corners exact: {corners_exact}, {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_05_activation_semantics() {
    // ten classes of ten signals; atom 0 peaks on class 4 with class 5
    // second, atom 1 ties classes 2 and 7 (classes numbered from 1)
    let p0: [f64; 10] = [0.1, 0.2, 0.1, 0.9, 0.6, 0.3, 0.1, 0.2, 0.1, 0.0];
    let p1: [f64; 10] = [0.1, 0.7, 0.3, 0.2, 0.1, 0.4, 0.7, 0.3, 0.2, 0.1];
    let counts = Array2::from_shape_fn((10, 2), |(l, j)| ((if j == 0 { p0[l] } else { p1[l] }) * 10.0).round() as usize);
    let table = ActivationTable::from_counts(counts, vec![10; 10]).unwrap();
    let classes = dominant_classes(&table).unwrap();
    let af = measure_af(&table, &classes);
    let combined = combined_measure(&af, &[0.0; 2], &[0.0; 2], 1.0, 0.0).unwrap();
    let disc = classes.dominant[0] == 3 && classes.runner_up[0] == 4 && combined[0] > 0.0;
    let tied = [classes.dominant[1], classes.runner_up[1]];
    let tie = (tied == [1, 6] || tied == [6, 1]) && af[1] == 0.0 && combined[1] <= 0.0;
    report(
        5,
        "activation table semantics",
        disc && tie,
        &format!(
            "atom 0: ℓ⁺={} ℓ*={} m_af={:.3}; tied atom: ℓ⁺={} ℓ*={} m_af={}",
            classes.dominant[0] + 1,
            classes.runner_up[0] + 1,
            af[0],
            classes.dominant[1] + 1,
            classes.runner_up[1] + 1,
            af[1]
        ),
    );
}

#[test]
fn criterion_06_sampling_and_noise() {
    let (per_class, k) = (12, 3);
    let mut r = rng(6);
    let x = Array2::from_shape_fn((5, per_class * k), |_| r.random::<f64>());
    let labels: Vec<usize> = (0..per_class * k).map(|i| i % k).collect();
    let data = LabeledDataset::new(x, labels, k).unwrap();
    let mut state = init_distribution(data.len()).unwrap();
    let mut replay = vec![1.0 / data.len() as f64; data.len()];
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let s = sample_learning_set(&data, &state, 3, 0.5, &mut r).unwrap();
        for &i in &s.indices {
            replay[i] *= 0.5;
        }
        let total: f64 = replay.iter().sum();
        replay.iter_mut().for_each(|v| *v /= total);
        for (a, b) in s.next.probabilities().iter().zip(&replay) {
            worst = worst.max((a - b).abs());
        }
        state = s.next;
    }
    let signals = data.signals().clone();
    let identity = degrade(&signals, 1, 0.1, &mut r).unwrap() == signals;
    let col = signals.column(0);
    let mean = col.sum() / col.len() as f64;
    let sigma = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
    let scale = noise_scales(&signals, 5, 0.1)[0];
    let scale_ok = (scale - 5.0 * sigma * 0.1).abs() <= 1e-12 * scale;
    report(
        6,
        "sampling and noise schedule",
        worst <= 1e-12 && identity && scale_ok,
        &format!("20-iteration replay max diff {worst:.1e}, l=1 identity: {identity}, ε₅,₁ = {scale:.6} vs 5σ₁τ₂ = {:.6}", 5.0 * sigma * 0.1),
    );
}

fn model_with_inner_nets(r: &mut ChaCha8Rng, d: usize, h: usize, k: usize, n: usize) -> (MlpModel, Array2<f64>) {
    // rejection-sample a model whose net inputs all lie in (0.05, 0.95)
    loop {
        let x = Array2::from_shape_fn((d, n), |_| r.random_range(0.0..1.0));
        let hidden = Array2::from_shape_fn((h, d + 1), |(_, c)| if c == 0 { 0.5 } else { r.random_range(-0.15..0.15) });
        let output = Array2::from_shape_fn((k, h + 1), |(_, c)| if c == 0 { 0.5 } else { r.random_range(-0.15..0.15) });
        let model = MlpModel::new(hidden.clone(), output.clone()).unwrap();
        let z1 = hidden.slice(ndarray::s![.., 1..]).dot(&x) + &hidden.column(0).insert_axis(ndarray::Axis(1));
        let y1 = z1.mapv(|v| v.clamp(0.0, 1.0));
        let z2 = output.slice(ndarray::s![.., 1..]).dot(&y1) + &output.column(0).insert_axis(ndarray::Axis(1));
        let inner = |z: &Array2<f64>| z.iter().all(|v| v.abs() > 0.05 && v.abs() < 0.95);
        if inner(&z1) && inner(&z2) {
            return (model, x);
        }
    }
}

#[test]
fn criterion_07_mlp_numerics() {
    let mut r = rng(7);
    let (model, x) = model_with_inner_nets(&mut r, 6, 5, 3, 8);
    let t = Array2::from_shape_fn((3, 8), |_| r.random::<f64>());
    let (_, grad) = model.mse_and_gradient(x.view(), t.view());
    let w = model.parameters();
    let h = 1e-5;
    let mut fd = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let mut plus = model.clone();
        let mut minus = model.clone();
        let mut wp = w.clone();
        wp[i] += h;
        plus.set_parameters(&wp);
        wp[i] -= 2.0 * h;
        minus.set_parameters(&wp);
        fd.push((plus.mse(x.view(), t.view()) - minus.mse(x.view(), t.view())) / (2.0 * h));
    }
    let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rel = diff / scale;

    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..120 {
        let c = i % 3;
        xs.extend([0.2 + 0.3 * c as f64 + 0.05 * r.random::<f64>(), 0.8 - 0.3 * c as f64 + 0.05 * r.random::<f64>()]);
        labels.push(c);
    }
    let xs = Array2::from_shape_vec((2, 120).f(), xs).unwrap();
    let trained = scg_train(&init_mlp(2, 6, 3, 1).unwrap(), xs.view(), one_hot(&labels, 3).view(), &TrainConfig::default()).unwrap();
    let monotone = trained.losses.windows(2).all(|w| w[1] <= w[0] + 1e-10);

    let counts = [weight_count(200, 200, 10), weight_count(784, 300, 10), weight_count(200, 1000, 10)];
    let pass = rel < 1e-5 && monotone && counts == [42_210, 238_510, 211_010];
    report(
        7,
        "MLP numerics",
        pass,
        &format!(
            "gradient rel err {rel:.2e}, SCG losses non-increasing over {} epochs: {monotone}, weight counts {counts:?}",
            trained.losses.len() - 1
        ),
    );
}

#[test]
fn criterion_08_significance() {
    let p = significance(0.955, 0.967, 10_000).unwrap();
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = r.random_range(0.01..0.99);
        let b = r.random_range(0.01..0.99);
        let n = r.random_range(30..20_000);
        let s = significance(a, b, n).unwrap() + significance(b, a, n).unwrap();
        worst = worst.max((s - 1.0).abs());
    }
    report(
        8,
        "significance",
        p > 0.9999 && worst <= 1e-12,
        &format!("P(0.955 → 0.967, n=10000) = {p:.6}, symmetry max deviation {worst:.1e}"),
    );
}

fn desk_config() -> RunConfig {
    RunConfig {
        data_dir: mnist_dir(),
        per_class_train: 500,
        per_class_val: 100,
        das: DasConfig {
            iterations: 5,
            per_class: 100,
            ..DasConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn criterion_09_desk_scale_end_to_end() {
    let config = desk_config();
    assert!(
        config.data_dir.join("train-images-idx3-ubyte").exists() || config.data_dir.join("train-images-idx3-ubyte.gz").exists(),
        "MNIST not found in {}; set DASKSVD_DATA_DIR",
        config.data_dir.display()
    );
    let start = Instant::now();
    let parts = prepare(&config).unwrap();
    let plan = SeedPlan::for_run(config.seed, config.round);
    let das = run_on(&parts, &config, plan).unwrap().report;
    let baseline_cfg = RunConfig {
        features: FeatureMode::RandomAtoms,
        ..config.clone()
    };
    let baseline = run_on(&parts, &baseline_cfg, plan).unwrap().report;
    let elapsed = start.elapsed();
    let margin = das.accuracy - baseline.accuracy;
    let pass = das.dictionary_atoms == Some(50)
        && das.architecture == "MLP-50-50-10"
        && das.accuracy >= 0.85
        && margin >= 0.02
        && elapsed < Duration::from_secs(15 * 60);
    report(
        9,
        "desk-scale end to end",
        pass,
        &format!(
            "{} test accuracy {:.4} vs random-atom baseline {:.4} (margin {:+.4}), {:?}",
            das.architecture, das.accuracy, baseline.accuracy, margin, elapsed
        ),
    );
}

#[test]
#[ignore = "full-scale run takes hours"]
fn criterion_10_full_scale() {
    let config = RunConfig {
        data_dir: mnist_dir(),
        ..RunConfig::default()
    };
    let start = Instant::now();
    let parts = prepare(&config).unwrap();
    let plan = SeedPlan::for_run(config.seed, config.round);
    let das = run_on(&parts, &config, plan).unwrap().report;
    let ksvd_cfg = RunConfig {
        features: FeatureMode::Ksvd,
        ..config.clone()
    };
    let ksvd = run_on(&parts, &ksvd_cfg, plan).unwrap().report;
    let pass = das.architecture == "MLP-200-200-10" && (das.accuracy - 0.962).abs() <= 0.01 && das.accuracy > ksvd.accuracy;
    report(
        10,
        "full-scale reproduction",
        pass,
        &format!(
            "{} test accuracy {:.4} (target 0.962 ± 0.010), plain KSVD {:.4}, {:?}",
            das.architecture,
            das.accuracy,
            ksvd.accuracy,
            start.elapsed()
        ),
    );
}
