//! Acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line straight to
//! stdout (bypassing the harness capture) and then asserts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hfv_core::analysis::{accuracy_spread, energy_split, sweep_codebook, synth_corpus, toy_example, SynthConfig, ToyConfig};
use hfv_core::gmm::gmm_fit_detailed;
use hfv_core::pipeline::{run_pipeline, Mode, PipelineConfig};
use hfv_core::{
    fv_encode, fv_encode_raw, gmm_log_likelihood, gmm_posteriors, hfv_encode, hfv_encode_raw, Codebook,
    CountNormalization, DescriptorSet, EncodedVector, GmmModel, GmmOptions, HfvOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(id: u32, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[{tag}] C{id} {detail}").unwrap();
    out.flush().unwrap();
}

fn check(id: u32, pass: bool, detail: String) {
    report(id, pass, &detail);
    assert!(pass, "criterion {id}: {detail}");
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn random_model(k2: usize, d: usize, rng: &mut ChaCha8Rng) -> GmmModel {
    let raw: Vec<f64> = (0..k2).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let rest: f64 = weights[1..].iter().sum();
    weights[0] = 1.0 - rest;
    let means = (0..k2 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let variances = (0..k2 * d).map(|_| rng.random_range(0.3..2.0)).collect();
    GmmModel::new(weights, means, variances, d).unwrap()
}

fn random_set(n: usize, d: usize, lim: f64, rng: &mut ChaCha8Rng) -> DescriptorSet {
    DescriptorSet::new((0..n * d).map(|_| rng.random_range(-lim..lim)).collect(), d).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c01_mean_gradient_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..25 {
        let (n, d, k2) = (rng.random_range(5..=100), rng.random_range(1..=5), rng.random_range(1..=8));
        let model = random_model(k2, d, &mut rng);
        let x = random_set(n, d, 3.0, &mut rng);
        let fv = fv_encode_raw(&model, &x).unwrap();
        for k in 0..k2 {
            for j in 0..d {
                let idx = k * d + j;
                let shifted = |delta: f64| {
                    let mut means = model.means().to_vec();
                    means[idx] += delta;
                    let m = GmmModel::new(model.weights().to_vec(), means, model.variances().to_vec(), d).unwrap();
                    gmm_log_likelihood(&m, &x).unwrap()
                };
                let grad = (shifted(h) - shifted(-h)) / (2.0 * h);
                let want = model.variance(k)[j].sqrt() / model.weights()[k].sqrt() * grad;
                let got = fv.mean_part()[idx];
                let scale = got.abs().max(want.abs());
                // Components near zero are compared against the finite-difference noise floor.
                ok &= (got - want).abs() <= 1e-5 * scale + 1e-9;
                if scale > 1e-6 {
                    worst = worst.max((got - want).abs() / scale);
                }
            }
        }
    }
    let t = start.elapsed();
    check(1, ok && within(t, 10.0), format!("gradient oracle, worst relative error {worst:.2e}, {t:.2?}"));
}

#[test]
fn c02_posterior_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = random_model(8, 5, &mut rng);
    let x = random_set(100_000, 5, 10.0, &mut rng);
    let start = Instant::now();
    let q = gmm_posteriors(&model, &x).unwrap();
    let t = start.elapsed();
    let worst = q.rows().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    check(
        2,
        q.len() == 100_000 && worst <= 1e-10 && within(t, 5.0),
        format!("posteriors on 1e5 points, worst row error {worst:.2e}, {t:.2?}"),
    );
}

#[test]
fn c03_single_word_hfv_is_the_fv() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let d = rng.random_range(1..6);
        let model = random_model(rng.random_range(1..8), d, &mut rng);
        let x = random_set(rng.random_range(1..300), d, 3.0, &mut rng);
        let cb = Codebook::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), d).unwrap();
        let p = 0.5;
        let hfv = hfv_encode(&model, &cb, &x, &HfvOptions::degenerate(p)).unwrap();
        let fv = fv_encode(&model, &x, p).unwrap();
        worst = worst.max(max_abs_diff(hfv.values(), fv.values()));
    }
    let t = start.elapsed();
    check(3, worst <= 1e-12 && within(t, 1.0), format!("K1=1 degeneracy, max difference {worst:.2e}, {t:.2?}"));
}

#[test]
fn c04_raw_sum_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_model(5, 3, &mut rng);
    let x = random_set(400, 3, 3.0, &mut rng);
    let cb = Codebook::new((0..8 * 3).map(|_| rng.random_range(-3.0..3.0)).collect(), 3).unwrap();
    let global = HfvOptions {
        normalize_local: false,
        count_normalization: CountNormalization::Global,
        ..HfvOptions::default()
    };
    let per_cluster = HfvOptions {
        count_normalization: CountNormalization::PerCluster,
        ..global
    };
    let fv = fv_encode_raw(&model, &x).unwrap();
    let same = max_abs_diff(hfv_encode_raw(&model, &cb, &x, &global).unwrap().values(), fv.values());
    let apart = max_abs_diff(hfv_encode_raw(&model, &cb, &x, &per_cluster).unwrap().values(), fv.values());
    let t = start.elapsed();
    check(
        4,
        same <= 1e-12 && apart > 1e-3 && within(t, 1.0),
        format!("global sum matches FV ({same:.2e}), per-cluster differs ({apart:.2e}), {t:.2?}"),
    );
}

#[test]
fn c05_toy_energy_orderings() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..20 {
        let r = toy_example(&ToyConfig::with_seed(seed)).unwrap();
        lo = lo.min(r.similarity);
        hi = hi.max(r.similarity);
        let ok = r.hfv.split.e_mean > r.fv.split.e_mean
            && r.fv.split.e_cov > r.fv.split.e_mean
            && (r.similarity - 0.8).abs() <= 0.15;
        if !ok {
            failures.push(seed);
        }
    }
    let t = start.elapsed();
    check(
        5,
        failures.is_empty() && within(t, 5.0),
        format!("toy orderings over 20 seeds, similarity in [{lo:.3}, {hi:.3}], failing seeds {failures:?}, {t:.2?}"),
    );
}

#[test]
fn c06_em_is_monotone() {
    let toy = ToyConfig::default().gmm().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = Vec::new();
    for _ in 0..2_000 {
        let k = usize::from(rng.random::<f64>() >= toy.weights()[0]);
        for j in 0..2 {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(toy.mean(k)[j] + toy.variance(k)[j].sqrt() * z);
        }
    }
    let x = DescriptorSet::new(data, 2).unwrap();
    let opts = GmmOptions {
        max_iter: 100,
        tol: 0.0,
        ..GmmOptions::new(4, 1)
    };
    let start = Instant::now();
    let fit = gmm_fit_detailed(&x, &opts).unwrap();
    let t = start.elapsed();
    let worst = fit
        .log_likelihood_history
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs())
        .fold(f64::INFINITY, f64::min);
    let steps = fit.log_likelihood_history.len().saturating_sub(1);
    check(
        6,
        worst >= -1e-8 && steps == 100 && within(t, 10.0),
        format!("EM over {steps} iterations, worst relative step {worst:.2e}, {t:.2?}"),
    );
}

#[test]
fn c07_energy_accounting() {
    let corpus = synth_corpus(&SynthConfig::default()).unwrap();
    let cfg = PipelineConfig::desk_scale(0);
    let mut vectors: Vec<EncodedVector> = Vec::new();
    for mode in [Mode::Fv, Mode::Hfv] {
        vectors.extend(run_pipeline(&corpus.dataset, &cfg, mode).unwrap().encoded);
    }
    let toy = toy_example(&ToyConfig::default()).unwrap();
    let toy_splits = toy.lfv.iter().chain([&toy.hfv, &toy.fv]).map(|m| m.split);
    let worst = vectors
        .iter()
        .map(|v| energy_split(v).unwrap())
        .chain(toy_splits)
        .map(|s| (s.e_mean + s.e_cov - 1.0).abs())
        .fold(0.0, f64::max);
    let count = vectors.len() + toy.lfv.len() + 2;
    check(7, worst <= 1e-9, format!("energy accounting over {count} vectors, worst error {worst:.2e}"));
}

#[test]
fn c08_hfv_keeps_up_with_fv() {
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..5 {
        let data = synth_corpus(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
        .dataset;
        let cfg = PipelineConfig::desk_scale(seed);
        let fv = run_pipeline(&data, &cfg, Mode::Fv).unwrap().evaluation.metrics.mean_class_accuracy;
        let hfv = run_pipeline(&data, &cfg, Mode::Hfv).unwrap().evaluation.metrics.mean_class_accuracy;
        gaps.push(hfv - fv);
        lines.push(format!("seed {seed}: fv {fv:.3} hfv {hfv:.3}"));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let worst = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    check(
        8,
        worst >= -0.01,
        format!("HFV >= FV - 1 point on 5 seeds, mean gap {:+.2} points, worst {:+.2} ({})", 100.0 * mean, 100.0 * worst, lines.join("; ")),
    );
}

#[test]
fn c09_codebook_size_barely_matters() {
    let data = synth_corpus(&SynthConfig::default()).unwrap().dataset;
    let cfg = PipelineConfig::desk_scale(0);
    let start = Instant::now();
    let rows = sweep_codebook(&data, &cfg, &[8, 16, 32, 64]).unwrap();
    let t = start.elapsed();
    let spread = accuracy_spread(&rows);
    let accs: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.param, r.accuracy)).collect();
    check(
        9,
        spread <= 0.05 && within(t, 300.0),
        format!("K1 sweep spread {:.2} points ({}), {t:.2?}", 100.0 * spread, accs.join(" ")),
    );
}

fn hfv_ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_hfv"))
        .current_dir(dir)
        .args(args)
        .args(["--jobs", "1", "--seed", "5"])
        .output()
        .expect("failed to launch hfv");
    assert!(out.status.success(), "hfv {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Every subcommand in sequence; returns the concatenated stdout.
fn every_command(dir: &Path) -> Vec<u8> {
    let mut stdout = Vec::new();
    fs::write(dir.join("recipe.txt"), "classes=3\nvideos_per_class=10\ndim=6\n").unwrap();
    let common = ["--manifest", "corpus/manifest.txt", "--sample-count", "4000", "--k2", "4"];
    let with_common = |head: &[&'static str]| -> Vec<&'static str> { head.iter().chain(&common).copied().collect() };
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--recipe", "recipe.txt", "--out-dir", "corpus"],
        vec!["sample", "--manifest", "corpus/manifest.txt", "--count", "4000", "-o", "sample.fvds"],
        vec!["train", "--sample", "sample.fvds", "--out-dir", "models", "--k1", "8", "--k2", "4"],
        vec!["encode", "--manifest", "corpus/manifest.txt", "--models", "models", "--out-dir", "enc"],
        vec!["encode", "--manifest", "corpus/manifest.txt", "--models", "models", "--mode", "fv", "--out-dir", "enc_fv"],
        vec!["classify", "--manifest", "enc/manifest.txt", "--metrics", "metrics.csv", "--model-out", "svm.model"],
        vec!["toy", "--csv", "toy.csv"],
        with_common(&["sweep-power", "--grid", "0.2,0.5", "-o", "power.csv"]),
        with_common(&["sweep-codebook", "--grid", "4,8", "-o", "codebook.csv"]),
    ];
    for s in &steps {
        stdout.extend(hfv_ok(dir, s));
    }
    stdout
}

#[test]
fn c10_commands_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = every_command(a.path());
    let out_b = every_command(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let same = out_a == out_b && ta == tb;
    check(10, same, format!("8 commands run twice with --jobs 1, {} artifacts byte-identical: {same}", ta.len()));
}
