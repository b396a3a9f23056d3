//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run alone with `cargo test -p ttclab-cli --test acceptance`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttclab::adaptation::{
    row_entropies, sample_weights, tent_loss, ttc_loss, weighted_entropy_loss, AdaptationConfig, AdapterState,
    Augmentation, GradientAccumulator, Strategy,
};
use ttclab::benchmark::{corrupt_matrix, generate_dataset, Corruption, CorruptionKind};
use ttclab::checkpoint::load_checkpoint;
use ttclab::clustering::{assign_step, kmeans_objective, update_step, Centers, UpdateRule};
use ttclab::numeric::{entropy, entropy_grad_logits, finite_diff_check, simulate_entropy_descent, softmax, LogitVector, FD_STEP};
use ttclab::optim::{Optimizer, OptimizerKind};
use ttclab::{BnMode, Matrix, Network};
use ttclab_cli::{channel_overlaps, density_features, random_simplex_point, Status};
use ttclab_validation::{file_tree, num, read_csv, run_cli};

type Check = std::result::Result<String, String>;

struct Fixture {
    dir: tempfile::TempDir,
    checkpoint: PathBuf,
    net: Network,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let out = dir.path().join("src");
        run_cli(&["train-source", "--out", out.to_str().unwrap()]).expect("source training");
        let checkpoint = out.join("source.json");
        let net = load_checkpoint(&checkpoint).expect("checkpoint");
        Self { dir, checkpoint, net }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ckpt(&self) -> &str {
        self.checkpoint.to_str().unwrap()
    }
}

fn largest_probability_grows() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut strict_cases, mut worst) = (0, f64::INFINITY);
    for case in 0..1000 {
        let k = rng.gen_range(2..=100);
        let p = random_simplex_point(k, &mut rng).map_err(|e| e.to_string())?;
        let traj = simulate_entropy_descent(&p, 0.01, 1).map_err(|e| e.to_string())?;
        let m = p.argmax();
        let (before, after) = (traj[0].as_slice()[m], traj[1].as_slice()[m]);
        worst = worst.min(after - before);
        if after < before {
            return Err(format!("case {case} (K={k}): max prob fell from {before} to {after}"));
        }
        let mut sorted = p.as_slice().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] > 1e-6 {
            strict_cases += 1;
            if after <= before {
                return Err(format!("case {case} (K={k}): no strict increase with a clear maximum"));
            }
        }
    }
    let t = start.elapsed();
    if t > Duration::from_secs(5) {
        return Err(format!("took {t:?}"));
    }
    Ok(format!("1000 cases, {strict_cases} strict, smallest change {worst:.3e}, {t:.2?}"))
}

fn check_grad(name: &str, err: f64, worst: &mut f64) -> std::result::Result<(), String> {
    *worst = worst.max(err);
    if err < 1e-4 {
        Ok(())
    } else {
        Err(format!("{name}: relative error {err:.3e}"))
    }
}

fn gradient_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(2..12);
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let analytic = entropy_grad_logits(&LogitVector::new(z.clone()).unwrap());
        let err = finite_diff_check(|x| entropy(&softmax(x).unwrap()), analytic.as_slice(), &z, FD_STEP)
            .map_err(|e| e.to_string())?;
        check_grad("entropy", err, &mut worst)?;

        // softmax through a random linear read-out v . p, gradient p * (v - v.p)
        let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = softmax(&z).unwrap();
        let vp: f64 = v.iter().zip(p.as_slice()).map(|(a, b)| a * b).sum();
        let analytic: Vec<f64> = p.as_slice().iter().zip(&v).map(|(pi, vi)| pi * (vi - vp)).collect();
        let err = finite_diff_check(
            |x| softmax(x).unwrap().as_slice().iter().zip(&v).map(|(a, b)| a * b).sum(),
            &analytic,
            &z,
            FD_STEP,
        )
        .map_err(|e| e.to_string())?;
        check_grad("softmax", err, &mut worst)?;
    }
    for case in 0..100u64 {
        let mut net = Network::mlp(6, &[8, 7], 3, &mut rng).unwrap();
        let p: Vec<f64> = net.bn_affine_params().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        net.set_bn_affine_params(&p).unwrap();
        let n = rng.gen_range(4..12);
        let x = Matrix::new(n, 6, (0..n * 6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mode = if case % 2 == 0 { BnMode::TestBatchStats } else { BnMode::EvalStats };
        let (logits, cache) = net.forward(&x, mode).unwrap();
        let (_, grad) = tent_loss(&logits).unwrap();
        let analytic = net.backward_bn_affine(&cache, &grad).unwrap();
        let err = finite_diff_check(
            |q| {
                let mut m = net.clone();
                m.set_bn_affine_params(q).unwrap();
                tent_loss(&m.forward(&x, mode).unwrap().0).unwrap().0
            },
            analytic.as_slice(),
            &net.bn_affine_params(),
            FD_STEP,
        )
        .map_err(|e| e.to_string())?;
        check_grad("bn affine", err, &mut worst)?;

        let tau = rng.gen_range(0.0..3.0);
        let rows = row_entropies(&logits).unwrap();
        let w: Vec<f64> = sample_weights(&rows.entropies, tau, n).into_iter().map(|w| w.value()).collect();
        let (_, grad) = ttc_loss(&logits, tau, n).unwrap();
        let err = finite_diff_check(
            |zz| weighted_entropy_loss(&Matrix::new(n, 3, zz.to_vec()).unwrap(), &w).unwrap().0,
            grad.as_slice(),
            logits.as_slice(),
            FD_STEP,
        )
        .map_err(|e| e.to_string())?;
        check_grad("ttc loss", err, &mut worst)?;
    }
    let t = start.elapsed();
    if t > Duration::from_secs(30) {
        return Err(format!("took {t:?}"));
    }
    Ok(format!("400 checks, worst relative error {worst:.2e}, {t:.2?}"))
}

fn corrupted_batches(fx: &Fixture, count: usize, n: usize, seed: u64) -> Vec<Matrix> {
    let ds = generate_dataset(fx.net.k(), count * n, seed).unwrap();
    let c = Corruption::new(CorruptionKind::GaussianNoise, 5).unwrap();
    let x = corrupt_matrix(&ds.inputs, c, seed + 1);
    (0..count).map(|b| x.select_rows(&(b * n..(b + 1) * n).collect::<Vec<_>>())).collect()
}

fn degeneration(fx: &Fixture) -> Check {
    let batches = corrupted_batches(fx, 50, 100, 31);
    let mut cfg = AdaptationConfig::new(Strategy::Ttc);
    cfg.augmentation = Augmentation::Identity;
    cfg.tau = 0.0;
    cfg.accumulation_q = Some(1);
    let mut tent = AdapterState::new(fx.net.clone(), AdaptationConfig::new(Strategy::Tent), 100).unwrap();
    let mut ttc = AdapterState::new(fx.net.clone(), cfg, 100).unwrap();
    let mut worst = 0.0f64;
    for (i, b) in batches.iter().enumerate() {
        let a = tent.adapt_batch(b).unwrap();
        let c = ttc.adapt_batch(b).unwrap();
        if a.predictions != c.predictions {
            return Err(format!("batch {i}: predictions differ"));
        }
        for (u, v) in tent.network().bn_affine_params().iter().zip(ttc.network().bn_affine_params()) {
            worst = worst.max((u - v).abs());
        }
    }
    if worst > 1e-12 {
        return Err(format!("max parameter gap {worst:.3e}"));
    }
    Ok(format!("50 batches, max parameter gap {worst:.1e}"))
}

fn ga_equivalence(fx: &Fixture) -> Check {
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let batches = corrupted_batches(fx, 4, 25, 100 + inst);
        let net = &fx.net;
        let len = net.bn_param_count();
        let mut params = net.bn_affine_params();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.05, len).unwrap();
        let mut acc = GradientAccumulator::new(len, 4).unwrap();
        for b in &batches {
            let (logits, cache) = net.forward(b, BnMode::EvalStats).unwrap();
            let (_, grad) = tent_loss(&logits).unwrap();
            let g = net.backward_bn_affine(&cache, &grad.scaled(0.25)).unwrap();
            acc.accumulate_and_maybe_step(&g, &mut opt, &mut params).unwrap();
        }
        let union = Matrix::vstack(&batches.iter().collect::<Vec<_>>()).unwrap();
        let (logits, cache) = net.forward(&union, BnMode::EvalStats).unwrap();
        let (_, grad) = tent_loss(&logits).unwrap();
        let g = net.backward_bn_affine(&cache, &grad).unwrap();
        let mut direct = net.bn_affine_params();
        Optimizer::new(OptimizerKind::Sgd, 0.05, len).unwrap().step(&mut direct, g.as_slice()).unwrap();
        for (a, b) in params.iter().zip(&direct) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst >= 1e-8 {
        return Err(format!("max gap {worst:.3e}"));
    }
    Ok(format!("20 instances, max gap {worst:.1e}"))
}

fn kmeans() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut instances = 0;
    for n in [1usize, 10, 50, 100, 200] {
        for k in 2..=10usize {
            let d = rng.gen_range(1..6);
            let z = Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            let c = Centers::new(Matrix::new(k, d, (0..k * d).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap())
                .unwrap();
            let a = assign_step(&z, &c).unwrap();
            for (i, &y) in a.labels().iter().enumerate() {
                let dist = |j: usize| -> f64 { (0..d).map(|t| (z.get(i, t) - c.matrix().get(j, t)).powi(2)).sum() };
                let best = (0..k).fold(0, |b, j| if dist(j) < dist(b) { j } else { b });
                if best != y {
                    return Err(format!("N={n} K={k}: point {i} assigned {y}, nearest {best}"));
                }
            }
            instances += 1;
        }
    }
    for inst in 0..100 {
        let n = rng.gen_range(10..150);
        let k = rng.gen_range(2..8).min(n);
        let z = Matrix::new(n, 2, (0..n * 2).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let mut c = Centers::new(z.select_rows(&(0..k).collect::<Vec<_>>())).unwrap();
        let mut prev = f64::INFINITY;
        for it in 0..15 {
            let a = assign_step(&z, &c).unwrap();
            let j = kmeans_objective(&z, &a, &c).unwrap();
            c = update_step(&z, &a, &c, UpdateRule::FullBatch).unwrap();
            if j > prev + 1e-10 {
                return Err(format!("instance {inst}, iteration {it}: objective rose {prev} -> {j}"));
            }
            prev = kmeans_objective(&z, &a, &c).unwrap();
            if prev > j + 1e-10 {
                return Err(format!("instance {inst}, iteration {it}: update raised the objective"));
            }
        }
    }
    Ok(format!("{instances} brute-force instances, 100 monotone runs"))
}

fn lemma_figure(fx: &Fixture) -> Check {
    let out = fx.path("lemma");
    let status = run_cli(&["lemma-check", "--ks", "2,10,100", "--steps", "5000", "--lr", "0.05", "--out", out.to_str().unwrap()])
        .map_err(|e| e.to_string())?;
    if status != Status::Success {
        return Err("lemma-check reported a violation".into());
    }
    let rows = read_csv(&out.join("summary.csv")).map_err(|e| e.to_string())?;
    let mut reached = Vec::new();
    for k in ["2", "10", "100"] {
        let row = rows.iter().find(|r| r["k"] == k).ok_or(format!("no row for K={k}"))?;
        if row["monotone"] != "true" {
            return Err(format!("K={k} not monotone"));
        }
        let steps: usize = row["steps_to_0999"].parse().map_err(|_| format!("K={k} never reached 0.999"))?;
        if steps > 5000 {
            return Err(format!("K={k} needed {steps} steps"));
        }
        reached.push(format!("K={k}: {steps} steps"));
    }
    Ok(reached.join(", "))
}

fn benchmark_grid(fx: &Fixture) -> Check {
    let out = fx.path("grid");
    let start = Instant::now();
    run_cli(&["grid", "--checkpoint", fx.ckpt(), "--severity", "5", "--seeds", "5", "--out", out.to_str().unwrap()])
        .map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let reports = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json")).count();
    let rows = read_csv(&out.join("summary.csv")).map_err(|e| e.to_string())?;
    let mean = |strategy: &str, corruption: Option<&str>| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r["strategy"] == strategy && corruption.is_none_or(|c| r["corruption"] == c))
            .map(|r| num(r, "accuracy"))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    for c in ["gaussian_noise", "impulse_noise"] {
        let (norm, source) = (mean("norm", Some(c)), mean("source", Some(c)));
        notes.push(format!("{c}: norm {norm:.4} vs source {source:.4}"));
        if norm < source {
            failures.push(format!("norm < source on {c}"));
        }
    }
    let (ttc, tent) = (mean("ttc", None), mean("tent", None));
    notes.push(format!("mean: ttc {ttc:.4} vs tent {tent:.4}"));
    if ttc < tent {
        failures.push("ttc < tent".into());
    }
    if reports != 125 {
        failures.push(format!("{reports} reports instead of 125"));
    }
    if t > Duration::from_secs(300) {
        failures.push(format!("grid took {t:?}"));
    }
    notes.push(format!("{reports} reports in {t:.1?}"));
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} [{}]", failures.join(", "), notes.join("; ")))
    }
}

fn batch_size_figure(fx: &Fixture) -> Check {
    let out = fx.path("sweep_batch_size.csv");
    run_cli(&["sweep-batch-size", "--checkpoint", fx.ckpt(), "--batch-sizes", "2,10,50,100", "--out", out.to_str().unwrap()])
        .map_err(|e| e.to_string())?;
    let rows = read_csv(&out).map_err(|e| e.to_string())?;
    let acc = |strategy: &str, n: &str, ga: &str| {
        rows.iter()
            .find(|r| r["strategy"] == strategy && r["batch_size"] == n && r["ga"] == ga)
            .map(|r| num(r, "accuracy_mean"))
            .unwrap_or(f64::NAN)
    };
    let tent: Vec<f64> = ["2", "10", "50", "100"].iter().map(|n| acc("tent", n, "false")).collect();
    let mut failures = Vec::new();
    for (i, w) in tent.windows(2).enumerate() {
        if !(w[1] >= w[0] - 0.01) {
            failures.push(format!("tent drops between sizes {i} and {}", i + 1));
        }
    }
    let (plain, ga) = (acc("tent", "10", "false"), acc("tent", "10", "true"));
    if !(ga > plain) {
        failures.push(format!("tent+ga@10 {ga:.4} does not beat tent@10 {plain:.4}"));
    }
    let notes = format!(
        "tent by N: {}; tent@10 {plain:.4}, tent+ga@10 {ga:.4}",
        tent.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")
    );
    if failures.is_empty() {
        Ok(notes)
    } else {
        Err(format!("{} [{notes}]", failures.join(", ")))
    }
}

fn tau_sweep(fx: &Fixture) -> Check {
    let out = fx.path("sweep_tau.csv");
    let status = run_cli(&["sweep-tau", "--checkpoint", fx.ckpt(), "--taus", "0.05,0.1,0.5,1,5,10", "--out", out.to_str().unwrap()])
        .map_err(|e| e.to_string())?;
    let rows = read_csv(&out).map_err(|e| e.to_string())?;
    if rows.len() != 6 {
        return Err(format!("{} rows instead of 6", rows.len()));
    }
    let accs: Vec<f64> = rows.iter().map(|r| num(r, "accuracy_mean")).collect();
    if status != Status::Success || accs.iter().any(|a| !a.is_finite()) {
        return Err(format!("non-finite accuracy: {accs:?}"));
    }
    Ok(format!("accuracy by tau: {}", accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")))
}

fn determinism(fx: &Fixture) -> Check {
    let ck = fx.ckpt();
    let commands: Vec<Vec<&str>> = vec![
        vec!["train-source", "--epochs", "2", "--seed", "7"],
        vec!["adapt", "--checkpoint", ck, "--strategy", "ttc", "--n-test", "600", "--seed", "3"],
        vec!["grid", "--checkpoint", ck, "--n-test", "300", "--seeds", "2"],
        vec!["sweep-batch-size", "--checkpoint", ck, "--batch-sizes", "10,50", "--n-test", "300", "--seeds", "2"],
        vec!["sweep-tau", "--checkpoint", ck, "--taus", "0.5,5", "--n-test", "300", "--seeds", "2"],
        vec!["lemma-check", "--steps", "300", "--random-starts", "50"],
        vec!["density", "--checkpoint", ck, "--n-test", "300"],
    ];
    for args in &commands {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let target = if args[0].starts_with("sweep") { dir.path().join("out.csv") } else { dir.path().join("out") };
            let mut full = args.clone();
            full.extend(["--out", target.to_str().unwrap()]);
            run_cli(&full).map_err(|e| format!("`{}` failed: {e:#}", args[0]))?;
            runs.push(file_tree(dir.path()).map_err(|e| e.to_string())?);
        }
        if runs[0] != runs[1] {
            return Err(format!("`{}` output differs between runs", args[0]));
        }
        if runs[0].is_empty() {
            return Err(format!("`{}` wrote nothing", args[0]));
        }
    }
    Ok(format!("{} commands rerun byte-identically", commands.len()))
}

fn feature_alignment(fx: &Fixture) -> Check {
    let tent = AdaptationConfig::new(Strategy::Tent);
    let ttc = AdaptationConfig::new(Strategy::Ttc);
    let c = Corruption::new(CorruptionKind::GaussianNoise, 5).unwrap();
    let (mut sum_tent, mut sum_ttc) = (0.0, 0.0);
    for seed in 0..5 {
        let f = density_features(&fx.net, [&tent, &ttc], Some(c), 3000, 100, seed).map_err(|e| e.to_string())?;
        let ov = channel_overlaps(&f, 64);
        sum_tent += ov.iter().map(|o| o[1]).sum::<f64>() / ov.len() as f64;
        sum_ttc += ov.iter().map(|o| o[2]).sum::<f64>() / ov.len() as f64;
    }
    let (tent, ttc) = (sum_tent / 5.0, sum_ttc / 5.0);
    let note = format!("overlap with clean reference: ttc {ttc:.5} vs tent {tent:.5}");
    if ttc >= tent {
        Ok(note)
    } else {
        Err(note)
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; only a name filter is honored.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let fx = Fixture::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("1 largest probability grows", Box::new(largest_probability_grows)),
        ("2 gradient oracles", Box::new(gradient_oracles)),
        ("3 degeneration", Box::new(|| degeneration(&fx))),
        ("4 accumulation equivalence", Box::new(|| ga_equivalence(&fx))),
        ("5 k-means", Box::new(kmeans)),
        ("6 entropy descent trajectories", Box::new(|| lemma_figure(&fx))),
        ("7 benchmark grid", Box::new(|| benchmark_grid(&fx))),
        ("8 batch size", Box::new(|| batch_size_figure(&fx))),
        ("9 tau sweep", Box::new(|| tau_sweep(&fx))),
        ("10 determinism", Box::new(|| determinism(&fx))),
        ("supplementary feature alignment", Box::new(|| feature_alignment(&fx))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let t = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{t:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}) [{t:.1?}]");
            }
        }
    }
    println!("acceptance: {} checks failed", failed);
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
