//! Command implementations behind the `ttclab` binary.

pub mod args;
pub mod density;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use ttclab::adaptation::{AdaptationConfig, Strategy};
use ttclab::benchmark::{
    accuracy, derive_seed, generate_dataset, params_digest, predict, stream_eval, train_source_with, Corruption,
    CorruptionKind, RunSeeds, StreamOutcome, StreamProtocol, StreamSetup, TrainConfig,
};
use ttclab::checkpoint::{load_checkpoint, save_checkpoint};
use ttclab::numeric::{simulate_entropy_descent, trajectory_csv, ProbVector};
use ttclab::{BnMode, Matrix, Network};

use crate::args::*;
use crate::density::{channel_histograms, overlap};

/// Process exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// A checked property did not hold.
    Violation,
}

pub const EXIT_VIOLATION: u8 = 1;
pub const EXIT_TRAINING: u8 = 2;
pub const EXIT_INVALID_INPUT: u8 = 3;

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ttclab::Error>() {
        Some(ttclab::Error::TrainingDiverged { .. }) => EXIT_TRAINING,
        _ => EXIT_INVALID_INPUT,
    }
}

pub fn run(cmd: Command) -> Result<Status> {
    match cmd {
        Command::TrainSource(a) => train_source(&a),
        Command::Adapt(a) => adapt(&a),
        Command::Grid(a) => grid(&a),
        Command::SweepBatchSize(a) => sweep_batch_size(&a),
        Command::SweepTau(a) => sweep_tau(&a),
        Command::LemmaCheck(a) => lemma_check(&a),
        Command::Density(a) => density(&a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn load_network(path: &Path) -> Result<Network> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// One seeded stream: test set, corruption noise and order all derive from `seed`.
pub fn run_stream(
    net: &Network,
    n_test: usize,
    corruption: Option<Corruption>,
    batch_size: usize,
    seed: u64,
    config: &AdaptationConfig,
    collect_features: bool,
) -> Result<StreamOutcome> {
    let seeds = RunSeeds::from_seed(seed);
    let test = generate_dataset(net.k(), n_test, seeds.test_set)?;
    let setup = StreamSetup {
        test: &test,
        corruption,
        corruption_seed: seeds.corruption,
        protocol: StreamProtocol { batch_size, order_seed: seeds.order },
        seed,
        collect_features,
    };
    Ok(stream_eval(net, &setup, config)?)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn train_source(a: &TrainSourceArgs) -> Result<Status> {
    ensure!(a.k >= 2, "--k must be at least 2, got {}", a.k);
    ensure!(a.train_size >= a.k, "--train-size must be at least --k");
    ensure!(a.holdout_size >= a.k, "--holdout-size must be at least --k");
    if a.epochs == 0 {
        warn!("--epochs 0: writing an untrained checkpoint");
    }
    let train = generate_dataset(a.k, a.train_size, a.seed)?;
    let cfg = TrainConfig { epochs: a.epochs, batch_size: a.batch_size, lr: a.lr, ..TrainConfig::new(a.epochs, a.seed) };
    let outcome = train_source_with(&train, &cfg)?;
    let net = outcome.network;

    let holdout = generate_dataset(a.k, a.holdout_size, derive_seed(a.seed, 3))?;
    let clean = accuracy(&predict(&net, &holdout.inputs, BnMode::EvalStats)?, &holdout.labels)?;
    let mut flipped = holdout.inputs.clone();
    for i in 0..flipped.rows() {
        flipped.row_mut(i).reverse();
    }
    let flip = accuracy(&predict(&net, &flipped, BnMode::EvalStats)?, &holdout.labels)?;

    let ckpt = a.out.join("source.json");
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    save_checkpoint(&net, &ckpt).with_context(|| format!("cannot write {}", ckpt.display()))?;
    let mut log = String::from("epoch,loss,train_accuracy\n");
    for e in &outcome.log {
        writeln!(log, "{},{},{}", e.epoch, e.loss, e.train_accuracy)?;
    }
    write_file(&a.out.join("train_log.csv"), &log)?;
    println!("checkpoint {} sha256 {}", ckpt.display(), params_digest(&net));
    println!("held-out accuracy {clean:.4} (flipped {flip:.4})");
    Ok(Status::Success)
}

fn per_batch_csv(o: &StreamOutcome) -> String {
    let mut s = String::from("batch,running_accuracy\n");
    for (i, acc) in o.report.per_batch_accuracy.iter().enumerate() {
        let _ = writeln!(s, "{i},{acc}");
    }
    s
}

fn predictions_csv(o: &StreamOutcome) -> String {
    let mut s = String::from("position,index,label,prediction\n");
    for (pos, ((i, y), p)) in o.order.iter().zip(&o.labels).zip(&o.predictions).enumerate() {
        let _ = writeln!(s, "{pos},{i},{y},{p}");
    }
    s
}

fn adapt(a: &AdaptArgs) -> Result<Status> {
    a.stream.validate()?;
    let cfg = a.adapt.config(a.strategy)?;
    let corruption = a.corruption.with_severity(a.stream.severity)?;
    let net = load_network(&a.stream.checkpoint)?;
    let o = run_stream(&net, a.stream.n_test, corruption, a.stream.batch_size, a.seed, &cfg, false)?;
    write_file(&a.out.join("report.json"), &to_json(&o.report)?)?;
    write_file(&a.out.join("per_batch.csv"), &per_batch_csv(&o))?;
    write_file(&a.out.join("predictions.csv"), &predictions_csv(&o))?;
    println!(
        "{} on {} (severity {}): accuracy {:.4}",
        o.report.strategy, o.report.corruption, o.report.severity, o.report.accuracy
    );
    Ok(Status::Success)
}

fn grid(a: &GridArgs) -> Result<Status> {
    a.stream.validate()?;
    ensure!(a.seeds >= 1, "--seeds must be at least 1");
    let net = load_network(&a.stream.checkpoint)?;
    let mut cells = Vec::new();
    for strategy in Strategy::ALL {
        let cfg = a.adapt.config(strategy)?;
        for kind in CorruptionKind::ALL {
            for seed in a.seed..a.seed + a.seeds {
                cells.push((cfg.clone(), kind, seed));
            }
        }
    }
    let outcomes: Vec<StreamOutcome> = cells
        .par_iter()
        .map(|(cfg, kind, seed)| {
            let c = Corruption::new(*kind, a.stream.severity)?;
            run_stream(&net, a.stream.n_test, Some(c), a.stream.batch_size, *seed, cfg, false)
        })
        .collect::<Result<_>>()?;

    let mut summary = String::from("strategy,corruption,severity,seed,accuracy\n");
    for o in &outcomes {
        let r = &o.report;
        let name = format!("{}_{}_seed{}.json", r.strategy, r.corruption, r.seed);
        write_file(&a.out.join(name), &to_json(r)?)?;
        writeln!(summary, "{},{},{},{},{}", r.strategy, r.corruption, r.severity, r.seed, r.accuracy)?;
    }
    write_file(&a.out.join("summary.csv"), &summary)?;
    for strategy in Strategy::ALL {
        let accs: Vec<f64> =
            outcomes.iter().filter(|o| o.report.strategy == strategy.as_str()).map(|o| o.report.accuracy).collect();
        println!("{:<14} mean accuracy {:.4}", strategy.as_str(), mean_std(&accs).0);
    }
    info!("wrote {} reports to {}", outcomes.len(), a.out.display());
    Ok(Status::Success)
}

/// Per-seed accuracy averaged over all corruptions at one severity.
fn cross_corruption_accuracy(
    net: &Network,
    n_test: usize,
    severity: u8,
    batch_size: usize,
    seeds: std::ops::Range<u64>,
    cfg: &AdaptationConfig,
) -> Result<Vec<f64>> {
    seeds
        .into_par_iter()
        .map(|seed| {
            let accs = CorruptionKind::ALL
                .into_par_iter()
                .map(|kind| {
                    let c = Corruption::new(kind, severity)?;
                    Ok(run_stream(net, n_test, Some(c), batch_size, seed, cfg, false)?.report.accuracy)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect()
}

fn sweep_batch_size(a: &SweepBatchSizeArgs) -> Result<Status> {
    ensure!(!a.batch_sizes.is_empty(), "--batch-sizes must not be empty");
    if let Some(n) = a.batch_sizes.iter().find(|&&n| n < 2) {
        bail!("--batch-sizes: {n} is too small, batch statistics need at least 2 samples");
    }
    ensure!((1..=5).contains(&a.severity), "--severity must be in 1..=5");
    ensure!(a.seeds >= 1, "--seeds must be at least 1");
    let net = load_network(&a.checkpoint)?;
    let mut csv = String::from("strategy,batch_size,ga,accuracy_mean,accuracy_std\n");
    for strategy in [Strategy::Tent, Strategy::Ttc] {
        for &n in &a.batch_sizes {
            for ga in [false, true] {
                let mut cfg = a.adapt.config(strategy)?;
                cfg.ga_enabled = ga;
                let accs = cross_corruption_accuracy(&net, a.n_test, a.severity, n, a.seed..a.seed + a.seeds, &cfg)?;
                let (m, s) = mean_std(&accs);
                writeln!(csv, "{strategy},{n},{ga},{m},{s}")?;
                println!("{strategy:<5} N={n:<4} ga={ga:<5} accuracy {m:.4} ± {s:.4}");
            }
        }
    }
    write_file(&a.out, &csv)?;
    Ok(Status::Success)
}

fn sweep_tau(a: &SweepTauArgs) -> Result<Status> {
    a.stream.validate()?;
    ensure!(!a.taus.is_empty(), "--taus must not be empty");
    ensure!(a.seeds >= 1, "--seeds must be at least 1");
    let net = load_network(&a.stream.checkpoint)?;
    let mut csv = String::from("tau,accuracy_mean,accuracy_std\n");
    let mut status = Status::Success;
    for &tau in &a.taus {
        let mut cfg = a.adapt.config(Strategy::Ttc)?;
        cfg.tau = tau;
        cfg.validate().with_context(|| format!("--taus: invalid value {tau}"))?;
        let accs = cross_corruption_accuracy(
            &net,
            a.stream.n_test,
            a.stream.severity,
            a.stream.batch_size,
            a.seed..a.seed + a.seeds,
            &cfg,
        )?;
        let (m, s) = mean_std(&accs);
        if !(m.is_finite() && s.is_finite()) {
            status = Status::Violation;
        }
        writeln!(csv, "{tau},{m},{s}")?;
        println!("tau {tau:<5} accuracy {m:.4} ± {s:.4}");
    }
    write_file(&a.out, &csv)?;
    Ok(status)
}

/// Whether the initially most probable class never loses probability.
pub fn max_prob_monotone(traj: &[ProbVector]) -> bool {
    let Some(first) = traj.first() else { return true };
    let m = first.argmax();
    traj.windows(2).all(|w| w[1].as_slice()[m] >= w[0].as_slice()[m])
}

/// A probability vector drawn uniformly from the simplex.
pub fn random_simplex_point<R: Rng>(k: usize, rng: &mut R) -> Result<ProbVector> {
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-9).collect();
    let total: f64 = e.iter().sum();
    Ok(ProbVector::new(e.iter().map(|v| v / total).collect())?)
}

/// `[0.6, 0.4/(K-1), ...]`.
pub fn lemma_start(k: usize) -> Result<ProbVector> {
    let rest = 0.4 / (k - 1) as f64;
    Ok(ProbVector::new(std::iter::once(0.6).chain(std::iter::repeat_n(rest, k - 1)).collect())?)
}

fn lemma_check(a: &LemmaCheckArgs) -> Result<Status> {
    if let Some(k) = a.ks.iter().find(|&&k| k < 2) {
        bail!("--ks: every K must be at least 2, got {k}");
    }
    ensure!(a.lr.is_finite() && a.lr > 0.0, "--lr must be positive");
    let mut violations = 0usize;
    let mut summary = String::from("k,start_max_prob,final_max_prob,steps_to_0999,monotone\n");
    for &k in &a.ks {
        let traj = simulate_entropy_descent(&lemma_start(k)?, a.lr, a.steps)?;
        let monotone = max_prob_monotone(&traj);
        violations += usize::from(!monotone);
        let reach = traj.iter().position(|p| p.max_prob() >= 0.999);
        let last = traj.last().expect("trajectory includes the start").max_prob();
        writeln!(
            summary,
            "{k},{},{last},{},{monotone}",
            traj[0].max_prob(),
            reach.map_or("never".to_string(), |s| s.to_string())
        )?;
        write_file(&a.out.join(format!("lemma_k{k}.csv")), &trajectory_csv(&traj))?;
        println!("K={k:<4} final max prob {last:.6} monotone {monotone}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut random_violations = 0usize;
    for _ in 0..a.random_starts {
        let k = rng.gen_range(2..=100);
        let p = random_simplex_point(k, &mut rng)?;
        if !max_prob_monotone(&simulate_entropy_descent(&p, a.lr, a.random_steps)?) {
            random_violations += 1;
        }
    }
    writeln!(summary, "random,{},{},,{}", a.random_starts, random_violations, random_violations == 0)?;
    write_file(&a.out.join("summary.csv"), &summary)?;
    println!("random starts: {} checked, {random_violations} violations", a.random_starts);
    if violations + random_violations > 0 {
        return Ok(Status::Violation);
    }
    Ok(Status::Success)
}

#[derive(Debug, Serialize)]
struct DensitySummary {
    first: String,
    second: String,
    reference: &'static str,
    corruption: String,
    severity: u8,
    seed: u64,
    bins: usize,
    mean_overlap_first_second: f64,
    mean_overlap_first_reference: f64,
    mean_overlap_second_reference: f64,
}

/// Features of two strategies on one corrupted stream and of the source
/// model on the clean stream, all in stream order.
pub struct DensityFeatures {
    pub first: Matrix,
    pub second: Matrix,
    pub reference: Matrix,
}

pub fn density_features(
    net: &Network,
    configs: [&AdaptationConfig; 2],
    corruption: Option<Corruption>,
    n_test: usize,
    batch_size: usize,
    seed: u64,
) -> Result<DensityFeatures> {
    let features = |cfg: &AdaptationConfig, c: Option<Corruption>| -> Result<Matrix> {
        let o = run_stream(net, n_test, c, batch_size, seed, cfg, true)?;
        Ok(o.features.expect("features were requested"))
    };
    Ok(DensityFeatures {
        first: features(configs[0], corruption)?,
        second: features(configs[1], corruption)?,
        reference: features(&AdaptationConfig::new(Strategy::Source), None)?,
    })
}

/// Per-channel overlaps `(first-second, first-reference, second-reference)`.
pub fn channel_overlaps(f: &DensityFeatures, bins: usize) -> Vec<[f64; 3]> {
    (0..f.first.cols())
        .map(|c| {
            let h = channel_histograms(&[&f.first, &f.second, &f.reference], c, bins).hists;
            [overlap(&h[0], &h[1]), overlap(&h[0], &h[2]), overlap(&h[1], &h[2])]
        })
        .collect()
}

fn density(a: &DensityArgs) -> Result<Status> {
    a.stream.validate()?;
    ensure!(a.strategies.len() == 2, "--strategies needs exactly two names, got {}", a.strategies.len());
    ensure!(a.bins >= 1, "--bins must be at least 1");
    let corruption = a.corruption.with_severity(a.stream.severity)?;
    let net = load_network(&a.stream.checkpoint)?;
    let c1 = a.adapt.config(a.strategies[0])?;
    let c2 = a.adapt.config(a.strategies[1])?;
    let f = density_features(&net, [&c1, &c2], corruption, a.stream.n_test, a.stream.batch_size, a.seed)?;

    let mut hist_csv = String::from("channel,bin,bin_lo,bin_hi,first,second,reference\n");
    for c in 0..f.first.cols() {
        let ch = channel_histograms(&[&f.first, &f.second, &f.reference], c, a.bins);
        let width = (ch.hi - ch.lo) / a.bins as f64;
        for b in 0..a.bins {
            let lo = ch.lo + width * b as f64;
            writeln!(hist_csv, "{c},{b},{lo},{},{},{},{}", lo + width, ch.hists[0][b], ch.hists[1][b], ch.hists[2][b])?;
        }
    }
    let overlaps = channel_overlaps(&f, a.bins);
    let mut ov_csv = String::from("channel,first_vs_second,first_vs_reference,second_vs_reference\n");
    for (c, o) in overlaps.iter().enumerate() {
        writeln!(ov_csv, "{c},{},{},{}", o[0], o[1], o[2])?;
    }
    let mean = |i: usize| overlaps.iter().map(|o| o[i]).sum::<f64>() / overlaps.len() as f64;
    let summary = DensitySummary {
        first: a.strategies[0].to_string(),
        second: a.strategies[1].to_string(),
        reference: "source on the clean stream",
        corruption: corruption.map_or("none".to_string(), |c| c.kind().to_string()),
        severity: corruption.map_or(0, |c| c.severity()),
        seed: a.seed,
        bins: a.bins,
        mean_overlap_first_second: mean(0),
        mean_overlap_first_reference: mean(1),
        mean_overlap_second_reference: mean(2),
    };
    write_file(&a.out.join("histograms.csv"), &hist_csv)?;
    write_file(&a.out.join("overlap.csv"), &ov_csv)?;
    write_file(&a.out.join("summary.json"), &to_json(&summary)?)?;
    println!(
        "mean overlap with reference: {} {:.4}, {} {:.4}",
        summary.first, summary.mean_overlap_first_reference, summary.second, summary.mean_overlap_second_reference
    );
    Ok(Status::Success)
}
