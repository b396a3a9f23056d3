use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ttclab::adaptation::tent_loss;
use ttclab::clustering::*;
use ttclab::network::{Activation, DenseLayer, Layer, NetworkMeta};
use ttclab::numeric::argmax;
use ttclab::{BnMode, Matrix, Network};

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

fn brute_force_assign(z: &Matrix, c: &Matrix) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..z.rows() {
        let mut dists = Vec::new();
        for k in 0..c.rows() {
            let mut d = 0.0;
            for j in 0..z.cols() {
                d += (z.get(i, j) - c.get(k, j)).powi(2);
            }
            dists.push(d);
        }
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        out.push(dists.iter().position(|&d| d == min).unwrap());
    }
    out
}

fn brute_force_objective(z: &Matrix, y: &[usize], c: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            total += (z.get(i, j) - c.get(y[i], j)).powi(2);
        }
    }
    total / z.rows() as f64
}

#[test]
fn assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1, 7, 50, 200] {
        for k in [2, 3, 10] {
            for d in [1, 2, 5] {
                let z = random_matrix(&mut rng, n, d);
                let c = Centers::new(random_matrix(&mut rng, k, d)).unwrap();
                let a = assign_step(&z, &c).unwrap();
                assert_eq!(a.labels(), brute_force_assign(&z, c.matrix()).as_slice());
                let obj = kmeans_objective(&z, &a, &c).unwrap();
                assert!((obj - brute_force_objective(&z, a.labels(), c.matrix())).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn integer_grid_ties_go_to_lowest_index() {
    // integer coordinates produce exact ties
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let z = Matrix::new(30, 2, (0..60).map(|_| rng.gen_range(-2..=2) as f64).collect()).unwrap();
        let c = Centers::new(Matrix::new(4, 2, (0..8).map(|_| rng.gen_range(-2..=2) as f64).collect()).unwrap());
        let Ok(c) = c else { continue };
        assert_eq!(assign_step(&z, &c).unwrap().labels(), brute_force_assign(&z, c.matrix()).as_slice());
    }
}

#[test]
fn full_batch_alternation_never_increases_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.gen_range(10..80);
        let k = rng.gen_range(2..6);
        let z = random_matrix(&mut rng, n, 3);
        let mut c = Centers::new(z.select_rows(&(0..k).collect::<Vec<_>>())).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let a = assign_step(&z, &c).unwrap();
            let before = kmeans_objective(&z, &a, &c).unwrap();
            assert!(before <= prev + 1e-10);
            c = update_step(&z, &a, &c, UpdateRule::FullBatch).unwrap();
            let after = kmeans_objective(&z, &a, &c).unwrap();
            assert!(after <= before + 1e-10);
            prev = after;
        }
    }
}

#[test]
fn full_dataset_batches_reproduce_lloyd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random_matrix(&mut rng, 60, 2);
    let batches = vec![z.clone(); 8];
    let run = run_minibatch_kmeans(&batches, 3, CenterInit::FirstK, UpdateMode::FullBatch).unwrap();

    let mut c = Centers::new(z.select_rows(&[0, 1, 2])).unwrap();
    let mut trace = Vec::new();
    for _ in 0..8 {
        let a = assign_step(&z, &c).unwrap();
        c = update_step(&z, &a, &c, UpdateRule::FullBatch).unwrap();
        trace.push(kmeans_objective(&z, &a, &c).unwrap());
    }
    assert_eq!(run.centers, c);
    assert_eq!(run.trace, trace);
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-10));
}

#[test]
fn separated_blobs_are_recovered() {
    let sigma = 0.5;
    let noise = Normal::new(0.0, sigma).unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for i in 0..400 {
            let y = i % 2;
            let mu = if y == 0 { -5.0 * sigma } else { 5.0 * sigma };
            labels.push(y);
            data.push(mu + noise.sample(&mut rng));
            data.push(noise.sample(&mut rng));
        }
        let z = Matrix::new(400, 2, data).unwrap();
        let batches: Vec<Matrix> =
            (0..8).map(|b| z.select_rows(&(b * 50..(b + 1) * 50).collect::<Vec<_>>())).collect();
        let run =
            run_minibatch_kmeans(&batches, 2, CenterInit::SeededRandom(seed), UpdateMode::MiniBatchRunning).unwrap();
        let a = assign_step(&z, &run.centers).unwrap();
        let same = a.labels().iter().zip(&labels).filter(|(p, y)| p == y).count();
        let acc = same.max(400 - same) as f64 / 400.0;
        assert_eq!(acc, 1.0, "seed {seed}");
    }
}

#[test]
fn single_sample_entropy_step_keeps_the_assigned_class() {
    // one linear-softmax layer, one SGD step on one sample's entropy
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let d = rng.gen_range(2..8);
        let k = rng.gen_range(2..6);
        let weight = Matrix::new(k, d, (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bias = (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let net = Network::new(
            vec![Layer::Dense(DenseLayer { weight, bias, activation: Activation::Identity })],
            NetworkMeta::default(),
        )
        .unwrap();
        let x = Matrix::new(1, d, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (logits, cache) = net.forward(&x, BnMode::EvalStats).unwrap();
        let before = argmax(logits.row(0));
        let (_, grad) = tent_loss(&logits).unwrap();
        let g = net.backward_full(&cache, &grad).unwrap();
        let mut p = net.all_params();
        p.iter_mut().zip(&g).for_each(|(p, g)| *p -= 1e-3 * g);
        let mut stepped = net.clone();
        stepped.set_all_params(&p).unwrap();
        let (after, _) = stepped.forward(&x, BnMode::EvalStats).unwrap();
        assert_eq!(argmax(after.row(0)), before);
        assert!(after.row(0)[before] - logits.row(0)[before] >= -1e-15);
    }
}
