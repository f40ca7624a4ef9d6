mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tc4tl::mlp::{distance_classes, train_mlp, Loss, MlpModel, TrainConfig};

use common::mlp::{check_gradients, oracle_probs};

#[test]
fn gradients_match_central_differences() {
    let mut checked = 0;
    for seed in 0..20u64 {
        for loss in [Loss::Mse, Loss::CrossEntropy] {
            checked += check_gradients(seed, loss).unwrap();
        }
    }
    assert_eq!(checked, 20 * 2 * (3 * 4 + 4 + 4 * 4 + 4));
}

#[test]
fn forward_matches_oracle_and_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let models: Vec<MlpModel> = (0..10)
        .map(|s| MlpModel::new(11, TrainConfig::default(), distance_classes(), s))
        .collect();
    for i in 0..10_000 {
        let m = &models[i % models.len()];
        let scale = [1.0, 10.0, 1e3][i % 3];
        let x: Vec<f64> = (0..11).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let p = m.forward(&x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        if i % 100 == 0 {
            let q = oracle_probs(m, &x);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

fn separable_rows(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let c = i % 4;
        let centre = c as f64 / 3.0;
        xs.push(vec![
            centre + rng.random_range(-0.05..0.05),
            rng.random_range(0.0..1.0),
            1.0 - centre + rng.random_range(-0.05..0.05),
        ]);
        ys.push(c);
    }
    (xs, ys)
}

#[test]
fn learns_separable_classes() {
    let (xs, ys) = separable_rows(800);
    let cfg = TrainConfig {
        hidden: vec![32, 32],
        epochs: 60,
        batch_size: 32,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (model, log) = train_mlp(&xs, &ys, distance_classes(), &cfg).unwrap();
    assert!(log.epochs.last().unwrap().train_loss < log.initial_train_loss);
    let classes = distance_classes();
    let correct = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| model.predict(x).unwrap() == classes[y])
        .count();
    assert!(correct as f64 / xs.len() as f64 >= 0.95, "{correct}");
}

#[test]
fn same_seed_same_bytes() {
    let (xs, ys) = separable_rows(300);
    let cfg = TrainConfig {
        hidden: vec![16, 16],
        epochs: 3,
        batch_size: 32,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train_mlp(&xs, &ys, distance_classes(), &cfg).unwrap().0.to_json();
    let b = train_mlp(&xs, &ys, distance_classes(), &cfg).unwrap().0.to_json();
    assert_eq!(a, b);
    let reloaded = MlpModel::from_json(&a).unwrap();
    assert_eq!(reloaded.to_json(), a);
}
