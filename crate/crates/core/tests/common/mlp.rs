use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tc4tl::mlp::{distance_classes, Loss, MlpModel, TrainConfig};

/// Straightforward forward pass, written independently of the library.
pub fn oracle_probs(m: &MlpModel, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (l, layer) in m.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            z[o] = layer.bias[o];
            for i in 0..layer.inputs {
                z[o] += layer.weights[o * layer.inputs + i] * a[i];
            }
        }
        if l + 1 < m.layers.len() {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        a = z;
    }
    let max = a.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn oracle_loss(m: &MlpModel, xs: &[Vec<f64>], ys: &[usize], loss: Loss) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let p = oracle_probs(m, x);
        total += match loss {
            Loss::Mse => {
                p.iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let t = if k == y { 1.0 } else { 0.0 };
                        (v - t) * (v - t)
                    })
                    .sum::<f64>()
                    / p.len() as f64
            }
            Loss::CrossEntropy => -p[y].ln(),
        };
    }
    total / xs.len() as f64
}

pub fn small_model(seed: u64) -> MlpModel {
    let cfg = TrainConfig {
        hidden: vec![4],
        ..TrainConfig::default()
    };
    MlpModel::new(3, cfg, distance_classes(), seed)
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let xs = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys = (0..n).map(|_| rng.random_range(0..4)).collect();
    (xs, ys)
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    // gradients below 1e-6 are compared at that scale
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic and central-difference gradients for every parameter
/// of one random 3-4-4 model; returns the number of parameters checked.
pub fn check_gradients(seed: u64, loss: Loss) -> Result<usize, String> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let model = small_model(seed);
    let (xs, ys) = random_batch(&mut rng, 6, 3);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (value, grads) = model.loss_and_gradients(&refs, &ys, loss).map_err(|e| e.to_string())?;
    if (value - oracle_loss(&model, &xs, &ys, loss)).abs() >= 1e-12 {
        return Err(format!("seed {seed}: loss {value} disagrees with oracle"));
    }
    let mut checked = 0;
    for l in 0..model.layers.len() {
        for bias in [false, true] {
            let len = if bias { model.layers[l].bias.len() } else { model.layers[l].weights.len() };
            for i in 0..len {
                let nudge = |delta: f64| {
                    let mut m = model.clone();
                    let p = if bias { &mut m.layers[l].bias[i] } else { &mut m.layers[l].weights[i] };
                    *p += delta;
                    oracle_loss(&m, &xs, &ys, loss)
                };
                let numeric = (nudge(h) - nudge(-h)) / (2.0 * h);
                let analytic = if bias { grads.bias[l][i] } else { grads.weights[l][i] };
                if !close(analytic, numeric) {
                    return Err(format!("seed {seed} {loss:?} layer {l} param {i}: {analytic} vs {numeric}"));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}
