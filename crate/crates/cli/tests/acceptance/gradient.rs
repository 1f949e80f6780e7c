use hbdc::hashnet::{backward, forward, init_network, mlp_spec, NetworkParams};
use hbdc::pairloss::{batch_loss, euclidean, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-4;
const GRID: [f64; 6] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

pub struct Case {
    pub params: NetworkParams,
    pub xs: Vec<Vec<f64>>,
    pub cfg: LossConfig,
}

pub fn mean_loss(params: &NetworkParams, xs: &[Vec<f64>], cfg: &LossConfig) -> f64 {
    let (h, _) = forward(params, xs).unwrap();
    batch_loss(xs, &h, cfg).unwrap().mean_loss
}

pub fn analytic(case: &Case) -> Vec<f64> {
    let (h, trace) = forward(&case.params, &case.xs).unwrap();
    let loss = batch_loss(&case.xs, &h, &case.cfg).unwrap();
    let n = case.xs.len() as f64;
    let seed: Vec<Vec<f64>> = loss
        .grad_h
        .iter()
        .map(|r| r.iter().map(|g| g * n).collect())
        .collect();
    backward(&case.params, &trace, &seed).unwrap()
}

fn numeric(case: &Case) -> Vec<f64> {
    let mut p = case.params.clone();
    (0..p.values.len())
        .map(|k| {
            let orig = p.values[k];
            p.values[k] = orig + STEP;
            let up = mean_loss(&p, &case.xs, &case.cfg);
            p.values[k] = orig - STEP;
            let down = mean_loss(&p, &case.xs, &case.cfg);
            p.values[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Distance to the nearest non-differentiable point: ReLU pre-activations,
/// code-difference components, and the outer absolute value.
fn kink_distance(case: &Case) -> f64 {
    let (h, trace) = forward(&case.params, &case.xs).unwrap();
    let mut margin = trace.min_relu_margin(&case.params);
    for i in 0..h.len() {
        for j in (i + 1)..h.len() {
            let mut l1 = 0.0;
            for (a, b) in h[i].iter().zip(&h[j]) {
                margin = margin.min((a - b).abs());
                l1 += (a - b).abs();
            }
            let d = euclidean(&case.xs[i], &case.xs[j]).unwrap();
            margin = margin.min((case.cfg.lambda * d - l1).abs());
        }
    }
    margin
}

pub fn random_case(seed: u64) -> Option<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(2..=6);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2))
        .map(|_| rng.random_range(2..=6))
        .collect();
    let code_len = rng.random_range(2..=8);
    let batch = rng.random_range(2..=6);
    let mut params = init_network(&mlp_spec(input, &hidden, code_len), rng.random()).unwrap();
    // random biases so ReLUs are not all on one side
    for v in params.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let cfg = LossConfig::new(GRID[rng.random_range(0..6)], GRID[rng.random_range(0..6)]).unwrap();
    let xs = (0..batch)
        .map(|_| (0..input).map(|_| rng.random::<f64>()).collect())
        .collect();
    let case = Case { params, xs, cfg };
    (kink_distance(&case) >= KINK_MARGIN).then_some(case)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Checks 100 configurations away from kinks; returns the worst relative
/// error and the first failing seed, if any.
pub fn run(count: usize) -> (f64, Option<u64>) {
    let mut checked = 0;
    let mut seed = 0u64;
    let mut worst: f64 = 0.0;
    while checked < count {
        seed += 1;
        if seed >= 10_000 {
            return (worst, Some(seed));
        }
        let Some(case) = random_case(seed) else {
            continue;
        };
        let err = relative_error(&analytic(&case), &numeric(&case));
        worst = worst.max(err);
        if err.is_nan() || err > 1e-4 {
            return (worst, Some(seed));
        }
        checked += 1;
    }
    (worst, None)
}
