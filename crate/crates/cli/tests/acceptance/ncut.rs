use hbdc::spectral::{brute_force_ncut, ncut_value, spectral_cluster, CodeGraph};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn symmetric(n: usize, mut weight: impl FnMut(usize, usize) -> f64) -> CodeGraph {
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = weight(i, j);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    CodeGraph::from_adjacency(w).unwrap()
}

/// Two planted groups: intra weights in [50, 100], inter weights in [0, 1].
fn planted(seed: u64) -> CodeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=10);
    let split = rng.random_range(2..=n - 2);
    let mut side: Vec<usize> = (0..n).map(|i| usize::from(i >= split)).collect();
    side.shuffle(&mut rng);
    symmetric(n, |i, j| {
        if side[i] == side[j] {
            rng.random_range(50.0..100.0)
        } else {
            rng.random_range(0.0..1.0)
        }
    })
}

fn components(seed: u64) -> (CodeGraph, Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let mut truth = Vec::new();
    for c in 0..k {
        for _ in 0..rng.random_range(2..=3) {
            truth.push(c);
        }
    }
    truth.shuffle(&mut rng);
    let g = symmetric(truth.len(), |i, j| {
        if truth[i] == truth[j] {
            rng.random_range(0.5..5.0)
        } else {
            0.0
        }
    });
    (g, truth, k)
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut map = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *map.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

/// Planted two-group graphs where spectral and exhaustive search agree.
pub fn planted_agreement(cases: u64) -> usize {
    (0..cases)
        .filter(|&s| {
            let g = planted(s);
            let spectral = spectral_cluster(&g, 2, s).unwrap();
            let oracle = brute_force_ncut(&g, 2).unwrap();
            same_partition(&spectral.labels, &oracle.labels)
        })
        .count()
}

/// Component graphs recovered exactly with a zero cut by both solvers.
pub fn component_recovery(cases: u64) -> usize {
    (0..cases)
        .filter(|&s| {
            let (g, truth, k) = components(s);
            let p = spectral_cluster(&g, k, s).unwrap();
            let oracle = brute_force_ncut(&g, k).unwrap();
            same_partition(&p.labels, &truth)
                && same_partition(&oracle.labels, &truth)
                && ncut_value(&g, &p).unwrap() == 0.0
        })
        .count()
}
