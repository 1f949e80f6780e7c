//! Distance-driven pairwise loss.
//!
//! For a pair of inputs with Euclidean distance `d2` and codes (or relaxed
//! outputs) with L1 distance `d1`, the loss is `|λ·d2 − d1|·exp(−d2/t)`.
//! Close pairs are weighted heavily, so the network is pushed hardest to keep
//! neighbours at matching Hamming distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashnet::HashCode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Distance scale `λ`.
    pub lambda: f64,
    /// Temperature of the exponential weight.
    pub t: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, t: f64) -> Result<Self> {
        let cfg = Self { lambda, t };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.t.is_nan() || self.t <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "t must be > 0, got {}",
                self.t
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            t: 1.0,
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "input dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

fn l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "code lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

fn weighted_gap(input_dist: f64, code_dist: f64, cfg: &LossConfig) -> f64 {
    (cfg.lambda * input_dist - code_dist).abs() * (-input_dist / cfg.t).exp()
}

/// Loss on binary codes. `‖b_i − b_j‖₁` is twice their Hamming distance.
pub fn pair_loss_discrete(
    x_i: &[f64],
    x_j: &[f64],
    b_i: &HashCode,
    b_j: &HashCode,
    cfg: &LossConfig,
) -> Result<f64> {
    let d2 = euclidean(x_i, x_j)?;
    let d1 = l1(&b_i.as_f64(), &b_j.as_f64())?;
    Ok(weighted_gap(d2, d1, cfg))
}

/// Loss on the `tanh` outputs.
pub fn pair_loss_relaxed(
    x_i: &[f64],
    x_j: &[f64],
    h_i: &[f64],
    h_j: &[f64],
    cfg: &LossConfig,
) -> Result<f64> {
    let d2 = euclidean(x_i, x_j)?;
    let d1 = l1(h_i, h_j)?;
    Ok(weighted_gap(d2, d1, cfg))
}

/// Subgradient of [`pair_loss_relaxed`] with respect to `h_i` and `h_j`.
///
/// Uses 0 at the outer `|·|` kink and for components where `h_i == h_j`, so
/// `grad_h_j == -grad_h_i` always.
pub fn pair_loss_grad(
    x_i: &[f64],
    x_j: &[f64],
    h_i: &[f64],
    h_j: &[f64],
    cfg: &LossConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d2 = euclidean(x_i, x_j)?;
    let d1 = l1(h_i, h_j)?;
    let gap = cfg.lambda * d2 - d1;
    let weight = (-d2 / cfg.t).exp();
    // d|gap|/d d1 = -sign(gap)
    let outer = if gap > 0.0 {
        -weight
    } else if gap < 0.0 {
        weight
    } else {
        0.0
    };
    let grad_i: Vec<f64> = h_i
        .iter()
        .zip(h_j)
        .map(|(a, b)| {
            let diff = a - b;
            if diff > 0.0 {
                outer
            } else if diff < 0.0 {
                -outer
            } else {
                0.0
            }
        })
        .collect();
    let grad_j = grad_i.iter().map(|g| -g).collect();
    Ok((grad_i, grad_j))
}

/// Mean relaxed loss over all unordered pairs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean_loss: f64,
    /// Gradient of `mean_loss` with respect to each row of the batch outputs.
    pub grad_h: Vec<Vec<f64>>,
    pub pairs: usize,
}

pub fn batch_loss(
    batch_x: &[Vec<f64>],
    batch_h: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let n = batch_x.len();
    if n != batch_h.len() {
        return Err(Error::LengthMismatch(n, batch_h.len()));
    }
    if n < 2 {
        return Err(Error::InsufficientBatch(n));
    }
    let code_len = batch_h[0].len();
    let pairs = n * (n - 1) / 2;
    let scale = 1.0 / pairs as f64;
    let mut total = 0.0;
    let mut grad_h = vec![vec![0.0; code_len]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            total += pair_loss_relaxed(&batch_x[i], &batch_x[j], &batch_h[i], &batch_h[j], cfg)?;
            let (gi, gj) = pair_loss_grad(&batch_x[i], &batch_x[j], &batch_h[i], &batch_h[j], cfg)?;
            for (acc, g) in grad_h[i].iter_mut().zip(&gi) {
                *acc += g * scale;
            }
            for (acc, g) in grad_h[j].iter_mut().zip(&gj) {
                *acc += g * scale;
            }
        }
    }
    Ok(BatchLoss {
        mean_loss: total * scale,
        grad_h,
        pairs,
    })
}
