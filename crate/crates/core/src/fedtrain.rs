//! Synchronous global/sub-site training of the hash network.
//!
//! Every round the global site broadcasts its parameters, each sub-site
//! selects a diverse batch, computes the gradient of its mean pairwise loss
//! and sends it back, and the global site steps along the average gradient.
//!
//! Parameters and gradients always cross the site boundary in the wire
//! encoding (`f32` values), in simulation as well as over TCP, so both modes
//! compute on identical numbers and report identical bit counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Shard;
use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::hashnet::{
    backward, decode_params, encode_params, encode_vector, forward, header_len, init_network,
    LayerSpec, NetworkParams,
};
use crate::pairloss::{batch_loss, LossConfig};
use crate::sampler::{build_buckets, select_batch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub n_rounds: usize,
    pub n_sites: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(Error::InvalidConfig("n_sites must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRound {
    /// Gradient of the batch's mean pair loss with respect to the parameters.
    pub grad: Vec<f64>,
    pub mean_loss: f64,
    /// Shard-local indices of the selected batch.
    pub batch: Vec<usize>,
}

/// Seed of the batch selection at `round` for a shard.
pub fn round_seed(shard: &Shard, round: usize) -> u64 {
    derive_seed(shard.seed, round as u64)
}

/// One sub-site step: bucket the shard, pick a batch, and backpropagate the
/// mean pairwise loss.
pub fn local_round(
    shard: &Shard,
    params: &NetworkParams,
    cfg: &TrainingConfig,
    round: usize,
) -> Result<LocalRound> {
    if shard.len() < 2 {
        return Err(Error::InsufficientBatch(shard.len()));
    }
    let buckets = build_buckets(params, shard)?;
    let batch = select_batch(&buckets, cfg.batch_size, round_seed(shard, round))?;
    let xs: Vec<Vec<f64>> = batch.iter().map(|&i| shard.features[i].clone()).collect();
    let (h, trace) = forward(params, &xs)?;
    let loss = batch_loss(&xs, &h, &cfg.loss)?;
    // backward averages over the batch; undo that to get d(mean pair loss)/dΘ
    let n = xs.len() as f64;
    let seed: Vec<Vec<f64>> = loss
        .grad_h
        .iter()
        .map(|row| row.iter().map(|g| g * n).collect())
        .collect();
    let grad = backward(params, &trace, &seed)?;
    Ok(LocalRound {
        grad,
        mean_loss: loss.mean_loss,
        batch,
    })
}

/// `Θ − l · (Σ_m g_m) / M`, summing in ascending site order.
pub fn global_merge(
    params: &NetworkParams,
    grads: &[Vec<f64>],
    learning_rate: f64,
) -> Result<NetworkParams> {
    if grads.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = params.values.len();
    if let Some(bad) = grads.iter().find(|g| g.len() != n) {
        return Err(Error::Shape(format!(
            "gradient has {} entries, parameters {n}",
            bad.len()
        )));
    }
    let m = grads.len() as f64;
    let mut out = params.clone();
    for (k, v) in out.values.iter_mut().enumerate() {
        let sum = grads.iter().fold(0.0, |acc, g| acc + g[k]);
        *v -= learning_rate * (sum / m);
    }
    Ok(out)
}

/// Bits of the real-valued section of a parameter or gradient payload, i.e.
/// 32 per value; the shape header is not counted.
pub fn payload_value_bits(payload: &[u8]) -> Result<u64> {
    let n_layers = payload
        .get(..4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| Error::Protocol("truncated payload".into()))?;
    let header = header_len(n_layers);
    if payload.len() < header {
        return Err(Error::Protocol("truncated payload header".into()));
    }
    Ok(((payload.len() - header) * 8) as u64)
}

/// Result of one site's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteUpdate {
    pub gradient_payload: Vec<u8>,
    pub mean_loss: f64,
}

/// Sub-site side of a round, from received parameter bytes to gradient bytes.
pub fn site_update(
    shard: &Shard,
    params_payload: &[u8],
    cfg: &TrainingConfig,
    round: usize,
) -> Result<SiteUpdate> {
    let params = decode_params(params_payload)?;
    let local = local_round(shard, &params, cfg, round)?;
    Ok(SiteUpdate {
        gradient_payload: encode_vector(&params.layers, &local.grad),
        mean_loss: local.mean_loss,
    })
}

/// Global side of a round: decode gradients, merge, and keep the model at
/// `f32` precision.
pub fn global_step(
    params: &NetworkParams,
    gradient_payloads: &[Vec<u8>],
    learning_rate: f64,
) -> Result<NetworkParams> {
    let grads = gradient_payloads
        .iter()
        .map(|p| {
            let g = decode_params(p)?;
            if g.layers != params.layers {
                return Err(Error::Protocol("gradient layout differs from model".into()));
            }
            Ok(g.values)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut next = global_merge(params, &grads, learning_rate)?.to_f32_precision();
    next.seed = params.seed;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean over sites of their mean relaxed batch loss.
    pub mean_loss: f64,
    pub site_losses: Vec<f64>,
    /// Counted bits: 32 per parameter, down and up, for every site.
    pub bits: u64,
    /// Full payload bytes × 8, including shape headers.
    pub physical_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub rounds: Vec<RoundRecord>,
    pub min_loss: f64,
    pub max_loss: f64,
}

impl TrainingHistory {
    pub fn push(&mut self, record: RoundRecord) {
        if self.rounds.is_empty() {
            self.min_loss = record.mean_loss;
            self.max_loss = record.mean_loss;
        } else {
            self.min_loss = self.min_loss.min(record.mean_loss);
            self.max_loss = self.max_loss.max(record.mean_loss);
        }
        self.rounds.push(record);
    }

    pub fn total_bits(&self) -> u64 {
        self.rounds.iter().map(|r| r.bits).sum()
    }

    pub fn total_physical_bits(&self) -> u64 {
        self.rounds.iter().map(|r| r.physical_bits).sum()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.mean_loss).collect()
    }
}

/// Builds a round record from per-site losses (ascending site order) and
/// the payloads exchanged.
pub fn round_record(
    round: usize,
    site_losses: Vec<f64>,
    params_payload: &[u8],
    gradient_payloads: &[Vec<u8>],
) -> Result<RoundRecord> {
    let sites = gradient_payloads.len() as u64;
    let mut bits = payload_value_bits(params_payload)? * sites;
    let mut physical = (params_payload.len() * 8) as u64 * sites;
    for p in gradient_payloads {
        bits += payload_value_bits(p)?;
        physical += (p.len() * 8) as u64;
    }
    let mean_loss = site_losses.iter().fold(0.0, |a, l| a + l) / site_losses.len() as f64;
    Ok(RoundRecord {
        round,
        mean_loss,
        site_losses,
        bits,
        physical_bits: physical,
    })
}

fn check_shards(shards: &[Shard], cfg: &TrainingConfig) -> Result<()> {
    cfg.validate()?;
    if shards.len() != cfg.n_sites {
        return Err(Error::InvalidConfig(format!(
            "config expects {} sites, got {} shards",
            cfg.n_sites,
            shards.len()
        )));
    }
    if let Some(small) = shards.iter().find(|s| s.len() < 2) {
        return Err(Error::InsufficientBatch(small.len()));
    }
    Ok(())
}

/// Initial global model: fresh weights, rounded to wire precision.
pub fn initial_params(spec: &[LayerSpec], seed: u64) -> Result<NetworkParams> {
    Ok(init_network(spec, seed)?.to_f32_precision())
}

/// Runs `cfg.n_rounds` simulated rounds from freshly initialized weights.
pub fn train(
    shards: &[Shard],
    spec: &[LayerSpec],
    cfg: &TrainingConfig,
) -> Result<(NetworkParams, TrainingHistory)> {
    train_from(shards, initial_params(spec, cfg.seed)?, cfg)
}

/// Runs `cfg.n_rounds` simulated rounds starting from `init`.
pub fn train_from(
    shards: &[Shard],
    init: NetworkParams,
    cfg: &TrainingConfig,
) -> Result<(NetworkParams, TrainingHistory)> {
    check_shards(shards, cfg)?;
    let mut params = init;
    let mut history = TrainingHistory::default();
    for round in 0..cfg.n_rounds {
        let payload = encode_params(&params);
        let updates = shards
            .par_iter()
            .map(|shard| site_update(shard, &payload, cfg, round))
            .collect::<Result<Vec<_>>>()?;
        let (grads, losses): (Vec<Vec<u8>>, Vec<f64>) = updates
            .into_iter()
            .map(|u| (u.gradient_payload, u.mean_loss))
            .unzip();
        params = global_step(&params, &grads, cfg.learning_rate)?;
        history.push(round_record(round, losses, &payload, &grads)?);
    }
    Ok((params, history))
}

/// Min–max normalized loss per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rer {
    pub values: Vec<f64>,
    /// Set when every round had the same loss; `values` are then all zero.
    pub degenerate: bool,
}

pub fn rer(history: &TrainingHistory) -> Result<Rer> {
    if history.rounds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (lo, hi) = (history.min_loss, history.max_loss);
    if hi <= lo {
        return Ok(Rer {
            values: vec![0.0; history.rounds.len()],
            degenerate: true,
        });
    }
    Ok(Rer {
        values: history
            .rounds
            .iter()
            .map(|r| (r.mean_loss - lo) / (hi - lo))
            .collect(),
        degenerate: false,
    })
}
