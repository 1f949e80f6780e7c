//! Representative batch selection.
//!
//! Samples are bucketed by their current hash code. The first pick is
//! uniform over all samples; every later pick comes from the bucket whose
//! code has the largest summed Hamming distance to all codes picked so far
//! (one term per earlier pick), so a batch spreads over the code cube.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::hashnet::{hash_batch, HashCode, NetworkParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub code: HashCode,
    pub members: Vec<usize>,
}

/// Samples grouped by hash code, ordered by packed code bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketIndex {
    buckets: BTreeMap<Vec<u8>, Bucket>,
    sample_codes: Vec<HashCode>,
}

impl BucketIndex {
    /// Buckets sample `i` under `codes[i]`.
    pub fn from_codes(codes: Vec<HashCode>) -> Self {
        let mut buckets: BTreeMap<Vec<u8>, Bucket> = BTreeMap::new();
        for (i, code) in codes.iter().enumerate() {
            buckets
                .entry(code.pack())
                .or_insert_with(|| Bucket {
                    code: code.clone(),
                    members: Vec::new(),
                })
                .members
                .push(i);
        }
        Self {
            buckets,
            sample_codes: codes,
        }
    }

    pub fn buckets(&self) -> impl Iterator<Item = &Bucket> {
        self.buckets.values()
    }

    pub fn n_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_codes.len()
    }

    pub fn code_of(&self, sample: usize) -> Option<&HashCode> {
        self.sample_codes.get(sample)
    }
}

pub fn build_buckets(params: &NetworkParams, shard: &Shard) -> Result<BucketIndex> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    Ok(BucketIndex::from_codes(hash_batch(
        params,
        &shard.features,
    )?))
}

/// Sum of Hamming distances from `code` to every code in `picked`.
pub fn summed_hamming(code: &HashCode, picked: &[&HashCode]) -> usize {
    picked
        .iter()
        .map(|p| {
            p.bits()
                .iter()
                .zip(code.bits())
                .filter(|(a, b)| a != b)
                .count()
        })
        .sum()
}

/// Greedy diverse batch of up to `batch_size` distinct sample indices.
///
/// Ties between buckets go to the smallest packed code. If the shard holds
/// fewer than `batch_size` samples, every sample is returned.
pub fn select_batch(buckets: &BucketIndex, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let total = buckets.n_samples();
    if total == 0 {
        return Err(Error::EmptyShard);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<&HashCode> = buckets.buckets.values().map(|b| &b.code).collect();
    let mut remaining: Vec<Vec<usize>> = buckets
        .buckets
        .values()
        .map(|b| b.members.clone())
        .collect();
    let code_len = codes[0].len();

    // per-bit count of +1 among picked codes
    let mut plus = vec![0usize; code_len];
    let mut batch = Vec::with_capacity(batch_size.min(total));

    let take = |bucket: usize, sample: usize, batch: &mut Vec<usize>, plus: &mut [usize]| {
        batch.push(sample);
        for (p, &b) in plus.iter_mut().zip(codes[bucket].bits()) {
            if b == 1 {
                *p += 1;
            }
        }
    };

    let mut first = rng.random_range(0..total);
    let first_bucket = remaining
        .iter()
        .position(|members| {
            if first < members.len() {
                true
            } else {
                first -= members.len();
                false
            }
        })
        .expect("offset within total");
    let sample = remaining[first_bucket].remove(first);
    take(first_bucket, sample, &mut batch, &mut plus);

    while batch.len() < batch_size {
        let mut best: Option<(usize, usize)> = None;
        for (bucket, members) in remaining.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let score: usize = codes[bucket]
                .bits()
                .iter()
                .zip(&plus)
                .map(|(&b, &p)| if b == 1 { batch.len() - p } else { p })
                .sum();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((bucket, score));
            }
        }
        let Some((bucket, _)) = best else { break };
        let offset = rng.random_range(0..remaining[bucket].len());
        let sample = remaining[bucket].remove(offset);
        take(bucket, sample, &mut batch, &mut plus);
    }
    Ok(batch)
}
