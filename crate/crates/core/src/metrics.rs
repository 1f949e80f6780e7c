//! External clustering indices and the transmission-cost ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

struct Contingency {
    joint: BTreeMap<(usize, usize), usize>,
    pred: BTreeMap<usize, usize>,
    truth: BTreeMap<usize, usize>,
    total: usize,
}

impl Contingency {
    fn new(pred: &[usize], truth: &[usize]) -> Self {
        let mut joint = BTreeMap::new();
        let mut p = BTreeMap::new();
        let mut t = BTreeMap::new();
        for (&a, &b) in pred.iter().zip(truth) {
            *joint.entry((a, b)).or_insert(0) += 1;
            *p.entry(a).or_insert(0) += 1;
            *t.entry(b).or_insert(0) += 1;
        }
        Self {
            joint,
            pred: p,
            truth: t,
            total: pred.len(),
        }
    }

    fn entropy(counts: &BTreeMap<usize, usize>, total: usize) -> f64 {
        let s = total as f64;
        -counts
            .values()
            .map(|&c| {
                let p = c as f64 / s;
                p * p.ln()
            })
            .sum::<f64>()
    }

    fn mutual_information(&self) -> f64 {
        let s = self.total as f64;
        let mi: f64 = self
            .joint
            .iter()
            .map(|(&(a, b), &n)| {
                let n = n as f64;
                let na = self.pred[&a] as f64;
                let nb = self.truth[&b] as f64;
                n / s * (s * n / (na * nb)).ln()
            })
            .sum();
        mi.max(0.0)
    }
}

/// Fraction of samples belonging to the majority truth class of their
/// predicted cluster.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let table = Contingency::new(pred, truth);
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(a, _), &n) in &table.joint {
        let slot = best.entry(a).or_insert(0);
        *slot = (*slot).max(n);
    }
    Ok(best.values().sum::<usize>() as f64 / table.total as f64)
}

/// Normalized mutual information, `I / sqrt(H_pred · H_truth)`, natural
/// logs. Zero when either labeling has a single cluster.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let table = Contingency::new(pred, truth);
    let hp = Contingency::entropy(&table.pred, table.total);
    let ht = Contingency::entropy(&table.truth, table.total);
    if hp <= 0.0 || ht <= 0.0 {
        return Ok(0.0);
    }
    Ok((table.mutual_information() / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

/// NMI with the denominator taken as the plain product `H_pred · H_truth`,
/// without the square root. Not bounded by 1; kept for comparison.
pub fn nmi_unnormalized_product(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let table = Contingency::new(pred, truth);
    let hp = Contingency::entropy(&table.pred, table.total);
    let ht = Contingency::entropy(&table.truth, table.total);
    if hp <= 0.0 || ht <= 0.0 {
        return Ok(0.0);
    }
    Ok(table.mutual_information() / (hp * ht))
}

/// Training traffic: `M · |Θ| · 2N · 32` bits.
pub fn training_cost_bits(sites: usize, param_count: usize, rounds: usize) -> u64 {
    sites as u64 * param_count as u64 * 2 * rounds as u64 * 32
}

/// Traffic measured on actual payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredTraffic {
    /// Counted the same way as the formula: 32 bits per real, `32 + L` per
    /// code entry.
    pub counted_bits: u64,
    /// Whole payload bytes × 8, including shape headers, entry counts and
    /// code padding.
    pub physical_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub sites: usize,
    pub param_count: usize,
    pub rounds: usize,
    pub code_len: usize,
    pub codes_per_site: Vec<usize>,
    pub training_bits: u64,
    pub final_broadcast_bits: u64,
    pub code_bits: u64,
    pub total_bits: u64,
    pub upper_bound_bits: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub measured: Option<MeasuredTraffic>,
}

/// `32(2N+1)M|Θ| + Σ_m (32+L) num_m`, with the bound replacing every
/// `num_m` by `2^L`.
pub fn total_cost_bits(
    sites: usize,
    param_count: usize,
    rounds: usize,
    codes_per_site: &[usize],
    code_len: usize,
) -> CostLedger {
    let per_code = 32 + code_len as u64;
    let training_bits = training_cost_bits(sites, param_count, rounds);
    let final_broadcast_bits = 32 * sites as u64 * param_count as u64;
    let code_bits: u64 = codes_per_site.iter().map(|&n| n as u64 * per_code).sum();
    let cube = 1u64.checked_shl(code_len as u32).unwrap_or(u64::MAX);
    let code_bound = (sites as u64).saturating_mul(per_code).saturating_mul(cube);
    CostLedger {
        sites,
        param_count,
        rounds,
        code_len,
        codes_per_site: codes_per_site.to_vec(),
        training_bits,
        final_broadcast_bits,
        code_bits,
        total_bits: training_bits + final_broadcast_bits + code_bits,
        upper_bound_bits: (training_bits + final_broadcast_bits).saturating_add(code_bound),
        measured: None,
    }
}

/// Megabytes as `bits / (8 · 2^20)`.
pub fn bits_to_megabytes(bits: u64) -> f64 {
    bits as f64 / (8.0 * (1u64 << 20) as f64)
}
