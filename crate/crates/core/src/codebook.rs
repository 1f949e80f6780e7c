//! Hash codes with degrees: the per-site summaries sent to the global site.
//!
//! CODES_PUSH payload: big-endian `u32` entry count, then per entry the
//! degree as a big-endian `f32` followed by the `ceil(L/8)` packed code
//! bytes. Counted bits are `32 + L` per entry; the count prefix and the
//! padding up to a byte boundary are physical overhead only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::hashnet::{hash_batch, HashCode, NetworkParams};

/// Largest degree an `f32` represents exactly.
pub const MAX_WIRE_DEGREE: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Site(usize),
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code: HashCode,
    pub degree: u64,
}

/// Distinct codes sorted by packed bytes, each with the number of samples it
/// stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub code_len: usize,
    pub entries: Vec<CodeEntry>,
    pub origin: Origin,
}

impl Codebook {
    /// Builds a codebook from `(code, degree)` pairs, rejecting duplicates,
    /// zero degrees and mixed lengths.
    pub fn new(code_len: usize, entries: Vec<CodeEntry>, origin: Origin) -> Result<Self> {
        let mut sorted: BTreeMap<Vec<u8>, CodeEntry> = BTreeMap::new();
        for e in entries {
            if e.code.len() != code_len {
                return Err(Error::InvalidCodebook(format!(
                    "code of length {} in a {code_len}-bit codebook",
                    e.code.len()
                )));
            }
            if e.degree == 0 {
                return Err(Error::InvalidCodebook("zero degree".into()));
            }
            if sorted.insert(e.code.pack(), e).is_some() {
                return Err(Error::InvalidCodebook("duplicate code".into()));
            }
        }
        Ok(Self {
            code_len,
            entries: sorted.into_values().collect(),
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_degree(&self) -> u64 {
        self.entries.iter().map(|e| e.degree).sum()
    }

    pub fn position(&self, code: &HashCode) -> Option<usize> {
        let key = code.pack();
        self.entries
            .binary_search_by(|e| e.code.pack().cmp(&key))
            .ok()
    }
}

/// Hashes every sample of a shard. Returns the site codebook and, per
/// sample, the index of its entry.
pub fn encode_shard(params: &NetworkParams, shard: &Shard) -> Result<(Codebook, Vec<usize>)> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    let codes = hash_batch(params, &shard.features)?;
    let mut counts: BTreeMap<Vec<u8>, (HashCode, u64)> = BTreeMap::new();
    for code in &codes {
        counts
            .entry(code.pack())
            .or_insert_with(|| (code.clone(), 0))
            .1 += 1;
    }
    let rank: BTreeMap<&Vec<u8>, usize> = counts.keys().enumerate().map(|(i, k)| (k, i)).collect();
    let assignment = codes.iter().map(|c| rank[&c.pack()]).collect();
    let entries = counts
        .values()
        .map(|(code, degree)| CodeEntry {
            code: code.clone(),
            degree: *degree,
        })
        .collect();
    Ok((
        Codebook {
            code_len: params.code_len(),
            entries,
            origin: Origin::Site(shard.site),
        },
        assignment,
    ))
}

/// Union of site codebooks with degrees summed per code.
pub fn merge_codebooks(books: &[Codebook]) -> Result<Codebook> {
    let first = books.first().ok_or(Error::EmptyInput)?;
    let mut merged: BTreeMap<Vec<u8>, CodeEntry> = BTreeMap::new();
    for book in books {
        if book.code_len != first.code_len {
            return Err(Error::IncompatibleCodebooks(first.code_len, book.code_len));
        }
        for e in &book.entries {
            merged
                .entry(e.code.pack())
                .or_insert_with(|| CodeEntry {
                    code: e.code.clone(),
                    degree: 0,
                })
                .degree += e.degree;
        }
    }
    Ok(Codebook {
        code_len: first.code_len,
        entries: merged.into_values().collect(),
        origin: Origin::Global,
    })
}

/// `Σ_m num_m · (32 + L)`.
pub fn code_transmission_bits(books: &[Codebook], code_len: usize) -> u64 {
    books
        .iter()
        .map(|b| b.len() as u64 * (32 + code_len as u64))
        .sum()
}

pub fn encode_codebook(book: &Codebook) -> Result<Vec<u8>> {
    let code_bytes = book.code_len.div_ceil(8);
    let mut out = Vec::with_capacity(4 + book.len() * (4 + code_bytes));
    out.extend_from_slice(&(book.len() as u32).to_be_bytes());
    for e in &book.entries {
        if e.degree > MAX_WIRE_DEGREE {
            return Err(Error::UnsupportedSize(format!(
                "degree {} is not exact as f32",
                e.degree
            )));
        }
        out.extend_from_slice(&(e.degree as f32).to_be_bytes());
        out.extend_from_slice(&e.code.pack());
    }
    Ok(out)
}

pub fn decode_codebook(bytes: &[u8], code_len: usize, origin: Origin) -> Result<Codebook> {
    let count = bytes
        .get(..4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| Error::Protocol("truncated codebook payload".into()))?;
    let code_bytes = code_len.div_ceil(8);
    let stride = 4 + code_bytes;
    let body = &bytes[4..];
    if body.len() != count * stride {
        return Err(Error::Protocol(format!(
            "codebook payload has {} body bytes, expected {}",
            body.len(),
            count * stride
        )));
    }
    let entries = body
        .chunks_exact(stride)
        .map(|c| {
            let degree = f32::from_be_bytes(c[..4].try_into().expect("4 bytes"));
            if !(degree >= 1.0 && degree.fract() == 0.0) {
                return Err(Error::Protocol(format!("invalid degree {degree}")));
            }
            Ok(CodeEntry {
                code: HashCode::unpack(&c[4..], code_len)?,
                degree: degree as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Codebook::new(code_len, entries, origin)
}

/// Counted bits of a CODES_PUSH payload: `count · (32 + L)`.
pub fn codes_payload_bits(bytes: &[u8], code_len: usize) -> Result<u64> {
    let count = bytes
        .get(..4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as u64)
        .ok_or_else(|| Error::Protocol("truncated codebook payload".into()))?;
    Ok(count * (32 + code_len as u64))
}
