//! Length-prefixed framing and the global/sub-site session protocol.
//!
//! Frame: 1-byte tag, 4-byte big-endian payload length, payload.
//!
//! ```text
//! site   -> global  HELLO            u32 site index
//! global -> site    PARAMS_BROADCAST  parameters          (N training rounds)
//! site   -> global  GRADIENT_PUSH     gradient            (one per round)
//! global -> site    PARAMS_BROADCAST  final parameters
//! site   -> global  CODES_PUSH        site codebook
//! site   -> global  DONE              N f64 batch losses (telemetry)
//! global -> site    DONE              code → cluster table
//! ```
//!
//! Only PARAMS_BROADCAST, GRADIENT_PUSH and CODES_PUSH payloads are traffic in
//! the cost ledger. HELLO and DONE are session plumbing.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};

use crate::codebook::{
    codes_payload_bits, decode_codebook, encode_codebook, encode_shard, Codebook, Origin,
};
use crate::data::Shard;
use crate::error::{Error, Result};
use crate::fedtrain::{
    global_step, payload_value_bits, round_record, site_update, TrainingConfig, TrainingHistory,
};
use crate::hashnet::{decode_params, encode_params, HashCode, NetworkParams};
use crate::metrics::MeasuredTraffic;

pub const MAX_FRAME_LEN: u32 = 1 << 30;

#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    ParamsBroadcast = 0x01,
    GradientPush = 0x02,
    CodesPush = 0x03,
    Done = 0x04,
    Hello = 0x05,
}

impl TryFrom<u8> for Tag {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            0x01 => Tag::ParamsBroadcast,
            0x02 => Tag::GradientPush,
            0x03 => Tag::CodesPush,
            0x04 => Tag::Done,
            0x05 => Tag::Hello,
            other => return Err(Error::Protocol(format!("unknown frame tag {other:#04x}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub payload: Vec<u8>,
}

pub fn write_frame<W: Write>(out: &mut W, tag: Tag, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME_LEN)
        .ok_or_else(|| {
            Error::Protocol(format!("payload of {} bytes is too large", payload.len()))
        })?;
    let mut header = [0u8; 5];
    header[0] = tag as u8;
    header[1..].copy_from_slice(&len.to_be_bytes());
    out.write_all(&header)?;
    out.write_all(payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(input: &mut R) -> Result<Frame> {
    let mut header = [0u8; 5];
    input.read_exact(&mut header)?;
    let tag = Tag::try_from(header[0])?;
    let len = u32::from_be_bytes(header[1..].try_into().expect("4 bytes"));
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!(
            "frame of {len} bytes exceeds limit"
        )));
    }
    let mut payload = vec![0u8; len as usize];
    input.read_exact(&mut payload)?;
    Ok(Frame { tag, payload })
}

fn expect<R: Read>(input: &mut R, tag: Tag) -> Result<Vec<u8>> {
    let frame = read_frame(input)?;
    if frame.tag != tag {
        return Err(Error::Protocol(format!(
            "expected {tag:?}, got {:?}",
            frame.tag
        )));
    }
    Ok(frame.payload)
}

fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_be_bytes()).collect()
}

fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Protocol(
            "loss payload not a multiple of 8 bytes".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Code → cluster table sent back to sites: u32 count, then per entry the
/// packed code followed by a u32 cluster id.
pub fn encode_cluster_table(entries: &[(HashCode, usize)]) -> Vec<u8> {
    let mut out = (entries.len() as u32).to_be_bytes().to_vec();
    for (code, cluster) in entries {
        out.extend_from_slice(&code.pack());
        out.extend_from_slice(&(*cluster as u32).to_be_bytes());
    }
    out
}

pub fn decode_cluster_table(bytes: &[u8], code_len: usize) -> Result<Vec<(HashCode, usize)>> {
    let count = bytes
        .get(..4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| Error::Protocol("truncated cluster table".into()))?;
    let stride = code_len.div_ceil(8) + 4;
    let body = &bytes[4..];
    if body.len() != count * stride {
        return Err(Error::Protocol("cluster table length mismatch".into()));
    }
    body.chunks_exact(stride)
        .map(|c| {
            let (code, id) = c.split_at(stride - 4);
            Ok((
                HashCode::unpack(code, code_len)?,
                u32::from_be_bytes(id.try_into().expect("4 bytes")) as usize,
            ))
        })
        .collect()
}

/// Global-site end of a session with every sub-site.
pub struct GlobalSession<S> {
    sites: Vec<S>,
    traffic: MeasuredTraffic,
}

/// What the global site learned from training and code collection.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTraining {
    pub params: NetworkParams,
    pub history: TrainingHistory,
    pub site_books: Vec<Codebook>,
}

impl<S: Read + Write> GlobalSession<S> {
    /// Reads one HELLO per stream and orders the streams by site index,
    /// which must cover `0..streams.len()` exactly.
    pub fn handshake(streams: Vec<S>) -> Result<Self> {
        let m = streams.len();
        let mut slots: Vec<Option<S>> = (0..m).map(|_| None).collect();
        for mut s in streams {
            let hello = expect(&mut s, Tag::Hello)?;
            let id = hello
                .get(..4)
                .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| Error::Protocol("short HELLO".into()))?;
            match slots.get_mut(id) {
                Some(slot @ None) => *slot = Some(s),
                _ => {
                    return Err(Error::Protocol(format!(
                        "unexpected or duplicate site id {id}"
                    )))
                }
            }
        }
        Ok(Self {
            sites: slots
                .into_iter()
                .map(|s| s.expect("all ids present"))
                .collect(),
            traffic: MeasuredTraffic {
                counted_bits: 0,
                physical_bits: 0,
            },
        })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn traffic(&self) -> MeasuredTraffic {
        self.traffic
    }

    fn count_params(&mut self, payload: &[u8]) -> Result<()> {
        self.traffic.counted_bits += payload_value_bits(payload)?;
        self.traffic.physical_bits += (payload.len() * 8) as u64;
        Ok(())
    }

    fn broadcast(&mut self, payload: &[u8]) -> Result<()> {
        for i in 0..self.sites.len() {
            write_frame(&mut self.sites[i], Tag::ParamsBroadcast, payload)?;
            self.count_params(payload)?;
        }
        Ok(())
    }

    /// Training rounds, final broadcast, code collection and loss telemetry.
    pub fn train_and_collect(
        &mut self,
        init: NetworkParams,
        cfg: &TrainingConfig,
    ) -> Result<GlobalTraining> {
        cfg.validate()?;
        if self.sites.len() != cfg.n_sites {
            return Err(Error::InvalidConfig(format!(
                "config expects {} sites, {} connected",
                cfg.n_sites,
                self.sites.len()
            )));
        }
        let mut params = init;
        let mut exchanged = Vec::with_capacity(cfg.n_rounds);
        for _ in 0..cfg.n_rounds {
            let payload = encode_params(&params);
            self.broadcast(&payload)?;
            let mut grads = Vec::with_capacity(self.sites.len());
            for i in 0..self.sites.len() {
                let g = expect(&mut self.sites[i], Tag::GradientPush)?;
                self.count_params(&g)?;
                grads.push(g);
            }
            params = global_step(&params, &grads, cfg.learning_rate)?;
            exchanged.push((payload, grads));
        }

        let final_payload = encode_params(&params);
        self.broadcast(&final_payload)?;
        let code_len = params.code_len();
        let mut site_books = Vec::with_capacity(self.sites.len());
        for i in 0..self.sites.len() {
            let bytes = expect(&mut self.sites[i], Tag::CodesPush)?;
            self.traffic.counted_bits += codes_payload_bits(&bytes, code_len)?;
            self.traffic.physical_bits += (bytes.len() * 8) as u64;
            site_books.push(decode_codebook(&bytes, code_len, Origin::Site(i))?);
        }

        let mut per_site_losses = Vec::with_capacity(self.sites.len());
        for i in 0..self.sites.len() {
            let losses = decode_f64s(&expect(&mut self.sites[i], Tag::Done)?)?;
            if losses.len() != cfg.n_rounds {
                return Err(Error::Protocol(format!(
                    "site {i} reported {} losses",
                    losses.len()
                )));
            }
            per_site_losses.push(losses);
        }
        let mut history = TrainingHistory::default();
        for (round, (payload, grads)) in exchanged.iter().enumerate() {
            let losses = per_site_losses.iter().map(|l| l[round]).collect();
            history.push(round_record(round, losses, payload, grads)?);
        }
        Ok(GlobalTraining {
            params,
            history,
            site_books,
        })
    }

    /// Sends every site its code → cluster table and closes the session.
    pub fn finish(mut self, table: &[(HashCode, usize)]) -> Result<MeasuredTraffic> {
        let bytes = encode_cluster_table(table);
        for s in &mut self.sites {
            write_frame(s, Tag::Done, &bytes)?;
        }
        Ok(self.traffic)
    }
}

/// What a sub-site ends up with.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteResult {
    pub book: Codebook,
    /// Per sample, the index of its entry in `book`.
    pub assignment: Vec<usize>,
    /// Per sample cluster labels.
    pub labels: Vec<usize>,
    pub losses: Vec<f64>,
}

/// Runs the sub-site end of a session over `stream`.
pub fn run_site<S: Read + Write>(
    mut stream: S,
    shard: &Shard,
    cfg: &TrainingConfig,
) -> Result<SiteResult> {
    write_frame(&mut stream, Tag::Hello, &(shard.site as u32).to_be_bytes())?;
    let mut losses = Vec::with_capacity(cfg.n_rounds);
    for round in 0..cfg.n_rounds {
        let payload = expect(&mut stream, Tag::ParamsBroadcast)?;
        let update = site_update(shard, &payload, cfg, round)?;
        write_frame(&mut stream, Tag::GradientPush, &update.gradient_payload)?;
        losses.push(update.mean_loss);
    }
    let params = decode_params(&expect(&mut stream, Tag::ParamsBroadcast)?)?;
    let (book, assignment) = encode_shard(&params, shard)?;
    write_frame(&mut stream, Tag::CodesPush, &encode_codebook(&book)?)?;
    write_frame(&mut stream, Tag::Done, &encode_f64s(&losses))?;

    let table = decode_cluster_table(&expect(&mut stream, Tag::Done)?, book.code_len)?;
    let entry_cluster = book
        .entries
        .iter()
        .map(|e| {
            table
                .iter()
                .find(|(c, _)| *c == e.code)
                .map(|(_, k)| *k)
                .ok_or_else(|| {
                    Error::InconsistentState("site code missing from cluster table".into())
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = assignment.iter().map(|&e| entry_cluster[e]).collect();
    Ok(SiteResult {
        book,
        assignment,
        labels,
        losses,
    })
}

/// Accepts `n` TCP connections from sub-sites.
pub fn accept_sites(listener: &TcpListener, n: usize) -> Result<Vec<TcpStream>> {
    (0..n)
        .map(|_| {
            let (s, _) = listener.accept()?;
            s.set_nodelay(true)?;
            Ok(s)
        })
        .collect()
}
