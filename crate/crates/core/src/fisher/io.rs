//! On-disk containers for Fisher scores and masks.
//!
//! Both share a 64-byte little-endian header:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `FISHTUNE`                        |
//! | 8      | 4    | format version (1)                      |
//! | 12     | 1    | kind: 1 scores, 2 mask                  |
//! | 13     | 1    | strategy: 0 none, 1 fish, 2 random, 3 reverse, 4 dense |
//! | 14     | 2    | reserved, zero                          |
//! | 16     | 8    | length of θ̃                             |
//! | 24     | 8    | k (mask) or 0                           |
//! | 32     | 8    | seed (mask) or 0                        |
//! | 40     | 8    | Fisher sample count or 0                |
//! | 48     | 16   | source config hash, ASCII, NUL padded   |
//!
//! Scores follow as `length` f32 values. Masks follow as `ceil(length / 8)`
//! bytes, bit `i` at byte `i / 8`, least significant bit first.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::atomic_write;

use super::{FisherEstimate, SparsityMask, Strategy};

pub const MAGIC: &[u8; 8] = b"FISHTUNE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;
const HASH_LEN: usize = 16;
const KIND_SCORES: u8 = 1;
const KIND_MASK: u8 = 2;

struct Header {
    kind: u8,
    strategy: u8,
    length: u64,
    k: u64,
    seed: u64,
    num_samples: u64,
    hash: String,
}

fn strategy_code(s: Option<Strategy>) -> u8 {
    match s {
        None => 0,
        Some(Strategy::Fish) => 1,
        Some(Strategy::Random) => 2,
        Some(Strategy::Reverse) => 3,
        Some(Strategy::Dense) => 4,
    }
}

fn strategy_from_code(c: u8) -> Result<Strategy> {
    Ok(match c {
        1 => Strategy::Fish,
        2 => Strategy::Random,
        3 => Strategy::Reverse,
        4 => Strategy::Dense,
        _ => return Err(Error::format(format!("unknown strategy code {c}"))),
    })
}

fn encode_header(h: &Header) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(h.kind);
    out.push(h.strategy);
    out.extend_from_slice(&[0, 0]);
    for v in [h.length, h.k, h.seed, h.num_samples] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut hash = [0u8; HASH_LEN];
    let src = h.hash.as_bytes();
    let n = src.len().min(HASH_LEN);
    hash[..n].copy_from_slice(&src[..n]);
    out.extend_from_slice(&hash);
    out
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn decode_header(bytes: &[u8], expected_kind: u8) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let kind = bytes[12];
    if kind != expected_kind {
        return Err(Error::format(format!("file kind {kind} does not match expected kind {expected_kind}")));
    }
    let hash_bytes = &bytes[48..64];
    let end = hash_bytes.iter().position(|&b| b == 0).unwrap_or(HASH_LEN);
    let hash = std::str::from_utf8(&hash_bytes[..end])
        .map_err(|_| Error::format("config hash is not ASCII"))?
        .to_string();
    Ok(Header {
        kind,
        strategy: bytes[13],
        length: u64_at(bytes, 16),
        k: u64_at(bytes, 24),
        seed: u64_at(bytes, 32),
        num_samples: u64_at(bytes, 40),
        hash,
    })
}

fn check_payload(bytes: &[u8], expected: usize) -> Result<&[u8]> {
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(format!("truncated payload: {} of {expected} bytes", payload.len())));
    }
    if payload.len() > expected {
        return Err(Error::format(format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    Ok(payload)
}

pub fn encode_scores(f: &FisherEstimate) -> Vec<u8> {
    let mut out = encode_header(&Header {
        kind: KIND_SCORES,
        strategy: strategy_code(None),
        length: f.scores.len() as u64,
        k: 0,
        seed: 0,
        num_samples: f.num_samples as u64,
        hash: f.source_config_hash.clone(),
    });
    for s in &f.scores {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_scores(bytes: &[u8]) -> Result<FisherEstimate> {
    let h = decode_header(bytes, KIND_SCORES)?;
    let payload = check_payload(bytes, h.length as usize * 4)?;
    let scores = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FisherEstimate { scores, num_samples: h.num_samples as usize, source_config_hash: h.hash })
}

pub fn encode_mask(m: &SparsityMask) -> Vec<u8> {
    let mut out = encode_header(&Header {
        kind: KIND_MASK,
        strategy: strategy_code(Some(m.strategy())),
        length: m.len() as u64,
        k: m.k() as u64,
        seed: m.seed(),
        num_samples: 0,
        hash: String::new(),
    });
    let mut packed = vec![0u8; m.len().div_ceil(8)];
    for (i, &b) in m.bits().iter().enumerate() {
        if b {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&packed);
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<SparsityMask> {
    let h = decode_header(bytes, KIND_MASK)?;
    debug_assert_eq!(h.kind, KIND_MASK);
    let len = h.length as usize;
    let payload = check_payload(bytes, len.div_ceil(8))?;
    let bits: Vec<bool> = (0..len).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
    if len % 8 != 0 && payload[len / 8] >> (len % 8) != 0 {
        return Err(Error::format("padding bits after the last coordinate are set"));
    }
    let mask = SparsityMask::from_bits(bits, strategy_from_code(h.strategy)?, h.seed)?;
    if mask.k() as u64 != h.k {
        return Err(Error::format(format!("header records k = {} but {} bits are set", h.k, mask.k())));
    }
    Ok(mask)
}

pub fn save_scores(path: &Path, f: &FisherEstimate) -> Result<()> {
    atomic_write(path, &encode_scores(f))
}

pub fn load_scores(path: &Path) -> Result<FisherEstimate> {
    decode_scores(&fs::read(path)?)
}

pub fn save_mask(path: &Path, m: &SparsityMask) -> Result<()> {
    atomic_write(path, &encode_mask(m))
}

pub fn load_mask(path: &Path) -> Result<SparsityMask> {
    decode_mask(&fs::read(path)?)
}

/// One `index score bit` line per coordinate; a missing column prints as `-`.
pub fn export_text(scores: Option<&FisherEstimate>, mask: Option<&SparsityMask>) -> Result<String> {
    let len = match (scores, mask) {
        (Some(s), Some(m)) if s.len() != m.len() => {
            return Err(Error::contract(format!("scores cover {} coordinates but mask covers {}", s.len(), m.len())))
        }
        (Some(s), _) => s.len(),
        (None, Some(m)) => m.len(),
        (None, None) => return Err(Error::contract("nothing to export")),
    };
    let mut out = String::new();
    for i in 0..len {
        let score = scores.map_or("-".to_string(), |s| format!("{:e}", s.scores[i]));
        let bit = mask.map_or("-", |m| if m.bits()[i] { "1" } else { "0" });
        writeln!(out, "{i} {score} {bit}").unwrap();
    }
    Ok(out)
}
