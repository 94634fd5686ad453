//! Token embedding + positional encoding victim, and recovery of (token,
//! position) pairs from leaked floats through a bit-pattern lookup table.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kernels;
use crate::isa::RegisterRef;
use crate::sim::{BufferId, ColocationOrder, Dispatch, Kernel, SimError, Simulator, Wave, WaveKernel};

pub const CHUNK: usize = 16;
pub const TOKENS_CSV_HEADER: &str = "chunk_offset,token,position";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, position: usize, vocab: usize },
    #[error("{len} tokens exceed the {max} available positions")]
    TooManyTokens { len: usize, max: usize },
    #[error("max_pos {max_pos} exceeds the {positions} positional rows")]
    MaxPos { max_pos: usize, positions: usize },
    #[error("dimension {0} must be a positive multiple of {CHUNK}")]
    Dimension(usize),
    #[error("malformed tables file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub vocab: usize,
    pub dim: usize,
    pub positions: usize,
    /// `vocab × dim`, row-major.
    pub token: Vec<f32>,
    /// `positions × dim`, row-major.
    pub position: Vec<f32>,
}

impl EmbeddingTables {
    /// Random tables with values in `(-0.1, 0.1)`.
    pub fn seeded(vocab: usize, dim: usize, positions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect::<Vec<_>>();
        let token = draw(vocab * dim);
        let position = draw(positions * dim);
        EmbeddingTables { vocab, dim, positions, token, position }
    }

    /// Desk-scale default: 1000 tokens, 64 dimensions, 32 positions.
    pub fn desk(seed: u64) -> Self {
        Self::seeded(1000, 64, 32, seed)
    }

    pub fn token_row(&self, t: usize) -> &[f32] {
        &self.token[t * self.dim..(t + 1) * self.dim]
    }

    pub fn position_row(&self, p: usize) -> &[f32] {
        &self.position[p * self.dim..(p + 1) * self.dim]
    }

    /// Encoded vector of token `t` at position `p`.
    pub fn encode(&self, t: usize, p: usize) -> Vec<f32> {
        self.token_row(t).iter().zip(self.position_row(p)).map(|(a, b)| a + b).collect()
    }

    /// Little-endian `u32` vocab, dim, positions, then both matrices as `f32`.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        let mut out = Vec::with_capacity(12 + 4 * (self.token.len() + self.position.len()));
        for n in [self.vocab, self.dim, self.positions] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.token.iter().chain(&self.position) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&out)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, LlmError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 {
            return Err(LlmError::Format("header shorter than 12 bytes".into()));
        }
        let header = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (vocab, dim, positions) = (header(0), header(1), header(2));
        let floats = (vocab + positions)
            .checked_mul(dim)
            .ok_or_else(|| LlmError::Format("table size overflows".into()))?;
        if bytes.len() != 12 + 4 * floats {
            return Err(LlmError::Format(format!("expected {} bytes, found {}", 12 + 4 * floats, bytes.len())));
        }
        let values = read_f32s(&bytes[12..]);
        let (token, position) = values.split_at(vocab * dim);
        Ok(EmbeddingTables { vocab, dim, positions, token: token.to_vec(), position: position.to_vec() })
    }
}

/// Little-endian `f32` stream; a trailing partial value is ignored.
pub fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn write_f32s(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// One thread per output element, one group per token.
/// b0: token ids, b1: token table, b2: position table, b3: output.
#[derive(Debug)]
struct EmbedKernel {
    dim: usize,
}

impl WaveKernel for EmbedKernel {
    fn name(&self) -> &str {
        "embed_positional"
    }

    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError> {
        let model = wave.config().register_model;
        let pos = wave.group() as u64;
        let lanes = wave.lanes();
        let token = wave.load(0, &vec![pos; lanes], 1)?;
        wave.write(RegisterRef::from_slot(0, model), &token)?;
        let idx: Vec<u64> = (0..lanes).map(|l| u64::from(wave.local_id(l))).collect();
        let tb: Vec<u64> = idx.iter().zip(&token).map(|(i, t)| u64::from(*t) * self.dim as u64 + i).collect();
        let pb: Vec<u64> = idx.iter().map(|i| pos * self.dim as u64 + i).collect();
        let e = wave.load(1, &tb, 1)?;
        wave.write(RegisterRef::from_slot(1, model), &e)?;
        let p = wave.load(2, &pb, 1)?;
        wave.write(RegisterRef::from_slot(2, model), &p)?;
        let sum: Vec<u32> =
            e.iter().zip(&p).map(|(a, b)| (f32::from_bits(*a) + f32::from_bits(*b)).to_bits()).collect();
        wave.write(RegisterRef::from_slot(3, model), &sum)?;
        let out: Vec<u64> = idx.iter().map(|i| pos * self.dim as u64 + i).collect();
        wave.store(3, &out, 1, &sum)
    }
}

fn check_tokens(tables: &EmbeddingTables, tokens: &[u32]) -> Result<(), LlmError> {
    if tokens.len() > tables.positions {
        return Err(LlmError::TooManyTokens { len: tokens.len(), max: tables.positions });
    }
    if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, t)| **t as usize >= tables.vocab) {
        return Err(LlmError::TokenOutOfRange { token, position, vocab: tables.vocab });
    }
    if tables.dim == 0 || !tables.dim.is_multiple_of(CHUNK) {
        return Err(LlmError::Dimension(tables.dim));
    }
    Ok(())
}

fn victim_dispatch(sim: &mut Simulator, tables: &EmbeddingTables, tokens: &[u32]) -> (Dispatch, BufferId) {
    let ids = sim.buffer_from(tokens);
    let tok = sim.buffer_from(&tables.token.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let pos = sim.buffer_from(&tables.position.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let out = sim.create_buffer(tokens.len() * tables.dim);
    let d = Dispatch::new(Kernel::native(EmbedKernel { dim: tables.dim }), tokens.len(), tables.dim)
        .bind([ids, tok, pos, out]);
    (d, out)
}

/// Runs the victim and returns its output, `tokens.len() × dim` floats.
pub fn embed_victim(sim: &mut Simulator, tables: &EmbeddingTables, tokens: &[u32]) -> Result<Vec<f32>, LlmError> {
    check_tokens(tables, tokens)?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let (d, out) = victim_dispatch(sim, tables, tokens);
    sim.dispatch(&d)?;
    Ok(sim.read_words(out)?.iter().map(|b| f32::from_bits(*b)).collect())
}

/// Runs the victim on the store-residue model with an attacker wave behind
/// each victim wave, in a hidden order. Returns the first half-wave of every
/// attacker wave, concatenated.
pub fn leak_embeddings(sim: &mut Simulator, tables: &EmbeddingTables, tokens: &[u32]) -> Result<Vec<f32>, LlmError> {
    check_tokens(tables, tokens)?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let (victim, _) = victim_dispatch(sim, tables, tokens);
    let ww = sim.config().wave_width;
    let half = sim.config().half_wave();
    let waves = tokens.len() * victim.waves_per_group(ww);
    let spy = sim.create_buffer(waves * ww);
    let attacker = Dispatch::new(kernels::nvidia_attacker(), waves, ww).bind([spy]);
    sim.dispatch_colocated(&[victim], &attacker, ColocationOrder::ShuffleWaves)?;
    let words = sim.read_words(spy)?;
    Ok(words.chunks(ww).flat_map(|w| &w[..half]).map(|b| f32::from_bits(*b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LutEntry {
    pub token: u32,
    pub position: u16,
    pub index: u16,
}

/// Multimap from the bit pattern of every encoded value to where it occurs.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingLut {
    keys: Vec<u32>,
    entries: Vec<LutEntry>,
    pub max_pos: usize,
}

impl EmbeddingLut {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn distinct_keys(&self) -> usize {
        self.keys.chunk_by(|a, b| a == b).count()
    }

    /// Entries for one bit pattern, ordered by token, position, index.
    pub fn get(&self, bits: u32) -> &[LutEntry] {
        let lo = self.keys.partition_point(|k| *k < bits);
        let hi = lo + self.keys[lo..].partition_point(|k| *k == bits);
        &self.entries[lo..hi]
    }
}

/// Encodes every token at positions `0..max_pos` and indexes each value.
pub fn build_lut(tables: &EmbeddingTables, max_pos: usize) -> Result<EmbeddingLut, LlmError> {
    if max_pos > tables.positions {
        return Err(LlmError::MaxPos { max_pos, positions: tables.positions });
    }
    let mut pairs: Vec<(u32, LutEntry)> = (0..tables.vocab)
        .into_par_iter()
        .flat_map_iter(|t| {
            (0..max_pos).flat_map(move |p| {
                tables.encode(t, p).into_iter().enumerate().map(move |(i, v)| {
                    (v.to_bits(), LutEntry { token: t as u32, position: p as u16, index: i as u16 })
                })
            })
        })
        .collect();
    pairs.par_sort_unstable();
    let (keys, entries) = pairs.into_iter().unzip();
    Ok(EmbeddingLut { keys, entries, max_pos })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReconstructedToken {
    pub chunk_offset: usize,
    pub token: u32,
    pub position: u16,
}

/// Chunks start every `stride` values; 16 keeps chunks disjoint, 1 also finds
/// misaligned leaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanOptions {
    pub stride: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { stride: CHUNK }
    }
}

/// Accepts a chunk for the first `(token, position)` that explains all 16
/// values with strictly ascending indices in its vector.
pub fn reconstruct(leak: &[f32], lut: &EmbeddingLut, opts: ScanOptions) -> Vec<ReconstructedToken> {
    let stride = opts.stride.max(1);
    if leak.len() < CHUNK {
        return Vec::new();
    }
    let offsets: Vec<usize> = (0..=leak.len() - CHUNK).step_by(stride).collect();
    offsets
        .into_par_iter()
        .filter_map(|off| match_chunk(&leak[off..off + CHUNK], lut).map(|(token, position)| ReconstructedToken {
            chunk_offset: off,
            token,
            position,
        }))
        .collect()
}

fn match_chunk(chunk: &[f32], lut: &EmbeddingLut) -> Option<(u32, u16)> {
    let hits: Vec<&[LutEntry]> = chunk.iter().map(|v| lut.get(v.to_bits())).collect();
    if hits.iter().any(|h| h.is_empty()) {
        return None;
    }
    let mut candidates: Vec<(u32, u16)> = hits[0].iter().map(|e| (e.token, e.position)).collect();
    candidates.dedup();
    candidates.into_iter().find(|&(t, p)| {
        let mut last: Option<u16> = None;
        hits.iter().all(|h| {
            let next = h
                .iter()
                .filter(|e| e.token == t && e.position == p && last.is_none_or(|l| e.index > l))
                .map(|e| e.index)
                .min();
            last = next;
            next.is_some()
        })
    })
}

/// `(token, position)` pairs in scan order, each once.
pub fn distinct_tokens(found: &[ReconstructedToken]) -> Vec<(u32, u16)> {
    let mut seen = std::collections::BTreeSet::new();
    found.iter().map(|r| (r.token, r.position)).filter(|k| seen.insert(*k)).collect()
}

pub fn tokens_csv(found: &[ReconstructedToken]) -> String {
    let mut out = String::from(TOKENS_CSV_HEADER);
    out.push('\n');
    for r in found {
        out.push_str(&format!("{},{},{}\n", r.chunk_offset, r.token, r.position));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_lut_enumerates_every_value() {
        let tables = EmbeddingTables {
            vocab: 2,
            dim: 2,
            positions: 1,
            token: vec![1.0, 2.0, 3.0, 4.0],
            position: vec![0.5, 0.25],
        };
        let lut = build_lut(&tables, 1).unwrap();
        assert_eq!(lut.len(), 4);
        assert_eq!(lut.distinct_keys(), 4);
        assert_eq!(lut.get(2.25f32.to_bits()), &[LutEntry { token: 0, position: 0, index: 1 }]);
        assert!(lut.get(9.0f32.to_bits()).is_empty());
        assert!(matches!(build_lut(&tables, 2), Err(LlmError::MaxPos { .. })));
    }

    #[test]
    fn tables_file_round_trips() {
        let t = EmbeddingTables::seeded(5, 16, 3, 1);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 4 * (5 + 3) * 16);
        assert_eq!(EmbeddingTables::read_from(&buf[..]).unwrap(), t);
        assert!(EmbeddingTables::read_from(&buf[..20]).is_err());
    }
}
