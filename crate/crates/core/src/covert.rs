//! Register-file covert channel.
//!
//! A sender shader leaves one frame in registers (or, on the store-residue
//! model, in the last coalesced store) and exits. A receiver shader on the same
//! SIMD unit reads it back. Every frame starts with one header word packing a
//! 16-bit magic and a 16-bit counter.
//!
//! The magic also marks the final frame, so the receiver learns the message
//! length in-band: [`MAGIC_LAST`] for a full final frame, and
//! [`MAGIC_LAST_PADDED`] for one padded with `0x80` followed by zeros.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::isa::{Address, Instruction, IsaError, Program, RegisterRef};
use crate::sim::{Dispatch, GpuConfig, Kernel, Profile, SimError, Simulator, Wave, WaveKernel};

pub const MAGIC: u16 = 0xC0DE;
pub const MAGIC_LAST: u16 = 0xC0DF;
pub const MAGIC_LAST_PADDED: u16 = 0xC0E0;
/// The 16-bit counter bounds a message to this many frames.
pub const MAX_FRAMES: usize = 1 << 16;
/// Words per frame in register-window mode: header plus 31 payload words.
pub const WINDOW_WORDS: usize = 32;
/// Words per frame in store-residue mode: one half-wave beat.
pub const RESIDUE_WORDS: usize = 16;
/// Threads per sender and receiver group: one wave.
pub const GROUP_SIZE: usize = 32;

pub const SWEEP_CSV_HEADER: &str = "sender_groups,receiver_groups,bytes_per_dispatch,loss_rate";
pub const DEFAULT_GRID: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Debug, Error)]
pub enum CovertError {
    #[error("message is empty")]
    EmptyMessage,
    #[error("message of {len} bytes needs more than {MAX_FRAMES} frames of {capacity} bytes")]
    MessageTooLong { len: usize, capacity: usize },
    #[error("register window {base}..{end} exceeds {limit} cells per thread")]
    WindowOutOfRange { base: usize, end: usize, limit: usize },
    #[error("group counts must be positive")]
    EmptyGrid,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Isa(#[from] IsaError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub magic: u16,
    pub counter: u16,
    pub payload: Vec<u32>,
}

impl Frame {
    pub fn header(&self) -> u32 {
        (u32::from(self.magic) << 16) | u32::from(self.counter)
    }

    pub fn is_last(&self) -> bool {
        self.magic != MAGIC
    }

    /// Header followed by the payload.
    pub fn words(&self) -> Vec<u32> {
        let mut w = Vec::with_capacity(self.payload.len() + 1);
        w.push(self.header());
        w.extend_from_slice(&self.payload);
        w
    }

    pub fn capacity(&self) -> usize {
        self.payload.len() * 4
    }

    /// Message bytes carried by this frame, or `None` if the padding is malformed.
    pub fn data(&self) -> Option<Vec<u8>> {
        let mut bytes: Vec<u8> = self.payload.iter().flat_map(|w| w.to_le_bytes()).collect();
        if self.magic == MAGIC_LAST_PADDED {
            let end = bytes.iter().rposition(|b| *b != 0)?;
            if bytes[end] != 0x80 {
                return None;
            }
            bytes.truncate(end);
        }
        Some(bytes)
    }

    fn parse(words: &[u32]) -> Option<Frame> {
        let (&header, payload) = words.split_first()?;
        let magic = (header >> 16) as u16;
        is_magic(header).then(|| Frame { magic, counter: header as u16, payload: payload.to_vec() })
    }
}

fn is_magic(word: u32) -> bool {
    matches!((word >> 16) as u16, MAGIC | MAGIC_LAST | MAGIC_LAST_PADDED)
}

/// Splits `message` into frames carrying `payload_words` words each.
pub fn encode(message: &[u8], payload_words: usize) -> Result<Vec<Frame>, CovertError> {
    if message.is_empty() {
        return Err(CovertError::EmptyMessage);
    }
    let capacity = payload_words * 4;
    let count = message.len().div_ceil(capacity);
    if count > MAX_FRAMES {
        return Err(CovertError::MessageTooLong { len: message.len(), capacity });
    }
    let frames = message
        .chunks(capacity)
        .enumerate()
        .map(|(i, chunk)| {
            let mut bytes = chunk.to_vec();
            let magic = if i + 1 < count {
                MAGIC
            } else if bytes.len() == capacity {
                MAGIC_LAST
            } else {
                bytes.push(0x80);
                bytes.resize(capacity, 0);
                MAGIC_LAST_PADDED
            };
            let payload = bytes.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Frame { magic, counter: i as u16, payload }
        })
        .collect();
    Ok(frames)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub frames_sent: usize,
    pub frames_received: usize,
    pub duplicates: usize,
    pub losses: usize,
    pub payload_bytes_delivered: usize,
    /// Passes over the SIMD units: a dispatch of `n` single-wave groups takes `ceil(n / units)`.
    pub simulated_dispatch_count: usize,
}

impl ChannelStats {
    pub fn bytes_per_dispatch(&self) -> f64 {
        if self.simulated_dispatch_count == 0 {
            0.0
        } else {
            self.payload_bytes_delivered as f64 / self.simulated_dispatch_count as f64
        }
    }

    pub fn loss_rate(&self) -> f64 {
        if self.frames_sent == 0 {
            0.0
        } else {
            self.losses as f64 / self.frames_sent as f64
        }
    }
}

/// Collects frames in any order and with repeats.
#[derive(Debug, Clone, Default)]
pub struct Reassembler {
    frames: BTreeMap<u16, Frame>,
    received: usize,
    duplicates: usize,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first copy of each counter wins.
    pub fn push(&mut self, frame: Frame) {
        self.received += 1;
        if let std::collections::btree_map::Entry::Vacant(e) = self.frames.entry(frame.counter) {
            e.insert(frame);
        } else {
            self.duplicates += 1;
        }
    }

    pub fn unique(&self) -> usize {
        self.frames.len()
    }

    /// Reassembles in counter order. Frames past the final frame or with bad
    /// padding are dropped; counters never seen below the end count as losses.
    /// When `frames_sent` is unknown it is inferred from the final frame or the
    /// highest counter.
    pub fn finish(mut self, frames_sent: Option<usize>) -> (Vec<u8>, ChannelStats) {
        if let Some(last) = self.frames.values().find(|f| f.is_last()).map(|f| f.counter) {
            self.frames.retain(|c, _| *c <= last);
        }
        let sent = frames_sent.unwrap_or_else(|| {
            let last = self.frames.values().find(|f| f.is_last()).map(|f| f.counter);
            last.or(self.frames.keys().next_back().copied()).map_or(0, |c| c as usize + 1)
        });
        let mut message = Vec::new();
        let mut good = 0;
        for f in self.frames.values() {
            if let Some(bytes) = f.data() {
                message.extend_from_slice(&bytes);
                good += 1;
            }
        }
        let stats = ChannelStats {
            frames_sent: sent,
            frames_received: self.received,
            duplicates: self.duplicates,
            losses: sent.saturating_sub(good),
            payload_bytes_delivered: message.len(),
            simulated_dispatch_count: 0,
        };
        (message, stats)
    }
}

/// Where a frame lives between sender and receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// Frame left in 32 registers starting at cell `base`.
    RegisterWindow { base: usize },
    /// Frame left as the residue of a coalesced 16-word vector store.
    StoreResidue,
}

#[derive(Debug, Clone)]
pub struct Channel {
    cfg: GpuConfig,
    mode: ChannelMode,
}

impl Channel {
    /// Vendor default: the top 32 register cells on Adreno and AGX, the store
    /// residue on NVIDIA.
    pub fn for_profile(profile: Profile) -> Self {
        Self::with_config(profile, profile.config())
    }

    /// Same channel layout as [`for_profile`](Self::for_profile) on a modified config.
    pub fn with_config(profile: Profile, cfg: GpuConfig) -> Self {
        let mode = match profile {
            Profile::Nvidia => ChannelMode::StoreResidue,
            Profile::Adreno | Profile::Agx => {
                ChannelMode::RegisterWindow { base: cfg.regs_per_thread.saturating_sub(WINDOW_WORDS) }
            }
        };
        Channel { cfg, mode }
    }

    pub fn new(cfg: GpuConfig, mode: ChannelMode) -> Result<Self, CovertError> {
        let ch = Channel { cfg, mode };
        ch.check_window()?;
        Ok(ch)
    }

    pub fn config(&self) -> &GpuConfig {
        &self.cfg
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn payload_words(&self) -> usize {
        match self.mode {
            ChannelMode::RegisterWindow { .. } => WINDOW_WORDS - 1,
            ChannelMode::StoreResidue => RESIDUE_WORDS - 1,
        }
    }

    pub fn capacity(&self) -> usize {
        self.payload_words() * 4
    }

    pub fn encode(&self, message: &[u8]) -> Result<Vec<Frame>, CovertError> {
        encode(message, self.payload_words())
    }

    fn check_window(&self) -> Result<(), CovertError> {
        if let ChannelMode::RegisterWindow { base } = self.mode {
            let end = base + WINDOW_WORDS;
            if end > self.cfg.regs_per_thread {
                return Err(CovertError::WindowOutOfRange { base, end, limit: self.cfg.regs_per_thread });
            }
        }
        Ok(())
    }

    fn reg(&self, slot: usize) -> RegisterRef {
        RegisterRef::from_slot(slot, self.cfg.register_model)
    }

    /// Words of sender scratch memory per sender group (store-residue mode only).
    pub fn sender_words_per_group(&self) -> usize {
        match self.mode {
            ChannelMode::RegisterWindow { .. } => 0,
            ChannelMode::StoreResidue => GROUP_SIZE * RESIDUE_WORDS,
        }
    }

    /// Words of output per receiver thread.
    pub fn receiver_words_per_thread(&self) -> usize {
        match self.mode {
            ChannelMode::RegisterWindow { .. } => self.cfg.regs_per_thread,
            ChannelMode::StoreResidue => 1,
        }
    }

    pub fn sender_kernel(&self, frame: &Frame) -> Result<Program, CovertError> {
        self.check_window()?;
        let words = frame.words();
        let mut code = Vec::with_capacity(words.len() + 2);
        match self.mode {
            ChannelMode::RegisterWindow { base } => {
                code.extend(words.iter().enumerate().map(|(i, w)| Instruction::mov_imm(self.reg(base + i), *w)));
            }
            ChannelMode::StoreResidue => {
                let regs: Vec<RegisterRef> = (0..words.len()).map(|i| self.reg(i)).collect();
                code.extend(regs.iter().zip(&words).map(|(r, w)| Instruction::mov_imm(*r, *w)));
                code.push(Instruction::store(Address::per_thread(0), regs));
            }
        }
        code.push(Instruction::exit());
        Ok(Program::new(format!("covert_send_{}", frame.counter), code)?)
    }

    /// Register-window receivers dump every register cell, then zero them so a
    /// frame is read at most once. The store-residue receiver reads one
    /// unwritten register.
    pub fn receiver_kernel(&self) -> Program {
        let mut code = Vec::new();
        match self.mode {
            ChannelMode::RegisterWindow { .. } => {
                let regs: Vec<RegisterRef> = (0..self.cfg.regs_per_thread).map(|i| self.reg(i)).collect();
                code.push(Instruction::store(Address::per_thread(0), regs.iter().copied()));
                code.extend(regs.into_iter().map(|r| Instruction::mov_imm(r, 0)));
            }
            ChannelMode::StoreResidue => {
                code.push(Instruction::store(Address::per_thread(0), [self.reg(8)]));
            }
        }
        code.push(Instruction::exit());
        Program::new("covert_recv", code).expect("receiver kernel is well formed")
    }

    /// Frames found in a receiver output buffer, at most one per wave.
    ///
    /// A word counts only when a majority of the wave's copies, and at least
    /// two, agree on it; per-lane noise therefore never forms a frame. In a
    /// register dump, a header candidate that falls inside the payload of
    /// another candidate is payload data, not a header.
    pub fn scan(&self, dump: &[u32]) -> Vec<Frame> {
        match self.mode {
            ChannelMode::RegisterWindow { .. } => {
                let regs = self.cfg.regs_per_thread;
                dump.chunks(GROUP_SIZE * regs).filter_map(|wave| self.scan_window(wave, regs)).collect()
            }
            ChannelMode::StoreResidue => dump
                .chunks(GROUP_SIZE)
                .filter_map(|wave| {
                    let copies: Vec<&[u32]> = wave.chunks_exact(RESIDUE_WORDS).collect();
                    let words = consensus(&copies, RESIDUE_WORDS)?;
                    Frame::parse(&words.into_iter().collect::<Option<Vec<u32>>>()?)
                })
                .collect(),
        }
    }

    fn scan_window(&self, wave: &[u32], regs: usize) -> Option<Frame> {
        let lanes: Vec<&[u32]> = wave.chunks_exact(regs).collect();
        let words = consensus(&lanes, regs)?;
        let span = WINDOW_WORDS - 1;
        let candidates: Vec<usize> = (0..regs).filter(|&i| words[i].is_some_and(is_magic)).collect();
        let head = candidates.iter().copied().find(|&p| {
            !candidates.iter().any(|&q| q != p && (p + regs - q) % regs <= span)
        })?;
        let frame: Option<Vec<u32>> = (0..WINDOW_WORDS).map(|k| words[(head + k) % regs]).collect();
        Frame::parse(&frame?)
    }

    /// Sends `message` over a fresh simulator and reads it back.
    pub fn transmit(&self, message: &[u8], opts: &TransmitOptions) -> Result<(Vec<u8>, ChannelStats), CovertError> {
        let frames = self.encode(message)?;
        let mut sim = Simulator::new(self.cfg.clone())?;
        sim.set_record_leaks(false);
        self.run(&mut sim, &frames, opts)
    }

    /// Rounds of one sender dispatch (`sender_groups` frames, one per group)
    /// followed by one receiver dispatch. Frames are not retransmitted.
    pub fn run(
        &self,
        sim: &mut Simulator,
        frames: &[Frame],
        opts: &TransmitOptions,
    ) -> Result<(Vec<u8>, ChannelStats), CovertError> {
        if opts.sender_groups == 0 || opts.receiver_groups == 0 {
            return Err(CovertError::EmptyGrid);
        }
        let units = self.cfg.simd_count();
        let passes = |groups: usize| groups.div_ceil(units);
        let recv = self.receiver_kernel();
        let recv_buf = sim.create_buffer(opts.receiver_groups * GROUP_SIZE * self.receiver_words_per_thread());
        let send_buf = sim.create_buffer(opts.sender_groups * self.sender_words_per_group());
        let mut junk_rng = opts.junk_seed.map(ChaCha8Rng::seed_from_u64);
        let mut reasm = Reassembler::new();
        let mut dispatches = 0;
        for batch in frames.chunks(opts.sender_groups) {
            if let Some(rng) = junk_rng.as_mut() {
                let groups = rng.gen_range(1..=2 * units);
                let junk = JunkKernel { seed: rng.next_u64(), registers: self.cfg.regs_per_thread / 2 };
                let junk_buf = sim.create_buffer(groups * GROUP_SIZE);
                sim.dispatch(&Dispatch::new(Kernel::native(junk), groups, GROUP_SIZE).bind([junk_buf]))?;
            }
            let kernels = batch
                .iter()
                .map(|f| self.sender_kernel(f).map(Kernel::from))
                .collect::<Result<Vec<_>, _>>()?;
            let mut send = Dispatch::per_group(kernels, GROUP_SIZE);
            if matches!(self.mode, ChannelMode::StoreResidue) {
                send = send.bind([send_buf]);
            }
            sim.dispatch(&send)?;
            sim.dispatch(&Dispatch::new(recv.clone(), opts.receiver_groups, GROUP_SIZE).bind([recv_buf]))?;
            dispatches += passes(batch.len()) + passes(opts.receiver_groups);
            for f in self.scan(sim.read_words(recv_buf)?) {
                reasm.push(f);
            }
        }
        let (message, mut stats) = reasm.finish(Some(frames.len()));
        stats.simulated_dispatch_count = dispatches;
        Ok((message, stats))
    }
}

/// Per-lane majority over equally long copies; `None` where fewer than two agree.
fn consensus(copies: &[&[u32]], len: usize) -> Option<Vec<Option<u32>>> {
    if copies.len() < 2 {
        return None;
    }
    let out = (0..len)
        .map(|i| {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for c in copies {
                *counts.entry(c[i]).or_default() += 1;
            }
            let (v, n) = counts.into_iter().max_by_key(|(v, n)| (*n, std::cmp::Reverse(*v)))?;
            (n >= 2 && 2 * n > copies.len()).then_some(v)
        })
        .collect();
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransmitOptions {
    pub sender_groups: usize,
    pub receiver_groups: usize,
    /// Seed for junk dispatches injected before every sender dispatch.
    pub junk_seed: Option<u64>,
}

impl TransmitOptions {
    /// One sender and one receiver group per SIMD unit.
    pub fn matched(cfg: &GpuConfig) -> Self {
        TransmitOptions { sender_groups: cfg.simd_count(), receiver_groups: cfg.simd_count(), junk_seed: None }
    }
}

/// Unrelated workload: writes per-lane random values, some of them shaped
/// like frame headers, into the low half of the register file, then makes a
/// coalesced store of random data.
#[derive(Debug, Clone)]
pub struct JunkKernel {
    pub seed: u64,
    pub registers: usize,
}

impl WaveKernel for JunkKernel {
    fn name(&self) -> &str {
        "junk"
    }

    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError> {
        let p = wave.placement();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((p.group as u64) << 20 | p.wave_in_group as u64));
        let model = wave.config().register_model;
        let lanes = wave.lanes();
        for slot in 0..self.registers.min(wave.config().regs_per_thread) {
            let values: Vec<u32> = (0..lanes)
                .map(|_| if rng.gen_bool(0.1) { (u32::from(MAGIC) << 16) | rng.gen::<u16>() as u32 } else { rng.gen() })
                .collect();
            wave.write(RegisterRef::from_slot(slot, model), &values)?;
        }
        let bases: Vec<u64> = (0..lanes).map(|l| u64::from(wave.thread_id(l))).collect();
        let values: Vec<u32> = (0..lanes).map(|_| rng.gen()).collect();
        wave.store(0, &bases, 1, &values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub sender_groups: usize,
    pub receiver_groups: usize,
    pub stats: ChannelStats,
}

/// Sends the same seeded message of `max(grid)` frames for every
/// sender × receiver pair, each on a fresh simulator.
pub fn sweep(channel: &Channel, grid: &[usize], seed: u64) -> Result<Vec<SweepCell>, CovertError> {
    if grid.is_empty() || grid.contains(&0) {
        return Err(CovertError::EmptyGrid);
    }
    let frames = *grid.iter().max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut message = vec![0u8; frames * channel.capacity()];
    rng.fill_bytes(&mut message);
    let cells: Vec<(usize, usize)> = grid.iter().flat_map(|&s| grid.iter().map(move |&r| (s, r))).collect();
    cells
        .into_par_iter()
        .map(|(s, r)| {
            let opts = TransmitOptions { sender_groups: s, receiver_groups: r, junk_seed: None };
            let (_, stats) = channel.transmit(&message, &opts)?;
            Ok(SweepCell { sender_groups: s, receiver_groups: r, stats })
        })
        .collect()
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{:.3},{:.6}\n",
            c.sender_groups,
            c.receiver_groups,
            c.stats.bytes_per_dispatch(),
            c.stats.loss_rate()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{Component, Opcode};

    #[test]
    fn frame_counts_follow_capacity() {
        assert_eq!(encode(&[7; 124], 31).unwrap().len(), 1);
        assert_eq!(encode(&[7; 125], 31).unwrap().len(), 2);
        let f = encode(&[7; 61], 15).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[1].data().unwrap(), vec![7]);
        assert!(matches!(encode(&[], 31), Err(CovertError::EmptyMessage)));
        assert!(matches!(encode(&vec![0; MAX_FRAMES * 4 + 1], 1), Err(CovertError::MessageTooLong { .. })));
    }

    #[test]
    fn header_packs_magic_over_counter() {
        let f = &encode(&[1; 300], 31).unwrap()[2];
        assert_eq!(f.header(), 0xC0E0_0002);
    }

    #[test]
    fn sender_kernel_shapes() {
        let frame = &encode(b"hello", 31).unwrap()[0];
        let agx = Channel::for_profile(Profile::Agx).sender_kernel(frame).unwrap();
        assert_eq!(agx.instructions.len(), 33);
        assert!(agx.instructions[..32].iter().all(|i| i.opcode == Opcode::MovImm));
        assert_eq!(agx.instructions[0].dst, Some(RegisterRef::r(96)));

        let adreno = Channel::for_profile(Profile::Adreno).sender_kernel(frame).unwrap();
        assert_eq!(adreno.instructions[0].dst, Some(RegisterRef::quad(56, Component::X)));
        assert_eq!(adreno.instructions[31].dst, Some(RegisterRef::quad(63, Component::W)));

        let nv_frame = &encode(b"hello", 15).unwrap()[0];
        let nv = Channel::for_profile(Profile::Nvidia).sender_kernel(nv_frame).unwrap();
        let ops: Vec<Opcode> = nv.instructions.iter().map(|i| i.opcode).collect();
        assert_eq!(ops[..16], [Opcode::MovImm; 16]);
        assert_eq!(ops[16..], [Opcode::StoreGlobal, Opcode::Exit]);
        assert_eq!(nv.instructions[16].srcs.len(), 16);
    }

    #[test]
    fn window_past_the_file_is_rejected() {
        let cfg = Profile::Adreno.config();
        let err = Channel::new(cfg, ChannelMode::RegisterWindow { base: 240 }).unwrap_err();
        assert!(matches!(err, CovertError::WindowOutOfRange { base: 240, end: 272, limit: 256 }));
    }

    #[test]
    fn reassembly_is_idempotent_and_reports_gaps() {
        let frames = encode(&(0..=255u8).cycle().take(1000).collect::<Vec<_>>(), 31).unwrap();
        let mut r = Reassembler::new();
        for f in frames.iter().rev().chain(&frames) {
            r.push(f.clone());
        }
        let (msg, stats) = r.finish(None);
        assert_eq!(msg.len(), 1000);
        assert_eq!((stats.duplicates, stats.losses, stats.frames_sent), (frames.len(), 0, frames.len()));

        let mut r = Reassembler::new();
        for f in frames.iter().filter(|f| f.counter != 3) {
            r.push(f.clone());
        }
        assert_eq!(r.finish(None).1.losses, 1);
    }

    #[test]
    fn consensus_needs_two_agreeing_copies() {
        let a = [1, 2, 3];
        let b = [1, 5, 3];
        let c = [1, 6, 4];
        assert_eq!(consensus(&[&a], 3), None);
        assert_eq!(consensus(&[&a, &b, &c], 3).unwrap(), vec![Some(1), None, Some(3)]);
    }
}
