//! Deterministic simulator of GPU cores, SIMD units and register files.
//!
//! Thread groups go to cores round-robin by group index. On each core, the
//! waves of a dispatch fill SIMD units in order. A wave allocation resets the
//! per-cell written bits but, depending on [`Lifecycle`], not the cells
//! themselves; reads of cells the current shader has not written are logged
//! as [`LeakRecord`]s.

mod config;
mod exec;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::isa::{Program, RegisterRef};

pub use config::{GpuConfig, HalfWaveOrder, Lifecycle, Profile, RemapPolicy, MAX_GROUP_SIZE};
pub use exec::{apply_remap, ColocatedReport, ColocationOrder, CoPlacement, DispatchReport, Simulator, Wave, WavePlacement};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown profile `{0}` (valid profiles: adreno, agx, nvidia)")]
    UnknownProfile(String),
    #[error("invalid dispatch: {0}")]
    InvalidDispatch(String),
    #[error("buffer slot b{0} is not bound")]
    UnboundBuffer(u8),
    #[error("buffer {0:?} does not exist")]
    UnknownBuffer(BufferId),
    #[error("register {reg} (cell {slot}) out of range for {limit} cells per thread")]
    RegisterOutOfRange { reg: RegisterRef, slot: usize, limit: usize },
    #[error("out-of-bounds access to buffer {buffer:?} at word {word} (len {len})")]
    OutOfBounds { buffer: BufferId, word: u64, len: usize },
}

/// Handle to a zero-initialized global buffer of 32-bit words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub u32);

/// Native kernels run a whole wave at a time through the same register and
/// memory paths as interpreted programs.
pub trait WaveKernel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn run(&self, wave: &mut Wave<'_>) -> Result<(), SimError>;
}

#[derive(Debug, Clone)]
pub enum Kernel {
    Program(Arc<Program>),
    Native(Arc<dyn WaveKernel>),
}

impl Kernel {
    pub fn native(k: impl WaveKernel + 'static) -> Self {
        Kernel::Native(Arc::new(k))
    }

    pub fn name(&self) -> &str {
        match self {
            Kernel::Program(p) => &p.name,
            Kernel::Native(k) => k.name(),
        }
    }
}

impl From<Program> for Kernel {
    fn from(p: Program) -> Self {
        Kernel::Program(Arc::new(p))
    }
}

#[derive(Debug, Clone)]
pub struct Dispatch {
    /// One kernel for every group, or one per group.
    pub kernels: Vec<Kernel>,
    pub group_count: usize,
    pub group_size: usize,
    /// Buffer bound to slot `bN` is `bindings[N]`.
    pub bindings: Vec<BufferId>,
}

impl Dispatch {
    pub fn new(kernel: impl Into<Kernel>, group_count: usize, group_size: usize) -> Self {
        Dispatch { kernels: vec![kernel.into()], group_count, group_size, bindings: Vec::new() }
    }

    /// A dispatch where group `g` runs `kernels[g]`.
    pub fn per_group(kernels: Vec<Kernel>, group_size: usize) -> Self {
        Dispatch { group_count: kernels.len(), kernels, group_size, bindings: Vec::new() }
    }

    pub fn bind(mut self, buffers: impl IntoIterator<Item = BufferId>) -> Self {
        self.bindings = buffers.into_iter().collect();
        self
    }

    pub fn kernel_for(&self, group: usize) -> &Kernel {
        if self.kernels.len() == 1 {
            &self.kernels[0]
        } else {
            &self.kernels[group]
        }
    }

    pub fn waves_per_group(&self, wave_width: usize) -> usize {
        self.group_size.div_ceil(wave_width)
    }

    pub fn thread_count(&self) -> usize {
        self.group_count * self.group_size
    }
}

/// One stale register value observed by a reading shader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LeakRecord {
    pub dispatch_id: u64,
    pub core: usize,
    pub simd: usize,
    pub wave_index: usize,
    pub lane: usize,
    pub arch_register: RegisterRef,
    pub value: u32,
    pub was_uninitialized: bool,
}

pub const LEAK_CSV_HEADER: &str = "dispatch,core,simd,wave,lane,reg,value_hex,uninit";

pub fn leaks_to_csv(records: &[LeakRecord]) -> String {
    let mut out = String::with_capacity(32 * (records.len() + 1));
    out.push_str(LEAK_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:08x},{}\n",
            r.dispatch_id,
            r.core,
            r.simd,
            r.wave_index,
            r.lane,
            r.arch_register,
            r.value,
            u8::from(r.was_uninitialized)
        ));
    }
    out
}

/// Little-endian byte view of a word buffer.
pub fn words_to_bytes(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}
