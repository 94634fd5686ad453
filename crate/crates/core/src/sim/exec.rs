use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::isa::{Opcode, Operand, Program, RegisterRef, Special};

use super::{BufferId, Dispatch, GpuConfig, HalfWaveOrder, Kernel, LeakRecord, Lifecycle, RemapPolicy, SimError};
use super::config::MAX_GROUP_SIZE;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Physical cell backing an architectural register for one dispatch.
///
/// `SeededPermutation` rotates the whole per-thread file by an offset drawn
/// from `(seed, dispatch_id)`: a bijection that moves every register between
/// dispatches while keeping a shader's window cyclically contiguous.
pub fn apply_remap(cfg: &GpuConfig, dispatch_id: u64, reg: RegisterRef) -> Option<usize> {
    let slot = reg.slot()?;
    Some((slot + remap_offset(cfg, dispatch_id)) % cfg.regs_per_thread)
}

fn remap_offset(cfg: &GpuConfig, dispatch_id: u64) -> usize {
    match cfg.remap {
        RemapPolicy::Identity => 0,
        RemapPolicy::SeededPermutation => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ dispatch_id.wrapping_add(1).wrapping_mul(GOLDEN));
            rng.gen_range(0..cfg.regs_per_thread)
        }
    }
}

#[derive(Debug, Clone)]
struct SimdUnit {
    cells: Vec<u32>,
    written: Vec<bool>,
    residue: Vec<u32>,
}

/// Order in which co-located victim waves (each followed by one attacker wave) run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ColocationOrder {
    #[default]
    InOrder,
    /// Groups retire in a seeded random order; waves within a group stay in order.
    ShuffleGroups,
    /// Every wave retires in a seeded random order.
    ShuffleWaves,
}

/// Where one wave of a dispatch ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WavePlacement {
    pub group: usize,
    pub wave_in_group: usize,
    pub core: usize,
    pub simd: usize,
}

#[derive(Debug, Clone)]
pub struct DispatchReport {
    pub dispatch_id: u64,
    pub placements: Vec<WavePlacement>,
    pub leaks: Vec<LeakRecord>,
    /// Final contents of every bound buffer, in slot order.
    pub buffers: Vec<(BufferId, Vec<u32>)>,
}

/// One attacker wave and the victim wave it ran directly after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoPlacement {
    pub attacker_wave: usize,
    /// Index into the victim list passed to [`Simulator::dispatch_colocated`].
    pub victim: usize,
    pub victim_dispatch_id: u64,
    pub victim_group: usize,
    pub victim_wave: usize,
    pub core: usize,
    pub simd: usize,
}

#[derive(Debug, Clone)]
pub struct ColocatedReport {
    pub victim_ids: Vec<u64>,
    pub attacker_id: u64,
    pub pairs: Vec<CoPlacement>,
    pub leaks: Vec<LeakRecord>,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: GpuConfig,
    simds: Vec<SimdUnit>,
    buffers: Vec<Vec<u32>>,
    next_dispatch: u64,
    record_leaks: bool,
}

impl Simulator {
    pub fn new(cfg: GpuConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let cells = cfg.wave_width * cfg.regs_per_thread;
        let unit = SimdUnit { cells: vec![0; cells], written: vec![false; cells], residue: vec![0; cfg.half_wave()] };
        Ok(Simulator { simds: vec![unit; cfg.simd_count()], cfg, buffers: Vec::new(), next_dispatch: 0, record_leaks: true })
    }

    pub fn config(&self) -> &GpuConfig {
        &self.cfg
    }

    /// Disables leak logging for long-running harnesses that only read buffers.
    pub fn set_record_leaks(&mut self, on: bool) {
        self.record_leaks = on;
    }

    pub fn create_buffer(&mut self, words: usize) -> BufferId {
        self.buffers.push(vec![0; words]);
        BufferId(self.buffers.len() as u32 - 1)
    }

    pub fn buffer_from(&mut self, words: &[u32]) -> BufferId {
        self.buffers.push(words.to_vec());
        BufferId(self.buffers.len() as u32 - 1)
    }

    pub fn write_buffer(&mut self, id: BufferId, words: &[u32]) -> Result<(), SimError> {
        let buf = self.buffers.get_mut(id.0 as usize).ok_or(SimError::UnknownBuffer(id))?;
        if words.len() > buf.len() {
            return Err(SimError::OutOfBounds { buffer: id, word: words.len() as u64, len: buf.len() });
        }
        buf[..words.len()].copy_from_slice(words);
        Ok(())
    }

    pub fn read_words(&self, id: BufferId) -> Result<&[u32], SimError> {
        self.buffers.get(id.0 as usize).map(Vec::as_slice).ok_or(SimError::UnknownBuffer(id))
    }

    /// Final buffer contents as little-endian bytes.
    pub fn read_buffer(&self, id: BufferId) -> Result<Vec<u8>, SimError> {
        self.read_words(id).map(super::words_to_bytes)
    }

    fn validate(&self, d: &Dispatch) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidDispatch(m));
        if d.group_count == 0 || d.group_size == 0 {
            return bad("group_count and group_size must be positive".into());
        }
        if d.group_size > MAX_GROUP_SIZE {
            return bad(format!("group size {} exceeds {MAX_GROUP_SIZE}", d.group_size));
        }
        if d.kernels.is_empty() || (d.kernels.len() != 1 && d.kernels.len() != d.group_count) {
            return bad("need one kernel, or one per group".into());
        }
        for id in &d.bindings {
            if id.0 as usize >= self.buffers.len() {
                return Err(SimError::UnknownBuffer(*id));
            }
        }
        for k in &d.kernels {
            let Kernel::Program(p) = k else { continue };
            p.validate().map_err(|e| SimError::InvalidDispatch(format!("{}: {e}", p.name)))?;
            if let Some(model) = p.register_model().ok().flatten() {
                if model != self.cfg.register_model {
                    return bad(format!("{}: register model {model:?} does not match config", p.name));
                }
            }
            if p.declared_registers > self.cfg.regs_per_thread {
                return bad(format!(
                    "{}: declares {} registers, config allows {}",
                    p.name, p.declared_registers, self.cfg.regs_per_thread
                ));
            }
            if let Some(slot) = p.buffer_slots().into_iter().find(|s| *s as usize >= d.bindings.len()) {
                return Err(SimError::UnboundBuffer(slot));
            }
        }
        Ok(())
    }

    /// Deterministic core/SIMD placement of every wave, in group-index order.
    fn placements(&self, d: &Dispatch) -> Vec<WavePlacement> {
        let wpg = d.waves_per_group(self.cfg.wave_width);
        let mut per_core = vec![0usize; self.cfg.num_cores];
        let mut out = Vec::with_capacity(d.group_count * wpg);
        for group in 0..d.group_count {
            let core = group % self.cfg.num_cores;
            for wave_in_group in 0..wpg {
                let simd = per_core[core] % self.cfg.simd_per_core;
                per_core[core] += 1;
                out.push(WavePlacement { group, wave_in_group, core, simd });
            }
        }
        out
    }

    fn simd_index(&self, core: usize, simd: usize) -> usize {
        core * self.cfg.simd_per_core + simd
    }

    fn run_wave(
        &mut self,
        d: &Dispatch,
        dispatch_id: u64,
        wave_index: usize,
        place: WavePlacement,
        leaks: &mut Vec<LeakRecord>,
    ) -> Result<(), SimError> {
        let ww = self.cfg.wave_width;
        let first_local = place.wave_in_group * ww;
        let lanes = ww.min(d.group_size - first_local);
        let unit_idx = self.simd_index(place.core, place.simd);
        let offset = remap_offset(&self.cfg, dispatch_id);
        let unit = &mut self.simds[unit_idx];
        unit.written.fill(false);
        if self.cfg.lifecycle == Lifecycle::ZeroOnAlloc {
            unit.cells.fill(0);
        }
        let mut wave = Wave {
            cfg: &self.cfg,
            unit,
            buffers: &mut self.buffers,
            bindings: &d.bindings,
            leaks: if self.record_leaks { Some(leaks) } else { None },
            dispatch_id,
            wave_index,
            place,
            first_thread: (place.group * d.group_size + first_local) as u32,
            first_local: first_local as u32,
            lanes,
            remap_offset: offset,
        };
        match d.kernel_for(place.group) {
            Kernel::Program(p) => interpret(p, &mut wave),
            Kernel::Native(k) => k.run(&mut wave),
        }
    }

    /// Runs every wave of `d` to completion and returns what happened.
    pub fn dispatch(&mut self, d: &Dispatch) -> Result<DispatchReport, SimError> {
        self.validate(d)?;
        let dispatch_id = self.next_dispatch;
        self.next_dispatch += 1;
        let placements = self.placements(d);
        let mut leaks = Vec::new();
        for (i, place) in placements.iter().enumerate() {
            self.run_wave(d, dispatch_id, i, *place, &mut leaks)?;
        }
        let buffers = d.bindings.iter().map(|id| (*id, self.buffers[id.0 as usize].clone())).collect();
        Ok(DispatchReport { dispatch_id, placements, leaks, buffers })
    }

    /// Runs the victims' waves with one attacker wave queued directly behind
    /// each, on the same SIMD unit.
    ///
    /// `order` decides how much of the victims' wave order the attacker's
    /// output preserves.
    pub fn dispatch_colocated(
        &mut self,
        victims: &[Dispatch],
        attacker: &Dispatch,
        order: ColocationOrder,
    ) -> Result<ColocatedReport, SimError> {
        for v in victims {
            self.validate(v)?;
        }
        self.validate(attacker)?;
        let victim_ids: Vec<u64> = victims.iter().map(|_| self.take_id()).collect();
        let attacker_id = self.take_id();

        let mut groups: Vec<(usize, Vec<WavePlacement>)> = Vec::new();
        for (vi, v) in victims.iter().enumerate() {
            let places = self.placements(v);
            let wpg = v.waves_per_group(self.cfg.wave_width);
            for chunk in places.chunks(wpg) {
                groups.push((vi, chunk.to_vec()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ attacker_id.wrapping_mul(GOLDEN));
        match order {
            ColocationOrder::InOrder => {}
            ColocationOrder::ShuffleGroups => groups.shuffle(&mut rng),
            ColocationOrder::ShuffleWaves => {
                let mut waves: Vec<(usize, Vec<WavePlacement>)> =
                    groups.into_iter().flat_map(|(vi, g)| g.into_iter().map(move |w| (vi, vec![w]))).collect();
                waves.shuffle(&mut rng);
                groups = waves;
            }
        }

        let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
        let a_wpg = attacker.waves_per_group(self.cfg.wave_width);
        if attacker.group_count * a_wpg < total {
            return Err(SimError::InvalidDispatch(format!(
                "attacker has {} waves, victims have {total}",
                attacker.group_count * a_wpg
            )));
        }

        let mut leaks = Vec::new();
        let mut pairs = Vec::with_capacity(total);
        let mut j = 0;
        for (vi, waves) in groups {
            let v = &victims[vi];
            let v_wpg = v.waves_per_group(self.cfg.wave_width);
            for place in waves {
                let idx = place.group * v_wpg + place.wave_in_group;
                self.run_wave(v, victim_ids[vi], idx, place, &mut leaks)?;
                let a_place = WavePlacement { group: j / a_wpg, wave_in_group: j % a_wpg, core: place.core, simd: place.simd };
                self.run_wave(attacker, attacker_id, j, a_place, &mut leaks)?;
                pairs.push(CoPlacement {
                    attacker_wave: j,
                    victim: vi,
                    victim_dispatch_id: victim_ids[vi],
                    victim_group: place.group,
                    victim_wave: place.wave_in_group,
                    core: place.core,
                    simd: place.simd,
                });
                j += 1;
            }
        }
        Ok(ColocatedReport { victim_ids, attacker_id, pairs, leaks })
    }

    fn take_id(&mut self) -> u64 {
        self.next_dispatch += 1;
        self.next_dispatch - 1
    }
}

/// Execution context of one wave on one SIMD unit.
pub struct Wave<'a> {
    cfg: &'a GpuConfig,
    unit: &'a mut SimdUnit,
    buffers: &'a mut Vec<Vec<u32>>,
    bindings: &'a [BufferId],
    leaks: Option<&'a mut Vec<LeakRecord>>,
    dispatch_id: u64,
    wave_index: usize,
    place: WavePlacement,
    first_thread: u32,
    first_local: u32,
    lanes: usize,
    remap_offset: usize,
}

impl Wave<'_> {
    /// Active lanes in this wave (the last wave of a group may be partial).
    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn group(&self) -> u32 {
        self.place.group as u32
    }

    pub fn thread_id(&self, lane: usize) -> u32 {
        self.first_thread + lane as u32
    }

    pub fn local_id(&self, lane: usize) -> u32 {
        self.first_local + lane as u32
    }

    pub fn placement(&self) -> WavePlacement {
        self.place
    }

    pub fn config(&self) -> &GpuConfig {
        self.cfg
    }

    fn phys(&self, reg: RegisterRef) -> Result<usize, SimError> {
        let slot = reg.slot().expect("general register");
        let limit = self.cfg.regs_per_thread;
        if slot >= limit {
            return Err(SimError::RegisterOutOfRange { reg, slot, limit });
        }
        Ok((slot + self.remap_offset) % limit)
    }

    /// Reads `reg` in every active lane.
    pub fn read(&mut self, reg: RegisterRef) -> Result<Vec<u32>, SimError> {
        match reg {
            RegisterRef::Special(Special::ThreadId) => return Ok((0..self.lanes).map(|l| self.thread_id(l)).collect()),
            RegisterRef::Special(Special::GroupId) => return Ok(vec![self.group(); self.lanes]),
            RegisterRef::General { .. } => {}
        }
        let phys = self.phys(reg)?;
        let regs = self.cfg.regs_per_thread;
        let half = self.cfg.half_wave();
        let mut out = Vec::with_capacity(self.lanes);
        for lane in 0..self.lanes {
            let cell = lane * regs + phys;
            if self.unit.written[cell] {
                out.push(self.unit.cells[cell]);
                continue;
            }
            let value = match self.cfg.lifecycle {
                Lifecycle::NoClear | Lifecycle::ZeroOnAlloc => self.unit.cells[cell],
                Lifecycle::StoreResidue => self.unit.residue[lane % half],
            };
            if let Some(leaks) = self.leaks.as_deref_mut() {
                leaks.push(LeakRecord {
                    dispatch_id: self.dispatch_id,
                    core: self.place.core,
                    simd: self.place.simd,
                    wave_index: self.wave_index,
                    lane,
                    arch_register: reg,
                    value,
                    was_uninitialized: true,
                });
            }
            out.push(value);
        }
        Ok(out)
    }

    /// Writes `reg` in every active lane.
    pub fn write(&mut self, reg: RegisterRef, values: &[u32]) -> Result<(), SimError> {
        if !reg.is_general() {
            return Err(SimError::InvalidDispatch(format!("write to read-only register {reg}")));
        }
        assert_eq!(values.len(), self.lanes, "one value per active lane");
        let phys = self.phys(reg)?;
        let regs = self.cfg.regs_per_thread;
        for (lane, v) in values.iter().enumerate() {
            let cell = lane * regs + phys;
            self.unit.cells[cell] = *v;
            self.unit.written[cell] = true;
        }
        Ok(())
    }

    fn buffer_id(&self, slot: u8) -> Result<BufferId, SimError> {
        self.bindings.get(slot as usize).copied().ok_or(SimError::UnboundBuffer(slot))
    }

    /// Loads `width` consecutive words per lane starting at `bases[lane]`; lane-major result.
    pub fn load(&mut self, slot: u8, bases: &[u64], width: usize) -> Result<Vec<u32>, SimError> {
        let id = self.buffer_id(slot)?;
        let buf = &self.buffers[id.0 as usize];
        let mut out = Vec::with_capacity(bases.len() * width);
        for &base in bases {
            for k in 0..width as u64 {
                let w = base + k;
                out.push(*buf.get(w as usize).ok_or(SimError::OutOfBounds { buffer: id, word: w, len: buf.len() })?);
            }
        }
        Ok(out)
    }

    /// Stores `width` words per lane (`values` is lane-major). When the lanes
    /// cover one contiguous ascending block, the store is coalesced into two
    /// half-wave bus transactions and the last 16-word beat becomes the
    /// SIMD unit's residue.
    pub fn store(&mut self, slot: u8, bases: &[u64], width: usize, values: &[u32]) -> Result<(), SimError> {
        self.store_inner(slot, bases, width, values, true)
    }

    /// Store into tile memory; never coalesced onto the global bus.
    pub fn store_tile(&mut self, slot: u8, bases: &[u64], width: usize, values: &[u32]) -> Result<(), SimError> {
        self.store_inner(slot, bases, width, values, false)
    }

    fn store_inner(&mut self, slot: u8, bases: &[u64], width: usize, values: &[u32], global: bool) -> Result<(), SimError> {
        assert_eq!(values.len(), bases.len() * width);
        let id = self.buffer_id(slot)?;
        let buf = &mut self.buffers[id.0 as usize];
        let len = buf.len();
        for (lane, &base) in bases.iter().enumerate() {
            let end = base + width as u64;
            if end > len as u64 {
                return Err(SimError::OutOfBounds { buffer: id, word: end - 1, len });
            }
            buf[base as usize..end as usize].copy_from_slice(&values[lane * width..(lane + 1) * width]);
        }
        if global && !bases.is_empty() && width > 0 {
            let contiguous = bases.iter().enumerate().all(|(l, b)| *b == bases[0] + (l * width) as u64);
            if contiguous {
                self.update_residue(bases.len(), width, values);
            }
        }
        Ok(())
    }

    fn update_residue(&mut self, lanes: usize, width: usize, values: &[u32]) {
        let half = self.cfg.half_wave();
        let lower = &values[..lanes.min(half) * width];
        let upper = &values[lanes.min(half) * width..];
        let last_half = match self.cfg.half_wave_order {
            HalfWaveOrder::LowerFirst if !upper.is_empty() => upper,
            HalfWaveOrder::LowerFirst => lower,
            HalfWaveOrder::UpperFirst => lower,
        };
        let beat_start = (last_half.len() - 1) / half * half;
        let beat = &last_half[beat_start..];
        self.unit.residue[..beat.len()].copy_from_slice(beat);
    }
}

fn operand_values(wave: &mut Wave<'_>, op: &Operand) -> Result<Vec<u32>, SimError> {
    match op {
        Operand::Reg(r) => wave.read(*r),
        Operand::Imm(v) => Ok(vec![*v; wave.lanes()]),
    }
}

fn lane_bases(wave: &Wave<'_>, addr: &crate::isa::Address, width: usize) -> Vec<u64> {
    (0..wave.lanes())
        .map(|l| addr.base_word(wave.thread_id(l), wave.local_id(l), wave.group(), width))
        .collect()
}

/// Lockstep interpreter: all lanes read an instruction's sources before any lane writes.
fn interpret(p: &Program, wave: &mut Wave<'_>) -> Result<(), SimError> {
    for ins in &p.instructions {
        let n = wave.lanes();
        match ins.opcode {
            Opcode::Exit => break,
            Opcode::Nop => {}
            Opcode::MovImm | Opcode::MovReg => {
                let v = operand_values(wave, &ins.srcs[0])?;
                wave.write(ins.dst.unwrap(), &v)?;
            }
            Opcode::IAdd | Opcode::IShl | Opcode::FAdd => {
                let a = operand_values(wave, &ins.srcs[0])?;
                let b = operand_values(wave, &ins.srcs[1])?;
                let v: Vec<u32> = a
                    .iter()
                    .zip(&b)
                    .map(|(&a, &b)| match ins.opcode {
                        Opcode::IAdd => a.wrapping_add(b),
                        Opcode::IShl => a.wrapping_shl(b & 31),
                        _ => (f32::from_bits(a) + f32::from_bits(b)).to_bits(),
                    })
                    .collect();
                wave.write(ins.dst.unwrap(), &v)?;
            }
            Opcode::GetThreadId => {
                let v: Vec<u32> = (0..n).map(|l| wave.thread_id(l)).collect();
                wave.write(ins.dst.unwrap(), &v)?;
            }
            Opcode::GetGroupId => {
                let g = wave.group();
                wave.write(ins.dst.unwrap(), &vec![g; n])?;
            }
            Opcode::LoadGlobal => {
                let addr = ins.address.unwrap();
                let bases = lane_bases(wave, &addr, 1);
                let v = wave.load(addr.buffer, &bases, 1)?;
                wave.write(ins.dst.unwrap(), &v)?;
            }
            Opcode::StoreGlobal | Opcode::StoreTile => {
                let addr = ins.address.unwrap();
                let width = ins.srcs.len();
                let cols = ins.srcs.iter().map(|s| operand_values(wave, s)).collect::<Result<Vec<_>, _>>()?;
                let mut values = Vec::with_capacity(n * width);
                for lane in 0..n {
                    values.extend(cols.iter().map(|c| c[lane]));
                }
                let bases = lane_bases(wave, &addr, width);
                if ins.opcode == Opcode::StoreGlobal {
                    wave.store(addr.buffer, &bases, width, &values)?;
                } else {
                    wave.store_tile(addr.buffer, &bases, width, &values)?;
                }
            }
        }
    }
    Ok(())
}
