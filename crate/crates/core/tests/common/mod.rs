#![allow(dead_code)]

use rand::Rng;
use regleak::isa::{Address, Instruction, Opcode, Operand, Program, RegisterRef};
use regleak::sim::{Dispatch, GpuConfig, Simulator};

pub const GEN_REGS: u16 = 16;
pub const GEN_THREADS: usize = 64;

/// Random straight-line program over r0..r15. Reads mostly pick registers
/// already written, so many programs are clean.
pub fn random_program(rng: &mut impl Rng, len: usize) -> Program {
    let mut written: Vec<u16> = Vec::new();
    let mut code = Vec::with_capacity(len + 1);
    let pick_read = |rng: &mut dyn rand::RngCore, written: &[u16]| -> RegisterRef {
        if !written.is_empty() && rng.gen_bool(0.92) {
            RegisterRef::r(written[rng.gen_range(0..written.len())])
        } else {
            RegisterRef::r(rng.gen_range(0..GEN_REGS))
        }
    };
    for _ in 0..len {
        let dst = RegisterRef::r(rng.gen_range(0..GEN_REGS));
        let ins = match rng.gen_range(0..9) {
            0 => Instruction::mov_imm(dst, rng.gen()),
            1 => Instruction::mov(dst, pick_read(rng, &written)),
            2..=4 => {
                let op = [Opcode::IAdd, Opcode::IShl, Opcode::FAdd][rng.gen_range(0..3)];
                let b = if rng.gen_bool(0.5) { Operand::Imm(rng.gen()) } else { Operand::Reg(pick_read(rng, &written)) };
                Instruction::binary(op, dst, Operand::Reg(pick_read(rng, &written)), b)
            }
            5 => Instruction::get_tid(dst),
            6 => Instruction::load(dst, Address::per_thread(0)),
            7 => {
                let n = rng.gen_range(1..=4);
                Instruction::store(Address::per_thread(1), (0..n).map(|_| pick_read(rng, &written)))
            }
            _ => Instruction::nop(),
        };
        if let Some(RegisterRef::General { index, .. }) = ins.writes() {
            written.push(index);
        }
        code.push(ins);
    }
    code.push(Instruction::exit());
    let mut p = Program::new("random", code).unwrap();
    p.declared_registers = GEN_REGS as usize;
    p
}

pub fn gen_config() -> GpuConfig {
    GpuConfig { num_cores: 2, simd_per_core: 2, regs_per_thread: GEN_REGS as usize, ..GpuConfig::default() }
}

/// Fills every register with nonzero junk, then runs `p`. Returns the
/// uninitialized-read records of `p` and its output buffer.
pub fn run_after_filler(p: &Program) -> (Vec<regleak::sim::LeakRecord>, Vec<u32>) {
    let mut sim = Simulator::new(gen_config()).unwrap();
    let filler: Vec<Instruction> = (0..GEN_REGS)
        .map(|r| Instruction::mov_imm(RegisterRef::r(r), 0xA5A5_0000 | (u32::from(r) + 1)))
        .chain([Instruction::exit()])
        .collect();
    sim.dispatch(&Dispatch::new(Program::new("filler", filler).unwrap(), 2, GEN_THREADS)).unwrap();
    let input = sim.buffer_from(&(0..2 * GEN_THREADS as u32).map(|i| i * 3 + 1).collect::<Vec<_>>());
    let out = sim.create_buffer(2 * GEN_THREADS * 4);
    let report = sim.dispatch(&Dispatch::new(p.clone(), 2, GEN_THREADS).bind([input, out])).unwrap();
    let leaks = report.leaks.into_iter().filter(|l| l.was_uninitialized).collect();
    (leaks, sim.read_words(out).unwrap().to_vec())
}
