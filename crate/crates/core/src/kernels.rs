//! Shipped assembly fixtures: three leak kernels and a fragment shader.

use crate::isa::{parse_program, Program};

pub const ADRENO_ATTACKER: &str = include_str!("../kernels/adreno_attacker.asm");
pub const AGX_ATTACKER: &str = include_str!("../kernels/agx_attacker.asm");
pub const NVIDIA_ATTACKER: &str = include_str!("../kernels/nvidia_attacker.asm");
pub const FRAGMENT_SHADER: &str = include_str!("../kernels/fragment_shader.asm");

/// All fixtures as `(file stem, source)`.
pub const ALL: [(&str, &str); 4] = [
    ("adreno_attacker", ADRENO_ATTACKER),
    ("agx_attacker", AGX_ATTACKER),
    ("nvidia_attacker", NVIDIA_ATTACKER),
    ("fragment_shader", FRAGMENT_SHADER),
];

fn load(src: &str) -> Program {
    parse_program(src).expect("shipped fixture parses")
}

pub fn adreno_attacker() -> Program {
    load(ADRENO_ATTACKER)
}

pub fn agx_attacker() -> Program {
    load(AGX_ATTACKER)
}

pub fn nvidia_attacker() -> Program {
    load(NVIDIA_ATTACKER)
}

pub fn fragment_shader() -> Program {
    load(FRAGMENT_SHADER)
}
