//! Shader sanitizers: reject programs that read registers before writing
//! them, or rewrite programs to zero their registers on exit.

use std::fmt;

use crate::isa::{uninitialized_reads, Instruction, Program, RegisterModel, RegisterRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub decision: Decision,
    pub violations: Vec<(usize, RegisterRef)>,
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        self.decision == Decision::Accept
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.decision {
            Decision::Accept => writeln!(f, "accept"),
            Decision::Reject => {
                writeln!(f, "reject: {} uninitialized read(s)", self.violations.len())?;
                for (i, r) in &self.violations {
                    writeln!(f, "  instruction {i}: {r}")?;
                }
                Ok(())
            }
        }
    }
}

/// Static checker. Registers in `abi` are treated as defined on entry.
#[derive(Debug, Clone, Default)]
pub struct Sanitizer {
    pub abi: Vec<RegisterRef>,
}

impl Sanitizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_abi(abi: impl IntoIterator<Item = RegisterRef>) -> Self {
        Sanitizer { abi: abi.into_iter().collect() }
    }

    pub fn analyze(&self, p: &Program) -> Verdict {
        let violations = uninitialized_reads(p, &self.abi);
        let decision = if violations.is_empty() { Decision::Accept } else { Decision::Reject };
        Verdict { decision, violations }
    }
}

/// [`Sanitizer::analyze`] with no ABI registers.
pub fn analyze(p: &Program) -> Verdict {
    Sanitizer::new().analyze(p)
}

/// What the cleanup pass zeroes before `exit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CleanupScope {
    /// Every register the program writes.
    #[default]
    Written,
    /// Every cell of the declared register window.
    Full,
}

/// Inserts `mov_imm reg, 0` before the final `exit`.
pub fn rewrite_cleanup(p: &Program, scope: CleanupScope) -> Program {
    let regs: Vec<RegisterRef> = match scope {
        CleanupScope::Written => p.written_registers(),
        CleanupScope::Full => {
            let model = p.register_model().ok().flatten().unwrap_or(RegisterModel::Flat);
            (0..p.declared_registers).map(|s| RegisterRef::from_slot(s, model)).collect()
        }
    };
    let mut out = p.clone();
    let exit = out.instructions.len() - 1;
    out.instructions.splice(exit..exit, regs.into_iter().map(|r| Instruction::mov_imm(r, 0)));
    out
}
