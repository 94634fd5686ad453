//! Vendor-neutral mini shader ISA.
//!
//! Every simulated kernel, victim or attacker, is written in this one
//! line-oriented assembly dialect. Vendor identity lives in
//! [`GpuConfig`](crate::sim::GpuConfig), not here.
//!
//! ```text
//! .name adreno_attacker
//! mov r0.y, tid
//! st_global [b0+tid], r2.x   // store a stale register
//! exit
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown opcode `{opcode}`")]
    UnknownOpcode { line: usize, opcode: String },
    #[error("line {line}: register `{reg}` out of range")]
    RegisterOutOfRange { line: usize, reg: String },
    #[error("program has no instructions")]
    Empty,
    #[error("last instruction must be `exit`")]
    MissingExit,
    #[error("`exit` may only appear as the last instruction (found at {0})")]
    EarlyExit(usize),
    #[error("program mixes flat (`r7`) and quad (`r7.x`) register names")]
    MixedRegisterModel,
    #[error("instruction {index}: {msg}")]
    BadOperands { index: usize, msg: String },
}

/// Architectural register layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterModel {
    /// Plain 32-bit registers, `r0`..`rN`.
    Flat,
    /// Four 32-bit subregisters per register, `r0.x`..`rN.w`.
    Quad,
}

impl RegisterModel {
    /// Highest architectural register index (exclusive) for a file of `slots` 32-bit cells.
    pub fn max_index(self, slots: usize) -> usize {
        match self {
            RegisterModel::Flat => slots,
            RegisterModel::Quad => slots / 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    X,
    Y,
    Z,
    W,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::X, Component::Y, Component::Z, Component::W];

    pub fn offset(self) -> usize {
        self as usize
    }

    fn from_char(c: char) -> Option<Self> {
        match c {
            'x' => Some(Component::X),
            'y' => Some(Component::Y),
            'z' => Some(Component::Z),
            'w' => Some(Component::W),
            _ => None,
        }
    }

    fn as_char(self) -> char {
        ['x', 'y', 'z', 'w'][self as usize]
    }
}

/// Read-only registers supplied by the hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Special {
    /// Global thread index across the dispatch.
    ThreadId,
    /// Thread group index.
    GroupId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegisterRef {
    General { index: u16, component: Option<Component> },
    Special(Special),
}

impl RegisterRef {
    pub const fn r(index: u16) -> Self {
        RegisterRef::General { index, component: None }
    }

    pub const fn quad(index: u16, component: Component) -> Self {
        RegisterRef::General { index, component: Some(component) }
    }

    pub fn is_general(&self) -> bool {
        matches!(self, RegisterRef::General { .. })
    }

    /// Architectural 32-bit cell this register names, or `None` for special registers.
    pub fn slot(&self) -> Option<usize> {
        match *self {
            RegisterRef::General { index, component: None } => Some(index as usize),
            RegisterRef::General { index, component: Some(c) } => {
                Some(index as usize * 4 + c.offset())
            }
            RegisterRef::Special(_) => None,
        }
    }

    /// Inverse of [`slot`](Self::slot) under a register model.
    pub fn from_slot(slot: usize, model: RegisterModel) -> Self {
        match model {
            RegisterModel::Flat => RegisterRef::r(slot as u16),
            RegisterModel::Quad => RegisterRef::quad((slot / 4) as u16, Component::ALL[slot % 4]),
        }
    }

    fn model(&self) -> Option<RegisterModel> {
        match self {
            RegisterRef::General { component: None, .. } => Some(RegisterModel::Flat),
            RegisterRef::General { component: Some(_), .. } => Some(RegisterModel::Quad),
            RegisterRef::Special(_) => None,
        }
    }
}

impl fmt::Display for RegisterRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegisterRef::General { index, component: None } => write!(f, "r{index}"),
            RegisterRef::General { index, component: Some(c) } => {
                write!(f, "r{index}.{}", c.as_char())
            }
            RegisterRef::Special(Special::ThreadId) => f.write_str("tid"),
            RegisterRef::Special(Special::GroupId) => f.write_str("gid"),
        }
    }
}

impl FromStr for RegisterRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tid" => return Ok(RegisterRef::Special(Special::ThreadId)),
            "gid" => return Ok(RegisterRef::Special(Special::GroupId)),
            _ => {}
        }
        let body = s.strip_prefix('r').ok_or_else(|| format!("not a register: `{s}`"))?;
        let (num, comp) = match body.split_once('.') {
            Some((n, c)) => {
                let mut chars = c.chars();
                let comp = match (chars.next(), chars.next()) {
                    (Some(ch), None) => Component::from_char(ch),
                    _ => None,
                }
                .ok_or_else(|| format!("bad subregister in `{s}`"))?;
                (n, Some(comp))
            }
            None => (body, None),
        };
        if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("not a register: `{s}`"));
        }
        let index: u16 = num.parse().map_err(|_| format!("register index too large: `{s}`"))?;
        Ok(RegisterRef::General { index, component: comp })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(RegisterRef),
    Imm(u32),
}

impl Operand {
    pub fn reg(&self) -> Option<RegisterRef> {
        match self {
            Operand::Reg(r) => Some(*r),
            Operand::Imm(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => r.fmt(f),
            Operand::Imm(v) => write!(f, "{v:#010x}"),
        }
    }
}

/// Per-thread index that scales a memory address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AddrIndex {
    None,
    /// Global thread id (`tid`).
    Thread,
    /// Thread id within its group (`ltid`).
    LocalThread,
    /// Group id (`gid`).
    Group,
}

/// Word address `offset + index * stride`; a missing stride means "vector width".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Address {
    pub buffer: u8,
    pub index: AddrIndex,
    pub stride: Option<u32>,
    pub offset: u32,
}

impl Address {
    pub fn per_thread(buffer: u8) -> Self {
        Address { buffer, index: AddrIndex::Thread, stride: None, offset: 0 }
    }

    /// First word touched by a thread storing or loading `width` consecutive words.
    pub fn base_word(&self, thread: u32, local: u32, group: u32, width: usize) -> u64 {
        let idx = match self.index {
            AddrIndex::None => 0,
            AddrIndex::Thread => thread,
            AddrIndex::LocalThread => local,
            AddrIndex::Group => group,
        } as u64;
        let stride = self.stride.map(u64::from).unwrap_or(width as u64);
        self.offset as u64 + idx * stride
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[b{}", self.buffer)?;
        let idx = match self.index {
            AddrIndex::None => None,
            AddrIndex::Thread => Some("tid"),
            AddrIndex::LocalThread => Some("ltid"),
            AddrIndex::Group => Some("gid"),
        };
        if let Some(idx) = idx {
            write!(f, "+{idx}")?;
            if let Some(s) = self.stride {
                write!(f, "*{s}")?;
            }
        }
        if self.offset != 0 {
            write!(f, "+{}", self.offset)?;
        }
        f.write_str("]")
    }
}

impl FromStr for Address {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| format!("address must be bracketed: `{s}`"))?;
        let mut terms = inner.split('+').map(str::trim);
        let buf = terms.next().unwrap_or_default();
        let buffer = buf
            .strip_prefix('b')
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| format!("bad buffer handle `{buf}`"))?;
        let mut addr = Address { buffer, index: AddrIndex::None, stride: None, offset: 0 };
        let mut seen_offset = false;
        for term in terms {
            let (name, stride) = match term.split_once('*') {
                Some((n, k)) => {
                    (n.trim(), Some(parse_u32(k.trim()).ok_or_else(|| format!("bad stride `{k}`"))?))
                }
                None => (term, None),
            };
            let index = match name {
                "tid" => AddrIndex::Thread,
                "ltid" => AddrIndex::LocalThread,
                "gid" => AddrIndex::Group,
                other => {
                    let off = parse_u32(other).ok_or_else(|| format!("bad address term `{other}`"))?;
                    if stride.is_some() || seen_offset {
                        return Err(format!("bad address `{s}`"));
                    }
                    addr.offset = off;
                    seen_offset = true;
                    continue;
                }
            };
            if addr.index != AddrIndex::None || seen_offset {
                return Err(format!("bad address `{s}`"));
            }
            addr.index = index;
            addr.stride = stride;
        }
        Ok(addr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    MovImm,
    MovReg,
    IAdd,
    IShl,
    FAdd,
    GetThreadId,
    GetGroupId,
    LoadGlobal,
    StoreGlobal,
    StoreTile,
    Nop,
    Exit,
}

impl Opcode {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::MovImm => "mov_imm",
            Opcode::MovReg => "mov",
            Opcode::IAdd => "iadd",
            Opcode::IShl => "ishl",
            Opcode::FAdd => "fadd",
            Opcode::GetThreadId => "get_tid",
            Opcode::GetGroupId => "get_gid",
            Opcode::LoadGlobal => "ld_global",
            Opcode::StoreGlobal => "st_global",
            Opcode::StoreTile => "st_tile",
            Opcode::Nop => "nop",
            Opcode::Exit => "exit",
        }
    }

    fn from_mnemonic(s: &str) -> Option<Self> {
        use Opcode::*;
        [MovImm, MovReg, IAdd, IShl, FAdd, GetThreadId, GetGroupId, LoadGlobal, StoreGlobal, StoreTile, Nop, Exit]
            .into_iter()
            .find(|op| op.mnemonic() == s)
    }

    pub fn is_store(self) -> bool {
        matches!(self, Opcode::StoreGlobal | Opcode::StoreTile)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: Opcode,
    pub dst: Option<RegisterRef>,
    pub srcs: Vec<Operand>,
    pub address: Option<Address>,
}

impl Instruction {
    fn new(opcode: Opcode, dst: Option<RegisterRef>, srcs: Vec<Operand>, address: Option<Address>) -> Self {
        Instruction { opcode, dst, srcs, address }
    }

    pub fn mov_imm(dst: RegisterRef, value: u32) -> Self {
        Self::new(Opcode::MovImm, Some(dst), vec![Operand::Imm(value)], None)
    }

    pub fn mov(dst: RegisterRef, src: RegisterRef) -> Self {
        Self::new(Opcode::MovReg, Some(dst), vec![Operand::Reg(src)], None)
    }

    pub fn binary(opcode: Opcode, dst: RegisterRef, a: Operand, b: Operand) -> Self {
        Self::new(opcode, Some(dst), vec![a, b], None)
    }

    pub fn get_tid(dst: RegisterRef) -> Self {
        Self::new(Opcode::GetThreadId, Some(dst), vec![], None)
    }

    pub fn get_gid(dst: RegisterRef) -> Self {
        Self::new(Opcode::GetGroupId, Some(dst), vec![], None)
    }

    pub fn load(dst: RegisterRef, address: Address) -> Self {
        Self::new(Opcode::LoadGlobal, Some(dst), vec![], Some(address))
    }

    pub fn store(address: Address, srcs: impl IntoIterator<Item = RegisterRef>) -> Self {
        let srcs = srcs.into_iter().map(Operand::Reg).collect();
        Self::new(Opcode::StoreGlobal, None, srcs, Some(address))
    }

    pub fn store_tile(address: Address, srcs: impl IntoIterator<Item = RegisterRef>) -> Self {
        let srcs = srcs.into_iter().map(Operand::Reg).collect();
        Self::new(Opcode::StoreTile, None, srcs, Some(address))
    }

    pub fn nop() -> Self {
        Self::new(Opcode::Nop, None, vec![], None)
    }

    pub fn exit() -> Self {
        Self::new(Opcode::Exit, None, vec![], None)
    }

    /// Registers read by this instruction, in operand order.
    pub fn reads(&self) -> impl Iterator<Item = RegisterRef> + '_ {
        self.srcs.iter().filter_map(Operand::reg)
    }

    /// Register defined by this instruction.
    pub fn writes(&self) -> Option<RegisterRef> {
        self.dst
    }

    fn check_shape(&self, index: usize) -> Result<(), IsaError> {
        use Opcode::*;
        let bad = |msg: &str| Err(IsaError::BadOperands { index, msg: format!("{}: {msg}", self.opcode.mnemonic()) });
        let n = self.srcs.len();
        let has_dst = self.dst.is_some();
        let has_addr = self.address.is_some();
        let ok = match self.opcode {
            MovImm => has_dst && !has_addr && n == 1 && matches!(self.srcs[0], Operand::Imm(_)),
            MovReg => has_dst && !has_addr && n == 1 && matches!(self.srcs[0], Operand::Reg(_)),
            IAdd | IShl | FAdd => has_dst && !has_addr && n == 2,
            GetThreadId | GetGroupId => has_dst && !has_addr && n == 0,
            LoadGlobal => has_dst && has_addr && n == 0,
            StoreGlobal | StoreTile => {
                !has_dst && has_addr && n >= 1 && self.srcs.iter().all(|s| matches!(s, Operand::Reg(_)))
            }
            Nop | Exit => !has_dst && !has_addr && n == 0,
        };
        if !ok {
            return bad("wrong operand shape");
        }
        if let Some(RegisterRef::Special(_)) = self.dst {
            return bad("special registers are read-only");
        }
        Ok(())
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.opcode.mnemonic())?;
        let mut parts: Vec<String> = Vec::new();
        if let Some(d) = self.dst {
            parts.push(d.to_string());
        }
        if self.opcode.is_store() {
            if let Some(a) = self.address {
                parts.push(a.to_string());
            }
            parts.extend(self.srcs.iter().map(Operand::to_string));
        } else {
            parts.extend(self.srcs.iter().map(Operand::to_string));
            if let Some(a) = self.address {
                parts.push(a.to_string());
            }
        }
        if !parts.is_empty() {
            write!(f, " {}", parts.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    pub name: String,
    pub instructions: Vec<Instruction>,
    /// Number of 32-bit register cells the shader claims.
    pub declared_registers: usize,
}

impl Program {
    /// Builds a program, declaring exactly the cells it names.
    pub fn new(name: impl Into<String>, instructions: Vec<Instruction>) -> Result<Self, IsaError> {
        let mut p = Program { name: name.into(), instructions, declared_registers: 0 };
        p.declared_registers = p.highest_slot().map_or(0, |s| s + 1);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), IsaError> {
        let last = self.instructions.last().ok_or(IsaError::Empty)?;
        if last.opcode != Opcode::Exit {
            return Err(IsaError::MissingExit);
        }
        for (i, ins) in self.instructions.iter().enumerate() {
            if ins.opcode == Opcode::Exit && i + 1 != self.instructions.len() {
                return Err(IsaError::EarlyExit(i));
            }
            ins.check_shape(i)?;
        }
        self.register_model()?;
        Ok(())
    }

    /// The register model implied by the register names used, if any general register appears.
    pub fn register_model(&self) -> Result<Option<RegisterModel>, IsaError> {
        let mut model = None;
        for r in self.registers() {
            if let Some(m) = r.model() {
                match model {
                    None => model = Some(m),
                    Some(prev) if prev != m => return Err(IsaError::MixedRegisterModel),
                    _ => {}
                }
            }
        }
        Ok(model)
    }

    fn registers(&self) -> impl Iterator<Item = RegisterRef> + '_ {
        self.instructions.iter().flat_map(|i| i.dst.into_iter().chain(i.reads()))
    }

    pub fn highest_slot(&self) -> Option<usize> {
        self.registers().filter_map(|r| r.slot()).max()
    }

    /// Buffer slots referenced by memory instructions.
    pub fn buffer_slots(&self) -> BTreeSet<u8> {
        self.instructions.iter().filter_map(|i| i.address.map(|a| a.buffer)).collect()
    }

    /// General registers written anywhere, in order of first write.
    pub fn written_registers(&self) -> Vec<RegisterRef> {
        let mut seen = BTreeSet::new();
        self.instructions
            .iter()
            .filter_map(Instruction::writes)
            .filter(|r| r.is_general() && seen.insert(*r))
            .collect()
    }
}

/// Every general-register read that happens before any write to the same cell,
/// as `(instruction index, register)`; registers in `assumed_defined` are skipped.
///
/// Reads are evaluated before the destination is defined within one instruction.
pub fn uninitialized_reads(p: &Program, assumed_defined: &[RegisterRef]) -> Vec<(usize, RegisterRef)> {
    let mut defined: BTreeSet<usize> = assumed_defined.iter().filter_map(|r| r.slot()).collect();
    let mut out = Vec::new();
    for (i, ins) in p.instructions.iter().enumerate() {
        for r in ins.reads() {
            if let Some(slot) = r.slot() {
                if !defined.contains(&slot) && !out.contains(&(i, r)) {
                    out.push((i, r));
                }
            }
        }
        if let Some(slot) = ins.writes().and_then(|r| r.slot()) {
            defined.insert(slot);
        }
    }
    out
}

/// General registers read on some path before any write to them.
pub fn read_set_before_write(p: &Program) -> BTreeSet<RegisterRef> {
    uninitialized_reads(p, &[]).into_iter().map(|(_, r)| r).collect()
}

fn parse_u32(s: &str) -> Option<u32> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn parse_imm(s: &str) -> Option<u32> {
    if let Some(neg) = s.strip_prefix('-') {
        return neg.parse::<i64>().ok().filter(|v| *v <= 1 << 31).map(|v| (-v) as i32 as u32);
    }
    parse_u32(s)
}

/// Splits operands on commas that are not inside brackets.
fn split_operands(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let tail = s[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Parses the line-oriented assembly syntax.
///
/// Register bounds are checked against the architectural limits of the model
/// (256 flat cells, or 64 quad registers); per-config limits are the
/// simulator's business.
pub fn parse_program(text: &str) -> Result<Program, IsaError> {
    let mut name = String::from("kernel");
    let mut declared = None;
    let mut instructions = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let code = raw.split("//").next().unwrap_or_default().trim();
        if code.is_empty() {
            continue;
        }
        let syntax = |msg: String| IsaError::Syntax { line, msg };
        let (head, rest) = match code.split_once(char::is_whitespace) {
            Some((h, r)) => (h, r.trim()),
            None => (code, ""),
        };
        match head {
            ".name" => {
                if rest.is_empty() {
                    return Err(syntax("`.name` needs a value".into()));
                }
                name = rest.to_string();
                continue;
            }
            ".regs" => {
                declared = Some(rest.parse::<usize>().map_err(|_| syntax(format!("bad `.regs` value `{rest}`")))?);
                continue;
            }
            _ => {}
        }
        let opcode = Opcode::from_mnemonic(head)
            .ok_or_else(|| IsaError::UnknownOpcode { line, opcode: head.to_string() })?;
        let ops = split_operands(rest);

        let reg = |s: &str| -> Result<RegisterRef, IsaError> {
            let r: RegisterRef = s.parse().map_err(syntax)?;
            let in_range = match r {
                RegisterRef::General { index, component: None } => index < 256,
                RegisterRef::General { index, component: Some(_) } => index < 64,
                RegisterRef::Special(_) => true,
            };
            if in_range {
                Ok(r)
            } else {
                Err(IsaError::RegisterOutOfRange { line, reg: s.to_string() })
            }
        };
        let operand = |s: &str| -> Result<Operand, IsaError> {
            if s.starts_with('r') || s == "tid" || s == "gid" {
                reg(s).map(Operand::Reg)
            } else {
                parse_imm(s).map(Operand::Imm).ok_or_else(|| syntax(format!("bad operand `{s}`")))
            }
        };
        let addr = |s: &str| -> Result<Address, IsaError> { s.parse().map_err(syntax) };
        let arity = |n: usize| -> Result<(), IsaError> {
            if ops.len() == n {
                Ok(())
            } else {
                Err(syntax(format!("`{head}` takes {n} operand(s), got {}", ops.len())))
            }
        };

        use Opcode::*;
        let ins = match opcode {
            MovImm => {
                arity(2)?;
                let v = parse_imm(ops[1]).ok_or_else(|| syntax(format!("bad immediate `{}`", ops[1])))?;
                Instruction::mov_imm(reg(ops[0])?, v)
            }
            MovReg => {
                arity(2)?;
                Instruction::mov(reg(ops[0])?, reg(ops[1])?)
            }
            IAdd | IShl | FAdd => {
                arity(3)?;
                Instruction::binary(opcode, reg(ops[0])?, operand(ops[1])?, operand(ops[2])?)
            }
            GetThreadId | GetGroupId => {
                arity(1)?;
                Instruction::new(opcode, Some(reg(ops[0])?), vec![], None)
            }
            LoadGlobal => {
                arity(2)?;
                Instruction::load(reg(ops[0])?, addr(ops[1])?)
            }
            StoreGlobal | StoreTile => {
                if ops.len() < 2 {
                    return Err(syntax(format!("`{head}` needs an address and at least one register")));
                }
                let a = addr(ops[0])?;
                let srcs = ops[1..].iter().map(|s| reg(s)).collect::<Result<Vec<_>, _>>()?;
                Instruction::new(opcode, None, srcs.into_iter().map(Operand::Reg).collect(), Some(a))
            }
            Nop | Exit => {
                arity(0)?;
                Instruction::new(opcode, None, vec![], None)
            }
        };
        ins.check_shape(instructions.len()).map_err(|e| syntax(e.to_string()))?;
        instructions.push(ins);
    }

    let mut p = Program { name, instructions, declared_registers: 0 };
    p.declared_registers = declared.unwrap_or_else(|| p.highest_slot().map_or(0, |s| s + 1));
    p.validate()?;
    Ok(p)
}

/// Renders a program in the syntax accepted by [`parse_program`].
pub fn render_program(p: &Program) -> Result<String, IsaError> {
    p.validate()?;
    let mut out = format!(".name {}\n.regs {}\n", p.name, p.declared_registers);
    for ins in &p.instructions {
        out.push_str(&ins.to_string());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_alpha_constant() {
        let p = parse_program("mov_imm r3, 0x3f800000 \n exit").unwrap();
        assert_eq!(p.instructions.len(), 2);
        assert_eq!(p.instructions[0], Instruction::mov_imm(RegisterRef::r(3), 0x3f80_0000));
    }

    #[test]
    fn parses_stale_store() {
        let p = parse_program("st_global [b0+tid], r8 \n exit").unwrap();
        let st = &p.instructions[0];
        assert_eq!(st.opcode, Opcode::StoreGlobal);
        assert_eq!(st.srcs, vec![Operand::Reg(RegisterRef::r(8))]);
        assert_eq!(st.address, Some(Address::per_thread(0)));
    }

    #[test]
    fn lone_exit_is_valid() {
        let p = parse_program("exit").unwrap();
        assert_eq!(p.instructions, vec![Instruction::exit()]);
        assert_eq!(p.declared_registers, 0);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_program("nop\nfrobnicate r1\nexit").unwrap_err();
        assert_eq!(err, IsaError::UnknownOpcode { line: 2, opcode: "frobnicate".into() });
        assert!(matches!(parse_program("mov_imm r1\nexit"), Err(IsaError::Syntax { line: 1, .. })));
        assert!(matches!(
            parse_program("mov_imm r300, 1\nexit"),
            Err(IsaError::RegisterOutOfRange { line: 1, .. })
        ));
        assert!(matches!(
            parse_program("mov_imm r64.x, 1\nexit"),
            Err(IsaError::RegisterOutOfRange { line: 1, .. })
        ));
    }

    #[test]
    fn structural_errors() {
        assert_eq!(parse_program("// nothing").unwrap_err(), IsaError::Empty);
        assert_eq!(parse_program("nop").unwrap_err(), IsaError::MissingExit);
        assert_eq!(parse_program("exit\nexit").unwrap_err(), IsaError::EarlyExit(0));
        assert_eq!(parse_program("mov r1, r2.x\nexit").unwrap_err(), IsaError::MixedRegisterModel);
        assert!(parse_program("mov tid, r1\nexit").is_err());
    }

    #[test]
    fn render_rejects_empty() {
        let p = Program { name: "x".into(), instructions: vec![], declared_registers: 0 };
        assert_eq!(render_program(&p), Err(IsaError::Empty));
    }

    #[test]
    fn address_forms() {
        for s in ["[b0]", "[b1+tid]", "[b2+gid*4]", "[b3+ltid+7]", "[b0+tid*32+5]", "[b4+12]"] {
            let a: Address = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        assert!("[b0+tid+gid]".parse::<Address>().is_err());
        assert!("b0+tid".parse::<Address>().is_err());
        let a: Address = "[b0+tid*4+2]".parse().unwrap();
        assert_eq!(a.base_word(3, 0, 0, 1), 14);
        assert_eq!(Address::per_thread(0).base_word(3, 0, 0, 16), 48);
    }

    #[test]
    fn negative_and_float_bits_immediates() {
        let p = parse_program("fadd r0, r1, -0\nmov_imm r2, -1\nexit").unwrap();
        assert_eq!(p.instructions[1].srcs[0], Operand::Imm(u32::MAX));
        let p = parse_program("fadd r0, r1, 0x80000000\nexit").unwrap();
        assert_eq!(p.instructions[0].srcs[1], Operand::Imm(0x8000_0000));
    }

    #[test]
    fn read_before_write_basics() {
        let p = parse_program("mov_imm r0, 5\nst_global [b0+tid], r0\nexit").unwrap();
        assert!(read_set_before_write(&p).is_empty());
        let p = parse_program("iadd r1, r1, 1\nexit").unwrap();
        assert_eq!(read_set_before_write(&p), [RegisterRef::r(1)].into());
        let p = parse_program("mov r0, tid\nexit").unwrap();
        assert!(read_set_before_write(&p).is_empty());
    }

    #[test]
    fn quad_slots_are_distinct_cells() {
        let p = parse_program("mov_imm r2.x, 1\nst_global [b0+tid], r2.y\nexit").unwrap();
        assert_eq!(read_set_before_write(&p), [RegisterRef::quad(2, Component::Y)].into());
        assert_eq!(RegisterRef::quad(2, Component::Y).slot(), Some(9));
        assert_eq!(RegisterRef::from_slot(9, RegisterModel::Quad), RegisterRef::quad(2, Component::Y));
    }
}
