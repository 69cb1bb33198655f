//! Instruction decoding: prefixes, REX, opcode, ModR/M, SIB, displacement
//! and immediate, plus the textual disassembly form.

use std::fmt;

use crate::memory::fetch_byte;
use crate::opcodes::{expand_mnemonic, OpMap, OpcodeEntry, OpcodeTable, Operand, SizeRule, Slot};
use crate::state::{Exec, MachineState, MsKind, SegReg, GPR_NAMES};

pub const MAX_INSTRUCTION_LENGTH: usize = 15;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Prefixes {
    pub lock: bool,
    /// F3
    pub rep: bool,
    /// F2
    pub repne: bool,
    pub segment: Option<SegReg>,
    pub operand_size: bool,
    pub address_size: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rex(pub u8);

impl Rex {
    pub fn w(self) -> bool {
        self.0 & 8 != 0
    }
    pub fn r(self) -> bool {
        self.0 & 4 != 0
    }
    pub fn x(self) -> bool {
        self.0 & 2 != 0
    }
    pub fn b(self) -> bool {
        self.0 & 1 != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModRm {
    pub md: u8,
    pub reg: u8,
    pub rm: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sib {
    pub scale: u8,
    pub index: u8,
    pub base: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DecodedInst {
    pub prefixes: Prefixes,
    pub rex: Option<Rex>,
    pub map: OpMap,
    pub opcode: u8,
    pub modrm: Option<ModRm>,
    pub sib: Option<Sib>,
    pub disp: i32,
    pub imm: u64,
    pub length: u8,
    pub operand_size: u8,
    pub address_size: u8,
    entry: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("unimplemented opcode {}{byte:02x}{}", if *map == OpMap::TwoByte { "0f " } else { "" }, ext.map_or(String::new(), |x| format!(" /{x}")))]
    Unimplemented { map: OpMap, byte: u8, ext: Option<u8> },
    #[error("three-byte opcode map 0f {0:02x} is not implemented")]
    ThreeByteMap(u8),
    #[error("instruction exceeds 15 bytes")]
    TooLong,
    #[error("instruction bytes truncated")]
    Truncated,
    #[error("{0}")]
    Fetch(crate::state::ModelStatus),
}

impl DecodeError {
    pub fn ms_kind(&self) -> MsKind {
        match self {
            DecodeError::Unimplemented { .. } => MsKind::UnimplementedOpcode,
            DecodeError::Fetch(ms) => ms.kind,
            _ => MsKind::DecodeError,
        }
    }
}

struct Cursor<F> {
    fetch: F,
    pos: usize,
}

impl<F: FnMut(usize) -> Result<u8, DecodeError>> Cursor<F> {
    fn next(&mut self) -> Result<u8, DecodeError> {
        if self.pos >= MAX_INSTRUCTION_LENGTH {
            return Err(DecodeError::TooLong);
        }
        let b = (self.fetch)(self.pos)?;
        self.pos += 1;
        Ok(b)
    }

    fn le(&mut self, n: usize) -> Result<u64, DecodeError> {
        let mut v = 0u64;
        for i in 0..n {
            v |= (self.next()? as u64) << (8 * i);
        }
        Ok(v)
    }
}

/// Decodes one instruction from a byte source addressed by offset.
pub fn decode_with<F>(fetch: F) -> Result<DecodedInst, DecodeError>
where
    F: FnMut(usize) -> Result<u8, DecodeError>,
{
    let table = OpcodeTable::get();
    let mut cur = Cursor { fetch, pos: 0 };
    let mut prefixes = Prefixes::default();
    let mut rex = None;
    let mut byte = cur.next()?;
    loop {
        match byte {
            0xF0 => prefixes.lock = true,
            0xF2 => prefixes.repne = true,
            0xF3 => prefixes.rep = true,
            0x26 => prefixes.segment = Some(SegReg::Es),
            0x2E => prefixes.segment = Some(SegReg::Cs),
            0x36 => prefixes.segment = Some(SegReg::Ss),
            0x3E => prefixes.segment = Some(SegReg::Ds),
            0x64 => prefixes.segment = Some(SegReg::Fs),
            0x65 => prefixes.segment = Some(SegReg::Gs),
            0x66 => prefixes.operand_size = true,
            0x67 => prefixes.address_size = true,
            0x40..=0x4F => {
                // REX only counts when it immediately precedes the opcode.
                let r = Rex(byte & 0xF);
                byte = cur.next()?;
                if (0x40..=0x4F).contains(&byte) || is_legacy_prefix(byte) {
                    continue;
                }
                rex = Some(r);
                break;
            }
            _ => break,
        }
        byte = cur.next()?;
    }

    let (map, opcode) = if byte == 0x0F {
        let second = cur.next()?;
        if second == 0x38 || second == 0x3A {
            return Err(DecodeError::ThreeByteMap(second));
        }
        (OpMap::TwoByte, second)
    } else {
        (OpMap::OneByte, byte)
    };

    let mut modrm = None;
    let entry_index = match table.slot(map, opcode) {
        Slot::Empty => return Err(DecodeError::Unimplemented { map, byte: opcode, ext: None }),
        Slot::Direct(i) => i,
        Slot::Group(g) => {
            let m = split_modrm(cur.next()?);
            modrm = Some(m);
            g[m.reg as usize].ok_or(DecodeError::Unimplemented { map, byte: opcode, ext: Some(m.reg) })?
        }
    };
    // 90 with REX.B is xchg r8, rax rather than nop.
    let entry_index = if map == OpMap::OneByte && opcode == 0x90 && rex.is_some_and(|r| r.b()) {
        match table.slot(map, 0x91) {
            Slot::Direct(i) => i,
            _ => unreachable!("xchg row covers 91"),
        }
    } else {
        entry_index
    };
    let entry = table.entry(entry_index);

    if modrm.is_none() && entry.has_modrm() {
        modrm = Some(split_modrm(cur.next()?));
    }

    let address_size = if prefixes.address_size { 4 } else { 8 };
    let mut sib = None;
    let mut disp = 0i32;
    // Control-register moves ignore the mod field: the operand is always a
    // register and no SIB or displacement follows.
    let register_form = entry.operands.contains(&Operand::Rq);
    if let Some(m) = modrm {
        if m.md != 3 && !register_form {
            if m.rm == 4 {
                let s = cur.next()?;
                sib = Some(Sib { scale: s >> 6, index: (s >> 3) & 7, base: s & 7 });
            }
            let no_base = sib.is_some_and(|s| s.base == 5) && m.md == 0;
            disp = match m.md {
                1 => cur.le(1)? as u8 as i8 as i32,
                2 => cur.le(4)? as u32 as i32,
                0 if (m.rm == 5 && sib.is_none()) || no_base => cur.le(4)? as u32 as i32,
                _ => 0,
            };
        }
        if let Some(bad) = register_only_violation(entry, opcode, m).filter(|_| !register_form) {
            return Err(bad);
        }
    }

    let w = rex.is_some_and(|r| r.w());
    let operand_size = match entry.size {
        SizeRule::Byte => 1,
        SizeRule::Normal if w => 8,
        SizeRule::Normal if prefixes.operand_size => 2,
        SizeRule::Normal => 4,
        SizeRule::Default64 if prefixes.operand_size => 2,
        SizeRule::Default64 | SizeRule::Fixed64 => 8,
    };

    let mut imm = 0u64;
    for op in entry.operands {
        let (n, signed) = match op {
            Operand::Ib => (1, false),
            Operand::Ibs | Operand::Jb => (1, true),
            Operand::Iz if operand_size == 2 => (2, false),
            Operand::Iz | Operand::Jz => (4, true),
            Operand::Iv => (operand_size as usize, false),
            _ => continue,
        };
        let raw = cur.le(n)?;
        imm = if signed { sign_extend(raw, n as u32 * 8) } else { raw };
    }
    if matches!(entry.operands.last(), Some(Operand::Iz | Operand::Ibs)) {
        imm &= size_mask(operand_size);
    }

    Ok(DecodedInst {
        prefixes,
        rex,
        map,
        opcode,
        modrm,
        sib,
        disp,
        imm,
        length: cur.pos as u8,
        operand_size,
        address_size,
        entry: entry_index,
    })
}

fn is_legacy_prefix(b: u8) -> bool {
    matches!(b, 0xF0 | 0xF2 | 0xF3 | 0x26 | 0x2E | 0x36 | 0x3E | 0x64 | 0x65 | 0x66 | 0x67)
}

fn split_modrm(b: u8) -> ModRm {
    ModRm { md: b >> 6, reg: (b >> 3) & 7, rm: b & 7 }
}

/// Memory-only and register-only templates reject the other ModR/M form.
fn register_only_violation(entry: &OpcodeEntry, opcode: u8, m: ModRm) -> Option<DecodeError> {
    let mem_only = entry.operands.contains(&Operand::M);
    let reg_only = entry.operands.iter().any(|o| matches!(o, Operand::Rv));
    if (mem_only && m.md == 3) || (reg_only && m.md != 3) {
        Some(DecodeError::Unimplemented { map: entry.map, byte: opcode, ext: entry.ext })
    } else {
        None
    }
}

pub fn sign_extend(value: u64, bits: u32) -> u64 {
    if bits >= 64 {
        return value;
    }
    let shift = 64 - bits;
    (((value << shift) as i64) >> shift) as u64
}

pub fn size_mask(bytes: u8) -> u64 {
    if bytes >= 8 {
        u64::MAX
    } else {
        (1u64 << (bytes as u32 * 8)) - 1
    }
}

/// Decodes from a byte slice (disassembly, tests).
pub fn decode_bytes(bytes: &[u8]) -> Result<DecodedInst, DecodeError> {
    decode_with(|i| bytes.get(i).copied().ok_or(DecodeError::Truncated))
}

/// Fetches up to 15 bytes at rip (exec access class) and decodes them.
/// Decode failures record `ms`; rip is left unchanged.
pub fn fetch_and_decode(state: &mut MachineState) -> Exec<DecodedInst> {
    let rip = state.rip();
    let result = {
        let st = &mut *state;
        decode_with(|i| fetch_byte(st, rip.wrapping_add(i as u64)).map_err(DecodeError::Fetch))
    };
    match result {
        Ok(di) => Ok(di),
        Err(DecodeError::Fetch(ms)) => Err(ms),
        Err(e) => Err(state.fault(e.ms_kind(), e.to_string())),
    }
}

/// Where an operand lives once ModR/M and REX are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandKind {
    Reg { index: usize, high8: bool, size: u8 },
    Mem { size: u8 },
    Imm { value: u64, size: u8 },
    ControlReg(u8),
    Rel(u64),
}

impl DecodedInst {
    pub fn entry(&self) -> &'static OpcodeEntry {
        OpcodeTable::get().entry(self.entry)
    }

    /// A 90 carrying 66 or a REX other than plain REX.W still executes as
    /// nop but is spelled as the accumulator exchange it encodes.
    fn is_prefixed_nop(&self) -> bool {
        self.map == OpMap::OneByte
            && self.opcode == 0x90
            && (self.rex.is_some_and(|r| r.0 != 8) || self.prefixes.operand_size)
            && self.entry().operands.is_empty()
    }

    /// Operand templates as displayed, destination first.
    pub fn operands(&self) -> &'static [Operand] {
        if self.is_prefixed_nop() {
            &[Operand::Acc, Operand::Acc]
        } else {
            self.entry().operands
        }
    }

    pub fn mnemonic(&self) -> String {
        if self.is_prefixed_nop() {
            return "xchg".to_string();
        }
        let e = self.entry();
        if e.operands == [Operand::Zv, Operand::Iv] && self.operand_size == 8 {
            return "movabs".to_string();
        }
        expand_mnemonic(e.mnemonic, self.opcode, self.operand_size)
    }

    pub fn rex_bit(&self, f: fn(Rex) -> bool) -> bool {
        self.rex.is_some_and(f)
    }

    /// Register number selected by ModR/M `reg`, extended by REX.R.
    pub fn reg_index(&self) -> usize {
        let m = self.modrm.expect("reg operand requires ModR/M");
        (m.reg | if self.rex_bit(Rex::r) { 8 } else { 0 }) as usize
    }

    /// Register number selected by ModR/M `rm`, extended by REX.B.
    pub fn rm_index(&self) -> usize {
        let m = self.modrm.expect("rm operand requires ModR/M");
        (m.rm | if self.rex_bit(Rex::b) { 8 } else { 0 }) as usize
    }

    /// Register number in the low opcode bits, extended by REX.B.
    pub fn opcode_reg_index(&self) -> usize {
        ((self.opcode & 7) | if self.rex_bit(Rex::b) { 8 } else { 0 }) as usize
    }

    pub fn has_memory_operand(&self) -> bool {
        self.modrm.is_some_and(|m| m.md != 3)
            && self.entry().operands.iter().any(|o| {
                matches!(o, Operand::Eb | Operand::Ev | Operand::Ew | Operand::Ed | Operand::M)
            })
    }

    /// Byte registers 4..=7 name ah/ch/dh/bh unless a REX prefix is present.
    fn byte_reg(&self, index: usize) -> OperandKind {
        if self.rex.is_none() && (4..8).contains(&index) {
            OperandKind::Reg { index: index - 4, high8: true, size: 1 }
        } else {
            OperandKind::Reg { index, high8: false, size: 1 }
        }
    }

    fn rm_operand(&self, size: u8) -> OperandKind {
        if self.modrm.is_some_and(|m| m.md == 3) {
            if size == 1 {
                self.byte_reg(self.rm_index())
            } else {
                OperandKind::Reg { index: self.rm_index(), high8: false, size }
            }
        } else {
            OperandKind::Mem { size }
        }
    }

    pub fn operand(&self, op: Operand) -> OperandKind {
        let osz = self.operand_size;
        match op {
            Operand::Eb => self.rm_operand(1),
            Operand::Ev | Operand::Rv => self.rm_operand(osz),
            Operand::Ew => self.rm_operand(2),
            Operand::Ed => self.rm_operand(4),
            Operand::M => OperandKind::Mem { size: 0 },
            Operand::Rq => OperandKind::Reg { index: self.rm_index(), high8: false, size: 8 },
            Operand::Gb => self.byte_reg(self.reg_index()),
            Operand::Gv => OperandKind::Reg { index: self.reg_index(), high8: false, size: osz },
            Operand::Cr => OperandKind::ControlReg(self.reg_index() as u8),
            Operand::Zb => self.byte_reg(self.opcode_reg_index()),
            Operand::Zv => OperandKind::Reg { index: self.opcode_reg_index(), high8: false, size: osz },
            Operand::Ib => OperandKind::Imm { value: self.imm & 0xFF, size: 1 },
            Operand::Ibs | Operand::Iz | Operand::Iv => OperandKind::Imm { value: self.imm, size: osz },
            Operand::Al => OperandKind::Reg { index: 0, high8: false, size: 1 },
            Operand::Acc => OperandKind::Reg { index: 0, high8: false, size: osz },
            Operand::Cl => OperandKind::Reg { index: 1, high8: false, size: 1 },
            Operand::One => OperandKind::Imm { value: 1, size: 1 },
            Operand::Jb | Operand::Jz => OperandKind::Rel(self.imm),
        }
    }

    /// Renders the instruction as `mnemonic op1, op2`, destination first.
    pub fn disassemble(&self, rip: u64) -> String {
        let mut text = self.mnemonic();
        let ops: Vec<String> =
            self.operands().iter().map(|&op| self.operand_text(op, rip)).collect();
        if !ops.is_empty() {
            text.push(' ');
            text.push_str(&ops.join(", "));
        }
        text
    }

    fn operand_text(&self, op: Operand, rip: u64) -> String {
        let next_rip = rip.wrapping_add(self.length as u64);
        if op == Operand::One {
            return "1".to_string();
        }
        match self.operand(op) {
            OperandKind::Reg { index, high8, size } => register_name(index, high8, size).to_string(),
            OperandKind::Imm { value, .. } => format!("{value:#x}"),
            OperandKind::ControlReg(n) => format!("cr{n}"),
            OperandKind::Rel(rel) => format!("{:#x}", next_rip.wrapping_add(rel)),
            OperandKind::Mem { size } => {
                let mut s = String::new();
                if size > 0 {
                    s.push_str(match size {
                        1 => "byte ptr ",
                        2 => "word ptr ",
                        4 => "dword ptr ",
                        _ => "qword ptr ",
                    });
                }
                match self.prefixes.segment {
                    Some(SegReg::Fs) => s.push_str("fs:"),
                    Some(SegReg::Gs) => s.push_str("gs:"),
                    _ => {}
                }
                s.push('[');
                s.push_str(&self.address_text());
                s.push(']');
                s
            }
        }
    }

    fn address_text(&self) -> String {
        let m = self.modrm.expect("memory operand requires ModR/M");
        let asz = self.address_size;
        let mut parts: Vec<String> = Vec::new();
        let mut rip_relative = false;
        match self.sib {
            Some(sib) => {
                let base = (sib.base | if self.rex_bit(Rex::b) { 8 } else { 0 }) as usize;
                if !(sib.base == 5 && m.md == 0) {
                    parts.push(register_name(base, false, asz).to_string());
                }
                let index = (sib.index | if self.rex_bit(Rex::x) { 8 } else { 0 }) as usize;
                if index != 4 {
                    parts.push(format!("{}*{}", register_name(index, false, asz), 1 << sib.scale));
                }
            }
            None if m.md == 0 && m.rm == 5 => {
                rip_relative = true;
                parts.push(if asz == 4 { "eip" } else { "rip" }.to_string());
            }
            None => parts.push(register_name(self.rm_index(), false, asz).to_string()),
        }
        let mut s = parts.join("+");
        let has_disp = m.md != 0 || rip_relative || s.is_empty() || self.sib.is_some_and(|b| b.base == 5 && m.md == 0);
        if has_disp {
            let d = self.disp as i64;
            if s.is_empty() {
                s = format!("{:#x}", self.disp as u32);
            } else if d < 0 {
                s.push_str(&format!("-{:#x}", -d));
            } else {
                s.push_str(&format!("+{d:#x}"));
            }
        }
        s
    }
}

pub fn register_name(index: usize, high8: bool, size: u8) -> &'static str {
    const B: [&str; 16] = [
        "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b", "r12b",
        "r13b", "r14b", "r15b",
    ];
    const H: [&str; 4] = ["ah", "ch", "dh", "bh"];
    const W: [&str; 16] = [
        "ax", "cx", "dx", "bx", "sp", "bp", "si", "di", "r8w", "r9w", "r10w", "r11w", "r12w",
        "r13w", "r14w", "r15w",
    ];
    const D: [&str; 16] = [
        "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d",
        "r12d", "r13d", "r14d", "r15d",
    ];
    match (size, high8) {
        (1, true) => H[index],
        (1, false) => B[index],
        (2, _) => W[index],
        (4, _) => D[index],
        _ => GPR_NAMES[index],
    }
}

/// Effective address of the ModR/M memory operand: base + scale*index +
/// disp, RIP-relative for mod=0 rm=5, plus the FS/GS base when overridden.
pub fn effective_address(di: &DecodedInst, next_rip: u64, state: &MachineState) -> u64 {
    let ea = effective_offset(di, next_rip, state);
    match di.prefixes.segment {
        Some(seg @ (SegReg::Fs | SegReg::Gs)) => ea.wrapping_add(state.segment_base(seg)),
        _ => ea,
    }
}

/// The address computation without any segment base (what LEA stores).
pub fn effective_offset(di: &DecodedInst, next_rip: u64, state: &MachineState) -> u64 {
    let m = di.modrm.expect("effective address requires ModR/M");
    debug_assert!(m.md != 3, "mod=3 has no memory operand");
    let disp = di.disp as i64 as u64;
    let ea = match di.sib {
        Some(sib) => {
            let mut ea = disp;
            if !(sib.base == 5 && m.md == 0) {
                let base = (sib.base | if di.rex_bit(Rex::b) { 8 } else { 0 }) as usize;
                ea = ea.wrapping_add(state.gpr[base]);
            }
            let index = (sib.index | if di.rex_bit(Rex::x) { 8 } else { 0 }) as usize;
            if index != 4 {
                ea = ea.wrapping_add(state.gpr[index] << sib.scale);
            }
            ea
        }
        None if m.md == 0 && m.rm == 5 => next_rip.wrapping_add(disp),
        None => state.gpr[di.rm_index()].wrapping_add(disp),
    };
    if di.address_size == 4 {
        ea & 0xFFFF_FFFF
    } else {
        ea
    }
}

impl fmt::Display for DecodedInst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.disassemble(0))
    }
}

/// One disassembly line: `0x400650: 89 fa  mov edx, edi`. Undecodable
/// bytes produce a `(db 0x..)` line covering a single byte.
pub fn disassemble_line<F>(addr: u64, mut byte_at: F) -> (String, u64)
where
    F: FnMut(u64) -> Option<u8>,
{
    let decoded = decode_with(|i| byte_at(addr.wrapping_add(i as u64)).ok_or(DecodeError::Truncated));
    let (len, text) = match decoded {
        Ok(di) => (di.length as u64, di.disassemble(addr)),
        Err(_) => match byte_at(addr) {
            Some(b) => (1, format!("(db {b:#04x})")),
            None => (1, "(unreadable)".to_string()),
        },
    };
    let raw: Vec<String> =
        (0..len).filter_map(|i| byte_at(addr.wrapping_add(i))).map(|b| format!("{b:02x}")).collect();
    (format!("{addr:#x}: {}  {text}", raw.join(" ")), len)
}

/// `count` consecutive disassembly lines starting at `start`.
pub fn disassemble_listing<F>(start: u64, count: usize, mut byte_at: F) -> Vec<String>
where
    F: FnMut(u64) -> Option<u8>,
{
    let mut addr = start;
    let mut lines = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, len) = disassemble_line(addr, &mut byte_at);
        lines.push(line);
        addr = addr.wrapping_add(len);
    }
    lines
}
