//! The declarative decode table for the implemented instruction subset.
//!
//! Each row names an opcode (or a contiguous range of opcodes sharing a
//! condition-code or register encoding), an optional ModR/M `reg` extension,
//! the operand template, the semantic handler and the flags the instruction
//! leaves undefined. The decoder and the interpreter dispatch purely through
//! this table.

use std::fmt::Write as _;
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpMap {
    OneByte,
    /// The `0F xx` map.
    TwoByte,
}

/// Operand templates, in the usual opcode-map notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    /// ModR/M r/m, byte.
    Eb,
    /// ModR/M r/m, operand size.
    Ev,
    /// ModR/M r/m, word (MOVZX/MOVSX source).
    Ew,
    /// ModR/M r/m, doubleword (MOVSXD source).
    Ed,
    /// ModR/M reg, byte.
    Gb,
    /// ModR/M reg, operand size.
    Gv,
    /// ModR/M r/m, memory only, no size.
    M,
    /// ModR/M r/m, register only, operand size.
    Rv,
    /// ModR/M r/m, register only, 64-bit.
    Rq,
    /// ModR/M reg as a control register.
    Cr,
    /// Register in the low three opcode bits, byte.
    Zb,
    /// Register in the low three opcode bits, operand size.
    Zv,
    /// 8-bit immediate.
    Ib,
    /// 8-bit immediate sign-extended to the operand size.
    Ibs,
    /// 16-bit immediate for 16-bit operands, else 32-bit sign-extended.
    Iz,
    /// Full operand-size immediate (64-bit with REX.W).
    Iv,
    Al,
    /// rAX at the operand size.
    Acc,
    Cl,
    /// The constant 1 (shift-by-one forms).
    One,
    /// 8-bit relative branch target.
    Jb,
    /// 32-bit relative branch target.
    Jz,
}

impl Operand {
    pub fn uses_modrm(self) -> bool {
        matches!(
            self,
            Operand::Eb
                | Operand::Ev
                | Operand::Ew
                | Operand::Ed
                | Operand::Gb
                | Operand::Gv
                | Operand::M
                | Operand::Rv
                | Operand::Rq
                | Operand::Cr
        )
    }
}

/// How the operand size is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeRule {
    Byte,
    /// 4 by default, 2 with 0x66, 8 with REX.W.
    Normal,
    /// 8 by default, 2 with 0x66 (stack operations and near branches).
    Default64,
    Fixed64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Or,
    Adc,
    Sbb,
    And,
    Sub,
    Xor,
    Cmp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftOp {
    Rol,
    Ror,
    Shl,
    Shr,
    Sar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Handler {
    Alu(AluOp),
    Test,
    Xchg,
    Mov,
    Movzx,
    Movsx,
    Movsxd,
    Lea,
    Push,
    Pop,
    Inc,
    Dec,
    Not,
    Neg,
    Mul,
    Imul1,
    /// Two- and three-operand IMUL.
    ImulN,
    Div,
    Idiv,
    /// CBW/CWDE/CDQE.
    SignExtendAcc,
    /// CWD/CDQ/CQO.
    SignExtendDx,
    Shift(ShiftOp),
    Jcc,
    Jmp,
    Call,
    Ret,
    Cmov,
    Setcc,
    Nop,
    Rdrand,
    Syscall,
    Sysret,
    MovFromCr,
    MovToCr,
    Lgdt,
    Lidt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modes {
    Both,
    SystemOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpcodeEntry {
    pub map: OpMap,
    pub lo: u8,
    pub hi: u8,
    pub ext: Option<u8>,
    /// `*` expands to the condition-code suffix; `a|b|c` selects by operand
    /// size 2/4/8.
    pub mnemonic: &'static str,
    pub operands: &'static [Operand],
    pub handler: Handler,
    pub size: SizeRule,
    pub modes: Modes,
    /// Flags left undefined, audited against architectural tables. Shift and
    /// rotate entries depend on the masked count and are resolved at run time.
    pub undefined: &'static str,
}

impl OpcodeEntry {
    pub fn has_modrm(&self) -> bool {
        self.ext.is_some() || self.operands.iter().any(|o| o.uses_modrm())
    }
}

pub const CONDITION_NAMES: [&str; 16] =
    ["o", "no", "b", "ae", "e", "ne", "be", "a", "s", "ns", "p", "np", "l", "ge", "le", "g"];

use Operand::*;

macro_rules! row {
    ($map:ident, $lo:literal $(..= $hi:literal)?, $ext:expr, $mn:literal, [$($op:ident),*], $h:expr, $size:ident $(, $modes:ident)? $(; undef $u:literal)?) => {
        OpcodeEntry {
            map: OpMap::$map,
            lo: $lo,
            hi: row!(@hi $lo $(, $hi)?),
            ext: $ext,
            mnemonic: $mn,
            operands: &[$($op),*],
            handler: $h,
            size: SizeRule::$size,
            modes: row!(@modes $($modes)?),
            undefined: row!(@undef $($u)?),
        }
    };
    (@hi $lo:literal) => { $lo };
    (@hi $lo:literal, $hi:literal) => { $hi };
    (@modes) => { Modes::Both };
    (@modes $m:ident) => { Modes::$m };
    (@undef) => { "" };
    (@undef $u:literal) => { $u };
}

macro_rules! alu_rows {
    ($mn:literal, $op:ident) => {
        [
            row!(OneByte, 0x00, None, $mn, [Eb, Gb], Handler::Alu(AluOp::$op), Byte),
            row!(OneByte, 0x00, None, $mn, [Ev, Gv], Handler::Alu(AluOp::$op), Normal),
            row!(OneByte, 0x00, None, $mn, [Gb, Eb], Handler::Alu(AluOp::$op), Byte),
            row!(OneByte, 0x00, None, $mn, [Gv, Ev], Handler::Alu(AluOp::$op), Normal),
            row!(OneByte, 0x00, None, $mn, [Al, Ib], Handler::Alu(AluOp::$op), Byte),
            row!(OneByte, 0x00, None, $mn, [Acc, Iz], Handler::Alu(AluOp::$op), Normal),
        ]
    };
}

/// Offsets each of the six classic ALU encodings from the group base.
fn alu_family(base: u8, rows: [OpcodeEntry; 6]) -> impl Iterator<Item = OpcodeEntry> {
    rows.into_iter().enumerate().map(move |(i, mut r)| {
        r.lo = base + i as u8;
        r.hi = r.lo;
        if matches!(r.handler, Handler::Alu(AluOp::And | AluOp::Or | AluOp::Xor)) {
            r.undefined = "af";
        }
        r
    })
}

fn group1(opcode: u8, operands: &'static [Operand], size: SizeRule) -> impl Iterator<Item = OpcodeEntry> {
    const OPS: [(&str, AluOp); 8] = [
        ("add", AluOp::Add),
        ("or", AluOp::Or),
        ("adc", AluOp::Adc),
        ("sbb", AluOp::Sbb),
        ("and", AluOp::And),
        ("sub", AluOp::Sub),
        ("xor", AluOp::Xor),
        ("cmp", AluOp::Cmp),
    ];
    OPS.into_iter().enumerate().map(move |(ext, (mn, op))| OpcodeEntry {
        map: OpMap::OneByte,
        lo: opcode,
        hi: opcode,
        ext: Some(ext as u8),
        mnemonic: mn,
        operands,
        handler: Handler::Alu(op),
        size,
        modes: Modes::Both,
        undefined: if matches!(op, AluOp::And | AluOp::Or | AluOp::Xor) { "af" } else { "" },
    })
}

fn group2(opcode: u8, operands: &'static [Operand], size: SizeRule) -> impl Iterator<Item = OpcodeEntry> {
    const OPS: [(u8, &str, ShiftOp); 5] = [
        (0, "rol", ShiftOp::Rol),
        (1, "ror", ShiftOp::Ror),
        (4, "shl", ShiftOp::Shl),
        (5, "shr", ShiftOp::Shr),
        (7, "sar", ShiftOp::Sar),
    ];
    OPS.into_iter().map(move |(ext, mn, op)| OpcodeEntry {
        map: OpMap::OneByte,
        lo: opcode,
        hi: opcode,
        ext: Some(ext),
        mnemonic: mn,
        operands,
        handler: Handler::Shift(op),
        size,
        modes: Modes::Both,
        undefined: match op {
            ShiftOp::Rol | ShiftOp::Ror => "of(count!=1)",
            _ => "af(count!=0) of(count!=1)",
        },
    })
}

fn build_table() -> Vec<OpcodeEntry> {
    let mut t = Vec::new();
    t.extend(alu_family(0x00, alu_rows!("add", Add)));
    t.extend(alu_family(0x08, alu_rows!("or", Or)));
    t.extend(alu_family(0x10, alu_rows!("adc", Adc)));
    t.extend(alu_family(0x18, alu_rows!("sbb", Sbb)));
    t.extend(alu_family(0x20, alu_rows!("and", And)));
    t.extend(alu_family(0x28, alu_rows!("sub", Sub)));
    t.extend(alu_family(0x30, alu_rows!("xor", Xor)));
    t.extend(alu_family(0x38, alu_rows!("cmp", Cmp)));

    t.extend([
        row!(OneByte, 0x50..=0x57, None, "push", [Zv], Handler::Push, Default64),
        row!(OneByte, 0x58..=0x5F, None, "pop", [Zv], Handler::Pop, Default64),
        row!(OneByte, 0x63, None, "movsxd", [Gv, Ed], Handler::Movsxd, Normal),
        row!(OneByte, 0x68, None, "pushw|push|push", [Iz], Handler::Push, Default64),
        row!(OneByte, 0x69, None, "imul", [Gv, Ev, Iz], Handler::ImulN, Normal; undef "pf af zf sf"),
        row!(OneByte, 0x6A, None, "pushw|push|push", [Ibs], Handler::Push, Default64),
        row!(OneByte, 0x6B, None, "imul", [Gv, Ev, Ibs], Handler::ImulN, Normal; undef "pf af zf sf"),
        row!(OneByte, 0x70..=0x7F, None, "j*", [Jb], Handler::Jcc, Fixed64),
    ]);
    t.extend(group1(0x80, &[Eb, Ib], SizeRule::Byte));
    t.extend(group1(0x81, &[Ev, Iz], SizeRule::Normal));
    t.extend(group1(0x83, &[Ev, Ibs], SizeRule::Normal));
    t.extend([
        row!(OneByte, 0x84, None, "test", [Eb, Gb], Handler::Test, Byte; undef "af"),
        row!(OneByte, 0x85, None, "test", [Ev, Gv], Handler::Test, Normal; undef "af"),
        row!(OneByte, 0x86, None, "xchg", [Eb, Gb], Handler::Xchg, Byte),
        row!(OneByte, 0x87, None, "xchg", [Ev, Gv], Handler::Xchg, Normal),
        row!(OneByte, 0x88, None, "mov", [Eb, Gb], Handler::Mov, Byte),
        row!(OneByte, 0x89, None, "mov", [Ev, Gv], Handler::Mov, Normal),
        row!(OneByte, 0x8A, None, "mov", [Gb, Eb], Handler::Mov, Byte),
        row!(OneByte, 0x8B, None, "mov", [Gv, Ev], Handler::Mov, Normal),
        row!(OneByte, 0x8D, None, "lea", [Gv, M], Handler::Lea, Normal),
        row!(OneByte, 0x90, None, "nop", [], Handler::Nop, Normal),
        row!(OneByte, 0x91..=0x97, None, "xchg", [Zv, Acc], Handler::Xchg, Normal),
        row!(OneByte, 0x98, None, "cbw|cwde|cdqe", [], Handler::SignExtendAcc, Normal),
        row!(OneByte, 0x99, None, "cwd|cdq|cqo", [], Handler::SignExtendDx, Normal),
        row!(OneByte, 0xA8, None, "test", [Al, Ib], Handler::Test, Byte; undef "af"),
        row!(OneByte, 0xA9, None, "test", [Acc, Iz], Handler::Test, Normal; undef "af"),
        row!(OneByte, 0xB0..=0xB7, None, "mov", [Zb, Ib], Handler::Mov, Byte),
        row!(OneByte, 0xB8..=0xBF, None, "mov", [Zv, Iv], Handler::Mov, Normal),
    ]);
    t.extend(group2(0xC0, &[Eb, Ib], SizeRule::Byte));
    t.extend(group2(0xC1, &[Ev, Ib], SizeRule::Normal));
    t.extend([
        row!(OneByte, 0xC3, None, "ret", [], Handler::Ret, Fixed64),
        row!(OneByte, 0xC6, Some(0), "mov", [Eb, Ib], Handler::Mov, Byte),
        row!(OneByte, 0xC7, Some(0), "mov", [Ev, Iz], Handler::Mov, Normal),
    ]);
    t.extend(group2(0xD0, &[Eb, One], SizeRule::Byte));
    t.extend(group2(0xD1, &[Ev, One], SizeRule::Normal));
    t.extend(group2(0xD2, &[Eb, Cl], SizeRule::Byte));
    t.extend(group2(0xD3, &[Ev, Cl], SizeRule::Normal));
    t.extend([
        row!(OneByte, 0xE8, None, "call", [Jz], Handler::Call, Fixed64),
        row!(OneByte, 0xE9, None, "jmp", [Jz], Handler::Jmp, Fixed64),
        row!(OneByte, 0xEB, None, "jmp", [Jb], Handler::Jmp, Fixed64),
        row!(OneByte, 0xF6, Some(0), "test", [Eb, Ib], Handler::Test, Byte; undef "af"),
        row!(OneByte, 0xF6, Some(2), "not", [Eb], Handler::Not, Byte),
        row!(OneByte, 0xF6, Some(3), "neg", [Eb], Handler::Neg, Byte),
        row!(OneByte, 0xF6, Some(4), "mul", [Eb], Handler::Mul, Byte; undef "pf af zf sf"),
        row!(OneByte, 0xF6, Some(5), "imul", [Eb], Handler::Imul1, Byte; undef "pf af zf sf"),
        row!(OneByte, 0xF6, Some(6), "div", [Eb], Handler::Div, Byte; undef "cf pf af zf sf of"),
        row!(OneByte, 0xF6, Some(7), "idiv", [Eb], Handler::Idiv, Byte; undef "cf pf af zf sf of"),
        row!(OneByte, 0xF7, Some(0), "test", [Ev, Iz], Handler::Test, Normal; undef "af"),
        row!(OneByte, 0xF7, Some(2), "not", [Ev], Handler::Not, Normal),
        row!(OneByte, 0xF7, Some(3), "neg", [Ev], Handler::Neg, Normal),
        row!(OneByte, 0xF7, Some(4), "mul", [Ev], Handler::Mul, Normal; undef "pf af zf sf"),
        row!(OneByte, 0xF7, Some(5), "imul", [Ev], Handler::Imul1, Normal; undef "pf af zf sf"),
        row!(OneByte, 0xF7, Some(6), "div", [Ev], Handler::Div, Normal; undef "cf pf af zf sf of"),
        row!(OneByte, 0xF7, Some(7), "idiv", [Ev], Handler::Idiv, Normal; undef "cf pf af zf sf of"),
        row!(OneByte, 0xFE, Some(0), "inc", [Eb], Handler::Inc, Byte),
        row!(OneByte, 0xFE, Some(1), "dec", [Eb], Handler::Dec, Byte),
        row!(OneByte, 0xFF, Some(0), "inc", [Ev], Handler::Inc, Normal),
        row!(OneByte, 0xFF, Some(1), "dec", [Ev], Handler::Dec, Normal),
        row!(TwoByte, 0x01, Some(2), "lgdt", [M], Handler::Lgdt, Fixed64, SystemOnly),
        row!(TwoByte, 0x01, Some(3), "lidt", [M], Handler::Lidt, Fixed64, SystemOnly),
        row!(TwoByte, 0x05, None, "syscall", [], Handler::Syscall, Fixed64),
        row!(TwoByte, 0x07, None, "sysretd|sysretd|sysretq", [], Handler::Sysret, Normal, SystemOnly),
        row!(TwoByte, 0x1F, Some(0), "nop", [Ev], Handler::Nop, Normal),
        row!(TwoByte, 0x20, None, "mov", [Rq, Cr], Handler::MovFromCr, Fixed64, SystemOnly),
        row!(TwoByte, 0x22, None, "mov", [Cr, Rq], Handler::MovToCr, Fixed64, SystemOnly),
        row!(TwoByte, 0x40..=0x4F, None, "cmov*", [Gv, Ev], Handler::Cmov, Normal),
        row!(TwoByte, 0x80..=0x8F, None, "j*", [Jz], Handler::Jcc, Fixed64),
        row!(TwoByte, 0x90..=0x9F, Some(0), "set*", [Eb], Handler::Setcc, Byte),
        row!(TwoByte, 0xAF, None, "imul", [Gv, Ev], Handler::ImulN, Normal; undef "pf af zf sf"),
        row!(TwoByte, 0xB6, None, "movzx", [Gv, Eb], Handler::Movzx, Normal),
        row!(TwoByte, 0xB7, None, "movzx", [Gv, Ew], Handler::Movzx, Normal),
        row!(TwoByte, 0xBE, None, "movsx", [Gv, Eb], Handler::Movsx, Normal),
        row!(TwoByte, 0xBF, None, "movsx", [Gv, Ew], Handler::Movsx, Normal),
        row!(TwoByte, 0xC7, Some(6), "rdrand", [Rv], Handler::Rdrand, Normal),
    ]);
    t.sort_by_key(|e| (e.map, e.lo, e.ext));
    t
}

/// Where a decoded opcode byte leads.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Slot {
    Empty,
    Direct(u16),
    /// Indexed by ModR/M `reg`.
    Group([Option<u16>; 8]),
}

pub struct OpcodeTable {
    entries: Vec<OpcodeEntry>,
    slots: [[Slot; 256]; 2],
}

impl OpcodeTable {
    pub fn get() -> &'static OpcodeTable {
        static TABLE: OnceLock<OpcodeTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let entries = build_table();
            let mut slots = [[Slot::Empty; 256]; 2];
            for (i, e) in entries.iter().enumerate() {
                let map = e.map as usize;
                for byte in e.lo..=e.hi {
                    let slot = &mut slots[map][byte as usize];
                    match (e.ext, &mut *slot) {
                        (None, Slot::Empty) => *slot = Slot::Direct(i as u16),
                        (Some(x), Slot::Empty) => {
                            let mut g = [None; 8];
                            g[x as usize] = Some(i as u16);
                            *slot = Slot::Group(g);
                        }
                        (Some(x), Slot::Group(g)) if g[x as usize].is_none() => {
                            g[x as usize] = Some(i as u16)
                        }
                        _ => panic!("conflicting opcode table rows at {:?} {byte:#04x}", e.map),
                    }
                }
            }
            OpcodeTable { entries, slots }
        })
    }

    pub fn entries(&self) -> &[OpcodeEntry] {
        &self.entries
    }

    pub fn entry(&self, index: u16) -> &OpcodeEntry {
        &self.entries[index as usize]
    }

    pub(crate) fn slot(&self, map: OpMap, byte: u8) -> Slot {
        self.slots[map as usize][byte as usize]
    }
}

/// Resolves a `*` or `a|b|c` mnemonic pattern for a concrete encoding.
pub fn expand_mnemonic(pattern: &str, opcode: u8, operand_size: u8) -> String {
    if let Some(prefix) = pattern.strip_suffix('*') {
        return format!("{prefix}{}", CONDITION_NAMES[(opcode & 0xF) as usize]);
    }
    if pattern.contains('|') {
        let parts: Vec<&str> = pattern.split('|').collect();
        let idx = match operand_size {
            2 => 0,
            4 => 1,
            _ => 2,
        };
        return parts[idx].to_string();
    }
    pattern.to_string()
}

/// The implemented-opcodes report: one row per encoding, sorted by
/// (map, byte, extension).
pub fn implemented_opcodes_report() -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:<5} {:<4} {:<10} {:<5} {:<6} undefined", "map", "byte", "ext", "mnemonic", "user", "system");
    for e in OpcodeTable::get().entries() {
        for byte in e.lo..=e.hi {
            let map = match e.map {
                OpMap::OneByte => "1b",
                OpMap::TwoByte => "0F",
            };
            let ext = e.ext.map_or("-".to_string(), |x| format!("/{x}"));
            let mnemonic = expand_mnemonic(e.mnemonic, byte, 4);
            let mnemonic = if e.mnemonic.contains('|') { e.mnemonic.replace('|', "/") } else { mnemonic };
            let user = if e.modes == Modes::Both { "yes" } else { "no" };
            let undef = if e.undefined.is_empty() { "-" } else { e.undefined };
            let _ = writeln!(out, "{map:<6} {byte:02X}    {ext:<4} {mnemonic:<10} {user:<5} {:<6} {undef}", "yes");
        }
    }
    out
}
