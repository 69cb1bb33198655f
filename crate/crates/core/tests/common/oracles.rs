//! Independent reference models the simulator is checked against.

use x86sim::decoder::{decode_bytes, OperandKind};
use x86sim::memory::peek_bytes;
use x86sim::MachineState;

/// Characters, words and lines of a file, where a word is a maximal run of
/// bytes other than space and `\t` `\n` `\v` `\f` `\r`.
pub fn wc_spec(bytes: &[u8]) -> (u64, u64, u64) {
    let is_space = |b: u8| b == b' ' || (9..=13).contains(&b);
    let mut words = 0;
    let mut in_word = false;
    for &b in bytes {
        if is_space(b) {
            in_word = false;
        } else if !in_word {
            in_word = true;
            words += 1;
        }
    }
    let lines = bytes.iter().filter(|&&b| b == b'\n').count();
    (bytes.len() as u64, words, lines as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alu8 {
    Add,
    Adc,
    Sub,
    Sbb,
    Cmp,
    And,
    Or,
    Xor,
}

impl Alu8 {
    pub const ALL: [Alu8; 8] = [Alu8::Add, Alu8::Adc, Alu8::Sub, Alu8::Sbb, Alu8::Cmp, Alu8::And, Alu8::Or, Alu8::Xor];

    /// `op al, bl` (the Eb, Gb form with ModR/M 0xD8).
    pub fn encoding(self) -> [u8; 2] {
        let op = match self {
            Alu8::Add => 0x00,
            Alu8::Or => 0x08,
            Alu8::Adc => 0x10,
            Alu8::Sbb => 0x18,
            Alu8::And => 0x20,
            Alu8::Sub => 0x28,
            Alu8::Xor => 0x30,
            Alu8::Cmp => 0x38,
        };
        [op, 0xD8]
    }

    pub fn writes_result(self) -> bool {
        self != Alu8::Cmp
    }
}

pub const CF: u64 = 1 << 0;
pub const PF: u64 = 1 << 2;
pub const AF: u64 = 1 << 4;
pub const ZF: u64 = 1 << 6;
pub const SF: u64 = 1 << 7;
pub const OF: u64 = 1 << 11;

/// Reference result of an 8-bit ALU operation computed over unbounded
/// integers: (result byte, flag bits, mask of flags the ISA defines).
pub fn alu8_reference(op: Alu8, a: u8, b: u8, carry: bool) -> (u8, u64, u64) {
    let (ua, ub, c) = (a as i64, b as i64, carry as i64);
    let (sa, sb) = (a as i8 as i64, b as i8 as i64);
    let mut flags = 0;
    let mut set = |bit: u64, on: bool| {
        if on {
            flags |= bit;
        }
    };
    let (result, defined) = match op {
        Alu8::Add | Alu8::Adc => {
            let c = if op == Alu8::Adc { c } else { 0 };
            let wide = ua + ub + c;
            set(CF, wide > 0xFF);
            set(OF, !(-128..=127).contains(&(sa + sb + c)));
            set(AF, (ua & 0xF) + (ub & 0xF) + c > 0xF);
            (wide, CF | PF | AF | ZF | SF | OF)
        }
        Alu8::Sub | Alu8::Sbb | Alu8::Cmp => {
            let c = if op == Alu8::Sbb { c } else { 0 };
            let wide = ua - ub - c;
            set(CF, wide < 0);
            set(OF, !(-128..=127).contains(&(sa - sb - c)));
            set(AF, (ua & 0xF) - (ub & 0xF) - c < 0);
            (wide, CF | PF | AF | ZF | SF | OF)
        }
        Alu8::And => (ua & ub, CF | PF | ZF | SF | OF),
        Alu8::Or => (ua | ub, CF | PF | ZF | SF | OF),
        Alu8::Xor => (ua ^ ub, CF | PF | ZF | SF | OF),
    };
    let r = result.rem_euclid(256) as u8;
    set(ZF, r == 0);
    set(SF, r >= 0x80);
    set(PF, r.count_ones().is_multiple_of(2));
    (r, flags, defined)
}

/// Number of architecturally undefined values the next instruction
/// produces, by the Intel SDM flag tables:
///
/// * AND, OR, XOR, TEST: AF.
/// * MUL, IMUL: SF, ZF, AF, PF.
/// * DIV, IDIV: CF, OF, SF, ZF, AF, PF.
/// * SHL, SHR, SAR with a nonzero masked count: AF; OF unless the count is
///   1; CF for SHL/SHR when the count reaches the operand width.
/// * ROL, ROR with a nonzero masked count other than 1: OF.
/// * RDRAND: the random value.
///
/// Returns `None` when the bytes at rip do not decode.
pub fn expected_undefined(state: &MachineState) -> Option<u64> {
    let mut bytes = [0u8; 15];
    peek_bytes(state, state.rip(), &mut bytes)?;
    let di = decode_bytes(&bytes).ok()?;
    let mnemonic = di.mnemonic();
    let ops = di.operands();
    let count = |state: &MachineState| -> u64 {
        let raw = match ops.get(1).map(|&op| di.operand(op)) {
            Some(OperandKind::Imm { value, .. }) => value,
            Some(OperandKind::Reg { index, .. }) => state.gpr[index] & 0xFF,
            _ => 1,
        };
        raw & if di.operand_size == 8 { 63 } else { 31 }
    };
    let size_bits = match ops.first().map(|&op| di.operand(op)) {
        Some(OperandKind::Reg { size, .. }) | Some(OperandKind::Mem { size }) => size as u64 * 8,
        _ => di.operand_size as u64 * 8,
    };
    Some(match mnemonic.as_str() {
        "and" | "or" | "xor" | "test" => 1,
        "mul" | "imul" => 4,
        "div" | "idiv" => 6,
        "shl" | "shr" | "sar" => {
            let n = count(state);
            if n == 0 {
                0
            } else {
                1 + (n != 1) as u64 + (mnemonic != "sar" && n >= size_bits) as u64
            }
        }
        "rol" | "ror" => {
            let n = count(state);
            (n > 1) as u64
        }
        "rdrand" => 1,
        _ => 0,
    })
}

