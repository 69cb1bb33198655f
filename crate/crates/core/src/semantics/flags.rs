//! Arithmetic flag computation and undefined-flag materialization.

use crate::decoder::size_mask;
use crate::state::{Flag, MachineState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlagValue {
    Set(bool),
    Unchanged,
    Undefined,
}

/// Per-flag outcome of an instruction, for CF, PF, AF, ZF, SF and OF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlagEffect {
    pub cf: FlagValue,
    pub pf: FlagValue,
    pub af: FlagValue,
    pub zf: FlagValue,
    pub sf: FlagValue,
    pub of: FlagValue,
}

impl FlagEffect {
    pub const UNCHANGED: FlagEffect = FlagEffect {
        cf: FlagValue::Unchanged,
        pf: FlagValue::Unchanged,
        af: FlagValue::Unchanged,
        zf: FlagValue::Unchanged,
        sf: FlagValue::Unchanged,
        of: FlagValue::Unchanged,
    };

    /// In materialization order: CF, PF, AF, ZF, SF, OF.
    pub fn entries(&self) -> [(Flag, FlagValue); 6] {
        [
            (Flag::CF, self.cf),
            (Flag::PF, self.pf),
            (Flag::AF, self.af),
            (Flag::ZF, self.zf),
            (Flag::SF, self.sf),
            (Flag::OF, self.of),
        ]
    }

    pub fn undefined_count(&self) -> usize {
        self.entries().iter().filter(|(_, v)| *v == FlagValue::Undefined).count()
    }

    /// Writes the effect into rflags; each undefined flag consumes one
    /// indeterminate value (its low bit becomes the flag).
    pub fn apply(&self, state: &mut MachineState) {
        for (flag, value) in self.entries() {
            match value {
                FlagValue::Set(bit) => state.write_flag(flag, bit),
                FlagValue::Unchanged => {}
                FlagValue::Undefined => {
                    let v = state.undef_read();
                    state.write_flag(flag, v & 1 == 1);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArithKind {
    Add,
    Adc { carry_in: bool },
    Sub,
    Sbb { borrow_in: bool },
    Inc,
    Dec,
    Neg,
    Logic,
}

pub fn parity_even(value: u64) -> bool {
    (value as u8).count_ones().is_multiple_of(2)
}

fn sign_bit(value: u64, width: u8) -> bool {
    value >> (width as u32 * 8 - 1) & 1 == 1
}

/// Flags for the add/subtract/logic family. Operands and result are masked
/// to `width` bytes; for `Neg` the operand is `src2` and `src1` is zero.
pub fn arith_flags(kind: ArithKind, width: u8, src1: u64, src2: u64, result: u64) -> FlagEffect {
    let mask = size_mask(width);
    let (a, b, r) = (src1 & mask, src2 & mask, result & mask);
    let zf = FlagValue::Set(r == 0);
    let sf = FlagValue::Set(sign_bit(r, width));
    let pf = FlagValue::Set(parity_even(r));
    let aux = FlagValue::Set((a ^ b ^ r) & 0x10 != 0);
    let add_of = FlagValue::Set(sign_bit((a ^ r) & (b ^ r), width));
    let sub_of = FlagValue::Set(sign_bit((a ^ b) & (a ^ r), width));
    let (cf, af, of) = match kind {
        ArithKind::Add => (FlagValue::Set((a as u128 + b as u128) > mask as u128), aux, add_of),
        ArithKind::Adc { carry_in } => {
            (FlagValue::Set((a as u128 + b as u128 + carry_in as u128) > mask as u128), aux, add_of)
        }
        ArithKind::Sub => (FlagValue::Set(a < b), aux, sub_of),
        ArithKind::Sbb { borrow_in } => {
            (FlagValue::Set((a as u128) < b as u128 + borrow_in as u128), aux, sub_of)
        }
        ArithKind::Inc => (FlagValue::Unchanged, aux, add_of),
        ArithKind::Dec => (FlagValue::Unchanged, aux, sub_of),
        ArithKind::Neg => (
            FlagValue::Set(b != 0),
            aux,
            FlagValue::Set(b == (1u64 << (width as u32 * 8 - 1))),
        ),
        ArithKind::Logic => (FlagValue::Set(false), FlagValue::Undefined, FlagValue::Set(false)),
    };
    FlagEffect { cf, pf, af, zf, sf, of }
}

/// SF, ZF and PF from a result, the rest left as given.
pub fn result_flags(width: u8, result: u64) -> (FlagValue, FlagValue, FlagValue) {
    let r = result & size_mask(width);
    (FlagValue::Set(sign_bit(r, width)), FlagValue::Set(r == 0), FlagValue::Set(parity_even(r)))
}
