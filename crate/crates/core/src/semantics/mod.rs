//! Instruction semantic functions.
//!
//! `exec_instruction` dispatches on the opcode-table handler. Every handler
//! either advances rip (sequentially or to a branch target) or records `ms`
//! and leaves rip at the faulting instruction.

pub mod flags;

use crate::decoder::{effective_address, effective_offset, sign_extend, size_mask, DecodedInst, OperandKind};
use crate::env;
use crate::memory::{linear_read, linear_write, Access};
use crate::opcodes::{AluOp, Handler, Modes, Operand, ShiftOp};
use crate::state::*;
use flags::{arith_flags, result_flags, ArithKind, FlagEffect, FlagValue};

/// A resolved operand location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loc {
    Reg { index: usize, high8: bool, size: u8 },
    Mem { addr: u64, size: u8 },
    Imm(u64),
}

fn width_of(size: u8, high8: bool) -> RegWidth {
    match (size, high8) {
        (1, true) => RegWidth::High8,
        (1, false) => RegWidth::Low8,
        (2, _) => RegWidth::W16,
        (4, _) => RegWidth::W32,
        _ => RegWidth::W64,
    }
}

struct Ctx<'a> {
    di: &'a DecodedInst,
    next_rip: u64,
}

impl Ctx<'_> {
    fn loc(&self, state: &MachineState, index: usize) -> Loc {
        let op = self.di.entry().operands[index];
        match self.di.operand(op) {
            OperandKind::Reg { index, high8, size } => Loc::Reg { index, high8, size },
            OperandKind::Mem { size } => {
                Loc::Mem { addr: effective_address(self.di, self.next_rip, state), size }
            }
            OperandKind::Imm { value, .. } => Loc::Imm(value),
            OperandKind::Rel(rel) => Loc::Imm(self.next_rip.wrapping_add(rel)),
            OperandKind::ControlReg(_) => unreachable!("control registers are handled directly"),
        }
    }

    fn size(&self) -> u8 {
        self.di.operand_size
    }
}

fn read(state: &mut MachineState, loc: Loc) -> Exec<u64> {
    match loc {
        Loc::Reg { index, high8, size } => Ok(state.read_gpr(index, width_of(size, high8))),
        Loc::Mem { addr, size } => Ok(linear_read(state, addr, size as usize, Access::Read)? as u64),
        Loc::Imm(v) => Ok(v),
    }
}

fn write(state: &mut MachineState, loc: Loc, value: u64) -> Exec<()> {
    match loc {
        Loc::Reg { index, high8, size } => {
            state.write_gpr(index, width_of(size, high8), value);
            Ok(())
        }
        Loc::Mem { addr, size } => {
            linear_write(state, addr, size as usize, (value & size_mask(size)) as u128)
        }
        Loc::Imm(_) => unreachable!("immediates are never destinations"),
    }
}

fn push(state: &mut MachineState, size: u8, value: u64) -> Exec<()> {
    let rsp = state.gpr[RSP].wrapping_sub(size as u64);
    linear_write(state, rsp, size as usize, (value & size_mask(size)) as u128)?;
    state.gpr[RSP] = rsp;
    Ok(())
}

fn pop(state: &mut MachineState, size: u8) -> Exec<u64> {
    let rsp = state.gpr[RSP];
    let value = linear_read(state, rsp, size as usize, Access::Read)? as u64;
    state.gpr[RSP] = rsp.wrapping_add(size as u64);
    Ok(value)
}

/// Evaluates one of the sixteen condition codes against rflags.
pub fn condition(state: &MachineState, cc: u8) -> bool {
    let f = |flag| state.read_flag(flag);
    let base = match cc >> 1 {
        0 => f(Flag::OF),
        1 => f(Flag::CF),
        2 => f(Flag::ZF),
        3 => f(Flag::CF) || f(Flag::ZF),
        4 => f(Flag::SF),
        5 => f(Flag::PF),
        6 => f(Flag::SF) != f(Flag::OF),
        _ => f(Flag::ZF) || (f(Flag::SF) != f(Flag::OF)),
    };
    base != (cc & 1 == 1)
}

fn signed(value: u64, size: u8) -> i64 {
    sign_extend(value, size as u32 * 8) as i64
}

/// Executes a decoded instruction against the state.
pub fn exec_instruction(di: &DecodedInst, state: &mut MachineState) -> Exec<()> {
    let entry = di.entry();
    if entry.modes == Modes::SystemOnly && state.user_level_mode {
        return Err(state.fault(
            MsKind::UnimplementedOpcode,
            format!("{} is available only in system-level mode", di.mnemonic()),
        ));
    }
    let ctx = Ctx { di, next_rip: state.rip().wrapping_add(di.length as u64) };
    let next = match entry.handler {
        Handler::Alu(op) => exec_alu(&ctx, op, state)?,
        Handler::Test => {
            let (a, b) = (ctx.loc(state, 0), ctx.loc(state, 1));
            let (x, y) = (read(state, a)?, read(state, b)?);
            let r = x & y;
            arith_flags(ArithKind::Logic, ctx.size(), x, y, r).apply(state);
            ctx.next_rip
        }
        Handler::Xchg => {
            let (a, b) = (ctx.loc(state, 0), ctx.loc(state, 1));
            let (x, y) = (read(state, a)?, read(state, b)?);
            // Memory operands are always first, so a faulting write leaves
            // the register untouched.
            write(state, a, y)?;
            write(state, b, x)?;
            ctx.next_rip
        }
        Handler::Mov => {
            let (dst, src) = (ctx.loc(state, 0), ctx.loc(state, 1));
            let v = read(state, src)?;
            write(state, dst, v)?;
            ctx.next_rip
        }
        Handler::Movzx | Handler::Movsx | Handler::Movsxd => {
            let (dst, src) = (ctx.loc(state, 0), ctx.loc(state, 1));
            let from = match entry.operands[1] {
                Operand::Eb => 1,
                Operand::Ew => 2,
                _ => 4,
            };
            let v = read(state, src)?;
            let v = if entry.handler == Handler::Movzx { v } else { sign_extend(v, from * 8) };
            write(state, dst, v & size_mask(ctx.size()))?;
            ctx.next_rip
        }
        Handler::Lea => {
            let dst = ctx.loc(state, 0);
            let ea = effective_offset(di, ctx.next_rip, state);
            write(state, dst, ea & size_mask(ctx.size()))?;
            ctx.next_rip
        }
        Handler::Push => {
            let src = ctx.loc(state, 0);
            let v = read(state, src)?;
            push(state, ctx.size(), v)?;
            ctx.next_rip
        }
        Handler::Pop => {
            let dst = ctx.loc(state, 0);
            let v = pop(state, ctx.size())?;
            write(state, dst, v)?;
            ctx.next_rip
        }
        Handler::Inc | Handler::Dec => {
            let dst = ctx.loc(state, 0);
            let v = read(state, dst)?;
            let (r, kind) = if entry.handler == Handler::Inc {
                (v.wrapping_add(1), ArithKind::Inc)
            } else {
                (v.wrapping_sub(1), ArithKind::Dec)
            };
            let r = r & size_mask(ctx.size());
            write(state, dst, r)?;
            arith_flags(kind, ctx.size(), v, 1, r).apply(state);
            ctx.next_rip
        }
        Handler::Not => {
            let dst = ctx.loc(state, 0);
            let v = read(state, dst)?;
            write(state, dst, !v & size_mask(ctx.size()))?;
            ctx.next_rip
        }
        Handler::Neg => {
            let dst = ctx.loc(state, 0);
            let v = read(state, dst)?;
            let r = v.wrapping_neg() & size_mask(ctx.size());
            write(state, dst, r)?;
            arith_flags(ArithKind::Neg, ctx.size(), 0, v, r).apply(state);
            ctx.next_rip
        }
        Handler::Mul | Handler::Imul1 | Handler::Div | Handler::Idiv => {
            let src = ctx.loc(state, 0);
            let v = read(state, src)?;
            exec_mul_div(entry.handler, ctx.size(), v, state)?;
            ctx.next_rip
        }
        Handler::ImulN => {
            let size = ctx.size();
            let dst = ctx.loc(state, 0);
            let src = ctx.loc(state, 1);
            let a = read(state, src)?;
            let b = if entry.operands.len() == 3 { read(state, ctx.loc(state, 2))? } else { read(state, dst)? };
            let wide = signed(a, size) as i128 * signed(b, size) as i128;
            let r = wide as u64 & size_mask(size);
            write(state, dst, r)?;
            let overflow = signed(r, size) as i128 != wide;
            mul_flags(overflow).apply(state);
            ctx.next_rip
        }
        Handler::SignExtendAcc => {
            let size = ctx.size();
            let half = state.read_gpr(RAX, width_of(size / 2, false));
            let v = sign_extend(half, size as u32 * 4) & size_mask(size);
            state.write_gpr(RAX, width_of(size, false), v);
            ctx.next_rip
        }
        Handler::SignExtendDx => {
            let size = ctx.size();
            let acc = state.read_gpr(RAX, width_of(size, false));
            let fill = if signed(acc, size) < 0 { size_mask(size) } else { 0 };
            state.write_gpr(RDX, width_of(size, false), fill);
            ctx.next_rip
        }
        Handler::Shift(op) => {
            let dst = ctx.loc(state, 0);
            let count_loc = ctx.loc(state, 1);
            let count = read(state, count_loc)?;
            exec_shift_rotate(op, ctx.size(), dst, count, state)?;
            ctx.next_rip
        }
        Handler::Jcc => {
            if condition(state, di.opcode & 0xF) {
                ctx.next_rip.wrapping_add(di.imm)
            } else {
                ctx.next_rip
            }
        }
        Handler::Jmp => ctx.next_rip.wrapping_add(di.imm),
        Handler::Call => {
            let target = ctx.next_rip.wrapping_add(di.imm);
            if !is_canonical(target) {
                return Err(state.fault(MsKind::BadMemoryAccess, format!("call to non-canonical {target:#x}")));
            }
            push(state, 8, ctx.next_rip)?;
            target
        }
        Handler::Ret => {
            let rsp = state.gpr[RSP];
            let target = pop(state, 8)?;
            if !is_canonical(target) {
                state.gpr[RSP] = rsp;
                return Err(state.fault(MsKind::BadMemoryAccess, format!("return to non-canonical {target:#x}")));
            }
            target
        }
        Handler::Cmov => {
            let (dst, src) = (ctx.loc(state, 0), ctx.loc(state, 1));
            let v = read(state, src)?;
            if condition(state, di.opcode & 0xF) {
                write(state, dst, v)?;
            } else if ctx.size() == 4 {
                // 32-bit destinations are zero-extended even when not taken.
                let cur = read(state, dst)?;
                write(state, dst, cur)?;
            }
            ctx.next_rip
        }
        Handler::Setcc => {
            let dst = ctx.loc(state, 0);
            let bit = condition(state, di.opcode & 0xF);
            write(state, dst, bit as u64)?;
            ctx.next_rip
        }
        Handler::Nop => ctx.next_rip,
        Handler::Rdrand => {
            let dst = ctx.loc(state, 0);
            exec_rdrand(ctx.size(), dst, state)?;
            ctx.next_rip
        }
        Handler::Syscall => {
            exec_syscall_instruction(ctx.next_rip, state)?;
            return Ok(());
        }
        Handler::Sysret => {
            // Without REX.W the return is to compatibility mode, whose
            // 32-bit target is the low half of rcx.
            let target = if di.operand_size == 8 { state.gpr[RCX] } else { state.gpr[RCX] & 0xFFFF_FFFF };
            let flags = state.gpr[R11];
            state.set_rip(target)?;
            state.set_rflags(flags);
            return Ok(());
        }
        Handler::MovFromCr | Handler::MovToCr => {
            let OperandKind::ControlReg(n) = di.operand(Operand::Cr) else { unreachable!() };
            let gpr = di.rm_index();
            let slot = match n {
                0 => &mut state.cr0,
                2 => &mut state.cr2,
                3 => &mut state.cr3,
                4 => &mut state.cr4,
                _ => {
                    return Err(state.fault(MsKind::UnimplementedOpcode, format!("cr{n} is not modeled")))
                }
            };
            if entry.handler == Handler::MovToCr {
                *slot = state.gpr[gpr];
            } else {
                let v = *slot;
                state.gpr[gpr] = v;
            }
            ctx.next_rip
        }
        Handler::Lgdt | Handler::Lidt => {
            let addr = effective_address(di, ctx.next_rip, state);
            let limit = linear_read(state, addr, 2, Access::Read)? as u16;
            let base = linear_read(state, addr.wrapping_add(2), 8, Access::Read)? as u64;
            let d = PseudoDescriptor { base, limit };
            if entry.handler == Handler::Lgdt {
                state.gdtr = d;
            } else {
                state.idtr = d;
            }
            ctx.next_rip
        }
    };
    state.set_rip(next)
}

fn exec_alu(ctx: &Ctx<'_>, op: AluOp, state: &mut MachineState) -> Exec<u64> {
    let size = ctx.size();
    let mask = size_mask(size);
    let (dst, src) = (ctx.loc(state, 0), ctx.loc(state, 1));
    let a = read(state, dst)?;
    let b = read(state, src)? & mask;
    let cf = state.read_flag(Flag::CF);
    let (r, kind) = match op {
        AluOp::Add => (a.wrapping_add(b), ArithKind::Add),
        AluOp::Adc => (a.wrapping_add(b).wrapping_add(cf as u64), ArithKind::Adc { carry_in: cf }),
        AluOp::Sub | AluOp::Cmp => (a.wrapping_sub(b), ArithKind::Sub),
        AluOp::Sbb => (a.wrapping_sub(b).wrapping_sub(cf as u64), ArithKind::Sbb { borrow_in: cf }),
        AluOp::And => (a & b, ArithKind::Logic),
        AluOp::Or => (a | b, ArithKind::Logic),
        AluOp::Xor => (a ^ b, ArithKind::Logic),
    };
    let r = r & mask;
    if op != AluOp::Cmp {
        write(state, dst, r)?;
    }
    arith_flags(kind, size, a, b, r).apply(state);
    Ok(ctx.next_rip)
}

fn mul_flags(overflow: bool) -> FlagEffect {
    FlagEffect {
        cf: FlagValue::Set(overflow),
        pf: FlagValue::Undefined,
        af: FlagValue::Undefined,
        zf: FlagValue::Undefined,
        sf: FlagValue::Undefined,
        of: FlagValue::Set(overflow),
    }
}

const ALL_UNDEFINED: FlagEffect = FlagEffect {
    cf: FlagValue::Undefined,
    pf: FlagValue::Undefined,
    af: FlagValue::Undefined,
    zf: FlagValue::Undefined,
    sf: FlagValue::Undefined,
    of: FlagValue::Undefined,
};

/// Reads the implicit accumulator pair: AX for bytes, else rDX:rAX.
fn dividend(state: &MachineState, size: u8) -> u128 {
    if size == 1 {
        state.read_gpr(RAX, RegWidth::W16) as u128
    } else {
        let w = width_of(size, false);
        (state.read_gpr(RDX, w) as u128) << (size as u32 * 8) | state.read_gpr(RAX, w) as u128
    }
}

fn store_pair(state: &mut MachineState, size: u8, low: u64, high: u64) {
    if size == 1 {
        state.write_gpr(RAX, RegWidth::W16, (high & 0xFF) << 8 | (low & 0xFF));
    } else {
        let w = width_of(size, false);
        state.write_gpr(RAX, w, low);
        state.write_gpr(RDX, w, high);
    }
}

/// MUL/IMUL (one operand) and DIV/IDIV on the accumulator pair.
pub fn exec_mul_div(kind: Handler, size: u8, src: u64, state: &mut MachineState) -> Exec<()> {
    let mask = size_mask(size);
    let bits = size as u32 * 8;
    let acc = state.read_gpr(RAX, width_of(size, false));
    match kind {
        Handler::Mul => {
            let product = acc as u128 * (src & mask) as u128;
            let (low, high) = (product as u64 & mask, (product >> bits) as u64 & mask);
            store_pair(state, size, low, high);
            mul_flags(high != 0).apply(state);
        }
        Handler::Imul1 => {
            let product = signed(acc, size) as i128 * signed(src, size) as i128;
            let low = product as u64 & mask;
            let high = (product >> bits) as u64 & mask;
            store_pair(state, size, low, high);
            mul_flags(signed(low, size) as i128 != product).apply(state);
        }
        Handler::Div => {
            let divisor = (src & mask) as u128;
            if divisor == 0 {
                return Err(state.fault(MsKind::DivideError, "divide by zero"));
            }
            let n = dividend(state, size);
            let (q, r) = (n / divisor, n % divisor);
            if q > mask as u128 {
                return Err(state.fault(MsKind::DivideError, "quotient overflow"));
            }
            store_pair(state, size, q as u64, r as u64);
            ALL_UNDEFINED.apply(state);
        }
        Handler::Idiv => {
            let divisor = signed(src, size) as i128;
            if divisor == 0 {
                return Err(state.fault(MsKind::DivideError, "divide by zero"));
            }
            let raw = dividend(state, size);
            let n = ((raw << (128 - 2 * bits)) as i128) >> (128 - 2 * bits);
            let (q, r) = (n / divisor, n % divisor);
            let (min, max) = (-(1i128 << (bits - 1)), (1i128 << (bits - 1)) - 1);
            if q < min || q > max {
                return Err(state.fault(MsKind::DivideError, "quotient overflow"));
            }
            store_pair(state, size, q as u64 & mask, r as u64 & mask);
            ALL_UNDEFINED.apply(state);
        }
        _ => unreachable!("not a multiply or divide handler"),
    }
    Ok(())
}

/// Shifts and rotates. The count is masked to 6 bits for 64-bit operands and
/// 5 bits otherwise; a masked count of zero changes nothing.
fn exec_shift_rotate(op: ShiftOp, size: u8, dst: Loc, count: u64, state: &mut MachineState) -> Exec<()> {
    let bits = size as u32 * 8;
    let mask = size_mask(size);
    let count = (count & if size == 8 { 0x3F } else { 0x1F }) as u32;
    if count == 0 {
        return Ok(());
    }
    let v = read(state, dst)? & mask;
    let msb = |x: u64| x >> (bits - 1) & 1 == 1;
    let one = count == 1;
    let (result, effect) = match op {
        ShiftOp::Shl | ShiftOp::Shr | ShiftOp::Sar => {
            let (r, cf) = match op {
                ShiftOp::Shl => {
                    let wide = (v as u128) << count;
                    ((wide as u64) & mask, (wide >> bits) & 1 == 1)
                }
                ShiftOp::Shr => ((v as u128 >> count) as u64, (v as u128 >> (count - 1)) & 1 == 1),
                _ => {
                    let sv = signed(v, size) as i128;
                    ((sv >> count) as u64 & mask, (sv >> (count - 1)) & 1 == 1)
                }
            };
            let of = if !one {
                FlagValue::Undefined
            } else {
                FlagValue::Set(match op {
                    ShiftOp::Shl => msb(r) != cf,
                    ShiftOp::Shr => msb(v),
                    _ => false,
                })
            };
            // SHL and SHR leave CF undefined once every bit has been shifted out.
            let cf = if op != ShiftOp::Sar && count >= bits { FlagValue::Undefined } else { FlagValue::Set(cf) };
            let (sf, zf, pf) = result_flags(size, r);
            (r, FlagEffect { cf, pf, af: FlagValue::Undefined, zf, sf, of })
        }
        ShiftOp::Rol | ShiftOp::Ror => {
            let n = count % bits;
            let r = if n == 0 {
                v
            } else if op == ShiftOp::Rol {
                ((v << n) | (v >> (bits - n))) & mask
            } else {
                ((v >> n) | (v << (bits - n))) & mask
            };
            let cf = if op == ShiftOp::Rol { r & 1 == 1 } else { msb(r) };
            let of = if !one {
                FlagValue::Undefined
            } else if op == ShiftOp::Rol {
                FlagValue::Set(msb(r) != cf)
            } else {
                FlagValue::Set(msb(r) != (r >> (bits - 2) & 1 == 1))
            };
            (r, FlagEffect { cf: FlagValue::Set(cf), of, ..FlagEffect::UNCHANGED })
        }
    };
    write(state, dst, result)?;
    effect.apply(state);
    Ok(())
}

fn exec_rdrand(size: u8, dst: Loc, state: &mut MachineState) -> Exec<()> {
    let v = state.undef_read() & size_mask(size);
    write(state, dst, v)?;
    state.write_flag(Flag::CF, true);
    for f in [Flag::OF, Flag::SF, Flag::ZF, Flag::AF, Flag::PF] {
        state.write_flag(f, false);
    }
    Ok(())
}

/// SYSCALL: fully simulated in user-level mode, the architectural transition
/// through IA32_LSTAR in system-level mode.
pub fn exec_syscall_instruction(next_rip: u64, state: &mut MachineState) -> Exec<()> {
    if state.user_level_mode {
        let record = env::env_syscall(state)?;
        if let Some(log) = state.tracer.syscall_log.as_mut() {
            log.push(record);
        }
        return state.set_rip(next_rip);
    }
    let target = state.msr[MSR_LSTAR_IDX];
    if !is_canonical(target) {
        return Err(state.fault(MsKind::BadMemoryAccess, format!("IA32_LSTAR {target:#x} is not canonical")));
    }
    state.gpr[RCX] = next_rip;
    state.gpr[R11] = state.rflags();
    let masked = state.rflags() & !state.msr[MSR_FMASK_IDX];
    state.set_rflags(masked);
    state.set_rip(target)
}
