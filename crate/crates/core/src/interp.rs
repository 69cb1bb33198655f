//! The fetch-decode-execute step and the bounded run loop.

use crate::decoder::fetch_and_decode;
use crate::semantics::exec_instruction;
use crate::state::{MachineState, MsKind};

/// Executes one instruction. A state with ms set is left untouched; reaching
/// the halt address records `Halted` without executing anything. Every
/// fault lands in ms.
pub fn x86_step(state: &mut MachineState) {
    if state.ms().is_some() {
        return;
    }
    if state.halt_addr == Some(state.rip()) {
        state.fault(MsKind::Halted, "reached halt address");
        return;
    }
    state.tracer.instr_index += 1;
    if let Ok(di) = fetch_and_decode(state) {
        let _ = exec_instruction(&di, state);
    }
}

/// Applies `x86_step` up to `n` times, stopping as soon as ms is set.
/// Returns the number of steps taken.
pub fn x86_run(n: u64, state: &mut MachineState) -> u64 {
    let mut taken = 0;
    while taken < n && state.ms().is_none() {
        x86_step(state);
        taken += 1;
    }
    taken
}
