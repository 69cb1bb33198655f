//! An executable x86-64 instruction-set simulator in interpreter style.
//!
//! The machine state ([`MachineState`]) is a plain value. [`x86_step`]
//! fetches, decodes and executes one instruction; [`x86_run`] repeats it
//! until the model status (`ms`) is set or the step budget runs out.
//! Programs run either in user-level mode (linear memory, system calls
//! simulated against an [`Environment`]) or in system-level mode (physical
//! memory behind a four-level page walk, with or without accessed/dirty
//! marking).

pub mod cli;
pub mod config;
pub mod decoder;
pub mod env;
pub mod instrument;
pub mod interp;
pub mod loader;
pub mod memory;
pub mod opcodes;
pub mod semantics;
pub mod session;
pub mod state;

pub use decoder::{decode_bytes, fetch_and_decode, DecodedInst};
pub use env::Environment;
pub use instrument::{run_with_instrumentation, Breakpoint, Hooks, RunReport, StopReason};
pub use interp::{x86_run, x86_step};
pub use loader::{binary_file_load, init_x86_state, parse_elf, LoadImage};
pub use memory::{init_system_level_mode, la_to_pa, linear_read, linear_write, Access, PhysicalMemory};
pub use semantics::exec_instruction;
pub use state::{MachineState, ModelStatus, MsKind, OsInfo, UndefPolicy};
