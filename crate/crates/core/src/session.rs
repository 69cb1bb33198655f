//! The debugger command/response contract. A front end parses one command
//! at a time, hands it to [`Session::execute`] and renders the returned
//! [`Response`]; the session owns the only copy of the machine state.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::AtomicBool;

use crate::config::parse_u64;
use crate::decoder::disassemble_listing;
use crate::env::SyscallRecord;
use crate::instrument::{
    emit_state_log_line, run_with_instrumentation, Breakpoint, BreakpointError, Hooks, StateLogLine, StopReason,
    TraceEvent,
};
use crate::memory::peek_bytes;
use crate::state::{Flag, MachineState, ModelStatus, GPR_NAMES};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DebugCommand {
    StepI,
    Step(u64),
    Break(String),
    Delete(usize),
    Continue,
    Regs,
    Flags,
    Mem { addr: u64, len: usize },
    Disas { addr: Option<u64>, count: Option<usize> },
    LogState(bool),
    LogMem(bool),
    Reset,
    Quit,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    #[error("empty command")]
    Empty,
    #[error("unknown command {0:?}")]
    Unknown(String),
    #[error("usage: {0}")]
    Usage(&'static str),
    #[error(transparent)]
    Breakpoint(#[from] BreakpointError),
}

/// Largest `mem` dump a single command returns.
pub const MAX_MEM_DUMP: usize = 1 << 16;

fn parse_on_off(arg: Option<&str>, usage: &'static str) -> Result<bool, CommandError> {
    match arg {
        Some("on") => Ok(true),
        Some("off") => Ok(false),
        _ => Err(CommandError::Usage(usage)),
    }
}

impl FromStr for DebugCommand {
    type Err = CommandError;

    fn from_str(line: &str) -> Result<Self, CommandError> {
        let line = line.trim();
        let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let args: Vec<&str> = rest.split_whitespace().collect();
        let count = |s: &str| s.parse::<u64>().ok();
        match word {
            "" => Err(CommandError::Empty),
            "stepi" | "si" if args.is_empty() => Ok(DebugCommand::StepI),
            "step" | "s" => match args.as_slice() {
                [] => Ok(DebugCommand::Step(1)),
                [n] => count(n).map(DebugCommand::Step).ok_or(CommandError::Usage("step N")),
                _ => Err(CommandError::Usage("step N")),
            },
            "break" | "b" if !rest.is_empty() => {
                Breakpoint::parse(rest)?;
                Ok(DebugCommand::Break(rest.to_string()))
            }
            "break" | "b" => Err(CommandError::Usage("break EXPR")),
            "delete" | "d" => match args.as_slice() {
                [n] => n.parse().map(DebugCommand::Delete).map_err(|_| CommandError::Usage("delete N")),
                _ => Err(CommandError::Usage("delete N")),
            },
            "continue" | "c" if args.is_empty() => Ok(DebugCommand::Continue),
            "regs" if args.is_empty() => Ok(DebugCommand::Regs),
            "flags" if args.is_empty() => Ok(DebugCommand::Flags),
            "mem" | "x" => match args.as_slice() {
                [a, n] => {
                    let addr = parse_u64(a).map_err(|_| CommandError::Usage("mem ADDR LEN"))?;
                    let len = n.parse().map_err(|_| CommandError::Usage("mem ADDR LEN"))?;
                    if len > MAX_MEM_DUMP {
                        return Err(CommandError::Usage("mem ADDR LEN (LEN at most 65536)"));
                    }
                    Ok(DebugCommand::Mem { addr, len })
                }
                _ => Err(CommandError::Usage("mem ADDR LEN")),
            },
            "disas" => {
                let usage = CommandError::Usage("disas [ADDR [N]]");
                let addr = args.first().map(|a| parse_u64(a)).transpose().map_err(|_| usage.clone())?;
                let count = args.get(1).map(|n| n.parse()).transpose().map_err(|_| usage.clone())?;
                if args.len() > 2 {
                    return Err(usage);
                }
                Ok(DebugCommand::Disas { addr, count })
            }
            "log" => match args.as_slice() {
                ["state", v] => parse_on_off(Some(v), "log state on|off").map(DebugCommand::LogState),
                ["mem", v] => parse_on_off(Some(v), "log mem on|off").map(DebugCommand::LogMem),
                _ => Err(CommandError::Usage("log state|mem on|off")),
            },
            "reset" if args.is_empty() => Ok(DebugCommand::Reset),
            "quit" | "q" if args.is_empty() => Ok(DebugCommand::Quit),
            "stepi" | "si" | "continue" | "c" | "regs" | "flags" | "reset" | "quit" | "q" => {
                Err(CommandError::Usage("command takes no arguments"))
            }
            other => Err(CommandError::Unknown(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Stopped {
        reason: StopReason,
        steps: u64,
        rip: u64,
        ms: Option<ModelStatus>,
        syscalls: Vec<SyscallRecord>,
    },
    Registers {
        line: StateLogLine,
        state: Box<MachineState>,
    },
    Flags {
        rflags: u64,
    },
    Memory {
        addr: u64,
        bytes: Option<Vec<u8>>,
    },
    Disassembly(Vec<String>),
    BreakpointSet(usize),
    BreakpointDeleted(usize),
    LogToggled {
        which: &'static str,
        on: bool,
    },
    Reset,
    Quit {
        line: StateLogLine,
    },
    Error(String),
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Stopped { reason, steps, rip, ms, syscalls } => {
                for s in syscalls {
                    writeln!(f, "syscall {s}")?;
                }
                write!(f, "stopped after {steps} step(s): {reason}; rip={rip:#x}")?;
                if let Some(ms) = ms {
                    write!(f, "\nms: {ms}")?;
                }
                Ok(())
            }
            Response::Registers { line, state } => {
                writeln!(f, "{line}")?;
                for (i, name) in GPR_NAMES.iter().enumerate() {
                    write!(f, "{name:>4} {:016x}", state.gpr[i])?;
                    f.write_str(if i % 4 == 3 { "\n" } else { "  " })?;
                }
                write!(f, " rip {:016x}  rflags {:016x} [{}]", state.rip(), state.rflags(), flag_names(state.rflags()))
            }
            Response::Flags { rflags } => write!(f, "rflags {rflags:016x} [{}]", flag_names(*rflags)),
            Response::Memory { addr, bytes: Some(bytes) } => {
                let mut first = true;
                for (i, chunk) in bytes.chunks(16).enumerate() {
                    if !first {
                        f.write_str("\n")?;
                    }
                    first = false;
                    let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
                    write!(f, "{:#018x}: {}", addr.wrapping_add(16 * i as u64), hex.join(" "))?;
                }
                Ok(())
            }
            Response::Memory { addr, bytes: None } => write!(f, "memory at {addr:#x} is not mapped"),
            Response::Disassembly(lines) => f.write_str(&lines.join("\n")),
            Response::BreakpointSet(id) => write!(f, "breakpoint {id} set"),
            Response::BreakpointDeleted(id) => write!(f, "breakpoint {id} deleted"),
            Response::LogToggled { which, on } => write!(f, "{which} log {}", if *on { "on" } else { "off" }),
            Response::Reset => f.write_str("state reset"),
            Response::Quit { line } => write!(f, "final state\n{line}"),
            Response::Error(e) => write!(f, "error: {e}"),
        }
    }
}

fn flag_names(rflags: u64) -> String {
    let set: Vec<&str> = Flag::ALL.iter().filter(|f| rflags >> f.bit() & 1 != 0).map(|f| f.name()).collect();
    set.join(" ")
}

/// An interactive run: the machine state plus breakpoints and logs.
pub struct Session {
    initial: MachineState,
    state: MachineState,
    breakpoints: BTreeMap<usize, Breakpoint>,
    next_breakpoint: usize,
    /// Steps a single `continue` may take.
    pub budget: u64,
    log_state: bool,
    log_mem: bool,
    pub state_log: Vec<StateLogLine>,
    pub mem_log: Vec<TraceEvent>,
}

impl Session {
    pub fn new(state: MachineState, budget: u64) -> Session {
        Session {
            initial: state.clone(),
            state,
            breakpoints: BTreeMap::new(),
            next_breakpoint: 1,
            budget,
            log_state: false,
            log_mem: false,
            state_log: Vec::new(),
            mem_log: Vec::new(),
        }
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = (usize, &Breakpoint)> {
        self.breakpoints.iter().map(|(&id, b)| (id, b))
    }

    /// Registers a host-side predicate breakpoint and returns its number.
    pub fn add_breakpoint(&mut self, bp: Breakpoint) -> usize {
        let id = self.next_breakpoint;
        self.next_breakpoint += 1;
        self.breakpoints.insert(id, bp);
        id
    }

    fn run(&mut self, n: u64, use_breakpoints: bool, cancel: Option<&AtomicBool>) -> Response {
        let (ids, bps): (Vec<usize>, Vec<Breakpoint>) = if use_breakpoints {
            self.breakpoints.iter().map(|(&id, b)| (id, b.clone())).unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        let hooks = Hooks {
            breakpoints: &bps,
            mem_log: self.log_mem,
            state_log: self.log_state,
            syscall_log: true,
            on_step: None,
            cancel,
        };
        let report = run_with_instrumentation(n, hooks, &mut self.state);
        self.state_log.extend(report.state_log);
        self.mem_log.extend(report.events);
        let reason = match report.stop {
            StopReason::BreakpointHit(i) => StopReason::BreakpointHit(ids[i]),
            other => other,
        };
        Response::Stopped {
            reason,
            steps: report.steps,
            rip: self.state.rip(),
            ms: self.state.ms().cloned(),
            syscalls: report.syscalls,
        }
    }

    /// Executes one command. Observation commands never change the
    /// machine state.
    pub fn execute(&mut self, cmd: DebugCommand, cancel: &AtomicBool) -> Response {
        match cmd {
            DebugCommand::StepI => self.run(1, false, None),
            DebugCommand::Step(n) => self.run(n, false, Some(cancel)),
            DebugCommand::Continue => self.run(self.budget, true, Some(cancel)),
            DebugCommand::Break(expr) => match Breakpoint::parse(&expr) {
                Ok(bp) => Response::BreakpointSet(self.add_breakpoint(bp)),
                Err(e) => Response::Error(e.to_string()),
            },
            DebugCommand::Delete(id) => match self.breakpoints.remove(&id) {
                Some(_) => Response::BreakpointDeleted(id),
                None => Response::Error(format!("no breakpoint {id}")),
            },
            DebugCommand::Regs => Response::Registers {
                line: emit_state_log_line(crate::instrument::instr_index(&self.state), &self.state),
                state: Box::new(self.state.clone()),
            },
            DebugCommand::Flags => Response::Flags { rflags: self.state.rflags() },
            DebugCommand::Mem { addr, len } => {
                let mut buf = vec![0u8; len];
                let bytes = peek_bytes(&self.state, addr, &mut buf).map(|_| buf);
                Response::Memory { addr, bytes }
            }
            DebugCommand::Disas { addr, count } => {
                let start = addr.unwrap_or(self.state.rip());
                let st = &self.state;
                let mut lines = disassemble_listing(start, count.unwrap_or(8), |a| {
                    let mut b = [0u8];
                    peek_bytes(st, a, &mut b).map(|_| b[0])
                });
                let rip_prefix = format!("{:#x}:", st.rip());
                for line in &mut lines {
                    let marker = if line.starts_with(&rip_prefix) { "=> " } else { "   " };
                    line.insert_str(0, marker);
                }
                Response::Disassembly(lines)
            }
            DebugCommand::LogState(on) => {
                self.log_state = on;
                Response::LogToggled { which: "state", on }
            }
            DebugCommand::LogMem(on) => {
                self.log_mem = on;
                Response::LogToggled { which: "memory", on }
            }
            DebugCommand::Reset => {
                self.state = self.initial.clone();
                self.state_log.clear();
                self.mem_log.clear();
                Response::Reset
            }
            DebugCommand::Quit => Response::Quit {
                line: emit_state_log_line(crate::instrument::instr_index(&self.state), &self.state),
            },
        }
    }
}

/// Runs a command script without a terminal and returns the transcript:
/// each command echoed after `> `, followed by its response. Execution stops
/// at `quit`.
pub fn scripted_session(script: &str, state: MachineState, budget: u64) -> String {
    let mut session = Session::new(state, budget);
    let cancel = AtomicBool::new(false);
    let mut out = String::from("x86sim scripted session\n");
    for line in script.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let _ = writeln!(out, "> {line}");
        let response = match line.parse::<DebugCommand>() {
            Ok(cmd) => session.execute(cmd, &cancel),
            Err(e) => Response::Error(e.to_string()),
        };
        let _ = writeln!(out, "{response}");
        if matches!(response, Response::Quit { .. }) {
            break;
        }
    }
    out
}
