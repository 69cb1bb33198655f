//! Dynamic instrumentation: memory-access tracing, bit-exact state logs,
//! predicate breakpoints and the instrumented run loop.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::env::SyscallRecord;
use crate::interp::x86_step;
use crate::memory::peek_bytes;
use crate::state::{gpr_index, Flag, MachineState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    MemRead,
    MemWrite,
}

/// One sized data access, in program order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub instr_index: u64,
    pub rip: u64,
    pub kind: AccessKind,
    pub lin: u64,
    pub phys: Option<u64>,
    pub nbytes: usize,
    pub value: u128,
}

impl TraceEvent {
    /// `M <instr-index> <rip> <R|W> <lin> <nbytes> <value>`.
    pub fn log_line(&self) -> String {
        let kind = match self.kind {
            AccessKind::MemRead => 'R',
            AccessKind::MemWrite => 'W',
        };
        format!(
            "M {} {:016X} {} {:016X} {} {:X}",
            self.instr_index, self.rip, kind, self.lin, self.nbytes, self.value
        )
    }
}

/// Observation state carried alongside a machine state. It never takes part
/// in state equality: two states that differ only in what was being
/// recorded are the same machine state.
#[derive(Debug, Clone, Default)]
pub(crate) struct Tracer {
    pub(crate) mem_log: Option<Vec<TraceEvent>>,
    pub(crate) syscall_log: Option<Vec<SyscallRecord>>,
    pub(crate) instr_index: u64,
}

impl PartialEq for Tracer {
    fn eq(&self, _: &Tracer) -> bool {
        true
    }
}

/// Number of instructions attempted on this state so far.
pub fn instr_index(state: &MachineState) -> u64 {
    state.tracer.instr_index
}

/// One line of the state log.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateLogLine(pub String);

impl StateLogLine {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StateLogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `S <index> <RIP> <RAX> ... <R15> <RFLAGS>`, every value as 16 upper-case
/// hex digits.
pub fn emit_state_log_line(instr_index: u64, state: &MachineState) -> StateLogLine {
    use fmt::Write;
    let mut line = String::with_capacity(2 + 20 + 18 * 17);
    let _ = write!(line, "S {instr_index} {:016X}", state.rip());
    for v in state.gpr {
        let _ = write!(line, " {v:016X}");
    }
    let _ = write!(line, " {:016X}", state.rflags());
    StateLogLine(line)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad breakpoint expression at column {column}: {message}")]
pub struct BreakpointError {
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Gpr(usize),
    Flag(Flag),
    Rip,
    Literal(u64),
    Mem { addr: Box<Term>, width: u8 },
    Sum { lo: Box<Term>, hi: Box<Term> },
}

/// Largest range a `sum()` term reads.
pub const MAX_SUM_RANGE: u64 = 1 << 24;

impl Term {
    /// Evaluates without side effects; `None` when memory is unreadable.
    pub fn eval(&self, state: &MachineState) -> Option<u64> {
        match self {
            Term::Gpr(i) => Some(state.gpr[*i]),
            Term::Flag(f) => Some(state.read_flag(*f) as u64),
            Term::Rip => Some(state.rip()),
            Term::Literal(v) => Some(*v),
            Term::Mem { addr, width } => {
                let addr = addr.eval(state)?;
                let mut buf = [0u8; 8];
                peek_bytes(state, addr, &mut buf[..*width as usize])?;
                Some(u64::from_le_bytes(buf))
            }
            Term::Sum { lo, hi } => {
                let (lo, hi) = (lo.eval(state)?, hi.eval(state)?);
                if hi <= lo {
                    return Some(0);
                }
                if hi - lo > MAX_SUM_RANGE {
                    return None;
                }
                let mut buf = vec![0u8; (hi - lo) as usize];
                peek_bytes(state, lo, &mut buf)?;
                Some(buf.iter().map(|&b| b as u64).sum())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub lhs: Term,
    pub op: CmpOp,
    pub rhs: Term,
}

/// A parsed predicate: comparisons joined by `&&`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BreakExpr {
    pub clauses: Vec<Comparison>,
}

impl BreakExpr {
    pub fn parse(text: &str) -> Result<BreakExpr, BreakpointError> {
        let mut p = Parser { src: text, tokens: tokenize(text)?, pos: 0 };
        let mut clauses = vec![p.comparison()?];
        while p.eat(&Tok::AndAnd) {
            clauses.push(p.comparison()?);
        }
        if let Some((_, col)) = p.peek() {
            return Err(BreakpointError { column: col, message: "unexpected trailing input".into() });
        }
        Ok(BreakExpr { clauses })
    }

    /// Unsigned comparisons; a comparison whose operands cannot be read is
    /// false.
    pub fn eval(&self, state: &MachineState) -> bool {
        self.clauses.iter().all(|c| match (c.lhs.eval(state), c.rhs.eval(state)) {
            (Some(a), Some(b)) => match c.op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                CmpOp::Lt => a < b,
                CmpOp::Gt => a > b,
            },
            _ => false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(u64),
    Op(CmpOp),
    AndAnd,
    LBracket,
    RBracket,
    LParen,
    RParen,
    Comma,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, BreakpointError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |column: usize, message: &str| BreakpointError { column, message: message.to_string() };
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let two = bytes.get(i..i + 2);
        let tok = match c {
            b' ' | b'\t' => {
                i += 1;
                continue;
            }
            b'[' => Tok::LBracket,
            b']' => Tok::RBracket,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'<' => Tok::Op(CmpOp::Lt),
            b'>' => Tok::Op(CmpOp::Gt),
            b'=' if two == Some(b"==") => Tok::Op(CmpOp::Eq),
            b'!' if two == Some(b"!=") => Tok::Op(CmpOp::Ne),
            b'&' if two == Some(b"&&") => Tok::AndAnd,
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let word = &text[start..i];
                let value = match word.strip_prefix("0x").or_else(|| word.strip_prefix("0X")) {
                    Some(hex) => u64::from_str_radix(hex, 16),
                    None => word.parse(),
                };
                out.push((Tok::Num(value.map_err(|_| err(start, "bad number"))?), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(text[start..i].to_ascii_lowercase()), start));
                continue;
            }
            _ => return Err(err(start, "unexpected character")),
        };
        i += match tok {
            Tok::Op(CmpOp::Eq | CmpOp::Ne) | Tok::AndAnd => 2,
            _ => 1,
        };
        out.push((tok, start));
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    tokens: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<(&Tok, usize)> {
        self.tokens.get(self.pos).map(|(t, c)| (t, *c))
    }

    fn column(&self) -> usize {
        self.peek().map_or(self.src.len(), |(_, c)| c)
    }

    fn fail<T>(&self, message: &str) -> Result<T, BreakpointError> {
        Err(BreakpointError { column: self.column(), message: message.to_string() })
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek().map(|(t, _)| t) == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), BreakpointError> {
        if self.eat(&tok) {
            Ok(())
        } else {
            self.fail(&format!("expected {what}"))
        }
    }

    fn comparison(&mut self) -> Result<Comparison, BreakpointError> {
        let lhs = self.term()?;
        let op = match self.peek() {
            Some((Tok::Op(op), _)) => *op,
            _ => return self.fail("expected one of == != < >"),
        };
        self.pos += 1;
        let rhs = self.term()?;
        Ok(Comparison { lhs, op, rhs })
    }

    fn term(&mut self) -> Result<Term, BreakpointError> {
        let Some((tok, _)) = self.peek() else { return self.fail("expected a term") };
        let tok = tok.clone();
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Term::Literal(v))
            }
            Tok::Ident(name) => {
                if name == "mem" && self.tokens.get(self.pos + 1).map(|t| &t.0) == Some(&Tok::LBracket) {
                    self.pos += 2;
                    let addr = self.term()?;
                    self.expect(Tok::Comma, "','")?;
                    let width = match self.peek() {
                        Some((Tok::Num(w @ (1 | 2 | 4 | 8)), _)) => *w as u8,
                        _ => return self.fail("memory width must be 1, 2, 4 or 8"),
                    };
                    self.pos += 1;
                    self.expect(Tok::RBracket, "']'")?;
                    return Ok(Term::Mem { addr: Box::new(addr), width });
                }
                if name == "sum" && self.tokens.get(self.pos + 1).map(|t| &t.0) == Some(&Tok::LParen) {
                    self.pos += 2;
                    let lo = self.term()?;
                    self.expect(Tok::Comma, "','")?;
                    let hi = self.term()?;
                    self.expect(Tok::RParen, "')'")?;
                    return Ok(Term::Sum { lo: Box::new(lo), hi: Box::new(hi) });
                }
                let term = if name == "rip" {
                    Term::Rip
                } else if let Some(i) = gpr_index(&name) {
                    Term::Gpr(i)
                } else if let Some(f) = Flag::from_name(&name) {
                    Term::Flag(f)
                } else {
                    return self.fail(&format!("unknown name {name:?}"));
                };
                self.pos += 1;
                Ok(term)
            }
            _ => self.fail("expected a term"),
        }
    }
}

/// Host-side predicate for breakpoints not expressible in the mini-language.
pub type HostPredicate = Arc<dyn Fn(&MachineState) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum Breakpoint {
    Expr { source: String, expr: BreakExpr },
    Host { name: String, predicate: HostPredicate },
}

impl fmt::Debug for Breakpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Breakpoint::Expr { source, .. } => f.debug_tuple("Expr").field(source).finish(),
            Breakpoint::Host { name, .. } => f.debug_tuple("Host").field(name).finish(),
        }
    }
}

impl Breakpoint {
    /// Parses at registration so malformed expressions never reach a run.
    pub fn parse(source: &str) -> Result<Breakpoint, BreakpointError> {
        Ok(Breakpoint::Expr { source: source.trim().to_string(), expr: BreakExpr::parse(source)? })
    }

    pub fn host(name: impl Into<String>, predicate: impl Fn(&MachineState) -> bool + Send + Sync + 'static) -> Self {
        Breakpoint::Host { name: name.into(), predicate: Arc::new(predicate) }
    }

    pub fn describe(&self) -> &str {
        match self {
            Breakpoint::Expr { source, .. } => source,
            Breakpoint::Host { name, .. } => name,
        }
    }

    pub fn hit(&self, state: &MachineState) -> bool {
        match self {
            Breakpoint::Expr { expr, .. } => expr.eval(state),
            Breakpoint::Host { predicate, .. } => predicate(state),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    BreakpointHit(usize),
    MsSet,
    Exhausted,
    Cancelled,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::BreakpointHit(i) => write!(f, "breakpoint {i} hit"),
            StopReason::MsSet => f.write_str("model status set"),
            StopReason::Exhausted => f.write_str("step budget exhausted"),
            StopReason::Cancelled => f.write_str("cancelled"),
        }
    }
}

#[derive(Default)]
pub struct Hooks<'a> {
    pub breakpoints: &'a [Breakpoint],
    pub mem_log: bool,
    pub state_log: bool,
    pub syscall_log: bool,
    pub on_step: Option<&'a mut dyn FnMut(&MachineState)>,
    /// Polled between steps; setting it stops the run.
    pub cancel: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub events: Vec<TraceEvent>,
    pub state_log: Vec<StateLogLine>,
    pub syscalls: Vec<SyscallRecord>,
    pub stop: StopReason,
    pub steps: u64,
}

/// Steps up to `n` times with the requested instrumentation. Breakpoints
/// are evaluated after every step in order and the first hit stops the
/// run. The machine-visible outcome is the same as `x86_run` for the same
/// number of steps.
pub fn run_with_instrumentation(n: u64, mut hooks: Hooks<'_>, state: &mut MachineState) -> RunReport {
    let saved_mem = state.tracer.mem_log.take();
    let saved_sys = state.tracer.syscall_log.take();
    if hooks.mem_log {
        state.tracer.mem_log = Some(Vec::new());
    }
    if hooks.syscall_log {
        state.tracer.syscall_log = Some(Vec::new());
    }
    let mut state_log = Vec::new();
    let mut steps = 0;
    let mut stop = StopReason::Exhausted;
    while steps < n {
        if state.ms().is_some() {
            stop = StopReason::MsSet;
            break;
        }
        if hooks.cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            stop = StopReason::Cancelled;
            break;
        }
        let before = state.tracer.instr_index;
        x86_step(state);
        steps += 1;
        if hooks.state_log && state.tracer.instr_index != before {
            state_log.push(emit_state_log_line(state.tracer.instr_index, state));
        }
        if let Some(f) = hooks.on_step.as_mut() {
            f(state);
        }
        if let Some(i) = hooks.breakpoints.iter().position(|b| b.hit(state)) {
            stop = StopReason::BreakpointHit(i);
            break;
        }
    }
    if stop == StopReason::Exhausted && state.ms().is_some() {
        stop = StopReason::MsSet;
    }
    let events = std::mem::replace(&mut state.tracer.mem_log, saved_mem).unwrap_or_default();
    let syscalls = std::mem::replace(&mut state.tracer.syscall_log, saved_sys).unwrap_or_default();
    RunReport { events, state_log, syscalls, stop, steps }
}
