//! Command-line driver: `run`, `disasm`, `opcodes` and `debug`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_fs_map, parse_os, parse_reg_init, parse_u64, parse_undef_policy, Mode, RunConfig};
use crate::decoder::disassemble_listing;
use crate::instrument::{emit_state_log_line, run_with_instrumentation, Hooks};
use crate::loader::parse_elf;
use crate::opcodes::implemented_opcodes_report;
use crate::state::{MsKind, OsInfo, UndefPolicy, RAX};

pub const EXIT_HALTED: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_EXHAUSTED: i32 = 2;
pub const EXIT_FAULT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "x86sim", version, about = "x86-64 instruction-set simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load an ELF image and run it until it halts, faults or exhausts its step budget.
    Run(RunArgs),
    /// Disassemble bytes of an ELF image.
    Disasm(DisasmArgs),
    /// Print the implemented-opcodes table.
    Opcodes,
    /// Start the interactive debugger.
    Debug(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// user, system-marking or system-nonmarking.
    #[arg(long, value_parser = |s: &str| s.parse::<Mode>())]
    mode: Option<Mode>,
    /// linux or freebsd.
    #[arg(long, value_parser = parse_os)]
    os: Option<OsInfo>,
    #[arg(long)]
    elf: Option<PathBuf>,
    /// Physical address of the identity-map page tables (system modes).
    #[arg(long, value_parser = parse_u64)]
    pt_base: Option<u64>,
    /// Start address (defaults to the ELF entry point).
    #[arg(long, value_parser = parse_u64)]
    rip: Option<u64>,
    #[arg(long, value_parser = parse_u64)]
    halt: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// NAME=HEX, repeatable.
    #[arg(long = "set-reg", value_parser = parse_reg_init)]
    set_reg: Vec<(usize, u64)>,
    #[arg(long, value_parser = parse_u64)]
    rflags: Option<u64>,
    /// Push the halt address as the return address before running.
    #[arg(long)]
    push_halt: bool,
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// SIM=HOST, repeatable.
    #[arg(long = "fs", value_parser = parse_fs_map)]
    fs: Vec<(String, PathBuf)>,
    /// Host file supplying the simulated standard input.
    #[arg(long)]
    stdin: Option<PathBuf>,
    /// injective, zero or seeded:N.
    #[arg(long, value_parser = parse_undef_policy)]
    undef_policy: Option<UndefPolicy>,
    #[arg(long)]
    log_state: Option<PathBuf>,
    #[arg(long)]
    log_mem: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DisasmArgs {
    #[arg(long)]
    elf: PathBuf,
    /// First address (defaults to the entry point).
    #[arg(long, value_parser = parse_u64)]
    start: Option<u64>,
    #[arg(long, default_value_t = 32)]
    count: usize,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path).map_err(|e| e.to_string())?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        take!(mode => mode, os => os, max_steps => max_steps, undef_policy => undef_policy);
        macro_rules! take_opt {
            ($($field:ident),*) => {
                $(if self.$field.is_some() { cfg.$field = self.$field; })*
            };
        }
        take_opt!(elf, pt_base, rip, halt, rflags, oracle, stdin, log_state, log_mem);
        cfg.reg_inits.extend(self.set_reg);
        cfg.fs_map.extend(self.fs);
        cfg.push_halt |= self.push_halt;
        Ok(cfg)
    }
}

/// Parses arguments and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_HALTED };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => args.into_config().and_then(|cfg| cmd_run(&cfg, out)),
        Command::Disasm(args) => cmd_disasm(&args, out),
        Command::Opcodes => write!(out, "{}", implemented_opcodes_report()).map(|_| 0).map_err(|e| e.to_string()),
        Command::Debug(_) => Err("the interactive debugger is not part of this build".into()),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            let _ = writeln!(err, "x86sim: {message}");
            EXIT_USAGE
        }
    }
}

/// Builds the state, runs it and reports; the exit status reflects ms.
pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, String> {
    let mut state = cfg.build_state().map_err(|e| e.to_string())?;
    let initial_line = emit_state_log_line(0, &state);
    let hooks = Hooks {
        mem_log: cfg.log_mem.is_some(),
        state_log: cfg.log_state.is_some(),
        ..Hooks::default()
    };
    let report = run_with_instrumentation(cfg.max_steps, hooks, &mut state);
    let write_file = |path: &PathBuf, lines: Vec<String>| {
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
    };
    if let Some(path) = &cfg.log_state {
        let lines = std::iter::once(initial_line).chain(report.state_log).map(|l| l.0).collect();
        write_file(path, lines)?;
    }
    if let Some(path) = &cfg.log_mem {
        write_file(path, report.events.iter().map(|e| e.log_line()).collect())?;
    }
    let io = |e: std::io::Error| e.to_string();
    out.write_all(&state.env.stdout).map_err(io)?;
    match state.ms() {
        Some(ms) => writeln!(out, "ms: {ms}").map_err(io)?,
        None => writeln!(out, "ms: none (step budget exhausted)").map_err(io)?,
    }
    writeln!(out, "rip: {:#x}", state.rip()).map_err(io)?;
    writeln!(out, "rax: {:#x} ({})", state.gpr[RAX], state.gpr[RAX]).map_err(io)?;
    writeln!(out, "steps: {}", report.steps).map_err(io)?;
    Ok(match state.ms().map(|m| m.kind) {
        Some(MsKind::Halted) => EXIT_HALTED,
        None => EXIT_EXHAUSTED,
        Some(_) => EXIT_FAULT,
    })
}

fn cmd_disasm(args: &DisasmArgs, out: &mut dyn Write) -> Result<i32, String> {
    let bytes = std::fs::read(&args.elf).map_err(|e| format!("{}: {e}", args.elf.display()))?;
    let image = parse_elf(&bytes).map_err(|e| format!("{}: {e}", args.elf.display()))?;
    let start = args.start.unwrap_or(image.entry);
    let byte_at = |addr: u64| {
        image.segments.iter().find_map(|s| {
            let off = addr.checked_sub(s.vaddr)?;
            if off < s.data.len() as u64 {
                Some(s.data[off as usize])
            } else if off < s.mem_size {
                Some(0)
            } else {
                None
            }
        })
    };
    for line in disassemble_listing(start, args.count, byte_at) {
        writeln!(out, "{line}").map_err(|e| e.to_string())?;
    }
    Ok(EXIT_HALTED)
}
