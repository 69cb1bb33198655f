//! Run configuration: the declarative description of a simulation run and
//! the state construction it implies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::env::parse_oracle;
use crate::loader::{binary_file_load, init_x86_state, parse_elf, LoadError};
use crate::memory::init_system_level_mode;
use crate::state::{gpr_index, MachineState, ModelStatus, OsInfo, UndefPolicy, RSP};

/// Stack pointer used when the configuration does not set rsp. It lies
/// below 512 GiB so the default identity map covers it.
pub const DEFAULT_STACK_TOP: u64 = 0x7FF0_0000;
pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    User,
    SystemMarking,
    SystemNonMarking,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "user" => Ok(Mode::User),
            "system-marking" | "system" => Ok(Mode::SystemMarking),
            "system-nonmarking" => Ok(Mode::SystemNonMarking),
            _ => Err(format!("unknown mode {s:?} (expected user, system-marking or system-nonmarking)")),
        }
    }
}

pub fn parse_os(s: &str) -> Result<OsInfo, String> {
    match s.to_ascii_lowercase().as_str() {
        "linux" => Ok(OsInfo::Linux),
        "freebsd" => Ok(OsInfo::FreeBsd),
        _ => Err(format!("unknown os {s:?} (expected linux or freebsd)")),
    }
}

/// `injective`, `zero` or `seeded:N`.
pub fn parse_undef_policy(s: &str) -> Result<UndefPolicy, String> {
    match s {
        "injective" => Ok(UndefPolicy::Injective),
        "zero" => Ok(UndefPolicy::Zero),
        _ => s
            .strip_prefix("seeded:")
            .or_else(|| s.strip_prefix("seeded="))
            .and_then(|n| parse_u64(n).ok())
            .map(UndefPolicy::Seeded)
            .ok_or_else(|| format!("unknown undef policy {s:?} (expected injective, zero or seeded:N)")),
    }
}

/// Hex with or without `0x`; decimal only via a `0d` prefix is not
/// supported, every address-like value is hex.
pub fn parse_u64(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let t = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    u64::from_str_radix(&t.replace('_', ""), 16).map_err(|_| format!("bad hex value {s:?}"))
}

/// `NAME=HEX`.
pub fn parse_reg_init(s: &str) -> Result<(usize, u64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=HEX, got {s:?}"))?;
    let reg = gpr_index(&name.trim().to_ascii_lowercase()).ok_or_else(|| format!("unknown register {name:?}"))?;
    Ok((reg, parse_u64(value)?))
}

/// `SIM=HOST`.
pub fn parse_fs_map(s: &str) -> Result<(String, PathBuf), String> {
    let (sim, host) = s.split_once('=').ok_or_else(|| format!("expected SIM=HOST, got {s:?}"))?;
    Ok((sim.to_string(), PathBuf::from(host)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub os: OsInfo,
    pub elf: Option<PathBuf>,
    pub pt_base: Option<u64>,
    pub rip: Option<u64>,
    pub halt: Option<u64>,
    pub max_steps: u64,
    pub reg_inits: Vec<(usize, u64)>,
    pub rflags: Option<u64>,
    /// Push the halt address as a return address before the run, so a
    /// routine entered at `rip` returns straight into the halt address.
    pub push_halt: bool,
    pub oracle: Option<PathBuf>,
    pub fs_map: Vec<(String, PathBuf)>,
    pub stdin: Option<PathBuf>,
    pub undef_policy: UndefPolicy,
    pub log_state: Option<PathBuf>,
    pub log_mem: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::User,
            os: OsInfo::Linux,
            elf: None,
            pt_base: None,
            rip: None,
            halt: None,
            max_steps: DEFAULT_MAX_STEPS,
            reg_inits: Vec::new(),
            rflags: None,
            push_halt: false,
            oracle: None,
            fs_map: Vec::new(),
            stdin: None,
            undef_policy: UndefPolicy::Injective,
            log_state: None,
            log_mem: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Load { path: PathBuf, source: LoadError },
    #[error("initialization failed: {0}")]
    Init(ModelStatus),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io { path: path.to_path_buf(), source }
}

/// A number in a config file: a TOML integer or a hex string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Num {
    Int(i64),
    Text(String),
}

impl Num {
    fn value(&self) -> Result<u64, String> {
        match self {
            Num::Int(i) => u64::try_from(*i).map_err(|_| format!("negative value {i}")),
            Num::Text(s) => parse_u64(s),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct ConfigFile {
    mode: Option<String>,
    os: Option<String>,
    elf: Option<PathBuf>,
    pt_base: Option<Num>,
    rip: Option<Num>,
    halt: Option<Num>,
    max_steps: Option<u64>,
    rflags: Option<Num>,
    push_halt: Option<bool>,
    oracle: Option<PathBuf>,
    stdin: Option<PathBuf>,
    undef_policy: Option<String>,
    log_state: Option<PathBuf>,
    log_mem: Option<PathBuf>,
    #[serde(default)]
    regs: BTreeMap<String, Num>,
    #[serde(default)]
    fs: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    /// Reads a TOML config file. Relative paths inside it resolve against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let inv = ConfigError::Invalid;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let num = |n: Option<Num>| n.map(|n| n.value()).transpose();
        let mut cfg = RunConfig::default();
        if let Some(m) = file.mode {
            cfg.mode = m.parse().map_err(inv)?;
        }
        if let Some(os) = file.os {
            cfg.os = parse_os(&os).map_err(inv)?;
        }
        cfg.elf = file.elf.map(resolve);
        cfg.pt_base = num(file.pt_base).map_err(inv)?;
        cfg.rip = num(file.rip).map_err(inv)?;
        cfg.halt = num(file.halt).map_err(inv)?;
        cfg.rflags = num(file.rflags).map_err(inv)?;
        if let Some(n) = file.max_steps {
            cfg.max_steps = n;
        }
        cfg.push_halt = file.push_halt.unwrap_or(false);
        cfg.oracle = file.oracle.map(resolve);
        cfg.stdin = file.stdin.map(resolve);
        if let Some(p) = file.undef_policy {
            cfg.undef_policy = parse_undef_policy(&p).map_err(inv)?;
        }
        cfg.log_state = file.log_state.map(resolve);
        cfg.log_mem = file.log_mem.map(resolve);
        for (name, value) in file.regs {
            let reg = gpr_index(&name.to_ascii_lowercase()).ok_or_else(|| inv(format!("unknown register {name:?}")))?;
            cfg.reg_inits.push((reg, value.value().map_err(inv)?));
        }
        cfg.fs_map = file.fs.into_iter().map(|(sim, host)| (sim, resolve(host))).collect();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (self.mode, self.pt_base) {
            (Mode::User, Some(_)) => Err(ConfigError::Invalid("--pt-base is only meaningful in system modes".into())),
            (Mode::SystemMarking | Mode::SystemNonMarking, None) => {
                Err(ConfigError::Invalid("system modes require --pt-base".into()))
            }
            _ if self.elf.is_none() => Err(ConfigError::Invalid("no ELF file given (--elf)".into())),
            _ => Ok(()),
        }
    }

    /// Builds the initial state: paging setup, image load, environment,
    /// then `init_x86_state`.
    pub fn build_state(&self) -> Result<MachineState, ConfigError> {
        self.validate()?;
        let elf_path = self.elf.as_deref().expect("validated");
        let bytes = std::fs::read(elf_path).map_err(io_err(elf_path))?;
        let image = parse_elf(&bytes).map_err(|source| ConfigError::Load { path: elf_path.to_path_buf(), source })?;

        let mut state = MachineState::new();
        state.os_info = self.os;
        state.undef_policy = self.undef_policy;
        if let Some(base) = self.pt_base {
            init_system_level_mode(&mut state, base).map_err(ConfigError::Init)?;
            state.marking_mode = self.mode == Mode::SystemMarking;
        }
        binary_file_load(&image, &mut state).map_err(ConfigError::Init)?;

        if let Some(path) = &self.oracle {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let entries = parse_oracle(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            for (lin, values) in entries {
                state.env.oracle_push(lin, values);
            }
        }
        for (sim, host) in &self.fs_map {
            state.env.load_host_path(sim, host).map_err(io_err(host))?;
        }
        if let Some(path) = &self.stdin {
            state.env.set_stdin(std::fs::read(path).map_err(io_err(path))?);
        }

        let mut regs = self.reg_inits.clone();
        if !regs.iter().any(|&(r, _)| r == RSP) {
            regs.insert(0, (RSP, DEFAULT_STACK_TOP));
        }
        let mut mem_updates = Vec::new();
        if self.push_halt {
            let halt = self.halt.ok_or_else(|| ConfigError::Invalid("push-halt needs a halt address".into()))?;
            let rsp = regs.iter().rev().find(|&&(r, _)| r == RSP).map(|&(_, v)| v).unwrap_or(DEFAULT_STACK_TOP);
            let new_rsp = rsp.wrapping_sub(8);
            regs.push((RSP, new_rsp));
            mem_updates.extend(halt.to_le_bytes().iter().enumerate().map(|(i, &b)| (new_rsp + i as u64, b)));
        }
        let rip = self.rip.unwrap_or(image.entry);
        init_x86_state(&mut state, None, rip, self.halt, &regs, self.rflags, &mem_updates)
            .map_err(ConfigError::Init)?;
        Ok(state)
    }
}
