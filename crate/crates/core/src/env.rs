//! The simulated external world: file system, descriptor table and the
//! oracle of queued values for non-deterministic results, plus the
//! user-level semantics of the supported system calls.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use crate::memory::{linear_read_bytes, linear_write_bytes};
use crate::state::{Exec, MachineState, MsKind, OsInfo, RAX, RDI, RDX, RSI};

pub const EBADF: u64 = 9;
pub const ENOENT: u64 = 2;
pub const EEXIST: u64 = 17;
pub const EINVAL: u64 = 22;
pub const ESPIPE: u64 = 29;

/// Largest transfer a single read or write performs; larger requests
/// complete short.
pub const MAX_TRANSFER: u64 = 1 << 24;
const MAX_PATH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyscallKind {
    Read,
    Write,
    Open,
    Close,
    Lseek,
    Dup,
    Link,
    Unlink,
}

impl SyscallKind {
    pub const ALL: [SyscallKind; 8] = [
        SyscallKind::Read,
        SyscallKind::Write,
        SyscallKind::Open,
        SyscallKind::Close,
        SyscallKind::Lseek,
        SyscallKind::Dup,
        SyscallKind::Link,
        SyscallKind::Unlink,
    ];
}

/// Numeric ids from the Linux x86-64 `syscall_64.tbl` and the FreeBSD
/// `syscalls.master` tables.
pub fn syscall_number(os: OsInfo, kind: SyscallKind) -> u64 {
    use SyscallKind::*;
    match (os, kind) {
        (OsInfo::Linux, Read) => 0,
        (OsInfo::Linux, Write) => 1,
        (OsInfo::Linux, Open) => 2,
        (OsInfo::Linux, Close) => 3,
        (OsInfo::Linux, Lseek) => 8,
        (OsInfo::Linux, Dup) => 32,
        (OsInfo::Linux, Link) => 86,
        (OsInfo::Linux, Unlink) => 87,
        (OsInfo::FreeBsd, Read) => 3,
        (OsInfo::FreeBsd, Write) => 4,
        (OsInfo::FreeBsd, Open) => 5,
        (OsInfo::FreeBsd, Close) => 6,
        (OsInfo::FreeBsd, Link) => 9,
        (OsInfo::FreeBsd, Unlink) => 10,
        (OsInfo::FreeBsd, Dup) => 41,
        (OsInfo::FreeBsd, Lseek) => 478,
    }
}

pub fn syscall_kind(os: OsInfo, number: u64) -> Option<SyscallKind> {
    SyscallKind::ALL.into_iter().find(|&k| syscall_number(os, k) == number)
}

struct OpenFlags {
    create: u64,
    truncate: u64,
    append: u64,
}

fn open_flags(os: OsInfo) -> OpenFlags {
    match os {
        OsInfo::Linux => OpenFlags { create: 0o100, truncate: 0o1000, append: 0o2000 },
        OsInfo::FreeBsd => OpenFlags { create: 0x200, truncate: 0x400, append: 0x8 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Stdin,
    Stdout,
    Stderr,
    File(u64),
}

/// An open-file description; `dup` makes two descriptors share one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenFile {
    pub path: String,
    pub target: Target,
    pub offset: u64,
    pub readable: bool,
    pub writable: bool,
    pub append: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("oracle has no value queued for {0:#x}")]
pub struct OracleEmpty(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Environment {
    paths: BTreeMap<String, u64>,
    inodes: BTreeMap<u64, Vec<u8>>,
    next_inode: u64,
    fds: BTreeMap<u32, u64>,
    descriptions: BTreeMap<u64, OpenFile>,
    next_description: u64,
    stdin: Vec<u8>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    oracle: BTreeMap<u64, VecDeque<u64>>,
}

impl Default for Environment {
    fn default() -> Self {
        Environment::new()
    }
}

impl Environment {
    /// An empty file system with fds 0, 1 and 2 open on the standard streams.
    pub fn new() -> Self {
        let mut env = Environment {
            paths: BTreeMap::new(),
            inodes: BTreeMap::new(),
            next_inode: 0,
            fds: BTreeMap::new(),
            descriptions: BTreeMap::new(),
            next_description: 0,
            stdin: Vec::new(),
            stdout: Vec::new(),
            stderr: Vec::new(),
            oracle: BTreeMap::new(),
        };
        for (fd, name, target, readable) in [
            (0, "<stdin>", Target::Stdin, true),
            (1, "<stdout>", Target::Stdout, false),
            (2, "<stderr>", Target::Stderr, false),
        ] {
            let d = env.add_description(OpenFile {
                path: name.to_string(),
                target,
                offset: 0,
                readable,
                writable: !readable,
                append: false,
            });
            env.fds.insert(fd, d);
        }
        env
    }

    fn add_description(&mut self, file: OpenFile) -> u64 {
        let id = self.next_description;
        self.next_description += 1;
        self.descriptions.insert(id, file);
        id
    }

    /// Creates or replaces a file.
    pub fn add_file(&mut self, path: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        let path = path.into();
        match self.paths.get(&path) {
            Some(&inode) => {
                self.inodes.insert(inode, bytes.into());
            }
            None => {
                let inode = self.new_inode(bytes.into());
                self.paths.insert(path, inode);
            }
        }
    }

    fn new_inode(&mut self, bytes: Vec<u8>) -> u64 {
        let id = self.next_inode;
        self.next_inode += 1;
        self.inodes.insert(id, bytes);
        id
    }

    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.paths.get(path).and_then(|i| self.inodes.get(i)).map(|v| v.as_slice())
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.paths.keys().map(|s| s.as_str())
    }

    pub fn set_stdin(&mut self, bytes: impl Into<Vec<u8>>) {
        self.stdin = bytes.into();
    }

    pub fn open_file(&self, fd: u32) -> Option<&OpenFile> {
        self.fds.get(&fd).and_then(|d| self.descriptions.get(d))
    }

    pub fn open_fds(&self) -> impl Iterator<Item = u32> + '_ {
        self.fds.keys().copied()
    }

    /// Appends values to the oracle queue at `lin`.
    pub fn oracle_push(&mut self, lin: u64, values: impl IntoIterator<Item = u64>) {
        self.oracle.entry(lin).or_default().extend(values);
    }

    pub fn oracle_pop(&mut self, lin: u64) -> Result<u64, OracleEmpty> {
        let queue = self.oracle.get_mut(&lin).ok_or(OracleEmpty(lin))?;
        let v = queue.pop_front().ok_or(OracleEmpty(lin))?;
        if queue.is_empty() {
            self.oracle.remove(&lin);
        }
        Ok(v)
    }

    pub fn oracle_values(&self, lin: u64) -> Vec<u64> {
        self.oracle.get(&lin).map(|q| q.iter().copied().collect()).unwrap_or_default()
    }

    /// Total number of queued oracle values.
    pub fn oracle_len(&self) -> usize {
        self.oracle.values().map(|q| q.len()).sum()
    }

    /// Maps a host file, or every file under a host directory, into the
    /// simulated file system under `sim`. Contents are copied; the host is
    /// not consulted again.
    pub fn load_host_path(&mut self, sim: &str, host: &Path) -> std::io::Result<()> {
        if host.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(host)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let name = e.file_name().to_string_lossy().into_owned();
                let child = format!("{}/{}", sim.trim_end_matches('/'), name);
                self.load_host_path(&child, &e.path())?;
            }
            Ok(())
        } else {
            let bytes = std::fs::read(host)?;
            self.add_file(sim, bytes);
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("oracle file line {line}: {message}")]
pub struct OracleParseError {
    pub line: usize,
    pub message: String,
}

fn parse_hex(token: &str) -> Option<u64> {
    let t = token.trim_start_matches("0x").trim_start_matches("0X");
    u64::from_str_radix(t, 16).ok()
}

/// Parses an oracle initialization file: one entry per line, a hex linear
/// address followed by whitespace-separated hex values. `#` starts a comment.
pub fn parse_oracle(text: &str) -> Result<Vec<(u64, Vec<u64>)>, OracleParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let err = |message: String| OracleParseError { line: i + 1, message };
        let addr_tok = tokens.next().unwrap_or_default();
        let addr = parse_hex(addr_tok).ok_or_else(|| err(format!("bad address {addr_tok:?}")))?;
        let values = tokens
            .map(|t| parse_hex(t).ok_or_else(|| err(format!("bad value {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((addr, values));
    }
    Ok(out)
}

/// One completed system call, for event feeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallRecord {
    pub kind: SyscallKind,
    pub args: [u64; 3],
    pub result: u64,
}

impl fmt::Display for SyscallRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}({:#x}, {:#x}, {:#x}) = {}",
            self.kind, self.args[0], self.args[1], self.args[2], self.result as i64
        )
    }
}

fn neg(code: u64) -> u64 {
    code.wrapping_neg()
}

/// Performs the system call selected by rax under the state's os-info,
/// start to finish, writing the result (or a negated error code) to rax.
pub fn env_syscall(state: &mut MachineState) -> Exec<SyscallRecord> {
    let number = state.gpr[RAX];
    let Some(kind) = syscall_kind(state.os_info, number) else {
        return Err(state.fault(
            MsKind::SyscallFault,
            format!("unsupported {:?} system call {number}", state.os_info),
        ));
    };
    let args = [state.gpr[RDI], state.gpr[RSI], state.gpr[RDX]];
    let result = match kind {
        SyscallKind::Read => sys_read(state, args[0], args[1], args[2])?,
        SyscallKind::Write => sys_write(state, args[0], args[1], args[2])?,
        SyscallKind::Open => sys_open(state, args[0], args[1])?,
        SyscallKind::Close => sys_close(state, args[0]),
        SyscallKind::Lseek => sys_lseek(state, args[0], args[1], args[2]),
        SyscallKind::Dup => sys_dup(state, args[0])?,
        SyscallKind::Link => sys_link(state, args[0], args[1])?,
        SyscallKind::Unlink => sys_unlink(state, args[0])?,
    };
    state.gpr[RAX] = result;
    Ok(SyscallRecord { kind, args, result })
}

fn description_id(state: &MachineState, fd: u64) -> Option<u64> {
    u32::try_from(fd).ok().and_then(|fd| state.env.fds.get(&fd).copied())
}

pub fn sys_read(state: &mut MachineState, fd: u64, buf: u64, count: u64) -> Exec<u64> {
    let Some(d) = description_id(state, fd) else { return Ok(neg(EBADF)) };
    let file = &state.env.descriptions[&d];
    if !file.readable {
        return Ok(neg(EBADF));
    }
    let source: &[u8] = match file.target {
        Target::Stdin => &state.env.stdin,
        Target::File(inode) => &state.env.inodes[&inode],
        Target::Stdout | Target::Stderr => return Ok(neg(EBADF)),
    };
    let start = file.offset.min(source.len() as u64) as usize;
    let n = (source.len() - start).min(count.min(MAX_TRANSFER) as usize);
    let bytes = source[start..start + n].to_vec();
    linear_write_bytes(state, buf, &bytes)?;
    if let Some(f) = state.env.descriptions.get_mut(&d) {
        f.offset += n as u64;
    }
    Ok(n as u64)
}

pub fn sys_write(state: &mut MachineState, fd: u64, buf: u64, count: u64) -> Exec<u64> {
    let Some(d) = description_id(state, fd) else { return Ok(neg(EBADF)) };
    if !state.env.descriptions[&d].writable {
        return Ok(neg(EBADF));
    }
    let n = count.min(MAX_TRANSFER) as usize;
    let mut bytes = vec![0u8; n];
    linear_read_bytes(state, buf, &mut bytes)?;
    let env = &mut state.env;
    let file = env.descriptions.get_mut(&d).expect("descriptor maps to a description");
    match file.target {
        Target::Stdout => env.stdout.extend_from_slice(&bytes),
        Target::Stderr => env.stderr.extend_from_slice(&bytes),
        Target::Stdin => return Ok(neg(EBADF)),
        Target::File(inode) => {
            let data = env.inodes.get_mut(&inode).expect("open inode exists");
            if file.append {
                file.offset = data.len() as u64;
            }
            let start = file.offset as usize;
            if data.len() < start + n {
                data.resize(start + n, 0);
            }
            data[start..start + n].copy_from_slice(&bytes);
            file.offset += n as u64;
        }
    }
    Ok(n as u64)
}

fn read_path(state: &mut MachineState, lin: u64) -> Exec<String> {
    let mut bytes = Vec::new();
    for i in 0..MAX_PATH as u64 {
        let mut b = [0u8];
        linear_read_bytes(state, lin.wrapping_add(i), &mut b)?;
        if b[0] == 0 {
            return Ok(String::from_utf8_lossy(&bytes).into_owned());
        }
        bytes.push(b[0]);
    }
    Err(state.fault(MsKind::SyscallFault, "path is not NUL-terminated within 4096 bytes"))
}

/// Takes the next descriptor number from the oracle at the current rip.
fn oracle_fd(state: &mut MachineState) -> Exec<u32> {
    let rip = state.rip();
    let value = match state.env.oracle_pop(rip) {
        Ok(v) => v,
        Err(e) => return Err(state.fault(MsKind::OracleEmpty, e.to_string())),
    };
    let Ok(fd) = u32::try_from(value) else {
        return Err(state.fault(MsKind::SyscallFault, format!("oracle descriptor {value:#x} exceeds 32 bits")));
    };
    if state.env.fds.contains_key(&fd) {
        return Err(state.fault(MsKind::SyscallFault, format!("oracle descriptor {fd} is already open")));
    }
    Ok(fd)
}

pub fn sys_open(state: &mut MachineState, path_ptr: u64, flags: u64) -> Exec<u64> {
    let path = read_path(state, path_ptr)?;
    let bits = open_flags(state.os_info);
    let accmode = flags & 3;
    let (readable, writable) = (accmode != 1, accmode != 0);
    let inode = match state.env.paths.get(&path) {
        Some(&i) => i,
        None if flags & bits.create != 0 => {
            let i = state.env.new_inode(Vec::new());
            state.env.paths.insert(path.clone(), i);
            i
        }
        None => return Ok(neg(ENOENT)),
    };
    let fd = oracle_fd(state)?;
    if flags & bits.truncate != 0 && writable {
        state.env.inodes.insert(inode, Vec::new());
    }
    let d = state.env.add_description(OpenFile {
        path,
        target: Target::File(inode),
        offset: 0,
        readable,
        writable,
        append: flags & bits.append != 0,
    });
    state.env.fds.insert(fd, d);
    Ok(fd as u64)
}

pub fn sys_close(state: &mut MachineState, fd: u64) -> u64 {
    let Ok(fd32) = u32::try_from(fd) else { return neg(EBADF) };
    match state.env.fds.remove(&fd32) {
        Some(d) => {
            if !state.env.fds.values().any(|&x| x == d) {
                state.env.descriptions.remove(&d);
            }
            0
        }
        None => neg(EBADF),
    }
}

pub fn sys_lseek(state: &mut MachineState, fd: u64, offset: u64, whence: u64) -> u64 {
    let Some(d) = description_id(state, fd) else { return neg(EBADF) };
    let file = &state.env.descriptions[&d];
    let len = match file.target {
        Target::File(inode) => state.env.inodes[&inode].len() as i128,
        Target::Stdin => state.env.stdin.len() as i128,
        Target::Stdout | Target::Stderr => return neg(ESPIPE),
    };
    let base = match whence {
        0 => 0,
        1 => file.offset as i128,
        2 => len,
        _ => return neg(EINVAL),
    };
    let target = base + offset as i64 as i128;
    if !(0..=i64::MAX as i128).contains(&target) {
        return neg(EINVAL);
    }
    if let Some(f) = state.env.descriptions.get_mut(&d) {
        f.offset = target as u64;
    }
    target as u64
}

pub fn sys_dup(state: &mut MachineState, fd: u64) -> Exec<u64> {
    let Some(d) = description_id(state, fd) else { return Ok(neg(EBADF)) };
    let new_fd = oracle_fd(state)?;
    state.env.fds.insert(new_fd, d);
    Ok(new_fd as u64)
}

pub fn sys_link(state: &mut MachineState, old_ptr: u64, new_ptr: u64) -> Exec<u64> {
    let old = read_path(state, old_ptr)?;
    let new = read_path(state, new_ptr)?;
    let Some(&inode) = state.env.paths.get(&old) else { return Ok(neg(ENOENT)) };
    if state.env.paths.contains_key(&new) {
        return Ok(neg(EEXIST));
    }
    state.env.paths.insert(new, inode);
    Ok(0)
}

pub fn sys_unlink(state: &mut MachineState, path_ptr: u64) -> Exec<u64> {
    let path = read_path(state, path_ptr)?;
    Ok(if state.env.paths.remove(&path).is_some() { 0 } else { neg(ENOENT) })
}
