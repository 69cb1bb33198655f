//! ELF64 parsing, image loading and run initialization.

use crate::memory::linear_write_bytes;
use crate::state::{Exec, MachineState, ModelStatus};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoadError {
    #[error("bad magic")]
    BadMagic,
    #[error("not 64-bit")]
    Not64Bit,
    #[error("not little-endian")]
    NotLittleEndian,
    #[error("not an x86-64 executable (machine {0:#x})")]
    WrongMachine(u16),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(&'static str),
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("segment at {vaddr:#x}: {reason}")]
    BadSegment { vaddr: u64, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SegmentFlags {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub vaddr: u64,
    pub data: Vec<u8>,
    pub mem_size: u64,
    pub flags: SegmentFlags,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadImage {
    pub segments: Vec<Segment>,
    pub entry: u64,
}

const PT_LOAD: u32 = 1;
const EM_X86_64: u16 = 62;

fn field<const N: usize>(bytes: &[u8], at: usize, what: &'static str) -> Result<[u8; N], LoadError> {
    bytes
        .get(at..at + N)
        .and_then(|s| s.try_into().ok())
        .ok_or(LoadError::Truncated(what))
}

fn u16_at(b: &[u8], at: usize, what: &'static str) -> Result<u16, LoadError> {
    field(b, at, what).map(u16::from_le_bytes)
}

fn u32_at(b: &[u8], at: usize, what: &'static str) -> Result<u32, LoadError> {
    field(b, at, what).map(u32::from_le_bytes)
}

fn u64_at(b: &[u8], at: usize, what: &'static str) -> Result<u64, LoadError> {
    field(b, at, what).map(u64::from_le_bytes)
}

fn is_mach_o(bytes: &[u8]) -> bool {
    let Some(head) = bytes.get(..4) else { return false };
    let magic = u32::from_le_bytes(head.try_into().unwrap());
    matches!(magic, 0xFEED_FACE | 0xFEED_FACF | 0xCEFA_EDFE | 0xCFFA_EDFE | 0xCAFE_BABE | 0xBEBA_FECA)
}

/// Extracts the loadable segments (program headers of type `PT_LOAD`) and
/// the entry point. Section headers are ignored.
pub fn parse_elf(bytes: &[u8]) -> Result<LoadImage, LoadError> {
    if is_mach_o(bytes) {
        return Err(LoadError::UnsupportedFormat("Mach-O"));
    }
    if bytes.get(..4) != Some(b"\x7FELF".as_slice()) {
        return Err(LoadError::BadMagic);
    }
    match bytes.get(4) {
        Some(2) => {}
        Some(_) => return Err(LoadError::Not64Bit),
        None => return Err(LoadError::Truncated("identification")),
    }
    match bytes.get(5) {
        Some(1) => {}
        Some(_) => return Err(LoadError::NotLittleEndian),
        None => return Err(LoadError::Truncated("identification")),
    }
    let machine = u16_at(bytes, 18, "header")?;
    if machine != EM_X86_64 {
        return Err(LoadError::WrongMachine(machine));
    }
    let entry = u64_at(bytes, 24, "header")?;
    let phoff = u64_at(bytes, 32, "header")? as usize;
    let phentsize = u16_at(bytes, 54, "header")? as usize;
    let phnum = u16_at(bytes, 56, "header")? as usize;
    if phnum > 0 && phentsize < 56 {
        return Err(LoadError::Truncated("program header entry"));
    }
    let mut segments = Vec::new();
    for i in 0..phnum {
        let ph = phoff.checked_add(i * phentsize).ok_or(LoadError::Truncated("program headers"))?;
        if u32_at(bytes, ph, "program headers")? != PT_LOAD {
            continue;
        }
        let flags = u32_at(bytes, ph + 4, "program headers")?;
        let offset = u64_at(bytes, ph + 8, "program headers")? as usize;
        let vaddr = u64_at(bytes, ph + 16, "program headers")?;
        let filesz = u64_at(bytes, ph + 32, "program headers")? as usize;
        let memsz = u64_at(bytes, ph + 40, "program headers")?;
        if (filesz as u64) > memsz {
            return Err(LoadError::BadSegment { vaddr, reason: "file size exceeds memory size" });
        }
        if !crate::state::is_canonical(vaddr) || !crate::state::is_canonical(vaddr.wrapping_add(memsz)) {
            return Err(LoadError::BadSegment { vaddr, reason: "not canonical" });
        }
        let data = offset
            .checked_add(filesz)
            .and_then(|end| bytes.get(offset..end))
            .ok_or(LoadError::Truncated("segment contents"))?
            .to_vec();
        segments.push(Segment {
            vaddr,
            data,
            mem_size: memsz,
            flags: SegmentFlags { read: flags & 4 != 0, write: flags & 2 != 0, exec: flags & 1 != 0 },
        });
    }
    Ok(LoadImage { segments, entry })
}

/// Writes each segment through the linear-memory interface and zero-fills
/// the remainder up to its memory size. In system-level mode the target
/// range must already be mapped.
pub fn binary_file_load(image: &LoadImage, state: &mut MachineState) -> Exec<()> {
    for seg in &image.segments {
        linear_write_bytes(state, seg.vaddr, &seg.data)?;
        let zeros = vec![0u8; (seg.mem_size - seg.data.len() as u64) as usize];
        linear_write_bytes(state, seg.vaddr.wrapping_add(seg.data.len() as u64), &zeros)?;
    }
    Ok(())
}

/// Prepares a state for a run: installs `ms_init` (normally `None`), the
/// start and halt addresses, then applies register, rflags and memory
/// updates in that order.
pub fn init_x86_state(
    state: &mut MachineState,
    ms_init: Option<ModelStatus>,
    start_rip: u64,
    halt_addr: Option<u64>,
    reg_inits: &[(usize, u64)],
    flag_init: Option<u64>,
    mem_updates: &[(u64, u8)],
) -> Exec<()> {
    state.reset_ms(None);
    state.set_rip(start_rip)?;
    state.halt_addr = halt_addr;
    for &(reg, value) in reg_inits {
        state.gpr[reg] = value;
    }
    if let Some(flags) = flag_init {
        state.set_rflags(flags);
    }
    for &(lin, byte) in mem_updates {
        linear_write_bytes(state, lin, &[byte])?;
    }
    state.reset_ms(ms_init);
    Ok(())
}
