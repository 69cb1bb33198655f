//! Physical memory, IA-32e paging and the uniform linear-memory interface.

use std::collections::HashMap;

use crate::instrument::{AccessKind, TraceEvent};
use crate::state::{is_canonical, Exec, MachineState, MsKind};

/// Physical addresses are below 2^52.
pub const PHYS_LIMIT: u64 = 1 << 52;
pub const PAGE_SIZE: u64 = 4096;
const PAGE_SHIFT: u32 = 12;
const PAGE_MASK: u64 = PAGE_SIZE - 1;

/// User-level mode indexes memory by the low 48 bits of the linear address,
/// which is injective over canonical addresses.
const USER_INDEX_MASK: u64 = (1 << 48) - 1;

type Page = Box<[u8; PAGE_SIZE as usize]>;

/// Sparse byte store over the 2^52-byte physical space. Bytes never written
/// read as zero.
#[derive(Debug, Clone, Default)]
pub struct PhysicalMemory {
    pages: HashMap<u64, Page>,
}

impl PartialEq for PhysicalMemory {
    fn eq(&self, other: &Self) -> bool {
        let covers = |a: &Self, b: &Self| {
            a.pages.iter().all(|(n, page)| match b.pages.get(n) {
                Some(q) => page[..] == q[..],
                None => page.iter().all(|&x| x == 0),
            })
        };
        covers(self, other) && covers(other, self)
    }
}

fn check_range(addr: u64, nbytes: usize) -> Result<(), String> {
    match addr.checked_add(nbytes as u64) {
        Some(end) if end <= PHYS_LIMIT => Ok(()),
        _ => Err(format!("physical access {addr:#x}+{nbytes} beyond 2^52")),
    }
}

impl PhysicalMemory {
    pub fn new() -> Self {
        PhysicalMemory::default()
    }

    #[inline]
    pub fn read_byte(&self, addr: u64) -> u8 {
        match self.pages.get(&(addr >> PAGE_SHIFT)) {
            Some(p) => p[(addr & PAGE_MASK) as usize],
            None => 0,
        }
    }

    #[inline]
    pub fn write_byte(&mut self, addr: u64, value: u8) {
        let page = self
            .pages
            .entry(addr >> PAGE_SHIFT)
            .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
        page[(addr & PAGE_MASK) as usize] = value;
    }

    /// Fills `buf` from `addr` without range checks beyond the caller's.
    fn read_into(&self, addr: u64, buf: &mut [u8]) {
        let off = (addr & PAGE_MASK) as usize;
        if off + buf.len() <= PAGE_SIZE as usize {
            match self.pages.get(&(addr >> PAGE_SHIFT)) {
                Some(p) => buf.copy_from_slice(&p[off..off + buf.len()]),
                None => buf.fill(0),
            }
        } else {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = self.read_byte(addr + i as u64);
            }
        }
    }

    fn write_from(&mut self, addr: u64, buf: &[u8]) {
        let off = (addr & PAGE_MASK) as usize;
        if off + buf.len() <= PAGE_SIZE as usize {
            let page = self
                .pages
                .entry(addr >> PAGE_SHIFT)
                .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
            page[off..off + buf.len()].copy_from_slice(buf);
        } else {
            for (i, b) in buf.iter().enumerate() {
                self.write_byte(addr + i as u64, *b);
            }
        }
    }

    /// Little-endian read of `nbytes` (1, 2, 4, 8 or 16).
    pub fn read(&self, addr: u64, nbytes: usize) -> Result<u128, String> {
        check_range(addr, nbytes)?;
        let mut buf = [0u8; 16];
        self.read_into(addr, &mut buf[..nbytes]);
        Ok(u128::from_le_bytes(buf))
    }

    pub fn write(&mut self, addr: u64, nbytes: usize, value: u128) -> Result<(), String> {
        check_range(addr, nbytes)?;
        self.write_from(addr, &value.to_le_bytes()[..nbytes]);
        Ok(())
    }

    pub fn read_bytes(&self, addr: u64, buf: &mut [u8]) -> Result<(), String> {
        check_range(addr, buf.len())?;
        self.read_into(addr, buf);
        Ok(())
    }

    pub fn write_bytes(&mut self, addr: u64, buf: &[u8]) -> Result<(), String> {
        check_range(addr, buf.len())?;
        self.write_from(addr, buf);
        Ok(())
    }

    /// Addresses of every byte that differs between `self` and `other`.
    pub fn diff(&self, other: &PhysicalMemory) -> Vec<u64> {
        let mut pages: Vec<u64> = self.pages.keys().chain(other.pages.keys()).copied().collect();
        pages.sort_unstable();
        pages.dedup();
        let mut out = Vec::new();
        for n in pages {
            let base = n << PAGE_SHIFT;
            for i in 0..PAGE_SIZE {
                if self.read_byte(base + i) != other.read_byte(base + i) {
                    out.push(base + i);
                }
            }
        }
        out
    }
}

/// Free-function form of [`PhysicalMemory::read`], reporting failures in `ms`.
pub fn phys_read(state: &mut MachineState, addr: u64, nbytes: usize) -> Exec<u128> {
    match state.mem.read(addr, nbytes) {
        Ok(v) => Ok(v),
        Err(e) => Err(state.fault(MsKind::BadMemoryAccess, e)),
    }
}

pub fn phys_write(state: &mut MachineState, addr: u64, nbytes: usize, value: u128) -> Exec<()> {
    match state.mem.write(addr, nbytes, value) {
        Ok(()) => Ok(()),
        Err(e) => Err(state.fault(MsKind::BadMemoryAccess, e)),
    }
}

// Paging-entry layout.
pub const PTE_P: u64 = 1 << 0;
pub const PTE_RW: u64 = 1 << 1;
pub const PTE_US: u64 = 1 << 2;
pub const PTE_A: u64 = 1 << 5;
pub const PTE_D: u64 = 1 << 6;
pub const PTE_PS: u64 = 1 << 7;
const ADDR_4K: u64 = 0x000F_FFFF_FFFF_F000;
const ADDR_2M: u64 = 0x000F_FFFF_FFE0_0000;
const ADDR_1G: u64 = 0x000F_FFFF_C000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PagingEntry(pub u64);

impl PagingEntry {
    pub fn present(self) -> bool {
        self.0 & PTE_P != 0
    }
    pub fn writable(self) -> bool {
        self.0 & PTE_RW != 0
    }
    pub fn user(self) -> bool {
        self.0 & PTE_US != 0
    }
    pub fn accessed(self) -> bool {
        self.0 & PTE_A != 0
    }
    pub fn dirty(self) -> bool {
        self.0 & PTE_D != 0
    }
    pub fn page_size(self) -> bool {
        self.0 & PTE_PS != 0
    }
    /// Physical address of the next table, or of the 4 KiB frame at the PT level.
    pub fn next_table(self) -> u64 {
        self.0 & ADDR_4K
    }
    pub fn frame_1g(self) -> u64 {
        self.0 & ADDR_1G
    }
    pub fn frame_2m(self) -> u64 {
        self.0 & ADDR_2M
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Pml4,
    Pdpt,
    Pd,
    Pt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TouchedEntry {
    pub addr: u64,
    pub level: Level,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
    Exec,
}

/// Outcome of a successful page walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkResult {
    pub phys: u64,
    touched: [TouchedEntry; 4],
    len: usize,
}

impl WalkResult {
    /// Entries visited, top-down.
    pub fn touched_entries(&self) -> &[TouchedEntry] {
        &self.touched[..self.len]
    }
}

/// Walks the paging structures rooted at `cr3` without side effects.
/// On failure returns the linear address that faulted and a description.
fn walk(mem: &PhysicalMemory, cr3: u64, lin: u64) -> Result<WalkResult, String> {
    const LEVELS: [(Level, u32); 4] =
        [(Level::Pml4, 39), (Level::Pdpt, 30), (Level::Pd, 21), (Level::Pt, 12)];
    let blank = TouchedEntry { addr: 0, level: Level::Pml4 };
    let mut result = WalkResult { phys: 0, touched: [blank; 4], len: 0 };
    let mut table = cr3 & ADDR_4K;
    for (level, shift) in LEVELS {
        let addr = table + ((lin >> shift) & 0x1FF) * 8;
        let entry = PagingEntry(mem.read(addr, 8).map_err(|e| e.to_string())? as u64);
        if !entry.present() {
            return Err(format!("{level:?} entry at {addr:#x} not present for {lin:#x}"));
        }
        result.touched[result.len] = TouchedEntry { addr, level };
        result.len += 1;
        match level {
            Level::Pdpt if entry.page_size() => {
                result.phys = entry.frame_1g() | (lin & 0x3FFF_FFFF);
                return Ok(result);
            }
            Level::Pd if entry.page_size() => {
                result.phys = entry.frame_2m() | (lin & 0x1F_FFFF);
                return Ok(result);
            }
            Level::Pt => {
                result.phys = entry.next_table() | (lin & PAGE_MASK);
                return Ok(result);
            }
            _ => table = entry.next_table(),
        }
    }
    unreachable!("the PT level always terminates the walk")
}

/// Translates a linear address through the 4-level paging structures.
///
/// In marking mode the accessed flag of every visited entry and, for writes,
/// the dirty flag of the leaf entry are set; bits already set are not
/// rewritten. A missing entry records a page fault in `ms` and `cr2`.
pub fn la_to_pa(state: &mut MachineState, lin: u64, access: Access) -> Exec<WalkResult> {
    if !is_canonical(lin) {
        return Err(state.fault(MsKind::BadMemoryAccess, format!("non-canonical address {lin:#x}")));
    }
    let walked = match walk(&state.mem, state.cr3, lin) {
        Ok(w) => w,
        Err(detail) => {
            state.cr2 = lin;
            return Err(state.fault(MsKind::PageFault, detail));
        }
    };
    if state.marking_mode {
        let entries = walked.touched_entries();
        for (i, t) in entries.iter().enumerate() {
            let raw = state.mem.read(t.addr, 8).unwrap_or(0) as u64;
            let mut updated = raw | PTE_A;
            if access == Access::Write && i + 1 == entries.len() {
                updated |= PTE_D;
            }
            if updated != raw {
                // Entry addresses were just read successfully.
                let _ = state.mem.write(t.addr, 8, updated as u128);
            }
        }
    }
    Ok(walked)
}

/// Side-effect-free translation used by observers (breakpoints, debugger views).
pub fn peek_translate(state: &MachineState, lin: u64) -> Option<u64> {
    if !is_canonical(lin) {
        return None;
    }
    if state.user_level_mode {
        return Some(lin & USER_INDEX_MASK);
    }
    walk(&state.mem, state.cr3, lin).ok().map(|w| w.phys)
}

/// Reads bytes at a linear address with no accessed/dirty marking, no
/// tracing and no `ms` update.
pub fn peek_bytes(state: &MachineState, lin: u64, buf: &mut [u8]) -> Option<()> {
    for (i, b) in buf.iter_mut().enumerate() {
        let phys = peek_translate(state, lin.wrapping_add(i as u64))?;
        *b = state.mem.read_byte(phys);
    }
    Some(())
}

/// Up to two physical pieces of a linear access split at a 4 KiB boundary.
struct Pieces {
    parts: [(u64, usize); 2],
    count: usize,
}

fn translate_access(state: &mut MachineState, lin: u64, nbytes: usize, access: Access) -> Exec<Pieces> {
    let last = lin.wrapping_add(nbytes as u64 - 1);
    if !is_canonical(lin) || !is_canonical(last) || last < lin {
        return Err(state.fault(
            MsKind::BadMemoryAccess,
            format!("non-canonical access {lin:#x}+{nbytes}"),
        ));
    }
    let first_len = ((PAGE_SIZE - (lin & PAGE_MASK)) as usize).min(nbytes);
    let mut pieces = Pieces { parts: [(0, 0); 2], count: 0 };
    let mut cursor = lin;
    let mut remaining = nbytes;
    let mut len = first_len;
    while remaining > 0 {
        let phys = if state.user_level_mode {
            cursor & USER_INDEX_MASK
        } else {
            la_to_pa(state, cursor, access)?.phys
        };
        pieces.parts[pieces.count] = (phys, len);
        pieces.count += 1;
        cursor = cursor.wrapping_add(len as u64);
        remaining -= len;
        len = remaining;
    }
    Ok(pieces)
}

fn check_size(state: &mut MachineState, nbytes: usize) -> Exec<()> {
    if matches!(nbytes, 1 | 2 | 4 | 8 | 16) {
        Ok(())
    } else {
        Err(state.fault(MsKind::BadMemoryAccess, format!("unsupported access size {nbytes}")))
    }
}

fn read_pieces(state: &mut MachineState, pieces: &Pieces, buf: &mut [u8]) -> Exec<()> {
    let mut at = 0;
    for &(phys, len) in &pieces.parts[..pieces.count] {
        if let Err(e) = state.mem.read_bytes(phys, &mut buf[at..at + len]) {
            return Err(state.fault(MsKind::BadMemoryAccess, e));
        }
        at += len;
    }
    Ok(())
}

/// Reads through the uniform linear interface. Pieces are translated before
/// any byte moves, so a fault on the second page leaves memory untouched.
pub fn linear_read(state: &mut MachineState, lin: u64, nbytes: usize, access: Access) -> Exec<u128> {
    check_size(state, nbytes)?;
    let pieces = translate_access(state, lin, nbytes, access)?;
    let mut buf = [0u8; 16];
    read_pieces(state, &pieces, &mut buf[..nbytes])?;
    let value = u128::from_le_bytes(buf);
    if access != Access::Exec {
        trace(state, AccessKind::MemRead, lin, &pieces, nbytes, value);
    }
    Ok(value)
}

pub fn linear_write(state: &mut MachineState, lin: u64, nbytes: usize, value: u128) -> Exec<()> {
    check_size(state, nbytes)?;
    let pieces = translate_access(state, lin, nbytes, Access::Write)?;
    for &(phys, len) in &pieces.parts[..pieces.count] {
        check_range(phys, len).map_err(|e| state.fault(MsKind::BadMemoryAccess, e))?;
    }
    let bytes = value.to_le_bytes();
    let mut at = 0;
    for &(phys, len) in &pieces.parts[..pieces.count] {
        state.mem.write_from(phys, &bytes[at..at + len]);
        at += len;
    }
    trace(state, AccessKind::MemWrite, lin, &pieces, nbytes, value);
    Ok(())
}

/// One instruction byte, fetched with the exec access class.
#[inline]
pub fn fetch_byte(state: &mut MachineState, lin: u64) -> Exec<u8> {
    if state.user_level_mode && is_canonical(lin) {
        return Ok(state.mem.read_byte(lin & USER_INDEX_MASK));
    }
    Ok(linear_read(state, lin, 1, Access::Exec)? as u8)
}

/// Copies `buf.len()` bytes out of linear memory, one byte access at a time.
pub fn linear_read_bytes(state: &mut MachineState, lin: u64, buf: &mut [u8]) -> Exec<()> {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = linear_read(state, lin.wrapping_add(i as u64), 1, Access::Read)? as u8;
    }
    Ok(())
}

/// Copies `buf` into linear memory, one byte access at a time.
pub fn linear_write_bytes(state: &mut MachineState, lin: u64, buf: &[u8]) -> Exec<()> {
    for (i, b) in buf.iter().enumerate() {
        linear_write(state, lin.wrapping_add(i as u64), 1, *b as u128)?;
    }
    Ok(())
}

fn trace(state: &mut MachineState, kind: AccessKind, lin: u64, pieces: &Pieces, nbytes: usize, value: u128) {
    let phys = (!state.user_level_mode).then_some(pieces.parts[0].0);
    let rip = state.rip();
    if let Some(log) = state.tracer.mem_log.as_mut() {
        log.push(TraceEvent {
            instr_index: state.tracer.instr_index,
            rip,
            kind,
            lin,
            phys,
            nbytes,
            value,
        });
    }
}

/// Switches to system-level mode with an identity map of the first 512 GiB:
/// one PML4 page at `paddr` whose entry 0 points at a PDPT page at
/// `paddr + 0x1000` holding 512 present 1 GiB leaves.
pub fn init_system_level_mode(state: &mut MachineState, paddr: u64) -> Exec<()> {
    if paddr & PAGE_MASK != 0 || paddr.checked_add(2 * PAGE_SIZE).is_none_or(|e| e > PHYS_LIMIT) {
        return Err(state.fault(
            MsKind::BadMemoryAccess,
            format!("page-table base {paddr:#x} unaligned or out of range"),
        ));
    }
    let pdpt = paddr + PAGE_SIZE;
    let mut pml4 = vec![0u8; PAGE_SIZE as usize];
    pml4[..8].copy_from_slice(&(pdpt | PTE_P | PTE_RW | PTE_US).to_le_bytes());
    let mut table = vec![0u8; PAGE_SIZE as usize];
    for (i, slot) in table.chunks_exact_mut(8).enumerate() {
        slot.copy_from_slice(&identity_1g_entry(i as u64).to_le_bytes());
    }
    // Range checked above.
    let _ = state.mem.write_bytes(paddr, &pml4);
    let _ = state.mem.write_bytes(pdpt, &table);
    state.cr3 = paddr;
    state.user_level_mode = false;
    Ok(())
}

/// Raw PDPT entry mapping the `i`-th GiB onto itself.
pub fn identity_1g_entry(i: u64) -> u64 {
    (i << 30) | PTE_P | PTE_RW | PTE_US | PTE_PS
}
