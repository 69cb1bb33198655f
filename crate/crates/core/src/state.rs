//! The machine state record and its accessor/updater discipline.
//!
//! Every architectural and model-level component of the simulated machine
//! lives in [`MachineState`]. Fields without an invariant of their own are
//! public; `rip`, `rflags`, `ms` and the undefined-value seed are private and
//! only reachable through methods that maintain their invariants.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use crate::env::Environment;
use crate::instrument::Tracer;
use crate::memory::PhysicalMemory;

pub const RAX: usize = 0;
pub const RCX: usize = 1;
pub const RDX: usize = 2;
pub const RBX: usize = 3;
pub const RSP: usize = 4;
pub const RBP: usize = 5;
pub const RSI: usize = 6;
pub const RDI: usize = 7;
pub const R8: usize = 8;
pub const R9: usize = 9;
pub const R10: usize = 10;
pub const R11: usize = 11;
pub const R12: usize = 12;
pub const R13: usize = 13;
pub const R14: usize = 14;
pub const R15: usize = 15;

pub const GPR_NAMES: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13",
    "r14", "r15",
];

/// Looks up a 64-bit register by its lower-case name.
pub fn gpr_index(name: &str) -> Option<usize> {
    GPR_NAMES.iter().position(|n| *n == name)
}

/// Segment register slots, in `seg_selector` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegReg {
    Es = 0,
    Cs = 1,
    Ss = 2,
    Ds = 3,
    Fs = 4,
    Gs = 5,
}

/// Sub-register views of a general-purpose register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegWidth {
    Low8,
    /// ah/ch/dh/bh; only meaningful for indices 0..=3.
    High8,
    W16,
    W32,
    W64,
}

impl RegWidth {
    pub fn bytes(self) -> u32 {
        match self {
            RegWidth::Low8 | RegWidth::High8 => 1,
            RegWidth::W16 => 2,
            RegWidth::W32 => 4,
            RegWidth::W64 => 8,
        }
    }
}

/// The status flags the model tracks individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    CF,
    PF,
    AF,
    ZF,
    SF,
    DF,
    OF,
}

impl Flag {
    pub const ALL: [Flag; 7] = [Flag::CF, Flag::PF, Flag::AF, Flag::ZF, Flag::SF, Flag::DF, Flag::OF];

    pub const fn bit(self) -> u32 {
        match self {
            Flag::CF => 0,
            Flag::PF => 2,
            Flag::AF => 4,
            Flag::ZF => 6,
            Flag::SF => 7,
            Flag::DF => 10,
            Flag::OF => 11,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Flag::CF => "cf",
            Flag::PF => "pf",
            Flag::AF => "af",
            Flag::ZF => "zf",
            Flag::SF => "sf",
            Flag::DF => "df",
            Flag::OF => "of",
        }
    }

    pub fn from_name(name: &str) -> Option<Flag> {
        Flag::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// rflags bit 1 always reads as one.
pub const RFLAGS_FIXED_ONE: u64 = 1 << 1;
/// Bits 3, 5, 15 and 22..=63 always read as zero.
pub const RFLAGS_FIXED_ZERO: u64 = (1 << 3) | (1 << 5) | (1 << 15) | !((1u64 << 22) - 1);

/// Forces the reserved rflags bits to their architectural values.
pub const fn normalize_rflags(value: u64) -> u64 {
    (value & !RFLAGS_FIXED_ZERO) | RFLAGS_FIXED_ONE
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PseudoDescriptor {
    pub base: u64,
    pub limit: u16,
}

/// Model-level status kinds recorded in `ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsKind {
    Halted,
    UnimplementedOpcode,
    DecodeError,
    PageFault,
    DivideError,
    BadMemoryAccess,
    SyscallFault,
    OracleEmpty,
}

impl fmt::Display for MsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MsKind::Halted => "Halted",
            MsKind::UnimplementedOpcode => "UnimplementedOpcode",
            MsKind::DecodeError => "DecodeError",
            MsKind::PageFault => "PageFault",
            MsKind::DivideError => "DivideError",
            MsKind::BadMemoryAccess => "BadMemoryAccess",
            MsKind::SyscallFault => "SyscallFault",
            MsKind::OracleEmpty => "OracleEmpty",
        };
        f.write_str(s)
    }
}

/// The `ms` record: why the interpreter stopped.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelStatus {
    pub kind: MsKind,
    pub at_rip: u64,
    pub detail: String,
}

impl fmt::Display for ModelStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at rip {:#x}", self.kind, self.at_rip)?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

impl std::error::Error for ModelStatus {}

/// Result of any operation that may stop the machine. An `Err` always means
/// the same status has been recorded in the state's `ms`.
pub type Exec<T> = Result<T, ModelStatus>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OsInfo {
    #[default]
    Linux,
    FreeBsd,
}

/// How `undef_read` turns the seed into a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum UndefPolicy {
    /// Distinct seeds give distinct values.
    #[default]
    Injective,
    Zero,
    /// Pure function of `(k, seed)`; replaying with the same `k` reproduces a run.
    Seeded(u64),
}

/// SplitMix64 finalizer: a bijection on `u64`.
const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn create_undef(policy: UndefPolicy, seed: u64) -> u64 {
    match policy {
        UndefPolicy::Injective => mix64(seed),
        UndefPolicy::Zero => 0,
        UndefPolicy::Seeded(k) => mix64(seed ^ mix64(k.wrapping_add(0x9E37_79B9_7F4A_7C15))),
    }
}

pub const IA32_EFER: u32 = 0xC000_0080;
pub const IA32_STAR: u32 = 0xC000_0081;
pub const IA32_LSTAR: u32 = 0xC000_0082;
pub const IA32_FMASK: u32 = 0xC000_0084;
pub const IA32_FS_BASE: u32 = 0xC000_0100;
pub const IA32_GS_BASE: u32 = 0xC000_0101;
pub const IA32_KERNEL_GS_BASE: u32 = 0xC000_0102;

pub const MSR_EFER_IDX: usize = 0;
pub const MSR_FS_BASE_IDX: usize = 1;
pub const MSR_GS_BASE_IDX: usize = 2;
pub const MSR_KERNEL_GS_BASE_IDX: usize = 3;
pub const MSR_LSTAR_IDX: usize = 4;
pub const MSR_STAR_IDX: usize = 5;
pub const MSR_FMASK_IDX: usize = 6;

/// Architectural MSR identifier to model index.
pub const MSR_IDENTIFIERS: [(u32, usize); 7] = [
    (IA32_EFER, MSR_EFER_IDX),
    (IA32_FS_BASE, MSR_FS_BASE_IDX),
    (IA32_GS_BASE, MSR_GS_BASE_IDX),
    (IA32_KERNEL_GS_BASE, MSR_KERNEL_GS_BASE_IDX),
    (IA32_LSTAR, MSR_LSTAR_IDX),
    (IA32_STAR, MSR_STAR_IDX),
    (IA32_FMASK, MSR_FMASK_IDX),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("unimplemented MSR {0:#x}")]
pub struct UnknownMsr(pub u32);

pub struct MsrIdentifierMap {
    entries: HashMap<u32, usize>,
}

impl MsrIdentifierMap {
    pub fn get() -> &'static MsrIdentifierMap {
        static MAP: OnceLock<MsrIdentifierMap> = OnceLock::new();
        MAP.get_or_init(|| MsrIdentifierMap { entries: MSR_IDENTIFIERS.into_iter().collect() })
    }

    pub fn entries(&self) -> &HashMap<u32, usize> {
        &self.entries
    }
}

pub fn msr_index(identifier: u32) -> Result<usize, UnknownMsr> {
    MsrIdentifierMap::get().entries.get(&identifier).copied().ok_or(UnknownMsr(identifier))
}

/// True when bits 63..48 replicate bit 47.
#[inline]
pub const fn is_canonical(lin: u64) -> bool {
    (((lin << 16) as i64) >> 16) as u64 == lin
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub gpr: [u64; 16],
    rip: u64,
    rflags: u64,
    pub seg_selector: [u16; 6],
    pub fs_base: u64,
    pub gs_base: u64,
    pub gdtr: PseudoDescriptor,
    pub idtr: PseudoDescriptor,
    pub cr0: u64,
    pub cr2: u64,
    pub cr3: u64,
    pub cr4: u64,
    pub msr: [u64; 7],
    pub mem: PhysicalMemory,
    ms: Option<ModelStatus>,
    pub halt_addr: Option<u64>,
    pub user_level_mode: bool,
    pub marking_mode: bool,
    undef_seed: u64,
    pub undef_policy: UndefPolicy,
    pub os_info: OsInfo,
    pub env: Environment,
    pub(crate) tracer: Tracer,
}

impl Default for MachineState {
    fn default() -> Self {
        MachineState::new()
    }
}

impl MachineState {
    /// A zeroed state in user-level mode.
    pub fn new() -> Self {
        MachineState {
            gpr: [0; 16],
            rip: 0,
            rflags: normalize_rflags(0),
            seg_selector: [0; 6],
            fs_base: 0,
            gs_base: 0,
            gdtr: PseudoDescriptor::default(),
            idtr: PseudoDescriptor::default(),
            cr0: 0,
            cr2: 0,
            cr3: 0,
            cr4: 0,
            msr: [0; 7],
            mem: PhysicalMemory::new(),
            ms: None,
            halt_addr: None,
            user_level_mode: true,
            marking_mode: true,
            undef_seed: 0,
            undef_policy: UndefPolicy::default(),
            os_info: OsInfo::default(),
            env: Environment::default(),
            tracer: Tracer::default(),
        }
    }

    pub fn rip(&self) -> u64 {
        self.rip
    }

    /// Sets rip, refusing non-canonical targets.
    pub fn set_rip(&mut self, target: u64) -> Exec<()> {
        if !is_canonical(target) {
            return Err(self.fault(
                MsKind::BadMemoryAccess,
                format!("non-canonical instruction pointer {target:#x}"),
            ));
        }
        self.rip = target;
        Ok(())
    }

    pub fn rflags(&self) -> u64 {
        self.rflags
    }

    pub fn set_rflags(&mut self, value: u64) {
        self.rflags = normalize_rflags(value);
    }

    pub fn ms(&self) -> Option<&ModelStatus> {
        self.ms.as_ref()
    }

    /// Records `ms` unless one is already present (the first stop wins) and
    /// returns the recorded status.
    pub fn fault(&mut self, kind: MsKind, detail: impl Into<String>) -> ModelStatus {
        if let Some(ms) = &self.ms {
            return ms.clone();
        }
        let status = ModelStatus { kind, at_rip: self.rip, detail: detail.into() };
        self.ms = Some(status.clone());
        status
    }

    /// Explicit re-initialization of `ms`; used by `init_x86_state`.
    pub(crate) fn reset_ms(&mut self, ms: Option<ModelStatus>) {
        self.ms = ms;
    }

    pub fn undef_seed(&self) -> u64 {
        self.undef_seed
    }

    /// Draws the next indeterminate value from the pool.
    pub fn undef_read(&mut self) -> u64 {
        let value = create_undef(self.undef_policy, self.undef_seed);
        self.undef_seed += 1;
        value
    }

    pub fn read_gpr(&self, index: usize, width: RegWidth) -> u64 {
        let full = self.gpr[index];
        match width {
            RegWidth::Low8 => full & 0xFF,
            RegWidth::High8 => (full >> 8) & 0xFF,
            RegWidth::W16 => full & 0xFFFF,
            RegWidth::W32 => full & 0xFFFF_FFFF,
            RegWidth::W64 => full,
        }
    }

    /// 32-bit writes zero-extend; 8- and 16-bit writes merge.
    pub fn write_gpr(&mut self, index: usize, width: RegWidth, value: u64) {
        let slot = &mut self.gpr[index];
        *slot = match width {
            RegWidth::Low8 => (*slot & !0xFF) | (value & 0xFF),
            RegWidth::High8 => (*slot & !0xFF00) | ((value & 0xFF) << 8),
            RegWidth::W16 => (*slot & !0xFFFF) | (value & 0xFFFF),
            RegWidth::W32 => value & 0xFFFF_FFFF,
            RegWidth::W64 => value,
        };
    }

    pub fn read_flag(&self, flag: Flag) -> bool {
        self.rflags >> flag.bit() & 1 == 1
    }

    pub fn write_flag(&mut self, flag: Flag, bit: bool) {
        let mask = 1u64 << flag.bit();
        let value = if bit { self.rflags | mask } else { self.rflags & !mask };
        self.rflags = normalize_rflags(value);
    }

    pub fn msr_by_identifier(&self, identifier: u32) -> Result<u64, UnknownMsr> {
        Ok(self.msr[msr_index(identifier)?])
    }

    /// Only FS and GS carry a base in 64-bit mode.
    pub fn segment_base(&self, seg: SegReg) -> u64 {
        match seg {
            SegReg::Fs => self.fs_base,
            SegReg::Gs => self.gs_base,
            _ => 0,
        }
    }
}
