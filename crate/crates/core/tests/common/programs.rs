//! Random straight-line-and-branching programs over the implemented subset,
//! and the machine states that run them.
//!
//! Register conventions: rbx holds the data-area base, rsp the stack, r15
//! the loop counter; every other register is free for random use.

use rand::seq::SliceRandom;
use rand::Rng;
use x86sim::memory::init_system_level_mode;
use x86sim::{init_x86_state, MachineState};

pub const CODE_BASE: u64 = 0x40_0000;
pub const DATA_BASE: u64 = 0x60_0000;
pub const DATA_LEN: usize = 0x100;
pub const STACK_TOP: u64 = 0x7FF0_0000;
/// Page tables live far from code, data and stack.
pub const PT_BASE: u64 = 0x4000_0000;
pub const PT_LEN: u64 = 0x2000;

const RBX: u8 = 3;
const R15: u8 = 15;
const POOL: [u8; 12] = [0, 1, 2, 6, 7, 8, 9, 10, 11, 12, 13, 14];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    User,
    SystemMarking,
    SystemNonMarking,
}

#[derive(Debug, Clone)]
pub struct Program {
    pub bytes: Vec<u8>,
}

impl Program {
    pub fn halt(&self) -> u64 {
        CODE_BASE + self.bytes.len() as u64
    }
}

enum Chunk {
    Plain(Vec<u8>),
    /// Conditional forward jump over the next `skip` chunks.
    Jcc { cc: u8, skip: usize },
    /// `mov r15d, count; body; dec r15d; jnz body`.
    Loop { count: u8, body: Vec<Vec<u8>> },
}

fn pick<R: Rng, T: Copy>(rng: &mut R, choices: &[T]) -> T {
    *choices.choose(rng).unwrap()
}

fn reg<R: Rng>(rng: &mut R) -> u8 {
    *POOL.choose(rng).unwrap()
}

/// REX byte if any bit is needed (or `force` for uniform byte registers).
fn rex(w: bool, r: u8, x: u8, b: u8, force: bool) -> Vec<u8> {
    let v = 0x40 | (w as u8) << 3 | (r >> 3) << 2 | (x >> 3) << 1 | (b >> 3);
    if v != 0x40 || force {
        vec![v]
    } else {
        vec![]
    }
}

fn modrm(md: u8, reg: u8, rm: u8) -> u8 {
    md << 6 | (reg & 7) << 3 | (rm & 7)
}

/// Operand width in bytes plus its encoding prefix bytes.
fn width<R: Rng>(rng: &mut R) -> u8 {
    *[1u8, 2, 4, 8, 8].choose(rng).unwrap()
}

/// Encodes `[66] [REX] opcode modrm ...` for a width-dependent instruction
/// whose byte form is `op8` and wider form `op8 + 1`.
fn sized(w: u8, op8: &[u8], r: u8, b: u8, tail: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    if w == 2 {
        out.push(0x66);
    }
    out.extend(rex(w == 8, r, 0, b, false));
    let mut op = op8.to_vec();
    if w != 1 {
        *op.last_mut().unwrap() += 1;
    }
    out.extend(op);
    out.extend_from_slice(tail);
    out
}

fn reg_reg<R: Rng>(rng: &mut R, w: u8, op8: &[u8]) -> Vec<u8> {
    let (r, b) = (reg(rng), reg(rng));
    sized(w, op8, r, b, &[modrm(3, r, b)])
}

/// `[rbx + disp8]` memory operand with a register in the reg field.
fn reg_mem<R: Rng>(rng: &mut R, w: u8, op8: &[u8]) -> Vec<u8> {
    let r = reg(rng);
    let disp = rng.gen_range(0..0x78u8);
    sized(w, op8, r, RBX, &[modrm(1, r, RBX), disp])
}

fn ext_reg<R: Rng>(rng: &mut R, w: u8, op8: &[u8], ext: u8, imm: &[u8]) -> Vec<u8> {
    let b = reg(rng);
    let mut tail = vec![modrm(3, ext, b)];
    tail.extend_from_slice(imm);
    sized(w, op8, 0, b, &tail)
}

fn imm_for(rng: &mut impl Rng, w: u8) -> Vec<u8> {
    match w {
        1 => vec![rng.gen()],
        2 => rng.gen::<u16>().to_le_bytes().to_vec(),
        _ => rng.gen::<u32>().to_le_bytes().to_vec(),
    }
}

fn interesting_u64(rng: &mut impl Rng) -> u64 {
    match rng.gen_range(0..6) {
        0 => 0,
        1 => u64::MAX,
        2 => 1u64 << rng.gen_range(0..64),
        3 => rng.gen_range(0..256),
        4 => (rng.gen::<i8>() as i64) as u64,
        _ => rng.gen(),
    }
}

/// One instruction (or a short fixed idiom) that never jumps.
fn simple<R: Rng>(rng: &mut R, level: Level) -> Vec<u8> {
    let alu = rng.gen_range(0..8u8) << 3;
    match rng.gen_range(0..24) {
        0 | 1 => {
            let w = width(rng);
            reg_reg(rng, w, &[alu])
        }
        2 => {
            let w = width(rng);
            let op = alu + pick(rng, &[0u8, 2]);
            reg_mem(rng, w, &[op])
        }
        3 => {
            let w = width(rng);
            let imm = imm_for(rng, w);
            ext_reg(rng, w, &[0x80], alu >> 3, &imm)
        }
        4 => {
            let w = *[2u8, 4, 8].choose(rng).unwrap();
            // 0x83: the sign-extended imm8 group.
            let imm = [rng.gen::<u8>()];
            ext_reg(rng, w, &[0x82], alu >> 3, &imm)
        }
        5 => {
            // mov r, imm (B8+r, imm32 or imm64 under REX.W)
            let r = reg(rng);
            let w64 = rng.gen_bool(0.3);
            let mut v = rex(w64, 0, 0, r, false);
            v.push(0xB8 + (r & 7));
            if w64 {
                v.extend(interesting_u64(rng).to_le_bytes());
            } else {
                v.extend((interesting_u64(rng) as u32).to_le_bytes());
            }
            v
        }
        6 => {
            let w = width(rng);
            let op = pick(rng, &[0x88u8, 0x8A]);
            reg_mem(rng, w, &[op])
        }
        7 => {
            let w = width(rng);
            reg_reg(rng, w, &[0x88])
        }
        8 => {
            // inc, dec, not, neg
            let w = width(rng);
            match rng.gen_range(0..4) {
                0 => ext_reg(rng, w, &[0xFE], 0, &[]),
                1 => ext_reg(rng, w, &[0xFE], 1, &[]),
                2 => ext_reg(rng, w, &[0xF6], 2, &[]),
                _ => ext_reg(rng, w, &[0xF6], 3, &[]),
            }
        }
        9 | 10 => {
            // rol, ror, shl, shr, sar by imm8, by 1 or by cl
            let w = width(rng);
            let ext = *[0u8, 1, 4, 5, 7].choose(rng).unwrap();
            match rng.gen_range(0..3) {
                0 => {
                    let count = if rng.gen_bool(0.5) { rng.gen_range(0..4) } else { rng.gen_range(0..80) };
                    ext_reg(rng, w, &[0xC0], ext, &[count])
                }
                1 => ext_reg(rng, w, &[0xD0], ext, &[]),
                _ => ext_reg(rng, w, &[0xD2], ext, &[]),
            }
        }
        11 => {
            // mul, imul (one operand)
            let w = width(rng);
            let ext = pick(rng, &[4u8, 5]);
            ext_reg(rng, w, &[0xF6], ext, &[])
        }
        12 => {
            let w = *[2u8, 4, 8].choose(rng).unwrap();
            let (r, b) = (reg(rng), reg(rng));
            match rng.gen_range(0..2) {
                0 => sized(w, &[0x0F, 0xAE], r, b, &[modrm(3, r, b)]),
                _ => sized(w, &[0x6A], r, b, &[modrm(3, r, b), rng.gen()]),
            }
        }
        13 => {
            // Unsigned or signed division by an odd, hence nonzero, rcx.
            let w64 = rng.gen_bool(0.5);
            let rw = if w64 { vec![0x48] } else { vec![] };
            let mut v = Vec::new();
            if rng.gen_bool(0.5) {
                v.extend([0x31, 0xD2]); // xor edx, edx
                v.extend(rw.iter().chain(&[0x83, 0xC9, 0x01])); // or rcx, 1
                v.extend(rw.iter().chain(&[0xF7, 0xF1])); // div rcx
            } else {
                v.extend(rw.iter().chain(&[0x99])); // cdq / cqo
                v.extend(rw.iter().chain(&[0x83, 0xC9, 0x01]));
                v.extend(rw.iter().chain(&[0xF7, 0xF9])); // idiv rcx
            }
            v
        }
        14 => {
            // setcc r8
            let b = reg(rng);
            let mut v = rex(false, 0, 0, b, b >= 4);
            v.extend([0x0F, 0x90 + rng.gen_range(0..16), modrm(3, 0, b)]);
            v
        }
        15 => {
            let w = *[2u8, 4, 8].choose(rng).unwrap();
            let cc = rng.gen_range(0..16u8);
            let (r, b) = (reg(rng), reg(rng));
            sized(w, &[0x0F, 0x3F + cc], r, b, &[modrm(3, r, b)])
        }
        16 => {
            // test, xchg
            let w = width(rng);
            let op = pick(rng, &[0x84u8, 0x86]);
            reg_reg(rng, w, &[op])
        }
        17 => {
            // lea r, [rbx + rcx*4 + disp8]
            let r = reg(rng);
            let mut v = rex(true, r, 0, 0, false);
            v.extend([0x8D, modrm(1, r, 4), 0x8B, rng.gen()]);
            v
        }
        18 => {
            // movzx, movsx, movsxd
            let (r, b) = (reg(rng), reg(rng));
            match rng.gen_range(0..3) {
                0 => {
                    let mut v = rex(rng.gen(), r, 0, b, false);
                    v.extend([0x0F, *[0xB6u8, 0xB7, 0xBE, 0xBF].choose(rng).unwrap(), modrm(3, r, b)]);
                    v
                }
                1 => {
                    let mut v = rex(true, r, 0, b, false);
                    v.extend([0x63, modrm(3, r, b)]);
                    v
                }
                _ => {
                    let disp = rng.gen_range(0..0x78u8);
                    let mut v = rex(rng.gen(), r, 0, RBX, false);
                    v.extend([0x0F, *[0xB6u8, 0xB7, 0xBE, 0xBF].choose(rng).unwrap(), modrm(1, r, RBX), disp]);
                    v
                }
            }
        }
        19 => {
            // push r; pop r'
            let (a, b) = (reg(rng), reg(rng));
            let mut v = rex(false, 0, 0, a, false);
            v.push(0x50 + (a & 7));
            v.extend(rex(false, 0, 0, b, false));
            v.push(0x58 + (b & 7));
            v
        }
        20 => {
            // cbw/cwde/cdqe, cwd/cdq/cqo
            let mut v = match rng.gen_range(0..3) {
                0 => vec![0x66],
                1 => vec![],
                _ => vec![0x48],
            };
            v.push(*[0x98u8, 0x99].choose(rng).unwrap());
            v
        }
        21 => {
            // rdrand r
            let w = *[2u8, 4, 8].choose(rng).unwrap();
            let b = reg(rng);
            sized(w, &[0x0F, 0xC6], 0, b, &[modrm(3, 6, b)])
        }
        22 => {
            // call next; pop r
            let r = reg(rng);
            let mut v = vec![0xE8, 0, 0, 0, 0];
            v.extend(rex(false, 0, 0, r, false));
            v.push(0x58 + (r & 7));
            v
        }
        _ => {
            if level == Level::User && rng.gen_bool(0.5) {
                // write(1, data, n)
                let n = rng.gen_range(0..16u32);
                let mut v = vec![0xB8];
                v.extend(1u32.to_le_bytes());
                v.extend([0xBF, 1, 0, 0, 0]); // mov edi, 1
                v.extend([0x48, 0x89, 0xDE]); // mov rsi, rbx
                v.push(0xBA);
                v.extend(n.to_le_bytes()); // mov edx, n
                v.extend([0x0F, 0x05]);
                v
            } else {
                let w = width(rng);
                reg_mem(rng, w, &[0x84])
            }
        }
    }
}

/// A program of roughly `len` chunks: simple instructions, forward
/// conditional jumps and small counted loops.
pub fn random_program<R: Rng>(rng: &mut R, len: usize, level: Level) -> Program {
    let mut chunks = Vec::with_capacity(len);
    for _ in 0..len {
        chunks.push(match rng.gen_range(0..12) {
            0 => Chunk::Jcc { cc: rng.gen_range(0..16), skip: rng.gen_range(0..4) },
            1 => Chunk::Loop {
                count: rng.gen_range(1..5),
                body: (0..rng.gen_range(1..4)).map(|_| simple(rng, level)).collect(),
            },
            _ => Chunk::Plain(simple(rng, level)),
        });
    }
    let sizes: Vec<usize> = chunks
        .iter()
        .map(|c| match c {
            Chunk::Plain(b) => b.len(),
            Chunk::Jcc { .. } => 2,
            Chunk::Loop { body, .. } => 6 + body.iter().map(Vec::len).sum::<usize>() + 3 + 2,
        })
        .collect();
    let mut bytes = Vec::new();
    for (i, c) in chunks.iter().enumerate() {
        match c {
            Chunk::Plain(b) => bytes.extend(b),
            Chunk::Jcc { cc, skip } => {
                let end = (i + 1 + skip).min(chunks.len());
                let dist: usize = sizes[i + 1..end].iter().sum();
                let dist = dist.min(127);
                // Only skip whole chunks: shrink until the target is a boundary.
                let mut taken = 0;
                for s in &sizes[i + 1..end] {
                    if taken + s > dist {
                        break;
                    }
                    taken += s;
                }
                bytes.extend([0x70 + cc, taken as u8]);
            }
            Chunk::Loop { count, body } => {
                bytes.extend([0x41, 0xBF, *count, 0, 0, 0]); // mov r15d, count
                let start = bytes.len();
                for b in body {
                    bytes.extend(b);
                }
                bytes.extend([0x41, 0xFF, modrm(3, 1, R15)]); // dec r15d
                let back = (bytes.len() + 2 - start) as i64;
                bytes.extend([0x75, (-back) as i8 as u8]);
            }
        }
    }
    Program { bytes }
}

/// Initial register, flag and data values for a run.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub regs: Vec<(usize, u64)>,
    pub rflags: u64,
    pub data: Vec<u8>,
}

pub fn random_inputs<R: Rng>(rng: &mut R) -> Inputs {
    let mut regs: Vec<(usize, u64)> = POOL.iter().map(|&r| (r as usize, interesting_u64(rng))).collect();
    regs.push((RBX as usize, DATA_BASE));
    regs.push((4, STACK_TOP));
    regs.push((5, 0));
    regs.push((15, 0));
    let rflags = rng.gen::<u64>() & 0x8D5;
    let data = (0..DATA_LEN).map(|_| rng.gen()).collect();
    Inputs { regs, rflags, data }
}

/// Builds a state with `program` at the code base, halting after its last
/// byte. Memory setup writes physical memory directly so that no paging
/// entry is marked before the run starts.
pub fn program_state(program: &Program, inputs: &Inputs, level: Level) -> MachineState {
    let mut state = MachineState::new();
    if level != Level::User {
        init_system_level_mode(&mut state, PT_BASE).unwrap();
        state.marking_mode = level == Level::SystemMarking;
    }
    state.mem.write_bytes(CODE_BASE, &program.bytes).unwrap();
    state.mem.write_bytes(DATA_BASE, &inputs.data).unwrap();
    init_x86_state(&mut state, None, CODE_BASE, Some(program.halt()), &inputs.regs, Some(inputs.rflags), &[])
        .unwrap();
    state
}
