//! One check per acceptance criterion. Each returns a one-line summary on
//! success or the first disagreement found.

use std::collections::HashSet;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;
use x86sim::config::Mode;
use x86sim::memory::{init_system_level_mode, la_to_pa, peek_bytes, Access, PTE_A, PTE_D};
use x86sim::state::{OsInfo, RegWidth, UndefPolicy, RAX, RBX};
use x86sim::{linear_read, linear_write, x86_run, x86_step, MachineState, MsKind};

use super::oracles::{alu8_reference, expected_undefined, wc_spec, Alu8, CF};
use super::programs::{program_state, random_inputs, random_program, Level, PT_BASE, PT_LEN};
use super::*;

pub type Outcome = Result<String, String>;

pub fn popcount() -> Outcome {
    let base = popcount_state();
    let mut ret = [0u8];
    peek_bytes(&base, POPCOUNT_RET, &mut ret).ok_or("return site unreadable")?;
    if ret != [0xC3] || base.halt_addr != Some(POPCOUNT_RET + 1) || base.rip() != POPCOUNT_START {
        return Err(format!("fixture layout: byte {:#x} at return site, halt {:x?}", ret[0], base.halt_addr));
    }
    let mut rng = rng(0x5eed_0001);
    let fixed = [0, u64::MAX, 1, 1 << 63, 0x5555_5555_5555_5555];
    let inputs: Vec<u64> = fixed.into_iter().chain((fixed.len()..10_000).map(|_| rng.gen())).collect();
    let mut max_steps = 0;
    for &n in &inputs {
        let (state, steps) = run_popcount(&base, n);
        max_steps = max_steps.max(steps);
        match state.ms() {
            Some(ms) if ms.kind == MsKind::Halted && state.rip() == POPCOUNT_HALT => {}
            other => return Err(format!("input {n:#x}: stopped with {other:?} at {:#x}", state.rip())),
        }
        if state.gpr[RAX] != n.count_ones() as u64 {
            return Err(format!("input {n:#x}: rax {} but popcount {}", state.gpr[RAX], n.count_ones()));
        }
    }
    Ok(format!("{} inputs, rax = popcount(rdi), at most {max_steps} of {POPCOUNT_BUDGET} steps", inputs.len()))
}

pub fn word_count() -> Outcome {
    let mut rng = rng(0x5eed_0002);
    let files: Vec<Vec<u8>> = (0..100).map(|_| random_text(&mut rng, 4096)).collect();
    for os in [OsInfo::Linux, OsInfo::FreeBsd] {
        for (i, file) in files.iter().enumerate() {
            let mut state = wc_state(os, file);
            x86_run(1_000_000, &mut state);
            if state.ms().map(|m| m.kind) != Some(MsKind::Halted) {
                return Err(format!("{os:?} file {i}: {:?}", state.ms()));
            }
            let expected = wc_spec(file);
            if wc_result(&state) != expected {
                return Err(format!("{os:?} file {i} ({} bytes): got {:?}, spec {expected:?}", file.len(), wc_result(&state)));
            }
        }
    }
    Ok(format!("{} files x {{linux, freebsd}}: characters, words and lines match the spec function", files.len()))
}

fn level_for(i: usize) -> Level {
    [Level::User, Level::SystemMarking, Level::SystemNonMarking][i % 3]
}

pub fn composition() -> Outcome {
    let mut rng = rng(0x5eed_0003);
    let mut halted = 0;
    for i in 0..1000 {
        let level = level_for(i);
        let len = rng.gen_range(5..60);
        let program = random_program(&mut rng, len, level);
        let start = program_state(&program, &random_inputs(&mut rng), level);
        let n1 = rng.gen_range(0..=200u64);
        let n2 = rng.gen_range(0..=200 - n1);
        let mut direct = start.clone();
        x86_run(n1 + n2, &mut direct);
        let mut composed = start;
        x86_run(n1, &mut composed);
        x86_run(n2, &mut composed);
        if direct != composed {
            return Err(format!("trial {i} ({level:?}, n1={n1}, n2={n2}): composed run differs from direct run"));
        }
        halted += direct.ms().is_some_and(|m| m.kind == MsKind::Halted) as usize;
    }
    Ok(format!("1000 trials across user/marking/non-marking, full-state equality ({halted} reached halt)"))
}

const WIDTHS: [RegWidth; 5] = [RegWidth::Low8, RegWidth::High8, RegWidth::W16, RegWidth::W32, RegWidth::W64];

/// Byte-level model of a register write: the sub-register's bytes take the
/// value; a 32-bit write clears bytes 4..8.
fn model_reg_write(old: u64, width: RegWidth, value: u64) -> u64 {
    let mut bytes = old.to_le_bytes();
    let v = value.to_le_bytes();
    match width {
        RegWidth::Low8 => bytes[0] = v[0],
        RegWidth::High8 => bytes[1] = v[0],
        RegWidth::W16 => bytes[..2].copy_from_slice(&v[..2]),
        RegWidth::W32 => {
            bytes[..4].copy_from_slice(&v[..4]);
            bytes[4..].fill(0);
        }
        RegWidth::W64 => bytes = v,
    }
    u64::from_le_bytes(bytes)
}

fn model_reg_read(full: u64, width: RegWidth) -> u64 {
    let b = full.to_le_bytes();
    match width {
        RegWidth::Low8 => b[0] as u64,
        RegWidth::High8 => b[1] as u64,
        RegWidth::W16 => u16::from_le_bytes([b[0], b[1]]) as u64,
        RegWidth::W32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as u64,
        RegWidth::W64 => full,
    }
}

fn width_strategy() -> impl Strategy<Value = RegWidth> {
    prop::sample::select(WIDTHS.to_vec())
}

/// A register write: index (0..=3 for high-byte views), width, value.
fn reg_write_strategy() -> impl Strategy<Value = (usize, RegWidth, u64)> {
    (0..16usize, width_strategy(), any::<u64>())
        .prop_map(|(i, w, v)| (if w == RegWidth::High8 { i % 4 } else { i }, w, v))
}

/// Linear addresses clustered around a page boundary so that ranges overlap
/// and straddle pages often.
const MEM_WINDOW: u64 = 0x60_0FF0;
const MEM_WINDOW_LEN: u64 = 64;

fn mem_access_strategy() -> impl Strategy<Value = (u64, usize)> {
    (0..MEM_WINDOW_LEN - 16, prop::sample::select(vec![1usize, 2, 4, 8, 16])).prop_map(|(off, n)| (MEM_WINDOW + off, n))
}

fn mem_state(level: u8) -> MachineState {
    let mut state = MachineState::new();
    if level > 0 {
        init_system_level_mode(&mut state, PT_BASE).unwrap();
        state.marking_mode = level == 1;
    }
    state
}

fn model_bytes(state: &MachineState) -> Vec<u8> {
    let mut buf = vec![0u8; MEM_WINDOW_LEN as usize];
    peek_bytes(state, MEM_WINDOW, &mut buf).unwrap();
    buf
}

fn model_write(model: &mut [u8], addr: u64, n: usize, value: u128) {
    let off = (addr - MEM_WINDOW) as usize;
    model[off..off + n].copy_from_slice(&value.to_le_bytes()[..n]);
}

fn model_read(model: &[u8], addr: u64, n: usize) -> u128 {
    let off = (addr - MEM_WINDOW) as usize;
    let mut b = [0u8; 16];
    b[..n].copy_from_slice(&model[off..off + n]);
    u128::from_le_bytes(b)
}

pub fn row_wow() -> Outcome {
    const CASES: u32 = 10_000;
    let config = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    let mut report = Vec::new();

    // Register read-over-write: reading what was written yields the written
    // sub-register value; other registers are untouched.
    let mut runner = TestRunner::new(config.clone());
    runner
        .run(
            &(prop::array::uniform16(any::<u64>()), reg_write_strategy(), 0..16usize, width_strategy()),
            |(init, (wi, ww, v), ri, rw)| {
                let ri = if rw == RegWidth::High8 { ri % 4 } else { ri };
                let mut s = MachineState::new();
                s.gpr = init;
                s.write_gpr(wi, ww, v);
                let mut model = init;
                model[wi] = model_reg_write(init[wi], ww, v);
                prop_assert_eq!(s.read_gpr(ri, rw), model_reg_read(model[ri], rw));
                if ri == wi && rw == ww {
                    prop_assert_eq!(s.read_gpr(ri, rw), model_reg_read(v, if ww == RegWidth::High8 { RegWidth::Low8 } else { ww }));
                }
                prop_assert_eq!(s.gpr, model);
                Ok(())
            },
        )
        .map_err(|e| format!("register read-over-write: {e}"))?;
    report.push(format!("{CASES} register RoW"));

    // Register write-over-write: the later write wins on overlapping bytes.
    let mut runner = TestRunner::new(config.clone());
    runner
        .run(
            &(prop::array::uniform16(any::<u64>()), reg_write_strategy(), reg_write_strategy()),
            |(init, (i1, w1, v1), (i2, w2, v2))| {
                let mut s = MachineState::new();
                s.gpr = init;
                s.write_gpr(i1, w1, v1);
                s.write_gpr(i2, w2, v2);
                let mut model = init;
                model[i1] = model_reg_write(model[i1], w1, v1);
                model[i2] = model_reg_write(model[i2], w2, v2);
                prop_assert_eq!(s.gpr, model);
                if i1 == i2 && w1 == w2 {
                    let mut only_second = init;
                    only_second[i2] = model_reg_write(init[i2], w2, v2);
                    prop_assert_eq!(s.gpr, only_second);
                }
                Ok(())
            },
        )
        .map_err(|e| format!("register write-over-write: {e}"))?;
    report.push(format!("{CASES} register WoW"));

    // Memory read-over-write over disjoint and overlapping ranges, in all
    // three memory modes.
    let mut runner = TestRunner::new(config.clone());
    runner
        .run(
            &(0..3u8, prop::collection::vec(any::<u8>(), MEM_WINDOW_LEN as usize), mem_access_strategy(), any::<u128>(), mem_access_strategy()),
            |(level, fill, (wa, wn), v, (ra, rn))| {
                let mut s = mem_state(level);
                for (i, &b) in fill.iter().enumerate() {
                    linear_write(&mut s, MEM_WINDOW + i as u64, 1, b as u128).unwrap();
                }
                let mut model = model_bytes(&s);
                let v = v & (u128::MAX >> (128 - 8 * wn));
                linear_write(&mut s, wa, wn, v).unwrap();
                model_write(&mut model, wa, wn, v);
                let got = linear_read(&mut s, ra, rn, Access::Read).unwrap();
                prop_assert_eq!(got, model_read(&model, ra, rn));
                if ra == wa && rn == wn {
                    prop_assert_eq!(got, v);
                }
                if wa + wn as u64 <= ra || ra + rn as u64 <= wa {
                    prop_assert_eq!(got, model_read(&fill, ra, rn));
                }
                Ok(())
            },
        )
        .map_err(|e| format!("memory read-over-write: {e}"))?;
    report.push(format!("{CASES} memory RoW"));

    // Memory write-over-write: the whole window matches the byte model.
    let mut runner = TestRunner::new(config);
    runner
        .run(
            &(0..3u8, mem_access_strategy(), any::<u128>(), mem_access_strategy(), any::<u128>()),
            |(level, (a1, n1), v1, (a2, n2), v2)| {
                let mut s = mem_state(level);
                let mut model = model_bytes(&s);
                let v1 = v1 & (u128::MAX >> (128 - 8 * n1));
                let v2 = v2 & (u128::MAX >> (128 - 8 * n2));
                linear_write(&mut s, a1, n1, v1).unwrap();
                linear_write(&mut s, a2, n2, v2).unwrap();
                model_write(&mut model, a1, n1, v1);
                model_write(&mut model, a2, n2, v2);
                prop_assert_eq!(model_bytes(&s), model);
                Ok(())
            },
        )
        .map_err(|e| format!("memory write-over-write: {e}"))?;
    report.push(format!("{CASES} memory WoW"));
    Ok(report.join(", ") + " (user, marking and non-marking memory)")
}

/// Physical addresses of the PML4 and PDPT entries the identity map uses
/// for `lin`, computed from the table layout rather than by the walker.
fn identity_entries(lin: u64) -> [u64; 2] {
    [PT_BASE + ((lin >> 39) & 0x1FF) * 8, PT_BASE + 0x1000 + ((lin >> 30) & 0x1FF) * 8]
}

pub fn paging() -> Outcome {
    let mut rng = rng(0x5eed_0005);
    let mut marking = mem_state(1);
    let mut non_marking = mem_state(2);
    let pristine = non_marking.mem.clone();
    let mut changed_total = 0;
    for i in 0..10_000 {
        if i % 64 == 0 {
            marking = mem_state(1);
        }
        let lin = rng.gen_range(0..1u64 << 39);
        let access = [Access::Read, Access::Write, Access::Exec][rng.gen_range(0..3)];
        let expected_entries = identity_entries(lin);

        let before = marking.mem.clone();
        let old: Vec<u64> = expected_entries.iter().map(|&a| before.read(a, 8).unwrap() as u64).collect();
        let walk = la_to_pa(&mut marking, lin, access).map_err(|e| format!("{lin:#x}: {e}"))?;
        if walk.phys != lin {
            return Err(format!("{lin:#x} translated to {:#x}", walk.phys));
        }
        let touched: Vec<u64> = walk.touched_entries().iter().map(|t| t.addr).collect();
        if touched != expected_entries {
            return Err(format!("{lin:#x}: touched {touched:x?}, expected {expected_entries:x?}"));
        }
        // The changed bytes are exactly the low bytes of entries whose A
        // (or, for a write, the leaf's D) bit was clear.
        let mut expected_changed = Vec::new();
        for (k, (&addr, &raw)) in expected_entries.iter().zip(&old).enumerate() {
            let mut want = raw | PTE_A;
            if access == Access::Write && k == 1 {
                want |= PTE_D;
            }
            if marking.mem.read(addr, 8).unwrap() as u64 != want {
                return Err(format!("{lin:#x}: entry at {addr:#x} is not {want:#x}"));
            }
            if want != raw {
                expected_changed.push(addr);
            }
        }
        let changed = marking.mem.diff(&before);
        if changed != expected_changed {
            return Err(format!("{lin:#x} {access:?}: changed bytes {changed:x?}, expected {expected_changed:x?}"));
        }
        changed_total += changed.len();

        let walk = la_to_pa(&mut non_marking, lin, access).map_err(|e| format!("{lin:#x}: {e}"))?;
        if walk.phys != lin {
            return Err(format!("non-marking: {lin:#x} translated to {:#x}", walk.phys));
        }
    }
    if non_marking.mem != pristine || !non_marking.mem.diff(&pristine).is_empty() {
        return Err("non-marking walks changed physical memory".into());
    }
    Ok(format!("10000 identity translations; {changed_total} A/D byte changes, all on touched entries; non-marking memory bit-identical"))
}

pub fn mode_equivalence() -> Outcome {
    let mut rng = rng(0x5eed_0006);
    let pt = PT_BASE..PT_BASE + PT_LEN;
    let mut steps_total = 0;
    for i in 0..100 {
        let len = rng.gen_range(10..80);
        let program = random_program(&mut rng, len, Level::SystemMarking);
        let inputs = random_inputs(&mut rng);
        let mut m = program_state(&program, &inputs, Level::SystemMarking);
        let mut n = program_state(&program, &inputs, Level::SystemNonMarking);
        let sm = x86_run(5_000, &mut m);
        let sn = x86_run(5_000, &mut n);
        steps_total += sm;
        let outside: Vec<u64> = m.mem.diff(&n.mem).into_iter().filter(|a| !pt.contains(a)).collect();
        let same = sm == sn
            && m.gpr == n.gpr
            && m.rip() == n.rip()
            && m.rflags() == n.rflags()
            && m.ms() == n.ms()
            && m.undef_seed() == n.undef_seed()
            && m.env == n.env
            && (m.cr0, m.cr2, m.cr3, m.cr4, m.msr) == (n.cr0, n.cr2, n.cr3, n.cr4, n.msr)
            && outside.is_empty();
        if !same {
            return Err(format!("program {i}: marking and non-marking runs differ (memory outside tables: {outside:x?})"));
        }
        if m.mem.diff(&n.mem).is_empty() && sm > 0 {
            return Err(format!("program {i}: marking run set no accessed bits"));
        }
    }
    Ok(format!("100 programs, {steps_total} steps; states equal outside the page tables"))
}

pub fn undef_accounting() -> Outcome {
    let mut rng = rng(0x5eed_0007);
    let (mut checked, mut undefs) = (0u64, 0u64);
    for i in 0..300 {
        let level = level_for(i);
        let len = rng.gen_range(10..60);
        let program = random_program(&mut rng, len, level);
        let mut state = program_state(&program, &random_inputs(&mut rng), level);
        state.undef_policy = [UndefPolicy::Injective, UndefPolicy::Zero, UndefPolicy::Seeded(i as u64)][i % 3];
        for _ in 0..2_000 {
            if state.ms().is_some() {
                break;
            }
            let rip = state.rip();
            let expected = if state.halt_addr == Some(rip) { Some(0) } else { expected_undefined(&state) };
            let before = state.undef_seed();
            x86_step(&mut state);
            let delta = state.undef_seed() - before;
            let expected = match state.ms() {
                Some(ms) if ms.kind != MsKind::Halted => 0,
                _ => expected.ok_or_else(|| format!("program {i}: undecodable instruction at {rip:#x} ran"))?,
            };
            if delta != expected {
                let mut bytes = [0u8; 15];
                peek_bytes(&state, rip, &mut bytes);
                return Err(format!("program {i} at {rip:#x} ({bytes:02x?}): seed advanced {delta}, expected {expected}"));
            }
            checked += 1;
            undefs += delta;
        }
    }
    let mut state = MachineState::new();
    state.undef_policy = UndefPolicy::Injective;
    let draws: HashSet<u64> = (0..100_000).map(|_| state.undef_read()).collect();
    if draws.len() != 100_000 {
        return Err(format!("injective policy repeated values: {} distinct of 100000", draws.len()));
    }
    Ok(format!("{checked} instructions, {undefs} undefined values accounted; 100000 injective draws pairwise distinct"))
}

pub fn decoder_differential() -> Outcome {
    let (checked, failures) = super::decode::decode_differential();
    match failures.first() {
        None => Ok(format!("{checked} objdump corpus entries agree on mnemonic, length and operand shape")),
        Some(first) => Err(format!("{} of {checked} disagree; first: {first}", failures.len())),
    }
}

pub fn flag_brute_force() -> Outcome {
    const CODE: u64 = 0x1000;
    let mut cases = 0u64;
    for op in Alu8::ALL {
        let mut state = MachineState::new();
        state.mem.write_bytes(CODE, &op.encoding()).unwrap();
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                for carry in [false, true] {
                    state.set_rip(CODE).unwrap();
                    state.gpr[RAX] = 0x1111_1111_1111_1100 | a as u64;
                    state.gpr[RBX] = 0x2222_2222_2222_2200 | b as u64;
                    state.set_rflags(if carry { CF } else { 0 });
                    x86_step(&mut state);
                    if let Some(ms) = state.ms() {
                        return Err(format!("{op:?} {a:#x},{b:#x}: {ms}"));
                    }
                    let (r, flags, defined) = alu8_reference(op, a, b, carry);
                    let al = if op.writes_result() { r } else { a };
                    if state.gpr[RAX] != 0x1111_1111_1111_1100 | al as u64 || state.gpr[RBX] & 0xFF != b as u64 {
                        return Err(format!("{op:?} {a:#x},{b:#x},cf={carry}: rax {:#x}, expected al {al:#x}", state.gpr[RAX]));
                    }
                    if state.rflags() & defined != flags & defined {
                        return Err(format!(
                            "{op:?} {a:#x},{b:#x},cf={carry}: flags {:#x}, expected {:#x} under mask {defined:#x}",
                            state.rflags() & defined,
                            flags & defined
                        ));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} cases (8 ops x 65536 pairs x carry-in) match the wide-integer oracle"))
}

/// Steps per second of the benchmark loop in `mode`, with the step count.
pub fn bench_rate(mode: Mode) -> Result<(f64, u64), String> {
    let mut cfg = fixture_config("bench.toml");
    cfg.mode = mode;
    if mode != Mode::User {
        cfg.pt_base = Some(PT_BASE);
    }
    let mut state = cfg.build_state().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let steps = x86_run(cfg.max_steps, &mut state);
    let secs = start.elapsed().as_secs_f64();
    if state.ms().map(|m| m.kind) != Some(MsKind::Halted) {
        return Err(format!("{mode:?} benchmark did not halt: {:?}", state.ms()));
    }
    Ok((steps as f64 / secs, steps))
}

pub fn throughput() -> Outcome {
    let (user, user_steps) = bench_rate(Mode::User)?;
    let (system, system_steps) = bench_rate(Mode::SystemMarking)?;
    let ratio = user / system;
    let summary = format!(
        "user {:.2}M steps/s ({user_steps} steps), system-marking {:.2}M steps/s ({system_steps} steps), ratio {ratio:.1}x",
        user / 1e6,
        system / 1e6
    );
    let ok = user_steps >= 10_000_000 && system_steps >= 10_000_000 && user >= 1e6 && system >= 1e5 && (3.0..=30.0).contains(&ratio);
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}
