#![allow(dead_code)]

pub mod criteria;
pub mod decode;
pub mod oracles;
pub mod programs;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use x86sim::config::RunConfig;
use x86sim::state::{OsInfo, RAX, RBX, RDI, RDX};
use x86sim::{x86_run, MachineState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_config(name: &str) -> RunConfig {
    RunConfig::from_file(&fixture(name)).unwrap()
}

/// Entry point, return site and halt address of the popcount fixture.
pub const POPCOUNT_START: u64 = 0x40_0650;
pub const POPCOUNT_RET: u64 = 0x40_06C2;
pub const POPCOUNT_HALT: u64 = 0x40_06C3;
pub const POPCOUNT_BUDGET: u64 = 300;

/// The popcount fixture, loaded and ready to run on whatever rdi holds.
pub fn popcount_state() -> MachineState {
    fixture_config("popcount.toml").build_state().unwrap()
}

/// Runs popcount on `n` from a prepared state; returns the final state and
/// the number of steps taken.
pub fn run_popcount(base: &MachineState, n: u64) -> (MachineState, u64) {
    let mut state = base.clone();
    state.gpr[RDI] = n;
    let steps = x86_run(POPCOUNT_BUDGET, &mut state);
    (state, steps)
}

pub fn wc_config(os: OsInfo) -> RunConfig {
    let mut cfg = match os {
        OsInfo::Linux => fixture_config("wc-linux.toml"),
        OsInfo::FreeBsd => fixture_config("wc-freebsd.toml"),
    };
    cfg.fs_map.clear();
    cfg.max_steps = 1_000_000;
    cfg
}

/// The word-count fixture with `/input.txt` holding `contents`.
pub fn wc_state(os: OsInfo, contents: &[u8]) -> MachineState {
    let mut state = wc_config(os).build_state().unwrap();
    state.env.add_file("/input.txt", contents.to_vec());
    state
}

/// (characters, words, lines) as reported by the fixture.
pub fn wc_result(state: &MachineState) -> (u64, u64, u64) {
    (state.gpr[RAX], state.gpr[RBX], state.gpr[RDX])
}

/// Random file contents of at most `max` bytes, biased towards text.
pub fn random_text<R: Rng>(rng: &mut R, max: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max);
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0 => b' ',
            1 => b'\n',
            2 => *b"\t\r\x0b\x0c".get(rng.gen_range(0..4)).unwrap(),
            3 => rng.gen(),
            _ => rng.gen_range(b'a'..=b'z'),
        })
        .collect()
}
