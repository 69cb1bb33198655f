//! Comparison of the decoder against the objdump corpus.

use x86sim::decoder::{decode_bytes, register_name, OperandKind};
use x86sim::opcodes::OpcodeTable;

pub struct CorpusEntry {
    pub bytes: Vec<u8>,
    pub length: usize,
    pub mnemonic: String,
    pub shape: String,
}

pub fn corpus() -> Vec<CorpusEntry> {
    let text = include_str!("../data/decode_corpus.txt");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bytes = (0..f[0].len()).step_by(2).map(|i| u8::from_str_radix(&f[0][i..i + 2], 16).unwrap()).collect();
            CorpusEntry { bytes, length: f[1].parse().unwrap(), mnemonic: f[2].into(), shape: f[3].into() }
        })
        .collect()
}

/// Every mnemonic the decoder can produce.
pub fn our_mnemonics() -> std::collections::HashSet<String> {
    let mut set = std::collections::HashSet::new();
    for e in OpcodeTable::get().entries() {
        for part in e.mnemonic.split('|') {
            if part.contains('*') {
                for cc in ["o", "no", "b", "ae", "e", "ne", "be", "a", "s", "ns", "p", "np", "l", "ge", "le", "g"] {
                    set.insert(part.replace('*', cc));
                }
            } else {
                set.insert(part.to_string());
            }
        }
    }
    set.insert("movabs".into());
    set
}

fn shape_of(bytes: &[u8]) -> Result<(usize, String, String), String> {
    let di = decode_bytes(bytes).map_err(|e| e.to_string())?;
    let tokens: Vec<String> = di
        .operands()
        .iter()
        .map(|&op| match di.operand(op) {
            OperandKind::Reg { index, high8, size } => register_name(index, high8, size).to_string(),
            OperandKind::Mem { size: 0 } => "m".into(),
            OperandKind::Mem { size } => format!("m{}", size as u32 * 8),
            OperandKind::Imm { .. } => "imm".into(),
            OperandKind::Rel(_) => "rel".into(),
            OperandKind::ControlReg(n) => format!("cr{n}"),
        })
        .collect();
    let shape = if tokens.is_empty() { "-".to_string() } else { tokens.join(",") };
    Ok((di.length as usize, di.mnemonic(), shape))
}

/// objdump decodes a 66 prefix on a near branch the AMD way (16-bit target,
/// `jmpw`/`callw`/`retw`); the decoder follows Intel 64, where the prefix is
/// ignored in 64-bit mode and rel32 stays 32 bits. Returns the Intel
/// expectation for such entries.
fn intel_near_branch(e: &CorpusEntry) -> Option<(usize, String, String)> {
    let opcode_at = e.bytes.iter().position(|&b| !(b == 0x66 || (0x40..=0x4F).contains(&b)))?;
    if !e.bytes[..opcode_at].contains(&0x66) {
        return None;
    }
    let op = &e.bytes[opcode_at..];
    let widened = matches!(op, [0xE8 | 0xE9, ..] | [0x0F, 0x80..=0x8F, ..]);
    let branch = widened || matches!(op, [0xC3 | 0xEB | 0x70..=0x7F, ..]);
    if !branch {
        return None;
    }
    let mnemonic = match e.mnemonic.as_str() {
        "callw" | "jmpw" | "retw" => e.mnemonic.trim_end_matches('w').to_string(),
        m => m.to_string(),
    };
    let shape = if e.shape == "-" { "-".to_string() } else { "rel".to_string() };
    Some((e.length + if widened { 2 } else { 0 }, mnemonic, shape))
}

/// Returns the number of entries checked, or the disagreements.
pub fn decode_differential() -> (usize, Vec<String>) {
    let known = our_mnemonics();
    let entries = corpus();
    let mut failures = Vec::new();
    for e in &entries {
        let mut padded = e.bytes.clone();
        padded.extend([0x90; 15]);
        let hex: String = e.bytes.iter().map(|b| format!("{b:02x}")).collect();
        match shape_of(&padded) {
            Ok((len, mnem, shape)) => {
                let expected = intel_near_branch(e)
                    .unwrap_or_else(|| (e.length, e.mnemonic.clone(), e.shape.clone()));
                if (len, &mnem, &shape) != (expected.0, &expected.1, &expected.2) {
                    failures.push(format!(
                        "{hex}: decoder {len} {mnem} {shape}, objdump {} {} {}",
                        e.length, e.mnemonic, e.shape
                    ));
                }
            }
            Err(err) => {
                if known.contains(&e.mnemonic) {
                    failures.push(format!("{hex}: decoder rejected ({err}), objdump {} {}", e.mnemonic, e.shape));
                }
            }
        }
    }
    (entries.len(), failures)
}
