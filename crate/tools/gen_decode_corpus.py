#!/usr/bin/env python3
"""Generate the decoder differential corpus from GNU objdump.

For every implemented opcode (read from `x86sim opcodes`) and every ModR/M
byte, an encoding is built and disassembled by objdump. Each corpus line
records what objdump saw:

    <encoding>\t<length>\t<mnemonic>\t<operand shape>

The operand shape lists one token per operand: a register name, `m8`,
`m16`, `m32`, `m64` or `m` (unsized memory), `imm` or `rel`.

Usage: tools/gen_decode_corpus.py [--x86sim PATH] [--out FILE]
"""

import argparse
import os
import re
import subprocess
import sys
import tempfile

SLOT = 32
FILL = 0x90
# SIB bytes exercised in addition to the filler SIB (0x90) whenever the
# ModR/M byte calls for one: no index, no base, and a high-register mix.
EXTRA_SIBS = [0x24, 0x25, 0x65, 0xE5, 0x4C]

REGISTERS = {
    *"al cl dl bl ah ch dh bh spl bpl sil dil".split(),
    *[f"r{i}b" for i in range(8, 16)],
    *"ax cx dx bx sp bp si di".split(),
    *[f"r{i}w" for i in range(8, 16)],
    *"eax ecx edx ebx esp ebp esi edi".split(),
    *[f"r{i}d" for i in range(8, 16)],
    *"rax rcx rdx rbx rsp rbp rsi rdi".split(),
    *[f"r{i}" for i in range(8, 16)],
    *[f"cr{i}" for i in range(16)],
}
SIZES = {"BYTE": "m8", "WORD": "m16", "DWORD": "m32", "QWORD": "m64"}
BRANCHES = re.compile(r"^(j[a-z]+|call|jmp)$")


def implemented_rows(x86sim):
    out = subprocess.run([x86sim, "opcodes"], check=True, capture_output=True, text=True).stdout
    rows = []
    for line in out.splitlines()[1:]:
        f = line.split()
        two_byte = f[0].upper() == "0F"
        byte = int(f[1], 16)
        ext = None if f[2] == "-" else int(f[2][1:])
        rows.append((two_byte, byte, ext, f[3]))
    return rows


def uses_modrm(two_byte, byte, ext):
    if ext is not None:
        return True
    if two_byte:
        return byte not in (0x05, 0x07) and not (0x80 <= byte <= 0x8F)
    no_modrm = (
        set(range(0x50, 0x60))
        | set(range(0x70, 0x80))
        | set(range(0x90, 0x9A))
        | set(range(0xB0, 0xC0))
        | {0x04, 0x05, 0x0C, 0x0D, 0x14, 0x15, 0x1C, 0x1D, 0x24, 0x25, 0x2C, 0x2D, 0x34, 0x35, 0x3C, 0x3D}
        | {0x68, 0x6A, 0xA8, 0xA9, 0xC3, 0xE8, 0xE9, 0xEB}
    )
    return byte not in no_modrm


def candidates(rows):
    prefixes_full = [b"", b"\x48"]
    prefixes_sampled = [b"\x66", b"\x41", b"\x45", b"\x4C", b"\x40"]
    seen = set()
    for two_byte, byte, ext, _ in rows:
        opcode = (b"\x0f" if two_byte else b"") + bytes([byte])
        if not uses_modrm(two_byte, byte, ext):
            for p in prefixes_full + prefixes_sampled:
                yield p + opcode
            continue
        for modrm in range(256):
            reg = (modrm >> 3) & 7
            if ext is not None and reg != ext:
                continue
            mod, rm = modrm >> 6, modrm & 7
            sibs = [None]
            if mod != 3 and rm == 4:
                sibs = [FILL] + EXTRA_SIBS
            for sib in sibs:
                tail = b"" if sib is None else bytes([sib])
                prefixes = prefixes_full + (prefixes_sampled if modrm % 7 == 0 else [])
                for p in prefixes:
                    enc = p + opcode + bytes([modrm]) + tail
                    if enc not in seen:
                        seen.add(enc)
                        yield enc


def shape(mnemonic, operands):
    if not operands:
        return "-"
    tokens = []
    for op in split_operands(operands):
        op = op.strip()
        m = re.match(r"^(BYTE|WORD|DWORD|QWORD) PTR ", op)
        if m:
            tokens.append(SIZES[m.group(1)])
        elif "[" in op or re.match(r"^[c-gs]s:", op):
            tokens.append("m")
        elif op in REGISTERS:
            tokens.append(op)
        elif BRANCHES.match(mnemonic):
            tokens.append("rel")
        elif re.match(r"^(0x[0-9a-f]+|[0-9]+)$", op):
            tokens.append("imm")
        else:
            tokens.append("?" + op)
    return ",".join(tokens)


def split_operands(text):
    depth, cur, out = 0, "", []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return out


LINE = re.compile(r"^\s*([0-9a-f]+):\t((?:[0-9a-f]{2} )+)\s*\t?(.*)$")


def disassemble(blob):
    with tempfile.NamedTemporaryFile(suffix=".bin", delete=False) as f:
        f.write(blob)
        path = f.name
    try:
        out = subprocess.run(
            ["objdump", "-D", "-b", "binary", "-m", "i386:x86-64", "-M", "intel", "--insn-width=16", path],
            check=True,
            capture_output=True,
            text=True,
        ).stdout
    finally:
        os.unlink(path)
    result = {}
    for line in out.splitlines():
        m = LINE.match(line)
        if not m:
            continue
        addr = int(m.group(1), 16)
        raw = m.group(2).split()
        text = m.group(3).split("#")[0].strip()
        result[addr] = (raw, text)
    return result


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--x86sim", default="target/release/x86sim")
    ap.add_argument("--out", default="crates/core/tests/data/decode_corpus.txt")
    args = ap.parse_args()

    encodings = list(candidates(implemented_rows(args.x86sim)))
    blob = bytearray()
    for enc in encodings:
        slot = bytearray(enc) + bytes([FILL]) * (SLOT - len(enc))
        blob += slot
    listing = disassemble(bytes(blob))
    version = subprocess.run(["objdump", "--version"], capture_output=True, text=True).stdout.splitlines()[0]

    lines = [f"# objdump differential corpus ({version}); {len(encodings)} encodings",
             "# bytes\tlength\tmnemonic\toperand-shape"]
    for i, enc in enumerate(encodings):
        raw, text = listing[i * SLOT]
        # objdump spells prefixes that have no effect on the instruction
        # (a REX.W on a byte operation, say) in front of the mnemonic.
        words = text.split(None)
        while words and (words[0].startswith("rex") or words[0] == "data16"):
            words.pop(0)
        parts = " ".join(words).split(None, 1)
        mnemonic = parts[0] if parts else "(prefix)"
        operands = parts[1] if len(parts) > 1 else ""
        lines.append(f"{enc.hex()}\t{len(raw)}\t{mnemonic}\t{shape(mnemonic, operands)}")
    with open(args.out, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {len(encodings)} entries to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
