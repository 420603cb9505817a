"""
Bit-exact encodings of the C-Inst set and of the 128-bit micro-instruction word.

C-Insts are RV32 R-type words on the custom-0 major opcode. The 5-bit register
fields name the registers that hold the operand base addresses; streams inside
the simulator carry the resolved addresses directly (``CInst`` accepts up to
26-bit operands and only ``encode_cinst`` insists on register-sized fields).
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, List, Optional, Sequence, Tuple

from .errors import DecodeError, DomainError, ParseError

CUSTOM0_OPCODE = 0b0001011
OPERAND_LIMIT = 1 << 26


class CInstKind(Enum):
    FREEXOR = "FREEXOR"
    HALFGATE = "HALFGATE"
    POLYADD = "POLYADD"
    POLYSUB = "POLYSUB"
    POLYPERM = "POLYPERM"
    POLYMUL = "POLYMUL"  # fused multiply and reduce
    NTT = "NTT"
    INTT = "INTT"
    UIM_WRITE = "UIM_WRITE"
    LUT_WRITE = "LUT_WRITE"

    @property
    def is_gc(self) -> bool:
        return self in (CInstKind.FREEXOR, CInstKind.HALFGATE)

    @property
    def is_he(self) -> bool:
        return self in HE_KINDS

    @property
    def is_update(self) -> bool:
        return self in (CInstKind.UIM_WRITE, CInstKind.LUT_WRITE)


HE_KINDS = (CInstKind.POLYADD, CInstKind.POLYSUB, CInstKind.POLYPERM, CInstKind.POLYMUL,
            CInstKind.NTT, CInstKind.INTT)

# kind -> (funct3, funct7)
FUNCT_CODES = {
    CInstKind.FREEXOR: (0b000, 0b0000000),
    CInstKind.HALFGATE: (0b000, 0b0000001),
    CInstKind.POLYADD: (0b001, 0b0000000),
    CInstKind.POLYSUB: (0b001, 0b0000001),
    CInstKind.POLYPERM: (0b001, 0b0000010),
    CInstKind.POLYMUL: (0b001, 0b0000011),
    CInstKind.NTT: (0b010, 0b0000000),
    CInstKind.INTT: (0b010, 0b0000001),
    CInstKind.UIM_WRITE: (0b011, 0b0000000),
    CInstKind.LUT_WRITE: (0b011, 0b0000001),
}
_KIND_BY_FUNCT = {v: k for k, v in FUNCT_CODES.items()}


@dataclass(frozen=True)
class CInst:
    kind: CInstKind
    rd: int = 0
    rs1: int = 0
    rs2: int = 0

    def __post_init__(self):
        for name in ("rd", "rs1", "rs2"):
            v = getattr(self, name)
            if not 0 <= v < OPERAND_LIMIT:
                raise DomainError(f"{name}={v} outside the 26-bit operand range")

    @property
    def sources(self) -> Tuple[int, ...]:
        if self.kind.is_update:
            return ()
        if self.kind in (CInstKind.NTT, CInstKind.INTT):
            # in-place butterfly: x at rd, y at rs1, twiddle at rs2
            return (self.rd, self.rs1, self.rs2)
        return (self.rs1, self.rs2)

    @property
    def destination(self) -> Optional[int]:
        return None if self.kind.is_update else self.rd

    def __str__(self) -> str:
        return f"{self.kind.value} {self.rd:#05x}, {self.rs1:#05x}, {self.rs2:#05x}"


def encode_cinst(inst: CInst) -> int:
    for name in ("rd", "rs1", "rs2"):
        if getattr(inst, name) >= 32:
            raise DomainError(f"{name}={getattr(inst, name)} does not fit a 5-bit register field")
    f3, f7 = FUNCT_CODES[inst.kind]
    return (f7 << 25) | (inst.rs2 << 20) | (inst.rs1 << 15) | (f3 << 12) | (inst.rd << 7) | CUSTOM0_OPCODE


def decode_cinst(word: int) -> CInst:
    if not 0 <= word < (1 << 32):
        raise DecodeError(f"{word:#x} is not a 32-bit word")
    if word & 0x7F != CUSTOM0_OPCODE:
        raise DecodeError(f"opcode {word & 0x7F:#09b} is not custom-0")
    key = ((word >> 12) & 0b111, (word >> 25) & 0x7F)
    if key not in _KIND_BY_FUNCT:
        raise DecodeError(f"reserved funct3/funct7 pattern {key[0]:#05b}/{key[1]:#09b}")
    return CInst(_KIND_BY_FUNCT[key], (word >> 7) & 0x1F, (word >> 15) & 0x1F, (word >> 20) & 0x1F)


# ---------------------------------------------------------------------------
# Assembly: one C-Inst per line, "OP rd, rs1, rs2"; '#' starts a comment
# ---------------------------------------------------------------------------

_ASM_LINE = re.compile(r"^\s*([A-Za-z_]+)\s*(.*?)\s*$")


def _operand(tok: str, line: int) -> int:
    tok = tok.strip().lower()
    if tok.startswith("x") and tok[1:].isdigit():
        tok = tok[1:]
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(f"bad operand {tok!r}", line)


def assemble(text: str) -> List[CInst]:
    out = []
    for no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        m = _ASM_LINE.match(body)
        mnemonic = m.group(1).upper()
        try:
            kind = CInstKind(mnemonic)
        except ValueError:
            raise ParseError(f"unknown mnemonic {mnemonic!r}", no)
        ops = [t for t in m.group(2).split(",") if t.strip()] if m.group(2) else []
        if len(ops) > 3:
            raise ParseError(f"{mnemonic} takes at most 3 operands", no)
        vals = [_operand(t, no) for t in ops] + [0] * (3 - len(ops))
        try:
            out.append(CInst(kind, *vals))
        except DomainError as e:
            raise ParseError(str(e), no)
    return out


def disassemble(stream: Iterable[CInst]) -> str:
    return "".join(f"{inst}\n" for inst in stream)


# ---------------------------------------------------------------------------
# Micro-instruction word
# ---------------------------------------------------------------------------

class CemFunc(IntEnum):
    AND = 0
    OR = 1
    XOR = 2
    NOT = 3
    ADD = 4
    READ = 5
    WRITE = 6
    NOP = 7


class ShiftFunc(IntEnum):
    NOP = 0
    SHL1 = 1
    SHL4 = 2
    SHL8 = 3
    SHL16 = 4
    SHR1 = 5
    SHR4 = 6
    SHR8 = 7
    SHR16 = 8
    SIGN_EXTEND = 9     # per 32-bit lane: all ones when the lane MSB is set
    MSB_EXTRACT = 10    # per lane: the MSB as 0/1
    LSB_EXTRACT = 11    # 128-bit: keep bit 0 only
    LSB_MASK = 12       # 128-bit: all ones when bit 0 is set
    SHIFT_ROWS = 13     # AES byte permutation
    BYTE_ROTL = 14
    BYTE_ROTR = 15
    GF_DOUBLE = 16      # multiply by x in GF(2^128)
    CARRY_IN = 17       # ADD in this cycle gets carry-in 1; R unchanged
    TILE_ROT = 18       # R[t] <- R[t-1]
    BCAST0 = 19         # R[t] <- R[s] for every tile t
    BCAST1 = 20
    BCAST2 = 21
    BCAST3 = 22


class LutMode(IntEnum):
    LOOKUP = 0   # every byte of R through table element 0
    SUB_MIX = 1  # SubBytes then MixColumns from elements 0 (S), 1 (2S), 2 (3S)


ADDR_BITS = 13
PORT = (1 << ADDR_BITS) - 1  # the tile's datapath register R
CEM_UNITS = 4
CEM_FIELD_BITS = 30
LUT_BITS = 2
SHIFTER_BITS = 6
WORD_BITS = LUT_BITS + SHIFTER_BITS + CEM_UNITS * CEM_FIELD_BITS
assert WORD_BITS == 128


def cem_base(i: int) -> int:
    """Bit position of CEM[i]'s enable bit."""
    return 119 - CEM_FIELD_BITS * i


@dataclass(frozen=True)
class CemField:
    enable: bool = False
    func: CemFunc = CemFunc.AND
    addr_a: int = 0
    addr_b: int = 0

    def __post_init__(self):
        if not isinstance(self.func, CemFunc):
            object.__setattr__(self, "func", CemFunc(self.func))
        for a in (self.addr_a, self.addr_b):
            if not 0 <= a <= PORT:
                raise DomainError(f"CEM address {a:#x} exceeds {ADDR_BITS} bits")
        if not self.enable and (self.func != 0 or self.addr_a or self.addr_b):
            raise DomainError("disabled CEM field must be all zero")


DISABLED = CemField()


@dataclass(frozen=True)
class MicroInstruction:
    lut_enable: bool = False
    lut_mode: LutMode = LutMode.LOOKUP
    shifter_enable: bool = False
    shifter_func: ShiftFunc = ShiftFunc.NOP
    cem: Tuple[CemField, ...] = field(default=(DISABLED,) * CEM_UNITS)

    def __post_init__(self):
        if len(self.cem) != CEM_UNITS:
            raise DomainError(f"micro-instruction needs {CEM_UNITS} CEM fields")
        if not isinstance(self.shifter_func, ShiftFunc):
            object.__setattr__(self, "shifter_func", ShiftFunc(self.shifter_func))
        if not isinstance(self.lut_mode, LutMode):
            object.__setattr__(self, "lut_mode", LutMode(self.lut_mode))
        if not self.shifter_enable and self.shifter_func != ShiftFunc.NOP:
            raise DomainError("disabled shifter must carry function 0")
        if not self.lut_enable and self.lut_mode != LutMode.LOOKUP:
            raise DomainError("disabled LUT must carry mode 0")

    @property
    def is_nop(self) -> bool:
        return encode_micro(self) == 0

    def units(self) -> List[str]:
        names = []
        if self.lut_enable:
            names.append("lut")
        if self.shifter_enable:
            names.append("shifter")
        names.extend(f"cem{i}" for i, c in enumerate(self.cem) if c.enable)
        return names


NOP = MicroInstruction()


def encode_micro(mi: MicroInstruction) -> int:
    word = (int(mi.lut_enable) << 127) | (int(mi.lut_mode) << 126)
    word |= (int(mi.shifter_enable) << 125) | (int(mi.shifter_func) << 120)
    for i, c in enumerate(mi.cem):
        base = cem_base(i)
        word |= int(c.enable) << base
        word |= int(c.func) << (base - 3)
        word |= c.addr_a << (base - 16)
        word |= c.addr_b << (base - 29)
    return word


def decode_micro(word: int) -> MicroInstruction:
    if not 0 <= word < (1 << WORD_BITS):
        raise DecodeError("micro-instruction must be a 128-bit value")
    try:
        cems = []
        for i in range(CEM_UNITS):
            base = cem_base(i)
            cems.append(CemField(
                enable=bool((word >> base) & 1),
                func=CemFunc((word >> (base - 3)) & 0b111),
                addr_a=(word >> (base - 16)) & PORT,
                addr_b=(word >> (base - 29)) & PORT,
            ))
        return MicroInstruction(
            lut_enable=bool((word >> 127) & 1),
            lut_mode=LutMode((word >> 126) & 1),
            shifter_enable=bool((word >> 125) & 1),
            shifter_func=ShiftFunc((word >> 120) & 0x1F),
            cem=tuple(cems),
        )
    except ValueError as e:  # undefined codes and non-canonical disabled fields
        raise DecodeError(f"invalid micro-instruction {word:#034x}: {e}")


# ---------------------------------------------------------------------------
# Binary micro-program container: magic, version, count, then 16-byte LE words
# ---------------------------------------------------------------------------

_PROGRAM_HEADER = struct.Struct("<4sHHI")
PROGRAM_MAGIC = b"PUIM"


def pack_program(words: Sequence[MicroInstruction], base: int = 0) -> bytes:
    out = bytearray(_PROGRAM_HEADER.pack(PROGRAM_MAGIC, 1, base, len(words)))
    for mi in words:
        out += encode_micro(mi).to_bytes(16, "little")
    return bytes(out)


def unpack_program(data: bytes) -> Tuple[int, List[MicroInstruction]]:
    if len(data) < _PROGRAM_HEADER.size:
        raise DecodeError("micro-program container too short")
    magic, version, base, count = _PROGRAM_HEADER.unpack_from(data)
    if magic != PROGRAM_MAGIC or version != 1:
        raise DecodeError("not a micro-program container")
    body = data[_PROGRAM_HEADER.size:]
    if len(body) != 16 * count:
        raise DecodeError(f"expected {count} words, found {len(body) / 16:g}")
    return base, [decode_micro(int.from_bytes(body[i:i + 16], "little")) for i in range(0, len(body), 16)]
