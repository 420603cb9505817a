"""
Micro-programs for every function C-Inst.

A program is made of routines. Each routine is stored once in the μIM; the
controller's sequencer walks (routine word, frame base) pairs, binding the
frame-relative addresses (0x1D00 + offset) of the word to the frame of the
current call. The LUT multiply recursion therefore keeps one stored copy per
Karatsuba level while its cycle count is the length of the unrolled sequence.

HE layout: coefficient j of a polynomial lives on core j; limb l sits in
tile l // 4, lane l % 4 of the same row. Every HE routine issues the same
CEM operation in all four tiles. GC layout: labels are replicated in all
four tiles, so FREEXOR and the four parallel hashes of HALFGATE need no data
movement between tiles.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .aes import FIXED_KEY, SBOX, SBOX_MUL2, SBOX_MUL3, expand_key, gf_double
from .arith import DEFAULT_LUT, Modulus, ModulusKind
from .config import ArchProfile
from .errors import CapacityError, DomainError
from .imc import LANE_MASK, LANES, TILES, WINDOW_FRAME, WINDOW_RD, WINDOW_RS1, WINDOW_RS2, CoreArray
from .isa import (DISABLED, NOP, PORT, CemField, CemFunc, CInst, CInstKind, LutMode, MicroInstruction,
                  ShiftFunc, pack_program)

logger = logging.getLogger(__name__)

RD, RS1, RS2 = WINDOW_RD, WINDOW_RS1, WINDOW_RS2

MUL4_TABLE = tuple(int(v) for v in DEFAULT_LUT.table)
AES_LUT = {0: SBOX, 1: SBOX_MUL2, 2: SBOX_MUL3}
LUT_WRITE_WORDS = 16  # 256 table bytes broadcast as 128-bit words

# HE constants (word addresses, one row each); frames start right after them
HE_ZERO, HE_Q, HE_NQ, HE_MU, HE_KMASK = 0, 4, 8, 12, 16
HE_FRAME_BASE = 20
MAX_LIMBS = TILES * LANES

# GC constants and scratch rows
GC_DELTA, GC_SDELTA, GC_K0 = 0, 4, 8
GC_SX, GC_H, GC_T, GC_M, GC_N = 52, 56, 60, 64, 68
GC_RESERVED = 72
FREEXOR_CYCLES = 3
HALFGATE_CYCLES = 45


def gc_round_key_row(r: int) -> int:
    """Row holding AES round key r (1..10); round key 0 sits in K0."""
    return GC_K0 + 4 * r


def F(offset: int) -> int:
    """Frame-relative address."""
    return WINDOW_FRAME + offset


# ---------------------------------------------------------------------------
# Routines and programs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Call:
    routine: "Routine"
    offset: int  # words, relative to the caller's frame


@dataclass(frozen=True)
class Routine:
    name: str
    body: Tuple[Union[MicroInstruction, Call], ...]
    frame_words: int = 0

    @property
    def words(self) -> Tuple[MicroInstruction, ...]:
        return tuple(item for item in self.body if isinstance(item, MicroInstruction))

    def all_routines(self) -> Dict[str, Tuple[MicroInstruction, ...]]:
        found = {self.name: self.words}
        for item in self.body:
            if isinstance(item, Call):
                found.update(item.routine.all_routines())
        return found

    def flatten(self, frame: int) -> Iterator[Tuple[str, int, int]]:
        index = 0
        for item in self.body:
            if isinstance(item, Call):
                yield from item.routine.flatten(frame + item.offset)
            else:
                yield self.name, index, frame
                index += 1


@dataclass
class MicroProgram:
    """Stored routines plus the sequencer walk the controller performs for one C-Inst."""
    kind: CInstKind
    entry: Routine
    frame_base: int
    reserved_words: int
    rd_rows: int = 1
    routines: Dict[str, Tuple[MicroInstruction, ...]] = field(init=False, repr=False)
    sequence: Tuple[Tuple[str, int, int], ...] = field(init=False, repr=False)

    def __post_init__(self):
        self.routines = self.entry.all_routines()
        self.sequence = tuple(self.entry.flatten(self.frame_base))
        self._steps = tuple((self.routines[name][i], frame) for name, i, frame in self.sequence)

    @property
    def length(self) -> int:
        return len(self.sequence)

    def __len__(self) -> int:
        return self.length

    @property
    def stored_words(self) -> int:
        return sum(len(w) for w in self.routines.values())

    @property
    def words(self) -> List[MicroInstruction]:
        """Micro-instructions in execution order."""
        return [mi for mi, _ in self._steps]

    def steps(self) -> Tuple[Tuple[MicroInstruction, int], ...]:
        return self._steps

    def check_operands(self, inst: CInst, words_per_tile: int) -> None:
        if self.reserved_words > words_per_tile:
            raise CapacityError(f"{self.kind.value} needs {self.reserved_words} reserved words per tile; "
                                f"the profile has {words_per_tile}")
        spans = {"rd": self.rd_rows, "rs1": 1, "rs2": 1}
        for name, rows in spans.items():
            addr = getattr(inst, name)
            if addr % LANES:
                raise DomainError(f"{name}={addr:#x} is not row aligned")
            if addr < self.reserved_words:
                raise DomainError(f"{name}={addr:#x} overlaps the reserved region below {self.reserved_words:#x}")
            if addr + LANES * rows > words_per_tile:
                raise CapacityError(f"{name}={addr:#x} beyond {words_per_tile} words per tile")

    def to_bytes(self) -> bytes:
        stored = [mi for words in self.routines.values() for mi in words]
        return pack_program(stored)


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

_PHASE = {CemFunc.WRITE: 0, CemFunc.READ: 1}


def _phases(mi: MicroInstruction) -> Tuple[set, List[int]]:
    units, phases = set(), []
    for c in mi.cem:
        if c.enable:
            units.add("cem")
            phases.append(_PHASE.get(c.func, 4))
    if mi.shifter_enable:
        units.add("shifter")
        phases.append(2)
    if mi.lut_enable:
        units.add("lut")
        phases.append(3)
    return units, phases


def merge(prev: MicroInstruction, new: MicroInstruction) -> Optional[MicroInstruction]:
    """Fold ``new`` into ``prev`` when the two use disjoint units and every phase of
    ``new`` comes after every phase of ``prev`` within a cycle."""
    pu, pp = _phases(prev)
    nu, np_ = _phases(new)
    if not pu or not nu or pu & nu or max(pp) >= min(np_):
        return None
    return MicroInstruction(
        lut_enable=prev.lut_enable or new.lut_enable,
        lut_mode=new.lut_mode if new.lut_enable else prev.lut_mode,
        shifter_enable=prev.shifter_enable or new.shifter_enable,
        shifter_func=new.shifter_func if new.shifter_enable else prev.shifter_func,
        cem=new.cem if "cem" in nu else prev.cem,
    )


def _shift_steps(k: int, left: bool) -> List[ShiftFunc]:
    table = ((16, ShiftFunc.SHL16, ShiftFunc.SHR16), (8, ShiftFunc.SHL8, ShiftFunc.SHR8),
             (4, ShiftFunc.SHL4, ShiftFunc.SHR4), (1, ShiftFunc.SHL1, ShiftFunc.SHR1))
    if not 0 <= k < 32:
        raise DomainError(f"lane shift {k} outside 0..31")
    steps = []
    for amount, shl, shr in table:
        while k >= amount:
            steps.append(shl if left else shr)
            k -= amount
    return steps


class KernelBuilder:
    """Emits tile-uniform micro-instructions, folding adjacent words that fit one cycle."""

    def __init__(self, name: str):
        self.name = name
        self.body: List[Union[MicroInstruction, Call]] = []

    def emit(self, mi: MicroInstruction) -> "KernelBuilder":
        if self.body and isinstance(self.body[-1], MicroInstruction):
            merged = merge(self.body[-1], mi)
            if merged is not None:
                self.body[-1] = merged
                return self
        self.body.append(mi)
        return self

    def cem(self, func: CemFunc, a: int = 0, b: int = 0, carry: bool = False) -> "KernelBuilder":
        fields = (CemField(True, func, a, b),) * TILES
        return self.emit(MicroInstruction(shifter_enable=carry,
                                          shifter_func=ShiftFunc.CARRY_IN if carry else ShiftFunc.NOP,
                                          cem=fields))

    def read(self, a: int) -> "KernelBuilder":
        return self.cem(CemFunc.READ, a, 0)

    def write(self, b: int) -> "KernelBuilder":
        return self.cem(CemFunc.WRITE, 0, b)

    def op(self, func: CemFunc, a: int, b: int = PORT, carry: bool = False) -> "KernelBuilder":
        return self.cem(func, a, b, carry)

    def not_(self, a: int = PORT) -> "KernelBuilder":
        return self.cem(CemFunc.NOT, a, PORT)

    def mov(self, src: int, dst: int) -> "KernelBuilder":
        return self.read(src).write(dst)

    def shift(self, func: ShiftFunc) -> "KernelBuilder":
        return self.emit(MicroInstruction(shifter_enable=True, shifter_func=func))

    def shift_by(self, k: int, left: bool) -> "KernelBuilder":
        for f in _shift_steps(k, left):
            self.shift(f)
        return self

    def lut(self, mode: LutMode = LutMode.LOOKUP) -> "KernelBuilder":
        return self.emit(MicroInstruction(lut_enable=True, lut_mode=mode))

    def csub(self, tmp: int) -> "KernelBuilder":
        """R <- R - q when R >= q (R < 2q)."""
        return (self.op(CemFunc.ADD, HE_NQ).write(tmp).shift(ShiftFunc.SIGN_EXTEND)
                .op(CemFunc.AND, HE_Q).op(CemFunc.ADD, tmp))

    def call(self, routine: Routine, offset: int) -> "KernelBuilder":
        self.body.append(Call(routine, offset))
        return self

    def build(self, frame_words: int) -> Routine:
        return Routine(self.name, tuple(self.body), frame_words)


# ---------------------------------------------------------------------------
# LUT multiply: Karatsuba 32 -> 16 -> 8 -> 4 with 4-bit table products
# ---------------------------------------------------------------------------

def _mul4_routine() -> Routine:
    k = KernelBuilder("mul4")
    k.read(F(0)).shift(ShiftFunc.SHL4).op(CemFunc.OR, F(4)).lut().write(F(8))
    return k.build(12)


def _mul_routine(n: int, child: Routine) -> Routine:
    """A * B for n-bit lanes. Below 32 bits the product lands in OUT; at 32 bits
    (operands < 2^31) the 64-bit product lands in OUT (low word) and HI."""
    h = n // 2
    top = n == 32
    names = ["A", "B", "OUT"] + (["HI"] if top else []) + \
            ["A0", "B0", "SA", "SB", "CA", "CB", "Z2", "Z0", "T", "U"] + (["Z1"] if top else [])
    s = {name: F(4 * i) for i, name in enumerate(names)}
    c = 4 * len(names)
    cA, cB, cOUT = F(c), F(c + 4), F(c + 8)
    XOR, ADD, AND, OR = CemFunc.XOR, CemFunc.ADD, CemFunc.AND, CemFunc.OR

    k = KernelBuilder(f"mul{n}")
    # high halves go straight to the child's inputs
    for x, hi, lo in (("A", cA, s["A0"]), ("B", cB, s["B0"])):
        k.read(s[x]).shift_by(h, False).write(hi).shift_by(h, True).op(XOR, s[x]).write(lo)
    k.call(child, c).mov(cOUT, s["Z2"])
    for hi, lo, sx, cx in ((cA, s["A0"], s["SA"], s["CA"]), (cB, s["B0"], s["SB"], s["CB"])):
        k.read(hi).op(ADD, lo).write(s["T"]).shift_by(h, False).write(cx)
        k.shift_by(h, True).op(XOR, s["T"]).write(sx)
    k.mov(s["A0"], cA).mov(s["B0"], cB).call(child, c).mov(cOUT, s["Z0"])
    k.mov(s["SA"], cA).mov(s["SB"], cB).call(child, c)
    # (ca*2^h + sa)(cb*2^h + sb): select terms use sb & -ca
    k.not_(s["CA"]).op(ADD, HE_ZERO, carry=True).op(AND, s["SB"]).write(s["T"])
    k.not_(s["CB"]).op(ADD, HE_ZERO, carry=True).op(AND, s["SA"]).op(ADD, s["T"])
    k.shift_by(h, True).op(ADD, cOUT).write(s["U"])
    if not top:
        k.read(s["CA"]).op(AND, s["CB"]).shift_by(n, True).op(ADD, s["U"]).write(s["U"])
    # z1 = mid - z2 - z0
    k.read(s["Z2"]).op(ADD, s["Z0"]).not_().op(ADD, s["U"], carry=True)
    if not top:
        k.shift_by(h, True).op(ADD, s["Z0"]).write(s["T"])
        k.read(s["Z2"]).shift_by(n, True).op(ADD, s["T"]).write(s["OUT"])
    else:
        k.write(s["Z1"]).shift_by(16, True).write(s["T"]).op(ADD, s["Z0"]).write(s["OUT"])
        # carry out of z0 + (z1 << 16): msb((x & y) | ((x | y) & ~s))
        k.not_().write(s["U"])
        k.read(s["T"]).op(OR, s["Z0"]).op(AND, s["U"]).write(s["U"])
        k.read(s["T"]).op(AND, s["Z0"]).op(OR, s["U"]).shift(ShiftFunc.MSB_EXTRACT).op(ADD, s["Z2"])
        k.write(s["U"])
        k.read(s["Z1"]).shift_by(16, False).op(ADD, s["U"]).write(s["HI"])
    return k.build(c + child.frame_words)


@lru_cache(maxsize=1)
def mul32_routine() -> Routine:
    return _mul_routine(32, _mul_routine(16, _mul_routine(8, _mul4_routine())))


# ---------------------------------------------------------------------------
# Modular multiply
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModulusShape:
    """What the reduction micro-code depends on: the modulus kind and its width or k."""
    kind: ModulusKind
    bits: int

    def __post_init__(self):
        lo, hi = {ModulusKind.GENERAL: (2, 30), ModulusKind.POW2: (1, 30),
                  ModulusKind.POW2_MINUS_ONE: (2, 30), ModulusKind.POW2_PLUS_ONE: (2, 29)}[self.kind]
        if not lo <= self.bits <= hi:
            raise DomainError(f"{self.kind.value} moduli need {lo} <= bits <= {hi} for 32-bit lanes, got {self.bits}")

    @classmethod
    def of(cls, moduli: Sequence[Union[int, Modulus]]) -> "ModulusShape":
        ms = [m if isinstance(m, Modulus) else Modulus.special(int(m)) for m in moduli]
        if not ms:
            raise DomainError("at least one modulus is required")
        shapes = {(m.kind, m.k if m.is_special else m.width) for m in ms}
        if len(shapes) != 1:
            raise DomainError(f"limbs sharing a micro-program must share kind and width, got {sorted(shapes, key=str)}")
        kind, bits = shapes.pop()
        if kind is ModulusKind.GENERAL:
            for m in ms:
                if m.value.bit_length() != bits or m.barrett_mu >= 1 << 31:
                    raise DomainError(f"modulus {m.value} needs bit length {bits} and a 31-bit Barrett constant")
        return cls(kind, bits)

    @property
    def tag(self) -> str:
        return f"{self.kind.value}-{self.bits}"


def _modmul_routine(shape: ModulusShape) -> Routine:
    """R = X * Y mod q. Frame: X, Y, R, XL, XH, T, then the 32-bit multiplier."""
    X, Y, R, XL, XH, T = (F(4 * i) for i in range(6))
    M = 24
    MA, MB, MLO, MHI = F(M), F(M + 4), F(M + 8), F(M + 12)
    mul = mul32_routine()
    AND, OR, ADD = CemFunc.AND, CemFunc.OR, CemFunc.ADD
    k = KernelBuilder(f"modmul-{shape.tag}")
    k.mov(X, MA).mov(Y, MB).call(mul, M)
    b = shape.bits
    if shape.kind is ModulusKind.GENERAL:
        # q1 = x >> (w-1); q3 = (q1 * mu) >> (w+1); r = x - q3*q, then two conditional subtracts
        k.mov(MLO, XL)
        k.read(MHI).shift_by(33 - b, True).write(T).read(MLO).shift_by(b - 1, False).op(OR, T).write(MA)
        k.mov(HE_MU, MB).call(mul, M)
        k.read(MHI).shift_by(31 - b, True).write(T).read(MLO).shift_by(b + 1, False).op(OR, T).write(MA)
        k.mov(HE_Q, MB).call(mul, M)
        k.not_(MLO).op(ADD, XL, carry=True).csub(T).csub(T).write(R)
    elif shape.kind is ModulusKind.POW2:
        k.read(MLO).op(AND, HE_KMASK).write(R)
    else:
        # low = x & (2^k - 1), high = x >> k
        k.read(MLO).op(AND, HE_KMASK).write(T)
        k.read(MHI).shift_by(32 - b, True).write(XH).read(MLO).shift_by(b, False).op(OR, XH)
        if shape.kind is ModulusKind.POW2_MINUS_ONE:
            k.op(ADD, T).csub(XL).write(R)
        else:
            # 2^k == -1: low - high, then add q back on a negative sign, twice
            k.not_().op(ADD, T, carry=True)
            for _ in range(2):
                k.write(XL).shift(ShiftFunc.SIGN_EXTEND).op(AND, HE_Q).op(ADD, XL)
            k.write(R)
    return k.build(M + mul.frame_words)


# ---------------------------------------------------------------------------
# HE programs
# ---------------------------------------------------------------------------

def _he_entry(kind: CInstKind, shape: ModulusShape) -> Routine:
    XOR, ADD, AND = CemFunc.XOR, CemFunc.ADD, CemFunc.AND
    k = KernelBuilder(f"{kind.value.lower()}-{shape.tag}")
    if kind is CInstKind.POLYADD:
        k.read(RS1).op(ADD, RS2).csub(F(0)).write(RD)
        return k.build(4)
    if kind is CInstKind.POLYSUB:
        k.not_(RS2).op(ADD, RS1, carry=True).write(F(0)).shift(ShiftFunc.SIGN_EXTEND)
        k.op(AND, HE_Q).op(ADD, F(0)).write(RD)
        return k.build(4)
    if kind is CInstKind.POLYPERM:
        # rd = rs1, negated mod q where the rs2 mask row is all ones
        k.not_(RS1).op(ADD, HE_Q, carry=True).csub(F(0))
        k.op(XOR, RS1).op(AND, RS2).op(XOR, RS1).write(RD)
        return k.build(4)
    modmul = _modmul_routine(shape)
    S = F(modmul.frame_words)
    if kind is CInstKind.POLYMUL:
        k.mov(RS1, F(0)).mov(RS2, F(4)).call(modmul, 0).mov(F(8), RD)
        return k.build(modmul.frame_words)
    if kind is CInstKind.NTT:
        # x at rd, y at rs1, twiddle at rs2: (x + wy, x - wy)
        k.mov(RS1, F(0)).mov(RS2, F(4)).call(modmul, 0)
        k.not_(F(8)).op(ADD, RD, carry=True).write(S).shift(ShiftFunc.SIGN_EXTEND)
        k.op(AND, HE_Q).op(ADD, S).write(RS1)
        k.read(RD).op(ADD, F(8)).csub(S).write(RD)
        return k.build(modmul.frame_words + 4)
    if kind is CInstKind.INTT:
        # (x + y, (x - y) w)
        k.not_(RS1).op(ADD, RD, carry=True).write(S).shift(ShiftFunc.SIGN_EXTEND)
        k.op(AND, HE_Q).op(ADD, S).write(F(0))
        k.read(RD).op(ADD, RS1).csub(S).write(RD)
        k.mov(RS2, F(4)).call(modmul, 0).mov(F(8), RS1)
        return k.build(modmul.frame_words + 4)
    raise DomainError(f"{kind.value} is not an HE function instruction")


@lru_cache(maxsize=32)
def he_program(kind: CInstKind, shape: ModulusShape) -> MicroProgram:
    entry = _he_entry(kind, shape)
    return MicroProgram(kind, entry, HE_FRAME_BASE, HE_FRAME_BASE + entry.frame_words)


# ---------------------------------------------------------------------------
# GC programs
# ---------------------------------------------------------------------------

def _word(cem: Dict[int, Tuple[CemFunc, int, int]] = None, shift: Optional[ShiftFunc] = None,
          lut: Optional[LutMode] = None) -> MicroInstruction:
    fields = [DISABLED] * TILES
    for t, (func, a, b) in (cem or {}).items():
        fields[t] = CemField(True, func, a, b)
    return MicroInstruction(lut_enable=lut is not None, lut_mode=lut if lut is not None else LutMode.LOOKUP,
                            shifter_enable=shift is not None,
                            shifter_func=shift if shift is not None else ShiftFunc.NOP,
                            cem=tuple(fields))


def _all(func: CemFunc, a: int, b: int, tiles=range(TILES)) -> Dict[int, Tuple[CemFunc, int, int]]:
    return {t: (func, a, b) for t in tiles}


def _freexor_words() -> List[MicroInstruction]:
    return [_word(_all(CemFunc.READ, RS1, 0)),
            _word(_all(CemFunc.XOR, RS2, PORT)),
            _word(_all(CemFunc.WRITE, 0, RD))]


def _halfgate_words() -> List[MicroInstruction]:
    """Garble one AND gate.

    Entry: rs1 and rs2 hold the zero labels of the inputs, rd holds the tweak
    2*gid. Exit: rd holds the output zero label in every tile, rd+4 and rd+8
    hold the two table rows in tile 0. Tiles 0..3 hash A0, A1, B0, B1 in
    parallel; K0 carries the tweak increment for the B hashes.
    """
    A, B, D = RS1, RS2, RD
    R, W, X, AN = CemFunc.READ, CemFunc.WRITE, CemFunc.XOR, CemFunc.AND
    words = [
        _word({0: (R, A, 0), 1: (R, A, 0), 2: (R, B, 0), 3: (R, B, 0)}, shift=ShiftFunc.GF_DOUBLE),
        _word({1: (X, GC_SDELTA, PORT), 3: (X, GC_SDELTA, PORT)}),
        _word(_all(W, 0, GC_SX)),
        _word(_all(X, D, PORT)),
        _word(_all(X, GC_K0, PORT)),
    ]
    for r in range(1, 10):
        words.append(_word(_all(X, gc_round_key_row(r), PORT), shift=ShiftFunc.SHIFT_ROWS, lut=LutMode.SUB_MIX))
    words += [
        _word(_all(X, gc_round_key_row(10), PORT), shift=ShiftFunc.SHIFT_ROWS, lut=LutMode.LOOKUP),
        _word(_all(X, GC_SX, PORT)),                                    # R = (ha0, ha1, hb0, hb1)
        _word(_all(W, 0, GC_H), shift=ShiftFunc.TILE_ROT),
        _word({1: (X, GC_H, PORT), 3: (X, GC_H, PORT)}),                # ha0^ha1, hb0^hb1
        _word({1: (W, 0, GC_T), 3: (W, 0, GC_T)}),
        _word({0: (R, A, 0), 1: (R, B, 0), 3: (R, B, 0)}, shift=ShiftFunc.LSB_MASK),
        _word({0: (W, 0, GC_M), 1: (W, 0, GC_M), 3: (W, 0, GC_M)}, shift=ShiftFunc.TILE_ROT),
        _word({1: (W, 0, GC_N), 3: (AN, GC_T, GC_M)}),
        _word({1: (AN, GC_DELTA, GC_M), 3: (X, GC_H, GC_M)}),
        _word({1: (X, GC_T, GC_M), 3: (X, GC_T, GC_M)}),                # tg ; we0
        _word({1: (AN, GC_M, GC_N), 3: (X, A, GC_T)}),                  # tg & pa ; te
        _word({1: (X, GC_H, GC_N)}),
        _word({1: (X, GC_T, GC_N)}),                                    # wg0
        _word({3: (R, GC_M, 0)}, shift=ShiftFunc.TILE_ROT),
        _word(shift=ShiftFunc.TILE_ROT),
        _word({1: (X, GC_N, PORT)}),                                    # wg0 ^ we0
        _word(shift=ShiftFunc.BCAST1),
        _word(_all(W, 0, D)),
        _word({1: (R, GC_M, 0)}, shift=ShiftFunc.BCAST1),
        _word({0: (W, 0, D + 4), 3: (R, GC_T, 0)}, shift=ShiftFunc.BCAST3),
        _word({0: (W, 0, D + 8)}),
    ]
    return words + [NOP] * (HALFGATE_CYCLES - len(words))


@lru_cache(maxsize=None)
def gc_program(kind: CInstKind) -> MicroProgram:
    if kind is CInstKind.FREEXOR:
        return MicroProgram(kind, Routine("freexor", tuple(_freexor_words())), 0, GC_RESERVED)
    if kind is CInstKind.HALFGATE:
        return MicroProgram(kind, Routine("halfgate", tuple(_halfgate_words())), 0, GC_RESERVED, rd_rows=3)
    raise DomainError(f"{kind.value} is not a GC function instruction")


def microprogram_for(kind: CInstKind, params=None) -> MicroProgram:
    """Micro-program of a function C-Inst.

    HE kinds take the limb moduli (or a ModulusShape) the program reduces by.
    """
    if kind.is_update:
        raise DomainError(f"{kind.value} is an update instruction and has no micro-program")
    if kind.is_gc:
        return gc_program(kind)
    if params is None:
        raise DomainError(f"{kind.value} needs the limb moduli")
    shape = params if isinstance(params, ModulusShape) else ModulusShape.of(
        [params] if isinstance(params, (int, Modulus)) else params)
    return he_program(kind, shape)


def cost_table(shape: Optional[ModulusShape] = None) -> Dict[str, int]:
    """Cycles per C-Inst under the one-word-per-cycle contract."""
    shape = shape or ModulusShape(ModulusKind.GENERAL, 30)
    table = {k.value: gc_program(k).length for k in (CInstKind.FREEXOR, CInstKind.HALFGATE)}
    for kind in (CInstKind.POLYADD, CInstKind.POLYSUB, CInstKind.POLYPERM, CInstKind.POLYMUL,
                 CInstKind.NTT, CInstKind.INTT):
        table[kind.value] = he_program(kind, shape).length
    table[CInstKind.LUT_WRITE.value] = LUT_WRITE_WORDS
    return table


# ---------------------------------------------------------------------------
# Broadcast updates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UpdateDescriptor:
    """A UIM_WRITE or LUT_WRITE broadcast, applied to every core at a barrier."""
    kind: CInstKind
    target: Union[CInstKind, int]
    payload: Union[MicroProgram, Tuple[int, ...]]
    words: int

    def apply(self, core: CoreArray, evict: bool = False) -> int:
        if self.kind is CInstKind.UIM_WRITE:
            core.uim_write(self.target, self.payload, evict=evict)
        else:
            core.lut_write(self.target, self.payload)
        return self.words


def uim_write(program: MicroProgram, profile: Optional[ArchProfile] = None) -> UpdateDescriptor:
    profile = profile or ArchProfile()
    if program.stored_words > profile.uim_words:
        raise CapacityError(f"{program.kind.value} program needs {program.stored_words} words; "
                            f"the micro-instruction memory holds {profile.uim_words}")
    return UpdateDescriptor(CInstKind.UIM_WRITE, program.kind, program, program.stored_words)


def lut_write(element: int, table: Sequence[int], profile: Optional[ArchProfile] = None) -> UpdateDescriptor:
    profile = profile or ArchProfile()
    elements = profile.lut_cam_elements + profile.lut_sram_elements
    if not 0 <= element < elements:
        raise CapacityError(f"LUT element {element} does not exist ({elements} elements)")
    data = tuple(int(v) for v in table)
    if len(data) != profile.lut_entries or any(not 0 <= v <= 255 for v in data):
        raise CapacityError(f"LUT table must hold {profile.lut_entries} byte entries")
    return UpdateDescriptor(CInstKind.LUT_WRITE, element, data, LUT_WRITE_WORDS)


# ---------------------------------------------------------------------------
# Loading constants and operands
# ---------------------------------------------------------------------------

def limb_position(limb: int) -> Tuple[int, int]:
    if not 0 <= limb < MAX_LIMBS:
        raise CapacityError(f"a core row holds {MAX_LIMBS} limbs; limb {limb} does not fit")
    return limb // LANES, limb % LANES


def _limb_row(values: Sequence[int], cores: int) -> np.ndarray:
    """(cores, tiles, lanes) row with limb constants; unused lanes repeat the last limb."""
    row = np.zeros((TILES, LANES), dtype=np.uint64)
    for slot in range(MAX_LIMBS):
        t, lane = limb_position(slot)
        row[t, lane] = values[min(slot, len(values) - 1)] & LANE_MASK
    return np.broadcast_to(row, (cores, TILES, LANES))


def install_he(core: CoreArray, moduli: Sequence[Union[int, Modulus]],
               kinds: Sequence[CInstKind] = None, evict: bool = False) -> ModulusShape:
    """Load the HE constants, the 4-bit product table and the HE micro-programs."""
    ms = [m if isinstance(m, Modulus) else Modulus.special(int(m)) for m in moduli]
    if len(ms) > MAX_LIMBS:
        raise CapacityError(f"{len(ms)} limbs exceed the {MAX_LIMBS} lanes of a core row")
    shape = ModulusShape.of(ms)
    qs = [m.value for m in ms]
    core.store_lane_values(HE_ZERO, np.zeros((core.cores, TILES, LANES), dtype=np.uint64))
    core.store_lane_values(HE_Q, _limb_row(qs, core.cores))
    core.store_lane_values(HE_NQ, _limb_row([(1 << 32) - q for q in qs], core.cores))
    core.store_lane_values(HE_MU, _limb_row([m.barrett_mu for m in ms], core.cores))
    core.store_lane_values(HE_KMASK, _limb_row([(1 << m.k) - 1 if m.is_special else 0 for m in ms], core.cores))
    lut_write(0, MUL4_TABLE, core.profile).apply(core)
    for kind in kinds or (CInstKind.POLYADD, CInstKind.POLYSUB, CInstKind.POLYPERM, CInstKind.POLYMUL,
                          CInstKind.NTT, CInstKind.INTT):
        uim_write(he_program(kind, shape), core.profile).apply(core, evict=evict)
    return shape


def store_residues(core: CoreArray, addr: int, residues: np.ndarray) -> None:
    """residues[limb, core] -> one row per core."""
    residues = np.asarray(residues, dtype=np.uint64)
    if residues.ndim == 1:
        residues = residues[None, :]
    limbs, n = residues.shape
    if n != core.cores:
        raise DomainError(f"{n} coefficients for {core.cores} cores")
    row = np.zeros((core.cores, TILES, LANES), dtype=np.uint64)
    for limb in range(limbs):
        t, lane = limb_position(limb)
        row[:, t, lane] = residues[limb]
    core.store_lane_values(addr, row)


def load_residues(core: CoreArray, addr: int, limbs: int) -> np.ndarray:
    row = core.load_lane_values(addr)
    out = np.empty((limbs, core.cores), dtype=np.uint64)
    for limb in range(limbs):
        t, lane = limb_position(limb)
        out[limb] = row[:, t, lane]
    return out


def install_gc(core: CoreArray, delta: int, key: bytes = FIXED_KEY, evict: bool = False) -> None:
    """Load delta, sigma(delta), the round keys and the AES tables, then the GC programs."""
    if not delta & 1:
        raise DomainError("global delta must have its least significant bit set")
    rks = [int.from_bytes(rk, "little") for rk in expand_key(key)]
    core.store(GC_DELTA, delta)
    core.store(GC_SDELTA, gf_double(delta))
    core.store(GC_K0, rks[0], tiles=(0, 1))
    core.store(GC_K0, rks[0] ^ 1, tiles=(2, 3))
    for r in range(1, 11):
        core.store(gc_round_key_row(r), rks[r])
    for element, table in AES_LUT.items():
        lut_write(element, table, core.profile).apply(core)
    for kind in (CInstKind.FREEXOR, CInstKind.HALFGATE):
        uim_write(gc_program(kind), core.profile).apply(core, evict=evict)
