"""
Cycle-accurate model of the IMC core.

A core has four CEM tiles. Each tile row is 128 bits (four 32-bit words) and
every tile owns a 128-bit datapath register R. The shifter and the LUT fabric
act on all four R registers in the same cycle; each CEM unit serves its own
tile. Within a cycle the phases run in a fixed order so units chain:

    WRITE (stores the R of the previous cycle) -> READ -> shifter -> LUT -> CEM ops

``CoreArray`` runs many cores in lockstep as one numpy array, which is how the
dispatcher models an HE broadcast or a GC unit.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .aes import SBOX, SBOX_MUL2, SBOX_MUL3, SHIFT_ROWS
from .config import ArchProfile, CalibrationConfig
from .errors import CapacityError, DomainError
from .isa import (DISABLED, PORT, CemField, CemFunc, CInst, CInstKind, LutMode, MicroInstruction,
                  ShiftFunc)

logger = logging.getLogger(__name__)

TILES = 4
LANES = 4  # 32-bit words per row
LANE_MASK = 0xFFFFFFFF
WORD = np.dtype("<u4")

# Address windows resolved by the controller inside the 13-bit micro-address
# space. Micro-instructions address words below WINDOW_FRAME absolutely; every
# other word of a tile, up to words_per_tile, is reached through the rd, rs1
# and rs2 operands of the running C-Inst.
WINDOW_FRAME = 0x1D00
WINDOW_RD = 0x1E00
WINDOW_RS1 = 0x1E80
WINDOW_RS2 = 0x1F00
WINDOW_SPAN = 0x80
FRAME_SPAN = 0x100

_SHIFT_ROWS_IDX = np.array(SHIFT_ROWS, dtype=np.intp)


def resolve_address(addr: int, inst: Optional[CInst], frame: int = 0) -> int:
    """Map a micro-instruction address to a tile word address.

    0x1D00+off is relative to the sequencer frame; 0x1E00, 0x1E80 and 0x1F00
    (+off) are relative to the rd, rs1 and rs2 operands of the running C-Inst.
    """
    if addr == PORT or addr < WINDOW_FRAME:
        return addr
    if addr < WINDOW_RD:
        return frame + (addr - WINDOW_FRAME)
    if inst is None:
        raise DomainError(f"address {addr:#x} is operand-relative but no C-Inst is bound")
    for base, value in ((WINDOW_RS2, inst.rs2), (WINDOW_RS1, inst.rs1), (WINDOW_RD, inst.rd)):
        if addr >= base:
            return value + (addr - base)
    return addr


def int_to_lanes(value: int) -> np.ndarray:
    return np.array([(value >> (32 * i)) & LANE_MASK for i in range(LANES)], dtype=WORD)


def lanes_to_int(lanes: Sequence[int]) -> int:
    return sum(int(v) << (32 * i) for i, v in enumerate(lanes))


# ---------------------------------------------------------------------------
# Unit functions over R-shaped arrays (..., LANES) of little-endian words
# ---------------------------------------------------------------------------

def _bytes(r: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(r, dtype=WORD).view(np.uint8)


def _words(b: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(b, dtype=np.uint8).view(WORD)


def shifter_apply(func: ShiftFunc, r: np.ndarray) -> np.ndarray:
    """Apply one shifter function to an array whose last axis is the four lanes of a row."""
    r = np.asarray(r, dtype=WORD)
    if func in (ShiftFunc.NOP, ShiftFunc.CARRY_IN):
        return r.copy()
    if func in _LANE_SHIFTS:
        k, left = _LANE_SHIFTS[func]
        return (r << np.uint32(k)) if left else (r >> np.uint32(k))
    if func == ShiftFunc.SIGN_EXTEND:
        return np.where(r >> np.uint32(31), np.uint32(LANE_MASK), np.uint32(0)).astype(WORD)
    if func == ShiftFunc.MSB_EXTRACT:
        return r >> np.uint32(31)
    if func == ShiftFunc.LSB_EXTRACT:
        out = np.zeros_like(r)
        out[..., 0] = r[..., 0] & np.uint32(1)
        return out
    if func == ShiftFunc.LSB_MASK:
        bit = (r[..., :1] & np.uint32(1)).astype(bool)
        return np.broadcast_to(np.where(bit, np.uint32(LANE_MASK), np.uint32(0)), r.shape).astype(WORD)
    if func == ShiftFunc.SHIFT_ROWS:
        return _words(_bytes(r)[..., _SHIFT_ROWS_IDX])
    if func == ShiftFunc.BYTE_ROTL:
        return _words(np.roll(_bytes(r), 1, axis=-1))
    if func == ShiftFunc.BYTE_ROTR:
        return _words(np.roll(_bytes(r), -1, axis=-1))
    if func == ShiftFunc.GF_DOUBLE:
        carries = r >> np.uint32(31)
        out = r << np.uint32(1)
        out[..., 1:] |= carries[..., :-1]
        out[..., 0] ^= carries[..., -1] * np.uint32(0x87)
        return out
    raise DomainError(f"shifter function {func!r} needs the tile axis")


_LANE_SHIFTS = {
    ShiftFunc.SHL1: (1, True), ShiftFunc.SHL4: (4, True), ShiftFunc.SHL8: (8, True), ShiftFunc.SHL16: (16, True),
    ShiftFunc.SHR1: (1, False), ShiftFunc.SHR4: (4, False), ShiftFunc.SHR8: (8, False), ShiftFunc.SHR16: (16, False),
}
_BCAST = {ShiftFunc.BCAST0: 0, ShiftFunc.BCAST1: 1, ShiftFunc.BCAST2: 2, ShiftFunc.BCAST3: 3}


def shifter_op(func: ShiftFunc, operand: int) -> int:
    """Scalar view of a row-local shifter function on a 128-bit value."""
    return lanes_to_int(shifter_apply(ShiftFunc(func), int_to_lanes(operand)))


@dataclass
class LutFabric:
    """Table elements shared by every core; 4 RA/CAM plus 8 SRAM arrays of 256 bytes."""
    elements: int = 12
    entries: int = 256
    tables: np.ndarray = field(init=False, repr=False)
    loaded: List[bool] = field(init=False)

    def __post_init__(self):
        self.tables = np.zeros((self.elements, self.entries), dtype=np.uint8)
        self.loaded = [False] * self.elements

    def write(self, element: int, table: Sequence[int]) -> None:
        if not 0 <= element < self.elements:
            raise CapacityError(f"LUT element {element} does not exist ({self.elements} elements)")
        data = np.asarray(list(table), dtype=np.int64)
        if data.shape != (self.entries,) or np.any(data < 0) or np.any(data > 255):
            raise CapacityError(f"LUT table must hold {self.entries} byte entries")
        self.tables[element] = data.astype(np.uint8)
        self.loaded[element] = True

    def table(self, element: int) -> np.ndarray:
        if not self.loaded[element]:
            raise DomainError(f"LUT element {element} is not loaded")
        return self.tables[element]

    def lookup(self, element: int, index: int) -> int:
        return int(self.table(element)[index & 0xFF])

    def apply(self, mode: LutMode, r: np.ndarray) -> np.ndarray:
        b = _bytes(r)
        if mode == LutMode.LOOKUP:
            return _words(self.table(0)[b])
        s, s2, s3 = self.table(0), self.table(1), self.table(2)
        out = np.empty_like(b)
        for c in range(4):
            a0, a1, a2, a3 = (b[..., 4 * c + i] for i in range(4))
            out[..., 4 * c] = s2[a0] ^ s3[a1] ^ s[a2] ^ s[a3]
            out[..., 4 * c + 1] = s[a0] ^ s2[a1] ^ s3[a2] ^ s[a3]
            out[..., 4 * c + 2] = s[a0] ^ s[a1] ^ s2[a2] ^ s3[a3]
            out[..., 4 * c + 3] = s3[a0] ^ s[a1] ^ s[a2] ^ s2[a3]
        return _words(out)


def lut_lookup(fabric: LutFabric, element: int, index: int) -> int:
    return fabric.lookup(element, index)


AES_TABLES = {0: SBOX, 1: SBOX_MUL2, 2: SBOX_MUL3}


@dataclass
class MemoryTransferModel:
    """External link to main memory; transfers serialize on one queue."""
    bytes_per_cycle: float
    busy_until: int = 0
    transferred: int = 0

    def __post_init__(self):
        if self.bytes_per_cycle <= 0:
            raise DomainError("bandwidth must be positive")

    def transfer(self, nbytes: int, direction: str = "in", now: int = 0) -> int:
        if nbytes < 0:
            raise DomainError("transfer size must be non-negative")
        if direction not in ("in", "out"):
            raise DomainError(f"direction must be 'in' or 'out', got {direction!r}")
        start = max(now, self.busy_until)
        self.busy_until = start + math.ceil(nbytes / self.bytes_per_cycle)
        self.transferred += nbytes
        return self.busy_until


@dataclass
class CoreCounters:
    cycles: int = 0
    energy_pj: float = 0.0
    unit_cycles: Dict[str, int] = field(default_factory=lambda: {"cem": 0, "shifter": 0, "lut": 0})


class CoreArray:
    """``cores`` IMC cores stepping the same micro-instruction stream in lockstep."""

    def __init__(self, profile: Optional[ArchProfile] = None, cores: int = 1,
                 calibration: Optional[CalibrationConfig] = None, trace: bool = False,
                 base_core: int = 0, lut: Optional[LutFabric] = None):
        self.profile = profile or ArchProfile()
        if cores < 1:
            raise DomainError("core array needs at least one core")
        self.cores = cores
        self.base_core = base_core
        self.words_per_tile = self.profile.words_per_tile
        self.mem = np.zeros((cores, TILES, self.words_per_tile), dtype=WORD)
        self.R = np.zeros((cores, TILES, LANES), dtype=WORD)
        self.carry = np.zeros((cores, TILES, LANES), dtype=WORD)
        self.lut = lut or LutFabric(self.profile.lut_cam_elements + self.profile.lut_sram_elements,
                                    self.profile.lut_entries)
        self.uim: Dict[CInstKind, "object"] = {}
        self.energy = (calibration or CalibrationConfig.load()).energy_pj
        self.counters = CoreCounters()
        self.tracing = trace
        self.events: List[dict] = []
        self.link = MemoryTransferModel(self.profile.bytes_per_cycle)

    # -- memory helpers -------------------------------------------------

    def _row(self, addr: int) -> slice:
        if addr % LANES:
            raise DomainError(f"CEM address {addr:#x} is not row aligned")
        if not 0 <= addr <= self.words_per_tile - LANES:
            raise CapacityError(
                f"CEM address {addr:#x} beyond {self.profile.cem_bytes} B per core "
                f"({self.words_per_tile} words per tile)")
        return slice(addr, addr + LANES)

    def store(self, addr: int, values, tiles: Iterable[int] = range(TILES), cores=slice(None)) -> None:
        """Write a row. ``values`` is a 128-bit int, four lanes, or an array broadcastable to (cores, lanes)."""
        sl = self._row(addr)
        if isinstance(values, (int, np.integer)):
            values = int_to_lanes(int(values))
        arr = np.asarray(values)
        for t in tiles:
            self.mem[cores, t, sl] = arr.astype(WORD) if arr.dtype != object else arr.astype(np.uint64).astype(WORD)

    def store_lane_values(self, addr: int, values: np.ndarray) -> None:
        """values shape (cores, tiles, lanes)."""
        self.mem[:, :, self._row(addr)] = np.asarray(values, dtype=np.uint64).astype(WORD)

    def load(self, addr: int, tile: int = 0, core: int = 0) -> int:
        return lanes_to_int(self.mem[core, tile, self._row(addr)])

    def load_lane_values(self, addr: int) -> np.ndarray:
        return self.mem[:, :, self._row(addr)].copy()

    # -- broadcast updates ----------------------------------------------

    def uim_words_used(self, extra=None) -> int:
        """Stored μIM words of the resident programs; routines shared between programs count once."""
        routines: Dict[str, int] = {}
        for program in list(self.uim.values()) + ([extra] if extra is not None else []):
            for name, words in program.routines.items():
                routines[name] = len(words)
        return sum(routines.values())

    def uim_write(self, kind: CInstKind, program, evict: bool = False) -> int:
        """Install ``program`` for ``kind``; returns the number of words broadcast.

        With ``evict`` the other resident programs are dropped when the new one
        would not fit next to them.
        """
        if program.stored_words > self.profile.uim_words:
            raise CapacityError(f"{kind.value} micro-program needs {program.stored_words} words; "
                                f"the micro-instruction memory holds {self.profile.uim_words}")
        self.uim.pop(kind, None)
        if self.uim_words_used(program) > self.profile.uim_words:
            if not evict:
                raise CapacityError(f"micro-instruction memory holds {self.profile.uim_words} words; "
                                    f"{self.uim_words_used(program)} requested")
            logger.debug("evicting %s to make room for %s", sorted(k.value for k in self.uim), kind.value)
            self.uim.clear()
        self.uim[kind] = program
        return program.stored_words

    def lut_write(self, element: int, table: Sequence[int]) -> None:
        self.lut.write(element, table)

    def load_aes_tables(self) -> None:
        for element, table in AES_TABLES.items():
            self.lut.write(element, table)

    # -- execution ------------------------------------------------------

    def _operand(self, t: int, addr: int) -> np.ndarray:
        if addr == PORT:
            return self.R[:, t]
        return self.mem[:, t, self._row(addr)]

    def step(self, mi: MicroInstruction, inst: Optional[CInst] = None, frame: int = 0) -> List[dict]:
        """Execute one micro-instruction on every core; returns trace events."""
        cycle = self.counters.cycles
        events: List[dict] = []
        cem = [(t, c, resolve_address(c.addr_a, inst, frame), resolve_address(c.addr_b, inst, frame))
               for t, c in enumerate(mi.cem) if c.enable]

        for t, c, a, b in cem:
            if c.func == CemFunc.WRITE:
                if b == PORT:
                    raise DomainError("WRITE destination cannot be the port")
                self.mem[:, t, self._row(b)] = self.R[:, t]
        for t, c, a, b in cem:
            if c.func == CemFunc.READ and a != PORT:
                self.R[:, t] = self.mem[:, t, self._row(a)]

        carry_in = 0
        if mi.shifter_enable:
            f = mi.shifter_func
            if f == ShiftFunc.CARRY_IN:
                carry_in = 1
            elif f == ShiftFunc.TILE_ROT:
                self.R = np.roll(self.R, 1, axis=1)
            elif f in _BCAST:
                self.R = np.repeat(self.R[:, _BCAST[f]:_BCAST[f] + 1], TILES, axis=1)
            else:
                self.R = shifter_apply(f, self.R)
        if mi.lut_enable:
            self.R = self.lut.apply(mi.lut_mode, self.R)

        for t, c, a, b in cem:
            if c.func in (CemFunc.READ, CemFunc.WRITE, CemFunc.NOP):
                continue
            x = self._operand(t, a)
            y = self._operand(t, b)
            if c.func == CemFunc.AND:
                res = x & y
            elif c.func == CemFunc.OR:
                res = x | y
            elif c.func == CemFunc.XOR:
                res = x ^ y
            elif c.func == CemFunc.NOT:
                res = ~x
            else:
                wide = x.astype(np.uint64) + y.astype(np.uint64) + np.uint64(carry_in)
                self.carry[:, t] = (wide >> np.uint64(32)).astype(WORD)
                res = (wide & np.uint64(LANE_MASK)).astype(WORD)
            if b == PORT:
                self.R[:, t] = res
            else:
                self.mem[:, t, self._row(b)] = res

        self._account(mi, len(cem))
        if self.tracing:
            events = self._events(cycle, mi, cem)
            self.events.extend(events)
        return events

    def _account(self, mi: MicroInstruction, n_cem: int) -> None:
        c = self.counters
        c.cycles += 1
        pj = self.energy.get("controller", 0.0) + n_cem * self.energy.get("cem", 0.0)
        c.unit_cycles["cem"] += n_cem
        if mi.shifter_enable:
            pj += self.energy.get("shifter", 0.0)
            c.unit_cycles["shifter"] += 1
        if mi.lut_enable:
            pj += self.energy.get("lut", 0.0)
            c.unit_cycles["lut"] += 1
        c.energy_pj += pj * self.cores

    def _events(self, cycle: int, mi: MicroInstruction, cem) -> List[dict]:
        base = {"cycle": cycle, "core": self.base_core, "cores": self.cores}
        ev = [dict(base, unit=f"cem{t}", op=c.func.name, addr=[a, b]) for t, c, a, b in cem]
        if mi.shifter_enable:
            ev.append(dict(base, unit="shifter", op=mi.shifter_func.name, addr=None))
        if mi.lut_enable:
            ev.append(dict(base, unit="lut", op=mi.lut_mode.name, addr=None))
        if not ev:
            ev.append(dict(base, unit="controller", op="NOP", addr=None))
        return ev

    def run_words(self, words: Sequence[MicroInstruction], inst: Optional[CInst] = None, frame: int = 0) -> int:
        start = self.counters.cycles
        for mi in words:
            self.step(mi, inst, frame)
        return self.counters.cycles - start

    def run_program(self, program, inst: Optional[CInst] = None) -> int:
        """Walk a program's sequencer entries; one micro-instruction per cycle."""
        start = self.counters.cycles
        for mi, frame in program.steps():
            self.step(mi, inst, frame)
        return self.counters.cycles - start

    def run_cinst(self, inst: CInst) -> int:
        """Run the resident micro-program for ``inst.kind``; returns its cycle count."""
        program = self.uim.get(inst.kind)
        if program is None:
            raise DomainError(f"no micro-program loaded for {inst.kind.value}")
        program.check_operands(inst, self.words_per_tile)
        return self.run_program(program, inst)

    def cem_op(self, tile: int, func: CemFunc, addr_a: int, addr_b: int, carry_in: int = 0):
        """Single CEM operation through a one-word program; returns (result lanes, carry lanes)."""
        fields = [DISABLED] * TILES
        fields[tile] = CemField(True, func, addr_a, addr_b)
        mi = MicroInstruction(shifter_enable=bool(carry_in),
                              shifter_func=ShiftFunc.CARRY_IN if carry_in else ShiftFunc.NOP,
                              cem=tuple(fields))
        self.step(mi)
        dst = self._operand(tile, addr_b)
        return dst.copy(), self.carry[:, tile].copy()

    def external_transfer(self, nbytes: int, direction: str = "in") -> int:
        return self.link.transfer(nbytes, direction, self.counters.cycles)

    def write_trace(self, path: str) -> int:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
        return len(self.events)
