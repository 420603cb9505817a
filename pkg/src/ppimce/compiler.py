"""
Lowering of GC netlists, HE expression programs and layer graphs into C-Insts.

GC netlists become one FREEXOR or HALFGATE per gate over label rows assigned
by a linear scan of wire lifetimes. HE programs become broadcast C-Insts over
limb rows, NTT schedules for domain changes, and host steps for the base
conversions no C-Inst covers.
"""
from __future__ import annotations

import json
import logging
import math
import os
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy

from .ckks import (
    Ciphertext,
    KeySet,
    Plaintext,
    he_add,
    he_add_plain,
    he_mul,
    he_mul_plain,
    he_rotate,
    he_sub,
    he_sub_plain,
    rescale,
    rotation_galois,
)
from .circuits import AND, INV, XOR, Circuit, build_mod_maxpool_circuit, build_mod_relu_circuit
from .config import PROFILE_PRESETS, ArchProfile, CalibrationConfig, DispatchConfig, load_profile
from .dispatcher import (
    CostReport,
    ScheduleRecord,
    ScheduleTrace,
    broadcast_passes,
    ntt_schedule,
    run_ntt,
    run_program,
)
from .errors import CapacityError, DomainError, LevelError
from .garble import GarbledCircuit, InputEncoding, random_block, random_delta
from .imc import LANE_MASK, LANES, TILES, CoreArray
from .isa import CInst, CInstKind, disassemble
from .microcode import GC_RESERVED, MAX_LIMBS, ModulusShape, he_program, install_gc, install_he, limb_position
from .rns import CrtBasis, Domain, RingParams, RnsPolynomial, _eval_permutation, ntt

logger = logging.getLogger(__name__)


# ===========================================================================
# GC netlists
# ===========================================================================

ROW = LANES


@dataclass
class AddressMap:
    """Where every wire label lives in the unit's CEM."""
    base: int
    wires: Dict[int, int] = field(default_factory=dict)  # wire -> address of its label row
    intervals: List[Tuple[int, int, int, int]] = field(default_factory=list)  # (wire, addr, first, last)
    peak_words: int = 0

    def address(self, wire: int) -> int:
        if wire not in self.wires:
            raise DomainError(f"wire {wire} has no address")
        return self.wires[wire]


class _RowAllocator:
    """Lowest-address-first allocation of 128-bit rows above ``base``."""

    def __init__(self, base: int):
        self.base = base
        self.top = base
        self.free: List[int] = []

    def alloc(self, rows: int = 1) -> int:
        for i in range(len(self.free) - rows + 1):
            start = self.free[i]
            if self.free[i + rows - 1] == start + (rows - 1) * ROW:
                del self.free[i:i + rows]
                return start
        start = self.top
        self.top += rows * ROW
        return start

    def release(self, addr: int, rows: int = 1) -> None:
        for k in range(rows):
            a = addr + k * ROW
            i = bisect_left(self.free, a)
            if i < len(self.free) and self.free[i] == a:
                raise DomainError(f"row {a:#x} released twice")
            insort(self.free, a)


@dataclass
class CompiledNetlist:
    circuit: Circuit
    stream: List[CInst]
    gate_ids: List[int]  # stream position -> gate index (tweak source for HALFGATE)
    address_map: AddressMap
    true_row: int
    profile: str

    @property
    def and_count(self) -> int:
        return sum(1 for inst in self.stream if inst.kind is CInstKind.HALFGATE)

    def tweak(self, position: int) -> int:
        return 2 * self.gate_ids[position]

    def gc_cycles(self, config: Optional[DispatchConfig] = None) -> int:
        """Serialized single-unit cost: the sum of per-gate latencies."""
        config = config or DispatchConfig()
        return sum(config.halfgate_cycles if i.kind is CInstKind.HALFGATE else config.freexor_cycles
                   for i in self.stream)

    def to_assembly(self) -> str:
        head = f"# {self.circuit.name or 'netlist'}: {len(self.stream)} C-Insts, true-label row {self.true_row:#x}\n"
        return head + disassemble(self.stream)


def _fitting_profiles(words_per_tile: int) -> List[str]:
    out = []
    for name in PROFILE_PRESETS:
        if load_profile(name).words_per_tile >= words_per_tile:
            out.append(name)
    return out


def compile_netlist(circuit: Circuit, profile: Optional[ArchProfile] = None) -> CompiledNetlist:
    """One C-Inst per gate, labels assigned by liveness.

    A row is released after the last gate that reads it; HALFGATE outputs take
    a three-row block whose two table rows are released right after the gate.
    Circuit outputs stay resident.
    """
    profile = profile or load_profile()
    gates = circuit.gates
    last_use = {w: -1 for w in circuit.input_wires}
    for i, g in enumerate(gates):
        last_use[g.out] = -1
        last_use[g.a] = i
        if g.kind != INV:
            last_use[g.b] = i
    end = len(gates)
    for w in circuit.output_wires:
        last_use[w] = end

    alloc = _RowAllocator(GC_RESERVED)
    true_row = alloc.alloc()
    amap = AddressMap(base=GC_RESERVED)
    first: Dict[int, int] = {}
    expiring: Dict[int, List[Tuple[int, int]]] = {}

    def assign(wire: int, step: int, rows: int = 1) -> int:
        addr = alloc.alloc(rows)
        amap.wires[wire] = addr
        first[wire] = step
        expiring.setdefault(max(last_use[wire], step) + 1, []).append((wire, addr))
        if rows > 1:
            expiring.setdefault(step + 1, []).append((-1, addr + ROW))
        return addr

    for w in circuit.input_wires:
        assign(w, 0)
    stream: List[CInst] = []
    gate_ids: List[int] = []
    for i, g in enumerate(gates):
        for wire, addr in expiring.pop(i, ()):
            if wire == -1:
                alloc.release(addr, 2)
            else:
                alloc.release(addr)
                amap.intervals.append((wire, addr, first[wire], i - 1))
        a = amap.wires[g.a]
        if g.kind == AND:
            out = assign(g.out, i, rows=3)
            stream.append(CInst(CInstKind.HALFGATE, out, a, amap.wires[g.b]))
        elif g.kind == XOR:
            out = assign(g.out, i)
            stream.append(CInst(CInstKind.FREEXOR, out, a, amap.wires[g.b]))
        else:
            out = assign(g.out, i)
            stream.append(CInst(CInstKind.FREEXOR, out, a, true_row))
        gate_ids.append(i)
    for wire in circuit.output_wires:
        amap.intervals.append((wire, amap.wires[wire], first[wire], end))
    amap.peak_words = alloc.top

    if alloc.top > profile.words_per_tile:
        fits = _fitting_profiles(alloc.top)
        hint = f"profile {fits[0]!r} would fit" if fits else "no shipped profile fits"
        raise CapacityError(
            f"{circuit.name or 'netlist'} needs {alloc.top} live words per tile; profile {profile.name!r} "
            f"({profile.cem_bytes // 1024} KB CEM) has {profile.words_per_tile}; {hint}")
    logger.debug("compiled %s: %d C-Insts, peak %d words", circuit.name, len(stream), alloc.top)
    return CompiledNetlist(circuit, stream, gate_ids, amap, true_row, profile.name)


class GcExecutor:
    """Runs issued GC C-Insts on a unit's core and collects the AND tables."""

    def __init__(self, core: CoreArray, compiled: CompiledNetlist):
        self.core = core
        self.compiled = compiled
        self.tables: Dict[int, Tuple[int, int]] = {}

    def __call__(self, record: ScheduleRecord) -> None:
        inst = record.inst
        if inst.kind is CInstKind.HALFGATE:
            self.core.store(inst.rd, self.compiled.tweak(record.seq))
            self.core.run_cinst(inst)
            self.tables[self.compiled.gate_ids[record.seq]] = (
                self.core.load(inst.rd + ROW, tile=0), self.core.load(inst.rd + 2 * ROW, tile=0))
        else:
            self.core.run_cinst(inst)


@dataclass
class SimulatedGarbling:
    garbled: GarbledCircuit
    encoding: InputEncoding
    trace: ScheduleTrace
    report: CostReport
    compiled: CompiledNetlist


def simulate_garble(circuit: Circuit, delta: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                    profile: Optional[ArchProfile] = None, config: Optional[DispatchConfig] = None,
                    calibration: Optional[CalibrationConfig] = None) -> SimulatedGarbling:
    """Garble ``circuit`` on the simulated GC units.

    Labels are drawn in the same order as ``garble.garble`` so equal seeds give
    equal garblings.
    """
    profile = profile or load_profile()
    delta = random_delta(rng) if delta is None else delta
    input_zero = [random_block(rng) for _ in circuit.input_wires]
    true_zero = random_block(rng)
    compiled = compile_netlist(circuit, profile)
    core = CoreArray(profile, cores=1, calibration=calibration)
    install_gc(core, delta)
    core.store(compiled.true_row, true_zero)
    for w, label in zip(circuit.input_wires, input_zero):
        core.store(compiled.address_map.address(w), label)
    executor = GcExecutor(core, compiled)
    trace, report = run_program(compiled.stream, config, profile, executor, calibration=calibration)
    output_zero = [core.load(compiled.address_map.address(w)) for w in circuit.output_wires]
    tables = [executor.tables[gid] for gid in sorted(executor.tables)]
    gc = GarbledCircuit(len(circuit.gates), tables, [z & 1 for z in output_zero])
    enc = InputEncoding(delta, input_zero, output_zero, true_zero)
    return SimulatedGarbling(gc, enc, trace, report, compiled)


# ===========================================================================
# HE programs
# ===========================================================================

class HeOpKind(Enum):
    ADD = "add"
    SUB = "sub"
    ADD_PLAIN = "addplain"
    SUB_PLAIN = "subplain"
    MUL_PLAIN = "mulplain"
    MUL = "mul"
    ROTATE = "rotate"
    RESCALE = "rescale"
    NTT = "ntt"
    INTT = "intt"


_BINARY_CT = (HeOpKind.ADD, HeOpKind.SUB, HeOpKind.MUL)
_WITH_PLAIN = (HeOpKind.ADD_PLAIN, HeOpKind.SUB_PLAIN, HeOpKind.MUL_PLAIN)


@dataclass(frozen=True)
class HeOp:
    kind: HeOpKind
    dst: str
    a: str
    b: Optional[str] = None
    k: int = 0  # rotation amount

    def __str__(self) -> str:
        args = ", ".join(x for x in (self.a, self.b) if x is not None)
        extra = f", {self.k}" if self.kind is HeOpKind.ROTATE else ""
        return f"{self.dst} = {self.kind.value}({args}{extra})"


@dataclass
class HeProgram:
    ops: List[HeOp]
    ciphertexts: Tuple[str, ...]
    plaintexts: Tuple[str, ...] = ()
    levels: Dict[str, int] = field(default_factory=dict)  # input ciphertext levels; default: full

    def validate(self) -> None:
        cts, pts = set(self.ciphertexts), set(self.plaintexts)
        if cts & pts:
            raise DomainError(f"registers declared both ciphertext and plaintext: {sorted(cts & pts)}")
        for op in self.ops:
            if op.a not in cts:
                raise DomainError(f"{op}: ciphertext {op.a!r} used before definition")
            if op.kind in _BINARY_CT and op.b not in cts:
                raise DomainError(f"{op}: ciphertext {op.b!r} used before definition")
            if op.kind in _WITH_PLAIN and op.b not in pts:
                raise DomainError(f"{op}: plaintext {op.b!r} is not declared")
            if op.dst in pts:
                raise DomainError(f"{op}: cannot overwrite plaintext {op.dst!r}")
            cts.add(op.dst)

    def rotations(self) -> List[int]:
        return sorted({op.k for op in self.ops if op.kind is HeOpKind.ROTATE and op.k})


class StepKind(Enum):
    CINST = "cinst"
    NTT = "ntt"
    INTT = "intt"
    LIFT = "lift"          # one limb of a coefficient poly, reduced into every modulus of a larger base
    MOD_DOWN = "moddown"   # centered CRT lift of the special-prime part into Q
    CENTER_LAST = "center"  # centered last limb reduced into the remaining moduli
    MOVE = "move"          # inter-core coefficient permutation for an automorphism
    MASK = "mask"          # sign mask row for POLYPERM
    CONST = "const"        # a per-limb constant polynomial
    COPY = "copy"


HOST_STEPS = (StepKind.LIFT, StepKind.MOD_DOWN, StepKind.CENTER_LAST, StepKind.MASK, StepKind.CONST,
              StepKind.COPY)

# operand rows of HE C-Insts, above the largest reserved frame
HE_RD, HE_RS1, HE_RS2 = 224, 228, 232


@dataclass(frozen=True)
class HeStep:
    kind: StepKind
    dst: str
    srcs: Tuple[str, ...] = ()
    moduli: Tuple[int, ...] = ()
    cinst: Optional[CInst] = None
    arg: int = 0
    values: Tuple[int, ...] = ()
    cycles: int = 0

    def __str__(self) -> str:
        if self.kind is StepKind.CINST:
            return f"{self.cinst.kind.value} {self.dst}, {', '.join(self.srcs)}  # {len(self.moduli)} limbs"
        return f"# {self.kind.value} {self.dst} <- {', '.join(self.srcs) or '-'} (arg={self.arg})"


@dataclass
class CompiledHe:
    program: HeProgram
    params: RingParams
    lowered: List[Tuple[HeOp, List[HeStep]]]
    levels: Dict[str, int]

    @property
    def steps(self) -> List[HeStep]:
        return [s for _, steps in self.lowered for s in steps]

    @property
    def cycles(self) -> int:
        return sum(s.cycles for s in self.steps)

    def count(self, kind: Union[StepKind, CInstKind]) -> int:
        if isinstance(kind, StepKind):
            return sum(1 for s in self.steps if s.kind is kind)
        return sum(1 for s in self.steps if s.cinst is not None and s.cinst.kind is kind)

    @property
    def stream(self) -> List[CInst]:
        return [s.cinst for s in self.steps if s.cinst is not None]

    def to_assembly(self) -> str:
        lines = []
        for op, steps in self.lowered:
            lines.append(f"# {op}")
            for s in steps:
                lines.append(str(s))
        return "\n".join(lines) + "\n"


def _ct(name: str, part: int) -> str:
    return f"{name}.{part}"


class _HeLowering:
    def __init__(self, params: RingParams, profile: ArchProfile, hop_cycles: int):
        self.params = params
        self.n = params.degree
        self.profile = profile
        self.hop = hop_cycles
        base = params.moduli + params.special_primes
        if len(base) > MAX_LIMBS:
            raise CapacityError(f"{len(base)} limbs exceed the {MAX_LIMBS} lanes of a core row")
        self.shape = ModulusShape.of(base)
        self.passes = broadcast_passes(self.n, profile.cores)
        self.steps: List[HeStep] = []
        self._tmp = 0
        self._ntt_cycles: Dict[str, int] = {}

    def tmp(self, tag: str) -> str:
        self._tmp += 1
        return f"%{tag}{self._tmp}"

    def cinst(self, kind: CInstKind, dst: str, a: str, b: str, moduli: Sequence[int]) -> str:
        cycles = he_program(kind, self.shape).length * self.passes
        self.steps.append(HeStep(StepKind.CINST, dst, (a, b), tuple(moduli),
                                 CInst(kind, HE_RD, HE_RS1, HE_RS2), cycles=cycles))
        return dst

    def transform(self, direction: str, dst: str, src: str, moduli: Sequence[int]) -> str:
        if direction not in self._ntt_cycles:
            plan = ntt_schedule(self.n, self.n // 2, direction, shape=self.shape, hop_cycles=self.hop)
            # fewer than N/2 cores replay the plan over core groups
            self._ntt_cycles[direction] = plan.cycles * broadcast_passes(self.n // 2, self.profile.cores)
        kind = StepKind.NTT if direction == "forward" else StepKind.INTT
        self.steps.append(HeStep(kind, dst, (src,), tuple(moduli), cycles=self._ntt_cycles[direction]))
        return dst

    def host(self, kind: StepKind, dst: str, srcs: Tuple[str, ...], moduli: Sequence[int],
             arg: int = 0, values: Tuple[int, ...] = ()) -> str:
        cycles = self.hop * self.n if kind is StepKind.MOVE else 0
        self.steps.append(HeStep(kind, dst, srcs, tuple(moduli), arg=arg, values=values, cycles=cycles))
        return dst

    def const(self, tag: str, moduli: Sequence[int], values: Sequence[int]) -> str:
        return self.host(StepKind.CONST, self.tmp(tag), (), moduli, values=tuple(int(v) for v in values))

    # -- composite lowerings ---------------------------------------------

    def mod_down(self, acc: str, q: Tuple[int, ...]) -> str:
        specials = tuple(m.value for m in self.params.special_primes)
        p_part = self.transform("inverse", self.tmp("pp"), acc, specials)
        corr = self.host(StepKind.MOD_DOWN, self.tmp("corr"), (p_part,), q)
        corr = self.transform("forward", self.tmp("corr"), corr, q)
        diff = self.cinst(CInstKind.POLYSUB, self.tmp("diff"), acc, corr, q)
        p = math.prod(specials)
        pinv = self.const("pinv", q, [pow(p % m, -1, m) for m in q])
        return self.cinst(CInstKind.POLYMUL, self.tmp("ks"), diff, pinv, q)

    def key_switch(self, d: str, key: str, q: Tuple[int, ...], coeff_input: bool) -> Tuple[str, str]:
        ext = q + tuple(m.value for m in self.params.special_primes)
        coeff = d if coeff_input else self.transform("inverse", self.tmp("dc"), d, q)
        acc0 = acc1 = None
        for i in range(len(q)):
            lifted = self.host(StepKind.LIFT, self.tmp("lift"), (coeff,), ext, arg=i)
            lifted = self.transform("forward", self.tmp("lift"), lifted, ext)
            pb = self.cinst(CInstKind.POLYMUL, self.tmp("kb"), lifted, f"key:{key}:b{i}", ext)
            pa = self.cinst(CInstKind.POLYMUL, self.tmp("ka"), lifted, f"key:{key}:a{i}", ext)
            acc0 = pb if acc0 is None else self.cinst(CInstKind.POLYADD, self.tmp("acc"), acc0, pb, ext)
            acc1 = pa if acc1 is None else self.cinst(CInstKind.POLYADD, self.tmp("acc"), acc1, pa, ext)
        return self.mod_down(acc0, q), self.mod_down(acc1, q)

    def rescale_part(self, part: str, q: Tuple[int, ...]) -> str:
        q_last, keep = q[-1], q[:-1]
        last = self.transform("inverse", self.tmp("last"), part, (q_last,))
        corr = self.host(StepKind.CENTER_LAST, self.tmp("corr"), (last,), keep, arg=q_last)
        corr = self.transform("forward", self.tmp("corr"), corr, keep)
        diff = self.cinst(CInstKind.POLYSUB, self.tmp("diff"), part, corr, keep)
        inv = self.const("qinv", keep, [pow(q_last % m, -1, m) for m in keep])
        return self.cinst(CInstKind.POLYMUL, self.tmp("rs"), diff, inv, keep)


def compile_he(program: HeProgram, params: RingParams, profile: Optional[ArchProfile] = None,
               config: Optional[DispatchConfig] = None) -> CompiledHe:
    """Lower every HE op to broadcast C-Insts, NTT schedules and host steps.

    Mul is tensor, relinearization and rescale; Rotate permutes c0 in the
    evaluation domain and moves c1 through the coefficient domain, where
    POLYPERM applies the negacyclic signs before key switching.
    """
    program.validate()
    profile = profile or ArchProfile()
    config = config or DispatchConfig()
    low = _HeLowering(params, profile, config.hop_cycles)
    q_all = tuple(m.value for m in params.moduli)
    levels = {name: program.levels.get(name, params.levels) for name in program.ciphertexts}
    lowered: List[Tuple[HeOp, List[HeStep]]] = []

    for op in program.ops:
        low.steps = []
        level = levels[op.a]
        if level < 1:
            raise LevelError(f"{op}: {op.a!r} has no modulus left")
        q = q_all[:level]
        a0, a1, d0, d1 = _ct(op.a, 0), _ct(op.a, 1), _ct(op.dst, 0), _ct(op.dst, 1)
        if op.kind in _BINARY_CT and levels[op.b] != level:
            raise LevelError(f"{op}: level mismatch {level} vs {levels[op.b]}")
        if op.kind is HeOpKind.ADD or op.kind is HeOpKind.SUB:
            kind = CInstKind.POLYADD if op.kind is HeOpKind.ADD else CInstKind.POLYSUB
            low.cinst(kind, d0, a0, _ct(op.b, 0), q)
            low.cinst(kind, d1, a1, _ct(op.b, 1), q)
        elif op.kind in (HeOpKind.ADD_PLAIN, HeOpKind.SUB_PLAIN):
            kind = CInstKind.POLYADD if op.kind is HeOpKind.ADD_PLAIN else CInstKind.POLYSUB
            low.cinst(kind, d0, a0, op.b, q)
            low.host(StepKind.COPY, d1, (a1,), q)
        elif op.kind is HeOpKind.MUL_PLAIN:
            low.cinst(CInstKind.POLYMUL, d0, a0, op.b, q)
            low.cinst(CInstKind.POLYMUL, d1, a1, op.b, q)
        elif op.kind is HeOpKind.MUL:
            if level < 2:
                raise LevelError(f"{op}: multiplication needs two moduli to rescale into")
            b0, b1 = _ct(op.b, 0), _ct(op.b, 1)
            t0 = low.cinst(CInstKind.POLYMUL, low.tmp("t"), a0, b0, q)
            x = low.cinst(CInstKind.POLYMUL, low.tmp("t"), a0, b1, q)
            y = low.cinst(CInstKind.POLYMUL, low.tmp("t"), a1, b0, q)
            t1 = low.cinst(CInstKind.POLYADD, low.tmp("t"), x, y, q)
            t2 = low.cinst(CInstKind.POLYMUL, low.tmp("t"), a1, b1, q)
            k0, k1 = low.key_switch(t2, "relin", q, coeff_input=False)
            r0 = low.cinst(CInstKind.POLYADD, low.tmp("r"), t0, k0, q)
            r1 = low.cinst(CInstKind.POLYADD, low.tmp("r"), t1, k1, q)
            low.host(StepKind.COPY, d0, (low.rescale_part(r0, q),), q[:-1])
            low.host(StepKind.COPY, d1, (low.rescale_part(r1, q),), q[:-1])
            level -= 1
        elif op.kind is HeOpKind.RESCALE:
            if level < 2:
                raise LevelError(f"{op}: rescale needs at least two moduli")
            low.host(StepKind.COPY, d0, (low.rescale_part(a0, q),), q[:-1])
            low.host(StepKind.COPY, d1, (low.rescale_part(a1, q),), q[:-1])
            level -= 1
        elif op.kind is HeOpKind.ROTATE:
            k = op.k % params.slots
            if k == 0:
                low.host(StepKind.COPY, d0, (a0,), q)
                low.host(StepKind.COPY, d1, (a1,), q)
            else:
                g = rotation_galois(k, params.degree)
                c0 = low.host(StepKind.MOVE, low.tmp("rot"), (a0,), q, arg=g)
                c1 = low.transform("inverse", low.tmp("rot"), a1, q)
                mask = low.host(StepKind.MASK, low.tmp("mask"), (), q, arg=g)
                c1 = low.cinst(CInstKind.POLYPERM, low.tmp("rot"), c1, mask, q)
                c1 = low.host(StepKind.MOVE, low.tmp("rot"), (c1,), q, arg=g)
                k0, k1 = low.key_switch(c1, f"rot{k}", q, coeff_input=True)
                low.cinst(CInstKind.POLYADD, d0, c0, k0, q)
                low.host(StepKind.COPY, d1, (k1,), q)
        elif op.kind in (HeOpKind.NTT, HeOpKind.INTT):
            direction = "forward" if op.kind is HeOpKind.NTT else "inverse"
            low.transform(direction, d0, a0, q)
            low.transform(direction, d1, a1, q)
        else:
            raise DomainError(f"unsupported HE op {op.kind}")
        levels[op.dst] = level
        lowered.append((op, low.steps))
    compiled = CompiledHe(program, params, lowered, levels)
    logger.debug("compiled %d HE ops into %d steps, %d cycles", len(program.ops), len(compiled.steps),
                 compiled.cycles)
    return compiled


def evaluate_he(program: HeProgram, inputs: Dict[str, Union[Ciphertext, Plaintext]],
                keys: KeySet) -> Dict[str, Ciphertext]:
    """Run an HE program through the library operations."""
    program.validate()
    regs: Dict[str, Union[Ciphertext, Plaintext]] = dict(inputs)
    for op in program.ops:
        a = regs[op.a]
        b = regs.get(op.b) if op.b is not None else None
        if op.kind is HeOpKind.ADD:
            out = he_add(a, b)
        elif op.kind is HeOpKind.SUB:
            out = he_sub(a, b)
        elif op.kind is HeOpKind.ADD_PLAIN:
            out = he_add_plain(a, b)
        elif op.kind is HeOpKind.SUB_PLAIN:
            out = he_sub_plain(a, b)
        elif op.kind is HeOpKind.MUL_PLAIN:
            out = he_mul_plain(a, b)
        elif op.kind is HeOpKind.MUL:
            out = he_mul(a, b, keys)
        elif op.kind is HeOpKind.ROTATE:
            out = he_rotate(a, op.k, keys)
        elif op.kind is HeOpKind.RESCALE:
            out = rescale(a)
        else:
            direction = "forward" if op.kind is HeOpKind.NTT else "inverse"
            out = Ciphertext(ntt(a.c0, direction), ntt(a.c1, direction), a.scale)
        regs[op.dst] = out
    return {k: v for k, v in regs.items() if isinstance(v, Ciphertext)}


class HeMachine:
    """Executes a CompiledHe on a core array holding one coefficient per core.

    Every limb sits in a fixed lane chosen by its modulus, so C-Insts over a
    subset of the moduli leave the other lanes untouched.
    """

    def __init__(self, params: RingParams, profile: Optional[ArchProfile] = None,
                 calibration: Optional[CalibrationConfig] = None):
        self.params = params
        self.profile = profile or ArchProfile()
        self.calibration = calibration
        base = params.moduli + params.special_primes
        self.modulus = {m.value: m for m in base}
        self.slot = {m.value: i for i, m in enumerate(base)}
        self.core = CoreArray(self.profile, cores=params.degree, calibration=calibration)
        install_he(self.core, base, kinds=(CInstKind.POLYADD, CInstKind.POLYSUB, CInstKind.POLYPERM,
                                            CInstKind.POLYMUL))
        self.cycles = 0

    def _store(self, addr: int, poly: RnsPolynomial) -> None:
        row = np.zeros((self.core.cores, TILES, LANES), dtype=np.uint64)
        for m, ch in zip(poly.moduli, poly.channels):
            t, lane = limb_position(self.slot[m.value])
            row[:, t, lane] = np.asarray(ch, dtype=np.uint64)
        self.core.store_lane_values(addr, row)

    def _load(self, addr: int, moduli: Sequence[int], domain: Domain) -> RnsPolynomial:
        row = self.core.load_lane_values(addr)
        chans = []
        for q in moduli:
            t, lane = limb_position(self.slot[q])
            chans.append(row[:, t, lane].astype(np.uint64))
        return RnsPolynomial(self.params, chans, tuple(self.modulus[q] for q in moduli), domain)

    def _mods(self, moduli: Sequence[int]):
        return tuple(self.modulus[q] for q in moduli)

    def _run_cinst(self, step: HeStep, polys: Dict[str, RnsPolynomial], masks: Dict[str, np.ndarray]) -> None:
        mods = self._mods(step.moduli)
        a = polys[step.srcs[0]].restrict(mods)
        self._store(HE_RS1, a)
        if step.cinst.kind is CInstKind.POLYPERM:
            mask = masks[step.srcs[1]]
            row = np.zeros((self.core.cores, TILES, LANES), dtype=np.uint64)
            row[mask] = LANE_MASK
            self.core.store_lane_values(HE_RS2, row)
        else:
            self._store(HE_RS2, polys[step.srcs[1]].restrict(mods))
        self.core.run_cinst(step.cinst)
        polys[step.dst] = self._load(HE_RD, step.moduli, a.domain)

    def _transform(self, step: HeStep, polys: Dict[str, RnsPolynomial]) -> None:
        mods = self._mods(step.moduli)
        src = polys[step.srcs[0]].restrict(mods)
        forward = step.kind is StepKind.NTT
        plan = ntt_schedule(self.params.degree, self.params.degree // 2, "forward" if forward else "inverse")
        data, _ = run_ntt(plan, np.stack(src.channels), mods, self.profile, self.calibration)
        polys[step.dst] = RnsPolynomial(self.params, [data[i].astype(np.uint64) for i in range(len(mods))], mods,
                                        Domain.EVALUATION if forward else Domain.COEFFICIENT)

    def _host(self, step: HeStep, polys: Dict[str, RnsPolynomial], masks: Dict[str, np.ndarray]) -> None:
        n = self.params.degree
        mods = self._mods(step.moduli)
        if step.kind is StepKind.COPY:
            polys[step.dst] = polys[step.srcs[0]].restrict(mods)
        elif step.kind is StepKind.CONST:
            chans = [np.full(n, v, dtype=np.uint64) for v in step.values]
            polys[step.dst] = RnsPolynomial(self.params, chans, mods, Domain.EVALUATION)
        elif step.kind is StepKind.LIFT:
            src = polys[step.srcs[0]]
            digit = src.channels[step.arg].astype(object)
            polys[step.dst] = RnsPolynomial.from_integers(self.params, list(digit), mods)
        elif step.kind is StepKind.MOD_DOWN:
            src = polys[step.srcs[0]]
            basis = CrtBasis(tuple(m.value for m in src.moduli))
            lifted = np.zeros(n, dtype=object)
            for ch, h, hi, p in zip(src.channels, basis.hats, basis.hat_invs, basis.moduli):
                lifted += ((ch.astype(object) * hi) % p) * h
            lifted %= basis.product
            lifted = np.where(lifted > basis.product // 2, lifted - basis.product, lifted)
            polys[step.dst] = RnsPolynomial.from_integers(self.params, list(lifted), mods)
        elif step.kind is StepKind.CENTER_LAST:
            last = polys[step.srcs[0]].channels[0].astype(object)
            last = np.where(last > step.arg // 2, last - step.arg, last)
            polys[step.dst] = RnsPolynomial.from_integers(self.params, list(last), mods)
        elif step.kind is StepKind.MASK:
            idx = (np.arange(n, dtype=np.int64) * step.arg) % (2 * n)
            masks[step.dst] = idx >= n
        elif step.kind is StepKind.MOVE:
            src = polys[step.srcs[0]]
            if src.domain is Domain.EVALUATION:
                perm = _eval_permutation(n, step.arg % (2 * n))
                chans = [ch[perm] for ch in src.channels]
            else:
                dest = (np.arange(n, dtype=np.int64) * step.arg) % (2 * n) % n
                chans = []
                for ch in src.channels:
                    out = np.zeros_like(ch)
                    out[dest] = ch
                    chans.append(out)
            polys[step.dst] = RnsPolynomial(self.params, chans, src.moduli, src.domain)
        else:
            raise DomainError(f"unknown host step {step.kind}")

    def _bind_keys(self, compiled: CompiledHe, keys: KeySet, polys: Dict[str, RnsPolynomial]) -> None:
        for step in compiled.steps:
            for name in step.srcs:
                if not name.startswith("key:") or name in polys:
                    continue
                _, key, part = name.split(":")
                swk = keys.relin if key == "relin" else keys.rotations.get(int(key[3:]))
                if swk is None:
                    raise DomainError(f"no switching key for {key}")
                polys[name] = (swk.b if part[0] == "b" else swk.a)[int(part[1:])]

    def run(self, compiled: CompiledHe, inputs: Dict[str, Union[Ciphertext, Plaintext]],
            keys: KeySet) -> Dict[str, Ciphertext]:
        polys: Dict[str, RnsPolynomial] = {}
        masks: Dict[str, np.ndarray] = {}
        scales: Dict[str, float] = {}
        for name, value in inputs.items():
            if isinstance(value, Ciphertext):
                polys[_ct(name, 0)], polys[_ct(name, 1)] = value.c0, value.c1
            else:
                polys[name] = value.poly
            scales[name] = value.scale
        self._bind_keys(compiled, keys, polys)
        outputs: Dict[str, Ciphertext] = {}
        for op, steps in compiled.lowered:
            for step in steps:
                if step.kind is StepKind.CINST:
                    self._run_cinst(step, polys, masks)
                elif step.kind in (StepKind.NTT, StepKind.INTT):
                    self._transform(step, polys)
                else:
                    self._host(step, polys, masks)
                self.cycles += step.cycles
            scale = scales[op.a]
            if op.kind in (HeOpKind.MUL_PLAIN, HeOpKind.MUL):
                scale *= scales[op.b]
            if op.kind in (HeOpKind.MUL, HeOpKind.RESCALE):
                scale /= compiled.params.moduli[compiled.levels[op.dst]].value
            scales[op.dst] = scale
            outputs[op.dst] = Ciphertext(polys[_ct(op.dst, 0)], polys[_ct(op.dst, 1)], scale)
        for name in compiled.program.ciphertexts:
            outputs.setdefault(name, inputs[name])
        return outputs


# ===========================================================================
# Layer graphs
# ===========================================================================

LINEAR_KINDS = ("fc", "conv")
NONLINEAR_KINDS = ("relu", "maxpool")


@dataclass
class Layer:
    kind: str
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    weights: Optional[np.ndarray] = None  # fc: (out, in); conv: (O, C, k, k)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    pool: int = 2

    @property
    def in_size(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    def matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dense (out, in) matrix and bias of a linear layer."""
        if self.kind == "fc":
            w = np.asarray(self.weights, dtype=np.float64).reshape(self.out_size, self.in_size)
        elif self.kind == "conv":
            w = conv_matrix(self)
        else:
            raise DomainError(f"{self.kind} layer has no matrix")
        b = np.zeros(w.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if self.kind == "conv" and b.size == self.out_shape[0]:
            b = np.repeat(b, self.out_size // self.out_shape[0])
        return w, b.reshape(-1)

    def windows(self) -> List[List[int]]:
        """Flat input indices of every maxpool window, in output order."""
        c, h, w = self.in_shape
        k = self.pool
        out = []
        for ch in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    out.append([ch * h * w + (i * k + di) * w + (j * k + dj)
                                for di in range(k) for dj in range(k)])
        return out


def conv_matrix(layer: Layer) -> np.ndarray:
    """Convolution over a (C, H, W) input as a dense matrix on flattened tensors."""
    o, c, k, _ = layer.weights.shape
    _, h, w = layer.in_shape
    s, pad = layer.stride, layer.padding
    oh, ow = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
    mat = np.zeros((o * oh * ow, c * h * w))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                row = f * oh * ow + i * ow + j
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            y, x = i * s + di - pad, j * s + dj - pad
                            if 0 <= y < h and 0 <= x < w:
                                mat[row, ch * h * w + y * w + x] = layer.weights[f, ch, di, dj]
    return mat


@dataclass
class LayerGraph:
    layers: List[Layer]
    name: str = ""

    def validate(self) -> None:
        if not self.layers:
            raise DomainError("layer graph is empty")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LINEAR_KINDS + NONLINEAR_KINDS:
                raise DomainError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == "fc" and layer.weights is not None and \
                    np.asarray(layer.weights).size != layer.in_size * layer.out_size:
                raise DomainError(f"layer {i}: {np.asarray(layer.weights).size} weights for "
                                  f"{layer.in_size}x{layer.out_size}")
            if layer.kind == "relu" and layer.in_size != layer.out_size:
                raise DomainError(f"layer {i}: relu changes the size")
            if i and self.layers[i - 1].out_size != layer.in_size:
                raise DomainError(f"shape mismatch between layer {i - 1} {self.layers[i - 1].out_shape} "
                                  f"and layer {i} {layer.in_shape}")

    @property
    def input_size(self) -> int:
        return self.layers[0].in_size

    @property
    def output_size(self) -> int:
        return self.layers[-1].out_size

    @classmethod
    def mlp(cls, weights: Sequence[np.ndarray], biases: Optional[Sequence[np.ndarray]] = None,
            name: str = "mlp") -> "LayerGraph":
        """FC layers with ReLU between them; weights[i] has shape (out, in)."""
        layers: List[Layer] = []
        for i, w in enumerate(weights):
            w = np.asarray(w, dtype=np.float64)
            b = None if biases is None else np.asarray(biases[i], dtype=np.float64)
            if i:
                layers.append(Layer("relu", (w.shape[1],), (w.shape[1],)))
            layers.append(Layer("fc", (w.shape[1],), (w.shape[0],), w, b))
        graph = cls(layers, name)
        graph.validate()
        return graph


def _read_tensor(ref, base_dir: str, count: int) -> np.ndarray:
    if isinstance(ref, list):
        arr = np.asarray(ref, dtype=np.float64).reshape(-1)
    else:
        if isinstance(ref, str):
            ref = {"file": ref}
        path = os.path.join(base_dir, ref["file"])
        dtype = np.dtype(ref.get("dtype", "<f4"))
        arr = np.fromfile(path, dtype=dtype, count=count, offset=int(ref.get("offset", 0))).astype(np.float64)
    if arr.size != count:
        raise DomainError(f"expected {count} values, read {arr.size}")
    return arr


def load_model(path: str) -> LayerGraph:
    """Read a JSON model descriptor; weights are inline lists or raw little-endian tensor files."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(path))
    layers: List[Layer] = []
    shape = tuple(raw.get("input_shape", ()))
    for i, entry in enumerate(raw["layers"]):
        kind = entry["kind"]
        in_shape = tuple(entry.get("in_shape", shape))
        if kind == "fc":
            in_size, out_size = entry["shape"]
            w = _read_tensor(entry["weights"], base_dir, in_size * out_size).reshape(out_size, in_size)
            b = _read_tensor(entry["bias"], base_dir, out_size) if "bias" in entry else None
            layer = Layer(kind, in_shape or (in_size,), (out_size,), w, b)
        elif kind == "conv":
            o, c, k = entry["shape"]
            w = _read_tensor(entry["weights"], base_dir, o * c * k * k).reshape(o, c, k, k)
            b = _read_tensor(entry["bias"], base_dir, o) if "bias" in entry else None
            stride, pad = int(entry.get("stride", 1)), int(entry.get("padding", 0))
            _, h, wd = in_shape
            out = (o, (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1)
            layer = Layer(kind, in_shape, out, w, b, stride, pad)
        elif kind == "relu":
            layer = Layer(kind, in_shape, in_shape)
        elif kind == "maxpool":
            k = int(entry.get("pool", 2))
            c, h, wd = in_shape
            layer = Layer(kind, in_shape, (c, h // k, wd // k), pool=k)
        else:
            raise DomainError(f"layer {i}: unknown kind {kind!r}")
        layers.append(layer)
        shape = layer.out_shape
    graph = LayerGraph(layers, raw.get("name", os.path.basename(path)))
    graph.validate()
    return graph


# ===========================================================================
# Phase planning
# ===========================================================================

# shares cross the wire as little-endian 32-bit words
SHARE_WORD_BITS = 32


def share_modulus(bits: int) -> int:
    """Largest prime below 2^bits; arithmetic shares live modulo it."""
    if not 2 <= bits <= SHARE_WORD_BITS:
        raise DomainError(f"share_bits must lie in [2, {SHARE_WORD_BITS}], got {bits}")
    return int(sympy.prevprime(1 << bits))


def padded_size(layer: Layer) -> int:
    return 1 << (max(layer.in_size, layer.out_size) - 1).bit_length()


def diagonals(matrix: np.ndarray, m: int, slots: int) -> List[np.ndarray]:
    """Generalized diagonals of ``matrix`` zero-padded to m x m, repeated over all slots.

    With the input repeated at period m, sum_i d_i * rot(x, i) is the product
    in every block of m slots.
    """
    pad = np.zeros((m, m), dtype=matrix.dtype)
    pad[:matrix.shape[0], :matrix.shape[1]] = matrix
    j = np.arange(slots) % m
    return [pad[j, (j + i) % m] for i in range(m)]


def diagonal_program(m: int) -> HeProgram:
    """Share merge, rotate-multiply-accumulate, rescale and re-share for one linear layer."""
    ops = [HeOp(HeOpKind.ADD_PLAIN, "z", "x", "share")]
    acc = None
    for i in range(m):
        src = "z"
        if i:
            src = f"r{i}"
            ops.append(HeOp(HeOpKind.ROTATE, src, "z", k=i))
        ops.append(HeOp(HeOpKind.MUL_PLAIN, f"p{i}", src, f"d{i}"))
        if acc is None:
            acc = f"p{i}"
        else:
            ops.append(HeOp(HeOpKind.ADD, f"acc{i}", acc, f"p{i}"))
            acc = f"acc{i}"
    ops.append(HeOp(HeOpKind.RESCALE, "y", acc))
    ops.append(HeOp(HeOpKind.SUB_PLAIN, "out", "y", "offset"))
    plaintexts = ("share",) + tuple(f"d{i}" for i in range(m)) + ("offset",)
    return HeProgram(ops, ("x",), plaintexts)


@dataclass
class LinearPhase:
    index: int
    layer: Layer
    matrix: np.ndarray
    bias: np.ndarray
    period: int
    program: HeProgram
    compiled: CompiledHe

    @property
    def rotations(self) -> List[int]:
        return self.program.rotations()

    @property
    def mul_depth(self) -> int:
        return sum(1 for op in self.program.ops if op.kind in (HeOpKind.MUL, HeOpKind.RESCALE))


@dataclass
class NonLinearPhase:
    index: int
    layer: Layer
    circuit: Circuit
    instances: int
    shift: int
    windows: List[List[int]] = field(default_factory=list)  # maxpool only
    netlist: Optional[CompiledNetlist] = None

    def gc_cycles(self, config: Optional[DispatchConfig] = None) -> int:
        """Whole instances spread over the units, each garbled serially on its unit."""
        config = config or DispatchConfig()
        per = self.netlist.gc_cycles(config) if self.netlist else 0
        return per * math.ceil(self.instances / config.units)


@dataclass(frozen=True)
class Checkpoint:
    phase: int
    step: int
    label: str


PROTOCOL_STEPS = {
    1: "client uploads Enc(c_y)",
    2: "server evaluates the linear layer and masks with r",
    3: "client decrypts x - r",
    4: "client garbles the activation circuit",
    5: "input labels sent, evaluator labels via OT",
    6: "server evaluates the garbled circuit",
    7: "output share returned",
}


@dataclass
class NetworkPlan:
    graph: LayerGraph
    params: RingParams
    modulus: int
    frac_bits: int
    weight_bits: int
    phases: List[Union[LinearPhase, NonLinearPhase]]
    checkpoints: List[Checkpoint]

    @property
    def rotations(self) -> List[int]:
        return sorted({k for p in self.phases if isinstance(p, LinearPhase) for k in p.rotations})

    @property
    def he_cycles(self) -> int:
        return sum(p.compiled.cycles for p in self.phases if isinstance(p, LinearPhase))

    @property
    def and_gates(self) -> int:
        return sum(p.circuit.and_count * p.instances for p in self.phases if isinstance(p, NonLinearPhase))


def compile_network(graph: LayerGraph, params: RingParams, share_bits: int = 20, frac_bits: int = 8,
                    weight_bits: int = 7, profile: Optional[ArchProfile] = None,
                    gc_profile: Optional[ArchProfile] = None) -> NetworkPlan:
    """Split a layer graph into HE linear phases and GC activation phases."""
    graph.validate()
    p = share_modulus(share_bits)
    bits = p.bit_length()
    gc_profile = gc_profile or load_profile("gc-bench")
    phases: List[Union[LinearPhase, NonLinearPhase]] = []
    checkpoints: List[Checkpoint] = []
    after_linear = False
    for layer in graph.layers:
        index = len(phases)
        if layer.is_linear:
            w, b = layer.matrix()
            m = padded_size(layer)
            if m > params.slots:
                raise CapacityError(f"layer {layer.in_size}->{layer.out_size} needs {m} slots, "
                                    f"{params.slots} available")
            program = diagonal_program(m)
            compiled = compile_he(program, params, profile)
            phases.append(LinearPhase(index, layer, w, b, m, program, compiled))
            checkpoints += [Checkpoint(index, s, PROTOCOL_STEPS[s]) for s in (1, 2, 3)]
            after_linear = True
            continue
        shift = weight_bits if after_linear else 0
        if layer.kind == "relu":
            circuit = _mod_relu(bits, p, shift)
            phase = NonLinearPhase(index, layer, circuit, layer.in_size, shift)
        else:
            windows = layer.windows()
            circuit = _mod_maxpool(len(windows[0]), bits, p, shift)
            phase = NonLinearPhase(index, layer, circuit, len(windows), shift, windows)
        phase.netlist = compile_netlist(circuit, gc_profile)
        phases.append(phase)
        checkpoints += [Checkpoint(index, s, PROTOCOL_STEPS[s]) for s in (4, 5, 6, 7)]
        after_linear = False
    logger.info("planned %s: %d phases, %d rotations, %d AND gates", graph.name, len(phases),
                len({k for ph in phases if isinstance(ph, LinearPhase) for k in ph.rotations}),
                sum(ph.circuit.and_count * ph.instances for ph in phases if isinstance(ph, NonLinearPhase)))
    return NetworkPlan(graph, params, p, frac_bits, weight_bits, phases, checkpoints)


@lru_cache(maxsize=16)
def _mod_relu(bits: int, p: int, shift: int) -> Circuit:
    return build_mod_relu_circuit(bits, p, shift)


@lru_cache(maxsize=16)
def _mod_maxpool(count: int, bits: int, p: int, shift: int) -> Circuit:
    return build_mod_maxpool_circuit(count, bits, p, shift)
