"""
IMC-Instruction Scheduler.

GC C-Insts flow through the OA-CAM dependency check and the C-Inst Bank and
are issued to the GC computing units; HE C-Insts skip both and are broadcast
to every core, which runs the same micro-program on its own coefficient.

Timing convention: an instruction issued in cycle t occupies its unit for
cycles [t, t + L - 1]. Its unit and OA-CAM entry are released at the start of
cycle t + L, or of cycle t + L - 1 when ``early_release`` is set.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .arith import Modulus, ModulusKind
from .config import ArchProfile, CalibrationConfig, DispatchConfig
from .errors import BackpressureError, CapacityError, DomainError
from .imc import CoreArray
from .isa import CInst, CInstKind
from .microcode import (
    LUT_WRITE_WORDS,
    MicroProgram,
    ModulusShape,
    gc_program,
    he_program,
    install_he,
    load_residues,
    store_residues,
)
from .rns import ntt_tables

logger = logging.getLogger(__name__)

DEFAULT_SHAPE = ModulusShape(ModulusKind.GENERAL, 30)


# ---------------------------------------------------------------------------
# OA-CAM and C-Inst Bank
# ---------------------------------------------------------------------------

class OaCam:
    """Output addresses of instructions that are executing or waiting.

    Entries are per instruction, so two pending writers of the same address
    keep two entries and the later one waits for the earlier (WAW).
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._writers: Dict[int, List[int]] = {}
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __contains__(self, addr: int) -> bool:
        return addr in self._writers

    @property
    def full(self) -> bool:
        return self._size >= self.capacity

    def insert(self, addr: int, seq: int) -> None:
        if self.full:
            raise BackpressureError(f"OA-CAM full ({self.capacity} entries)")
        self._writers.setdefault(addr, []).append(seq)
        self._size += 1

    def remove(self, addr: int, seq: int) -> None:
        writers = self._writers.get(addr)
        if not writers or seq not in writers:
            return
        writers.remove(seq)
        self._size -= 1
        if not writers:
            del self._writers[addr]

    def search(self, addr: int, before: int) -> bool:
        """True when an instruction older than ``before`` will write ``addr``."""
        return any(s < before for s in self._writers.get(addr, ()))


class CInstBank:
    """FIFO of C-Insts waiting on a dependency or a free unit."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._queue: Deque["ScheduleRecord"] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    def __iter__(self):
        return iter(list(self._queue))

    @property
    def full(self) -> bool:
        return len(self._queue) >= self.capacity

    def push(self, record: "ScheduleRecord") -> None:
        if self.full:
            raise BackpressureError(f"C-Inst bank full ({self.capacity} entries)")
        self._queue.append(record)

    def remove(self, record: "ScheduleRecord") -> None:
        self._queue.remove(record)


@dataclass(frozen=True)
class GcUnitConfig:
    units: int = 16
    cores_per_unit: int = 512

    def __post_init__(self):
        if self.units <= 0 or self.cores_per_unit <= 0:
            raise DomainError("unit and core counts must be positive")

    @property
    def cores(self) -> int:
        return self.units * self.cores_per_unit

    @classmethod
    def from_profile(cls, profile: ArchProfile) -> "GcUnitConfig":
        return cls(profile.gc_units, profile.cores_per_unit)


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ScheduleRecord:
    seq: int
    inst: CInst
    latency: int
    submit: int = 0
    issue: Optional[int] = None
    complete: Optional[int] = None
    unit: Optional[int] = None  # -1 marks a broadcast that held every unit
    banked: bool = False

    def to_dict(self) -> dict:
        return {
            "seq": self.seq, "kind": self.inst.kind.value,
            "rd": self.inst.rd, "rs1": self.inst.rs1, "rs2": self.inst.rs2,
            "latency": self.latency, "submit": self.submit, "issue": self.issue,
            "complete": self.complete, "unit": self.unit, "banked": self.banked,
        }


@dataclass
class ScheduleTrace:
    records: List[ScheduleRecord] = field(default_factory=list)
    units: int = 1
    events: List[dict] = field(default_factory=list)

    @property
    def total_cycles(self) -> int:
        done = [r.complete for r in self.records if r.complete is not None]
        return max(done) if done else 0

    def occupancy(self) -> Dict[int, List[Tuple[int, int, int]]]:
        """unit -> [(issue, complete, seq)] in issue order."""
        out: Dict[int, List[Tuple[int, int, int]]] = {u: [] for u in range(self.units)}
        for r in sorted(self.records, key=lambda r: (r.issue or 0, r.seq)):
            if r.issue is None:
                continue
            targets = range(self.units) if r.unit == -1 else [r.unit]
            for u in targets:
                out[u].append((r.issue, r.complete, r.seq))
        return out

    def utilization(self) -> List[float]:
        total = self.total_cycles
        if not total:
            return [0.0] * self.units
        return [sum(c - i + 1 for i, c, _ in spans) / total for spans in self.occupancy().values()]

    def by_seq(self, seq: int) -> ScheduleRecord:
        return self.records[seq]

    def write_jsonl(self, path: str) -> int:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        return len(self.records)


@dataclass
class CostReport:
    cycles: int = 0
    gc_cycles: int = 0
    he_cycles: int = 0
    update_cycles: int = 0
    energy_pj: float = 0.0
    instructions: int = 0
    frequency_hz: float = 1e9
    utilization: List[float] = field(default_factory=list)

    @property
    def latency_s(self) -> float:
        return self.cycles / self.frequency_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latency_s"] = self.latency_s
        return d


# ---------------------------------------------------------------------------
# Latency and energy per C-Inst
# ---------------------------------------------------------------------------

def program_energy_pj(program: MicroProgram, energy: Dict[str, float]) -> float:
    """Energy of one core running ``program`` once."""
    return _program_energy(program, tuple(sorted(energy.items())))


_ENERGY: Dict[tuple, float] = {}


def _program_energy(program: MicroProgram, energy: Tuple[Tuple[str, float], ...]) -> float:
    key = (program.kind, program.entry.name, energy)
    if key in _ENERGY:
        return _ENERGY[key]
    e = dict(energy)
    total = 0.0
    for mi, _ in program.steps():
        total += e.get("controller", 0.0)
        total += sum(1 for c in mi.cem if c.enable) * e.get("cem", 0.0)
        if mi.shifter_enable:
            total += e.get("shifter", 0.0)
        if mi.lut_enable:
            total += e.get("lut", 0.0)
    _ENERGY[key] = total
    return total


def cinst_outputs(inst: CInst) -> Tuple[int, ...]:
    """Rows an instruction writes; HALFGATE also writes its two table rows."""
    if inst.destination is None:
        return ()
    if inst.kind is CInstKind.HALFGATE:
        return tuple(inst.rd + 4 * i for i in range(3))
    return (inst.rd,)


def gc_latency(kind: CInstKind, config: DispatchConfig) -> int:
    if kind is CInstKind.FREEXOR:
        return config.freexor_cycles
    if kind is CInstKind.HALFGATE:
        return config.halfgate_cycles
    raise DomainError(f"{kind.value} does not run on a GC unit")


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

Executor = Callable[[ScheduleRecord], None]

FUNCTION_KINDS = (CInstKind.FREEXOR, CInstKind.HALFGATE, CInstKind.POLYADD, CInstKind.POLYSUB,
                  CInstKind.POLYPERM, CInstKind.POLYMUL, CInstKind.NTT, CInstKind.INTT)


class Dispatcher:
    """Cycle-stepped scheduler for GC C-Insts.

    ``tick`` opens the next cycle: completed instructions retire, then the
    bank is re-checked in FIFO order. ``submit`` admits the instruction the
    front end fetched in the current cycle.
    """

    def __init__(self, config: Optional[DispatchConfig] = None, executor: Optional[Executor] = None):
        self.config = config or DispatchConfig()
        self.oacam = OaCam(self.config.oacam_entries)
        self.bank = CInstBank(self.config.bank_entries)
        self.executor = executor
        self.cycle = 0
        self.trace = ScheduleTrace(units=self.config.units)
        self._unit_busy: List[Optional[ScheduleRecord]] = [None] * self.config.units
        self._readers: Dict[int, Set[int]] = {}
        self._running: List[ScheduleRecord] = []

    # -- state ------------------------------------------------------------

    @property
    def idle(self) -> bool:
        return not self._running and not len(self.bank)

    def free_units(self) -> List[int]:
        return [u for u, r in enumerate(self._unit_busy) if r is None]

    def _release_cycle(self, r: ScheduleRecord) -> int:
        return r.complete if self.config.early_release else r.complete + 1

    def _hazard(self, r: ScheduleRecord) -> Optional[str]:
        for src in r.inst.sources:
            if self.oacam.search(src, r.seq):
                return f"RAW on {src:#x}"
        for dst in cinst_outputs(r.inst):
            if self.oacam.search(dst, r.seq):
                return f"WAW on {dst:#x}"
            if any(s < r.seq for s in self._readers.get(dst, ())):
                return f"WAR on {dst:#x}"
        return None

    # -- per-cycle operation ----------------------------------------------

    def tick(self) -> List[dict]:
        self.cycle += 1
        events: List[dict] = []
        for r in list(self._running):
            if self._release_cycle(r) <= self.cycle:
                self._retire(r)
                events.append({"cycle": self.cycle, "event": "retire", "seq": r.seq, "unit": r.unit})
        for r in self.bank:
            if not self.free_units():
                break
            if self._hazard(r) is None:
                self.bank.remove(r)
                events.append(self._issue(r))
        self.trace.events.extend(events)
        return events

    def submit(self, inst: CInst) -> ScheduleRecord:
        """Admit one fetched C-Inst in the current cycle; issue it or bank it."""
        if not inst.kind.is_gc:
            raise DomainError(f"{inst.kind.value} bypasses the OA-CAM; use he_broadcast")
        if self.bank.full:
            raise BackpressureError(f"C-Inst bank full ({self.bank.capacity} entries)")
        if self.oacam.full:
            raise BackpressureError(f"OA-CAM full ({self.oacam.capacity} entries)")
        r = ScheduleRecord(len(self.trace.records), inst, gc_latency(inst.kind, self.config), submit=self.cycle)
        self.trace.records.append(r)
        hazard = self._hazard(r)
        for dst in cinst_outputs(inst):
            self.oacam.insert(dst, r.seq)
        for src in inst.sources:
            self._readers.setdefault(src, set()).add(r.seq)
        if hazard is None and self.free_units():
            self.trace.events.append(self._issue(r))
        else:
            r.banked = True
            self.bank.push(r)
            logger.debug("cycle %d: %s banked (%s)", self.cycle, inst, hazard or "no free unit")
            self.trace.events.append({"cycle": self.cycle, "event": "bank", "seq": r.seq,
                                      "reason": hazard or "busy"})
        return r

    def _issue(self, r: ScheduleRecord) -> dict:
        unit = self.free_units()[0]
        r.unit, r.issue = unit, self.cycle
        r.complete = self.cycle + r.latency - 1
        self._unit_busy[unit] = r
        self._running.append(r)
        if self.executor is not None:
            self.executor(r)
        return {"cycle": self.cycle, "event": "issue", "seq": r.seq, "unit": unit}

    def _retire(self, r: ScheduleRecord) -> None:
        self._running.remove(r)
        self._unit_busy[r.unit] = None
        for dst in cinst_outputs(r.inst):
            self.oacam.remove(dst, r.seq)
        for src in r.inst.sources:
            readers = self._readers.get(src)
            if readers is not None:
                readers.discard(r.seq)
                if not readers:
                    del self._readers[src]

    def drain(self) -> None:
        while not self.idle:
            self.tick()

    def hold_all(self, inst: CInst, cycles: int) -> ScheduleRecord:
        """Occupy every unit for ``cycles`` starting next cycle (broadcast barrier)."""
        self.drain()
        self.cycle += 1
        r = ScheduleRecord(len(self.trace.records), inst, cycles, submit=self.cycle, issue=self.cycle,
                           complete=self.cycle + cycles - 1, unit=-1)
        self.trace.records.append(r)
        self.trace.events.append({"cycle": self.cycle, "event": "broadcast", "seq": r.seq, "cycles": cycles})
        self.cycle = r.complete
        return r


# ---------------------------------------------------------------------------
# HE broadcast
# ---------------------------------------------------------------------------

def broadcast_passes(n: int, cores: int) -> int:
    if n <= 0 or cores <= 0:
        raise DomainError("coefficient and core counts must be positive")
    return math.ceil(n / cores)


def he_broadcast(inst: CInst, n: int, shape: Optional[ModulusShape] = None,
                 profile: Optional[ArchProfile] = None, core: Optional[CoreArray] = None) -> int:
    """Cycles of one HE C-Inst over an N-coefficient polynomial.

    Every core runs the program on its own coefficient; N above the core count
    falls back to ceil(N / cores) serial passes. With ``core`` given, the
    program also runs functionally on that array.
    """
    if not inst.kind.is_he:
        raise DomainError(f"{inst.kind.value} is not an HE instruction")
    profile = profile or (core.profile if core is not None else ArchProfile())
    if core is not None:
        program = core.uim.get(inst.kind)
        if program is None:
            raise DomainError(f"no micro-program loaded for {inst.kind.value}")
        core.run_cinst(inst)
    else:
        program = he_program(inst.kind, shape or DEFAULT_SHAPE)
    passes = broadcast_passes(n, profile.cores)
    if passes > 1:
        logger.debug("%s over N=%d on %d cores: %d passes", inst.kind.value, n, profile.cores, passes)
    return program.length * passes


# ---------------------------------------------------------------------------
# NTT on N/2 cores
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Butterfly:
    core: int
    x: int  # coefficient index of the upper input
    y: int
    twiddle: int  # index into the bit-reversed power table


@dataclass
class NttStage:
    index: int
    half: int  # distance between the two inputs of a butterfly
    butterflies: List[Butterfly]
    moves_in: int
    moves_out: int
    compute_cycles: int
    move_cycles: int

    @property
    def cycles(self) -> int:
        return self.compute_cycles + self.move_cycles


@dataclass
class NttPlan:
    n: int
    cores: int
    direction: str
    stages: List[NttStage]
    scale_cycles: int = 0
    concurrent: int = 1  # transforms running side by side on disjoint core halves

    @property
    def cycles(self) -> int:
        return sum(s.cycles for s in self.stages) + self.scale_cycles

    @property
    def cores_used(self) -> int:
        return self.n // 2

    def to_dict(self) -> dict:
        return {
            "n": self.n, "cores": self.cores, "direction": self.direction, "cycles": self.cycles,
            "concurrent": self.concurrent, "scale_cycles": self.scale_cycles,
            "stages": [{"index": s.index, "half": s.half, "moves_in": s.moves_in, "moves_out": s.moves_out,
                        "compute_cycles": s.compute_cycles, "move_cycles": s.move_cycles}
                       for s in self.stages],
        }


def _forward_pairs(n: int, half: int) -> List[Butterfly]:
    m = n // (2 * half)
    return [Butterfly(p, (p // half) * 2 * half + p % half, (p // half) * 2 * half + p % half + half, m + p // half)
            for p in range(n // 2)]


def _inverse_pairs(n: int, half: int) -> List[Butterfly]:
    h = n // (2 * half)
    return [Butterfly(p, (p // half) * 2 * half + p % half, (p // half) * 2 * half + p % half + half, h + p // half)
            for p in range(n // 2)]


def ntt_schedule(n: int, cores: int, direction: str = "forward", transforms: int = 1,
                 shape: Optional[ModulusShape] = None, hop_cycles: int = 1) -> NttPlan:
    """Stage plan of a negacyclic NTT (or inverse) on N/2 cores.

    Coefficient i lives on core i. In every stage butterfly p runs on core p;
    inputs not already there are moved in over the shared bus and the second
    output is moved back to its home core, ``hop_cycles`` per row moved.
    """
    if n < 2 or n & (n - 1):
        raise DomainError(f"NTT length must be a power of two, got {n}")
    if cores < n // 2:
        raise CapacityError(f"an N={n} transform needs {n // 2} cores, {cores} available")
    if transforms not in (1, 2):
        raise DomainError("one or two transforms per schedule")
    if transforms == 2 and cores < n:
        raise CapacityError(f"two concurrent N={n} transforms need {n} cores, {cores} available")
    forward = direction.lower() == "forward"
    kind = CInstKind.NTT if forward else CInstKind.INTT
    shape = shape or DEFAULT_SHAPE
    compute = he_program(kind, shape).length
    logn = n.bit_length() - 1
    halves = [n >> (s + 1) for s in range(logn)] if forward else [1 << s for s in range(logn)]
    stages = []
    for index, half in enumerate(halves):
        bfs = _forward_pairs(n, half) if forward else _inverse_pairs(n, half)
        moves_in = sum((b.x != b.core) + (b.y != b.core) for b in bfs)
        stages.append(NttStage(index, half, bfs, moves_in, moves_in, compute, hop_cycles * 2 * moves_in))
    scale = 0 if forward else he_program(CInstKind.POLYMUL, shape).length * broadcast_passes(n, n // 2)
    return NttPlan(n, cores, "forward" if forward else "inverse", stages, scale, transforms)


NTT_X, NTT_Y, NTT_W = 224, 228, 232


def run_ntt(plan: NttPlan, residues: np.ndarray, moduli: Sequence[Modulus],
            profile: Optional[ArchProfile] = None, calibration: Optional[CalibrationConfig] = None
            ) -> Tuple[np.ndarray, int]:
    """Execute ``plan`` on an N/2-core array; residues[limb, coefficient] in, same layout out."""
    n = plan.n
    data = np.array(residues, dtype=np.uint64).reshape(len(moduli), n)
    core = CoreArray(profile, cores=n // 2, calibration=calibration)
    forward = plan.direction == "forward"
    kind = CInstKind.NTT if forward else CInstKind.INTT
    install_he(core, moduli, kinds=(kind, CInstKind.POLYMUL))
    tables = [ntt_tables(m.value, n) for m in moduli]
    powers = [t.psi_rev if forward else t.psi_inv_rev for t in tables]
    inst = CInst(kind, rd=NTT_X, rs1=NTT_Y, rs2=NTT_W)
    cycles = 0
    for stage in plan.stages:
        xi = np.array([b.x for b in stage.butterflies])
        yi = np.array([b.y for b in stage.butterflies])
        wi = np.array([b.twiddle for b in stage.butterflies])
        store_residues(core, NTT_X, data[:, xi])
        store_residues(core, NTT_Y, data[:, yi])
        store_residues(core, NTT_W, np.stack([np.asarray(p, dtype=np.uint64)[wi] for p in powers]))
        core.run_cinst(inst)
        data[:, xi] = load_residues(core, NTT_X, len(moduli))
        data[:, yi] = load_residues(core, NTT_Y, len(moduli))
        cycles += stage.cycles
    if not forward:
        scale = CInst(CInstKind.POLYMUL, rd=NTT_X, rs1=NTT_X, rs2=NTT_W)
        ninv = np.array([[t.n_inv] * (n // 2) for t in tables], dtype=np.uint64)
        for part in range(2):
            cols = slice(part * (n // 2), (part + 1) * (n // 2))
            store_residues(core, NTT_X, data[:, cols])
            store_residues(core, NTT_W, ninv)
            core.run_cinst(scale)
            data[:, cols] = load_residues(core, NTT_X, len(moduli))
        cycles += plan.scale_cycles
    return data, cycles


# ---------------------------------------------------------------------------
# Whole streams
# ---------------------------------------------------------------------------

def _barrier_cycles(inst: CInst, n: int, shape: Optional[ModulusShape], profile: ArchProfile,
                    core: Optional[CoreArray]) -> int:
    if inst.kind.is_he:
        return he_broadcast(inst, n, shape, profile, core)
    if inst.kind is CInstKind.LUT_WRITE:
        return LUT_WRITE_WORDS
    # UIM_WRITE: rs1 indexes FUNCTION_KINDS; the target program's stored words are broadcast
    if inst.rs1 >= len(FUNCTION_KINDS):
        raise DomainError(f"UIM_WRITE target {inst.rs1} is not a function instruction")
    target = FUNCTION_KINDS[inst.rs1]
    program = gc_program(target) if target.is_gc else he_program(
        target, shape or DEFAULT_SHAPE)
    return program.stored_words


def run_program(instructions: Iterable[CInst], config: Optional[DispatchConfig] = None,
                profile: Optional[ArchProfile] = None, executor: Optional[Executor] = None,
                he_n: Optional[int] = None, shape: Optional[ModulusShape] = None,
                he_core: Optional[CoreArray] = None,
                calibration: Optional[CalibrationConfig] = None) -> Tuple[ScheduleTrace, CostReport]:
    """Dispatch a C-Inst stream; one instruction is fetched per cycle.

    GC instructions go through the OA-CAM and bank; HE and update
    instructions drain the units and then hold all of them.
    """
    config = config or DispatchConfig()
    profile = profile or ArchProfile()
    energy = (calibration or CalibrationConfig.load()).energy_pj
    he_n = he_n or profile.cores
    d = Dispatcher(config, executor)
    report = CostReport(frequency_hz=profile.frequency_hz)
    pending = deque(instructions)
    stalls = 0
    while pending:
        inst = pending[0]
        if not inst.kind.is_gc:
            cycles = _barrier_cycles(inst, he_n, shape, profile, he_core)
            d.hold_all(inst, cycles)
            pending.popleft()
            if inst.kind.is_he:
                report.he_cycles += cycles
                prog = he_core.uim[inst.kind] if he_core is not None else he_program(
                    inst.kind, shape or DEFAULT_SHAPE)
                report.energy_pj += program_energy_pj(prog, energy) * min(he_n, profile.cores) \
                    * broadcast_passes(he_n, profile.cores)
            else:
                report.update_cycles += cycles
            continue
        d.tick()
        try:
            d.submit(inst)
        except BackpressureError:
            stalls += 1
            continue
        pending.popleft()
        report.energy_pj += program_energy_pj(gc_program(inst.kind), energy)
    d.drain()
    trace = d.trace
    report.cycles = trace.total_cycles
    report.gc_cycles = report.cycles - report.he_cycles - report.update_cycles
    report.instructions = len(trace.records)
    report.utilization = trace.utilization()
    if stalls:
        logger.info("front end stalled %d cycles on a full bank or OA-CAM", stalls)
    return trace, report


def list_schedule(instructions: Sequence[CInst], units: int, latencies: Optional[Dict[CInstKind, int]] = None,
                  early_release: bool = False) -> List[Tuple[int, int]]:
    """Reference list scheduler for GC streams: (issue, complete) per instruction.

    Instruction i arrives in cycle i + 1; each cycle the oldest ready arrivals
    take the free units. Conflicts against any older instruction (RAW, WAW,
    WAR) block until that instruction has released.
    """
    latencies = latencies or {CInstKind.FREEXOR: 3, CInstKind.HALFGATE: 45}
    n = len(instructions)
    issue: List[Optional[int]] = [None] * n
    complete: List[Optional[int]] = [None] * n
    release: List[Optional[int]] = [None] * n
    conflicts = []
    for i, a in enumerate(instructions):
        deps = []
        for j in range(i):
            b = instructions[j]
            outs_a, outs_b = set(cinst_outputs(a)), set(cinst_outputs(b))
            raw = bool(outs_b & set(a.sources))
            waw = bool(outs_b & outs_a)
            war = bool(outs_a & set(b.sources))
            if raw or waw or war:
                deps.append(j)
        conflicts.append(deps)
    t = 0
    while any(x is None for x in issue):
        t += 1
        busy = sum(1 for j in range(n) if issue[j] is not None and release[j] > t)
        free = units - busy
        for i in range(min(t, n)):
            if free == 0:
                break
            if issue[i] is not None:
                continue
            if all(issue[j] is not None and release[j] <= t for j in conflicts[i]):
                issue[i] = t
                complete[i] = t + latencies[instructions[i].kind] - 1
                release[i] = complete[i] if early_release else complete[i] + 1
                free -= 1
    return list(zip(issue, complete))


def to_dot(instructions: Sequence[CInst], name: str = "cinsts") -> str:
    """Graphviz DOT of the RAW dependencies; FREEXOR nodes are filled black."""
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    last_writer: Dict[int, int] = {}
    for i, inst in enumerate(instructions):
        style = ' style=filled fillcolor=black fontcolor=white' if inst.kind is CInstKind.FREEXOR else ""
        lines.append(f'  i{i} [label="{i}: {inst.kind.value}\\nw={inst.rd:#x}"{style}];')
        for src in dict.fromkeys(inst.sources):
            if src in last_writer:
                lines.append(f"  i{last_writer[src]} -> i{i};")
        for dst in cinst_outputs(inst):
            last_writer[dst] = i
    lines.append("}")
    return "\n".join(lines) + "\n"
