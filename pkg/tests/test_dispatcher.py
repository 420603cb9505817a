import json

import numpy as np
import pytest

from src.ppimce.arith import Modulus, find_ntt_primes
from src.ppimce.config import ArchProfile, DispatchConfig
from src.ppimce.dispatcher import (
    DEFAULT_SHAPE, CInstBank, Dispatcher, GcUnitConfig, OaCam, broadcast_passes, he_broadcast, list_schedule,
    ntt_schedule,
    run_ntt, run_program, to_dot,
)
from src.ppimce.errors import BackpressureError, CapacityError, DomainError
from src.ppimce.isa import CInst, CInstKind
from src.ppimce.microcode import he_program
from src.ppimce.rns import RingParams, RnsPolynomial, ntt

FX, HG = CInstKind.FREEXOR, CInstKind.HALFGATE
W0, W1, W2, W3, W4 = 0x100, 0x110, 0x120, 0x130, 0x140


def walkthrough():
    """Ia FreeXOR; Ib, Ic, Id, Ie Half-Gates; Ic reads w0, Id reads w1 and w0, Ie reads w2."""
    return [
        CInst(FX, W0, 0x200, 0x204),
        CInst(HG, W1, 0x208, 0x20C),
        CInst(HG, W2, W0, 0x200),
        CInst(HG, W3, W1, W0),
        CInst(HG, W4, W2, 0x204),
    ]


def independent_halfgates(n):
    return [CInst(HG, 0x1000 + 16 * i, 0x80000 + 8 * i, 0x80004 + 8 * i) for i in range(n)]


class TestStructures:
    def test_unit_config(self):
        assert GcUnitConfig().cores == 8192
        assert GcUnitConfig.from_profile(ArchProfile()).cores_per_unit == 512
        with pytest.raises(DomainError):
            GcUnitConfig(units=0)

    def test_oacam_per_instruction_entries(self):
        cam = OaCam(4)
        cam.insert(0x10, 0)
        cam.insert(0x10, 3)
        assert len(cam) == 2 and 0x10 in cam
        assert cam.search(0x10, before=3)
        cam.remove(0x10, 0)
        assert not cam.search(0x10, before=3)
        cam.remove(0x10, 3)
        assert 0x10 not in cam

    def test_bank_backpressure(self):
        bank = CInstBank(1)
        d = Dispatcher(DispatchConfig(units=1))
        bank.push(d.submit(CInst(FX, 0x10, 0x20, 0x24)))
        with pytest.raises(BackpressureError):
            bank.push(d.trace.records[0])

    def test_he_kind_rejected_by_submit(self):
        with pytest.raises(DomainError):
            Dispatcher().submit(CInst(CInstKind.POLYADD, 0, 0, 0))


class TestDispatch:
    def test_single_freexor(self):
        trace, cost = run_program([CInst(FX, 0x10, 0x20, 0x24)], DispatchConfig(units=1))
        assert cost.cycles == 3
        assert trace.records[0].issue == 1 and trace.records[0].complete == 3

    def test_walkthrough_trace(self, two_units):
        trace, _ = run_program(walkthrough(), two_units)
        ia, ib, ic, id_, ie = trace.records
        assert (ia.issue, ia.unit) == (1, 0)
        assert (ib.issue, ib.unit) == (2, 1)
        assert ic.banked and ic.submit == 3 and (ic.issue, ic.unit) == (4, 0)
        assert id_.banked and id_.submit == 4
        assert ie.banked and ie.submit == 5
        assert abs(ia.complete - 4) <= 1
        assert abs(ib.complete - 46) <= 1
        assert abs(ic.complete - 48) <= 1
        assert abs(id_.issue - 46) <= 1 and id_.unit == 1
        assert abs(ie.issue - 48) <= 1 and ie.unit == 0

    def test_walkthrough_early_release(self):
        trace, _ = run_program(walkthrough(), DispatchConfig(units=2, early_release=True))
        assert trace.records[3].issue == 46
        # Ia releases in its completion cycle, so Ic issues without waiting in the bank
        assert not trace.records[2].banked
        assert trace.records[4].issue == trace.records[2].complete

    def test_dependent_waits_for_producer(self):
        stream = [CInst(HG, 0x100, 0x10, 0x14), CInst(FX, 0x200, 0x100, 0x14)]
        trace, _ = run_program(stream, DispatchConfig(units=4))
        producer, consumer = trace.records
        assert consumer.banked
        assert consumer.issue > producer.complete

    def test_war_and_waw_serialize(self):
        stream = [CInst(HG, 0x100, 0x10, 0x14), CInst(FX, 0x10, 0x20, 0x24), CInst(FX, 0x100, 0x30, 0x34)]
        trace, _ = run_program(stream, DispatchConfig(units=4))
        first, war, waw = trace.records
        assert war.issue > first.complete
        assert waw.issue > first.complete

    def test_fifo_order_among_ready(self):
        stream = [CInst(FX, 0x100, 0x10, 0x14), CInst(FX, 0x110, 0x100, 0x14), CInst(FX, 0x120, 0x100, 0x14)]
        trace, _ = run_program(stream, DispatchConfig(units=1))
        assert trace.records[1].issue < trace.records[2].issue

    def test_freexor_chain(self):
        k = 10
        stream = [CInst(FX, 0x100 + 4 * (i + 1), 0x100 + 4 * i, 0x20) for i in range(k)]
        _, cost = run_program(stream, DispatchConfig(units=4))
        assert cost.cycles == 3 * k

    def test_empty_tick(self):
        d = Dispatcher()
        assert d.tick() == []

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_list_scheduler(self, seed):
        rng = np.random.default_rng(seed)
        addrs = [0x100 + 4 * i for i in range(12)]
        stream = []
        for _ in range(int(rng.integers(5, 21))):
            kind = HG if rng.integers(2) else FX
            rd = int(rng.choice(addrs[::3] if kind is HG else addrs))
            stream.append(CInst(kind, rd, int(rng.choice(addrs)), int(rng.choice(addrs))))
        units = int(rng.integers(1, 4))
        trace, _ = run_program(stream, DispatchConfig(units=units))
        got = [(r.issue, r.complete) for r in trace.records]
        assert got == list_schedule(stream, units)

    def test_unit_scaling(self):
        stream = independent_halfgates(512)
        _, one = run_program(stream, DispatchConfig(units=1))
        _, sixteen = run_program(stream, DispatchConfig(units=16))
        assert one.cycles == 45 * 512
        assert sixteen.cycles <= 45 * 32 + 16
        assert one.cycles / sixteen.cycles >= 14

    def test_bank_stall_does_not_drop(self):
        stream = independent_halfgates(8)
        trace, cost = run_program(stream, DispatchConfig(units=1, bank_entries=2))
        assert len(trace.records) == 8
        assert cost.cycles == 45 * 8

    def test_trace_export(self, tmp_path, two_units):
        trace, _ = run_program(walkthrough(), two_units)
        path = tmp_path / "trace.jsonl"
        assert trace.write_jsonl(str(path)) == 5
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert rows[2]["kind"] == "HALFGATE" and rows[2]["banked"]

    def test_dot_export(self):
        dot = to_dot(walkthrough())
        assert dot.startswith("digraph")
        assert "i0 -> i2;" in dot and "i1 -> i3;" in dot and "i2 -> i4;" in dot


class TestBroadcast:
    def test_lockstep_cycles(self):
        inst = CInst(CInstKind.POLYADD, 224, 228, 232)
        length = he_program(CInstKind.POLYADD, DEFAULT_SHAPE).length
        assert he_broadcast(inst, 8192) == length
        assert he_broadcast(inst, 1024) == length
        assert he_broadcast(inst, 16384) == 2 * length
        assert broadcast_passes(16384, 8192) == 2

    def test_gc_kind_rejected(self):
        with pytest.raises(DomainError):
            he_broadcast(CInst(FX, 0, 0, 0), 8)

    def test_barrier_holds_every_unit(self, two_units):
        stream = [CInst(FX, 0x100, 0x10, 0x14), CInst(CInstKind.POLYADD, 224, 228, 232),
                  CInst(FX, 0x110, 0x10, 0x14)]
        trace, cost = run_program(stream, two_units, he_n=16)
        fx, he, after = trace.records
        assert he.unit == -1 and he.issue > fx.complete
        assert after.issue > he.complete
        assert cost.he_cycles == he.latency
        assert cost.cycles == cost.gc_cycles + cost.he_cycles + cost.update_cycles


class TestNttSchedule:
    def test_worked_example(self):
        plan = ntt_schedule(4, 4)
        assert len(plan.stages) == 2
        first = plan.stages[0]
        assert [(b.core, b.x, b.y) for b in first.butterflies] == [(0, 0, 2), (1, 1, 3)]
        assert first.moves_in == 2
        assert plan.cores_used == 2

    def test_two_transforms(self):
        plan = ntt_schedule(4, 4, transforms=2)
        assert plan.concurrent == 2
        with pytest.raises(CapacityError):
            ntt_schedule(8, 4, transforms=2)

    def test_too_few_cores(self):
        with pytest.raises(CapacityError):
            ntt_schedule(16, 4)
        with pytest.raises(DomainError):
            ntt_schedule(12, 8)

    @pytest.mark.parametrize("n", [8, 32])
    def test_matches_library(self, rng, n):
        moduli = tuple(Modulus.general(q) for q in find_ntt_primes(30, n, 2))
        params = RingParams(n, moduli)
        coeffs = np.stack([rng.integers(0, m.value, n, dtype=np.uint64) for m in moduli])
        poly = RnsPolynomial(params, [c.copy() for c in coeffs], moduli)
        fwd = ntt(poly, "forward")
        got, cycles = run_ntt(ntt_schedule(n, n // 2), coeffs, moduli)
        assert cycles == ntt_schedule(n, n // 2).cycles
        for limb in range(len(moduli)):
            assert np.array_equal(got[limb], fwd.channels[limb])
        back, _ = run_ntt(ntt_schedule(n, n // 2, "inverse"), got, moduli)
        assert np.array_equal(back, coeffs)
