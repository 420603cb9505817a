import json

import numpy as np
import pytest

from src.ppimce.circuits import benchmark
from src.ppimce.ckks import encode, encrypt, keygen
from src.ppimce.compiler import (
    HeMachine, HeOp, HeOpKind, HeProgram, LayerGraph, LinearPhase, NonLinearPhase, StepKind, compile_he,
    compile_netlist, compile_network, diagonals, evaluate_he, load_model, share_modulus, simulate_garble,
)
from src.ppimce.config import DispatchConfig, load_profile
from src.ppimce.dispatcher import run_program
from src.ppimce.errors import CapacityError, DomainError, LevelError
from src.ppimce.garble import garble
from src.ppimce.isa import CInstKind


class TestNetlist:
    def test_single_and(self, profile):
        compiled = compile_netlist(benchmark("and"), profile)
        assert [inst.kind for inst in compiled.stream] == [CInstKind.HALFGATE]
        assert compiled.and_count == 1
        assert compiled.tweak(0) == 0

    def test_serial_cost_matches_dispatch(self, profile):
        circuit = benchmark("relu32")
        compiled = compile_netlist(circuit, profile)
        config = DispatchConfig(units=1)
        _, cost = run_program(compiled.stream, config, profile)
        assert cost.cycles == compiled.gc_cycles(config)
        assert cost.cycles == 3 * (len(circuit.gates) - circuit.and_count) + 45 * circuit.and_count

    def test_aes_capacity(self, profile):
        with pytest.raises(CapacityError) as err:
            compile_netlist(benchmark("aes128"), profile)
        assert "gc-bench" in str(err.value)
        compiled = compile_netlist(benchmark("aes128"), load_profile("gc-bench"))
        assert compiled.and_count == benchmark("aes128").and_count

    def test_outputs_stay_resident(self, profile):
        circuit = benchmark("adder4")
        compiled = compile_netlist(circuit, profile)
        addrs = [compiled.address_map.address(w) for w in circuit.output_wires]
        assert len(set(addrs)) == len(addrs)

    def test_simulated_garbling_matches_library(self, profile):
        circuit = benchmark("relu8")
        sim = simulate_garble(circuit, rng=np.random.default_rng(9), profile=profile)
        gc, enc = garble(circuit, rng=np.random.default_rng(9))
        assert sim.garbled.tables == gc.tables
        assert sim.garbled.decode_bits == gc.decode_bits
        assert sim.encoding.output_zero == enc.output_zero
        assert sim.report.cycles > 0


def _ct_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.c0.channels + a.c1.channels, b.c0.channels + b.c1.channels))


class TestHeCompiler:
    def test_single_add(self, toy_params):
        program = HeProgram([HeOp(HeOpKind.ADD, "c", "a", "b")], ("a", "b"))
        compiled = compile_he(program, toy_params)
        assert [s.kind for s in compiled.steps] == [StepKind.CINST, StepKind.CINST]
        assert compiled.count(CInstKind.POLYADD) == 2
        assert compiled.levels["c"] == toy_params.levels

    def test_mul_consumes_level(self, toy_params):
        program = HeProgram([HeOp(HeOpKind.MUL, "c", "a", "b")], ("a", "b"))
        compiled = compile_he(program, toy_params)
        assert compiled.levels["c"] == toy_params.levels - 1
        assert compiled.count(StepKind.NTT) > 0 and compiled.count(StepKind.INTT) > 0

    def test_level_errors(self, toy_params):
        with pytest.raises(LevelError):
            compile_he(HeProgram([HeOp(HeOpKind.MUL, "c", "a", "a")], ("a",), levels={"a": 1}), toy_params)
        with pytest.raises(LevelError):
            compile_he(HeProgram([HeOp(HeOpKind.RESCALE, "c", "a")], ("a",), levels={"a": 1}), toy_params)
        with pytest.raises(LevelError):
            compile_he(HeProgram([HeOp(HeOpKind.ADD, "c", "a", "b")], ("a", "b"), levels={"b": 2}), toy_params)

    def test_undefined_register(self, toy_params):
        with pytest.raises(DomainError):
            compile_he(HeProgram([HeOp(HeOpKind.ADD, "c", "a", "zz")], ("a",)), toy_params)

    @pytest.mark.parametrize("program", [
        HeProgram([HeOp(HeOpKind.ADD, "out", "a", "b")], ("a", "b")),
        HeProgram([HeOp(HeOpKind.SUB, "out", "a", "b")], ("a", "b")),
        HeProgram([HeOp(HeOpKind.MUL, "out", "a", "b")], ("a", "b")),
        HeProgram([HeOp(HeOpKind.ROTATE, "out", "a", k=1)], ("a", "b")),
        HeProgram([HeOp(HeOpKind.MUL_PLAIN, "t", "a", "w"), HeOp(HeOpKind.RESCALE, "out", "t")], ("a", "b"), ("w",)),
    ], ids=["add", "sub", "mul", "rotate", "mulplain-rescale"])
    def test_machine_matches_library(self, program, toy_params, rng):
        keys = keygen(toy_params, rng, rotations=program.rotations())
        inputs = {
            "a": encrypt(encode(rng.uniform(-1, 1, toy_params.slots), toy_params), keys, rng),
            "b": encrypt(encode(rng.uniform(-1, 1, toy_params.slots), toy_params), keys, rng),
        }
        for name in program.plaintexts:
            inputs[name] = encode(rng.uniform(-1, 1, toy_params.slots), toy_params)
        compiled = compile_he(program, toy_params)
        machine = HeMachine(toy_params)
        got = machine.run(compiled, inputs, keys)["out"]
        want = evaluate_he(program, inputs, keys)["out"]
        assert _ct_equal(got, want)
        assert got.scale == pytest.approx(want.scale)
        assert machine.cycles == compiled.cycles


class TestNetworkPlan:
    def _mlp(self, rng):
        return LayerGraph.mlp([rng.uniform(-1, 1, (8, 8)), rng.uniform(-1, 1, (2, 8))])

    def test_phases(self, toy_params, rng):
        plan = compile_network(self._mlp(rng), toy_params)
        kinds = [type(p) for p in plan.phases]
        assert kinds == [LinearPhase, NonLinearPhase, LinearPhase]
        relu = plan.phases[1]
        assert relu.instances == 8
        assert relu.shift == 7
        assert plan.modulus == share_modulus(20)
        assert plan.rotations == list(range(1, 8))
        assert [c.step for c in plan.checkpoints] == [1, 2, 3, 4, 5, 6, 7, 1, 2, 3]

    def test_gc_cycles_per_instance_group(self, toy_params, rng):
        relu = compile_network(self._mlp(rng), toy_params).phases[1]
        one = relu.gc_cycles(DispatchConfig(units=1))
        assert relu.gc_cycles(DispatchConfig(units=8)) * 8 == one
        assert relu.gc_cycles(DispatchConfig(units=3)) * 8 == one * 3

    def test_too_wide_for_slots(self, toy_params, rng):
        graph = LayerGraph.mlp([rng.uniform(-1, 1, (4, 12))])
        with pytest.raises(CapacityError):
            compile_network(graph, toy_params)

    def test_diagonals_reproduce_product(self, rng):
        w = rng.uniform(-1, 1, (3, 4))
        x = rng.uniform(-1, 1, 4)
        m, slots = 4, 8
        xs = np.resize(np.pad(x, (0, m - 4)), slots)
        acc = sum(d * np.roll(xs, -i) for i, d in enumerate(diagonals(w, m, slots)))
        assert np.allclose(acc[:3], w @ x)

    def test_share_modulus(self):
        assert share_modulus(20) == 1048573
        assert share_modulus(32) == (1 << 32) - 5

    @pytest.mark.parametrize("bits", [1, 33, 40])
    def test_share_bits_beyond_word_rejected(self, toy_params, rng, bits):
        with pytest.raises(DomainError):
            compile_network(self._mlp(rng), toy_params, share_bits=bits)


class TestModelLoading:
    def test_fc_with_raw_weights(self, tmp_path):
        np.arange(8, dtype="<f4").tofile(tmp_path / "w.bin")
        descriptor = {
            "name": "tiny",
            "layers": [
                {"kind": "fc", "shape": [4, 2], "weights": {"file": "w.bin"}, "bias": [0.5, -0.5]},
                {"kind": "relu"},
            ],
        }
        path = tmp_path / "model.json"
        path.write_text(json.dumps(descriptor))
        graph = load_model(str(path))
        assert graph.name == "tiny"
        assert graph.input_size == 4 and graph.output_size == 2
        w, b = graph.layers[0].matrix()
        assert np.array_equal(w, np.arange(8).reshape(2, 4))
        assert list(b) == [0.5, -0.5]

    def test_conv_and_maxpool(self, tmp_path):
        kernel = np.zeros((2, 1, 3, 3))
        kernel[:, 0, 1, 1] = 1.0
        descriptor = {
            "input_shape": [1, 4, 4],
            "layers": [
                {"kind": "conv", "shape": [2, 1, 3], "padding": 1, "weights": kernel.ravel().tolist()},
                {"kind": "maxpool", "pool": 2},
            ],
        }
        path = tmp_path / "cnn.json"
        path.write_text(json.dumps(descriptor))
        graph = load_model(str(path))
        conv, pool = graph.layers
        assert conv.out_shape == (2, 4, 4)
        w, _ = conv.matrix()
        assert np.array_equal(w, np.vstack([np.eye(16), np.eye(16)]))
        assert pool.out_shape == (2, 2, 2)
        assert len(pool.windows()) == 8
        assert pool.windows()[0] == [0, 1, 4, 5]

    def test_short_weight_file(self, tmp_path):
        np.arange(3, dtype="<f4").tofile(tmp_path / "w.bin")
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"layers": [{"kind": "fc", "shape": [4, 2], "weights": "w.bin"}]}))
        with pytest.raises(DomainError):
            load_model(str(path))
