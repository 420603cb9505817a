import json

import numpy as np
import pytest

from src.ppimce.ckks import keygen, preset
from src.ppimce.compiler import Layer, LayerGraph, compile_network
from src.ppimce.config import ProtocolConfig
from src.ppimce.errors import DecodeError, DomainError, ProtocolError
from src.ppimce.protocol import (
    FRAME, PHASE_OF, PHASES, PREPROCESSING, Channel, Client, CommLedger, MessageKind, ProtocolMessage, Role, Server,
    centered, ideal_ot, load_bandwidths, plaintext_inference, public_plan, read_transcript, run_inference,
    run_inference_async,
)


@pytest.fixture
def ring():
    # share sums reach 2^20 before reduction; a 26-bit scale keeps the products below Q/2
    return preset("toy", scale_bits=26)


def _identity_relu(n=4):
    return LayerGraph([Layer("fc", (n,), (n,), np.eye(n)), Layer("relu", (n,), (n,))], name="id-relu")


class TestInference:
    def test_identity_relu(self, ring):
        x = np.array([0.5, -0.25, 1.0, -1.0])
        result = run_inference(_identity_relu(), x, ProtocolConfig(), params=ring,
                               rng=np.random.default_rng(3))
        assert np.array_equal(result.output, [0.5, 0.0, 1.0, 0.0])
        assert np.array_equal(result.output, result.reference)

    def test_negative_inputs_clamp(self, ring):
        x = -np.array([0.125, 0.5, 0.75, 1.5])
        result = run_inference(_identity_relu(), x, ProtocolConfig(), params=ring,
                               rng=np.random.default_rng(4))
        assert np.array_equal(result.output, np.zeros(4))

    def test_shares_reconstruct_intermediates(self, ring):
        x = np.array([0.5, -0.25, 1.0, -1.0])
        result = run_inference(_identity_relu(), x, ProtocolConfig(), params=ring,
                               rng=np.random.default_rng(5))
        p = result.plan.modulus
        (_, c0), (_, c1) = result.client_checkpoints
        (_, s0), (_, s1) = result.server_checkpoints
        q = np.rint(x * 2 ** 8).astype(np.int64) * 2 ** 7
        assert np.array_equal(centered(c0 + s0, p), q)
        assert np.array_equal(centered(c1 + s1, p), np.maximum(q, 0) >> 7)

    @pytest.mark.asyncio
    async def test_mlp_tracks_plaintext(self, ring):
        rng = np.random.default_rng(11)
        graph = LayerGraph.mlp([rng.uniform(-0.5, 0.5, (4, 8)), rng.uniform(-0.5, 0.5, (2, 4))],
                               [rng.uniform(-0.25, 0.25, 4), rng.uniform(-0.25, 0.25, 2)])
        x = rng.uniform(-1, 1, 8)
        result = await run_inference_async(graph, x, ProtocolConfig(), params=ring, rng=rng)
        assert np.allclose(result.output, result.reference)
        assert np.max(np.abs(result.output - plaintext_inference(graph, x))) < 0.25
        assert result.report.he_cycles > 0 and result.report.gc_cycles > 0

    @pytest.mark.slow
    @pytest.mark.asyncio
    async def test_mlp_argmax_hundred_inputs(self, ring):
        rng = np.random.default_rng(11)
        graph = LayerGraph.mlp([rng.uniform(-0.5, 0.5, (4, 8)), rng.uniform(-0.5, 0.5, (2, 4))],
                               [rng.uniform(-0.25, 0.25, 4), rng.uniform(-0.25, 0.25, 2)])
        config = ProtocolConfig()
        plan = compile_network(graph, ring, config.share_bits, config.frac_bits, config.weight_bits)
        mismatches = []
        for i in range(100):
            x = rng.uniform(-1, 1, 8)
            result = await run_inference_async(plan, x, config, rng=rng)
            if result.prediction != int(np.argmax(plaintext_inference(graph, x))):
                mismatches.append(i)
        assert mismatches == []

    def test_conv_maxpool(self):
        params = preset("toy", degree=64, scale_bits=26)
        graph = LayerGraph([
            Layer("conv", (1, 4, 4), (1, 4, 4), np.ones((1, 1, 1, 1))),
            Layer("maxpool", (1, 4, 4), (1, 2, 2), pool=2),
        ], name="conv-pool")
        x = np.arange(16) / 16 - 0.5
        result = run_inference(graph, x, ProtocolConfig(), params=params, rng=np.random.default_rng(6))
        assert np.array_equal(result.output, plaintext_inference(graph, x))

    def test_wrong_input_size(self, ring):
        with pytest.raises(DomainError):
            run_inference(_identity_relu(), np.zeros(3), ProtocolConfig(), params=ring,
                          rng=np.random.default_rng(0))


class TestLedger:
    def test_conservation_against_transcript(self, ring, tmp_path):
        path = str(tmp_path / "run")
        config = ProtocolConfig(transcript_path=path)
        result = run_inference(_identity_relu(), np.array([0.5, -0.5, 0.25, 0.0]), config, params=ring,
                               rng=np.random.default_rng(7))
        ledger = result.ledger
        frames = read_transcript(path + ".client") + read_transcript(path + ".server")
        assert ledger.total == sum(ledger.counters[p] for p in PHASES)
        assert ledger.total == sum(FRAME.size + len(payload) for _, payload in frames)
        assert sum(ledger.messages.values()) == len(frames)
        tables = [payload for kind, payload in frames if kind is MessageKind.GARBLED_TABLES]
        assert ledger.counters[PREPROCESSING] == sum(FRAME.size + len(t) for t in tables)
        assert ledger.to_dict()["total_bytes"] == ledger.total
        # every message kind is sent and charged at least once
        assert {kind for kind, _ in frames} == set(MessageKind) == set(PHASE_OF)

    def test_latency(self):
        ledger = CommLedger()
        ledger.charge(ProtocolMessage(0, MessageKind.CT_UPLOAD, Role.CLIENT, bytes(995)))
        ledger.charge(ProtocolMessage(1, MessageKind.GARBLED_TABLES, Role.CLIENT, bytes(995)))
        assert ledger.online == 1000
        assert ledger.latency_s(8000) == pytest.approx(1.0)
        assert ledger.latency_s(8000, include_preprocessing=True) == pytest.approx(2.0)
        sweep = ledger.sweep([8000, 16000], compute_s=0.5)
        assert [row["total_s"] for row in sweep] == pytest.approx([1.5, 1.0])
        with pytest.raises(DomainError):
            ledger.latency_s(0)

    def test_unassigned_kind_rejected(self, tmp_path):
        path = tmp_path / "bad.server"
        path.write_bytes(FRAME.pack(0, 5))
        with pytest.raises(DecodeError):
            read_transcript(str(path))

    def test_truncated_transcript(self, tmp_path):
        path = tmp_path / "bad.client"
        path.write_bytes(FRAME.pack(10, int(MessageKind.CT_UPLOAD)) + b"abc")
        with pytest.raises(DecodeError):
            read_transcript(str(path))

    def test_bandwidth_file(self, tmp_path):
        path = tmp_path / "bw.json"
        path.write_text(json.dumps({"4G": 1e8, "5G": 2e10}))
        assert load_bandwidths(str(path)) == [1e8, 2e10]


class TestObliviousTransfer:
    def test_zero_choices(self, rng):
        pairs = [(1, 2), (3, 4), (5, 6)]
        labels, payload = ideal_ot(pairs, [0, 0, 0], rng)
        assert labels == [1, 3, 5]
        assert len(payload) == 3 * 32

    def test_random_choices(self, rng):
        pairs = [(int.from_bytes(rng.bytes(16), "little"), int.from_bytes(rng.bytes(16), "little"))
                 for _ in range(40)]
        choices = [int(c) for c in rng.integers(0, 2, 40)]
        labels, payload = ideal_ot(pairs, choices, rng, bytes_per_wire=48)
        assert labels == [pair[c] for pair, c in zip(pairs, choices)]
        assert len(payload) == 40 * 48

    def test_bad_arguments(self, rng):
        with pytest.raises(DomainError):
            ideal_ot([(1, 2)], [0, 1], rng)
        with pytest.raises(DomainError):
            ideal_ot([(1, 2)], [0], rng, bytes_per_wire=16)


class TestRoles:
    def test_server_rejects_secret_key(self, ring, rng):
        plan = compile_network(_identity_relu(), ring)
        keys = keygen(ring, rng)
        with pytest.raises(ProtocolError):
            Server(plan, keys, Channel(), ProtocolConfig(), rng)
        Server(plan, keys.public_view(), Channel(), ProtocolConfig(), rng)

    def test_client_rejects_weights(self, ring, rng):
        plan = compile_network(_identity_relu(), ring)
        keys = keygen(ring, rng)
        with pytest.raises(ProtocolError):
            Client(plan, keys, Channel(), ProtocolConfig(), rng)
        Client(public_plan(plan), keys, Channel(), ProtocolConfig(), rng)

    @pytest.mark.asyncio
    async def test_out_of_order_message(self):
        channel = Channel()
        await channel.send(Role.CLIENT, MessageKind.INPUT_LABELS, b"")
        with pytest.raises(ProtocolError):
            await channel.recv(Role.SERVER, MessageKind.CT_UPLOAD)
