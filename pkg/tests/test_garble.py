import glob
import json
import os

import numpy as np
import pytest

from src.ppimce.aes import (
    SBOX, FixedKeyHash, aes_hash, blocks_from_ints, encrypt_block, encrypt_block_steps, encrypt_blocks, hash_blocks,
    ints_from_blocks,
)
from src.ppimce.circuits import (
    CORPUS_AND_COUNTS, GC_BENCH_CORPUS, CircuitBuilder, benchmark, bits_to_int, build_maxpool_circuit,
    build_mod_maxpool_circuit, build_mod_relu_circuit, emit_bristol, export_corpus, int_to_bits, load_circuit,
    parse_bristol,
)
from src.ppimce.errors import DecodeError, DomainError, ParseError
from src.ppimce.garble import (
    GarbleStats, GarbledCircuit, decode_outputs, encode_inputs, evaluate, evaluate_batch, garble, garbled_mismatches,
    random_delta, run_garbled,
)

FIPS_KEY = bytes(range(16))
FIPS_PLAINTEXT = bytes.fromhex("00112233445566778899aabbccddeeff")
FIPS_CIPHERTEXT = bytes.fromhex("69c4e0d86a7b0430d8cdb78070b4c55a")

MINIMAL_AND = "1 3\n2 1 1\n1 1\n\n2 1 0 1 2 AND\n"


class TestAes:
    def test_fips_vector(self):
        assert encrypt_block(FIPS_KEY, FIPS_PLAINTEXT) == FIPS_CIPHERTEXT
        assert encrypt_block_steps(FIPS_KEY, FIPS_PLAINTEXT) == FIPS_CIPHERTEXT

    def test_aes_circuit(self):
        circuit = benchmark("aes128")
        out = circuit.evaluate([int.from_bytes(FIPS_KEY, "little"), int.from_bytes(FIPS_PLAINTEXT, "little")])
        assert out == [int.from_bytes(FIPS_CIPHERTEXT, "little")]

    def test_aes_circuit_and_count(self):
        assert benchmark("aes128").and_count == 6400

    def test_sbox_all_inputs(self):
        cb = CircuitBuilder(name="sbox")
        cb.output(cb.sbox(cb.input(8)))
        circuit = cb.build()
        assert circuit.and_count == 32
        rows = np.array([int_to_bits(x, 8) for x in range(256)], dtype=np.uint8)
        out = circuit.evaluate_many(rows)
        assert [bits_to_int(row) for row in out.tolist()] == list(SBOX)

    def test_encrypt_blocks(self, rng):
        blocks = np.frombuffer(FIPS_PLAINTEXT + rng.bytes(16 * 7), dtype=np.uint8).reshape(-1, 16)
        out = encrypt_blocks(FIPS_KEY, blocks)
        assert out[0].tobytes() == FIPS_CIPHERTEXT
        for row, ct in zip(blocks, out):
            assert encrypt_block(FIPS_KEY, row.tobytes()) == ct.tobytes()

    def test_hash_blocks(self, rng):
        xs = [int.from_bytes(rng.bytes(16), "little") for _ in range(9)]
        tweaks = [int(t) for t in rng.integers(0, 1 << 40, 9)]
        hashed = ints_from_blocks(hash_blocks(blocks_from_ints(xs), blocks_from_ints(tweaks)))
        assert hashed == [aes_hash(x, t) for x, t in zip(xs, tweaks)]

    def test_hash_deterministic(self, rng):
        H = FixedKeyHash()
        x = int.from_bytes(rng.bytes(16), "little")
        assert H(x, 7) == H(x, 7) == aes_hash(x, 7)
        assert H(x, 7) != H(x, 8)
        assert H.calls == 4


class TestGarbling:
    @pytest.mark.parametrize("kind, fn", [("and", lambda a, b: a & b), ("xor", lambda a, b: a ^ b)])
    def test_single_gate_exhaustive(self, kind, fn, rng):
        circuit = benchmark(kind)
        for a in (0, 1):
            for b in (0, 1):
                assert run_garbled(circuit, [a, b], rng) == [fn(a, b)]

    def test_relu8_all_inputs(self, rng):
        circuit = benchmark("relu8")
        gc, enc = garble(circuit, rng=rng)
        for x in range(256):
            labels = encode_inputs(enc, int_to_bits(x, 8))
            out = bits_to_int(decode_outputs(gc, evaluate(gc, circuit, labels, enc.true_label)))
            assert out == (x if x < 128 else 0)

    def test_adder(self, rng):
        circuit = benchmark("adder4")
        for a, b in [(0, 0), (7, 9), (15, 15)]:
            bits = int_to_bits(a, 4) + int_to_bits(b, 4)
            assert bits_to_int(run_garbled(circuit, bits, rng)) == a + b

    def test_hamming(self, rng):
        circuit = benchmark("hamm50")
        a = int(rng.integers(0, 1 << 50, dtype=np.uint64))
        b = int(rng.integers(0, 1 << 50, dtype=np.uint64))
        bits = int_to_bits(a, 50) + int_to_bits(b, 50)
        assert bits_to_int(run_garbled(circuit, bits, rng)) == bin(a ^ b).count("1")

    def test_table_bytes(self, rng):
        circuit = benchmark("relu32")
        stats = GarbleStats()
        gc, _ = garble(circuit, rng=rng, stats=stats)
        assert gc.table_bytes == 32 * circuit.and_count
        assert stats.hash_calls == 4 * circuit.and_count
        assert stats.free_gates == len(circuit.gates) - circuit.and_count

    def test_delta_algebra(self, rng):
        circuit = benchmark("relu8")
        gc, enc = garble(circuit, rng=rng)
        assert enc.delta & 1
        for w in range(circuit.num_inputs):
            zero, one = enc.label_pair(w)
            assert zero ^ one == enc.delta
        # output semantics are carried by the point-and-permute bit
        assert decode_outputs(gc, enc.output_zero) == [0] * circuit.num_outputs
        assert decode_outputs(gc, [z ^ enc.delta for z in enc.output_zero]) == [1] * circuit.num_outputs

    def test_even_delta_rejected(self, rng):
        with pytest.raises(DomainError):
            garble(benchmark("and"), delta=2, rng=rng)
        assert random_delta(rng) & 1

    def test_same_seed_same_tables(self):
        circuit = benchmark("relu8")
        a, _ = garble(circuit, rng=np.random.default_rng(5))
        b, _ = garble(circuit, rng=np.random.default_rng(5))
        assert a.tables == b.tables

    def test_container(self, rng):
        gc, _ = garble(benchmark("relu8"), rng=rng)
        back = GarbledCircuit.from_bytes(gc.to_bytes())
        assert back.tables == gc.tables and back.decode_bits == gc.decode_bits
        with pytest.raises(DecodeError):
            GarbledCircuit.from_bytes(b"XXXX" + gc.to_bytes()[4:])

    def test_mismatched_table_rejected(self, rng):
        gc, enc = garble(benchmark("relu8"), rng=rng)
        other = benchmark("relu32")
        with pytest.raises(DecodeError):
            evaluate(gc, other, [0] * other.num_inputs, enc.true_label)


class TestBristol:
    def test_minimal(self):
        circuit = parse_bristol(MINIMAL_AND)
        assert circuit.stats()["and"] == 1
        assert circuit.evaluate([1, 1]) == [1]
        assert circuit.evaluate([1, 0]) == [0]

    def test_emit_parse(self):
        circuit = benchmark("adder4")
        back = parse_bristol(emit_bristol(circuit))
        for a, b in [(3, 5), (15, 1)]:
            assert back.evaluate([a, b]) == circuit.evaluate([a, b])

    def test_bad_arity(self):
        with pytest.raises(ParseError) as err:
            parse_bristol("1 3\n2 1 1\n1 1\n2 1 0 1 2 INV\n")
        assert err.value.line == 4

    def test_cycle(self):
        text = "2 4\n2 1 1\n1 1\n2 1 0 3 2 AND\n2 1 2 1 3 XOR\n"
        with pytest.raises(ParseError) as err:
            parse_bristol(text)
        assert "cyclic" in str(err.value)

    def test_gate_count_mismatch(self):
        with pytest.raises(ParseError):
            parse_bristol("2 3\n2 1 1\n1 1\n2 1 0 1 2 AND\n")

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "and.txt"
        path.write_text(MINIMAL_AND)
        assert load_circuit(str(path)).and_count == 1
        with pytest.raises(DomainError):
            load_circuit(str(tmp_path / "missing.txt"))


class TestModularCircuits:
    P = 257
    BITS = 10

    def _share(self, x, r):
        return (x - r) % self.P

    @pytest.mark.parametrize("x, r, c, expected", [
        (5, 3, 0, 5),
        (-5, 3, 0, 0),
        (5, 3, 2, 3),
        (-5, 200, 2, 255),
        (0, 0, 0, 0),
        (128, 17, 0, 128),
    ])
    def test_mod_relu(self, x, r, c, expected):
        circuit = build_mod_relu_circuit(self.BITS, self.P)
        assert circuit.evaluate([self._share(x, r), r, c]) == [expected]

    def test_mod_relu_truncation(self):
        circuit = build_mod_relu_circuit(self.BITS, self.P, shift=1)
        assert circuit.evaluate([self._share(10, 4), 4, 0]) == [5]

    def test_mod_relu_garbled(self, rng):
        circuit = build_mod_relu_circuit(self.BITS, self.P)
        bits = int_to_bits(self._share(7, 99), self.BITS) + int_to_bits(99, self.BITS) + int_to_bits(3, self.BITS)
        assert bits_to_int(run_garbled(circuit, bits, rng)) == 4

    def test_mod_relu_domain(self):
        with pytest.raises(DomainError):
            build_mod_relu_circuit(8, self.P)

    def test_mod_maxpool(self):
        circuit = build_mod_maxpool_circuit(2, self.BITS, self.P)
        assert circuit.evaluate([5, self._share(-7, 0), 0, 0, 0]) == [5]
        assert circuit.evaluate([self._share(-3, 11), self._share(-7, 40), 11, 40, 0]) == [self.P - 3]
        assert circuit.evaluate([self._share(9, 1), self._share(4, 2), 1, 2, 6]) == [3]

    def test_mod_maxpool_arithmetic_shift(self):
        circuit = build_mod_maxpool_circuit(2, self.BITS, self.P, shift=1)
        assert circuit.evaluate([self._share(-3, 0), self._share(-7, 0), 0, 0, 0]) == [self.P - 2]

    def test_plain_maxpool(self):
        circuit = build_maxpool_circuit(3, 8)
        assert circuit.evaluate([3, 250, 17]) == [17]
        assert circuit.evaluate([0xFF, 0xFE, 0xFD]) == [0xFF]


def _words(bits, width):
    """(trials, k * width) bit rows as (trials, k) little-endian integers."""
    bits = np.asarray(bits, dtype=np.int64)
    return bits.reshape(bits.shape[0], -1, width) @ (np.int64(1) << np.arange(width, dtype=np.int64))


def _reference(name, bits):
    """Expected output words of a corpus circuit, computed with integer arithmetic."""
    if name == "relu32":
        x = _words(bits, 32)
        return np.where(x >> 31 == 0, x, 0)
    if name == "mul32":
        a, b = _words(bits[:, :32], 32)[:, 0], _words(bits[:, 32:], 32)[:, 0]
        return ((a.astype(np.uint64) * b.astype(np.uint64)) & np.uint64(0xFFFFFFFF)).astype(np.int64)[:, None]
    if name == "hamm50":
        return np.count_nonzero(bits[:, :50] != bits[:, 50:], axis=1)[:, None]
    n, width = {"matmul5x5-8": (5, 8), "matmul3x3-16": (3, 16)}[name]
    half = n * n * width
    A = _words(bits[:, :half], width).reshape(-1, n, n)
    B = _words(bits[:, half:], width).reshape(-1, n, n)
    return ((A @ B) % (1 << width)).reshape(-1, n * n)


_OUTPUT_WIDTH = {"relu32": 32, "mul32": 32, "hamm50": 7, "matmul5x5-8": 8, "matmul3x3-16": 16}
_SLOW = ("mul32", "matmul5x5-8", "matmul3x3-16")


class TestBatchEvaluation:
    def test_matches_scalar(self, rng):
        circuit = benchmark("hamm50")
        gc, enc = garble(circuit, rng=rng)
        rows = [encode_inputs(enc, rng.integers(0, 2, circuit.num_inputs).tolist()) for _ in range(6)]
        batched = evaluate_batch(gc, circuit, rows, enc.true_label)
        assert batched == [evaluate(gc, circuit, row, enc.true_label) for row in rows]

    def test_empty_and_bad_rows(self, rng):
        circuit = benchmark("relu8")
        gc, enc = garble(circuit, rng=rng)
        assert evaluate_batch(gc, circuit, [], enc.true_label) == []
        with pytest.raises(DomainError):
            evaluate_batch(gc, circuit, [[0] * (circuit.num_inputs - 1)], enc.true_label)
        with pytest.raises(DecodeError):
            evaluate_batch(gc, benchmark("relu32"), [[0] * 32], enc.true_label)

    def test_evaluate_many_matches_evaluate_bits(self, rng):
        circuit = benchmark("adder4")
        bits = rng.integers(0, 2, (40, circuit.num_inputs))
        out = circuit.evaluate_many(bits)
        assert out.tolist() == [circuit.evaluate_bits(row) for row in bits.tolist()]
        with pytest.raises(DomainError):
            circuit.evaluate_many(bits[:, 1:])

    def test_mismatch_count(self, rng):
        assert garbled_mismatches(benchmark("relu8"), rng.integers(0, 2, (64, 8)), rng) == 0

    @pytest.mark.parametrize("name", [
        pytest.param(n, marks=pytest.mark.slow) if n in _SLOW else n
        for n in GC_BENCH_CORPUS if n != "aes128"
    ])
    def test_thousand_random_vectors(self, name):
        rng = np.random.default_rng(2024)
        circuit = benchmark(name)
        bits = rng.integers(0, 2, (1000, circuit.num_inputs))
        gc, enc = garble(circuit, rng=rng)
        labels = [encode_inputs(enc, row) for row in bits.tolist()]
        decoded = [decode_outputs(gc, row) for row in evaluate_batch(gc, circuit, labels, enc.true_label)]
        got = _words(decoded, _OUTPUT_WIDTH[name])
        assert np.array_equal(got, _reference(name, bits))


CORPUS_DIR = os.path.join(os.path.dirname(__file__), "..", "corpus")


class TestCorpus:
    @pytest.mark.parametrize("name", GC_BENCH_CORPUS)
    def test_and_counts(self, name):
        assert benchmark(name).and_count == CORPUS_AND_COUNTS[name]

    def test_export(self, tmp_path):
        manifest = export_corpus(str(tmp_path), ["relu32", "hamm50"])
        with open(tmp_path / "MANIFEST.json", encoding="utf-8") as fh:
            assert json.load(fh) == manifest
        for name in ("relu32", "hamm50"):
            back = load_circuit(str(tmp_path / f"{name}.txt"))
            assert back.stats() == manifest[name]
            assert back.and_count == CORPUS_AND_COUNTS[name]

    @pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CORPUS_DIR, "*.txt"))),
                             ids=os.path.basename)
    def test_shipped_files(self, path, rng):
        name = os.path.splitext(os.path.basename(path))[0]
        shipped = load_circuit(path)
        assert shipped.and_count == CORPUS_AND_COUNTS[name]
        bits = rng.integers(0, 2, (200, shipped.num_inputs))
        assert np.array_equal(shipped.evaluate_many(bits), benchmark(name).evaluate_many(bits))
