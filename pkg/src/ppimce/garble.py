"""
Half-Gates garbling with FreeXOR and point-and-permute.

Labels are 128-bit integers; the permute bit is the least significant bit and
label1 = label0 ^ delta on every wire. INV gates are XORs with a constant-true
wire whose active label the garbler ships next to its own input labels.
"""
from __future__ import annotations

import logging
import secrets
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .aes import FIXED_KEY, FixedKeyHash, blocks_from_ints, hash_blocks, ints_from_blocks
from .circuits import INV, XOR, Circuit
from .errors import DecodeError, DomainError

logger = logging.getLogger(__name__)

LABEL_BYTES = 16
ROW_BYTES = 2 * LABEL_BYTES
CONTAINER_MAGIC = b"PGC1"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, #gates, #AND


def random_block(rng: Optional[np.random.Generator] = None) -> int:
    raw = rng.bytes(LABEL_BYTES) if rng is not None else secrets.token_bytes(LABEL_BYTES)
    return int.from_bytes(raw, "little")


def random_delta(rng: Optional[np.random.Generator] = None) -> int:
    return random_block(rng) | 1


@dataclass
class GarbledCircuit:
    """Public half of a garbling: two rows per AND gate plus the output decode bits."""
    num_gates: int
    tables: List[Tuple[int, int]]
    decode_bits: List[int]

    @property
    def and_count(self) -> int:
        return len(self.tables)

    @property
    def table_bytes(self) -> int:
        return ROW_BYTES * len(self.tables)

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, 0, self.num_gates, len(self.tables)))
        for tg, te in self.tables:
            out += tg.to_bytes(LABEL_BYTES, "little") + te.to_bytes(LABEL_BYTES, "little")
        out += struct.pack("<I", len(self.decode_bits))
        out += np.packbits(np.asarray(self.decode_bits, dtype=np.uint8), bitorder="little").tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GarbledCircuit":
        if len(data) < _HEADER.size:
            raise DecodeError("garbled circuit container too short")
        magic, version, _, num_gates, n_and = _HEADER.unpack_from(data)
        if magic != CONTAINER_MAGIC or version != CONTAINER_VERSION:
            raise DecodeError(f"not a garbled circuit container (magic={magic!r}, version={version})")
        pos = _HEADER.size
        end = pos + n_and * ROW_BYTES
        if len(data) < end + 4:
            raise DecodeError(f"container holds fewer than {n_and} table rows")
        tables = []
        for off in range(pos, end, ROW_BYTES):
            tables.append((int.from_bytes(data[off:off + LABEL_BYTES], "little"),
                           int.from_bytes(data[off + LABEL_BYTES:off + ROW_BYTES], "little")))
        (n_out,) = struct.unpack_from("<I", data, end)
        packed = np.frombuffer(data[end + 4:], dtype=np.uint8)
        bits = np.unpackbits(packed, bitorder="little")[:n_out]
        if len(bits) != n_out:
            raise DecodeError("truncated decode map")
        return cls(num_gates, tables, [int(b) for b in bits])


@dataclass
class InputEncoding:
    """Garbler-side secrets: delta, zero labels of the inputs and outputs."""
    delta: int
    input_zero: List[int]
    output_zero: List[int]
    true_zero: int

    @property
    def true_label(self) -> int:
        """Active label of the constant-true wire, sent with the garbler's inputs."""
        return self.true_zero ^ self.delta

    def label(self, wire: int, bit: int) -> int:
        return self.input_zero[wire] ^ (self.delta if bit else 0)

    def label_pair(self, wire: int) -> Tuple[int, int]:
        return self.input_zero[wire], self.input_zero[wire] ^ self.delta


@dataclass
class GarbleStats:
    hash_calls: int = 0
    and_gates: int = 0
    free_gates: int = 0


def _lsb(x: int) -> int:
    return x & 1


def garble(circuit: Circuit, delta: Optional[int] = None, rng: Optional[np.random.Generator] = None,
           hasher: Optional[FixedKeyHash] = None, stats: Optional[GarbleStats] = None
           ) -> Tuple[GarbledCircuit, InputEncoding]:
    H = hasher or FixedKeyHash()
    delta = random_delta(rng) if delta is None else delta
    if not delta & 1:
        raise DomainError("global delta must have its least significant bit set")

    zero: List[Optional[int]] = [None] * circuit.num_wires
    for w in circuit.input_wires:
        zero[w] = random_block(rng)
    true_zero = random_block(rng)
    tables: List[Tuple[int, int]] = []

    for gid, g in enumerate(circuit.gates):
        if g.kind == XOR:
            zero[g.out] = zero[g.a] ^ zero[g.b]
        elif g.kind == INV:
            zero[g.out] = zero[g.a] ^ true_zero
        else:
            A0, B0 = zero[g.a], zero[g.b]
            A1, B1 = A0 ^ delta, B0 ^ delta
            pa, pb = _lsb(A0), _lsb(B0)
            j0, j1 = 2 * gid, 2 * gid + 1
            # garbler half: a AND pb
            ha0, ha1 = H(A0, j0), H(A1, j0)
            tg = ha0 ^ ha1 ^ (delta if pb else 0)
            wg0 = ha0 ^ (tg if pa else 0)
            # evaluator half: a AND (b XOR pb)
            hb0, hb1 = H(B0, j1), H(B1, j1)
            te = hb0 ^ hb1 ^ A0
            we0 = hb0 ^ ((te ^ A0) if pb else 0)
            zero[g.out] = wg0 ^ we0
            tables.append((tg, te))

    output_zero = [zero[w] for w in circuit.output_wires]
    gc = GarbledCircuit(len(circuit.gates), tables, [_lsb(z) for z in output_zero])
    enc = InputEncoding(delta, [zero[w] for w in circuit.input_wires], output_zero, true_zero)
    if stats is not None:
        stats.hash_calls += 4 * len(tables)
        stats.and_gates += len(tables)
        stats.free_gates += len(circuit.gates) - len(tables)
    logger.debug("garbled %s: %d AND rows, %d table bytes", circuit.name, len(tables), gc.table_bytes)
    return gc, enc


def evaluate(gc: GarbledCircuit, circuit: Circuit, labels: Sequence[int], true_label: int,
             hasher: Optional[FixedKeyHash] = None) -> List[int]:
    """Active output labels; the evaluator holds exactly one label per wire."""
    if gc.num_gates != len(circuit.gates) or gc.and_count != circuit.and_count:
        raise DecodeError(f"table holds {gc.and_count} AND rows for {gc.num_gates} gates; "
                          f"circuit has {circuit.and_count} AND of {len(circuit.gates)}")
    if len(labels) != circuit.num_inputs:
        raise DomainError(f"expected {circuit.num_inputs} input labels, got {len(labels)}")
    H = hasher or FixedKeyHash()
    active: List[Optional[int]] = [None] * circuit.num_wires
    active[:circuit.num_inputs] = list(labels)
    rows = iter(gc.tables)
    for gid, g in enumerate(circuit.gates):
        if g.kind == XOR:
            active[g.out] = active[g.a] ^ active[g.b]
        elif g.kind == INV:
            active[g.out] = active[g.a] ^ true_label
        else:
            tg, te = next(rows)
            A, B = active[g.a], active[g.b]
            wg = H(A, 2 * gid) ^ (tg if _lsb(A) else 0)
            we = H(B, 2 * gid + 1) ^ ((te ^ A) if _lsb(B) else 0)
            active[g.out] = wg ^ we
    return [active[w] for w in circuit.output_wires]


def evaluate_batch(gc: GarbledCircuit, circuit: Circuit, labels: Sequence[Sequence[int]], true_label: int,
                   key: bytes = FIXED_KEY) -> List[List[int]]:
    """Evaluate one garbling on many encoded inputs at once.

    Row b of the result holds the active output labels for ``labels[b]``,
    identical to ``evaluate`` on that row. Labels live in (batch, 16) byte
    arrays and each AND gate hashes the whole batch in one AES call; a wire's
    array is dropped after its last reader.
    """
    if gc.num_gates != len(circuit.gates) or gc.and_count != circuit.and_count:
        raise DecodeError(f"table holds {gc.and_count} AND rows for {gc.num_gates} gates; "
                          f"circuit has {circuit.and_count} AND of {len(circuit.gates)}")
    if any(len(row) != circuit.num_inputs for row in labels):
        raise DomainError(f"every row needs {circuit.num_inputs} input labels")
    batch = len(labels)
    if batch == 0:
        return []
    last_use: Dict[int, int] = {}
    for gid, g in enumerate(circuit.gates):
        last_use[g.a] = gid
        if g.kind != INV:
            last_use[g.b] = gid
    keep = set(circuit.output_wires)

    active: Dict[int, np.ndarray] = {w: blocks_from_ints(col) for w, col in enumerate(zip(*labels))}
    true_row = blocks_from_ints([true_label])[0]
    zero = np.uint8(0)
    rows = iter(gc.tables)
    for gid, g in enumerate(circuit.gates):
        A = active[g.a]
        if g.kind == XOR:
            out = A ^ active[g.b]
        elif g.kind == INV:
            out = A ^ true_row
        else:
            B = active[g.b]
            tg, te = blocks_from_ints(next(rows))
            tweaks = np.repeat(blocks_from_ints([2 * gid, 2 * gid + 1]), batch, axis=0)
            h = hash_blocks(np.concatenate([A, B]), tweaks, key)
            wg = h[:batch] ^ np.where((A[:, :1] & 1) == 1, tg, zero)
            we = h[batch:] ^ np.where((B[:, :1] & 1) == 1, te ^ A, zero)
            out = wg ^ we
        active[g.out] = out
        for w in ((g.a,) if g.kind == INV else (g.a, g.b)):
            if last_use[w] == gid and w not in keep:
                active.pop(w, None)

    outputs = np.stack([active[w] for w in circuit.output_wires], axis=1)
    return [ints_from_blocks(outputs[b]) for b in range(batch)]


def encode_inputs(enc: InputEncoding, bits: Sequence[int], offset: int = 0) -> List[int]:
    """Labels for input wires offset .. offset+len(bits)-1."""
    if offset < 0 or offset + len(bits) > len(enc.input_zero):
        raise DomainError(f"{len(bits)} bits at offset {offset} exceed {len(enc.input_zero)} input wires")
    return [enc.label(offset + i, b) for i, b in enumerate(bits)]


def decode_outputs(gc: GarbledCircuit, labels: Sequence[int]) -> List[int]:
    if len(labels) != len(gc.decode_bits):
        raise DomainError(f"expected {len(gc.decode_bits)} output labels, got {len(labels)}")
    return [_lsb(l) ^ d for l, d in zip(labels, gc.decode_bits)]


def run_garbled(circuit: Circuit, bits: Sequence[int], rng: Optional[np.random.Generator] = None
                ) -> List[int]:
    """Garble, encode, evaluate and decode in one process; used by tests and benchmarks."""
    gc, enc = garble(circuit, rng=rng)
    out = evaluate(gc, circuit, encode_inputs(enc, bits), enc.true_label)
    return decode_outputs(gc, out)


def garbled_mismatches(circuit: Circuit, bits: np.ndarray, rng: Optional[np.random.Generator] = None) -> int:
    """Garble once, run every row of ``bits`` through ``evaluate_batch`` and count
    rows whose decoded output differs from plaintext evaluation."""
    bits = np.asarray(bits, dtype=np.uint8)
    gc, enc = garble(circuit, rng=rng)
    labels = [encode_inputs(enc, row) for row in bits.tolist()]
    decoded = np.array([decode_outputs(gc, row) for row in evaluate_batch(gc, circuit, labels, enc.true_label)],
                       dtype=np.uint8).reshape(len(labels), circuit.num_outputs)
    expected = circuit.evaluate_many(bits)
    return int(np.count_nonzero(np.any(decoded != expected, axis=1)))


def encoded_input_bytes(num_bits: int) -> int:
    return LABEL_BYTES * num_bits
