"""
Client/server hybrid inference: HE for linear layers, garbled circuits for activations.

The two parties are coroutines exchanging framed messages over an in-process
channel. Every frame is charged to one of three ledger phases; OT is an ideal
functionality whose traffic is charged at a configurable size per wire.
"""
from __future__ import annotations

import asyncio
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .aes import FixedKeyHash
from .ckks import Ciphertext, KeySet, decrypt_decode, encode, encrypt, keygen, preset
from .circuits import bits_to_int, int_to_bits
from .compiler import (
    LayerGraph,
    LinearPhase,
    NetworkPlan,
    NonLinearPhase,
    compile_network,
    diagonals,
    evaluate_he,
)
from .config import ArchProfile, DispatchConfig, ProtocolConfig
from .dispatcher import CostReport
from .errors import DecodeError, DomainError, LevelError, ProtocolError
from .garble import LABEL_BYTES, GarbledCircuit, decode_outputs, encode_inputs, evaluate, garble
from .rns import RingParams, RnsPolynomial

logger = logging.getLogger(__name__)

FRAME = struct.Struct("<IB")  # payload length, kind


class Role(Enum):
    CLIENT = "client"
    SERVER = "server"


class MessageKind(IntEnum):
    CT_UPLOAD = 1
    CT_RESULT = 2
    GARBLED_TABLES = 3
    INPUT_LABELS = 4
    # 5 is unassigned: the ideal OT receiver sends nothing to the sender
    OT_LABEL_RESPONSE = 6
    EVAL_SHARE = 7
    FINAL_SHARE = 8


ONLINE_HE = "online-he"
ONLINE_GC = "online-gc"
PREPROCESSING = "preprocessing"
PHASES = (ONLINE_HE, ONLINE_GC, PREPROCESSING)

PHASE_OF = {
    MessageKind.CT_UPLOAD: ONLINE_HE,
    MessageKind.CT_RESULT: ONLINE_HE,
    MessageKind.FINAL_SHARE: ONLINE_HE,
    MessageKind.GARBLED_TABLES: PREPROCESSING,
    MessageKind.INPUT_LABELS: ONLINE_GC,
    MessageKind.OT_LABEL_RESPONSE: ONLINE_GC,
    MessageKind.EVAL_SHARE: ONLINE_GC,
}


@dataclass(frozen=True)
class ProtocolMessage:
    seq: int
    kind: MessageKind
    sender: Role
    payload: bytes

    @property
    def byte_length(self) -> int:
        return FRAME.size + len(self.payload)

    def encode(self) -> bytes:
        return FRAME.pack(len(self.payload), int(self.kind)) + self.payload


def read_transcript(path: str) -> List[Tuple[MessageKind, bytes]]:
    """Parse a file of {u32 length, u8 kind, payload} frames."""
    with open(path, "rb") as fh:
        data = fh.read()
    out, pos = [], 0
    while pos < len(data):
        if pos + FRAME.size > len(data):
            raise DecodeError(f"truncated frame header at byte {pos}")
        length, kind = FRAME.unpack_from(data, pos)
        pos += FRAME.size
        if pos + length > len(data):
            raise DecodeError(f"frame at byte {pos - FRAME.size} claims {length} bytes")
        try:
            out.append((MessageKind(kind), data[pos:pos + length]))
        except ValueError:
            raise DecodeError(f"unknown message kind {kind}") from None
        pos += length
    return out


@dataclass
class CommLedger:
    counters: Dict[str, int] = field(default_factory=lambda: {p: 0 for p in PHASES})
    messages: Dict[str, int] = field(default_factory=lambda: {p: 0 for p in PHASES})

    def charge(self, message: ProtocolMessage) -> None:
        phase = PHASE_OF[message.kind]
        self.counters[phase] += message.byte_length
        self.messages[phase] += 1

    @property
    def total(self) -> int:
        return sum(self.counters.values())

    @property
    def online(self) -> int:
        return self.counters[ONLINE_HE] + self.counters[ONLINE_GC]

    def latency_s(self, bandwidth_bps: float, include_preprocessing: bool = False) -> float:
        if bandwidth_bps <= 0:
            raise DomainError("bandwidth must be positive")
        sent = self.total if include_preprocessing else self.online
        return 8 * sent / bandwidth_bps

    def sweep(self, bandwidths: Sequence[float], compute_s: float = 0.0) -> List[Dict[str, float]]:
        """Latency at every bandwidth: online transfer plus the compute time."""
        return [{"bandwidth_bps": bw, "comm_s": self.latency_s(bw), "compute_s": compute_s,
                 "total_s": self.latency_s(bw) + compute_s} for bw in bandwidths]

    def to_dict(self) -> Dict[str, int]:
        return {**{f"{p}_bytes": n for p, n in self.counters.items()}, "total_bytes": self.total}


def account(ledger: CommLedger, bandwidths: Sequence[float] = (), compute_s: float = 0.0) -> Dict[str, object]:
    return {"bytes": ledger.to_dict(), "messages": dict(ledger.messages),
            "latency": ledger.sweep(bandwidths, compute_s)}


def load_bandwidths(path: str) -> List[float]:
    """A JSON list of bits/s, or an object mapping preset names to bits/s."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    values = list(raw.values()) if isinstance(raw, dict) else raw
    return [float(v) for v in values]


class Channel:
    """Ordered duplex channel; every message is charged and optionally written to a transcript pair."""

    def __init__(self, ledger: Optional[CommLedger] = None, transcript: str = ""):
        self.ledger = ledger or CommLedger()
        self._inbox = {Role.CLIENT: asyncio.Queue(), Role.SERVER: asyncio.Queue()}
        self.ot_pairs: asyncio.Queue = asyncio.Queue()  # ideal OT: sender pairs waiting for the receiver
        self._seq = 0
        self.log: List[ProtocolMessage] = []
        self._files = {}
        if transcript:
            self._files = {Role.CLIENT: open(f"{transcript}.client", "wb"),
                           Role.SERVER: open(f"{transcript}.server", "wb")}

    async def send(self, sender: Role, kind: MessageKind, payload: bytes) -> ProtocolMessage:
        msg = ProtocolMessage(self._seq, kind, sender, bytes(payload))
        self._seq += 1
        self.ledger.charge(msg)
        self.log.append(msg)
        if self._files:
            self._files[sender].write(msg.encode())
        receiver = Role.SERVER if sender is Role.CLIENT else Role.CLIENT
        await self._inbox[receiver].put(msg)
        return msg

    async def recv(self, receiver: Role, expect: MessageKind) -> ProtocolMessage:
        msg = await self._inbox[receiver].get()
        if msg.kind is not expect:
            raise ProtocolError(f"{receiver.value} expected {expect.name}, got {msg.kind.name} (seq {msg.seq})")
        return msg

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files = {}


# ------------------ serialization ------------------

_CT_HEADER = struct.Struct("<dI")


def ciphertext_to_bytes(ct: Ciphertext) -> bytes:
    c0 = ct.c0.to_bytes()
    return _CT_HEADER.pack(ct.scale, len(c0)) + c0 + ct.c1.to_bytes()


def ciphertext_from_bytes(params: RingParams, data: bytes) -> Ciphertext:
    if len(data) < _CT_HEADER.size:
        raise DecodeError("ciphertext payload too short")
    scale, n0 = _CT_HEADER.unpack_from(data)
    off = _CT_HEADER.size
    c0 = RnsPolynomial.from_bytes(params, data[off:off + n0])
    c1 = RnsPolynomial.from_bytes(params, data[off + n0:])
    return Ciphertext(c0, c1, scale)


def _labels_to_bytes(labels: Sequence[int]) -> bytes:
    return b"".join(l.to_bytes(LABEL_BYTES, "little") for l in labels)


def _labels_from_bytes(data: bytes) -> List[int]:
    if len(data) % LABEL_BYTES:
        raise DecodeError(f"{len(data)} bytes is not a whole number of labels")
    return [int.from_bytes(data[i:i + LABEL_BYTES], "little") for i in range(0, len(data), LABEL_BYTES)]


def _shares_to_bytes(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.int64)
    if values.size and (values.min() < 0 or values.max() >> 32):
        raise DomainError("shares must fit unsigned 32-bit words")
    return values.astype("<u4").tobytes()


def _shares_from_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype="<u4").astype(np.int64)


# ------------------ oblivious transfer ------------------

def ideal_ot(pairs: Sequence[Tuple[int, int]], choices: Sequence[int], rng: np.random.Generator,
             bytes_per_wire: int = 32) -> Tuple[List[int], bytes]:
    """Chosen labels for the receiver and the sender-to-receiver payload.

    The payload carries both labels of every wire under one-time pads; only the
    pad of the chosen label reaches the receiver, directly from the
    functionality. The sender never sees the choice bits.
    """
    if len(pairs) != len(choices):
        raise DomainError(f"{len(pairs)} label pairs for {len(choices)} choice bits")
    if bytes_per_wire < 2 * LABEL_BYTES:
        raise DomainError(f"an OT wire carries at least {2 * LABEL_BYTES} bytes")
    out: List[int] = []
    payload = bytearray()
    pad_tail = bytes(bytes_per_wire - 2 * LABEL_BYTES)
    for (l0, l1), c in zip(pairs, choices):
        k0, k1 = (int.from_bytes(rng.bytes(LABEL_BYTES), "little") for _ in range(2))
        masked = (l0 ^ k0, l1 ^ k1)
        payload += _labels_to_bytes(masked) + pad_tail
        out.append(masked[c & 1] ^ (k1 if c & 1 else k0))
    return out, bytes(payload)


# ------------------ quantization ------------------

def centered(values: np.ndarray, p: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64) % p
    return np.where(v > p // 2, v - p, v)


def quantize(values: np.ndarray, bits: int) -> np.ndarray:
    return np.rint(np.asarray(values, dtype=np.float64) * (1 << bits)).astype(np.int64)


def frac_bits_after(plan: NetworkPlan) -> List[int]:
    """Fractional bits of the activation after every phase."""
    f, out = plan.frac_bits, []
    for phase in plan.phases:
        if isinstance(phase, LinearPhase):
            f += plan.weight_bits
        else:
            f -= phase.shift
        out.append(f)
    return out


def quantized_weights(phase: LinearPhase, plan: NetworkPlan, in_frac: int) -> Tuple[np.ndarray, np.ndarray]:
    wq = quantize(phase.matrix, plan.weight_bits)
    bq = quantize(phase.bias, in_frac + plan.weight_bits)
    return wq, bq


def reference_inference(plan: NetworkPlan, x: np.ndarray) -> np.ndarray:
    """Integer-exact plaintext model of what the protocol computes; returns floats."""
    p = plan.modulus
    v = quantize(np.asarray(x).reshape(-1), plan.frac_bits)
    f = plan.frac_bits
    for phase, after in zip(plan.phases, frac_bits_after(plan)):
        if isinstance(phase, LinearPhase):
            wq, bq = quantized_weights(phase, plan, f)
            v = centered(wq @ v + bq, p)
        elif phase.layer.kind == "relu":
            v = np.maximum(v, 0) >> phase.shift
        else:
            v = np.array([v[w].max() for w in phase.windows], dtype=np.int64) >> phase.shift
        f = after
    return v.astype(np.float64) / (1 << f)


def plaintext_inference(graph: LayerGraph, x: np.ndarray) -> np.ndarray:
    """Float forward pass."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    for layer in graph.layers:
        if layer.is_linear:
            w, b = layer.matrix()
            v = w @ v + b
        elif layer.kind == "relu":
            v = np.maximum(v, 0)
        else:
            v = np.array([v[w].max() for w in layer.windows()])
    return v


def public_plan(plan: NetworkPlan) -> NetworkPlan:
    """The plan with every weight and bias removed."""
    phases = []
    for phase in plan.phases:
        if isinstance(phase, LinearPhase):
            layer = replace(phase.layer, weights=None, bias=None)
            phase = replace(phase, layer=layer, matrix=np.zeros((0, 0)), bias=np.zeros(0))
        phases.append(phase)
    graph = LayerGraph([replace(l, weights=None, bias=None) for l in plan.graph.layers], plan.graph.name)
    return replace(plan, graph=graph, phases=phases)


def _replicate(values: np.ndarray, period: int, slots: int) -> np.ndarray:
    block = np.zeros(period, dtype=np.float64)
    block[:len(values)] = values
    return np.tile(block, slots // period)


# ------------------ parties ------------------

class Client:
    """Holds the input, the HE secret key and the garbler role."""

    def __init__(self, plan: NetworkPlan, keys: KeySet, channel: Channel, config: ProtocolConfig,
                 rng: np.random.Generator):
        if any(isinstance(p, LinearPhase) and p.matrix.size for p in plan.phases):
            raise ProtocolError("the client plan must not carry weights")
        self.plan = plan
        self.keys = keys
        self.channel = channel
        self.config = config
        self.rng = rng
        self.hasher = FixedKeyHash()
        self.share: Optional[np.ndarray] = None
        self.checkpoints: List[Tuple[int, np.ndarray]] = []

    async def _linear(self, phase: LinearPhase) -> None:
        params, p = self.plan.params, self.plan.modulus
        pt = encode(_replicate(centered(self.share, p), phase.period, params.slots), params)
        ct = encrypt(pt, self.keys, self.rng)
        await self.channel.send(Role.CLIENT, MessageKind.CT_UPLOAD, ciphertext_to_bytes(ct))
        msg = await self.channel.recv(Role.CLIENT, MessageKind.CT_RESULT)
        out = ciphertext_from_bytes(params, msg.payload)
        values = np.real(decrypt_decode(out, self.keys))[:phase.layer.out_size]
        self.share = np.rint(values).astype(np.int64) % p

    async def _nonlinear(self, phase: NonLinearPhase) -> None:
        circuit = phase.circuit
        bits = self.plan.modulus.bit_length()
        if phase.windows:
            groups = [self.share[w] for w in phase.windows]
        else:
            groups = [self.share[i:i + 1] for i in range(phase.instances)]
        n_a = bits * len(groups[0])
        garbled, encodings = [], []
        for _ in range(phase.instances):
            gc, enc = garble(circuit, rng=self.rng, hasher=self.hasher)
            garbled.append(gc)
            encodings.append(enc)
        # decode bits stay with the garbler
        tables = b"".join(GarbledCircuit(gc.num_gates, gc.tables, [0] * len(gc.decode_bits)).to_bytes()
                          for gc in garbled)
        await self.channel.send(Role.CLIENT, MessageKind.GARBLED_TABLES, tables)
        labels = []
        for enc, group in zip(encodings, groups):
            a_bits = [b for v in group for b in int_to_bits(int(v), bits)]
            labels.append(enc.true_label)
            labels += encode_inputs(enc, a_bits)
        await self.channel.send(Role.CLIENT, MessageKind.INPUT_LABELS, _labels_to_bytes(labels))
        pairs = [enc.label_pair(w) for enc in encodings for w in range(n_a, circuit.num_inputs)]
        await ot_sender(self.channel, pairs)
        msg = await self.channel.recv(Role.CLIENT, MessageKind.EVAL_SHARE)
        out_labels = _labels_from_bytes(msg.payload)
        width = circuit.num_outputs
        if len(out_labels) != width * phase.instances:
            raise DecodeError(f"{len(out_labels)} output labels for {phase.instances} instances of {width} bits")
        share = []
        for i, gc in enumerate(garbled):
            share.append(bits_to_int(decode_outputs(gc, out_labels[i * width:(i + 1) * width])))
        self.share = np.asarray(share, dtype=np.int64)

    async def run(self, x: np.ndarray) -> np.ndarray:
        p = self.plan.modulus
        self.share = quantize(np.asarray(x).reshape(-1), self.plan.frac_bits) % p
        if self.share.size != self.plan.graph.input_size:
            raise DomainError(f"input has {self.share.size} values, the model expects {self.plan.graph.input_size}")
        for phase in self.plan.phases:
            if isinstance(phase, LinearPhase):
                await self._linear(phase)
            else:
                await self._nonlinear(phase)
            self.checkpoints.append((phase.index, self.share.copy()))
        msg = await self.channel.recv(Role.CLIENT, MessageKind.FINAL_SHARE)
        result = centered(self.share + _shares_from_bytes(msg.payload), p)
        return result.astype(np.float64) / (1 << frac_bits_after(self.plan)[-1])


class Server:
    """Holds the model weights, the evaluation keys and the evaluator role."""

    def __init__(self, plan: NetworkPlan, keys: KeySet, channel: Channel, config: ProtocolConfig,
                 rng: np.random.Generator):
        if keys.secret is not None:
            raise ProtocolError("the server must not hold the HE secret key")
        self.plan = plan
        self.keys = keys
        self.channel = channel
        self.config = config
        self.rng = rng
        self.hasher = FixedKeyHash()
        self.share = np.zeros(plan.graph.input_size, dtype=np.int64)
        self.checkpoints: List[Tuple[int, np.ndarray]] = []

    async def _linear(self, phase: LinearPhase, in_frac: int) -> None:
        params, p, m = self.plan.params, self.plan.modulus, phase.period
        if phase.mul_depth > params.levels - 1:
            raise LevelError(f"phase {phase.index} needs depth {phase.mul_depth}; "
                             f"{params.levels - 1} levels without bootstrapping")
        msg = await self.channel.recv(Role.SERVER, MessageKind.CT_UPLOAD)
        ct = ciphertext_from_bytes(params, msg.payload)
        wq, bq = quantized_weights(phase, self.plan, in_frac)
        q_last = params.moduli[ct.level - 1].value
        inputs: Dict[str, object] = {"x": ct}
        inputs["share"] = encode(_replicate(centered(self.share, p), m, params.slots), params, ct.scale, ct.level)
        for i, d in enumerate(diagonals(wq.astype(np.float64), m, params.slots)):
            inputs[f"d{i}"] = encode(d, params, float(q_last), ct.level)
        r = self.rng.integers(0, p, size=phase.layer.out_size, dtype=np.int64)
        offset = _replicate((r - bq).astype(np.float64), m, params.slots)
        # MUL_PLAIN by q_last-scaled diagonals then RESCALE by q_last leaves the scale unchanged
        inputs["offset"] = encode(offset, params, ct.scale, ct.level - 1)
        out = evaluate_he(phase.program, inputs, self.keys)["out"]
        await self.channel.send(Role.SERVER, MessageKind.CT_RESULT, ciphertext_to_bytes(out))
        self.share = r

    async def _nonlinear(self, phase: NonLinearPhase) -> None:
        circuit = phase.circuit
        p = self.plan.modulus
        bits = p.bit_length()
        msg = await self.channel.recv(Role.SERVER, MessageKind.GARBLED_TABLES)
        garbled, pos = [], 0
        for _ in range(phase.instances):
            gc = GarbledCircuit.from_bytes(msg.payload[pos:])
            pos += len(gc.to_bytes())
            garbled.append(gc)
        msg = await self.channel.recv(Role.SERVER, MessageKind.INPUT_LABELS)
        labels = _labels_from_bytes(msg.payload)
        if phase.windows:
            groups = [self.share[w] for w in phase.windows]
        else:
            groups = [self.share[i:i + 1] for i in range(phase.instances)]
        n_a = bits * len(groups[0])
        fresh = self.rng.integers(0, p, size=phase.instances, dtype=np.int64)
        choices = []
        for group, s in zip(groups, fresh):
            choices += [b for v in group for b in int_to_bits(int(v), bits)] + int_to_bits(int(s), bits)
        ot_labels = await ot_receiver(self.channel, choices, self.rng, self.config.ot_bytes_per_wire)
        n_b = circuit.num_inputs - n_a
        outputs = []
        for i, gc in enumerate(garbled):
            own = labels[i * (n_a + 1):(i + 1) * (n_a + 1)]
            active = own[1:] + ot_labels[i * n_b:(i + 1) * n_b]
            outputs += evaluate(gc, circuit, active, own[0], self.hasher)
        await self.channel.send(Role.SERVER, MessageKind.EVAL_SHARE, _labels_to_bytes(outputs))
        self.share = fresh

    async def run(self) -> None:
        f = self.plan.frac_bits
        for phase, after in zip(self.plan.phases, frac_bits_after(self.plan)):
            if isinstance(phase, LinearPhase):
                await self._linear(phase, f)
            else:
                await self._nonlinear(phase)
            self.checkpoints.append((phase.index, self.share.copy()))
            f = after
        await self.channel.send(Role.SERVER, MessageKind.FINAL_SHARE, _shares_to_bytes(self.share))


async def ot_sender(channel: Channel, pairs: List[Tuple[int, int]]) -> None:
    """Hand the label pairs to the OT functionality; nothing comes back to the sender."""
    await channel.ot_pairs.put(pairs)


async def ot_receiver(channel: Channel, choices: List[int], rng: np.random.Generator,
                      bytes_per_wire: int = 32) -> List[int]:
    """Chosen labels for the receiver; the functionality emits the sender's message on its behalf."""
    pairs = await channel.ot_pairs.get()
    labels, payload = ideal_ot(pairs, choices, rng, bytes_per_wire)
    await channel.send(Role.CLIENT, MessageKind.OT_LABEL_RESPONSE, payload)
    await channel.recv(Role.SERVER, MessageKind.OT_LABEL_RESPONSE)
    return labels


# ------------------ driver ------------------

@dataclass
class InferenceResult:
    output: np.ndarray
    reference: np.ndarray
    ledger: CommLedger
    report: CostReport
    plan: NetworkPlan
    client_checkpoints: List[Tuple[int, np.ndarray]]
    server_checkpoints: List[Tuple[int, np.ndarray]]

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.output))


def cost_report(plan: NetworkPlan, profile: Optional[ArchProfile] = None,
                config: Optional[DispatchConfig] = None) -> CostReport:
    profile = profile or ArchProfile()
    gc = sum(p.gc_cycles(config) for p in plan.phases if isinstance(p, NonLinearPhase))
    he = plan.he_cycles
    return CostReport(cycles=gc + he, gc_cycles=gc, he_cycles=he, frequency_hz=profile.frequency_hz,
                      instructions=sum(len(p.netlist.stream) * p.instances for p in plan.phases
                                       if isinstance(p, NonLinearPhase))
                      + sum(len(p.compiled.stream) for p in plan.phases if isinstance(p, LinearPhase)))


async def run_inference_async(model: Union[LayerGraph, NetworkPlan], x: np.ndarray,
                              config: Optional[ProtocolConfig] = None, params: Optional[RingParams] = None,
                              rng: Optional[np.random.Generator] = None,
                              profile: Optional[ArchProfile] = None) -> InferenceResult:
    config = config or ProtocolConfig()
    rng = rng or np.random.default_rng(config.seed)
    if isinstance(model, NetworkPlan):
        plan = model
    else:
        params = params or preset(config.he_preset)
        plan = compile_network(model, params, config.share_bits, config.frac_bits, config.weight_bits, profile)
    keys = keygen(plan.params, rng, rotations=plan.rotations)
    channel = Channel(transcript=config.transcript_path)
    client = Client(public_plan(plan), keys, channel, config, np.random.default_rng(rng.integers(1 << 63)))
    server = Server(plan, keys.public_view(), channel, config, np.random.default_rng(rng.integers(1 << 63)))
    try:
        output, _ = await asyncio.gather(client.run(x), server.run())
    finally:
        channel.close()
    report = cost_report(plan, profile)
    logger.info("inference done: %d online bytes, %d preprocessing bytes, %d cycles",
                channel.ledger.online, channel.ledger.counters[PREPROCESSING], report.cycles)
    return InferenceResult(output, reference_inference(plan, x), channel.ledger, report, plan,
                           client.checkpoints, server.checkpoints)


def run_inference(model: Union[LayerGraph, NetworkPlan], x: np.ndarray, config: Optional[ProtocolConfig] = None,
                  params: Optional[RingParams] = None, rng: Optional[np.random.Generator] = None,
                  profile: Optional[ArchProfile] = None) -> InferenceResult:
    return asyncio.run(run_inference_async(model, x, config, params, rng, profile))
