"""
Boolean circuits: Bristol-Fashion netlists, a word-level builder and the GC
benchmark corpus.

Wires carry bits; words are little-endian bit lists (index 0 is the least
significant bit). Circuits only use XOR, AND and INV gates so that garbling
costs exactly one half-gate table per AND.
"""
from __future__ import annotations

import json
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .aes import RCON, SHIFT_ROWS, gmul
from .errors import DomainError, ParseError

logger = logging.getLogger(__name__)

XOR = "XOR"
AND = "AND"
INV = "INV"
GATE_KINDS = (XOR, AND, INV)
_ARITY = {XOR: 2, AND: 2, INV: 1}


class Gate(NamedTuple):
    kind: str
    a: int
    b: int  # -1 for INV
    out: int


def int_to_bits(value: int, n: int) -> List[int]:
    return [(value >> i) & 1 for i in range(n)]


def bits_to_int(bits: Sequence[int]) -> int:
    return sum((b & 1) << i for i, b in enumerate(bits))


@dataclass
class Circuit:
    num_wires: int
    input_sizes: List[int]
    output_sizes: List[int]
    gates: List[Gate]
    output_wires: List[int]
    name: str = ""

    @property
    def num_inputs(self) -> int:
        return sum(self.input_sizes)

    @property
    def num_outputs(self) -> int:
        return sum(self.output_sizes)

    @property
    def input_wires(self) -> List[int]:
        return list(range(self.num_inputs))

    def count(self, kind: str) -> int:
        return sum(1 for g in self.gates if g.kind == kind)

    @property
    def and_count(self) -> int:
        return self.count(AND)

    def stats(self) -> Dict[str, int]:
        return {
            "gates": len(self.gates),
            "wires": self.num_wires,
            "and": self.and_count,
            "xor": self.count(XOR),
            "inv": self.count(INV),
            "inputs": self.num_inputs,
            "outputs": self.num_outputs,
        }

    def evaluate_bits(self, bits: Sequence[int]) -> List[int]:
        """Plaintext evaluation over the concatenated input bits."""
        if len(bits) != self.num_inputs:
            raise DomainError(f"{self.name or 'circuit'} expects {self.num_inputs} input bits, got {len(bits)}")
        values = [0] * self.num_wires
        values[:self.num_inputs] = [b & 1 for b in bits]
        for g in self.gates:
            if g.kind == XOR:
                values[g.out] = values[g.a] ^ values[g.b]
            elif g.kind == AND:
                values[g.out] = values[g.a] & values[g.b]
            else:
                values[g.out] = values[g.a] ^ 1
        return [values[w] for w in self.output_wires]

    def evaluate_many(self, bits) -> np.ndarray:
        """Plaintext evaluation of a (trials, num_inputs) 0/1 array; one output row per input row."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 2 or bits.shape[1] != self.num_inputs:
            raise DomainError(f"{self.name or 'circuit'} expects rows of {self.num_inputs} input bits")
        values: List[Optional[np.ndarray]] = [None] * self.num_wires
        for w in range(self.num_inputs):
            values[w] = bits[:, w] & 1
        for g in self.gates:
            if g.kind == XOR:
                values[g.out] = values[g.a] ^ values[g.b]
            elif g.kind == AND:
                values[g.out] = values[g.a] & values[g.b]
            else:
                values[g.out] = values[g.a] ^ 1
        return np.stack([values[w] for w in self.output_wires], axis=1)

    def evaluate(self, inputs: Sequence[int]) -> List[int]:
        """Word-level evaluation: one integer per input group, one per output group."""
        if len(inputs) != len(self.input_sizes):
            raise DomainError(f"expected {len(self.input_sizes)} input words, got {len(inputs)}")
        bits: List[int] = []
        for value, size in zip(inputs, self.input_sizes):
            bits.extend(int_to_bits(value, size))
        out = self.evaluate_bits(bits)
        words, pos = [], 0
        for size in self.output_sizes:
            words.append(bits_to_int(out[pos:pos + size]))
            pos += size
        return words


# ---------------------------------------------------------------------------
# Bristol Fashion
# ---------------------------------------------------------------------------

def _ints(tokens: Sequence[str], line: int) -> List[int]:
    try:
        values = [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected integers, got {' '.join(tokens)!r}", line)
    if any(v < 0 for v in values):
        raise ParseError("negative value", line)
    return values


def parse_bristol(text: str, name: str = "") -> Circuit:
    """Parse a Bristol-Fashion netlist into a topologically ordered Circuit."""
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())]
    lines = [(no, toks) for no, toks in lines if toks]
    if len(lines) < 3:
        raise ParseError("truncated header", lines[-1][0] if lines else 1)

    no, toks = lines[0]
    header = _ints(toks, no)
    if len(header) != 2:
        raise ParseError("header must be '<gates> <wires>'", no)
    num_gates, num_wires = header

    sizes = []
    for no, toks in lines[1:3]:
        vals = _ints(toks, no)
        if not vals or vals[0] != len(vals) - 1:
            raise ParseError("size line must be '<count> <size>...'", no)
        sizes.append(vals[1:])
    input_sizes, output_sizes = sizes
    num_inputs = sum(input_sizes)
    if num_inputs + sum(output_sizes) > num_wires:
        raise ParseError("more input and output wires than wires", lines[0][0])

    gate_lines = lines[3:]
    if len(gate_lines) != num_gates:
        raise ParseError(f"header announces {num_gates} gates, found {len(gate_lines)}",
                         gate_lines[-1][0] if gate_lines else lines[2][0])

    gates: List[Gate] = []
    gate_line: List[int] = []
    producer: Dict[int, int] = {}
    for no, toks in gate_lines:
        kind = toks[-1].upper()
        if kind == "NOT":
            kind = INV
        if kind not in _ARITY:
            raise ParseError(f"unsupported gate kind {toks[-1]!r}", no)
        vals = _ints(toks[:-1], no)
        if len(vals) < 2:
            raise ParseError("gate line too short", no)
        n_in, n_out = vals[0], vals[1]
        if n_in != _ARITY[kind] or n_out != 1 or len(vals) != 2 + n_in + n_out:
            raise ParseError(f"malformed {kind} arity", no)
        wires = vals[2:]
        if any(w >= num_wires for w in wires):
            raise ParseError(f"wire index out of range (< {num_wires})", no)
        out = wires[-1]
        if out < num_inputs or out in producer:
            raise ParseError(f"wire {out} assigned twice", no)
        producer[out] = len(gates)
        b = wires[1] if n_in == 2 else -1
        gates.append(Gate(kind, wires[0], b, out))
        gate_line.append(no)

    ordered = _topological(gates, gate_line, num_inputs, producer)
    output_wires = list(range(num_wires - sum(output_sizes), num_wires))
    for w in output_wires:
        if w >= num_inputs and w not in producer:
            raise ParseError(f"output wire {w} is never assigned", lines[-1][0])
    circuit = Circuit(num_wires, input_sizes, output_sizes, ordered, output_wires, name)
    logger.debug("parsed %s: %s", name or "circuit", circuit.stats())
    return circuit


def _topological(gates: List[Gate], gate_line: List[int], num_inputs: int,
                 producer: Dict[int, int]) -> List[Gate]:
    waiting: Dict[int, List[int]] = {}
    missing = [0] * len(gates)
    ready = deque()
    for idx, g in enumerate(gates):
        srcs = (g.a,) if g.kind == INV else (g.a, g.b)
        for w in srcs:
            if w < num_inputs:
                continue
            if w not in producer:
                raise ParseError(f"wire {w} used before it is defined", gate_line[idx])
            missing[idx] += 1
            waiting.setdefault(w, []).append(idx)
        if missing[idx] == 0:
            ready.append(idx)
    ordered = []
    while ready:
        idx = ready.popleft()
        ordered.append(gates[idx])
        for dep in waiting.get(gates[idx].out, ()):
            missing[dep] -= 1
            if missing[dep] == 0:
                ready.append(dep)
    if len(ordered) != len(gates):
        stuck = min(i for i in range(len(gates)) if missing[i])
        raise ParseError("cyclic wiring", gate_line[stuck])
    return ordered


def to_bristol_layout(circuit: Circuit) -> Circuit:
    """Renumber so inputs come first and the outputs occupy the last wires."""
    n_in = circuit.num_inputs
    gates = list(circuit.gates)
    next_free = circuit.num_wires
    outputs = []
    seen = set()
    for w in circuit.output_wires:
        if w < n_in or w in seen:
            # double inversion copies the wire for free
            t, c = next_free, next_free + 1
            next_free += 2
            gates.append(Gate(INV, w, -1, t))
            gates.append(Gate(INV, t, -1, c))
            w = c
        seen.add(w)
        outputs.append(w)

    out_pos = {w: i for i, w in enumerate(outputs)}
    total = n_in + len(gates)
    first_out = total - len(outputs)
    remap = {i: i for i in range(n_in)}
    nxt = n_in
    for g in gates:
        if g.out in out_pos:
            remap[g.out] = first_out + out_pos[g.out]
        else:
            remap[g.out] = nxt
            nxt += 1
    new_gates = [Gate(g.kind, remap[g.a], remap[g.b] if g.b >= 0 else -1, remap[g.out]) for g in gates]
    return Circuit(total, list(circuit.input_sizes), list(circuit.output_sizes), new_gates,
                   list(range(first_out, total)), circuit.name)


def emit_bristol(circuit: Circuit) -> str:
    c = circuit
    if c.output_wires != list(range(c.num_wires - c.num_outputs, c.num_wires)):
        c = to_bristol_layout(c)
    lines = [
        f"{len(c.gates)} {c.num_wires}",
        " ".join(str(v) for v in [len(c.input_sizes)] + c.input_sizes),
        " ".join(str(v) for v in [len(c.output_sizes)] + c.output_sizes),
        "",
    ]
    for g in c.gates:
        if g.kind == INV:
            lines.append(f"1 1 {g.a} {g.out} INV")
        else:
            lines.append(f"2 1 {g.a} {g.b} {g.out} {g.kind}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

Word = List[int]


@dataclass
class CircuitBuilder:
    """Emits gates over fresh wires; word gadgets work on little-endian bit lists."""
    name: str = ""
    input_sizes: List[int] = field(default_factory=list)
    gates: List[Gate] = field(default_factory=list)
    outputs: List[Word] = field(default_factory=list)
    _next: int = 0
    _zero: Optional[int] = None
    _one: Optional[int] = None
    _inputs_closed: bool = False

    def input(self, n: int) -> Word:
        if self._inputs_closed:
            raise DomainError("all inputs must be declared before the first gate")
        wires = list(range(self._next, self._next + n))
        self._next += n
        self.input_sizes.append(n)
        return wires

    def _gate(self, kind: str, a: int, b: int = -1) -> int:
        self._inputs_closed = True
        out = self._next
        self._next += 1
        self.gates.append(Gate(kind, a, b, out))
        return out

    def xor(self, a: int, b: int) -> int:
        return self._gate(XOR, a, b)

    def and_(self, a: int, b: int) -> int:
        return self._gate(AND, a, b)

    def inv(self, a: int) -> int:
        return self._gate(INV, a)

    def or_(self, a: int, b: int) -> int:
        return self.xor(self.xor(a, b), self.and_(a, b))

    @property
    def zero(self) -> int:
        if self._zero is None:
            if not self.input_sizes:
                raise DomainError("constants need at least one input wire")
            self._zero = self.xor(0, 0)
        return self._zero

    @property
    def one(self) -> int:
        if self._one is None:
            self._one = self.inv(self.zero)
        return self._one

    def const(self, value: int, n: int) -> Word:
        return [self.one if (value >> i) & 1 else self.zero for i in range(n)]

    def output(self, word: Word) -> None:
        self.outputs.append(list(word))

    def build(self) -> Circuit:
        out_wires = [w for word in self.outputs for w in word]
        circuit = Circuit(self._next, list(self.input_sizes), [len(w) for w in self.outputs],
                          list(self.gates), out_wires, self.name)
        return to_bristol_layout(circuit)

    # -- word gadgets --------------------------------------------------

    def xor_word(self, a: Word, b: Word) -> Word:
        return [self.xor(x, y) for x, y in zip(a, b)]

    def inv_word(self, a: Word) -> Word:
        return [self.inv(x) for x in a]

    def xor_const(self, a: Word, value: int) -> Word:
        return [self.inv(x) if (value >> i) & 1 else x for i, x in enumerate(a)]

    def xor_many(self, wires: Sequence[int]) -> int:
        if not wires:
            return self.zero
        acc = wires[0]
        for w in wires[1:]:
            acc = self.xor(acc, w)
        return acc

    def mux(self, sel: int, if_one: Word, if_zero: Word) -> Word:
        """sel ? if_one : if_zero, one AND per bit."""
        return [self.xor(z, self.and_(sel, self.xor(o, z))) for o, z in zip(if_one, if_zero)]

    def and_bit(self, sel: int, word: Word) -> Word:
        return [self.and_(sel, w) for w in word]

    def add(self, a: Word, b: Word, carry: Optional[int] = None, keep_carry: bool = False) -> Word:
        """Ripple-carry sum; one AND per bit for the carry chain."""
        if len(a) != len(b):
            raise DomainError("adder operands must have equal width")
        out = []
        for i, (x, y) in enumerate(zip(a, b)):
            if carry is None:
                out.append(self.xor(x, y))
                if i < len(a) - 1 or keep_carry:
                    carry = self.and_(x, y)
                continue
            xc = self.xor(x, carry)
            out.append(self.xor(xc, y))
            if i < len(a) - 1 or keep_carry:
                carry = self.xor(carry, self.and_(xc, self.xor(y, carry)))
        if keep_carry:
            out.append(carry)
        return out

    def sub(self, a: Word, b: Word, keep_borrow: bool = False) -> Word:
        """a - b modulo 2^n; with keep_borrow the extra top bit is 1 when a < b (unsigned)."""
        diff = self.add(a, self.inv_word(b), carry=self.one, keep_carry=keep_borrow)
        if keep_borrow:
            diff[-1] = self.inv(diff[-1])
        return diff

    def less_than(self, a: Word, b: Word, signed: bool = False) -> int:
        if signed:
            a = a + [a[-1]]
            b = b + [b[-1]]
            return self.sub(a, b)[-1]
        return self.sub(a, b, keep_borrow=True)[-1]

    def mul(self, a: Word, b: Word, width: Optional[int] = None) -> Word:
        """Shift-and-add product truncated to ``width`` bits."""
        width = width or len(a)
        acc: Optional[Word] = None
        for i, bit in enumerate(b[:width]):
            row = [self.and_(bit, x) for x in a[:width - i]]
            if acc is None:
                acc = [self.zero] * i + row if i else row
                acc = acc + [self.zero] * (width - len(acc))
                continue
            acc = acc[:i] + self.add(acc[i:], row)
        return acc if acc is not None else [self.zero] * width

    def popcount(self, bits: Sequence[int]) -> Word:
        if len(bits) == 1:
            return [bits[0]]
        half = len(bits) // 2
        lo = self.popcount(bits[:half])
        hi = self.popcount(bits[half:])
        n = max(len(lo), len(hi))
        lo = lo + [self.zero] * (n - len(lo))
        hi = hi + [self.zero] * (n - len(hi))
        return self.add(lo, hi, keep_carry=True)

    def relu(self, x: Word) -> Word:
        """max(0, x) for two's complement x."""
        keep = self.inv(x[-1])
        return self.and_bit(keep, x)

    def max_signed(self, a: Word, b: Word) -> Word:
        return self.mux(self.less_than(a, b, signed=True), b, a)

    def linear(self, byte: Word, fn: Callable[[int], int], n_out: int = 8) -> Word:
        """Any GF(2)-linear map given as a function on integers."""
        images = [fn(1 << i) for i in range(len(byte))]
        return [self.xor_many([byte[i] for i, img in enumerate(images) if (img >> t) & 1])
                for t in range(n_out)]

    def sbox(self, x: Word) -> Word:
        """AES S-box through the 32-AND straight-line program of ``SBOX_SLP``."""
        env = {f"x{i}": x[7 - i] for i in range(8)}
        for out, op, a, b in SBOX_SLP:
            if op == "&":
                env[out] = self.and_(env[a], env[b])
            elif op == "^":
                env[out] = self.xor(env[a], env[b])
            else:
                env[out] = self.inv(self.xor(env[a], env[b]))
        return [env[f"s{7 - i}"] for i in range(8)]


def _parse_slp(text: str) -> Tuple[Tuple[str, str, str, str], ...]:
    steps = []
    for line in text.split(";"):
        out, expr = (s.strip() for s in line.split("="))
        a, op, b = expr.split()
        steps.append((out, op, a, b))
    return tuple(steps)


# Bit 0 of x and s is the most significant bit; "&" AND, "^" XOR, "~" XNOR.
SBOX_SLP = _parse_slp(
    # top linear layer
    "y14 = x3 ^ x5; y13 = x0 ^ x6; y9 = x0 ^ x3; y8 = x0 ^ x5; t0 = x1 ^ x2;"
    "y1 = t0 ^ x7; y4 = y1 ^ x3; y12 = y13 ^ y14; y2 = y1 ^ x0; y5 = y1 ^ x6;"
    "y3 = y5 ^ y8; t1 = x4 ^ y12; y15 = t1 ^ x5; y20 = t1 ^ x1; y6 = y15 ^ x7;"
    "y10 = y15 ^ t0; y11 = y20 ^ y9; y7 = x7 ^ y11; y17 = y10 ^ y11; y19 = y10 ^ y8;"
    "y16 = t0 ^ y11; y21 = y13 ^ y16; y18 = x0 ^ y16;"
    # GF(2^4) reduction, inversion and lift
    "t2 = y12 & y15; t3 = y3 & y6; t4 = t3 ^ t2; t5 = y4 & x7; t6 = t5 ^ t2;"
    "t7 = y13 & y16; t8 = y5 & y1; t9 = t8 ^ t7; t10 = y2 & y7; t11 = t10 ^ t7;"
    "t12 = y9 & y11; t13 = y14 & y17; t14 = t13 ^ t12; t15 = y8 & y10; t16 = t15 ^ t12;"
    "t17 = t4 ^ t14; t18 = t6 ^ t16; t19 = t9 ^ t14; t20 = t11 ^ t16;"
    "t21 = t17 ^ y20; t22 = t18 ^ y19; t23 = t19 ^ y21; t24 = t20 ^ y18;"
    "t25 = t21 ^ t22; t26 = t21 & t23; t27 = t24 ^ t26; t28 = t25 & t27; t29 = t28 ^ t22;"
    "t30 = t23 ^ t24; t31 = t22 ^ t26; t32 = t31 & t30; t33 = t32 ^ t24; t34 = t23 ^ t33;"
    "t35 = t27 ^ t33; t36 = t24 & t35; t37 = t36 ^ t34; t38 = t27 ^ t36; t39 = t29 & t38;"
    "t40 = t25 ^ t39; t41 = t40 ^ t37; t42 = t29 ^ t33; t43 = t29 ^ t40; t44 = t33 ^ t37;"
    "t45 = t42 ^ t41;"
    "z0 = t44 & y15; z1 = t37 & y6; z2 = t33 & x7; z3 = t43 & y16; z4 = t40 & y1;"
    "z5 = t29 & y7; z6 = t42 & y11; z7 = t45 & y17; z8 = t41 & y10; z9 = t44 & y12;"
    "z10 = t37 & y3; z11 = t33 & y4; z12 = t43 & y13; z13 = t40 & y5; z14 = t29 & y2;"
    "z15 = t42 & y9; z16 = t45 & y14; z17 = t41 & y8;"
    # bottom linear layer with the affine constant folded into XNORs
    "t46 = z15 ^ z16; t47 = z10 ^ z11; t48 = z5 ^ z13; t49 = z9 ^ z10; t50 = z2 ^ z12;"
    "t51 = z2 ^ z5; t52 = z7 ^ z8; t53 = z0 ^ z3; t54 = z6 ^ z7; t55 = z16 ^ z17;"
    "t56 = z12 ^ t48; t57 = t50 ^ t53; t58 = z4 ^ t46; t59 = z3 ^ t54; t60 = t46 ^ t57;"
    "t61 = z14 ^ t57; t62 = t52 ^ t58; t63 = t49 ^ t58; t64 = z4 ^ t59; t65 = t61 ^ t62;"
    "t66 = z1 ^ t63; s0 = t59 ^ t63; s6 = t56 ~ t62; s7 = t48 ~ t60; t67 = t64 ^ t65;"
    "s3 = t53 ^ t66; s4 = t51 ^ t66; s5 = t47 ^ t65; s1 = t64 ~ s3; s2 = t55 ~ t67"
)


# ---------------------------------------------------------------------------
# Circuit generators
# ---------------------------------------------------------------------------

def build_relu_circuit(bits: int) -> Circuit:
    cb = CircuitBuilder(name=f"relu{bits}")
    x = cb.input(bits)
    cb.output(cb.relu(x))
    return cb.build()


def build_adder_circuit(bits: int) -> Circuit:
    cb = CircuitBuilder(name=f"adder{bits}")
    a, b = cb.input(bits), cb.input(bits)
    cb.output(cb.add(a, b, keep_carry=True))
    return cb.build()


def build_mul_circuit(bits: int) -> Circuit:
    cb = CircuitBuilder(name=f"mul{bits}")
    a, b = cb.input(bits), cb.input(bits)
    cb.output(cb.mul(a, b))
    return cb.build()


def build_hamming_circuit(bits: int) -> Circuit:
    cb = CircuitBuilder(name=f"hamm{bits}")
    a, b = cb.input(bits), cb.input(bits)
    cb.output(cb.popcount(cb.xor_word(a, b)))
    return cb.build()


def build_matmul_circuit(n: int, bits: int) -> Circuit:
    """C = A @ B over n x n matrices of ``bits``-bit entries, modulo 2^bits, row-major."""
    cb = CircuitBuilder(name=f"matmul{n}x{n}-{bits}")
    A = cb.input(n * n * bits)
    B = cb.input(n * n * bits)
    entry = lambda M, i, j: M[(i * n + j) * bits:(i * n + j + 1) * bits]
    out: Word = []
    for i in range(n):
        for j in range(n):
            acc = None
            for k in range(n):
                p = cb.mul(entry(A, i, k), entry(B, k, j), bits)
                acc = p if acc is None else cb.add(acc, p)
            out.extend(acc)
    cb.output(out)
    return cb.build()


def build_maxpool_circuit(count: int, bits: int) -> Circuit:
    """Maximum of ``count`` signed words through a comparison tree."""
    if count < 1:
        raise DomainError("maxpool needs at least one input")
    cb = CircuitBuilder(name=f"maxpool{count}-{bits}")
    words = [cb.input(bits) for _ in range(count)]
    while len(words) > 1:
        nxt = [cb.max_signed(words[i], words[i + 1]) for i in range(0, len(words) - 1, 2)]
        if len(words) % 2:
            nxt.append(words[-1])
        words = nxt
    cb.output(words[0])
    return cb.build()


def _mod_reduce_once(cb: CircuitBuilder, t: Word, p: int) -> Word:
    """t in [0, 2p) -> t mod p, with t one bit wider than p."""
    diff = cb.sub(t, cb.const(p, len(t)), keep_borrow=True)
    borrow = diff.pop()
    return cb.mux(borrow, t, diff)


def build_mod_relu_circuit(bits: int, p: int, shift: int = 0) -> Circuit:
    """((ReLU((a + b) mod p) >> shift) - c) mod p over the balanced representation.

    Inputs: a = x - r from the garbler, b = r and c = s' from the evaluator.
    ReLU keeps t when t < p/2 and maps the upper half (negative values) to 0.
    """
    if p >= (1 << bits) or p < 3:
        raise DomainError(f"modulus {p} does not fit {bits} bits")
    if shift < 0 or shift >= bits:
        raise DomainError("truncation shift out of range")
    cb = CircuitBuilder(name=f"modrelu{bits}-{p}")
    a, b, c = cb.input(bits), cb.input(bits), cb.input(bits)
    t = _mod_reduce_once(cb, cb.add(a, b, keep_carry=True), p)[:bits]

    half = (p + 1) // 2
    positive = cb.less_than(t, cb.const(half, bits))
    u = cb.and_bit(positive, t)
    if shift:
        u = u[shift:] + [cb.zero] * shift

    cb.output(_sub_mod(cb, u, c, p))
    return cb.build()


def _sub_mod(cb: CircuitBuilder, u: Word, c: Word, p: int) -> Word:
    """(u - c) mod p for u, c in [0, p)."""
    diff = cb.sub(u, c, keep_borrow=True)
    borrow = diff.pop()
    wrapped = cb.add(diff, cb.const(p, len(u)))
    return cb.mux(borrow, wrapped, diff)


def _balanced(cb: CircuitBuilder, t: Word, p: int) -> Word:
    """t in [0, p) as a two's complement word one bit wider, in (-p/2, p/2)."""
    bits = len(t)
    wide = t + [cb.zero]
    negative = cb.inv(cb.less_than(t, cb.const((p + 1) // 2, bits)))
    return cb.mux(negative, cb.sub(wide, cb.const(p, bits + 1)), wide)


def build_mod_maxpool_circuit(count: int, bits: int, p: int, shift: int = 0) -> Circuit:
    """((max_i (a_i + b_i) mod p) >> shift) - c, all mod p, comparing balanced values.

    Inputs: a_0..a_{count-1} from the garbler, then b_0..b_{count-1} and c
    from the evaluator. The shift is arithmetic.
    """
    if count < 1:
        raise DomainError("maxpool needs at least one input")
    if p >= (1 << bits) or p < 3:
        raise DomainError(f"modulus {p} does not fit {bits} bits")
    if shift < 0 or shift >= bits:
        raise DomainError("truncation shift out of range")
    cb = CircuitBuilder(name=f"modmaxpool{count}-{bits}-{p}")
    a = [cb.input(bits) for _ in range(count)]
    b = [cb.input(bits) for _ in range(count)]
    c = cb.input(bits)
    words = [_balanced(cb, _mod_reduce_once(cb, cb.add(x, y, keep_carry=True), p)[:bits], p)
             for x, y in zip(a, b)]
    while len(words) > 1:
        nxt = [cb.max_signed(words[i], words[i + 1]) for i in range(0, len(words) - 1, 2)]
        if len(words) % 2:
            nxt.append(words[-1])
        words = nxt
    m = words[0]
    if shift:
        m = m[shift:] + [m[-1]] * shift
    wrapped = cb.add(m, cb.const(p, bits + 1))[:bits]
    u = cb.mux(m[-1], wrapped, m[:bits])
    cb.output(_sub_mod(cb, u, c, p))
    return cb.build()


def build_aes128_circuit() -> Circuit:
    """AES-128 with in-circuit key expansion; inputs key then plaintext, output ciphertext.

    A 128-bit word holds the FIPS-197 byte string little-endian: byte i is bits 8i..8i+7.
    """
    cb = CircuitBuilder(name="aes128")
    key_bits, pt_bits = cb.input(128), cb.input(128)
    byte = lambda w, i: w[8 * i:8 * i + 8]
    key = [byte(key_bits, i) for i in range(16)]
    state = [cb.xor_word(byte(pt_bits, i), key[i]) for i in range(16)]

    words = [key[4 * i:4 * i + 4] for i in range(4)]
    for r in range(1, 11):
        prev = words[-1]
        t = [cb.sbox(b) for b in prev[1:] + prev[:1]]
        t[0] = cb.xor_const(t[0], RCON[r - 1])
        new = []
        for j in range(4):
            base = words[-4 + j] if j == 0 else new[-1]
            src = t if j == 0 else words[-4 + j]
            new.append([cb.xor_word(x, y) for x, y in zip(src, base)])
        words.extend(new)
        round_key = [b for w in words[-4:] for b in w]

        sub = [cb.sbox(b) for b in state]
        shifted = [sub[SHIFT_ROWS[i]] for i in range(16)]
        if r < 10:
            shifted = _mix_columns(cb, shifted)
        state = [cb.xor_word(x, k) for x, k in zip(shifted, round_key)]

    cb.output([w for b in state for w in b])
    return cb.build()


def _mix_columns(cb: CircuitBuilder, state: List[Word]) -> List[Word]:
    m2 = lambda w: cb.linear(w, lambda v: gmul(v, 2))
    m3 = lambda w: cb.linear(w, lambda v: gmul(v, 3))
    out = []
    for c in range(4):
        a0, a1, a2, a3 = state[4 * c:4 * c + 4]
        rows = (
            (m2(a0), m3(a1), a2, a3),
            (a0, m2(a1), m3(a2), a3),
            (a0, a1, m2(a2), m3(a3)),
            (m3(a0), a1, a2, m2(a3)),
        )
        for terms in rows:
            acc = terms[0]
            for t in terms[1:]:
                acc = cb.xor_word(acc, t)
            out.append(acc)
    return out


BENCHMARKS: Dict[str, Callable[[], Circuit]] = {
    "and": lambda: _single_gate(AND),
    "xor": lambda: _single_gate(XOR),
    "relu8": lambda: build_relu_circuit(8),
    "adder4": lambda: build_adder_circuit(4),
    "relu32": lambda: build_relu_circuit(32),
    "mul32": lambda: build_mul_circuit(32),
    "hamm50": lambda: build_hamming_circuit(50),
    "matmul5x5-8": lambda: build_matmul_circuit(5, 8),
    "matmul3x3-16": lambda: build_matmul_circuit(3, 16),
    "aes128": build_aes128_circuit,
}

# circuits of the published GC benchmark corpus
GC_BENCH_CORPUS = ("relu32", "mul32", "hamm50", "aes128", "matmul5x5-8", "matmul3x3-16")

# AND gates per corpus circuit; FreeXOR makes these the only garbled tables
CORPUS_AND_COUNTS = {
    "relu32": 32,
    "mul32": 993,
    "hamm50": 106,
    "aes128": 6400,
    "matmul5x5-8": 7825,
    "matmul3x3-16": 6777,
}

_CACHE: Dict[str, Circuit] = {}


def _single_gate(kind: str) -> Circuit:
    return Circuit(3, [1, 1], [1], [Gate(kind, 0, 1, 2)], [2], kind.lower())


def benchmark(name: str) -> Circuit:
    if name not in BENCHMARKS:
        raise DomainError(f"unknown circuit {name!r}; choose from {sorted(BENCHMARKS)}")
    if name not in _CACHE:
        _CACHE[name] = BENCHMARKS[name]()
        logger.info("generated %s: %s", name, _CACHE[name].stats())
    return _CACHE[name]


def load_circuit(name_or_path: str) -> Circuit:
    """A benchmark name or a Bristol-Fashion file."""
    if name_or_path in BENCHMARKS:
        return benchmark(name_or_path)
    try:
        with open(name_or_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise DomainError(f"cannot read circuit {name_or_path!r}: {e}")
    return parse_bristol(text, name=name_or_path)


def export_corpus(directory: str, names: Sequence[str] = GC_BENCH_CORPUS) -> Dict[str, Dict[str, int]]:
    """Write each circuit as ``<name>.txt`` in Bristol Fashion plus a MANIFEST.json of gate counts."""
    os.makedirs(directory, exist_ok=True)
    manifest: Dict[str, Dict[str, int]] = {}
    for name in names:
        circuit = benchmark(name)
        path = os.path.join(directory, f"{name}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(emit_bristol(circuit))
        manifest[name] = circuit.stats()
        logger.info("wrote %s (%d gates, %d AND)", path, len(circuit.gates), circuit.and_count)
    with open(os.path.join(directory, "MANIFEST.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
