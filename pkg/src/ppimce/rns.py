"""
RNS polynomial ring Z_Q[X]/(X^N + 1).

Each polynomial keeps one residue vector per modulus; the unit stride of every
operation is a whole polynomial, mirroring the coefficient-per-core layout.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy

from .arith import (
    Modulus,
    special_reduce,
    vec_add_mod,
    vec_barrett,
    vec_mul_mod,
    vec_neg_mod,
    vec_sub_mod,
)
from .errors import DomainError, ParseError

logger = logging.getLogger(__name__)


class Domain(Enum):
    COEFFICIENT = "coefficient"
    EVALUATION = "evaluation"


class NttCounter:
    """Counts polynomial-level transforms; compiled HE ops are checked against it."""

    def __init__(self):
        self.forward = 0
        self.inverse = 0

    @property
    def total(self) -> int:
        return self.forward + self.inverse

    def reset(self):
        self.forward = 0
        self.inverse = 0


NTT_COUNTER = NttCounter()


def _dtype_for(q: int):
    return np.uint64 if q < (1 << 31) else object


def bit_reverse(x: int, bits: int) -> int:
    return int(format(x, f"0{bits}b")[::-1], 2) if bits else 0


@dataclass(frozen=True)
class RingParams:
    degree: int
    moduli: Tuple[Modulus, ...]
    scale: float = float(2 ** 30)
    special_moduli_mode: bool = False
    special_primes: Tuple[Modulus, ...] = ()  # key-switching auxiliary base P
    name: str = ""

    def __post_init__(self):
        n = self.degree
        if n < 8 or n > 65536 or n & (n - 1):
            raise DomainError(f"ring degree must be a power of two in [8, 65536], got {n}")
        if not self.moduli:
            raise DomainError("at least one modulus is required")
        values = [m.value for m in self.moduli + self.special_primes]
        if len(set(values)) != len(values):
            raise DomainError("RNS moduli must be distinct")
        if not self.special_moduli_mode:
            for m in self.moduli + self.special_primes:
                if (m.value - 1) % (2 * n) or not sympy.isprime(m.value):
                    raise DomainError(f"{m.value} is not an NTT-friendly prime for N={n}")

    @property
    def slots(self) -> int:
        return self.degree // 2

    @property
    def levels(self) -> int:
        return len(self.moduli)

    @property
    def modulus_product(self) -> int:
        return int(np.prod([m.value for m in self.moduli], dtype=object))

    @property
    def special_product(self) -> int:
        return int(np.prod([m.value for m in self.special_primes], dtype=object)) if self.special_primes else 1

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "degree": self.degree,
            "moduli": [m.value for m in self.moduli],
            "special_primes": [m.value for m in self.special_primes],
            "scale": self.scale,
            "special_moduli_mode": self.special_moduli_mode,
            "name": self.name,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RingParams":
        raw = json.loads(text)
        if raw.get("version") != 1:
            raise ParseError(f"unsupported RingParams descriptor version {raw.get('version')}")
        make = Modulus.special if raw.get("special_moduli_mode") else Modulus.general
        return cls(
            degree=int(raw["degree"]),
            moduli=tuple(make(int(v)) for v in raw["moduli"]),
            scale=float(raw["scale"]),
            special_moduli_mode=bool(raw.get("special_moduli_mode", False)),
            special_primes=tuple(Modulus.general(int(v)) for v in raw.get("special_primes", [])),
            name=raw.get("name", ""),
        )


# ------------------ NTT tables ------------------

@dataclass
class NttTables:
    q: Modulus
    n: int
    psi_rev: np.ndarray
    psi_inv_rev: np.ndarray
    n_inv: int
    eval_exponents: np.ndarray  # odd exponent e such that slot i holds f(psi^e)


@lru_cache(maxsize=None)
def ntt_tables(q: int, n: int) -> NttTables:
    if (q - 1) % (2 * n):
        raise DomainError(f"{q} admits no primitive {2 * n}-th root of unity")
    g = int(sympy.primitive_root(q))
    psi = pow(g, (q - 1) // (2 * n), q)
    psi_inv = pow(psi, -1, q)
    logn = n.bit_length() - 1
    dtype = _dtype_for(q)
    psi_rev = np.array([pow(psi, bit_reverse(i, logn), q) for i in range(n)], dtype=dtype)
    psi_inv_rev = np.array([pow(psi_inv, bit_reverse(i, logn), q) for i in range(n)], dtype=dtype)
    exps = np.array([2 * bit_reverse(i, logn) + 1 for i in range(n)], dtype=np.int64)
    return NttTables(Modulus.general(q), n, psi_rev, psi_inv_rev, pow(n, -1, q), exps)


def ntt_forward(a: np.ndarray, tables: NttTables) -> np.ndarray:
    """Negacyclic Cooley-Tukey NTT, natural order in, bit-reversed order out."""
    q, n = tables.q, tables.n
    a = a.copy()
    t, m = n, 1
    while m < n:
        t //= 2
        blocks = a.reshape(m, 2 * t)
        s = tables.psi_rev[m:2 * m].reshape(m, 1)
        u = blocks[:, :t].copy()
        v = vec_mul_mod(blocks[:, t:], np.broadcast_to(s, (m, t)), q)
        blocks[:, :t] = vec_add_mod(u, v, q.value)
        blocks[:, t:] = vec_sub_mod(u, v, q.value)
        a = blocks.reshape(n)
        m *= 2
    return a


def ntt_inverse(a: np.ndarray, tables: NttTables) -> np.ndarray:
    """Gentleman-Sande inverse of ntt_forward, including the 1/N scaling."""
    q, n = tables.q, tables.n
    a = a.copy()
    t, m = 1, n
    while m > 1:
        h = m // 2
        blocks = a.reshape(h, 2 * t)
        s = tables.psi_inv_rev[h:2 * h].reshape(h, 1)
        u = blocks[:, :t].copy()
        v = blocks[:, t:].copy()
        blocks[:, :t] = vec_add_mod(u, v, q.value)
        blocks[:, t:] = vec_mul_mod(vec_sub_mod(u, v, q.value), np.broadcast_to(s, (h, t)), q)
        a = blocks.reshape(n)
        t *= 2
        m = h
    ninv = np.full(n, tables.n_inv, dtype=a.dtype)
    return vec_mul_mod(a, ninv, q)


# ------------------ polynomials ------------------

@dataclass
class RnsPolynomial:
    params: RingParams
    channels: List[np.ndarray]
    moduli: Tuple[Modulus, ...]
    domain: Domain = Domain.COEFFICIENT

    def __post_init__(self):
        if len(self.channels) != len(self.moduli):
            raise DomainError("one residue vector per modulus is required")
        for ch in self.channels:
            if ch.shape != (self.params.degree,):
                raise DomainError(f"channel length {ch.shape} does not match N={self.params.degree}")

    @property
    def level(self) -> int:
        return len(self.moduli)

    @classmethod
    def zero(cls, params: RingParams, moduli: Sequence[Modulus], domain: Domain = Domain.COEFFICIENT) -> "RnsPolynomial":
        return cls(params, [np.zeros(params.degree, dtype=_dtype_for(m.value)) for m in moduli], tuple(moduli), domain)

    @classmethod
    def from_integers(cls, params: RingParams, coeffs: Sequence[int], moduli: Sequence[Modulus],
                      domain: Domain = Domain.COEFFICIENT) -> "RnsPolynomial":
        """Reduce signed integer coefficients into every channel."""
        obj = np.array([int(c) for c in coeffs], dtype=object)
        if obj.shape != (params.degree,):
            raise DomainError("coefficient count must equal N")
        channels = [(obj % m.value).astype(_dtype_for(m.value)) for m in moduli]
        return cls(params, channels, tuple(moduli), domain)

    def copy(self) -> "RnsPolynomial":
        return RnsPolynomial(self.params, [c.copy() for c in self.channels], self.moduli, self.domain)

    def restrict(self, moduli: Sequence[Modulus]) -> "RnsPolynomial":
        """Keep only the channels for ``moduli`` (each must be present)."""
        index = {m.value: i for i, m in enumerate(self.moduli)}
        try:
            channels = [self.channels[index[m.value]] for m in moduli]
        except KeyError as e:
            raise DomainError(f"modulus {e.args[0]} not present in polynomial") from None
        return RnsPolynomial(self.params, channels, tuple(moduli), self.domain)

    def to_bytes(self) -> bytes:
        header = struct.pack("<4sHHIH", b"PPRP", 1, self.level, self.params.degree,
                             0 if self.domain is Domain.COEFFICIENT else 1)
        body = bytearray()
        for m, ch in zip(self.moduli, self.channels):
            body += struct.pack("<Q", m.value)
            body += b"".join(int(v).to_bytes(8, "little") for v in ch) if ch.dtype == object \
                else ch.astype("<u8").tobytes()
        return header + bytes(body)

    @classmethod
    def from_bytes(cls, params: RingParams, data: bytes) -> "RnsPolynomial":
        magic, version, level, n, dom = struct.unpack_from("<4sHHIH", data, 0)
        if magic != b"PPRP" or version != 1:
            raise ParseError("not a polynomial container")
        if n != params.degree:
            raise ParseError(f"container degree {n} does not match params degree {params.degree}")
        known = {m.value: m for m in params.moduli + params.special_primes}
        off = struct.calcsize("<4sHHIH")
        channels, moduli = [], []
        for _ in range(level):
            (qv,) = struct.unpack_from("<Q", data, off)
            off += 8
            raw = np.frombuffer(data, dtype="<u8", count=n, offset=off).astype(np.uint64)
            off += 8 * n
            m = known.get(qv) or Modulus.general(qv)
            moduli.append(m)
            channels.append(raw if _dtype_for(qv) is np.uint64 else raw.astype(object))
        return cls(params, channels, tuple(moduli), Domain.EVALUATION if dom else Domain.COEFFICIENT)


def _check_pair(a: RnsPolynomial, b: RnsPolynomial):
    if a.params.degree != b.params.degree or [m.value for m in a.moduli] != [m.value for m in b.moduli]:
        raise DomainError("polynomials have mismatched ring parameters")
    if a.domain is not b.domain:
        raise DomainError(f"domain mismatch: {a.domain.value} vs {b.domain.value}")


def ntt(poly: RnsPolynomial, direction: str = "forward", counter: NttCounter = NTT_COUNTER) -> RnsPolynomial:
    """Per-channel negacyclic NTT (``forward``) or its inverse (``inverse``)."""
    forward = direction.lower() == "forward"
    expected = Domain.COEFFICIENT if forward else Domain.EVALUATION
    if poly.domain is not expected:
        raise DomainError(f"{direction} NTT needs a {expected.value}-domain polynomial")
    if poly.params.special_moduli_mode:
        raise DomainError("special-moduli mode has no NTT; use negacyclic_mul")
    n = poly.params.degree
    out = []
    for m, ch in zip(poly.moduli, poly.channels):
        tables = ntt_tables(m.value, n)
        out.append(ntt_forward(ch, tables) if forward else ntt_inverse(ch, tables))
    if forward:
        counter.forward += 1
    else:
        counter.inverse += 1
    return RnsPolynomial(poly.params, out, poly.moduli, Domain.EVALUATION if forward else Domain.COEFFICIENT)


def poly_arith(a: RnsPolynomial, b: RnsPolynomial, op: str) -> RnsPolynomial:
    """Channel-wise Add, Sub or PointwiseMul through the arithmetic kernels."""
    _check_pair(a, b)
    op = op.lower()
    if op == "add":
        chans = [vec_add_mod(x, y, m.value) for m, x, y in zip(a.moduli, a.channels, b.channels)]
    elif op == "sub":
        chans = [vec_sub_mod(x, y, m.value) for m, x, y in zip(a.moduli, a.channels, b.channels)]
    elif op in ("pointwisemul", "mul"):
        if a.domain is not Domain.EVALUATION:
            raise DomainError("PointwiseMul needs evaluation-domain operands")
        chans = [vec_mul_mod(x, y, m) for m, x, y in zip(a.moduli, a.channels, b.channels)]
    else:
        raise DomainError(f"unknown polynomial op {op!r}")
    return RnsPolynomial(a.params, chans, a.moduli, a.domain)


def poly_neg(a: RnsPolynomial) -> RnsPolynomial:
    return RnsPolynomial(a.params, [vec_neg_mod(x, m.value) for m, x in zip(a.moduli, a.channels)], a.moduli, a.domain)


def poly_scalar_mul(a: RnsPolynomial, c: int) -> RnsPolynomial:
    chans = []
    for m, x in zip(a.moduli, a.channels):
        cc = np.full(x.shape, int(c) % m.value, dtype=x.dtype)
        chans.append(vec_mul_mod(x, cc, m))
    return RnsPolynomial(a.params, chans, a.moduli, a.domain)


def negacyclic_mul(a: RnsPolynomial, b: RnsPolynomial) -> RnsPolynomial:
    """Coefficient-domain schoolbook product mod X^N + 1 (special-moduli datapath)."""
    _check_pair(a, b)
    if a.domain is not Domain.COEFFICIENT:
        raise DomainError("negacyclic_mul works on coefficient-domain polynomials")
    n = a.params.degree
    out = []
    for m, x, y in zip(a.moduli, a.channels, b.channels):
        acc = np.zeros(n, dtype=object)
        xo, yo = x.astype(object), y.astype(object)
        for i in range(n):
            term = xo[i] * yo
            acc[i:] += term[:n - i]
            acc[:i] -= term[n - i:]
        acc %= m.value * m.value
        if m.is_special:
            r = special_reduce(acc, m)
        else:
            r = vec_barrett(acc, m)
        out.append(np.asarray(r).astype(_dtype_for(m.value)))
    return RnsPolynomial(a.params, out, a.moduli, a.domain)


# ------------------ automorphisms ------------------

def automorphism(p: RnsPolynomial, g: int) -> RnsPolynomial:
    """X -> X^g with negacyclic sign wrapping; evaluation-domain input is permuted instead."""
    n = p.params.degree
    if g % 2 == 0:
        raise DomainError(f"automorphism index must be odd, got {g}")
    g %= 2 * n
    if p.domain is Domain.EVALUATION:
        return _automorphism_eval(p, g)
    idx = (np.arange(n, dtype=np.int64) * g) % (2 * n)
    dest = idx % n
    negate = idx >= n
    out = []
    for m, ch in zip(p.moduli, p.channels):
        res = np.zeros_like(ch)
        vals = np.where(negate, vec_neg_mod(ch, m.value), ch)
        res[dest] = vals
        out.append(res)
    return RnsPolynomial(p.params, out, p.moduli, p.domain)


@lru_cache(maxsize=None)
def _eval_permutation(n: int, g: int) -> np.ndarray:
    logn = n.bit_length() - 1
    exps = [2 * bit_reverse(i, logn) + 1 for i in range(n)]
    where = {e: i for i, e in enumerate(exps)}
    return np.array([where[(e * g) % (2 * n)] for e in exps], dtype=np.int64)


def _automorphism_eval(p: RnsPolynomial, g: int) -> RnsPolynomial:
    perm = _eval_permutation(p.params.degree, g)
    return RnsPolynomial(p.params, [ch[perm] for ch in p.channels], p.moduli, p.domain)


# ------------------ CRT ------------------

@dataclass
class CrtBasis:
    moduli: Tuple[int, ...]
    product: int = 0
    hats: Tuple[int, ...] = field(default=())
    hat_invs: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        prod = 1
        for q in self.moduli:
            prod *= q
        self.product = prod
        self.hats = tuple(prod // q for q in self.moduli)
        self.hat_invs = tuple(pow(h % q, -1, q) for h, q in zip(self.hats, self.moduli))


def rns_decompose(x: int, moduli: Sequence[int]) -> Tuple[int, ...]:
    basis = CrtBasis(tuple(int(q) for q in moduli))
    if x < 0 or x >= basis.product:
        raise DomainError(f"{x} outside [0, {basis.product})")
    return tuple(x % q for q in basis.moduli)


def rns_compose(residues: Sequence[int], moduli: Sequence[int]) -> int:
    basis = CrtBasis(tuple(int(q) for q in moduli))
    if len(residues) != len(basis.moduli):
        raise DomainError("residue count must match modulus count")
    for r, q in zip(residues, basis.moduli):
        if not 0 <= r < q:
            raise DomainError(f"residue {r} not reduced modulo {q}")
    total = sum(int(r) * h * hi for r, h, hi in zip(residues, basis.hats, basis.hat_invs))
    return total % basis.product


def compose_centered(poly: RnsPolynomial) -> np.ndarray:
    """CRT-compose every coefficient and lift it to the centered range (object ints)."""
    if poly.domain is not Domain.COEFFICIENT:
        raise DomainError("compose needs coefficient-domain input")
    basis = CrtBasis(tuple(m.value for m in poly.moduli))
    acc = np.zeros(poly.params.degree, dtype=object)
    for ch, h, hi, q in zip(poly.channels, basis.hats, basis.hat_invs, basis.moduli):
        acc += ((ch.astype(object) * hi) % q) * h
    acc %= basis.product
    half = basis.product // 2
    return np.where(acc > half, acc - basis.product, acc)
