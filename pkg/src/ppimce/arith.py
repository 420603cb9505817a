"""
Integer arithmetic as the IMC core computes it.

Every routine accepts either a Python ``int`` or a numpy array so the same
kernel drives scalar checks and whole-polynomial (one coefficient per core)
evaluation. Residue arithmetic stays branch-free: corrections are applied
through sign masks exactly like the CEM add / shifter sign-extension pair.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Union

import numpy as np
import sympy

from .errors import DomainError

logger = logging.getLogger(__name__)

Word = Union[int, np.ndarray]

SUPPORTED_KARATSUBA_WIDTHS = (4, 8, 16, 32, 64)


class ModulusKind(Enum):
    POW2_MINUS_ONE = "pow2-1"
    POW2 = "pow2"
    POW2_PLUS_ONE = "pow2+1"
    GENERAL = "general"


@dataclass(frozen=True)
class Modulus:
    value: int
    kind: ModulusKind = ModulusKind.GENERAL
    k: int = 0
    width: int = 0  # operand width w used by Barrett; defaults to bit_length(value)
    barrett_mu: int = 0

    @classmethod
    def general(cls, value: int, width: Optional[int] = None) -> "Modulus":
        if value < 2:
            raise DomainError(f"modulus must be >= 2, got {value}")
        w = width or value.bit_length()
        if value.bit_length() > w:
            raise DomainError(f"modulus {value} does not fit in declared width {w}")
        return cls(value=value, kind=ModulusKind.GENERAL, width=w, barrett_mu=(1 << (2 * w)) // value)

    @classmethod
    def pow2_minus_one(cls, k: int) -> "Modulus":
        return cls(value=(1 << k) - 1, kind=ModulusKind.POW2_MINUS_ONE, k=k, width=k)

    @classmethod
    def pow2(cls, k: int) -> "Modulus":
        return cls(value=1 << k, kind=ModulusKind.POW2, k=k, width=k + 1)

    @classmethod
    def pow2_plus_one(cls, k: int) -> "Modulus":
        return cls(value=(1 << k) + 1, kind=ModulusKind.POW2_PLUS_ONE, k=k, width=k + 1)

    @classmethod
    def special(cls, value: int) -> "Modulus":
        """Classify ``value`` as one of the 2^k - 1, 2^k, 2^k + 1 shapes if it has one."""
        if value & (value - 1) == 0:
            return cls.pow2(value.bit_length() - 1)
        if (value + 1) & value == 0:
            return cls.pow2_minus_one(value.bit_length())
        if (value - 1) & (value - 2) == 0:
            return cls.pow2_plus_one((value - 1).bit_length() - 1)
        return cls.general(value)

    @property
    def is_special(self) -> bool:
        return self.kind is not ModulusKind.GENERAL

    def __int__(self) -> int:
        return self.value


def as_modulus(q: Union[int, Modulus]) -> Modulus:
    return q if isinstance(q, Modulus) else Modulus.general(int(q))


# ------------------ helpers ------------------

def _is_array(x) -> bool:
    return isinstance(x, np.ndarray)


def _signed(x: Word) -> Word:
    """View a non-negative word as signed so arithmetic shifts produce sign masks."""
    if _is_array(x) and x.dtype != object:
        return x.astype(np.int64)
    return x


def sign_mask(t: Word) -> Word:
    """All-ones where ``t`` is negative, zero elsewhere (MSB extension)."""
    if _is_array(t) and t.dtype != object:
        return t >> 63
    return t >> 127


def _finish(r: Word, like: Word) -> Word:
    if _is_array(r) and r.dtype != object and _is_array(like) and like.dtype != object:
        return r.astype(np.uint64)
    return r


def conditional_subtract(r: Word, q: int) -> Word:
    """Return r - q where r >= q, else r; branch-free via the borrow mask."""
    r = _signed(r)
    t = r - q
    m = sign_mask(t)
    return (r & m) | (t & ~m)


def _check_residues(q: int, *operands: Word) -> None:
    for x in operands:
        if _is_array(x):
            if x.size and (np.any(x < 0) or np.any(x >= q)):
                raise DomainError(f"operand not reduced modulo {q}")
        elif x < 0 or x >= q:
            raise DomainError(f"operand {x} not in [0, {q})")


# ------------------ modular add / sub ------------------

def not_add(a: Word, b: Word, width: int) -> tuple:
    """Compute a + NOT(b) + 1 at ``width`` bits; returns (sum, carry_out)."""
    mask = (1 << width) - 1
    total = a + (~b & mask) + 1
    return total & mask, total >> width


def mod_addsub(a: Word, b: Word, q: Union[int, Modulus], op: str = "add", word_bits: int = 32) -> Word:
    """(a +/- b) mod q.

    Subtraction is the CEM mapping: NOT of the subtrahend, ADD with carry-in 1
    at ``word_bits``, then add q back when no carry came out (a borrow).
    """
    qv = int(q)
    _check_residues(qv, a, b)
    if qv.bit_length() >= word_bits:
        word_bits = 64 if qv.bit_length() < 64 else 2 * qv.bit_length()
    vector = _is_array(a) or _is_array(b)
    if vector:
        dtype = object if word_bits >= 62 else np.int64
        a = np.asarray(a).astype(dtype)
        b = np.asarray(b).astype(dtype)
    op = op.lower()
    if op == "add":
        r = conditional_subtract(a + b, qv)
    elif op == "sub":
        mask = (1 << word_bits) - 1
        diff, carry = not_add(a, b, word_bits)
        borrow = carry - 1  # all ones when the addition produced no carry
        r = (diff + (qv & borrow)) & mask
    else:
        raise DomainError(f"unknown op {op!r}")
    return r.astype(np.uint64) if vector else r


def vec_add_mod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    """Lane-wise modular add without operand validation (hot path for ring ops)."""
    if a.dtype == object:
        s = a + b
        return np.where(s >= q, s - q, s)
    s = a + b
    return np.where(s >= np.uint64(q), s - np.uint64(q), s)


def vec_sub_mod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    if a.dtype == object:
        d = a - b
        return np.where(d < 0, d + q, d)
    qq = np.uint64(q)
    return np.where(a >= b, a - b, a + (qq - b))


def vec_neg_mod(a: np.ndarray, q: int) -> np.ndarray:
    if a.dtype == object:
        return np.where(a == 0, 0, q - a)
    return np.where(a == 0, a, np.uint64(q) - a)


# ------------------ Barrett ------------------

def barrett_reduce(x: Word, q: Union[int, Modulus]) -> Word:
    """x mod q for x < q^2 with the base-2 Barrett estimate.

    q1 = x >> (w - 1); q3 = (q1 * mu) >> (w + 1); r = x - q3*q lies in
    [0, 3q) and two conditional subtractions bring it into [0, q).
    """
    m = q if isinstance(q, Modulus) else Modulus.general(int(q))
    if m.kind is not ModulusKind.GENERAL and m.barrett_mu == 0:
        m = Modulus.general(m.value, m.width)
    qv, w, mu = m.value, m.width, m.barrett_mu
    if _is_array(x):
        if x.size and (np.any(x < 0) or np.any(x >= qv * qv)):
            raise DomainError(f"value not below q^2 for q={qv}")
        if x.dtype != object and w > 31:
            x = x.astype(object)
    elif x < 0 or x >= qv * qv:
        raise DomainError(f"{x} not below q^2 = {qv * qv}")
    q1 = x >> (w - 1)
    q3 = (q1 * mu) >> (w + 1)
    r = x - q3 * qv
    r = conditional_subtract(r, qv)
    r = conditional_subtract(r, qv)
    return _finish(r, x)


def vec_barrett(x: np.ndarray, m: Modulus) -> np.ndarray:
    """Barrett without range validation, for products of reduced operands."""
    qv, w, mu = m.value, m.width, m.barrett_mu
    if x.dtype != object and w <= 31:
        q1 = x >> np.uint64(w - 1)
        q3 = (q1 * np.uint64(mu)) >> np.uint64(w + 1)
        r = (x - q3 * np.uint64(qv)).astype(np.int64)
        r = conditional_subtract(r, qv)
        r = conditional_subtract(r, qv)
        return r.astype(np.uint64)
    x = x.astype(object)
    q3 = ((x >> (w - 1)) * mu) >> (w + 1)
    r = x - q3 * qv
    r = np.where(r >= qv, r - qv, r)
    return np.where(r >= qv, r - qv, r)


# ------------------ special moduli ------------------

def special_reduce(x: Word, q: Modulus) -> Word:
    """x mod q for q in {2^k - 1, 2^k, 2^k + 1} without any multiplication.

    low = x & (2^k - 1) and high = x >> k so that x = low + high * 2^k.
    """
    if not isinstance(q, Modulus) or q.kind is ModulusKind.GENERAL:
        raise DomainError("special_reduce needs a 2^k-1, 2^k or 2^k+1 modulus")
    qv, k = q.value, q.k
    if _is_array(x):
        if x.size and (np.any(x < 0) or np.any(x >= qv * qv)):
            raise DomainError(f"value not below q^2 for q={qv}")
    elif x < 0 or x >= qv * qv:
        raise DomainError(f"{x} not below q^2 = {qv * qv}")
    xs = _signed(x)
    low = xs & ((1 << k) - 1)
    high = xs >> k
    if q.kind is ModulusKind.POW2:
        return _finish(low, x)
    if q.kind is ModulusKind.POW2_MINUS_ONE:
        return _finish(conditional_subtract(low + high, qv), x)
    # 2^k + 1: 2^k == -1, so x == low - high
    diff = low - high
    wrapped = low + (qv - high)
    a_mask = sign_mask(diff)
    r = ((wrapped ^ diff) & a_mask) ^ diff
    # high can reach 2^k + 2, leaving r == -1 on one edge value
    r = r + (qv & sign_mask(r))
    return _finish(r, x)


def reduce(x: Word, q: Modulus) -> Word:
    """Dispatch to special_reduce or barrett_reduce by modulus kind."""
    if q.is_special:
        return special_reduce(x, q)
    return barrett_reduce(x, q)


# ------------------ LUT multiply / Karatsuba ------------------

@dataclass
class LutMultiplier:
    """256-entry table of 4-bit by 4-bit products indexed by (a << 4) | b."""
    table: np.ndarray = field(default_factory=lambda: np.array(
        [(i >> 4) * (i & 15) for i in range(256)], dtype=np.uint64))

    def as_bytes(self) -> bytes:
        return bytes(int(v) for v in self.table)


DEFAULT_LUT = LutMultiplier()


def lut_mul4(a: Word, b: Word, lut: LutMultiplier = DEFAULT_LUT) -> Word:
    """a * b for 4-bit operands by table lookup only."""
    if _is_array(a) or _is_array(b):
        idx = (np.asarray(a, dtype=np.uint64) << np.uint64(4)) | np.asarray(b, dtype=np.uint64)
        return lut.table[idx.astype(np.intp)]
    if not (0 <= a < 16 and 0 <= b < 16):
        raise DomainError("lut_mul4 operands must be 4-bit")
    return int(lut.table[(a << 4) | b])


@dataclass
class KaratsubaStats:
    base_multiplications: int = 0
    additions: int = 0
    shifts: int = 0


def _select(bit: Word, value: Word) -> Word:
    """value where bit is 1, else 0 (AND with the sign-extended bit)."""
    if _is_array(bit) or _is_array(value):
        return value * bit
    return value if bit else 0


def _karatsuba(a: Word, b: Word, n: int, lut: LutMultiplier, stats: KaratsubaStats) -> Word:
    if n == 4:
        stats.base_multiplications += 1
        return lut_mul4(a, b, lut)
    h = n // 2
    mask = (1 << h) - 1
    a1, a0 = a >> h, a & mask
    b1, b0 = b >> h, b & mask
    z2 = _karatsuba(a1, b1, h, lut, stats)
    z0 = _karatsuba(a0, b0, h, lut, stats)
    sa, sb = a0 + a1, b0 + b1
    ca, cb = sa >> h, sb >> h
    sa, sb = sa & mask, sb & mask
    # (ca*2^h + sa)(cb*2^h + sb) keeps the recursion on h-bit operands
    mid = _karatsuba(sa, sb, h, lut, stats)
    mid = mid + ((_select(ca, sb) + _select(cb, sa)) << h) + (_select(ca & cb, 1) << n)
    z1 = mid - z2 - z0
    stats.additions += 8
    stats.shifts += 6
    return (z2 << n) + (z1 << h) + z0


def karatsuba_mul(a: Word, b: Word, n: int, lut: LutMultiplier = DEFAULT_LUT,
                  stats: Optional[KaratsubaStats] = None) -> Word:
    """a * b for n-bit operands with 4-bit LUT base multiplications.

    Performs exactly 3 ** log2(n / 4) base multiplications.
    """
    if n not in SUPPORTED_KARATSUBA_WIDTHS:
        raise DomainError(f"unsupported Karatsuba width {n}; expected one of {SUPPORTED_KARATSUBA_WIDTHS}")
    stats = stats if stats is not None else KaratsubaStats()
    if _is_array(a) or _is_array(b):
        a = np.asarray(a)
        b = np.asarray(b)
        if n >= 64 or a.dtype == object:
            raise DomainError("vector Karatsuba supports widths up to 32 bits; use scalar ints for 64")
        limit = 1 << n
        if np.any(a >= limit) or np.any(b >= limit):
            raise DomainError(f"operand exceeds {n} bits")
        return _karatsuba(a.astype(np.uint64), b.astype(np.uint64), n, lut, stats)
    if a < 0 or b < 0 or a >> n or b >> n:
        raise DomainError(f"operand exceeds {n} bits")
    return int(_karatsuba(int(a), int(b), n, lut, stats))


def karatsuba_width(bits: int) -> int:
    for n in SUPPORTED_KARATSUBA_WIDTHS:
        if bits <= n:
            return n
    raise DomainError(f"no Karatsuba width covers {bits} bits")


def mul_mod(a: Word, b: Word, q: Union[int, Modulus], lut: LutMultiplier = DEFAULT_LUT) -> Word:
    """Karatsuba product then Barrett or special reduction by modulus kind."""
    m = q if isinstance(q, Modulus) else Modulus.special(int(q))
    _check_residues(m.value, a, b)
    n = karatsuba_width(max(4, (m.value - 1).bit_length()))
    if _is_array(a) and n == 64:
        prod = np.array([karatsuba_mul(int(x), int(y), n, lut) for x, y in zip(a, b)], dtype=object)
    else:
        prod = karatsuba_mul(a, b, n, lut)
    return reduce(prod, m)


def vec_mul_mod(a: np.ndarray, b: np.ndarray, m: Modulus) -> np.ndarray:
    """Pointwise modular product used by the polynomial ring."""
    if a.dtype != object and m.value < (1 << 31):
        prod = a * b
    else:
        prod = a.astype(object) * b.astype(object)
    if m.is_special:
        return special_reduce(prod, m)
    return vec_barrett(prod, m)


# ------------------ prime search ------------------

def find_ntt_primes(bits: int, n: int, count: int, exclude: tuple = ()) -> List[int]:
    """Largest primes below 2^bits that are 1 mod 2n (admit a 2n-th root of unity)."""
    step = 2 * n
    candidate = ((1 << bits) - 1) // step * step + 1
    found: List[int] = []
    while len(found) < count:
        if candidate < step:
            raise DomainError(f"not enough {bits}-bit NTT primes for N={n}")
        if candidate not in exclude and sympy.isprime(candidate):
            found.append(candidate)
        candidate -= step
    logger.debug("NTT primes for N=%d bits=%d: %s", n, bits, found)
    return found
