"""
Full-RNS CKKS over the ring in ``rns``.

Ciphertexts stay in the evaluation domain between operations; only key
switching and rescaling step into the coefficient domain for the limbs they
touch. Key switching decomposes per RNS limb and lifts into an auxiliary
special-prime base P before dividing it back out.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .arith import Modulus, find_ntt_primes, vec_mul_mod
from .errors import DomainError, KeyMissingError, LevelError
from .rns import (
    NTT_COUNTER,
    CrtBasis,
    Domain,
    NttCounter,
    RingParams,
    RnsPolynomial,
    automorphism,
    compose_centered,
    ntt,
    poly_arith,
    poly_neg,
    _dtype_for,
)

logger = logging.getLogger(__name__)

ERROR_SIGMA = 3.2
SECRET_HAMMING_WEIGHT = 64


# ------------------ parameter presets ------------------

def make_params(degree: int, prime_bits: int, levels: int, scale_bits: int,
                special_bits: int = 31, special_count: int = 2, name: str = "") -> RingParams:
    primes = find_ntt_primes(prime_bits, degree, levels)
    specials = find_ntt_primes(special_bits, degree, special_count, exclude=tuple(primes)) if special_count else []
    # q_0 holds the result after the last rescale; the remaining primes are consumed by rescales
    return RingParams(
        degree=degree,
        moduli=tuple(Modulus.general(q) for q in primes),
        scale=float(2 ** scale_bits),
        special_primes=tuple(Modulus.general(p) for p in specials),
        name=name,
    )


PRESETS = {
    "desk": dict(degree=4096, prime_bits=30, levels=3, scale_bits=30, special_bits=30),
    "large-logq": dict(degree=8192, prime_bits=60, levels=3, scale_bits=50, special_bits=61, special_count=1),
    "ppml": dict(degree=1024, prime_bits=30, levels=3, scale_bits=26, special_bits=30),
    "toy": dict(degree=16, prime_bits=30, levels=3, scale_bits=30, special_bits=30),
}


def preset(name: str, **overrides) -> RingParams:
    if name not in PRESETS:
        raise DomainError(f"unknown parameter preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name], name=name)
    kw.update(overrides)
    return make_params(**kw)


# ------------------ encoding ------------------

@dataclass
class Plaintext:
    poly: RnsPolynomial
    scale: float

    @property
    def level(self) -> int:
        return self.poly.level


@dataclass
class Ciphertext:
    c0: RnsPolynomial
    c1: RnsPolynomial
    scale: float

    def __post_init__(self):
        if self.c0.level != self.c1.level or self.c0.domain is not self.c1.domain:
            raise DomainError("ciphertext components disagree on level or domain")
        if self.c0.level < 1:
            raise LevelError("ciphertext has no modulus left")

    @property
    def level(self) -> int:
        return self.c0.level

    @property
    def params(self) -> RingParams:
        return self.c0.params

    def size_bytes(self) -> int:
        return 2 * self.level * self.params.degree * 8


def _slot_exponents(n: int) -> np.ndarray:
    two_n = 2 * n
    out = np.empty(n // 2, dtype=np.int64)
    e = 1
    for j in range(n // 2):
        out[j] = e
        e = (e * 5) % two_n
    return out


def encode(values: Sequence[complex], params: RingParams, scale: Optional[float] = None,
           level: Optional[int] = None) -> Plaintext:
    """Canonical-embedding encoding of up to N/2 slot values at ``scale``."""
    n = params.degree
    scale = float(scale if scale is not None else params.scale)
    level = level or params.levels
    z = np.zeros(n // 2, dtype=np.complex128)
    vals = np.asarray(values, dtype=np.complex128)
    if vals.size > n // 2:
        raise DomainError(f"{vals.size} values exceed {n // 2} slots")
    z[:vals.size] = vals
    exps = _slot_exponents(n)
    u = np.zeros(n, dtype=np.complex128)
    u[(exps - 1) // 2] = z * scale
    u[(2 * n - exps - 1) // 2] = np.conj(z) * scale
    zeta = np.exp(1j * np.pi * np.arange(n) / n)
    coeffs = np.rint(np.real(np.fft.fft(u) / n / zeta))
    moduli = params.moduli[:level]
    budget = math.prod(m.value for m in moduli) / 2
    if np.max(np.abs(coeffs), initial=0.0) >= budget:
        raise DomainError("scaled values overflow the modulus budget")
    poly = RnsPolynomial.from_integers(params, [int(c) for c in coeffs], moduli)
    return Plaintext(ntt(poly), scale)


def decode(pt: Plaintext) -> np.ndarray:
    poly = pt.poly
    if poly.domain is Domain.EVALUATION:
        poly = ntt(poly, "inverse")
    n = poly.params.degree
    coeffs = compose_centered(poly).astype(np.float64)
    zeta = np.exp(1j * np.pi * np.arange(n) / n)
    u = n * np.fft.ifft(coeffs * zeta)
    return u[(_slot_exponents(n) - 1) // 2] / pt.scale


# ------------------ keys ------------------

@dataclass
class SwitchingKey:
    """One (b_i, a_i) pair per digit over the full Q*P base."""
    b: List[RnsPolynomial]
    a: List[RnsPolynomial]


@dataclass
class KeySet:
    params: RingParams
    secret: Optional[RnsPolynomial]  # evaluation domain over Q*P; None on the server side
    public: Tuple[RnsPolynomial, RnsPolynomial]
    relin: SwitchingKey
    rotations: Dict[int, SwitchingKey] = field(default_factory=dict)

    def public_view(self) -> "KeySet":
        """Everything an evaluator needs, without the secret key."""
        return KeySet(self.params, None, self.public, self.relin, dict(self.rotations))


def _full_base(params: RingParams) -> Tuple[Modulus, ...]:
    return params.moduli + params.special_primes


def _uniform(params: RingParams, moduli, rng: np.random.Generator) -> RnsPolynomial:
    chans = []
    for m in moduli:
        if m.value < (1 << 31):
            chans.append(rng.integers(0, m.value, params.degree, dtype=np.uint64))
        else:
            chans.append(np.array([int(v) for v in rng.integers(0, m.value, params.degree, dtype=np.uint64)], dtype=object))
    return RnsPolynomial(params, chans, tuple(moduli), Domain.EVALUATION)


def _small(params: RingParams, coeffs: np.ndarray, moduli) -> RnsPolynomial:
    return ntt(RnsPolynomial.from_integers(params, [int(c) for c in coeffs], moduli))


def _gaussian(params: RingParams, moduli, rng: np.random.Generator) -> RnsPolynomial:
    return _small(params, np.rint(rng.normal(0.0, ERROR_SIGMA, params.degree)), moduli)


def _ternary(params: RingParams, rng: np.random.Generator, weight: Optional[int] = None) -> np.ndarray:
    n = params.degree
    h = min(weight or SECRET_HAMMING_WEIGHT, n // 2)
    s = np.zeros(n, dtype=np.int64)
    pos = rng.choice(n, size=h, replace=False)
    s[pos] = rng.choice([-1, 1], size=h)
    return s


def _switching_key(params: RingParams, s: RnsPolynomial, target: RnsPolynomial,
                   rng: np.random.Generator) -> SwitchingKey:
    """Key that maps a ciphertext part under ``target`` to one under ``s``."""
    base = _full_base(params)
    p_big = params.special_product
    bs, as_ = [], []
    for i, qi in enumerate(params.moduli):
        a = _uniform(params, base, rng)
        e = _gaussian(params, base, rng)
        b = poly_arith(poly_neg(poly_arith(a, s, "mul")), e, "add")
        # P * g_i * target is P * target on limb i and zero on every other limb
        ch = b.channels[i]
        factor = np.full(params.degree, p_big % qi.value, dtype=ch.dtype)
        b.channels[i] = (ch.astype(object) + vec_mul_mod(target.channels[i], factor, qi).astype(object)) % qi.value
        b.channels[i] = b.channels[i].astype(_dtype_for(qi.value))
        bs.append(b)
        as_.append(a)
    return SwitchingKey(bs, as_)


def rotation_galois(k: int, n: int) -> int:
    return pow(5, k % (n // 2), 2 * n)


def keygen(params: RingParams, rng: np.random.Generator, rotations: Sequence[int] = ()) -> KeySet:
    base = _full_base(params)
    s_coeffs = _ternary(params, rng)
    s = _small(params, s_coeffs, base)
    a = _uniform(params, params.moduli, rng)
    e = _gaussian(params, params.moduli, rng)
    s_q = s.restrict(params.moduli)
    pk0 = poly_arith(poly_neg(poly_arith(a, s_q, "mul")), e, "add")
    s2 = poly_arith(s, s, "mul")
    relin = _switching_key(params, s, s2, rng)
    keys = KeySet(params, s, (pk0, a), relin)
    for k in rotations:
        add_rotation_key(keys, k, rng)
    logger.debug("keygen N=%d L=%d rotations=%s", params.degree, params.levels, sorted(keys.rotations))
    return keys


def add_rotation_key(keys: KeySet, k: int, rng: np.random.Generator) -> None:
    if keys.secret is None:
        raise KeyMissingError("rotation keys can only be generated by the secret-key holder")
    params = keys.params
    k %= params.slots
    if k == 0 or k in keys.rotations:
        return
    g = rotation_galois(k, params.degree)
    s_g = automorphism(keys.secret, g)
    keys.rotations[k] = _switching_key(params, keys.secret, s_g, rng)


# ------------------ encryption ------------------

def encrypt(pt: Plaintext, keys: KeySet, rng: np.random.Generator) -> Ciphertext:
    """Secret-key encryption: (-a*s + e + m, a)."""
    if keys.secret is None:
        return encrypt_public(pt, keys, rng)
    params = keys.params
    moduli = pt.poly.moduli
    a = _uniform(params, moduli, rng)
    e = _gaussian(params, moduli, rng)
    s = keys.secret.restrict(moduli)
    c0 = poly_arith(poly_arith(poly_neg(poly_arith(a, s, "mul")), e, "add"), pt.poly, "add")
    return Ciphertext(c0, a, pt.scale)


def encrypt_public(pt: Plaintext, keys: KeySet, rng: np.random.Generator) -> Ciphertext:
    """Public-key encryption: (v*pk0 + e0 + m, v*pk1 + e1) with ternary v."""
    params = keys.params
    moduli = pt.poly.moduli
    v = _small(params, _ternary(params, rng, weight=params.degree // 2), moduli)
    e0 = _gaussian(params, moduli, rng)
    e1 = _gaussian(params, moduli, rng)
    pk0 = keys.public[0].restrict(moduli)
    pk1 = keys.public[1].restrict(moduli)
    c0 = poly_arith(poly_arith(poly_arith(v, pk0, "mul"), e0, "add"), pt.poly, "add")
    c1 = poly_arith(poly_arith(v, pk1, "mul"), e1, "add")
    return Ciphertext(c0, c1, pt.scale)


def decrypt(ct: Ciphertext, keys: KeySet) -> Plaintext:
    if keys.secret is None:
        raise KeyMissingError("decryption needs the secret key")
    s = keys.secret.restrict(ct.c0.moduli)
    m = poly_arith(ct.c0, poly_arith(ct.c1, s, "mul"), "add")
    return Plaintext(m, ct.scale)


def decrypt_decode(ct: Ciphertext, keys: KeySet) -> np.ndarray:
    return decode(decrypt(ct, keys))


# ------------------ homomorphic operations ------------------

def _check_compatible(ct: Ciphertext, other_level: int, other_scale: float):
    if ct.level != other_level:
        raise LevelError(f"level mismatch: {ct.level} vs {other_level}")
    if not math.isclose(ct.scale, other_scale, rel_tol=1e-9):
        raise DomainError(f"scale mismatch: {ct.scale} vs {other_scale}")


def he_add(ct: Ciphertext, other: Ciphertext) -> Ciphertext:
    _check_compatible(ct, other.level, other.scale)
    return Ciphertext(poly_arith(ct.c0, other.c0, "add"), poly_arith(ct.c1, other.c1, "add"), ct.scale)


def he_sub(ct: Ciphertext, other: Ciphertext) -> Ciphertext:
    _check_compatible(ct, other.level, other.scale)
    return Ciphertext(poly_arith(ct.c0, other.c0, "sub"), poly_arith(ct.c1, other.c1, "sub"), ct.scale)


def he_add_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _check_compatible(ct, pt.level, pt.scale)
    return Ciphertext(poly_arith(ct.c0, pt.poly, "add"), ct.c1, ct.scale)


def he_sub_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _check_compatible(ct, pt.level, pt.scale)
    return Ciphertext(poly_arith(ct.c0, pt.poly, "sub"), ct.c1, ct.scale)


def he_mul_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    """Multiply by a plaintext; the output scale is the product of both scales."""
    if ct.level != pt.level:
        raise LevelError(f"level mismatch: {ct.level} vs {pt.level}")
    return Ciphertext(poly_arith(ct.c0, pt.poly, "mul"), poly_arith(ct.c1, pt.poly, "mul"), ct.scale * pt.scale)


def drop_level(ct: Ciphertext, level: int) -> Ciphertext:
    """Discard trailing moduli without touching the scale."""
    if level < 1 or level > ct.level:
        raise LevelError(f"cannot drop from level {ct.level} to {level}")
    moduli = ct.c0.moduli[:level]
    return Ciphertext(ct.c0.restrict(moduli), ct.c1.restrict(moduli), ct.scale)


def _mod_down(acc: RnsPolynomial, q_moduli: Tuple[Modulus, ...], params: RingParams,
              counter: NttCounter) -> RnsPolynomial:
    """Divide an accumulator over Q_l * P by P, rounding to nearest."""
    specials = params.special_primes
    p_part = ntt(acc.restrict(specials), "inverse", counter)
    basis = CrtBasis(tuple(m.value for m in specials))
    lifted = np.zeros(params.degree, dtype=object)
    for ch, h, hi, p in zip(p_part.channels, basis.hats, basis.hat_invs, basis.moduli):
        lifted += ((ch.astype(object) * hi) % p) * h
    lifted %= basis.product
    lifted = np.where(lifted > basis.product // 2, lifted - basis.product, lifted)
    correction = ntt(RnsPolynomial.from_integers(params, list(lifted), q_moduli), "forward", counter)
    diff = poly_arith(acc.restrict(q_moduli), correction, "sub")
    chans = []
    for m, ch in zip(q_moduli, diff.channels):
        pinv = np.full(params.degree, pow(basis.product % m.value, -1, m.value), dtype=ch.dtype)
        chans.append(vec_mul_mod(ch, pinv, m))
    return RnsPolynomial(params, chans, q_moduli, Domain.EVALUATION)


def key_switch(d: RnsPolynomial, key: SwitchingKey, counter: NttCounter = NTT_COUNTER) -> Tuple[RnsPolynomial, RnsPolynomial]:
    """Return (k0, k1) with k0 + k1*s ~= d * s' for the key's source secret s'."""
    params = d.params
    q_moduli = d.moduli
    ext = q_moduli + params.special_primes
    coeff = ntt(d, "inverse", counter)
    acc0 = RnsPolynomial.zero(params, ext, Domain.EVALUATION)
    acc1 = RnsPolynomial.zero(params, ext, Domain.EVALUATION)
    for i, qi in enumerate(q_moduli):
        digit = coeff.channels[i].astype(object)
        lifted = RnsPolynomial.from_integers(params, list(digit), ext)
        lifted = ntt(lifted, "forward", counter)
        acc0 = poly_arith(acc0, poly_arith(lifted, key.b[i].restrict(ext), "mul"), "add")
        acc1 = poly_arith(acc1, poly_arith(lifted, key.a[i].restrict(ext), "mul"), "add")
    return _mod_down(acc0, q_moduli, params, counter), _mod_down(acc1, q_moduli, params, counter)


def relinearize(d0: RnsPolynomial, d1: RnsPolynomial, d2: RnsPolynomial, keys: KeySet,
                scale: float, counter: NttCounter = NTT_COUNTER) -> Ciphertext:
    k0, k1 = key_switch(d2, keys.relin, counter)
    return Ciphertext(poly_arith(d0, k0, "add"), poly_arith(d1, k1, "add"), scale)


def rescale(ct: Ciphertext, counter: NttCounter = NTT_COUNTER) -> Ciphertext:
    """Divide by the last modulus and drop it; scale becomes scale / q_last."""
    if ct.level < 2:
        raise LevelError("rescale needs at least two moduli")
    params = ct.params
    q_last = ct.c0.moduli[-1]
    keep = ct.c0.moduli[:-1]
    out = []
    for part in (ct.c0, ct.c1):
        last = ntt(part.restrict((q_last,)), "inverse", counter).channels[0].astype(object)
        last = np.where(last > q_last.value // 2, last - q_last.value, last)
        corr = ntt(RnsPolynomial.from_integers(params, list(last), keep), "forward", counter)
        diff = poly_arith(part.restrict(keep), corr, "sub")
        chans = []
        for m, ch in zip(keep, diff.channels):
            inv = np.full(params.degree, pow(q_last.value % m.value, -1, m.value), dtype=ch.dtype)
            chans.append(vec_mul_mod(ch, inv, m))
        out.append(RnsPolynomial(params, chans, keep, Domain.EVALUATION))
    return Ciphertext(out[0], out[1], ct.scale / q_last.value)


def he_mul(ct: Ciphertext, other: Ciphertext, keys: KeySet, do_rescale: bool = True,
           counter: NttCounter = NTT_COUNTER) -> Ciphertext:
    """Tensor, relinearize and (by default) rescale."""
    if ct.level != other.level:
        raise LevelError(f"level mismatch: {ct.level} vs {other.level}")
    if ct.level < 2 and do_rescale:
        raise LevelError("multiplication needs two moduli to rescale into")
    d0 = poly_arith(ct.c0, other.c0, "mul")
    d1 = poly_arith(poly_arith(ct.c0, other.c1, "mul"), poly_arith(ct.c1, other.c0, "mul"), "add")
    d2 = poly_arith(ct.c1, other.c1, "mul")
    out = relinearize(d0, d1, d2, keys, ct.scale * other.scale, counter)
    logger.debug("he_mul level=%d scale=2^%.2f", out.level, math.log2(out.scale))
    return rescale(out, counter) if do_rescale else out


def he_rotate(ct: Ciphertext, k: int, keys: KeySet, counter: NttCounter = NTT_COUNTER) -> Ciphertext:
    """Rotate slots left by k: slot j receives slot j + k."""
    slots = ct.params.slots
    k %= slots
    if k == 0:
        return ct
    if k not in keys.rotations:
        raise KeyMissingError(f"no rotation key for k={k}")
    g = rotation_galois(k, ct.params.degree)
    c0 = automorphism(ct.c0, g)
    c1 = automorphism(ct.c1, g)
    k0, k1 = key_switch(c1, keys.rotations[k], counter)
    return Ciphertext(poly_arith(c0, k0, "add"), k1, ct.scale)


def noise_budget_bits(ct: Ciphertext) -> float:
    """log2 of the remaining modulus headroom above the scale."""
    q = math.prod(m.value for m in ct.c0.moduli)
    return math.log2(q) - math.log2(ct.scale) - 1
