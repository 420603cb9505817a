"""
AES-128 and the fixed-key correlation-robust hash used for garbling.

Three renditions share the same tables: the step-wise functions (sub_bytes,
shift_rows, mix_columns, add_round_key) match what the LUT fabric, shifter
and CEM compute, a word-oriented T-table path hashes single labels, and a
numpy path hashes whole batches of labels row by row.
State bytes follow FIPS-197 column-major order: byte i sits at row i % 4,
column i // 4.
"""
from __future__ import annotations

from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np

MASK128 = (1 << 128) - 1
FIXED_KEY = bytes(range(16))


def gmul(a: int, b: int) -> int:
    """Multiply in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1."""
    p = 0
    while b:
        if b & 1:
            p ^= a
        a = ((a << 1) ^ 0x1B) & 0xFF if a & 0x80 else a << 1
        b >>= 1
    return p


def _rotl8(x: int, k: int) -> int:
    return ((x << k) | (x >> (8 - k))) & 0xFF


def _build_sbox() -> Tuple[int, ...]:
    box = []
    for x in range(256):
        inv = 0
        if x:
            # x^254 is the multiplicative inverse
            inv, base, e = 1, x, 254
            while e:
                if e & 1:
                    inv = gmul(inv, base)
                base = gmul(base, base)
                e >>= 1
        box.append(inv ^ _rotl8(inv, 1) ^ _rotl8(inv, 2) ^ _rotl8(inv, 3) ^ _rotl8(inv, 4) ^ 0x63)
    return tuple(box)


SBOX = _build_sbox()
MUL2 = tuple(gmul(x, 2) for x in range(256))
MUL3 = tuple(gmul(x, 3) for x in range(256))
SBOX_MUL2 = tuple(MUL2[SBOX[x]] for x in range(256))
SBOX_MUL3 = tuple(MUL3[SBOX[x]] for x in range(256))

# new[i] = old[SHIFT_ROWS[i]]
SHIFT_ROWS = tuple((r + 4 * ((c + r) % 4)) for c in range(4) for r in range(4))
INV_SHIFT_ROWS = tuple(SHIFT_ROWS.index(i) for i in range(16))

RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)


def sub_bytes(state: Sequence[int]) -> List[int]:
    return [SBOX[b] for b in state]


def shift_rows(state: Sequence[int]) -> List[int]:
    return [state[SHIFT_ROWS[i]] for i in range(16)]


def inv_shift_rows(state: Sequence[int]) -> List[int]:
    return [state[INV_SHIFT_ROWS[i]] for i in range(16)]


def mix_columns(state: Sequence[int]) -> List[int]:
    out = [0] * 16
    for c in range(4):
        a0, a1, a2, a3 = state[4 * c:4 * c + 4]
        out[4 * c] = MUL2[a0] ^ MUL3[a1] ^ a2 ^ a3
        out[4 * c + 1] = a0 ^ MUL2[a1] ^ MUL3[a2] ^ a3
        out[4 * c + 2] = a0 ^ a1 ^ MUL2[a2] ^ MUL3[a3]
        out[4 * c + 3] = MUL3[a0] ^ a1 ^ a2 ^ MUL2[a3]
    return out


def sub_mix(state: Sequence[int]) -> List[int]:
    """SubBytes followed by MixColumns from the S, 2*S and 3*S tables with XOR trees."""
    out = [0] * 16
    for c in range(4):
        a0, a1, a2, a3 = state[4 * c:4 * c + 4]
        out[4 * c] = SBOX_MUL2[a0] ^ SBOX_MUL3[a1] ^ SBOX[a2] ^ SBOX[a3]
        out[4 * c + 1] = SBOX[a0] ^ SBOX_MUL2[a1] ^ SBOX_MUL3[a2] ^ SBOX[a3]
        out[4 * c + 2] = SBOX[a0] ^ SBOX[a1] ^ SBOX_MUL2[a2] ^ SBOX_MUL3[a3]
        out[4 * c + 3] = SBOX_MUL3[a0] ^ SBOX[a1] ^ SBOX[a2] ^ SBOX_MUL2[a3]
    return out


def add_round_key(state: Sequence[int], key: Sequence[int]) -> List[int]:
    return [a ^ b for a, b in zip(state, key)]


def expand_key(key: bytes) -> List[bytes]:
    """AES-128 key schedule: eleven 16-byte round keys."""
    if len(key) != 16:
        raise ValueError("AES-128 needs a 16-byte key")
    words = [list(key[4 * i:4 * i + 4]) for i in range(4)]
    for i in range(4, 44):
        t = list(words[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [SBOX[b] for b in t]
            t[0] ^= RCON[i // 4 - 1]
        words.append([a ^ b for a, b in zip(words[i - 4], t)])
    return [bytes(sum(words[4 * r:4 * r + 4], [])) for r in range(11)]


def encrypt_block_steps(key: bytes, block: bytes) -> bytes:
    """Round-by-round AES-128 mirroring the LUT/shifter/CEM mapping."""
    rks = expand_key(key)
    state = add_round_key(block, rks[0])
    for r in range(1, 10):
        state = add_round_key(sub_mix(shift_rows(state)), rks[r])
    state = add_round_key(sub_bytes(shift_rows(state)), rks[10])
    return bytes(state)


# ------------------ T-table path ------------------

def _word_tables():
    te0, te1, te2, te3 = [], [], [], []
    for x in range(256):
        s, s2, s3 = SBOX[x], SBOX_MUL2[x], SBOX_MUL3[x]
        te0.append((s2 << 24) | (s << 16) | (s << 8) | s3)
        te1.append((s3 << 24) | (s2 << 16) | (s << 8) | s)
        te2.append((s << 24) | (s3 << 16) | (s2 << 8) | s)
        te3.append((s << 24) | (s << 16) | (s3 << 8) | s2)
    return tuple(te0), tuple(te1), tuple(te2), tuple(te3)


TE0, TE1, TE2, TE3 = _word_tables()


@lru_cache(maxsize=16)
def round_key_words(key: bytes) -> Tuple[Tuple[int, int, int, int], ...]:
    return tuple(tuple(int.from_bytes(rk[4 * c:4 * c + 4], "big") for c in range(4)) for rk in expand_key(key))


def encrypt_block(key: bytes, block: bytes) -> bytes:
    rk = round_key_words(key)
    k0 = rk[0]
    w0 = int.from_bytes(block[0:4], "big") ^ k0[0]
    w1 = int.from_bytes(block[4:8], "big") ^ k0[1]
    w2 = int.from_bytes(block[8:12], "big") ^ k0[2]
    w3 = int.from_bytes(block[12:16], "big") ^ k0[3]
    for r in range(1, 10):
        k = rk[r]
        t0 = TE0[w0 >> 24] ^ TE1[(w1 >> 16) & 255] ^ TE2[(w2 >> 8) & 255] ^ TE3[w3 & 255] ^ k[0]
        t1 = TE0[w1 >> 24] ^ TE1[(w2 >> 16) & 255] ^ TE2[(w3 >> 8) & 255] ^ TE3[w0 & 255] ^ k[1]
        t2 = TE0[w2 >> 24] ^ TE1[(w3 >> 16) & 255] ^ TE2[(w0 >> 8) & 255] ^ TE3[w1 & 255] ^ k[2]
        t3 = TE0[w3 >> 24] ^ TE1[(w0 >> 16) & 255] ^ TE2[(w1 >> 8) & 255] ^ TE3[w2 & 255] ^ k[3]
        w0, w1, w2, w3 = t0, t1, t2, t3
    k = rk[10]
    S = SBOX
    o0 = (S[w0 >> 24] << 24 | S[(w1 >> 16) & 255] << 16 | S[(w2 >> 8) & 255] << 8 | S[w3 & 255]) ^ k[0]
    o1 = (S[w1 >> 24] << 24 | S[(w2 >> 16) & 255] << 16 | S[(w3 >> 8) & 255] << 8 | S[w0 & 255]) ^ k[1]
    o2 = (S[w2 >> 24] << 24 | S[(w3 >> 16) & 255] << 16 | S[(w0 >> 8) & 255] << 8 | S[w1 & 255]) ^ k[2]
    o3 = (S[w3 >> 24] << 24 | S[(w0 >> 16) & 255] << 16 | S[(w1 >> 8) & 255] << 8 | S[w2 & 255]) ^ k[3]
    return b"".join(o.to_bytes(4, "big") for o in (o0, o1, o2, o3))


# ------------------ garbling hash ------------------

def block_to_bytes(x: int) -> bytes:
    return x.to_bytes(16, "little")


def bytes_to_block(b: bytes) -> int:
    return int.from_bytes(b, "little")


def gf_double(x: int) -> int:
    """Multiply by x in GF(2^128) (the sigma tweak of the hash)."""
    y = (x << 1) & MASK128
    return y ^ 0x87 if x >> 127 else y


class FixedKeyHash:
    """H(x, i) = pi(sigma(x) ^ i) ^ sigma(x) with pi = AES-128 under a public key."""

    def __init__(self, key: bytes = FIXED_KEY):
        self.key = key
        self.calls = 0

    def __call__(self, x: int, tweak: int) -> int:
        self.calls += 1
        sx = gf_double(x)
        return bytes_to_block(encrypt_block(self.key, block_to_bytes(sx ^ tweak))) ^ sx


def aes_hash(block: int, tweak: int, key: bytes = FIXED_KEY) -> int:
    sx = gf_double(block)
    return bytes_to_block(encrypt_block(key, block_to_bytes(sx ^ tweak))) ^ sx


# ------------------ batched path ------------------

_SBOX_NP = np.array(SBOX, dtype=np.uint8)
_MUL2_NP = np.array(MUL2, dtype=np.uint8)
_MUL3_NP = np.array(MUL3, dtype=np.uint8)
_SHIFT_ROWS_NP = np.array(SHIFT_ROWS)


def blocks_from_ints(values: Sequence[int]) -> np.ndarray:
    """128-bit integers as a (len, 16) uint8 array of little-endian rows."""
    data = b"".join(block_to_bytes(v) for v in values)
    return np.frombuffer(data, dtype=np.uint8).reshape(-1, 16)


def ints_from_blocks(blocks: np.ndarray) -> List[int]:
    return [bytes_to_block(row.tobytes()) for row in blocks]


@lru_cache(maxsize=16)
def _round_key_rows(key: bytes) -> Tuple[np.ndarray, ...]:
    return tuple(np.frombuffer(rk, dtype=np.uint8) for rk in expand_key(key))


def _mix_columns_blocks(state: np.ndarray) -> np.ndarray:
    s = state.reshape(-1, 4, 4)
    a0, a1, a2, a3 = s[:, :, 0], s[:, :, 1], s[:, :, 2], s[:, :, 3]
    m2, m3 = _MUL2_NP, _MUL3_NP
    out = np.stack([
        m2[a0] ^ m3[a1] ^ a2 ^ a3,
        a0 ^ m2[a1] ^ m3[a2] ^ a3,
        a0 ^ a1 ^ m2[a2] ^ m3[a3],
        m3[a0] ^ a1 ^ a2 ^ m2[a3],
    ], axis=2)
    return out.reshape(-1, 16)


def encrypt_blocks(key: bytes, blocks: np.ndarray) -> np.ndarray:
    """AES-128 on every row of a (n, 16) uint8 array."""
    rks = _round_key_rows(key)
    state = blocks ^ rks[0]
    for r in range(1, 11):
        state = _SBOX_NP[state][:, _SHIFT_ROWS_NP]
        if r < 10:
            state = _mix_columns_blocks(state)
        state = state ^ rks[r]
    return state


def _double_blocks(x: np.ndarray) -> np.ndarray:
    carry = x[:, 15] >> 7
    low = np.zeros_like(x)
    low[:, 1:] = x[:, :15] >> 7
    y = (x << 1) | low
    y[:, 0] ^= np.where(carry == 1, 0x87, 0).astype(np.uint8)
    return y


def hash_blocks(x: np.ndarray, tweaks: np.ndarray, key: bytes = FIXED_KEY) -> np.ndarray:
    """Row-wise H(x, t); ``tweaks`` is one 16-byte row per block or a single row."""
    sx = _double_blocks(x)
    return encrypt_blocks(key, sx ^ tweaks) ^ sx
