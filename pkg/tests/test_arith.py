import numpy as np
import pytest

from src.ppimce.arith import (
    KaratsubaStats, Modulus, ModulusKind, barrett_reduce, karatsuba_mul, lut_mul4, mod_addsub, mul_mod,
    special_reduce, find_ntt_primes,
)
from src.ppimce.errors import DomainError
from src.ppimce.microcode import ModulusShape, cost_table


class TestModAddSub:
    def test_examples(self):
        assert mod_addsub(0, 0, 17, "add") == 0
        assert mod_addsub(5, 12, 17, "add") == 0
        assert mod_addsub(3, 12, 17, "sub") == 8

    def test_exhaustive_small_modulus(self):
        q = 17
        a, b = np.meshgrid(np.arange(q), np.arange(q))
        a, b = a.ravel(), b.ravel()
        assert np.array_equal(mod_addsub(a, b, q, "add"), (a + b) % q)
        assert np.array_equal(mod_addsub(a, b, q, "sub"), (a - b) % q)

    def test_unreduced_operand(self):
        with pytest.raises(DomainError):
            mod_addsub(17, 1, 17)

    def test_wide_modulus(self, rng):
        q = find_ntt_primes(60, 16, 1)[0]
        a = int(rng.integers(0, 1 << 60)) % q
        b = int(rng.integers(0, 1 << 60)) % q
        assert mod_addsub(a, b, q, "sub") == (a - b) % q


class TestReduction:
    def test_barrett_examples(self):
        assert barrett_reduce(0, 17) == 0
        assert barrett_reduce(288, 17) == 16
        with pytest.raises(DomainError):
            barrett_reduce(17 * 17, 17)

    def test_barrett_random_59_bit(self, rng):
        q = find_ntt_primes(59, 16, 1)[0]
        a = rng.integers(0, q, 10 ** 6, dtype=np.int64).astype(object)
        b = rng.integers(0, q, 10 ** 6, dtype=np.int64).astype(object)
        x = a * b
        assert np.array_equal(barrett_reduce(x, q), x % q)

    def test_special_examples(self):
        assert special_reduce(0, Modulus.special(15)) == 0
        assert special_reduce(224, Modulus.special(15)) == 14
        with pytest.raises(DomainError):
            special_reduce(5, Modulus.general(17))

    @pytest.mark.parametrize("q", [15, 16, 17])
    def test_exhaustive_k4(self, q):
        m = Modulus.special(q)
        assert m.is_special and m.k == 4
        x = np.arange(q * q, dtype=np.int64)
        assert np.array_equal(special_reduce(x, m), x % q)
        assert np.array_equal(barrett_reduce(x, q), x % q)

    @pytest.mark.parametrize("k", [13, 16, 30])
    def test_randomized_kinds(self, rng, k):
        for m in (Modulus.pow2_minus_one(k), Modulus.pow2(k), Modulus.pow2_plus_one(k)):
            x = rng.integers(0, m.value, 10 ** 6, dtype=np.int64) * rng.integers(0, m.value, 10 ** 6, dtype=np.int64)
            expected = x % m.value
            assert np.array_equal(special_reduce(x, m).astype(np.int64), expected)
            assert np.array_equal(barrett_reduce(x, m.value).astype(np.int64), expected)

    @pytest.mark.parametrize("width", [14, 30])
    def test_special_moduli_cheaper_than_barrett(self, width):
        # every shape below reduces a modulus of the same bit length
        barrett = cost_table(ModulusShape(ModulusKind.GENERAL, width))["POLYMUL"]
        for kind, k in ((ModulusKind.POW2_MINUS_ONE, width), (ModulusKind.POW2, width - 1),
                        (ModulusKind.POW2_PLUS_ONE, width - 1)):
            assert cost_table(ModulusShape(kind, k))["POLYMUL"] <= 0.90 * barrett


class TestMultiply:
    def test_lut_examples(self):
        assert lut_mul4(0, 9) == 0
        assert lut_mul4(1, 13) == 13
        assert lut_mul4(15, 15) == 225
        with pytest.raises(DomainError):
            lut_mul4(16, 1)

    def test_karatsuba_examples(self):
        assert karatsuba_mul(0, 0xDEADBEEF, 32) == 0
        assert karatsuba_mul(0xBEEF, 0xCAFE, 16) == 0x97337F12
        with pytest.raises(DomainError):
            karatsuba_mul(1, 1, 12)

    def test_karatsuba_exhaustive_8_bit(self):
        a, b = np.meshgrid(np.arange(256, dtype=np.uint64), np.arange(256, dtype=np.uint64))
        assert np.array_equal(karatsuba_mul(a.ravel(), b.ravel(), 8), a.ravel() * b.ravel())

    def test_karatsuba_random_32_bit(self, rng):
        a = rng.integers(0, 1 << 32, 10 ** 6, dtype=np.uint64)
        b = rng.integers(0, 1 << 32, 10 ** 6, dtype=np.uint64)
        # 32-bit by 32-bit products fit uint64 exactly
        assert np.array_equal(karatsuba_mul(a, b, 32), a * b)

    @pytest.mark.parametrize("n", [4, 8, 16, 32, 64])
    def test_base_multiplication_count(self, n):
        stats = KaratsubaStats()
        karatsuba_mul((1 << n) - 1, (1 << n) - 3, n, stats=stats)
        assert stats.base_multiplications == 3 ** int(np.log2(n // 4))

    def test_mul_mod(self, rng):
        assert mul_mod(16, 16, 17) == 1
        assert mul_mod(1, 9, 17) == 9
        q = (1 << 13) + 1
        a = rng.integers(0, q, 10000, dtype=np.uint64)
        b = rng.integers(0, q, 10000, dtype=np.uint64)
        assert np.array_equal(mul_mod(a, b, q).astype(np.uint64), (a * b) % np.uint64(q))
