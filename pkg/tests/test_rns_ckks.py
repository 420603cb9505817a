import numpy as np
import pytest

from src.ppimce.arith import Modulus, find_ntt_primes
from src.ppimce.ckks import (
    decode, decrypt_decode, drop_level, encode, encrypt, he_add, he_add_plain, he_mul, he_mul_plain, he_rotate,
    keygen, preset, rescale,
)
from src.ppimce.errors import DomainError, KeyMissingError, LevelError, ParseError
from src.ppimce.rns import (
    Domain, NttCounter, RingParams, RnsPolynomial, automorphism, negacyclic_mul, ntt, poly_arith, rns_compose,
    rns_decompose,
)


@pytest.fixture
def small_ring():
    # 17 = 1 mod 16, the smallest NTT prime for N = 8
    return RingParams(degree=8, moduli=(Modulus.general(17),))


def _poly(params, coeffs):
    return RnsPolynomial.from_integers(params, coeffs, params.moduli)


class TestRingParams:
    def test_rejects_bad_degree(self):
        with pytest.raises(DomainError):
            RingParams(degree=12, moduli=(Modulus.general(17),))
        with pytest.raises(DomainError):
            RingParams(degree=4, moduli=(Modulus.general(17),))

    def test_rejects_non_ntt_prime(self):
        with pytest.raises(DomainError):
            RingParams(degree=8, moduli=(Modulus.general(19),))

    def test_descriptor(self, toy_params):
        back = RingParams.from_json(toy_params.to_json())
        assert back.degree == 16
        assert [m.value for m in back.moduli] == [m.value for m in toy_params.moduli]
        assert back.scale == toy_params.scale
        with pytest.raises(ParseError):
            RingParams.from_json('{"version": 2}')

    def test_unknown_preset(self):
        with pytest.raises(DomainError):
            preset("huge")


class TestNtt:
    def test_roundtrip(self, toy_params, rng):
        coeffs = [int(v) for v in rng.integers(-1000, 1000, toy_params.degree)]
        p = _poly(toy_params, coeffs)
        counter = NttCounter()
        back = ntt(ntt(p, "forward", counter), "inverse", counter)
        assert counter.forward == 1 and counter.inverse == 1
        for a, b in zip(p.channels, back.channels):
            assert np.array_equal(a, b)

    @pytest.mark.parametrize("n", [8, 256, 4096])
    def test_roundtrip_exact(self, n, rng):
        q = find_ntt_primes(30, n, 1)[0]
        params = RingParams(degree=n, moduli=(Modulus.general(q),))
        p = _poly(params, [int(v) for v in rng.integers(0, q, n)])
        forward = ntt(p)
        assert forward.domain is Domain.EVALUATION
        assert np.array_equal(ntt(forward, "inverse").channels[0], p.channels[0])

    def test_domain_checked(self, small_ring):
        p = _poly(small_ring, [1] * 8)
        with pytest.raises(DomainError):
            ntt(p, "inverse")
        with pytest.raises(DomainError):
            poly_arith(p, p, "mul")

    def test_negacyclic_wrap(self, small_ring):
        x = _poly(small_ring, [0, 1, 0, 0, 0, 0, 0, 0])
        x7 = _poly(small_ring, [0, 0, 0, 0, 0, 0, 0, 1])
        # x * x^7 = x^8 = -1
        assert list(negacyclic_mul(x, x7).channels[0]) == [16, 0, 0, 0, 0, 0, 0, 0]

    def test_pointwise_product_matches_convolution(self, small_ring, rng):
        a = _poly(small_ring, [int(v) for v in rng.integers(0, 17, 8)])
        b = _poly(small_ring, [int(v) for v in rng.integers(0, 17, 8)])
        via_ntt = ntt(poly_arith(ntt(a), ntt(b), "mul"), "inverse")
        assert np.array_equal(via_ntt.channels[0], negacyclic_mul(a, b).channels[0])


class TestAutomorphism:
    def test_identity(self, toy_params, rng):
        p = _poly(toy_params, [int(v) for v in rng.integers(0, 100, 16)])
        q = automorphism(p, 1)
        assert all(np.array_equal(a, b) for a, b in zip(p.channels, q.channels))

    def test_monomial(self, small_ring):
        x = _poly(small_ring, [0, 1, 0, 0, 0, 0, 0, 0])
        assert list(automorphism(x, 3).channels[0]) == [0, 0, 0, 1, 0, 0, 0, 0]
        x3 = _poly(small_ring, [0, 0, 0, 1, 0, 0, 0, 0])
        # x^9 = -x
        assert list(automorphism(x3, 3).channels[0]) == [0, 16, 0, 0, 0, 0, 0, 0]

    def test_evaluation_domain_agrees(self, small_ring, rng):
        p = _poly(small_ring, [int(v) for v in rng.integers(0, 17, 8)])
        direct = automorphism(p, 5)
        permuted = ntt(automorphism(ntt(p), 5), "inverse")
        assert np.array_equal(direct.channels[0], permuted.channels[0])

    def test_even_index_rejected(self, small_ring):
        with pytest.raises(DomainError):
            automorphism(_poly(small_ring, [0] * 8), 2)


class TestCrt:
    def test_compose_decompose(self):
        moduli = [3, 5, 7]
        assert rns_decompose(52, moduli) == (1, 2, 3)
        assert rns_compose((1, 2, 3), moduli) == 52
        for x in range(105):
            assert rns_compose(rns_decompose(x, moduli), moduli) == x

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            rns_decompose(105, [3, 5, 7])
        with pytest.raises(DomainError):
            rns_compose((3, 0, 0), [3, 5, 7])
        with pytest.raises(DomainError):
            rns_compose((1, 2), [3, 5, 7])


class TestCkks:
    @pytest.fixture
    def keys(self, toy_params, rng):
        return keygen(toy_params, rng, rotations=[1, 3])

    def _values(self, rng, params):
        return rng.uniform(-1.0, 1.0, params.slots)

    def test_encode_decode(self, toy_params, rng):
        x = self._values(rng, toy_params)
        pt = encode(x, toy_params)
        assert pt.poly.domain is Domain.EVALUATION
        assert np.max(np.abs(decode(pt).real - x)) < 2.0 ** -20

    def test_too_many_values(self, toy_params):
        with pytest.raises(DomainError):
            encode(np.zeros(toy_params.slots + 1), toy_params)

    def test_encrypt_decrypt(self, toy_params, keys, rng):
        x = self._values(rng, toy_params)
        ct = encrypt(encode(x, toy_params), keys, rng)
        assert ct.level == toy_params.levels
        assert np.max(np.abs(decrypt_decode(ct, keys).real - x)) < 2.0 ** -15

    def test_public_key_encryption(self, toy_params, keys, rng):
        x = self._values(rng, toy_params)
        server = keys.public_view()
        ct = encrypt(encode(x, toy_params), server, rng)
        assert np.max(np.abs(decrypt_decode(ct, keys).real - x)) < 2.0 ** -12
        with pytest.raises(KeyMissingError):
            decrypt_decode(ct, server)

    def test_add(self, toy_params, keys, rng):
        x, y = self._values(rng, toy_params), self._values(rng, toy_params)
        ct = he_add(encrypt(encode(x, toy_params), keys, rng), encrypt(encode(y, toy_params), keys, rng))
        assert np.max(np.abs(decrypt_decode(ct, keys).real - (x + y))) < 2.0 ** -19

    def test_add_plain(self, toy_params, keys, rng):
        x, y = self._values(rng, toy_params), self._values(rng, toy_params)
        ct = he_add_plain(encrypt(encode(x, toy_params), keys, rng), encode(y, toy_params))
        assert np.max(np.abs(decrypt_decode(ct, keys).real - (x + y))) < 2.0 ** -15

    def test_mul_and_rescale(self, toy_params, keys, rng):
        x, y = self._values(rng, toy_params), self._values(rng, toy_params)
        a = encrypt(encode(x, toy_params), keys, rng)
        b = encrypt(encode(y, toy_params), keys, rng)
        ct = he_mul(a, b, keys)
        q_last = toy_params.moduli[-1].value
        assert ct.level == toy_params.levels - 1
        assert ct.scale == pytest.approx(toy_params.scale ** 2 / q_last)
        assert np.max(np.abs(decrypt_decode(ct, keys).real - x * y)) < 2.0 ** -10

    def test_mul_plain(self, toy_params, keys, rng):
        x, w = self._values(rng, toy_params), self._values(rng, toy_params)
        ct = rescale(he_mul_plain(encrypt(encode(x, toy_params), keys, rng), encode(w, toy_params)))
        assert np.max(np.abs(decrypt_decode(ct, keys).real - x * w)) < 2.0 ** -10

    def test_rotate(self, toy_params, keys, rng):
        x = self._values(rng, toy_params)
        ct = encrypt(encode(x, toy_params), keys, rng)
        for k in (1, 3):
            got = decrypt_decode(he_rotate(ct, k, keys), keys).real
            assert np.max(np.abs(got - np.roll(x, -k))) < 2.0 ** -10

    def test_rotate_without_key(self, toy_params, keys, rng):
        ct = encrypt(encode(self._values(rng, toy_params), toy_params), keys, rng)
        with pytest.raises(KeyMissingError):
            he_rotate(ct, 2, keys)

    def test_level_exhaustion(self, toy_params, keys, rng):
        ct = drop_level(encrypt(encode(self._values(rng, toy_params), toy_params), keys, rng), 1)
        with pytest.raises(LevelError):
            rescale(ct)
        with pytest.raises(LevelError):
            he_mul(ct, ct, keys)


@pytest.mark.slow
class TestCkksDesk:
    """N = 4096 with three 30-bit primes at scale 2^30."""

    @pytest.fixture(scope="class")
    def desk(self):
        params = preset("desk")
        rng = np.random.default_rng(99)
        return params, keygen(params, rng, rotations=[1]), rng

    def _encrypt(self, desk):
        params, keys, rng = desk
        x = rng.uniform(-0.5, 0.5, params.slots)
        return x, encrypt(encode(x, params), keys, rng)

    def test_shape(self, desk):
        params, _, _ = desk
        assert params.degree == 4096 and params.levels == 3
        assert all(m.value.bit_length() == 30 for m in params.moduli)

    def test_add(self, desk):
        _, keys, _ = desk
        (x, a), (y, b) = self._encrypt(desk), self._encrypt(desk)
        assert np.max(np.abs(decrypt_decode(he_add(a, b), keys).real - (x + y))) < 2.0 ** -19

    def test_rotate(self, desk):
        _, keys, _ = desk
        x, a = self._encrypt(desk)
        got = decrypt_decode(he_rotate(a, 1, keys), keys).real
        assert np.max(np.abs(got - np.roll(x, -1))) < 2.0 ** -19

    def test_mul(self, desk):
        params, keys, _ = desk
        (x, a), (y, b) = self._encrypt(desk), self._encrypt(desk)
        ct = he_mul(a, b, keys)
        assert ct.level == params.levels - 1
        assert np.max(np.abs(decrypt_decode(ct, keys).real - x * y)) < 2.0 ** -12

    def test_depth_two(self, desk):
        params, keys, _ = desk
        (x, a), (y, b), (z, c) = self._encrypt(desk), self._encrypt(desk), self._encrypt(desk)
        ct = he_mul(he_mul(a, b, keys), drop_level(c, params.levels - 1), keys)
        assert ct.level == params.levels - 2
        assert np.max(np.abs(decrypt_decode(ct, keys).real - x * y * z)) < 2.0 ** -12
