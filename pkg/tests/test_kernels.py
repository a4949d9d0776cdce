import numpy as np

import oracles
from sash import _kernels as K

P = K.FIELD_PRIME
EDGES = [0, 1, 2, 58, 59, 60, P - 1, P - 2, 2**63, 2**32, 2**32 - 1]


def test_field_prime():
    assert P == 2**64 - 59


def test_mulmod_add_sub_against_python_ints():
    rng = np.random.default_rng(0)
    vals = [int(v) % P for v in rng.integers(0, 2**64, 400, dtype=np.uint64)] + EDGES
    for a in vals[::7] + EDGES:
        for b in vals:
            ua, ub = np.uint64(a), np.uint64(b)
            assert int(K.mulmod(ua, ub)) == a * b % P
            assert int(K.addmod(ua, ub)) == (a + b) % P
            assert int(K.submod(ua, ub)) == (a - b) % P


def test_powmod_and_inverse():
    for base in (2, 3, P - 1, 123456789):
        for e in (0, 1, 2, 65, P - 2):
            assert int(K.powmod(np.uint64(base), np.uint64(e))) == pow(base, e, P)


def test_poly_eval_matches_oracle():
    rng = np.random.default_rng(4)
    coeffs = rng.integers(0, P, (3, 5), dtype=np.uint64)
    xs = np.array([1, 2, 7, 2**40], dtype=np.uint64)
    got = K.poly_eval(coeffs, xs)
    for c in range(3):
        for i, x in enumerate(xs.tolist()):
            assert int(got[i, c]) == oracles.poly_eval(coeffs[c].tolist(), x)


def test_lagrange_combine_recovers_constant_term():
    rng = np.random.default_rng(5)
    coeffs = rng.integers(0, P, (2, 4), dtype=np.uint64)
    xs = np.array([3, 10, 11, 40], dtype=np.uint64)
    values = K.poly_eval(coeffs, xs)
    lams = K.lagrange_at_zero(xs)
    np.testing.assert_array_equal(K.combine(lams, values), coeffs[:, 0])


def test_inner_products_match_numpy_wraparound():
    rng = np.random.default_rng(6)
    for m in (1, 2, 5, 130):
        cols = rng.integers(0, 2**64, (m, 512), dtype=np.uint64)
        key = rng.integers(0, 2**64, 512, dtype=np.uint64)
        ref = (cols * key).sum(axis=1)  # numpy wraps mod 2^64
        np.testing.assert_array_equal(K.inner_products(cols, key), ref)
        keys = rng.integers(0, 2**64, (3, 512), dtype=np.uint64)
        many = K.inner_products_many(cols, keys, 64)
        for b in range(3):
            np.testing.assert_array_equal(many[b], (cols * keys[b]).sum(axis=1))
