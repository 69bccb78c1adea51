import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import fsum_frobenius, jacobi_sigma_max, naive_matmul
from vitplasticity.linalg import (
    DegeneratePairError,
    DimensionError,
    NormKind,
    check_norm_lemma,
    frobenius_norm,
    matmul,
    norm,
    power_iteration,
    product_spectral_norm,
    softmax_lipschitz_witness,
    softmax_rows,
    spectral_norm,
)

# moderate magnitudes: subnormal entries would underflow in the Gram matrix
finite = st.integers(-3000, 3000).map(lambda i: i / 7.0)


def matrices(max_side=8):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), b), b)

    def test_orthogonal_supports_give_zero(self):
        out = matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[0.0, 0.0], [0.0, 1.0]]))
        assert np.array_equal(out, np.zeros((2, 2)))

    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        ref = naive_matmul(a, b)
        assert np.max(np.abs(matmul(a, b) - ref)) <= 1e-12 * np.max(np.abs(ref))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_bit_reproducible(self, rng):
        a, b = rng.standard_normal((30, 20)), rng.standard_normal((20, 10))
        assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


class TestFrobenius:
    def test_zero(self):
        assert frobenius_norm(np.zeros((3, 3))) == 0.0

    def test_three_four_five(self):
        assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0

    def test_extended_precision_oracle(self, rng):
        for _ in range(20):
            a = rng.standard_normal((rng.integers(1, 30), rng.integers(1, 30))) * 10.0 ** rng.integers(-5, 5)
            assert frobenius_norm(a) == pytest.approx(fsum_frobenius(a), rel=1e-14)

    def test_no_overflow(self):
        assert frobenius_norm(np.array([3e200, 4e200])) == pytest.approx(5e200, rel=1e-15)

    def test_norm_dispatch(self):
        a = np.array([[3.0, -4.0]])
        assert norm(a, NormKind.FROBENIUS) == 5.0
        assert norm(a, NormKind.EUCLIDEAN) == 5.0
        assert norm(a, NormKind.INF_VECTOR) == 4.0
        assert norm(a, NormKind.SPECTRAL) == pytest.approx(5.0, rel=1e-12)


class TestSpectral:
    def test_diagonal(self):
        assert spectral_norm(np.diag([3.0, 4.0])) == pytest.approx(4.0, rel=1e-9)

    def test_zero_short_circuits(self):
        res = power_iteration(np.zeros((4, 3)))
        assert res.value == 0.0 and res.converged and res.iterations == 0

    def test_random_6x6_matches_jacobi(self, rng):
        a = rng.standard_normal((6, 6))
        assert spectral_norm(a) == pytest.approx(jacobi_sigma_max(a), rel=1e-8)

    def test_nonconvergence_is_flagged(self, rng):
        a = rng.standard_normal((6, 6))
        res = power_iteration(a, max_iters=1)
        assert not res.converged and res.iterations == 1 and res.value > 0

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            power_iteration(np.eye(2), tol=0.0)
        with pytest.raises(ValueError):
            power_iteration(np.eye(2), max_iters=0)

    def test_deterministic(self, rng):
        a = rng.standard_normal((9, 5))
        assert power_iteration(a) == power_iteration(a.copy())

    def test_large_matrix_uses_squaring_and_stays_accurate(self, rng):
        a = rng.standard_normal((400, 300))
        exact = np.linalg.svd(a, compute_uv=False)[0]
        assert spectral_norm(a) == pytest.approx(exact, rel=1e-8)

    def test_product_spectral_norm(self, rng):
        left, right = rng.standard_normal((20, 3)), rng.standard_normal((3, 20))
        assert product_spectral_norm(left, right) == pytest.approx(spectral_norm(left @ right), rel=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(matrices())
    def test_transpose_invariance(self, a):
        s, t = spectral_norm(a), spectral_norm(a.T)
        assert s == pytest.approx(t, rel=1e-8, abs=1e-300)

    @settings(max_examples=60, deadline=None)
    @given(matrices())
    def test_sandwiched_by_frobenius(self, a):
        f, s = frobenius_norm(a), spectral_norm(a)
        assert s <= f * (1 + 1e-8)
        assert s >= f / math.sqrt(min(a.shape)) * (1 - 1e-8)


class TestSoftmax:
    def test_symmetric_row(self):
        assert np.allclose(softmax_rows(np.array([[0.0, 0.0]])), 0.5)

    def test_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert abs(out[0, 0] - 1.0) <= 1e-12 and abs(out[0, 1]) <= 1e-12

    @settings(max_examples=80, deadline=None)
    @given(matrices(12))
    def test_rows_are_distributions(self, a):
        s = softmax_rows(a)
        assert np.all(s >= 0)
        assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-12)
        assert frobenius_norm(s) <= math.sqrt(a.shape[0]) * (1 + 1e-12)


class TestNormLemma:
    def test_identity(self):
        assert check_norm_lemma(np.eye(3), np.eye(3)).all()

    def test_equality_case(self):
        v = check_norm_lemma(np.array([[2.0]]), np.array([[2.0]]))
        assert v.all()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            check_norm_lemma(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_random_pairs(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        assert check_norm_lemma(r.standard_normal((m, k)), r.standard_normal((k, n))).all()


class TestSoftmaxLipschitz:
    def test_small_step_limit(self):
        # softmax((t,0)) − softmax((0,0)) ≈ (t/4, −t/4) while ‖u − v‖ = t
        t = 1e-6
        ratio = softmax_lipschitz_witness(np.array([t, 0.0]), np.zeros(2))
        expected = math.sqrt(2.0) / 4.0
        assert ratio == pytest.approx(expected, rel=1e-5)

    def test_shift_invariance(self, rng):
        v = rng.standard_normal(6)
        assert softmax_lipschitz_witness(v + 3.0, v) == pytest.approx(0.0, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegeneratePairError):
            softmax_lipschitz_witness(np.ones(3), np.ones(3))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 16).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))))
    def test_half_lipschitz(self, pair):
        u, v = pair
        if np.array_equal(u, v):
            return
        assert softmax_lipschitz_witness(u, v) <= 0.5
