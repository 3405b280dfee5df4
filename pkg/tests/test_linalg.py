import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llap import linalg
from llap.errors import DimensionMismatch, IndexOutOfRange, NotPositiveDefinite, NotSquare, NotSymmetric

from conftest import random_spd


def test_cholesky_identity():
    C = linalg.cholesky(np.eye(3))
    assert np.array_equal(C.L, np.eye(3))
    assert C.jitter == 0.0


def test_cholesky_two_by_two():
    C = linalg.cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(C.L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], rtol=1e-15)
    np.testing.assert_allclose(C.L @ C.L.T, [[4.0, 2.0], [2.0, 3.0]], rtol=1e-15)


def test_cholesky_indefinite_exhausts_ladder():
    with pytest.raises(NotPositiveDefinite) as info:
        linalg.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]), max_jitter=1e-6)
    assert info.value.max_jitter == 1e-6


def test_cholesky_malformed():
    with pytest.raises(NotSquare):
        linalg.cholesky(np.ones((2, 3)))
    with pytest.raises(NotSymmetric):
        linalg.cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_jitter_is_smallest_successful_rung():
    M = np.array([[1.0, 1.0], [1.0, 1.0]])  # singular PSD
    C = linalg.cholesky(M, max_jitter=1e-6)
    assert C.jitter in linalg.jitter_ladder(1e-6)
    assert C.jitter > 0
    err = np.linalg.norm(C.L @ C.L.T - (M + C.jitter * np.eye(2))) / np.linalg.norm(M)
    assert err <= 1e-8


def test_jitter_ladder():
    assert linalg.jitter_ladder(0.0) == [0.0]
    np.testing.assert_allclose(linalg.jitter_ladder(1e-8), [0.0, 1e-10, 1e-9, 1e-8])


def test_log_det_examples(rng):
    assert linalg.log_det_psd(linalg.cholesky(np.eye(4))) == 0.0
    assert linalg.log_det_psd(linalg.cholesky(2 * np.eye(2))) == pytest.approx(2 * np.log(2), abs=1e-15)
    M = random_spd(rng, 4)
    assert linalg.log_det_psd(linalg.cholesky(M)) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(M))),
                                                                   abs=1e-10)


def test_solve_examples(rng):
    B = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(linalg.solve(linalg.cholesky(np.eye(3)), B), B)
    np.testing.assert_allclose(linalg.solve(linalg.cholesky(2 * np.eye(3)), np.eye(3)), 0.5 * np.eye(3))
    M = random_spd(rng, 6, cond=1e6)
    X = linalg.solve(linalg.cholesky(M), B := rng.normal(size=(6, 3)))
    assert np.linalg.norm(M @ X - B) / np.linalg.norm(B) <= 1e-8
    with pytest.raises(DimensionMismatch):
        linalg.solve(linalg.cholesky(M), np.ones(5))


def test_quadratic_form_examples(rng):
    e1 = np.array([1.0, 0.0, 0.0])
    assert linalg.quadratic_form(e1, linalg.cholesky(np.eye(3))) == pytest.approx(1.0)
    assert linalg.quadratic_form(e1, linalg.cholesky(2 * np.eye(3))) == pytest.approx(0.5)
    M = random_spd(rng, 5)
    v = rng.normal(size=5)
    assert linalg.quadratic_form(v, linalg.cholesky(M)) == pytest.approx(v @ np.linalg.inv(M) @ v, rel=1e-9)
    with pytest.raises(DimensionMismatch):
        linalg.quadratic_form(np.ones(4), linalg.cholesky(M))


def test_trace_of_inverse_block(rng):
    assert linalg.trace_of_inverse_block(linalg.cholesky(np.eye(3)), [0, 1]) == pytest.approx(2.0)
    assert linalg.trace_of_inverse_block(linalg.cholesky(np.diag([2.0, 4.0])), [1]) == pytest.approx(0.25)
    M = random_spd(rng, 5)
    C = linalg.cholesky(M)
    assert linalg.trace_of_inverse_block(C, range(5)) == pytest.approx(np.trace(np.linalg.inv(M)), rel=1e-12)
    with pytest.raises(IndexOutOfRange):
        linalg.trace_of_inverse_block(C, [5])


def _low_rank(rng, n=7, r=3):
    d = rng.uniform(0.5, 2.0, size=n)
    U = rng.normal(size=(r, n))
    return d, U, np.diag(d) + U.T @ U


def test_diag_plus_low_rank_matches_dense(rng):
    d, U, M = _low_rank(rng)
    op = linalg.DiagPlusLowRank(d, U)
    inv = np.linalg.inv(M)
    assert op.log_det() == pytest.approx(np.linalg.slogdet(M)[1], rel=1e-12)
    B = rng.normal(size=(7, 2))
    np.testing.assert_allclose(op.solve(B), inv @ B, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(op.inverse_diagonal(), np.diag(inv), rtol=1e-10)
    np.testing.assert_allclose(op.absorbed_diagonal(), 1.0 - d * np.diag(inv), rtol=1e-9, atol=1e-12)
    A = rng.normal(size=(4, 7))
    np.testing.assert_allclose(op.sandwich(A), A @ inv @ A.T, rtol=1e-10, atol=1e-12)


def test_block_sq_sums_matches_dense(rng):
    d, U, M = _low_rank(rng)
    inv2 = np.linalg.inv(M) ** 2
    blocks = [np.array([0, 1]), np.array([2, 3, 4]), np.array([5, 6])]
    S = linalg.DiagPlusLowRank(d, U).block_sq_sums(blocks)
    ref = np.array([[inv2[np.ix_(b, c)].sum() for c in blocks] for b in blocks])
    np.testing.assert_allclose(S, ref, rtol=1e-9)


def test_diag_plus_low_rank_rejects_bad_input():
    with pytest.raises(DimensionMismatch):
        linalg.DiagPlusLowRank(np.ones(3), np.ones((2, 4)))
    with pytest.raises(NotPositiveDefinite):
        linalg.DiagPlusLowRank(np.array([1.0, 0.0]), np.ones((1, 2)))


@given(n=st.integers(1, 6), seed=st.integers(0, 2**31 - 1), log_cond=st.floats(0.0, 8.0))
def test_property_logdet_and_residual(n, seed, log_cond):
    rng = np.random.default_rng(seed)
    M = random_spd(rng, n, cond=10.0 ** log_cond)
    C = linalg.cholesky(M)
    assert np.linalg.norm(C.L @ C.L.T - M) <= 1e-8 * np.linalg.norm(M)
    assert linalg.log_det_psd(C) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(M))), abs=1e-8)
    B = rng.normal(size=(n, 2))
    X = linalg.solve(C, B)
    assert np.linalg.norm(M @ X - B) <= 1e-8 * np.linalg.norm(B) * max(1.0, np.linalg.norm(M))


@given(n=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_property_quadratic_form_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    C = linalg.cholesky(random_spd(rng, n))
    v = rng.normal(size=n)
    assert linalg.quadratic_form(v, C) > 0
    assert linalg.quadratic_form(np.zeros(n), C) == 0.0
