import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mace_toy.errors import DimensionMismatch, NotPositiveDefinite
from mace_toy.numerics import (SpdFactor, load_matrix, make_rng, matrix_from_bytes,
                               matrix_to_bytes, save_matrix, sigmoid, softmax_rows, solve_spd)

from oracles import gauss_solve


def random_spd(rng, n, jitter=0.1):
    A = rng.standard_normal((n + 3, n))
    return A.T @ A + jitter * np.eye(n)


@pytest.mark.parametrize("seed", range(10))
def test_solve_spd_matches_gaussian_elimination(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    A = random_spd(rng, n)
    rhs = rng.standard_normal((4, n))
    X = solve_spd(A, rhs)
    ref = gauss_solve(A.T, rhs.T).T
    assert np.allclose(X, ref, rtol=1e-10, atol=1e-12)


def test_factor_reused_for_two_right_hand_sides():
    rng = np.random.default_rng(1)
    A = random_spd(rng, 6)
    f = SpdFactor(A)
    for _ in range(2):
        rhs = rng.standard_normal((3, 6))
        assert np.allclose(f.solve_right(rhs) @ A, rhs, atol=1e-10)


def test_singular_matrix_is_rejected():
    v = np.arange(1.0, 5.0)
    with pytest.raises(NotPositiveDefinite):
        SpdFactor(np.outer(v, v))
    with pytest.raises(NotPositiveDefinite):
        SpdFactor(np.zeros((3, 3)))


def test_nonsquare_and_asymmetric_rejected():
    with pytest.raises(DimensionMismatch):
        SpdFactor(np.ones((2, 3)))
    with pytest.raises(DimensionMismatch):
        SpdFactor(np.array([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(DimensionMismatch):
        SpdFactor(np.eye(3)).solve_right(np.ones((2, 4)))


def test_sigmoid_extremes_do_not_overflow():
    x = np.array([-1000.0, 0.0, 1000.0])
    with np.errstate(over="raise"):
        s = sigmoid(x)
    assert s[0] == 0.0 and s[1] == 0.5 and s[2] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50))
def test_softmax_rows_are_stochastic(r, c, shift):
    M = np.random.default_rng(r * 7 + c).standard_normal((r, c)) * 10 + shift
    S = softmax_rows(M)
    assert np.all(S >= 0)
    assert np.allclose(S.sum(axis=1), 1.0, atol=1e-12)


def test_make_rng_streams_are_stable_and_distinct():
    a = make_rng(3, "lora", "cat").standard_normal(4)
    b = make_rng(3, "lora", "cat").standard_normal(4)
    c = make_rng(3, "lora", "dog").standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_matrix_bytes_round_trip(tmp_path):
    m = np.random.default_rng(0).standard_normal((3, 5))
    assert np.array_equal(matrix_from_bytes(matrix_to_bytes(m)), m)
    save_matrix(tmp_path / "m.mat", m)
    assert np.array_equal(load_matrix(tmp_path / "m.mat"), m)
    buf = matrix_to_bytes(m)
    with pytest.raises(ValueError):
        matrix_from_bytes(buf[:-1])
    with pytest.raises(ValueError):
        matrix_from_bytes(b"XXXX" + buf[4:])
