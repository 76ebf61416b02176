from __future__ import annotations

import numpy as np
import pytest

from fedpgp.errors import InvalidParameterError, NumericalFailureError, ShapeError
from fedpgp.numkit import Rng
from fedpgp.prompt import (LowRankAdapter, compose, init_adapter, init_full_rank, init_global, numerical_rank,
                           sgd_step)


def test_init_global_deterministic_and_scaled():
    a = init_global(Rng(1), 32, 16, 0.02)
    assert np.array_equal(a, init_global(Rng(1), 32, 16, 0.02))
    assert a.std() == pytest.approx(0.02, rel=0.2)


@pytest.mark.parametrize("scale", [0.0, -0.1])
def test_init_global_rejects_scale(scale):
    with pytest.raises(InvalidParameterError):
        init_global(Rng(0), 4, 4, scale)


def test_init_adapter_is_noop():
    p = init_global(Rng(0), 8, 4)
    a = init_adapter(Rng(1), 8, 4, 2)
    assert a.U.shape == (8, 2) and a.V.shape == (2, 4)
    assert np.all(a.delta() == 0)
    assert np.array_equal(compose(p, a), p)


@pytest.mark.parametrize("b", [0, 5])
def test_init_adapter_bounds(b):
    with pytest.raises(InvalidParameterError):
        init_adapter(Rng(0), 8, 4, b)


def test_compose_rank_one():
    p = np.zeros((3, 2))
    a = LowRankAdapter(U=np.array([[1.0], [0], [0]]), V=np.array([[1.0, 0]]))
    out = compose(p, a)
    expect = np.zeros((3, 2))
    expect[0, 0] = 1
    np.testing.assert_array_equal(out, expect)
    np.testing.assert_array_equal(out, compose(p, a))


def test_compose_shape_mismatch():
    with pytest.raises(ShapeError):
        compose(np.zeros((3, 3)), LowRankAdapter(np.ones((3, 1)), np.ones((1, 2))))


@pytest.mark.parametrize("b", [1, 2, 4, 8])
def test_random_adapter_rank_bound(b):
    rng = Rng(b)
    a = LowRankAdapter(rng.normal_array((16, b)), rng.normal_array((b, 12)))
    s = np.linalg.svd(compose(rng.normal_array((16, 12)), a) - 0, compute_uv=False)
    assert s.size == 12
    assert numerical_rank(a.delta()) <= b


def test_full_rank_starts_at_zero():
    assert np.all(init_full_rank(4, 3).delta() == 0)


def test_sgd_zero_grad_and_exact_cancel():
    p = {"p_G": np.ones((2, 2))}
    assert np.array_equal(sgd_step(p, {"p_G": np.zeros((2, 2))}, 0.5)["p_G"], p["p_G"])
    assert np.all(sgd_step(p, {"p_G": p["p_G"]}, 1.0)["p_G"] == 0)


def test_sgd_quadratic_descent():
    p = Rng(3).normal_array((4, 4))
    for eta in (0.1, 1.0, 1.9):
        q = sgd_step({"p": p}, {"p": p}, eta)["p"]
        assert 0.5 * np.sum(q ** 2) < 0.5 * np.sum(p ** 2)


def test_sgd_rejects_nan():
    with pytest.raises(NumericalFailureError):
        sgd_step({"p": np.zeros(2)}, {"p": np.array([np.nan, 0])}, 0.1)
    with pytest.raises(InvalidParameterError):
        sgd_step({"p": np.zeros(2)}, {"p": np.zeros(2)}, -1.0)
