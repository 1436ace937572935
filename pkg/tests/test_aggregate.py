import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from feddar.aggregate import (
    HeadUpdateMsg,
    aggregate_heads,
    normalize_weights,
    second_order_aggregate,
    weighted_average,
)
from feddar.model import EncoderParams


def ls_messages(rng, k, sizes):
    """Locally exact least-squares heads with mean Hessians, plus the pooled data."""
    Phis = [rng.standard_normal((L, k)) for L in sizes]
    ys = [rng.standard_normal(L) for L in sizes]
    msgs = [HeadUpdateMsg(0, np.linalg.lstsq(P, y, rcond=None)[0], P.T @ P / len(y), len(y))
            for P, y in zip(Phis, ys)]
    return msgs, np.vstack(Phis), np.concatenate(ys)


def test_weighted_average_examples():
    assert weighted_average([1.0, 6.0], [0.8, 0.2]) == pytest.approx(2.0, abs=1e-15)
    np.testing.assert_array_equal(weighted_average([np.arange(3.0)], [5]), np.arange(3.0))
    np.testing.assert_allclose(weighted_average([np.zeros(2), np.full(2, 4.0)], [1, 1]), [2.0, 2.0])


def test_weighted_average_structures():
    a = EncoderParams("linear", B=np.ones((3, 2)))
    b = EncoderParams("linear", B=np.zeros((3, 2)))
    out = weighted_average([a, b], [3, 1])
    np.testing.assert_allclose(out.B, 0.75)
    d = weighted_average([{"x": np.ones(2)}, {"x": np.zeros(2)}], [1, 3])
    np.testing.assert_allclose(d["x"], 0.25)


def test_weighted_average_errors():
    with pytest.raises(ValueError):
        weighted_average([], [])
    with pytest.raises(ValueError):
        weighted_average([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        weighted_average([np.ones(2), np.ones(3)], [1, 1])
    with pytest.raises(ValueError):
        weighted_average([{"a": 1.0}, {"b": 1.0}], [1, 1])
    with pytest.raises(ValueError):
        normalize_weights([1.0, -1.0])
    with pytest.raises(ValueError):
        normalize_weights([0.0, 0.0])


def test_single_message_is_returned_exactly():
    w = np.array([0.1, -3.0])
    msg = HeadUpdateMsg(2, w, np.array([[2.0, 1.0], [1.0, 5.0]]), 7)
    np.testing.assert_array_equal(second_order_aggregate([msg]), w)


def test_equal_hessians_give_weighted_average():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((3, 3))
    H = G @ G.T + np.eye(3)
    msgs = [HeadUpdateMsg(0, rng.standard_normal(3), H, c) for c in (4, 9, 2)]
    wa = weighted_average([m.head for m in msgs], [m.count for m in msgs])
    assert np.max(np.abs(second_order_aggregate(msgs) - wa)) <= 1e-12


def test_two_hand_built_clients_give_pooled_solution():
    P1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y1 = np.array([1.0, 2.0, 2.5])
    P2 = np.array([[2.0, 1.0], [1.0, -1.0]])
    y2 = np.array([0.0, 1.0])
    msgs = [HeadUpdateMsg(0, np.linalg.lstsq(P, y, rcond=None)[0], P.T @ P / len(y), len(y))
            for P, y in ((P1, y1), (P2, y2))]
    P, y = np.vstack([P1, P2]), np.concatenate([y1, y2])
    ref = np.linalg.solve(P.T @ P, P.T @ y)
    np.testing.assert_allclose(second_order_aggregate(msgs), ref, rtol=1e-8)


@given(st.integers(0, 100_000), st.integers(1, 8), st.integers(2, 5))
def test_quadratic_exactness(seed, k, n):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(k, k + 12, n)
    msgs, P, y = ls_messages(rng, k, sizes)
    ref = np.linalg.lstsq(P, y, rcond=None)[0]
    w = second_order_aggregate(msgs)
    assert np.linalg.norm(w - ref) <= 1e-8 * max(np.linalg.norm(ref), 1e-12)


@given(st.integers(0, 100_000), st.integers(1, 6), st.integers(2, 5))
def test_permutation_invariance(seed, k, n):
    rng = np.random.default_rng(seed)
    msgs, _, _ = ls_messages(rng, k, rng.integers(k, k + 8, n))
    w = second_order_aggregate(msgs)
    perm = rng.permutation(n)
    w2 = second_order_aggregate([msgs[i] for i in perm])
    assert np.max(np.abs(w - w2)) <= 1e-14 * max(1.0, np.max(np.abs(w)))


def test_ill_conditioned_uses_ridge_and_stays_finite():
    H = np.diag([1.0, 1e-13])
    msgs = [HeadUpdateMsg(0, np.array([1.0, 2.0]), H, 3),
            HeadUpdateMsg(0, np.array([3.0, -1.0]), H, 1)]
    agg = aggregate_heads(msgs, "SA")
    assert not agg.fallback
    assert np.all(np.isfinite(agg.head))
    assert agg.head[0] == pytest.approx(1.5)


def test_singular_falls_back_to_weighted_average(caplog):
    msgs = [HeadUpdateMsg(0, np.array([1.0, 2.0]), np.zeros((2, 2)), 3),
            HeadUpdateMsg(0, np.array([3.0, -2.0]), np.zeros((2, 2)), 1)]
    with caplog.at_level(logging.WARNING, logger="feddar.aggregate"):
        agg = aggregate_heads(msgs, "SA")
    assert agg.fallback
    np.testing.assert_allclose(agg.head, [1.5, 1.0])
    assert "fell back" in caplog.text


def test_non_finite_inputs_fall_back():
    msgs = [HeadUpdateMsg(0, np.array([np.inf, 0.0]), np.eye(2), 1),
            HeadUpdateMsg(0, np.array([1.0, 0.0]), np.eye(2), 1)]
    assert aggregate_heads(msgs, "SA").fallback


def test_wa_ignores_hessians_and_unknown_method():
    msgs = [HeadUpdateMsg(0, np.array([0.0]), np.array([[9.0]]), 1),
            HeadUpdateMsg(0, np.array([4.0]), np.array([[1.0]]), 3)]
    agg = aggregate_heads(msgs, "WA")
    assert agg.head[0] == 3.0 and not agg.fallback
    with pytest.raises(ValueError):
        aggregate_heads(msgs, "median")
    with pytest.raises(ValueError):
        aggregate_heads([], "SA")
