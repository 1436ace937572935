"""Server-side aggregation of client updates.

``weighted_average`` is the usual sample-count weighted mean. For heads we
also provide second-order aggregation: given local heads ``w_i`` and their
loss Hessians ``H_i``, the server returns

    w = (sum_i a_i H_i)^{-1} sum_i a_i H_i w_i,   a_i = count_i / sum(count).

For squared-error heads trained to their local optimum this is exactly the
minimiser of the pooled objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .model import EncoderParams
from .numerics import SingularMatrixError, condition_number, solve_spd

log = logging.getLogger(__name__)

COND_THRESHOLD = 1e10
RIDGE_COEFF = 1e-8


@dataclass
class HeadUpdateMsg:
    """A client's head for one domain after local training."""

    domain: int
    head: np.ndarray
    hessian: np.ndarray
    count: int
    loss_trace: list = field(default_factory=list, repr=False)


class HeadAggregate(NamedTuple):
    head: np.ndarray
    fallback: bool


def normalize_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise ValueError("need at least one weight")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    return w / total


def weighted_average(values: Sequence, weights) -> object:
    """Entrywise ``sum_i a_i * values[i]`` with ``a`` renormalised to sum to 1.

    ``values`` may hold arrays, dicts of arrays, or EncoderParams; all
    entries must share the same structure and shapes. Accumulation runs in
    list order so the result does not depend on any parallel scheduling.
    """
    if len(values) == 0:
        raise ValueError("cannot average an empty list")
    a = normalize_weights(weights)
    if len(a) != len(values):
        raise ValueError("one weight per value required")
    first = values[0]
    if isinstance(first, EncoderParams):
        tensors = weighted_average([v.tensors() for v in values], a)
        return first.with_tensors(tensors)
    if isinstance(first, dict):
        keys = list(first)
        for v in values[1:]:
            if list(v) != keys:
                raise ValueError("parameter collections have different keys")
        return {k: weighted_average([v[k] for v in values], a) for k in keys}
    arrays = [np.asarray(v, dtype=np.float64) for v in values]
    shape = arrays[0].shape
    acc = np.zeros(shape)
    for ai, v in zip(a, arrays):
        if v.shape != shape:
            raise ValueError(f"shape mismatch: {v.shape} vs {shape}")
        acc = acc + ai * v
    return acc


def aggregate_heads(msgs: Sequence[HeadUpdateMsg], method: str = "SA",
                    cond_threshold: float = COND_THRESHOLD,
                    ridge_coeff: float = RIDGE_COEFF) -> HeadAggregate:
    """Aggregate one domain's head messages with ``"WA"`` or ``"SA"``."""
    if not msgs:
        raise ValueError("no messages to aggregate")
    counts = [m.count for m in msgs]
    heads = [m.head for m in msgs]
    if method == "WA":
        return HeadAggregate(weighted_average(heads, counts), False)
    if method != "SA":
        raise ValueError(f"unknown aggregation {method!r}")
    if len(msgs) == 1:
        return HeadAggregate(np.array(heads[0], dtype=np.float64), False)

    a = normalize_weights(counts)
    k = len(heads[0])
    H_bar = np.zeros((k, k))
    b = np.zeros(k)
    with np.errstate(invalid="ignore", over="ignore"):
        for ai, m in zip(a, msgs):
            H_bar = H_bar + ai * m.hessian
            b = b + ai * (m.hessian @ m.head)
    H_bar = 0.5 * (H_bar + H_bar.T)
    if not (np.all(np.isfinite(H_bar)) and np.all(np.isfinite(b))):
        log.warning("second-order aggregation got non-finite inputs; using weighted average")
        return HeadAggregate(weighted_average(heads, counts), True)
    ridge = 0.0
    if condition_number(H_bar) > cond_threshold:
        ridge = ridge_coeff * np.trace(H_bar) / k
    try:
        w = solve_spd(H_bar, b, ridge)
    except SingularMatrixError as exc:
        log.warning("second-order aggregation fell back to weighted average: %s", exc)
        return HeadAggregate(weighted_average(heads, counts), True)
    if not np.all(np.isfinite(w)):
        log.warning("second-order aggregation produced non-finite head; using weighted average")
        return HeadAggregate(weighted_average(heads, counts), True)
    return HeadAggregate(w, False)


def second_order_aggregate(msgs: Sequence[HeadUpdateMsg], cond_threshold: float = COND_THRESHOLD,
                           ridge_coeff: float = RIDGE_COEFF) -> np.ndarray:
    """Hessian-weighted head aggregation for a single domain.

    A ridge of ``ridge_coeff * tr(H)/k`` is added when the pooled Hessian's
    condition number exceeds ``cond_threshold``. If the system is still
    singular the weighted average is returned instead (and logged).
    """
    return aggregate_heads(msgs, "SA", cond_threshold, ridge_coeff).head
