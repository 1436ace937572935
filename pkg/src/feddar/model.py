"""Shared encoder + per-domain linear heads, with hand-written derivatives.

Two encoders are supported:

* ``linear``: ``phi(x) = B^T x``
* ``mlp1``:   ``phi(x) = W2^T tanh(W1^T x + b1) + b2``

either optionally followed by a trainable projection ``P`` (``phi <- P^T phi``).
A head is a vector ``w``; regression predicts ``w^T phi(x)`` and binary
classification predicts ``sigmoid(w^T phi(x))``.

Losses are per-sample means: ``0.5 * (pred - y)**2`` for regression and
clamped binary cross-entropy for classification. Optional sample weights
multiply each term before dividing by the batch size (they are re-weights,
not a normalised weighting), so all-zero weights give a zero loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .numerics import row_dot

TASK_KINDS = ("squared_error", "binary_cross_entropy")
PROB_CLAMP = 1e-12

_TASK_ALIASES = {
    "regression": "squared_error",
    "squared_error": "squared_error",
    "binary_classification": "binary_cross_entropy",
    "binary_cross_entropy": "binary_cross_entropy",
    "classification": "binary_cross_entropy",
}


def task_kind(task: str) -> str:
    try:
        return _TASK_ALIASES[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}") from None


@dataclass(frozen=True)
class EncoderParams:
    """Encoder weights. Unused slots are ``None``.

    The same class doubles as the container for encoder gradients, so
    arithmetic helpers (``axpy``, ``scale``) operate slot by slot. Tensors
    may carry extra leading axes (one slice per client) when a whole
    federation is simulated at once.
    """

    kind: str
    B: np.ndarray | None = None
    W1: np.ndarray | None = None
    b1: np.ndarray | None = None
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None
    P: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "mlp1"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "linear" and self.B is None:
            raise ValueError("linear encoder needs B")
        if self.kind == "mlp1" and any(t is None for t in (self.W1, self.b1, self.W2, self.b2)):
            raise ValueError("mlp1 encoder needs W1, b1, W2, b2")
        if self.kind == "mlp1" and self.W1.shape[-1] != self.W2.shape[-2]:
            raise ValueError("W1/W2 hidden sizes disagree")
        if self.P is not None and self.P.shape[-2] != self.rep_dim:
            raise ValueError("projection input size must equal representation size")

    @property
    def input_dim(self) -> int:
        return (self.B if self.kind == "linear" else self.W1).shape[-2]

    @property
    def rep_dim(self) -> int:
        return (self.B if self.kind == "linear" else self.W2).shape[-1]

    @property
    def out_dim(self) -> int:
        return self.rep_dim if self.P is None else self.P.shape[-1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name != "kind" and getattr(self, f.name) is not None
        }

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> EncoderParams:
        return replace(self, **tensors)

    def map(self, fn) -> EncoderParams:
        return self.with_tensors({k: fn(v) for k, v in self.tensors().items()})

    def axpy(self, alpha: float, other: EncoderParams) -> EncoderParams:
        """``self + alpha * other``."""
        o = other.tensors()
        return self.with_tensors({k: v + alpha * o[k] for k, v in self.tensors().items()})

    def scale(self, alpha: float) -> EncoderParams:
        return self.map(lambda v: alpha * v)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors().values()])

    def from_flat(self, vec: np.ndarray) -> EncoderParams:
        out, pos = {}, 0
        for k, v in self.tensors().items():
            out[k] = np.asarray(vec[pos:pos + v.size], dtype=np.float64).reshape(v.shape)
            pos += v.size
        return self.with_tensors(out)

    def basis(self) -> np.ndarray | None:
        """Linear map ``x -> phi(x)`` as a ``d x out_dim`` matrix, or None for mlp1."""
        if self.kind != "linear":
            return None
        return self.B if self.P is None else self.B @ self.P


def init_encoder(
    kind: str,
    d: int,
    k_rep: int,
    rng: np.random.Generator,
    k_proj: int | None = None,
    hidden: int = 16,
) -> EncoderParams:
    """Gaussian initialisation scaled by fan-in; biases start at zero."""
    P = None if k_proj is None else rng.standard_normal((k_rep, k_proj)) / np.sqrt(k_rep)
    if kind == "linear":
        return EncoderParams("linear", B=rng.standard_normal((d, k_rep)) / np.sqrt(d), P=P)
    if kind == "mlp1":
        return EncoderParams(
            "mlp1",
            W1=rng.standard_normal((d, hidden)) / np.sqrt(d),
            b1=np.zeros(hidden),
            W2=rng.standard_normal((hidden, k_rep)) / np.sqrt(hidden),
            b2=np.zeros(k_rep),
            P=P,
        )
    raise ValueError(f"unknown encoder kind {kind!r}")


def _T(a):
    return np.swapaxes(a, -1, -2)


def _forward(enc: EncoderParams, X: np.ndarray):
    # X: (..., L, d). Leading axes broadcast against stacked parameters.
    cache = {}
    if enc.kind == "linear":
        H = X @ enc.B
    else:
        S = np.tanh(X @ enc.W1 + enc.b1[..., None, :])
        cache["S"] = S
        H = S @ enc.W2 + enc.b2[..., None, :]
    if enc.P is not None:
        cache["H"] = H
        return H @ enc.P, cache
    return H, cache


def features(enc: EncoderParams, X) -> np.ndarray:
    """Encode a batch: rows of ``X`` (L, d) -> rows of the result (L, out_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != enc.input_dim:
        raise ValueError(f"expected inputs of shape (L, {enc.input_dim}), got {X.shape}")
    return _forward(enc, X)[0]


def encode(enc: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return features(enc, x[None, :])[0]
    return features(enc, x)


def sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(t, dtype=np.float64)))


def predict(enc: EncoderParams, head, x, task: str = "regression"):
    """Regression value or positive-class probability for one or many inputs."""
    logits = row_dot(encode(enc, x), head)
    if task_kind(task) == "squared_error":
        return logits
    return sigmoid(logits)


def _per_sample_loss(out: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "squared_error":
        return 0.5 * (out - y) ** 2
    mu = np.clip(sigmoid(out), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu))


def _dloss(out: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    # derivative of the per-sample loss w.r.t. the raw head output
    if kind == "squared_error":
        return out - y
    return sigmoid(out) - y


def _check_batch(X, y, weights=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("empty batch")
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != y.shape:
            raise ValueError("sample_weights must match the batch length")
    return X, y, weights


# Feature-space helpers: the encoder is already applied. Used for head-only
# phases where the encoder is frozen and features can be computed once.

def feature_loss(Phi, w, y, task, weights=None) -> float:
    kind = task_kind(task)
    losses = _per_sample_loss(row_dot(Phi, w), y, kind)
    if weights is not None:
        losses = losses * weights
    return float(np.sum(losses) / len(y))


def feature_gradient(Phi, w, y, task) -> np.ndarray:
    r = _dloss(row_dot(Phi, w), y, task_kind(task))
    return Phi.T @ r / len(y)


def feature_hessian(Phi, w, task) -> np.ndarray:
    L = len(Phi)
    if task_kind(task) == "squared_error":
        H = Phi.T @ Phi / L
    else:
        mu = sigmoid(row_dot(Phi, w))
        H = (Phi * (mu * (1.0 - mu))[:, None]).T @ Phi / L
    return 0.5 * (H + H.T)


def batch_loss(enc, head, X, y, task="regression", sample_weights=None) -> float:
    """Mean per-sample loss of ``h(phi(x))`` over the batch.

    >>> enc = EncoderParams("linear", B=np.eye(2))
    >>> batch_loss(enc, np.array([1.0, 0.0]), np.array([[1.0, 0], [3, 0]]), [0.0, 3.0])
    0.25
    """
    X, y, weights = _check_batch(X, y, sample_weights)
    return feature_loss(features(enc, X), np.asarray(head, dtype=np.float64), y, task, weights)


def head_gradient(enc, head, X, y, task="regression") -> np.ndarray:
    X, y, _ = _check_batch(X, y)
    return feature_gradient(features(enc, X), np.asarray(head, dtype=np.float64), y, task)


def head_hessian(enc, head, X, y=None, task="regression") -> np.ndarray:
    """Hessian of the mean loss w.r.t. the head, ``(1/L) Phi^T S Phi``.

    ``S`` is the identity for squared error and ``diag(mu (1 - mu))`` for
    cross-entropy; labels do not enter either formula.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty batch")
    return feature_hessian(features(enc, X), np.asarray(head, dtype=np.float64), task)


def gather_heads(heads: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Head row for every sample: ``(M, k)`` or ``(..., M, k)`` -> ``(..., L, k)``."""
    if heads.ndim == 2:
        return heads[z]
    return np.take_along_axis(heads, z[..., None], axis=-2)


def domain_onehot(z: np.ndarray, M: int, weights=None) -> np.ndarray:
    out = (z[..., None] == np.arange(M)).astype(np.float64)
    if weights is not None:
        out *= weights[..., None]
    return out


def batched_loss_and_grads(enc: EncoderParams, heads, X, y, z, weights, norm, kind: str,
                           head_grads: bool = True):
    """Vectorised core behind :func:`loss_and_grads`.

    All arrays may carry leading batch axes. ``weights`` multiplies each
    sample's loss (zero for padding rows) and ``norm`` is the divisor per
    batch entry, broadcastable to ``X.shape[:-2]``. Returns per-entry losses,
    a dict of encoder gradients and (optionally) head gradients.
    """
    F, cache = _forward(enc, X)
    Wz = gather_heads(heads, z)
    out = row_dot(F, Wz)
    norm = np.asarray(norm, dtype=np.float64)
    losses = _per_sample_loss(out, y, kind)
    g = _dloss(out, y, kind)
    if weights is not None:
        losses = losses * weights
        g = g * weights
    g = g / norm[..., None]
    loss = np.sum(losses, axis=-1) / norm

    head_grad = None
    if head_grads:
        onehot = domain_onehot(z, heads.shape[-2])
        head_grad = _T(onehot) @ (g[..., None] * F)

    dF = g[..., None] * Wz
    grads = {}
    if enc.P is not None:
        grads["P"] = _T(cache["H"]) @ dF
        dH = dF @ _T(enc.P)
    else:
        dH = dF
    if enc.kind == "linear":
        grads["B"] = _T(X) @ dH
    else:
        S = cache["S"]
        grads["W2"] = _T(S) @ dH
        grads["b2"] = dH.sum(axis=-2)
        dA = (dH @ _T(enc.W2)) * (1.0 - S**2)
        grads["W1"] = _T(X) @ dA
        grads["b1"] = dA.sum(axis=-2)
    return loss, grads, head_grad


def loss_and_grads(enc: EncoderParams, heads, X, y, z, task="regression", sample_weights=None,
                   head_grads: bool = True):
    """Loss plus gradients w.r.t. every encoder tensor and every head.

    Sample ``j`` is scored by head ``heads[z[j]]``. The loss is
    ``(1/L) sum_j weight_j * loss_j``.

    Returns
    -------
    loss : float
    enc_grad : EncoderParams
        Same layout as ``enc``.
    head_grad : ndarray, shape like ``heads``, or None if ``head_grads`` is False
    """
    X, y, weights = _check_batch(X, y, sample_weights)
    heads = np.atleast_2d(np.asarray(heads, dtype=np.float64))
    z = np.asarray(z, dtype=np.int64)
    if len(z) != len(y):
        raise ValueError("z must match the batch length")
    if z.max() >= len(heads) or z.min() < 0:
        missing = sorted(set(z.tolist()) - set(range(len(heads))))
        raise ValueError(f"no head for domain(s) {missing}")
    loss, grads, head_grad = batched_loss_and_grads(
        enc, heads, X, y, z, weights, len(y), task_kind(task), head_grads)
    return float(loss), enc.with_tensors(grads), head_grad


def encoder_gradient(enc, heads, X, y, z, task="regression", domain_weights=None) -> EncoderParams:
    """Gradient of the domain-reweighted client risk w.r.t. the encoder.

    ``domain_weights[m]`` multiplies every loss term from domain ``m``; the
    result is the gradient of ``(1/L) sum_j u[z_j] loss_j``.
    """
    z = np.asarray(z, dtype=np.int64)
    weights = None if domain_weights is None else np.asarray(domain_weights, dtype=np.float64)[z]
    return loss_and_grads(enc, heads, X, y, z, task, weights, head_grads=False)[1]


def weighted_risk(enc, heads, X, y, z, task="regression", domain_weights=None) -> float:
    z = np.asarray(z, dtype=np.int64)
    weights = None if domain_weights is None else np.asarray(domain_weights, dtype=np.float64)[z]
    X, y, weights = _check_batch(X, y, weights)
    heads = np.atleast_2d(np.asarray(heads, dtype=np.float64))
    out = row_dot(features(enc, X), heads[z])
    losses = _per_sample_loss(out, y, task_kind(task))
    if weights is not None:
        losses = losses * weights
    return float(np.sum(losses) / len(y))


# --- checkpoints -----------------------------------------------------------

def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unpack(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, encoder: EncoderParams, heads, round: int, config_hash: str = "",
                    client_heads=None) -> Path:
    heads = np.atleast_2d(np.asarray(heads, dtype=np.float64))
    doc = {
        "dims": {
            "d": encoder.input_dim,
            "k_rep": encoder.rep_dim,
            "k_head": encoder.out_dim,
            "M": int(heads.shape[0]),
        },
        "encoder": {"kind": encoder.kind,
                    "tensors": {k: _pack(v) for k, v in encoder.tensors().items()}},
        "heads": _pack(heads),
        "client_heads": None if client_heads is None else _pack(np.asarray(client_heads)),
        "round": int(round),
        "config_hash": config_hash,
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    enc = EncoderParams(doc["encoder"]["kind"],
                        **{k: _unpack(v) for k, v in doc["encoder"]["tensors"].items()})
    ch = doc.get("client_heads")
    return {
        "encoder": enc,
        "heads": _unpack(doc["heads"]),
        "client_heads": None if ch is None else _unpack(ch),
        "round": doc["round"],
        "config_hash": doc["config_hash"],
        "dims": doc["dims"],
    }
