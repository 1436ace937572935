"""Client/server rounds for FedDAR and the baseline methods.

One FedDAR round:

1. every client starts from the broadcast encoder and heads and runs
   ``tau_h`` optimiser steps on each of its domain heads (encoder frozen),
2. the server aggregates each domain's heads (weighted average or
   second-order aggregation),
3. every client runs ``tau_phi`` steps on the encoder against the new,
   frozen heads, minimising its domain-reweighted risk,
4. the server averages encoders weighted by client sample counts.

Clients are simulated together: their samples are packed into zero-padded
arrays with a leading client axis and every local step is one vectorised
numpy call. Clients never see each other's data; padding rows carry zero
weight. A :class:`ClientPool` may split the client axis across threads.
Server reductions always run in client-index order, so results do not
depend on the number of threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregate import HeadUpdateMsg, aggregate_heads, weighted_average
from .datagen import ClientDataset
from .model import (
    EncoderParams,
    _dloss,
    _forward,
    _per_sample_loss,
    _T,
    batched_loss_and_grads,
    domain_onehot,
    features,
    gather_heads,
    init_encoder,
    sigmoid,
    task_kind,
)
from .numerics import row_dot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    T: int = 100
    tau_h: int = 10
    tau_phi: int = 10
    lr: float = 0.1
    agg: str = "SA"
    optimizer: str = "gd"
    encoder: str = "linear"
    k_rep: int = 2
    k_proj: int | None = None
    hidden: int = 16
    resample_each_round: bool = False
    seed: int = 0
    task: str = "regression"
    fedavg_update: str = "joint"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.T < 1 or self.tau_phi < 1 or self.tau_h < 0:
            raise ValueError("need T >= 1, tau_phi >= 1, tau_h >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.agg not in ("WA", "SA"):
            raise ValueError(f"agg must be WA or SA, got {self.agg!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"optimizer must be gd or adam, got {self.optimizer!r}")
        if self.fedavg_update not in ("joint", "alternating"):
            raise ValueError("fedavg_update must be 'joint' or 'alternating'")
        task_kind(self.task)

    @property
    def head_dim(self) -> int:
        return self.k_rep if self.k_proj is None else self.k_proj


@dataclass
class EncoderUpdateMsg:
    encoder: EncoderParams
    count: int


@dataclass
class GlobalState:
    """Server-side model.

    ``heads`` holds one row per domain (one row in total for FedAvg).
    FedRep keeps per-client heads in ``client_heads`` instead; those are
    client state and never aggregated.
    """

    encoder: EncoderParams
    heads: np.ndarray
    round: int = 0
    client_heads: np.ndarray | None = None
    sa_fallbacks: int = 0
    info: dict = field(default_factory=dict, repr=False)


@dataclass
class LocalModel:
    encoder: EncoderParams
    head: np.ndarray
    round: int = 0


class EmptyDomainError(ValueError):
    def __init__(self, domain: int):
        self.domain = domain
        super().__init__(f"domain {domain} has no samples on any client")


# --- packed client data --------------------------------------------------------

@dataclass
class ClientBatch:
    """Zero-padded stack of client datasets.

    ``X`` is ``(n, L_max, d)``; ``mask`` marks real rows. ``counts[i, m]`` is
    client ``i``'s number of domain-``m`` samples.
    """

    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    mask: np.ndarray
    sizes: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def M(self) -> int:
        return self.counts.shape[1]

    def take(self, idx) -> ClientBatch:
        return ClientBatch(self.X[idx], self.y[idx], self.z[idx], self.mask[idx],
                           self.sizes[idx], self.counts[idx])


def pack_clients(clients: Sequence[ClientDataset]) -> ClientBatch:
    if isinstance(clients, ClientBatch):
        return clients
    if not clients:
        raise ValueError("need at least one client")
    n, d = len(clients), clients[0].X.shape[1]
    Lmax = max(c.size for c in clients)
    X = np.zeros((n, Lmax, d))
    y = np.zeros((n, Lmax))
    z = np.zeros((n, Lmax), dtype=np.int64)
    mask = np.zeros((n, Lmax))
    for i, c in enumerate(clients):
        X[i, :c.size], y[i, :c.size], z[i, :c.size] = c.X, c.y, c.z
        mask[i, :c.size] = 1.0
    sizes = np.array([c.size for c in clients], dtype=np.float64)
    counts = np.stack([c.counts for c in clients]).astype(np.float64)
    return ClientBatch(X, y, z, mask, sizes, counts)


class ClientPool:
    """Runs per-client work in ``threads`` contiguous chunks of the client axis."""

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))
        self._ex = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def run(self, fn, batch: ClientBatch, *per_client):
        """``fn(sub_batch, *sliced_args)`` on each chunk; outputs concatenated on axis 0.

        ``fn`` must return a tuple of arrays (or dicts of arrays) whose
        leading axis is the client axis.
        """
        if self._ex is None or batch.n < 2:
            return fn(batch, *per_client)
        bounds = np.linspace(0, batch.n, min(self.threads, batch.n) + 1).astype(int)
        slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

        def call(sl):
            return fn(batch.take(sl), *[_slice(a, sl) for a in per_client])

        parts = list(self._ex.map(call, slices))
        return tuple(_concat([p[j] for p in parts]) for j in range(len(parts[0])))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _slice(a, sl):
    if a is None:
        return None
    if isinstance(a, EncoderParams):
        return a.map(lambda v: v[sl])
    return a[sl]


def _concat(parts):
    if isinstance(parts[0], dict):
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return np.concatenate(parts)


def _run(pool, fn, batch, *per_client):
    if pool is None:
        return fn(batch, *per_client)
    return pool.run(fn, batch, *per_client)


# --- optimisers --------------------------------------------------------------

class _GD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> dict:
        return {k: v - self.lr * grads[k] for k, v in params.items()}


class _Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _optimizer(cfg: TrainConfig):
    if cfg.optimizer == "gd":
        return _GD(cfg.lr)
    return _Adam(cfg.lr, cfg.adam_betas, cfg.adam_eps)


# --- weighting and objectives ------------------------------------------------

def count_matrix(clients) -> np.ndarray:
    if isinstance(clients, ClientBatch):
        return clients.counts
    return np.stack([c.counts for c in clients])


def domain_weights(counts) -> np.ndarray:
    """Per-domain re-weighting ``u_m = L / (L_m * M)``.

    ``counts`` is the ``n x M`` matrix of per-client, per-domain sample
    counts (a single row is fine).

    >>> domain_weights([[80, 20]])
    array([0.625, 2.5  ])
    """
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    L_m = counts.sum(axis=0)
    for m, c in enumerate(L_m):
        if c < 1:
            raise EmptyDomainError(m)
    M = len(L_m)
    return L_m.sum() / (L_m * M)


def _present_domain_weights(counts: np.ndarray) -> np.ndarray:
    # Like domain_weights, but a domain absent this round gets weight 0.
    L_m = counts.sum(axis=0).astype(np.float64)
    u = np.zeros(len(L_m))
    present = L_m > 0
    u[present] = L_m.sum() / (L_m[present] * len(L_m))
    return u


def client_risk(client: ClientDataset, encoder, heads, task, u) -> float:
    """``R_i = sum_m (L_im / L_i) u_m R_im``."""
    out = row_dot(features(encoder, client.X), np.atleast_2d(heads)[client.z])
    losses = _per_sample_loss(out, client.y, task_kind(task)) * np.asarray(u)[client.z]
    return float(np.sum(losses) / client.size)


def federated_risk(clients, encoder, heads, task="regression") -> float:
    """``sum_i (L_i / L) R_i`` with domain re-weighting."""
    counts = count_matrix(clients)
    u = domain_weights(counts)
    L = counts.sum()
    return float(sum(c.size / L * client_risk(c, encoder, heads, task, u) for c in clients))


def domain_balanced_risk(clients, encoder, heads, task="regression") -> float:
    """``(1/M) sum_m R_m`` where ``R_m`` pools domain ``m`` over all clients."""
    M = clients[0].M
    kind = task_kind(task)
    heads = np.atleast_2d(heads)
    total = 0.0
    for m in range(M):
        num, den = 0.0, 0
        for c in clients:
            X, y = c.domain(m)
            if len(y):
                out = features(encoder, X) @ heads[m]
                num += float(np.sum(_per_sample_loss(out, y, kind)))
                den += len(y)
        if den == 0:
            raise EmptyDomainError(m)
        total += num / den
    return total / M


# --- initial state -----------------------------------------------------------

def init_state(d: int, M: int, cfg: TrainConfig, n_clients: int | None = None,
               method: str = "feddar") -> GlobalState:
    """Gaussian initial model, seeded by ``cfg.seed``.

    ``method`` selects the head layout: ``feddar`` (M heads), ``fedavg`` or
    ``local`` (one head), ``fedrep`` (one head per client).
    """
    rng = np.random.default_rng([int(cfg.seed), 0x1A17])
    enc = init_encoder(cfg.encoder, d, cfg.k_rep, rng, cfg.k_proj, cfg.hidden)
    kh = cfg.head_dim
    heads = rng.standard_normal((M, kh))
    if method == "feddar":
        return GlobalState(enc, heads)
    if method in ("fedavg", "local"):
        return GlobalState(enc, heads[:1].copy())
    if method == "fedrep":
        if n_clients is None:
            raise ValueError("fedrep needs n_clients")
        ch = np.random.default_rng([int(cfg.seed), 0xC11E]).standard_normal((n_clients, kh))
        return GlobalState(enc, np.zeros((0, kh)), client_heads=ch)
    raise ValueError(f"unknown method {method!r}")


# --- local phases (vectorised over the client axis) ----------------------------

def _stack(enc: EncoderParams, n: int) -> EncoderParams:
    return enc.map(lambda v: np.array(np.broadcast_to(v, (n,) + v.shape)))


def _unstack(enc: EncoderParams, i: int) -> EncoderParams:
    return enc.map(lambda v: v[i].copy())


def _head_phase(batch: ClientBatch, enc: EncoderParams, heads0: np.ndarray, steps: int,
                cfg: TrainConfig, z=None, counts=None):
    """``steps`` optimiser steps on every (client, head) pair with the encoder frozen.

    ``heads0`` is ``(M, k)`` (broadcast) or ``(n, M, k)``. Head ``m`` of
    client ``i`` only sees that client's samples with ``z == m`` and its
    gradient is averaged over ``counts[i, m]``.

    Returns heads ``(n, M, k)``, Hessians ``(n, M, k, k)`` at the final heads
    and the loss trace ``(n, steps, M)``.
    """
    kind = task_kind(cfg.task)
    z = batch.z if z is None else z
    counts = batch.counts if counts is None else counts
    n, M = batch.n, heads0.shape[-2]
    Phi = _forward(enc, batch.X)[0]
    onehot = domain_onehot(z, M, batch.mask)
    onehot_T = _T(onehot)
    inv = np.zeros_like(counts)
    np.divide(1.0, counts, out=inv, where=counts > 0)
    W = np.array(np.broadcast_to(heads0, (n,) + heads0.shape[-2:]))
    opt = _optimizer(cfg)
    trace = np.zeros((n, steps, M))
    for s in range(steps):
        out = row_dot(Phi, gather_heads(W, z))
        trace[:, s] = (onehot_T @ _per_sample_loss(out, batch.y, kind)[..., None])[..., 0] * inv
        r = _dloss(out, batch.y, kind)
        G = (onehot_T @ (r[..., None] * Phi)) * inv[..., None]
        W = opt.step({"W": W}, {"W": G})["W"]
    if kind == "squared_error":
        S = onehot
    else:
        mu = sigmoid(row_dot(Phi, gather_heads(W, z)))
        S = onehot * (mu * (1.0 - mu))[..., None]
    H = np.einsum("nlm,nlk,nlj->nmkj", S, Phi, Phi) * inv[..., None, None]
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return W, H, trace


def _encoder_phase(batch: ClientBatch, enc: EncoderParams, heads, weights, steps: int,
                   cfg: TrainConfig, z=None):
    """``steps`` optimiser steps on per-client encoder copies, heads frozen.

    Returns the stacked encoder tensors as a dict with a leading client axis.
    """
    kind = task_kind(cfg.task)
    z = batch.z if z is None else z
    if not _is_stacked(enc, batch.n):
        enc = _stack(enc, batch.n)
    opt = _optimizer(cfg)
    for _ in range(steps):
        _, g, _ = batched_loss_and_grads(enc, heads, batch.X, batch.y, z, weights,
                                         batch.sizes, kind, head_grads=False)
        enc = enc.with_tensors(opt.step(enc.tensors(), g))
    return (enc.tensors(),)


def _is_stacked(enc: EncoderParams, n: int) -> bool:
    ref = enc.B if enc.kind == "linear" else enc.W1
    return ref.ndim == 3 and ref.shape[0] == n


def _joint_phase(batch: ClientBatch, enc: EncoderParams, heads, steps: int, cfg: TrainConfig):
    """Joint steps on a per-client encoder and a single per-client head."""
    kind = task_kind(cfg.task)
    z0 = np.zeros_like(batch.z)
    if not _is_stacked(enc, batch.n):
        enc = _stack(enc, batch.n)
    opt = _optimizer(cfg)
    for _ in range(steps):
        _, g, hg = batched_loss_and_grads(enc, heads, batch.X, batch.y, z0, batch.mask,
                                          batch.sizes, kind, head_grads=True)
        params = opt.step({**enc.tensors(), "_head": heads}, {**g, "_head": hg})
        heads = params.pop("_head")
        enc = enc.with_tensors(params)
    return enc.tensors(), heads


def _single_head_local(batch: ClientBatch, enc: EncoderParams, heads, cfg: TrainConfig,
                       joint: bool):
    """Local training of (encoder, one head) per client; ``heads`` is ``(n, 1, k)``."""
    if joint:
        return _joint_phase(batch, enc, heads, cfg.tau_h + cfg.tau_phi, cfg)
    z0 = np.zeros_like(batch.z)
    sizes = batch.sizes[:, None]
    heads, _, _ = _head_phase(batch, enc, heads, cfg.tau_h, cfg, z=z0, counts=sizes)
    (tensors,) = _encoder_phase(batch, enc, heads, batch.mask, cfg.tau_phi, cfg, z=z0)
    return tensors, heads


def _messages(W, H, trace, counts, offset=0) -> list[list[HeadUpdateMsg]]:
    out = []
    for i in range(len(W)):
        msgs = []
        for m in np.flatnonzero(counts[i]):
            msgs.append(HeadUpdateMsg(int(m), W[i, m].copy(), H[i, m].copy(),
                                      int(counts[i, m]), trace[i, :, m].tolist()))
        out.append(msgs)
    return out


def local_head_update(client: ClientDataset, state: GlobalState, cfg: TrainConfig
                      ) -> list[HeadUpdateMsg]:
    """Head phase for one client; one message per domain present locally.

    Each message carries the final head, the loss Hessian at that head, the
    local domain count and the per-step loss trace for that domain.
    """
    batch = pack_clients([client])
    W, H, trace = _head_phase(batch, state.encoder, state.heads, cfg.tau_h, cfg)
    return _messages(W, H, trace, batch.counts)[0]


def local_encoder_update(client: ClientDataset, state: GlobalState, cfg: TrainConfig, u
                         ) -> EncoderUpdateMsg:
    """Encoder phase for one client with the heads in ``state`` frozen."""
    batch = pack_clients([client])
    weights = np.asarray(u, dtype=np.float64)[batch.z] * batch.mask
    (tensors,) = _encoder_phase(batch, state.encoder, state.heads, weights, cfg.tau_phi, cfg)
    enc = state.encoder.with_tensors({k: v[0] for k, v in tensors.items()})
    return EncoderUpdateMsg(enc, client.size)


def _average_stacked(enc: EncoderParams, tensors: dict, weights) -> EncoderParams:
    n = len(weights)
    slices = [enc.with_tensors({k: v[i] for k, v in tensors.items()}) for i in range(n)]
    return weighted_average(slices, weights)


# --- rounds ------------------------------------------------------------------

def feddar_round(state: GlobalState, clients, cfg: TrainConfig, pool: ClientPool | None = None
                 ) -> GlobalState:
    batch = pack_clients(clients)
    u = _present_domain_weights(batch.counts)

    W, H, trace = _run(pool, lambda b: _head_phase(b, state.encoder, state.heads, cfg.tau_h, cfg),
                       batch)
    all_msgs = _messages(W, H, trace, batch.counts)

    M = state.heads.shape[0]
    new_heads = state.heads.copy()
    fallbacks = 0
    kept = []
    for m in range(M):
        msgs = [msg for client_msgs in all_msgs for msg in client_msgs if msg.domain == m]
        if not msgs:
            log.info("domain %d has no samples this round; keeping previous head", m)
            kept.append(m)
            continue
        agg = aggregate_heads(msgs, cfg.agg)
        new_heads[m] = agg.head
        fallbacks += int(agg.fallback)

    weights = u[batch.z] * batch.mask
    (tensors,) = _run(pool, lambda b, w: _encoder_phase(b, state.encoder, new_heads, w,
                                                        cfg.tau_phi, cfg),
                      batch, weights)
    encoder = _average_stacked(state.encoder, tensors, batch.sizes)
    return GlobalState(encoder, new_heads, state.round + 1, None,
                       state.sa_fallbacks + fallbacks,
                       {"sa_fallbacks": fallbacks, "kept_heads": kept, "u": u})


def fedavg_round(state: GlobalState, clients, cfg: TrainConfig, pool: ClientPool | None = None
                 ) -> GlobalState:
    """One FedAvg round: a single head trained together with the encoder.

    With ``cfg.fedavg_update == "joint"`` each client runs
    ``tau_h + tau_phi`` steps on all parameters at once. ``"alternating"``
    runs ``tau_h`` head steps then ``tau_phi`` encoder steps locally.
    """
    batch = pack_clients(clients)
    joint = cfg.fedavg_update == "joint"
    heads0 = np.broadcast_to(state.heads[:1], (batch.n, 1, state.heads.shape[-1]))
    tensors, heads = _run(pool, lambda b, h: _single_head_local(b, state.encoder, h, cfg, joint),
                          batch, heads0)
    encoder = _average_stacked(state.encoder, tensors, batch.sizes)
    head = weighted_average([heads[i, 0] for i in range(batch.n)], batch.sizes)
    return GlobalState(encoder, head[None, :], state.round + 1, None, state.sa_fallbacks)


def fedrep_round(state: GlobalState, clients, cfg: TrainConfig, pool: ClientPool | None = None
                 ) -> GlobalState:
    """One FedRep round: per-client heads, averaged encoder."""
    batch = pack_clients(clients)
    if state.client_heads is None or len(state.client_heads) != batch.n:
        raise ValueError("fedrep state needs one head per client")
    heads0 = state.client_heads[:, None, :]
    tensors, heads = _run(pool, lambda b, h: _single_head_local(b, state.encoder, h, cfg, False),
                          batch, heads0)
    encoder = _average_stacked(state.encoder, tensors, batch.sizes)
    return GlobalState(encoder, state.heads, state.round + 1, heads[:, 0, :].copy(),
                       state.sa_fallbacks)


def local_only_round(models: Sequence[LocalModel], clients, cfg: TrainConfig,
                     pool: ClientPool | None = None) -> list[LocalModel]:
    """Advance every client's private model by one round of local steps."""
    batch = pack_clients(clients)
    ref = models[0].encoder
    stacked = ref.with_tensors({k: np.stack([m.encoder.tensors()[k] for m in models])
                                for k in ref.tensors()})
    heads0 = np.stack([m.head for m in models])[:, None, :]
    joint = cfg.fedavg_update == "joint"
    tensors, heads = _run(pool, lambda b, e, h: _single_head_local(b, e, h, cfg, joint),
                          batch, stacked, heads0)
    return [LocalModel(ref.with_tensors({k: v[i].copy() for k, v in tensors.items()}),
                       heads[i, 0].copy(), models[i].round + 1)
            for i in range(batch.n)]


def local_only_step(model: LocalModel, client: ClientDataset, cfg: TrainConfig) -> LocalModel:
    """One round's worth of purely local training (``tau_h + tau_phi`` steps)."""
    return local_only_round([model], [client], cfg)[0]


def local_only_train(client: ClientDataset, cfg: TrainConfig, init: LocalModel | None = None
                     ) -> LocalModel:
    if init is None:
        s = init_state(client.X.shape[1], 1, cfg, method="local")
        init = LocalModel(s.encoder, s.heads[0])
    model = init
    for _ in range(cfg.T):
        model = local_only_step(model, client, cfg)
    return model
