"""The analysable linear-regression variant of FedDAR.

Model: ``y = x^T B* w*_z`` with ``B*`` a ``d x k`` orthonormal basis. One
round, starting from an orthonormal ``B``:

1. each client sends per-domain sufficient statistics
   ``A = sum B^T x x^T B`` and ``a = sum y B^T x``; the server solves
   ``(sum_i A_im) w_m = sum_i a_im`` exactly for every head,
2. each client sends the per-domain encoder gradients
   ``sum (x^T B w_m - y) x w_m^T`` on a second batch; the server takes
   ``B - eta * (1/M) sum_m (1/L_m) sum_i grad_im`` and re-orthonormalises
   with QR.

The initial basis comes from a method-of-moments estimate: the top-``k``
eigenvectors of ``(1/(n L0)) sum y^2 x x^T``.

Step sizes are checked against ``1/(4 s_max^2)`` where ``s_max`` is the
largest singular value of ``W*/sqrt(M)``; with that step the subspace
distance contracts at least as fast as ``(1 - eta E0 s_min^2 / 2)^(t/2)``
with ``E0 = 1 - dist(B0, B*)^2``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .datagen import ClientDataset, SyntheticGroundTruth, generate_federation, sample_ground_truth
from .numerics import (
    SingularMatrixError,
    principal_angle_dist,
    qr_orthonormalize,
    row_dot,
    solve_spd,
    top_k_eigvecs,
)

log = logging.getLogger(__name__)

RIDGE_COEFF = 1e-8


@dataclass
class DomainSuffStats:
    domain: int
    A: np.ndarray  # (k, k)
    a: np.ndarray  # (k,)
    count: int


@dataclass
class EncoderGradStats:
    domain: int
    grad: np.ndarray  # (d, k), summed over the client's domain samples
    count: int


@dataclass
class ConvergenceRecord:
    round: int
    dist: float
    domain_risk: np.ndarray
    predicted_upper_bound: float
    basis: np.ndarray
    heads: np.ndarray | None = None


class MomInit(NamedTuple):
    basis: np.ndarray
    eigenvalues: np.ndarray
    gap_warning: bool


class HeadSolveError(ValueError):
    def __init__(self, domain: int, message: str):
        self.domain = domain
        super().__init__(f"domain {domain}: {message}")


# --- client side -------------------------------------------------------------

def client_suff_stats(client: ClientDataset, B: np.ndarray) -> list[DomainSuffStats]:
    """Head statistics for every domain present at the client."""
    out = []
    for m in np.flatnonzero(client.counts):
        X, y = client.domain(int(m))
        F = X @ B
        out.append(DomainSuffStats(int(m), F.T @ F, F.T @ y, len(y)))
    return out


def client_encoder_grads(client: ClientDataset, B: np.ndarray, W: np.ndarray
                         ) -> list[EncoderGradStats]:
    """Summed gradient of ``0.5 (x^T B w_m - y)^2`` w.r.t. ``B`` per present domain."""
    out = []
    for m in np.flatnonzero(client.counts):
        X, y = client.domain(int(m))
        w = W[m]
        r = X @ (B @ w) - y
        out.append(EncoderGradStats(int(m), np.outer(X.T @ r, w), len(y)))
    return out


def mom_statistic(client: ClientDataset) -> np.ndarray:
    """``Z_i = sum y^2 x x^T`` over the client's samples."""
    return (client.X * (client.y**2)[:, None]).T @ client.X


# --- server side -------------------------------------------------------------

def pool_suff_stats(per_client: Sequence[Sequence[DomainSuffStats]], M: int
                    ) -> list[DomainSuffStats | None]:
    """Sum statistics per domain in client order; ``None`` for unseen domains."""
    pooled: list[DomainSuffStats | None] = [None] * M
    for stats in per_client:
        for s in stats:
            p = pooled[s.domain]
            if p is None:
                pooled[s.domain] = DomainSuffStats(s.domain, s.A.copy(), s.a.copy(), s.count)
            else:
                p.A = p.A + s.A
                p.a = p.a + s.a
                p.count += s.count
    return pooled


def mom_init(clients: Sequence[ClientDataset], k: int) -> MomInit:
    """Top-``k`` eigenbasis of ``(1/(n L0)) sum_i Z_i``.

    ``n L0`` is the total number of samples across ``clients``. A collapsed
    eigengap is reported through ``gap_warning`` and logged.
    """
    if not clients:
        raise ValueError("need at least one client")
    total = sum(c.size for c in clients)
    if total < 1:
        raise ValueError("L0 must be >= 1")
    Z = np.zeros((clients[0].X.shape[1],) * 2)
    for c in clients:
        Z = Z + mom_statistic(c)
    res = top_k_eigvecs(Z / total, k)
    if res.gap_warning:
        log.warning("moment matrix has a repeated k-th eigenvalue; initial basis is not unique")
    return MomInit(res.vectors, res.values, res.gap_warning)


def exact_head_solve(B: np.ndarray, stats: Sequence[DomainSuffStats | None],
                     ridge_coeff: float = RIDGE_COEFF) -> np.ndarray:
    """Solve every domain's pooled normal equations; returns ``W`` (M x k).

    A singular pooled ``A`` is retried once with a ridge of
    ``ridge_coeff * tr(A)/k``; if that fails too, or the domain has no
    samples at all, :class:`HeadSolveError` names the domain.
    """
    k = B.shape[1]
    W = np.zeros((len(stats), k))
    for m, s in enumerate(stats):
        if s is None:
            raise HeadSolveError(m, "no samples")
        try:
            W[m] = solve_spd(s.A, s.a)
        except SingularMatrixError as exc:
            tr = float(np.trace(s.A))
            if not tr > 0:
                raise HeadSolveError(m, "pooled statistics are zero") from exc
            ridge = ridge_coeff * tr / k
            try:
                W[m] = solve_spd(s.A, s.a, ridge)
            except SingularMatrixError as exc:
                raise HeadSolveError(m, str(exc)) from exc
            log.warning("domain %d: pooled head system singular, solved with ridge %.3e", m, ridge)
    return W


def encoder_step(B: np.ndarray, W: np.ndarray, grads: Sequence[EncoderGradStats],
                 eta: float) -> np.ndarray:
    """``QR(B - eta (1/M) sum_m (1/L_m) sum_i grad_im)``; returns the Q factor."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    M = W.shape[0]
    sums = [np.zeros_like(B) for _ in range(M)]
    counts = np.zeros(M, dtype=np.int64)
    for g in grads:
        sums[g.domain] = sums[g.domain] + g.grad
        counts[g.domain] += g.count
    G = np.zeros_like(B)
    for m in range(M):
        if counts[m]:
            G = G + sums[m] / counts[m]
    Q, _ = qr_orthonormalize(B - eta * G / M)
    return Q


def algorithm2_round(B: np.ndarray, head_clients: Sequence[ClientDataset],
                     encoder_clients: Sequence[ClientDataset], M: int, eta: float):
    """One round; returns ``(B_next, W)`` where ``W`` was fitted at ``B``."""
    stats = pool_suff_stats([client_suff_stats(c, B) for c in head_clients], M)
    W = exact_head_solve(B, stats)
    grads = [g for c in encoder_clients for g in client_encoder_grads(c, B, W)]
    return encoder_step(B, W, grads, eta), W


def domain_risks(clients: Sequence[ClientDataset], B: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Pooled per-domain mean of ``0.5 (x^T B w_m - y)^2``."""
    M = W.shape[0]
    num = np.zeros(M)
    den = np.zeros(M)
    for c in clients:
        r = row_dot(c.X @ B, W[c.z]) - c.y
        num += np.bincount(c.z, weights=0.5 * r**2, minlength=M)
        den += c.counts
    out = np.full(M, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


# --- harness -----------------------------------------------------------------

@dataclass(frozen=True)
class Alg2Config:
    n: int = 10
    M: int = 5
    d: int = 20
    k: int = 2
    L: int = 200
    L0: int = 200
    eta: float | None = None  # None: use the largest step allowed by the bound
    T: int = 50
    noise: float = 0.0
    resample: bool = True
    seed: int = 0
    alpha_dir: float | None = None  # None: every client samples domains uniformly
    head_normalization: str = "qr"

    def __post_init__(self):
        if not 1 <= self.k <= self.d:
            raise ValueError("need 1 <= k <= d")
        if self.M < 1 or self.n < 1 or self.L < 1 or self.L0 < 1 or self.T < 0:
            raise ValueError("n, M, L, L0 must be >= 1 and T >= 0")


def step_size_bound(gt: SyntheticGroundTruth) -> float:
    """Largest step allowed by the convergence theorem, ``1/(4 s_max^2)``."""
    return 1.0 / (4.0 * gt.sigma_max**2)


def predicted_bound(dist0: float, eta: float, sigma_min: float, t: int) -> float:
    E0 = 1.0 - dist0**2
    return float((1.0 - eta * E0 * sigma_min**2 / 2.0) ** (t / 2.0) * dist0)


def _mixtures(cfg: Alg2Config) -> list[np.ndarray]:
    from .datagen import sample_mixtures
    if cfg.alpha_dir is None:
        return [np.full(cfg.M, 1.0 / cfg.M) for _ in range(cfg.n)]
    return sample_mixtures(cfg.n, cfg.alpha_dir, None, cfg.seed + 1, M=cfg.M)


def run_algorithm2(cfg: Alg2Config, B0: np.ndarray | None = None,
                   ground_truth: SyntheticGroundTruth | None = None) -> list[ConvergenceRecord]:
    """Full trajectory: initial basis then ``cfg.T`` rounds.

    Record ``t`` holds ``dist(B^t, B*)``; record 0 is the initial basis (its
    heads and risks are not defined yet). Round ``t >= 1`` also stores the
    heads fitted during that round and their per-domain risk on the round's
    head batch. With ``cfg.resample`` each phase of each round draws ``L``
    fresh samples per client; otherwise one fixed batch serves both phases
    for the whole run.
    """
    gt = ground_truth or sample_ground_truth(cfg.d, cfg.k, cfg.M, cfg.noise, "regression",
                                             cfg.seed, cfg.head_normalization)
    eta = step_size_bound(gt) if cfg.eta is None else float(cfg.eta)
    bound = step_size_bound(gt)
    if eta > bound * (1 + 1e-12):
        raise ValueError(f"eta={eta:.4g} exceeds the admissible step 1/(4 s_max^2)={bound:.4g}")
    mixtures = _mixtures(cfg)
    data_seed = cfg.seed + 2

    if B0 is None:
        init_clients = generate_federation(gt, mixtures, cfg.L0, data_seed, stream=(0xB0,))
        B = mom_init(init_clients, cfg.k).basis
    else:
        B, _ = qr_orthonormalize(B0)
    dist0 = principal_angle_dist(gt.B_star, B)
    smin = gt.sigma_min
    records = [ConvergenceRecord(0, dist0, np.full(cfg.M, np.nan), dist0, B.copy())]

    fixed = None if cfg.resample else generate_federation(gt, mixtures, cfg.L, data_seed)
    for t in range(1, cfg.T + 1):
        if fixed is None:
            head_batch = generate_federation(gt, mixtures, cfg.L, data_seed, stream=(t, 0))
            enc_batch = generate_federation(gt, mixtures, cfg.L, data_seed, stream=(t, 1))
        else:
            head_batch = enc_batch = fixed
        B_next, W = algorithm2_round(B, head_batch, enc_batch, cfg.M, eta)
        risk = domain_risks(head_batch, B, W)
        B = B_next
        records.append(ConvergenceRecord(t, principal_angle_dist(gt.B_star, B), risk,
                                         predicted_bound(dist0, eta, smin, t), B.copy(), W))
    return records


def write_trajectory_csv(records: Sequence[ConvergenceRecord], path) -> None:
    """Columns: round, dist, predicted_upper_bound, domain_<m>_risk."""
    M = len(records[0].domain_risk) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "dist", "predicted_upper_bound"] + [f"domain_{m}_risk" for m in range(M)])
        for r in records:
            w.writerow([r.round, repr(float(r.dist)), repr(float(r.predicted_upper_bound))]
                       + [repr(float(v)) for v in r.domain_risk])
