"""Synthetic domain-mixed federated data.

Each client draws its domain mixture from a Dirichlet prior, then samples
``x ~ N(0, I_d)``, a domain ``z`` from its mixture, and a label generated by
the shared low-rank model ``x^T B* w*_z`` (plus Gaussian noise for
regression, or a Bernoulli draw for binary classification).

Randomness is always derived from an explicit integer seed. Per-client
streams use ``default_rng([seed, client_id, *stream])`` so that clients can
be generated in any order or in parallel with identical results.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import qr_orthonormalize, row_dot

TASKS = ("regression", "binary_classification")


@dataclass(frozen=True)
class SyntheticGroundTruth:
    B_star: np.ndarray  # (d, k), orthonormal columns
    W_star: np.ndarray  # (M, k), row m is w*_m
    noise_sigma: float
    task: str = "regression"

    @property
    def d(self) -> int:
        return self.B_star.shape[0]

    @property
    def k(self) -> int:
        return self.B_star.shape[1]

    @property
    def M(self) -> int:
        return self.W_star.shape[0]

    def head_singular_values(self) -> np.ndarray:
        """Singular values of ``W*/sqrt(M)``, largest first."""
        return np.linalg.svd(self.W_star / np.sqrt(self.M), compute_uv=False)

    @property
    def sigma_max(self) -> float:
        return float(self.head_singular_values()[0])

    @property
    def sigma_min(self) -> float:
        return float(self.head_singular_values()[-1])

    @property
    def kappa(self) -> float:
        return self.sigma_max / self.sigma_min

    def signal(self, X: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Noiseless linear predictor ``x^T B* w*_z`` for each row."""
        return row_dot(X @ self.B_star, self.W_star[z])


@dataclass
class ClientDataset:
    """One client's samples. Rows of ``X``/``y``/``z`` are aligned."""

    client_id: int
    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    M: int
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.int64)
        if not (len(self.X) == len(self.y) == len(self.z)):
            raise ValueError("X, y, z must have the same number of rows")
        if len(self.z) and (self.z.min() < 0 or self.z.max() >= self.M):
            raise ValueError("domain index out of range")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("labels must be finite")
        self.counts = np.bincount(self.z, minlength=self.M).astype(np.int64)

    @property
    def size(self) -> int:
        return len(self.y)

    def domain(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.z == m
        return self.X[mask], self.y[mask]

    def samples_by_domain(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.domain(m) for m in range(self.M)]


def _normalized_rows(G: np.ndarray, k: int) -> np.ndarray:
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    return G / norms * np.sqrt(k)


def sample_ground_truth(
    d: int,
    k: int,
    M: int,
    noise_sigma: float = 0.0,
    task: str = "regression",
    rng_seed: int = 0,
    head_normalization: str = "rows",
) -> SyntheticGroundTruth:
    """Draw ``B*`` and ``W*`` from Gaussian matrices.

    ``B*`` is the Q factor of a ``d x k`` Gaussian. With
    ``head_normalization="rows"`` every head is a Gaussian vector rescaled
    to norm ``sqrt(k)``. With ``"qr"`` the head matrix is the Q factor of an
    ``M x k`` Gaussian (requires ``M >= k``), which makes every singular
    value of ``W*/sqrt(M)`` equal to ``1/sqrt(M)``.

    Draws whose ``sigma_min(W*/sqrt(M))`` falls below 1e-6 are resampled up
    to 10 times before giving up.
    """
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    if M < 1:
        raise ValueError("M must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if head_normalization not in ("rows", "qr"):
        raise ValueError(f"unknown head_normalization {head_normalization!r}")
    if head_normalization == "qr" and M < k:
        raise ValueError("QR head normalization needs M >= k")

    rng = np.random.default_rng(rng_seed)
    B_star, _ = qr_orthonormalize(rng.standard_normal((d, k)))
    for _ in range(11):
        G = rng.standard_normal((M, k))
        if head_normalization == "rows":
            W = _normalized_rows(G, k)
        else:
            W, _ = qr_orthonormalize(G)
        smin = np.linalg.svd(W / np.sqrt(M), compute_uv=False)[-1]
        if smin >= 1e-6:
            return SyntheticGroundTruth(B_star, W, float(noise_sigma), task)
    raise RuntimeError("could not draw a non-degenerate head matrix in 11 attempts")


def sample_mixtures(
    n: int, alpha_dir: float, prior_p: Sequence[float] | None, rng_seed: int, M: int | None = None
) -> list[np.ndarray]:
    """``n`` independent draws from ``Dirichlet(alpha_dir * prior_p)``.

    Gamma variates are drawn in log space (``G = G' * U**(1/a)`` with
    ``G' ~ Gamma(a + 1)``) so that very small concentrations stay accurate
    instead of underflowing to an all-zero vector. Prior coordinates that
    are exactly zero give exactly zero mixture weight.
    """
    if alpha_dir <= 0:
        raise ValueError("alpha_dir must be > 0")
    if prior_p is None:
        if M is None:
            raise ValueError("either prior_p or M must be given")
        p = np.full(M, 1.0 / M)
    else:
        p = np.asarray(prior_p, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("prior_p must lie on the probability simplex")
    a = alpha_dir * p
    active = a > 0
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(n):
        g = rng.gamma(a[active] + 1.0)
        u = rng.random(int(active.sum()))
        log_g = np.full(len(p), -np.inf)
        log_g[active] = np.log(g) + np.log(u) / a[active]
        top = np.max(log_g)
        e = np.exp(log_g - top)
        out.append(e / e.sum())
    return out


def client_rng(seed: int, client_id: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(client_id), *map(int, stream)])


def draw_samples(
    gt: SyntheticGroundTruth,
    z: np.ndarray,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    X = rng.standard_normal((len(z), gt.d))
    signal = gt.signal(X, z)
    if gt.task == "regression":
        noise = rng.standard_normal(len(z))
        y = signal if noiseless or gt.noise_sigma == 0 else signal + gt.noise_sigma * noise
    else:
        prob = 1.0 / (1.0 + np.exp(-signal))
        y = (rng.random(len(z)) < prob).astype(np.float64)
    return X, y


def generate_client_dataset(
    gt: SyntheticGroundTruth,
    mixture,
    L: int,
    rng_seed: int,
    client_id: int,
    stream: Sequence[int] = (),
) -> ClientDataset:
    """Sample ``L`` labelled points for one client.

    ``stream`` extends the per-client seed so that fresh batches (e.g. one
    per training round) come from independent generators.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    pi = np.asarray(mixture, dtype=np.float64)
    if pi.shape != (gt.M,):
        raise ValueError(f"mixture must have length {gt.M}")
    rng = client_rng(rng_seed, client_id, *stream)
    z = rng.choice(gt.M, size=L, p=pi)
    X, y = draw_samples(gt, z, rng)
    return ClientDataset(client_id, X, y, z, gt.M)


def generate_federation(
    gt: SyntheticGroundTruth, mixtures: Sequence, L: int, rng_seed: int, stream: Sequence[int] = ()
) -> list[ClientDataset]:
    return [
        generate_client_dataset(gt, pi, L, rng_seed, i, stream) for i, pi in enumerate(mixtures)
    ]


def generate_test_sets(
    gt: SyntheticGroundTruth, per_domain: int, rng_seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Noiseless held-out samples, ``per_domain`` for every domain.

    Classification labels are still Bernoulli draws; only the regression
    observation noise is switched off.
    """
    rng = np.random.default_rng([int(rng_seed), 0x7E57])
    tests = []
    for m in range(gt.M):
        z = np.full(per_domain, m, dtype=np.int64)
        tests.append(draw_samples(gt, z, rng, noiseless=True))
    return tests


def dump_dataset(
    out_dir, clients: Sequence[ClientDataset], gt: SyntheticGroundTruth, seed: int, mixtures
) -> Path:
    """Write one ``client_<i>.csv`` per client plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in clients:
        with open(out / f"client_{c.client_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j}" for j in range(gt.d)] + ["y", "z"])
            for x, y, z in zip(c.X, c.y, c.z):
                w.writerow([repr(float(v)) for v in x] + [repr(float(y)), int(z)])
    manifest = {
        "d": gt.d,
        "k": gt.k,
        "M": gt.M,
        "n": len(clients),
        "seed": seed,
        "noise_sigma": gt.noise_sigma,
        "task": gt.task,
        "mixtures": [list(map(float, pi)) for pi in mixtures],
        "clients": [f"client_{c.client_id}.csv" for c in clients],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(out_dir) -> tuple[dict, list[ClientDataset]]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    d, M = manifest["d"], manifest["M"]
    clients = []
    for i, name in enumerate(manifest["clients"]):
        rows = np.loadtxt(out / name, delimiter=",", skiprows=1, ndmin=2)
        clients.append(ClientDataset(i, rows[:, :d], rows[:, d], rows[:, d + 1].astype(int), M))
    return manifest, clients
