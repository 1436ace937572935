"""Quick invariant checks behind ``python -m feddar selftest``.

Each check builds a small seeded problem, compares the implementation with
an independent computation and returns ``(name, passed, detail)``. The
full property suites live in the test tree; these run in a few seconds.
"""

from __future__ import annotations

import numpy as np

from . import flcore
from .aggregate import HeadUpdateMsg, second_order_aggregate
from .datagen import generate_federation, sample_ground_truth, sample_mixtures
from .linear_theory import Alg2Config, run_algorithm2
from .model import init_encoder, loss_and_grads
from .numerics import is_orthonormal


def check_gradients(n_configs: int = 8):
    worst = 0.0
    for s in range(n_configs):
        rng = np.random.default_rng([s, 11])
        kind = ("linear", "mlp1")[s % 2]
        task = ("regression", "binary_classification")[(s // 2) % 2]
        k_proj = 2 if s % 3 == 0 else None
        d, k, M, L = 5, 3, 3, 12
        enc = init_encoder(kind, d, k, rng, k_proj, hidden=4)
        heads = rng.standard_normal((M, enc.out_dim))
        X = rng.standard_normal((L, d))
        z = rng.integers(0, M, L)
        y = rng.integers(0, 2, L).astype(float) if task != "regression" else rng.standard_normal(L)
        _, g, hg = loss_and_grads(enc, heads, X, y, z, task)
        theta = np.concatenate([enc.flat(), heads.ravel()])
        n_enc = enc.flat().size

        def f(v):
            e = enc.from_flat(v[:n_enc])
            return loss_and_grads(e, v[n_enc:].reshape(heads.shape), X, y, z, task,
                                  head_grads=False)[0]

        h = 1e-6
        fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h)
                       for e in np.eye(theta.size)])
        an = np.concatenate([g.flat(), hg.ravel()])
        worst = max(worst, np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12))
    return "gradients vs finite differences", worst <= 1e-5, f"max rel err {worst:.2e}"


def check_second_order_aggregation():
    rng = np.random.default_rng(5)
    k = 3
    Phis = [rng.standard_normal((L, k)) for L in (6, 9, 4)]
    ys = [rng.standard_normal(len(P)) for P in Phis]
    msgs = []
    for i, (P, y) in enumerate(zip(Phis, ys)):
        H = P.T @ P / len(y)
        msgs.append(HeadUpdateMsg(0, np.linalg.solve(P.T @ P, P.T @ y), H, len(y)))
    w = second_order_aggregate(msgs)
    P, y = np.vstack(Phis), np.concatenate(ys)
    ref = np.linalg.lstsq(P, y, rcond=None)[0]
    err = np.linalg.norm(w - ref) / np.linalg.norm(ref)
    return "second-order aggregation = pooled least squares", err <= 1e-8, f"rel err {err:.2e}"


def check_objective_identity():
    gt = sample_ground_truth(6, 2, 3, 0.1, rng_seed=3)
    clients = generate_federation(gt, sample_mixtures(5, 1.0, None, 4, M=3), 17, 5)
    cfg = flcore.TrainConfig()
    state = flcore.init_state(6, 3, cfg)
    lhs = flcore.federated_risk(clients, state.encoder, state.heads)
    rhs = flcore.domain_balanced_risk(clients, state.encoder, state.heads)
    err = abs(lhs - rhs) / abs(rhs)
    return "client-weighted risk = domain-balanced risk", err <= 1e-12, f"rel err {err:.2e}"


def check_algorithm2_fixed_point():
    cfg = Alg2Config(n=4, M=3, d=8, k=2, L=50, T=5, seed=1)
    gt = sample_ground_truth(cfg.d, cfg.k, cfg.M, 0.0, "regression", cfg.seed, "qr")
    recs = run_algorithm2(cfg, B0=gt.B_star, ground_truth=gt)
    worst = max(r.dist for r in recs)
    ortho = all(is_orthonormal(r.basis, 1e-10) for r in recs)
    return "algorithm 2 keeps B* fixed", worst <= 1e-10 and ortho, f"max dist {worst:.2e}"


CHECKS = (check_gradients, check_second_order_aggregation, check_objective_identity,
          check_algorithm2_fixed_point)


def run_all(verbose: bool = False) -> bool:
    ok = True
    for check in CHECKS:
        name, passed, detail = check()
        ok &= bool(passed)
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
    return ok
