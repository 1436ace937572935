import numpy as np
import pytest
from hypothesis import given, strategies as st

from feddar import flcore
from feddar.bench import ExperimentConfig, evaluate_personal, run_experiment
from feddar.datagen import (
    ClientDataset,
    generate_client_dataset,
    generate_federation,
    generate_test_sets,
    sample_ground_truth,
    sample_mixtures,
)
from feddar.model import EncoderParams, encoder_gradient, init_encoder, loss_and_grads
from feddar.numerics import qr_orthonormalize


def federation(seed=0, n=4, M=3, d=6, k=2, L=30, alpha=0.5, noise=0.0):
    gt = sample_ground_truth(d, k, M, noise, rng_seed=seed)
    mix = sample_mixtures(n, alpha, None, seed + 1, M=M)
    return gt, generate_federation(gt, mix, L, seed + 2)


def state_with_basis(d, M, k, seed=0):
    rng = np.random.default_rng(seed)
    B = qr_orthonormalize(rng.standard_normal((d, k)))[0]
    return flcore.GlobalState(EncoderParams("linear", B=B), rng.standard_normal((M, k)))


def assert_states_equal(a, b):
    for k, v in a.encoder.tensors().items():
        assert v.tobytes() == b.encoder.tensors()[k].tobytes(), k
    assert a.heads.tobytes() == b.heads.tobytes()


# --- domain weights and the risk identity ---

def test_domain_weights_examples():
    np.testing.assert_allclose(flcore.domain_weights([[80, 20]]), [0.625, 2.5])
    np.testing.assert_allclose(flcore.domain_weights([[10, 10, 10], [5, 5, 5]]), 1.0)
    np.testing.assert_allclose(flcore.domain_weights([[7], [3]]), [1.0])


def test_domain_weights_missing_domain():
    with pytest.raises(flcore.EmptyDomainError) as exc:
        flcore.domain_weights([[3, 0, 1], [2, 0, 5]])
    assert exc.value.domain == 1


@given(st.integers(0, 100_000), st.sampled_from(["regression", "binary_classification"]))
def test_client_weighted_risk_equals_domain_balanced(seed, task):
    rng = np.random.default_rng(seed)
    M, d = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    clients = []
    for i in range(int(rng.integers(1, 6))):
        L = int(rng.integers(1, 20))
        y = rng.standard_normal(L) if task == "regression" else rng.integers(0, 2, L)
        clients.append(ClientDataset(i, rng.standard_normal((L, d)), y, rng.integers(0, M, L), M))
    if np.any(flcore.count_matrix(clients).sum(axis=0) == 0):
        with pytest.raises(flcore.EmptyDomainError):
            flcore.federated_risk(clients, init_encoder("linear", d, 2, rng), np.ones((M, 2)), task)
        return
    enc = init_encoder(("linear", "mlp1")[seed % 2], d, 2, rng)
    heads = rng.standard_normal((M, 2))
    lhs = flcore.federated_risk(clients, enc, heads, task)
    rhs = flcore.domain_balanced_risk(clients, enc, heads, task)
    assert abs(lhs - rhs) <= 1e-12 * abs(rhs)


# --- local head phase ---

def test_long_head_phase_reaches_local_least_squares():
    gt, clients = federation(seed=3, n=1, L=80, noise=0.3, alpha=50.0)
    c = clients[0]
    state = state_with_basis(6, 3, 2, seed=1)
    cfg = flcore.TrainConfig(tau_h=500, lr=0.5)
    msgs = flcore.local_head_update(c, state, cfg)
    assert [m.domain for m in msgs] == [m for m in range(3) if c.counts[m]]
    for msg in msgs:
        X, y = c.domain(msg.domain)
        Phi = X @ state.encoder.B
        ls = np.linalg.solve(Phi.T @ Phi, Phi.T @ y)
        assert np.max(np.abs(msg.head - ls)) <= 1e-6
        np.testing.assert_allclose(msg.hessian, Phi.T @ Phi / len(y), rtol=1e-12)
        assert msg.count == len(y)
        assert len(msg.loss_trace) == 500


def test_absent_domain_sends_no_message():
    gt = sample_ground_truth(5, 2, 4, rng_seed=0)
    c = generate_client_dataset(gt, [0.5, 0.0, 0.5, 0.0], 20, 0, 0)
    msgs = flcore.local_head_update(c, state_with_basis(5, 4, 2), flcore.TrainConfig(tau_h=3))
    assert sorted(m.domain for m in msgs) == [0, 2]


def test_divergent_head_phase_still_reports():
    gt, clients = federation(n=1)
    state = state_with_basis(6, 3, 2)
    with np.errstate(all="ignore"):
        msgs = flcore.local_head_update(clients[0], state, flcore.TrainConfig(tau_h=60, lr=50.0))
    assert msgs
    trace = msgs[0].loss_trace
    assert len(trace) == 60 and not trace[-1] < trace[0]


def test_head_phase_leaves_encoder_alone_and_vice_versa():
    gt, clients = federation(n=1)
    state = state_with_basis(6, 3, 2)
    B0, H0 = state.encoder.B.copy(), state.heads.copy()
    cfg = flcore.TrainConfig(tau_h=5, tau_phi=5)
    flcore.local_head_update(clients[0], state, cfg)
    flcore.local_encoder_update(clients[0], state, cfg, np.ones(3))
    np.testing.assert_array_equal(state.encoder.B, B0)
    np.testing.assert_array_equal(state.heads, H0)


# --- local encoder phase ---

def test_single_encoder_step_closed_form():
    gt, clients = federation(seed=4, n=1, noise=0.1)
    c = clients[0]
    state = state_with_basis(6, 3, 2, seed=2)
    u = np.array([0.5, 1.0, 2.0])
    cfg = flcore.TrainConfig(tau_phi=1, lr=0.2)
    new = flcore.local_encoder_update(c, state, cfg, u).encoder.B
    B, W = state.encoder.B, state.heads
    G = np.zeros_like(B)
    for x, y, z in zip(c.X, c.y, c.z):
        G += u[z] * np.outer(x, W[z]) * (x @ B @ W[z] - y)
    np.testing.assert_allclose(new, B - 0.2 * G / c.size, rtol=1e-12, atol=1e-14)


def test_encoder_steps_are_plain_gd_for_one_domain():
    gt = sample_ground_truth(5, 2, 2, 0.0, rng_seed=1)
    c = generate_client_dataset(gt, [1.0, 0.0], 25, 0, 0)
    state = state_with_basis(5, 2, 2, seed=3)
    cfg = flcore.TrainConfig(tau_phi=4, lr=0.1)
    got = flcore.local_encoder_update(c, state, cfg, np.ones(2)).encoder
    enc = state.encoder
    for _ in range(4):
        g = encoder_gradient(enc, state.heads, c.X, c.y, c.z)
        enc = enc.axpy(-0.1, g)
    np.testing.assert_allclose(got.B, enc.B, rtol=1e-13)


def test_vanishing_lr_leaves_encoder_unchanged():
    gt, clients = federation(n=1)
    state = state_with_basis(6, 3, 2)
    msg = flcore.local_encoder_update(clients[0], state, flcore.TrainConfig(lr=1e-300),
                                      np.ones(3))
    np.testing.assert_array_equal(msg.encoder.B, state.encoder.B)
    with pytest.raises(ValueError):
        flcore.TrainConfig(lr=0.0)


# --- rounds ---

@pytest.mark.parametrize("agg", ["WA", "SA"])
def test_single_client_round_is_local_training(agg):
    gt, clients = federation(seed=5, n=1, noise=0.05)
    c = clients[0]
    state = state_with_basis(6, 3, 2, seed=4)
    cfg = flcore.TrainConfig(tau_h=7, tau_phi=5, lr=0.1, agg=agg)
    new = flcore.feddar_round(state, clients, cfg)
    local_heads = state.heads.copy()
    for msg in flcore.local_head_update(c, state, cfg):
        local_heads[msg.domain] = msg.head
    np.testing.assert_array_equal(new.heads, local_heads)
    u = flcore._present_domain_weights(c.counts[None, :])
    enc = flcore.local_encoder_update(c, flcore.GlobalState(state.encoder, local_heads), cfg, u)
    np.testing.assert_allclose(new.encoder.B, enc.encoder.B, rtol=1e-14, atol=1e-16)


@pytest.mark.parametrize("agg", ["WA", "SA"])
def test_identical_clients_match_one_client(agg):
    gt, clients = federation(seed=6, n=1, noise=0.05, alpha=10.0)
    c = clients[0]
    twin = ClientDataset(1, c.X, c.y, c.z, c.M)
    state = state_with_basis(6, 3, 2, seed=5)
    cfg = flcore.TrainConfig(tau_h=5, tau_phi=5, lr=0.1, agg=agg)
    one = flcore.feddar_round(state, [c], cfg)
    two = flcore.feddar_round(state, [c, twin], cfg)
    np.testing.assert_allclose(two.heads, one.heads, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(two.encoder.B, one.encoder.B, rtol=1e-14, atol=1e-16)


def test_missing_domain_keeps_previous_head():
    gt = sample_ground_truth(5, 2, 3, rng_seed=0)
    clients = [generate_client_dataset(gt, [0.5, 0.5, 0.0], 20, 0, i) for i in range(3)]
    state = state_with_basis(5, 3, 2)
    new = flcore.feddar_round(state, clients, flcore.TrainConfig(tau_h=3, tau_phi=2))
    np.testing.assert_array_equal(new.heads[2], state.heads[2])
    assert new.info["kept_heads"] == [2]
    assert new.info["u"][2] == 0.0


def test_wa_converges_on_noiseless_problem():
    cfg = ExperimentConfig.from_dict({
        "method": "feddar_wa",
        "dataset": {"n": 10, "M": 5, "d": 20, "k": 2, "L": 100, "noise": 0.0, "seed": 0},
        "train": {"T": 200, "tau_h": 10, "tau_phi": 10, "lr": 0.1},
        "evaluation": {"test_per_domain": 500},
    })
    log = run_experiment(cfg)
    assert len(log.records) == 200
    assert max(log.records[-1].domain_risk) < 1e-4


def test_fedavg_and_wa_coincide_for_one_domain():
    base = {"dataset": {"n": 6, "M": 1, "d": 8, "L": 15, "seed": 3},
            "train": {"T": 15, "tau_h": 0, "tau_phi": 5, "fedavg_update": "alternating"},
            "evaluation": {"test_per_domain": 200}}
    wa = run_experiment(ExperimentConfig.from_dict({**base, "method": "feddar_wa"}))
    fa = run_experiment(ExperimentConfig.from_dict({**base, "method": "fedavg"}))
    for a, b in zip(wa.records, fa.records):
        assert abs(a.avg - b.avg) <= 1e-8


def test_single_client_fedavg_is_gradient_descent():
    gt, clients = federation(seed=7, n=1, M=2, noise=0.1)
    c = clients[0]
    cfg = flcore.TrainConfig(tau_h=3, tau_phi=4, lr=0.05)
    state = flcore.init_state(6, 2, cfg, method="fedavg")
    new = flcore.fedavg_round(state, clients, cfg)
    enc, w = state.encoder, state.heads
    z0 = np.zeros(c.size, dtype=int)
    for _ in range(7):
        _, g, hg = loss_and_grads(enc, w, c.X, c.y, z0)
        enc, w = enc.axpy(-0.05, g), w - 0.05 * hg
    np.testing.assert_allclose(new.encoder.B, enc.B, rtol=1e-12)
    np.testing.assert_allclose(new.heads, w, rtol=1e-12)


def test_fedrep_single_client_matches_single_domain_feddar():
    gt = sample_ground_truth(6, 2, 1, 0.05, rng_seed=1)
    clients = [generate_client_dataset(gt, [1.0], 30, 2, 0)]
    cfg = flcore.TrainConfig(tau_h=4, tau_phi=3, lr=0.1)
    s = state_with_basis(6, 1, 2, seed=8)
    rep = flcore.GlobalState(s.encoder, np.zeros((0, 2)), client_heads=s.heads.copy())
    for _ in range(5):
        s = flcore.feddar_round(s, clients, cfg)
        rep = flcore.fedrep_round(rep, clients, cfg)
    np.testing.assert_allclose(rep.client_heads, s.heads, rtol=1e-12)
    np.testing.assert_allclose(rep.encoder.B, s.encoder.B, rtol=1e-12)


def _fedrep_run(mixtures, rounds=150, seed=0):
    M = len(mixtures[0])
    gt = sample_ground_truth(8, 2, M, 0.0, rng_seed=seed, head_normalization="qr")
    clients = generate_federation(gt, mixtures, 60, seed + 2)
    cfg = flcore.TrainConfig(tau_h=10, tau_phi=10, lr=0.3)
    state = flcore.init_state(8, M, cfg, n_clients=len(clients), method="fedrep")
    for _ in range(rounds):
        state = flcore.fedrep_round(state, clients, cfg)
    return gt, clients, state


def test_fedrep_solves_single_domain_clients():
    mixtures = [np.eye(2)[i % 2] for i in range(6)]
    gt, clients, state = _fedrep_run(mixtures)
    models = [flcore.LocalModel(state.encoder, h) for h in state.client_heads]
    res = evaluate_personal(models, flcore.count_matrix(clients), gt,
                            generate_test_sets(gt, 300, 9), "regression")
    assert res["max"] < 1e-6


def test_fedrep_floor_on_mixed_clients():
    mixtures = [np.array([0.5, 0.5])] * 6
    gt, clients, state = _fedrep_run(mixtures)
    B = state.encoder.B
    # population risk of a single head against two domains, x ~ N(0, I)
    targets = gt.B_star @ gt.W_star.T
    floor = 0.25 * np.sum((targets[:, 0] - targets[:, 1]) ** 2)
    assert floor > 0.1
    for w in state.client_heads:
        risk = 0.5 * sum(np.sum((B @ w - targets[:, m]) ** 2) for m in range(2))
        assert risk >= floor * (1 - 1e-12)
        assert risk <= 1.5 * floor


def test_local_only_matches_single_client_fedavg():
    gt, clients = federation(seed=8, n=2, M=2, noise=0.1)
    cfg = flcore.TrainConfig(T=3, tau_h=2, tau_phi=2, lr=0.05)
    trained = flcore.local_only_train(clients[1], cfg)
    s = flcore.init_state(6, 2, cfg, method="local")
    for _ in range(3):
        s = flcore.fedavg_round(s, [clients[1]], cfg)
    np.testing.assert_allclose(trained.encoder.B, s.encoder.B, rtol=1e-13)
    np.testing.assert_allclose(trained.head, s.heads[0], rtol=1e-13)
    assert trained.round == 3


def test_alternating_loop_decreases_client_risk():
    gt, clients = federation(seed=9, n=1, M=3, L=60, noise=0.2, alpha=5.0)
    for lr in (0.01, 0.05):
        cfg = flcore.TrainConfig(tau_h=20, tau_phi=20, lr=lr, agg="WA")
        state = state_with_basis(6, 3, 2, seed=1)
        risks = [flcore.federated_risk(clients, state.encoder, state.heads)]
        for _ in range(15):
            state = flcore.feddar_round(state, clients, cfg)
            risks.append(flcore.federated_risk(clients, state.encoder, state.heads))
        assert np.all(np.diff(risks) <= 1e-15)


@pytest.mark.parametrize("method", ["feddar", "fedavg", "fedrep"])
def test_rounds_do_not_depend_on_thread_count(method):
    gt, clients = federation(seed=10, n=7, noise=0.1)
    cfg = flcore.TrainConfig(tau_h=3, tau_phi=3, lr=0.1, encoder="mlp1", k_proj=2, hidden=5)
    step = {"feddar": flcore.feddar_round, "fedavg": flcore.fedavg_round,
            "fedrep": flcore.fedrep_round}[method]
    results = []
    for threads in (1, 2, 3):
        state = flcore.init_state(6, 3, cfg, n_clients=7, method=method)
        with flcore.ClientPool(threads) as pool:
            for _ in range(3):
                state = step(state, clients, cfg, pool)
        results.append(state)
    for other in results[1:]:
        assert_states_equal(results[0], other)
        if method == "fedrep":
            assert results[0].client_heads.tobytes() == other.client_heads.tobytes()


def test_adam_and_classification_rounds_run():
    gt = sample_ground_truth(6, 2, 3, 0.0, "binary_classification", 0)
    clients = generate_federation(gt, sample_mixtures(4, 1.0, None, 1, M=3), 40, 2)
    cfg = flcore.TrainConfig(tau_h=3, tau_phi=3, lr=0.05, optimizer="adam",
                             task="binary_classification")
    state = flcore.init_state(6, 3, cfg)
    before = flcore.federated_risk(clients, state.encoder, state.heads, cfg.task)
    for _ in range(20):
        state = flcore.feddar_round(state, clients, cfg)
    after = flcore.federated_risk(clients, state.encoder, state.heads, cfg.task)
    assert after < before


def test_train_config_validation():
    with pytest.raises(ValueError):
        flcore.TrainConfig(T=0)
    with pytest.raises(ValueError):
        flcore.TrainConfig(agg="median")
    with pytest.raises(ValueError):
        flcore.TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        flcore.TrainConfig(task="ranking")
    assert flcore.TrainConfig(k_rep=4, k_proj=2).head_dim == 2
