"""Experiment runner: config validation, training loops, evaluation, output.

A config is a JSON document with four blocks (``dataset``, ``method``,
``train``, ``evaluation``) plus optional ``algorithm2`` and ``sweep``
blocks. It is validated against :data:`CONFIG_SCHEMA`; unknown keys are
rejected. Missing keys take the defaults in :data:`DEFAULTS`.

Seeds: with ``dataset.seed = s`` the ground truth uses ``s``, client
mixtures ``s + 1``, training samples ``s + 2``, test samples ``s + 3``, and
model initialisation ``s``. The CSV output contains no timing data, so it
is byte-identical for a given config whatever the thread count.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import flcore
from .datagen import (
    SyntheticGroundTruth,
    generate_federation,
    generate_test_sets,
    sample_ground_truth,
    sample_mixtures,
)
from .linear_theory import Alg2Config, run_algorithm2
from .model import EncoderParams, _forward, features, sigmoid, task_kind
from .numerics import RankDeficientError, principal_angle_dist, qr_orthonormalize, row_dot

METHODS = ("local", "fedavg", "fedrep", "feddar_wa", "feddar_sa", "algorithm2")

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "feddar experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["method"],
    "properties": {
        "method": {"enum": list(METHODS)},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d": _pos_int,
                "k": _pos_int,
                "M": _pos_int,
                "n": _pos_int,
                "L": _pos_int,
                "noise": {"type": "number", "minimum": 0},
                "alpha_dir": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "prior": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
                "task": {"enum": ["regression", "binary_classification"]},
                "seed": {"type": "integer", "minimum": 0},
                "head_normalization": {"enum": ["rows", "qr", None]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": _pos_int,
                "tau_h": {"type": "integer", "minimum": 0},
                "tau_phi": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "optimizer": {"enum": ["gd", "adam"]},
                "encoder": {"enum": ["linear", "mlp1"]},
                "k_rep": _pos_int,
                "k_proj": {"type": ["integer", "null"], "minimum": 1},
                "hidden": _pos_int,
                "resample_each_round": {"type": "boolean"},
                "fedavg_update": {"enum": ["joint", "alternating"]},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "test_per_domain": _pos_int,
                "window": _pos_int,
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                          "minItems": 1},
            },
        },
        "algorithm2": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "L0": _pos_int,
                "eta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "resample": {"type": "boolean"},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["param", "values"],
            "properties": {
                "param": {"enum": ["dataset.L", "dataset.alpha_dir"]},
                "values": {"type": "array", "items": _num, "minItems": 1},
                "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
            },
        },
    },
}

DEFAULTS = {
    "dataset": {
        "d": 20, "k": 2, "M": 5, "n": 100, "L": 20, "noise": 1e-3, "alpha_dir": 0.4,
        "prior": None, "task": "regression", "seed": 0, "head_normalization": None,
    },
    "train": {
        "T": 200, "tau_h": 10, "tau_phi": 10, "lr": 0.05, "optimizer": "gd",
        "encoder": "linear", "k_rep": 2, "k_proj": None, "hidden": 16,
        "resample_each_round": False, "fedavg_update": "joint",
    },
    "evaluation": {"test_per_domain": 1000, "window": 10, "seeds": [0, 1, 2]},
    "algorithm2": {"L0": 200, "eta": None, "resample": True},
}


class ConfigError(ValueError):
    pass


def validate_config(doc: dict) -> dict:
    """Schema-check ``doc`` and return a fully populated copy."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    full = copy.deepcopy(DEFAULTS)
    for block, values in doc.items():
        if isinstance(values, dict) and block in full:
            full[block].update(copy.deepcopy(values))
        else:
            full[block] = copy.deepcopy(values)
    ds = full["dataset"]
    if ds["k"] > ds["d"]:
        raise ConfigError("dataset.k must not exceed dataset.d")
    if ds["prior"] is not None and len(ds["prior"]) != ds["M"]:
        raise ConfigError("dataset.prior must have M entries")
    if full["method"] == "algorithm2" and ds["task"] != "regression":
        raise ConfigError("algorithm2 needs the regression task")
    return full


@dataclass
class ExperimentConfig:
    method: str
    dataset: dict
    train: dict
    evaluation: dict
    algorithm2: dict
    sweep: dict | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        full = validate_config(doc)
        return cls(full["method"], full["dataset"], full["train"], full["evaluation"],
                   full["algorithm2"], full.get("sweep"))

    @classmethod
    def from_file(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = {"method": self.method, "dataset": self.dataset, "train": self.train,
               "evaluation": self.evaluation, "algorithm2": self.algorithm2}
        if self.sweep is not None:
            out["sweep"] = self.sweep
        return copy.deepcopy(out)

    def with_overrides(self, **dotted) -> ExperimentConfig:
        """Copy with ``{"dataset.L": 5, "method": "fedavg"}``-style overrides."""
        doc = self.to_dict()
        for key, value in dotted.items():
            parts = key.split(".")
            target = doc
            for p in parts[:-1]:
                target = target[p]
            target[parts[-1]] = value
        return ExperimentConfig.from_dict(doc)

    @property
    def seed(self) -> int:
        return int(self.dataset["seed"])

    def train_config(self) -> flcore.TrainConfig:
        agg = "WA" if self.method == "feddar_wa" else "SA"
        t = self.train
        return flcore.TrainConfig(
            T=t["T"], tau_h=t["tau_h"], tau_phi=t["tau_phi"], lr=t["lr"], agg=agg,
            optimizer=t["optimizer"], encoder=t["encoder"], k_rep=t["k_rep"],
            k_proj=t["k_proj"], hidden=t["hidden"],
            resample_each_round=t["resample_each_round"], seed=self.seed,
            task=self.dataset["task"], fedavg_update=t["fedavg_update"])


# --- metrics -----------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    domain_risk: list
    min: float
    avg: float
    max: float
    dist: float
    sa_fallbacks: int
    train_avg: float = math.nan
    wall_time: float = 0.0


@dataclass
class MetricsLog:
    config: dict
    M: int
    metric: str = "mse"
    records: list = field(default_factory=list)

    def append(self, rnd: int, metrics: dict, sa_fallbacks: int, train_avg=math.nan,
               wall_time: float = 0.0) -> None:
        self.records.append(RoundRecord(rnd, [float(v) for v in metrics["domain"]],
                                        float(metrics["min"]), float(metrics["avg"]),
                                        float(metrics["max"]), float(metrics["dist"]),
                                        int(sa_fallbacks), float(train_avg), float(wall_time)))

    def window_average(self, window: int = 10, key: str = "avg") -> float:
        """Mean of ``key`` over the last ``window`` records."""
        if not self.records:
            raise ValueError("empty log")
        vals = [getattr(r, key) for r in self.records[-window:]]
        return float(np.mean(vals))


def _summary(domain: np.ndarray, dist: float) -> dict:
    return {"domain": domain, "min": float(np.min(domain)), "avg": float(np.mean(domain)),
            "max": float(np.max(domain)), "dist": float(dist)}


def _domain_metric(pred: np.ndarray, y: np.ndarray, task: str) -> float:
    if task_kind(task) == "squared_error":
        return float(np.mean((pred - y) ** 2))
    return float(np.mean((pred >= 0.5) == (y >= 0.5)))


def _scores(enc, head, X, task):
    out = row_dot(features(enc, X), head)
    return out if task_kind(task) == "squared_error" else sigmoid(out)


def encoder_dist(enc: EncoderParams, gt: SyntheticGroundTruth | None) -> float:
    """Subspace distance of a linear encoder to ``B*``; NaN when undefined."""
    basis = enc.basis()
    if gt is None or basis is None or basis.shape[1] != gt.k:
        return math.nan
    try:
        Q, _ = qr_orthonormalize(basis)
    except (RankDeficientError, ValueError):
        return math.nan
    return principal_angle_dist(gt.B_star, Q)


def _stacked_dist(enc: EncoderParams, gt) -> np.ndarray:
    # batched encoder_dist over a leading client axis
    basis = enc.basis()
    n = (enc.B if enc.kind == "linear" else enc.W1).shape[0]
    if gt is None or basis is None or basis.shape[-1] != gt.k:
        return np.full(n, math.nan)
    Q, R = np.linalg.qr(basis)
    diag = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
    scale = np.linalg.norm(basis, axis=-2).max(axis=-1)
    resid = Q - gt.B_star @ (gt.B_star.T @ Q)
    out = np.clip(np.linalg.svd(resid, compute_uv=False)[:, 0], 0.0, 1.0)
    out[diag.min(axis=-1) <= 1e-12 * scale] = math.nan
    return out


def evaluate(state: flcore.GlobalState, ground_truth, test_sets, task="regression") -> dict:
    """Per-domain test metric for a global model.

    Domain ``m`` is scored with head ``m`` (or the single head if there is
    only one). Returns ``domain`` (array), ``min``, ``avg``, ``max`` and
    ``dist`` (subspace distance to ``B*`` for linear encoders, else NaN).
    """
    heads = np.atleast_2d(state.heads)
    vals = np.array([
        _domain_metric(_scores(state.encoder, heads[m if len(heads) > 1 else 0], X, task), y, task)
        for m, (X, y) in enumerate(test_sets)
    ])
    return _summary(vals, encoder_dist(state.encoder, ground_truth))


def evaluate_personal(models: Sequence[flcore.LocalModel], counts: np.ndarray, ground_truth,
                      test_sets, task="regression") -> dict:
    """Per-domain metric for per-client models (FedRep, local training).

    Domain ``m``'s score averages the clients' scores on that domain's test
    set with weights ``L_im / L_m``. ``dist`` is the sample-weighted mean of
    the clients' encoder distances.
    """
    counts = np.asarray(counts, dtype=np.float64)
    ref = models[0].encoder
    enc = ref.with_tensors({k: np.stack([m.encoder.tensors()[k] for m in models])
                            for k in ref.tensors()})
    heads = np.stack([np.asarray(m.head, dtype=np.float64) for m in models])
    vals = np.zeros(len(test_sets))
    for m, (X, y) in enumerate(test_sets):
        L_m = counts[:, m].sum()
        if L_m == 0:
            vals[m] = math.nan
            continue
        out = row_dot(_forward(enc, X[None])[0], heads[:, None, :])
        if task_kind(task) == "squared_error":
            per_client = np.mean((out - y) ** 2, axis=1)
        else:
            per_client = np.mean((sigmoid(out) >= 0.5) == (y >= 0.5), axis=1)
        vals[m] = float((counts[:, m] / L_m) @ per_client)
    sizes = counts.sum(axis=1)
    dist = float(sizes @ _stacked_dist(enc, ground_truth) / sizes.sum())
    return _summary(vals, dist)


# --- running -----------------------------------------------------------------

def head_normalization(cfg: ExperimentConfig) -> str:
    """Configured head normalisation; ``None`` means ``"qr"`` for algorithm2, else ``"rows"``."""
    hn = cfg.dataset["head_normalization"]
    if hn is None:
        hn = "qr" if cfg.method == "algorithm2" else "rows"
    return hn


def build_problem(cfg: ExperimentConfig):
    ds = cfg.dataset
    s = cfg.seed
    gt = sample_ground_truth(ds["d"], ds["k"], ds["M"], ds["noise"], ds["task"], s,
                             head_normalization(cfg))
    if ds["alpha_dir"] is None:
        prior = ds["prior"] if ds["prior"] is not None else np.full(ds["M"], 1.0 / ds["M"])
        mixtures = [np.asarray(prior, dtype=np.float64) for _ in range(ds["n"])]
    else:
        mixtures = sample_mixtures(ds["n"], ds["alpha_dir"], ds["prior"], s + 1, M=ds["M"])
    clients = generate_federation(gt, mixtures, ds["L"], s + 2)
    tests = generate_test_sets(gt, cfg.evaluation["test_per_domain"], s + 3)
    return gt, mixtures, clients, tests


def _train_avg(state, batch: flcore.ClientBatch, task) -> float:
    heads = np.atleast_2d(state.heads)
    z = batch.z if len(heads) > 1 else np.zeros_like(batch.z)
    F = features(state.encoder, batch.X.reshape(-1, batch.X.shape[-1])).reshape(
        batch.X.shape[0], batch.X.shape[1], -1)
    out = row_dot(F, heads[z])
    if task_kind(task) != "squared_error":
        return math.nan
    err = ((out - batch.y) ** 2) * batch.mask
    return float(err.sum() / batch.mask.sum())


def run_experiment(cfg: ExperimentConfig, threads: int = 1, return_state: bool = False):
    """Generate data, train ``cfg.method`` for ``T`` rounds, score every round."""
    if cfg.method == "algorithm2":
        log = _run_algorithm2(cfg)
        return (log, None) if return_state else log
    gt, mixtures, clients, tests = build_problem(cfg)
    tc = cfg.train_config()
    task = cfg.dataset["task"]
    ds = cfg.dataset
    log = MetricsLog(cfg.to_dict(), ds["M"], "mse" if task == "regression" else "accuracy")
    fixed = flcore.pack_clients(clients)
    counts = fixed.counts

    method = cfg.method
    kind = {"feddar_wa": "feddar", "feddar_sa": "feddar"}.get(method, method)
    state = flcore.init_state(ds["d"], ds["M"], tc, n_clients=ds["n"], method=kind)
    models = None
    if method == "local":
        models = [flcore.LocalModel(state.encoder, state.heads[0].copy()) for _ in clients]

    with flcore.ClientPool(threads) as pool:
        for t in range(tc.T):
            t0 = time.perf_counter()
            batch = fixed
            if tc.resample_each_round:
                batch = flcore.pack_clients(generate_federation(gt, mixtures, ds["L"], cfg.seed + 2,
                                                                stream=(t + 1,)))
            if method in ("feddar_wa", "feddar_sa"):
                state = flcore.feddar_round(state, batch, tc, pool)
            elif method == "fedavg":
                state = flcore.fedavg_round(state, batch, tc, pool)
            elif method == "fedrep":
                state = flcore.fedrep_round(state, batch, tc, pool)
            else:
                models = flcore.local_only_round(models, batch, tc, pool)

            if method == "fedrep":
                per_client = [flcore.LocalModel(state.encoder, h) for h in state.client_heads]
                metrics = evaluate_personal(per_client, counts, gt, tests, task)
                train = math.nan
            elif method == "local":
                metrics = evaluate_personal(models, counts, gt, tests, task)
                train = math.nan
            else:
                metrics = evaluate(state, gt, tests, task)
                train = _train_avg(state, batch, task)
            fallbacks = state.info.get("sa_fallbacks", 0) if method.startswith("feddar") else 0
            log.append(t + 1, metrics, fallbacks, train, time.perf_counter() - t0)

    if not return_state:
        return log
    return log, (models if method == "local" else state)


def _run_algorithm2(cfg: ExperimentConfig) -> MetricsLog:
    ds, a2 = cfg.dataset, cfg.algorithm2
    ac = Alg2Config(n=ds["n"], M=ds["M"], d=ds["d"], k=ds["k"], L=ds["L"], L0=a2["L0"],
                    eta=a2["eta"], T=cfg.train["T"], noise=ds["noise"], resample=a2["resample"],
                    seed=cfg.seed, alpha_dir=ds["alpha_dir"],
                    head_normalization=head_normalization(cfg))
    log = MetricsLog(cfg.to_dict(), ds["M"], "train_risk")
    for rec in run_algorithm2(ac)[1:]:
        log.append(rec.round, _summary(2.0 * rec.domain_risk, rec.dist), 0)
    return log


# --- output ------------------------------------------------------------------

def csv_header(M: int) -> list[str]:
    return ["round"] + [f"domain_{m}_risk" for m in range(M)] + ["min", "avg", "max", "dist",
                                                                  "sa_fallbacks"]


def _fmt(v: float) -> str:
    return repr(float(v))


def results_csv(log: MetricsLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(log.M))
    for r in log.records:
        w.writerow([r.round] + [_fmt(v) for v in r.domain_risk]
                   + [_fmt(r.min), _fmt(r.avg), _fmt(r.max), _fmt(r.dist), r.sa_fallbacks])
    return buf.getvalue()


def results_json(log: MetricsLog) -> str:
    doc = {"config": log.config, "M": log.M, "metric": log.metric,
           "records": [asdict(r) for r in log.records]}
    return json.dumps(doc, indent=1)


def emit_results(log: MetricsLog, path, format: str = "csv") -> Path:
    """Write ``log`` as CSV (fixed columns) or JSON (config embedded)."""
    if format not in ("csv", "json"):
        raise ValueError(f"unknown format {format!r}")
    path = Path(path)
    text = results_csv(log) if format == "csv" else results_json(log)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def load_results_json(path) -> MetricsLog:
    doc = json.loads(Path(path).read_text())
    log = MetricsLog(doc["config"], doc["M"], doc["metric"])
    log.records = [RoundRecord(**r) for r in doc["records"]]
    return log


# --- sweeps ------------------------------------------------------------------

def _point_key(method: str, value, seed: int) -> str:
    return f"{method}_v{value:g}_s{seed}"


def _sweep_point(args):
    doc, threads = args
    cfg = ExperimentConfig.from_dict(doc)
    return run_experiment(cfg, threads)


def sweep(cfg: ExperimentConfig, out_dir=None, workers: int = 1, threads: int = 1,
          format: str = "csv") -> dict:
    """Run every (method, value, seed) point of ``cfg.sweep``.

    Returns ``{key: MetricsLog}`` in grid order. With ``out_dir`` each log
    is written as ``<key>.<format>`` and ``manifest.json`` records the grid
    and a per-method headline (final-window average over seeds).
    """
    if cfg.sweep is None:
        raise ConfigError("config has no sweep block")
    param, values = cfg.sweep["param"], cfg.sweep["values"]
    methods = cfg.sweep.get("methods", [cfg.method])
    seeds = cfg.evaluation["seeds"]
    grid = []
    for method in methods:
        for v in values:
            v = int(v) if param == "dataset.L" else float(v)
            for s in seeds:
                point = cfg.with_overrides(**{param: v, "method": method, "dataset.seed": s})
                doc = point.to_dict()
                doc.pop("sweep", None)
                grid.append((_point_key(method, v, s), method, v, s, doc))
    jobs = [(doc, threads) for *_, doc in grid]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            logs = list(ex.map(_sweep_point, jobs))
    else:
        logs = [_sweep_point(j) for j in jobs]
    results = {key: log for (key, *_), log in zip(grid, logs)}

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for key, log in results.items():
            emit_results(log, out / f"{key}.{format}", format)
        window = cfg.evaluation["window"]
        headline = {}
        for method in methods:
            for v in values:
                v = int(v) if param == "dataset.L" else float(v)
                keys = [_point_key(method, v, s) for s in seeds]
                headline[f"{method}_v{v:g}"] = float(
                    np.mean([results[k].window_average(window) for k in keys]))
        manifest = {"param": param, "values": values, "methods": methods, "seeds": seeds,
                    "d": cfg.dataset["d"], "window": window,
                    "points": [{"key": k, "method": m, "value": v, "seed": s}
                               for k, m, v, s, _ in grid],
                    "headline": headline}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return results


def headline(logs: Sequence[MetricsLog], window: int = 10) -> float:
    """Final-window average of the domain-mean metric, averaged over runs (seeds)."""
    return float(np.mean([log.window_average(window) for log in logs]))
