"""Command line entry point: ``python -m feddar <command> [flags]``.

Commands
--------
generate   write a synthetic federation to ``--out``
train      run one experiment, write results and a checkpoint to ``--out``
sweep      run the grid in the config's ``sweep`` block
evaluate   re-score a saved checkpoint on fresh test sets
selftest   run the built-in invariant checks

The config file is the single source of truth; only ``--seed`` overrides it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, flcore
from .datagen import dump_dataset
from .model import EncoderParams, config_hash, load_checkpoint, save_checkpoint


def _load_config(args) -> bench.ExperimentConfig:
    if args.config is None:
        raise SystemExit("--config is required")
    cfg = bench.ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(**{"dataset.seed": int(args.seed)})
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    gt, mixtures, clients, _ = bench.build_problem(cfg)
    path = dump_dataset(_out_dir(args), clients, gt, cfg.seed, mixtures)
    np.savez(path.parent / "ground_truth.npz", B_star=gt.B_star, W_star=gt.W_star)
    print(f"wrote {len(clients)} clients to {path.parent}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    log, final = bench.run_experiment(cfg, threads=args.threads, return_state=True)
    path = bench.emit_results(log, out / f"results.{args.format}", args.format)
    chash = config_hash(cfg.to_dict())
    if isinstance(final, flcore.GlobalState):
        save_checkpoint(out / "checkpoint.json", final.encoder, final.heads, final.round, chash,
                        final.client_heads)
    elif final is not None:
        # local training: per-client encoders stacked on a leading axis
        ref = final[0].encoder
        stacked = ref.with_tensors({k: np.stack([m.encoder.tensors()[k] for m in final])
                                    for k in ref.tensors()})
        save_checkpoint(out / "checkpoint.json", stacked, np.zeros((1, ref.out_dim)),
                        final[0].round, chash, np.stack([m.head for m in final]))
    last = log.records[-1]
    print(f"{cfg.method}: final avg {log.metric} {last.avg:.6g}, "
          f"last-{cfg.evaluation['window']} average {log.window_average(cfg.evaluation['window']):.6g}")
    print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    results = bench.sweep(cfg, out, workers=args.workers, threads=args.threads, format=args.format)
    manifest = json.loads((out / "manifest.json").read_text())
    for key, value in manifest["headline"].items():
        print(f"{key}: {value:.6g}")
    print(f"wrote {len(results)} logs to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint.json"
    ck = load_checkpoint(ckpt_path)
    gt, _, clients, tests = bench.build_problem(cfg)
    task = cfg.dataset["task"]
    enc: EncoderParams = ck["encoder"]
    stacked = enc.B.ndim == 3 if enc.kind == "linear" else enc.W1.ndim == 3
    counts = flcore.count_matrix(flcore.pack_clients(clients))
    if stacked:
        models = [flcore.LocalModel(enc.map(lambda v, i=i: v[i]), ck["client_heads"][i])
                  for i in range(len(ck["client_heads"]))]
        metrics = bench.evaluate_personal(models, counts, gt, tests, task)
    elif ck["client_heads"] is not None:
        models = [flcore.LocalModel(enc, h) for h in ck["client_heads"]]
        metrics = bench.evaluate_personal(models, counts, gt, tests, task)
    else:
        metrics = bench.evaluate(flcore.GlobalState(enc, ck["heads"]), gt, tests, task)
    doc = {"round": ck["round"], "domain": [float(v) for v in metrics["domain"]],
           "min": metrics["min"], "avg": metrics["avg"], "max": metrics["max"],
           "dist": metrics["dist"], "config_hash_match": ck["config_hash"] == config_hash(cfg.to_dict())}
    text = json.dumps(doc, indent=1)
    if args.format == "json" and args.out:
        (_out_dir(args) / "evaluation.json").write_text(text)
    print(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all
    ok = run_all(verbose=True)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feddar", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="override dataset.seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--format", choices=["csv", "json"], default="csv")
        sp.add_argument("--threads", type=int, default=1, help="client worker threads")

    common(sub.add_parser("generate", help="dump a synthetic federation"))
    common(sub.add_parser("train", help="run one experiment"))
    sp = sub.add_parser("sweep", help="run the config's sweep grid")
    common(sp)
    sp.add_argument("--workers", type=int, default=1, help="grid points run in parallel processes")
    sp = sub.add_parser("evaluate", help="re-score a checkpoint")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.json)")
    sub.add_parser("selftest", help="run the invariant checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep,
               "evaluate": cmd_evaluate, "selftest": cmd_selftest}[args.command]
    if args.command == "evaluate" and not (args.checkpoint or args.out):
        raise SystemExit("evaluate needs --checkpoint or --out")
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
