"""Compare the five training methods on the synthetic linear benchmark.

Every client draws its domain labels from a Dirichlet mixture over five
domains. Each domain has its own linear head on top of a shared 2-d
subspace of a 20-d input. We train each method and report the noiseless
test MSE averaged over the last 10 rounds.

    python demos/synthetic_comparison.py            # L = 20, seed 0
    python demos/synthetic_comparison.py 5 1        # L = 5, seed 1
"""

import sys
import time

from feddar.bench import ExperimentConfig, run_experiment

L = int(sys.argv[1]) if len(sys.argv) > 1 else 20
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

print(f"n=100 clients, M=5 domains, d=20, k=2, L={L} samples per client, seed {seed}")
print(f"{'method':<10} {'test MSE':>10} {'dist to B*':>11} {'secs':>6}")
results = {}
for method in ("local", "fedavg", "fedrep", "feddar_wa", "feddar_sa"):
    cfg = ExperimentConfig.from_dict({"method": method, "dataset": {"L": L, "seed": seed}})
    t0 = time.perf_counter()
    log = run_experiment(cfg)
    mse = log.window_average(10)
    results[method] = mse
    print(f"{method:<10} {mse:10.3e} {log.window_average(10, 'dist'):11.2e} "
          f"{time.perf_counter() - t0:6.1f}")

sa = results["feddar_sa"]
print()
for method, mse in results.items():
    if method != "feddar_sa":
        print(f"{method} / feddar_sa = {mse / sa:.3g}")
