"""Quality of the method-of-moments encoder estimate versus sample count.

Clients send the label-weighted second moment of their inputs and the
server keeps its top-k eigenvectors. More samples per client should give
an initial subspace closer to the truth.
"""

import numpy as np

from feddar.datagen import generate_federation, sample_ground_truth
from feddar.linear_theory import mom_init
from feddar.numerics import principal_angle_dist

n, d, k, M = 20, 20, 2, 5
for seed in range(3):
    gt = sample_ground_truth(d, k, M, 0.0, rng_seed=seed, head_normalization="qr")
    row = []
    for L0 in (50, 200, 800, 3200):
        clients = generate_federation(gt, [np.full(M, 1 / M)] * n, L0, seed + 2)
        row.append(principal_angle_dist(gt.B_star, mom_init(clients, k).basis))
    print(f"seed {seed}: " + "  ".join(f"L0={L0}: {v:.3f}" for L0, v in zip((50, 200, 800, 3200), row)))
