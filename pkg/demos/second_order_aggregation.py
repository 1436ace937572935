"""Why heads are aggregated with their Hessians.

Three clients hold different amounts of data for the same domain, and
their inputs have different covariances. Each fits the head exactly on its
own data. Averaging those heads by sample count does not give the head a
server would fit on the pooled data; weighting by the local Hessians does.
"""

import numpy as np

from feddar.aggregate import HeadUpdateMsg, aggregate_heads
from feddar.model import EncoderParams, features, head_hessian

rng = np.random.default_rng(0)
d, k = 6, 3
enc = EncoderParams("linear", B=np.linalg.qr(rng.standard_normal((d, k)))[0])
w_true = rng.standard_normal(k)

msgs, feats, labels = [], [], []
for L, scale in ((8, 0.3), (20, 1.0), (5, 3.0)):
    X = rng.standard_normal((L, d)) * scale * rng.uniform(0.2, 2.0, d)
    y = features(enc, X) @ w_true + 0.5 * rng.standard_normal(L)
    Phi = features(enc, X)
    w_local = np.linalg.lstsq(Phi, y, rcond=None)[0]
    msgs.append(HeadUpdateMsg(0, w_local, head_hessian(enc, w_local, X), L))
    feats.append(Phi)
    labels.append(y)

pooled = np.linalg.lstsq(np.vstack(feats), np.concatenate(labels), rcond=None)[0]
wa = aggregate_heads(msgs, "WA").head
sa = aggregate_heads(msgs, "SA").head
print("pooled least squares:", np.round(pooled, 6))
print("weighted average    :", np.round(wa, 6), f" error {np.linalg.norm(wa - pooled):.2e}")
print("second-order        :", np.round(sa, 6), f" error {np.linalg.norm(sa - pooled):.2e}")
