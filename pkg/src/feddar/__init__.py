"""Federated learning with domain-specific heads on a shared representation.

Modules
-------
numerics       QR, eigenvectors, SPD solves, subspace distance
datagen        synthetic domain-mixed client data
model          encoders, heads, losses and hand-written derivatives
aggregate      weighted and second-order (Hessian-weighted) aggregation
flcore         client/server rounds for FedDAR, FedAvg, FedRep, local training
linear_theory  the linear-regression variant with exact head solves
bench          experiment configs, runner, metrics and result files
"""

__version__ = "0.1.0"
