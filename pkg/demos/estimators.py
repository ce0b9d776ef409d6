"""Reduced estimators of <Jz> fed from the same photocurrent.

Without a field the record enters only through Y = int y dt, so the full
filter, its Gaussian short-time reduction, the truncated-Gaussian
"integral" estimator and the plain average Y/t can be compared on one run.

Run:  python demos/estimators.py
"""
import numpy as np

from qndspin import SimParams
from qndspin.sde_engine import simulate_batch

params = SimParams(T=5.0)
runs = {name: simulate_batch(params, np.arange(200), estimator=name)
        for name in ("short_time", "integral", "average")}
full = runs["average"].jz

t = runs["average"].t
for name, res in runs.items():
    err = (res.jz_est - full) ** 2
    # early times: the average Y/t is dominated by noise
    print(f"{name:10s} mean squared error vs full filter at t=1: {err[:, np.argmin(abs(t - 1))].mean():.4f}"
          f"   at t=5: {err[:, -1].mean():.4f}")

# the average's error plus the conditional variance follows 1/(4 M eta t)
va = ((runs["average"].jz_est - full) ** 2 + runs["average"].var)[:, -1].mean()
print(f"V_a(5) = {va:.4f}, 1/(4t) = {1 / 20:.4f}")
