"""Scratch: validate qr_batch_solve against brute-force vertex enumeration."""
import itertools
import time

import numpy as np

from adaqr.core import check_loss, empirical_quantile
from adaqr.taqr import qr_batch_solve


def brute_force_objective(X, y, tau):
    """Enumerate all K-row interpolating vertices, return min objective."""
    n, k = X.shape
    best = np.inf
    subs = np.array(list(itertools.combinations(range(n), k)))
    # batched solves
    A = X[subs]                # (m, k, k)
    b = y[subs]                # (m, k)
    dets = np.linalg.det(A)
    keep = np.abs(dets) > 1e-12 * max(1.0, np.abs(dets).max())
    betas = np.linalg.solve(A[keep], b[keep][..., None])[..., 0]
    res = y[None, :] - betas @ X.T
    objs = np.sum(check_loss(res, tau), axis=1)
    return float(np.min(objs))


rng = np.random.default_rng(20260822)
t_start = time.perf_counter()
worst = 0.0
n_cases = 0
for trial in range(200):
    k = int(rng.integers(1, 6))
    n_max = {1: 200, 2: 120, 3: 60, 4: 35, 5: 26}[k]
    n = int(rng.integers(k + 1, n_max + 1))
    X = rng.standard_normal((n, k)) * rng.uniform(0.5, 3)
    if k > 1 and rng.random() < 0.5:
        X[:, 0] = 1.0  # intercept column
    y = rng.standard_normal(n) * rng.uniform(0.5, 50) + rng.uniform(-20, 20)
    tau = [0.1, 0.5, 0.9][trial % 3]
    beta, basis, obj = qr_batch_solve(X, y, tau)
    obj_bf = brute_force_objective(X, y, tau)
    gap = abs(obj - obj_bf)
    worst = max(worst, gap)
    n_cases += 1
    if gap > 1e-9:
        print(f"FAIL trial={trial} n={n} k={k} tau={tau} gap={gap:.3e}")
elapsed = time.perf_counter() - t_start
print(f"{n_cases} cases, worst gap {worst:.3e}, {elapsed:.2f}s")

# intercept-only exactness (inf convention), incl. integer n*tau boundaries
bad = 0
for trial in range(50):
    n = int(rng.integers(3, 300))
    y = np.round(rng.standard_normal(n) * 100, 3)
    tau = float(rng.choice([0.05, 0.1, 0.25, 0.45, 0.5, 0.75, 0.9, 0.95]))
    beta, _, _ = qr_batch_solve(np.ones((n, 1)), y, tau)
    q = empirical_quantile(y, tau)
    if beta[0] != q:
        bad += 1
        print(f"EXACT-FAIL n={n} tau={tau} beta={beta[0]!r} q={q!r}")
print("intercept-only exact failures:", bad)
