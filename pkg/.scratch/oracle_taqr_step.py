"""Scratch: taqr_step objective vs cold refit over a 500-step window run."""
import time

import numpy as np

from adaqr.taqr import batch_solve_full, taqr_step, warm_start

rng = np.random.default_rng(7)
K = 4
T = 800
n_init = 200
n_full = 200

# drifting linear-ish data so the window actually matters
t_ax = np.arange(T)
Xs = np.column_stack(
    [
        np.ones(T),
        np.sin(2 * np.pi * t_ax / 160) + 0.1 * rng.standard_normal(T),
        rng.standard_normal(T),
        0.5 * np.cos(2 * np.pi * t_ax / 24) + 0.1 * rng.standard_normal(T),
    ]
)
beta_true = np.array([5.0, 2.0, -1.0, 3.0])
y = Xs @ beta_true + (1 + 0.5 * np.abs(Xs[:, 2])) * rng.standard_normal(T) * 2

for tau in (0.1, 0.5, 0.9):
    state = warm_start(Xs[:n_init], y[:n_init], tau, n_full=n_full)
    worst = 0.0
    pivots = []
    t0 = time.perf_counter()
    for t in range(n_init, n_init + 500):
        pred, state = taqr_step(state, Xs[t], y[t])
        Xw, yw = state.window()
        cold = batch_solve_full(Xw, yw, tau)
        gap = abs(state.objective - cold.objective)
        worst = max(worst, gap)
        pivots.append(state.last_pivots)
        if gap > 1e-6:
            print(f"STEP-FAIL tau={tau} t={t} gap={gap:.3e}")
    dt = time.perf_counter() - t0
    print(
        f"tau={tau}: worst obj gap {worst:.3e}, median pivots "
        f"{np.median(pivots):.1f}, mean {np.mean(pivots):.2f}, max {max(pivots)}, "
        f"cold_restarts={state.cold_restarts}, {dt:.2f}s (incl. oracle refits)"
    )
