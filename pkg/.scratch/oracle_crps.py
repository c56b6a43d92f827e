"""Scratch: CRPS closed form vs quadrature and the pairwise identity."""
import numpy as np
from scipy.integrate import quad

from adaqr.scoring import crps_ensemble


def crps_quad(members, y):
    z = np.sort(np.asarray(members, dtype=float))
    m = z.size

    def integrand(x):
        f = np.searchsorted(z, x, side="right") / m
        ind = 1.0 if y <= x else 0.0
        return (f - ind) ** 2

    pts = np.unique(np.concatenate([z, [y]]))
    lo = pts[0] - 1.0
    hi = pts[-1] + 1.0
    val, _ = quad(integrand, lo, hi, points=list(pts), limit=200)
    # tails outside [lo, hi] contribute 0: F=0 below, F=1 above, ind matches
    return val


def crps_pairwise(members, y):
    z = np.asarray(members, dtype=float)
    m = z.size
    return np.mean(np.abs(z - y)) - np.sum(np.abs(z[:, None] - z[None, :])) / (2 * m * m)


rng = np.random.default_rng(42)
worst_q = worst_p = 0.0
for _ in range(100):
    m = int(rng.integers(1, 60))
    members = rng.standard_normal(m) * rng.uniform(0.5, 30)
    if rng.random() < 0.3:
        members[rng.integers(0, m)] = members[0]  # ties
    y = float(rng.standard_normal() * 20)
    c = crps_ensemble(members, y)
    worst_q = max(worst_q, abs(c - crps_quad(members, y)))
    worst_p = max(worst_p, abs(c - crps_pairwise(members, y)))
print(f"worst vs quadrature: {worst_q:.3e}; worst vs pairwise identity: {worst_p:.3e}")

print("unit cases:",
      crps_ensemble([0.5], 0.5),
      abs(crps_ensemble([3.0], 1.0) - 2.0),
      abs(crps_ensemble([0.0, 1.0], 0.5) - 0.25))
