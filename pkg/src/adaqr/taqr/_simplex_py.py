"""Pure-NumPy simplex kernel for vertex-based check-loss minimization.

The LP solved here, for one quantile level tau, is

    min  tau * sum(r+) + (1 - tau) * sum(r-)
    s.t. X beta + r+ - r- = y,    r+, r- >= 0.

Every vertex of this LP interpolates exactly K of the n rows: the basis is
a set h of K row indices with zero residuals and beta = X[h]^(-1) y[h].
Re-optimization walks from vertex to vertex by releasing one basic row in
the direction that lowers the objective.  The entering choice is
most-negative reduced cost; while the ratio test is degenerate (ties
within 1e-10) the kernel switches to Bland's least-index rule, which
cannot cycle.  The basis inverse is maintained by rank-one updates and
refactorized periodically to bound drift.

This module is the reference implementation; _simplex_c is a compiled
twin with identical semantics, selected at import in `backend`.
"""

import numpy as np

# status codes shared with the compiled kernel
OPT = 0           # dual feasible: vertex is optimal
CAP = 1           # pivot budget exhausted
SINGULAR = 2      # basis factorization broke down
INCONSISTENT = 3  # no blocking row: impossible for this LP unless inputs are corrupt

_SING_REL = 1e-11      # basis singularity threshold, relative to max |X[h]|
_PIV_REL = 1e-10       # ratio-test blocking threshold, relative to |w|_inf
_TIE_ABS = 1e-10       # ratio-test tie width that engages Bland's rule
_OPT_REL = 1e-10       # dual feasibility slack
_CANON_EPS = 1e-9      # neutral-direction slack for the K=1 canonical vertex
_REFRESH_EVERY = 50    # pivots between inverse refactorizations


def gj_inverse(a):
    """Gauss-Jordan inverse with partial pivoting; None when singular.

    Hand-rolled (rather than np.linalg.inv) so that the singularity rule
    is explicit and identical across backends.
    """
    a = np.asarray(a, dtype=np.float64)
    k = a.shape[0]
    if k == 0:
        return np.empty((0, 0))
    scale = float(np.max(np.abs(a)))
    if not np.isfinite(scale):
        return None
    scale = max(1.0, scale)
    aug = np.hstack([np.array(a, copy=True), np.eye(k)])
    for col in range(k):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        pval = aug[piv, col]
        if not np.isfinite(pval) or abs(pval) <= _SING_REL * scale:
            return None
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= pval
        others = np.abs(aug[:, col]) > 0.0
        others[col] = False
        if np.any(others):
            aug[others] -= np.outer(aug[others, col], aug[col])
    return np.ascontiguousarray(aug[:, k:])


def _duals(X, s, tau, binv):
    """Basic dual values nu_h solving X[h]^T nu_h = -X[~h]^T nu_nonbasic."""
    nu = np.where(s > 0, tau, tau - 1.0)
    nu[s == 0] = 0.0
    v = X.T @ nu
    return -(binv.T @ v)


def _ratio_test(s, r, w, sigma, bland):
    """Leaving row for direction sigma; returns (i_star, tstar, degenerate).

    i_star is -1 when no row blocks (an inconsistent state for this LP).
    """
    winf = float(np.max(np.abs(w)))
    blk_tol = _PIV_REL * max(1.0, winf)
    a = sigma * (s * w)
    cand = a < -blk_tol
    if not np.any(cand):
        return -1, 0.0, False
    sr = np.maximum(s * r, 0.0)
    t_all = np.full(r.shape, np.inf)
    t_all[cand] = sr[cand] / -a[cand]
    tstar = float(np.min(t_all))
    ties = np.nonzero(t_all <= tstar + _TIE_ABS)[0]
    if bland:
        i_star = int(ties[0])  # smallest row index
    else:
        i_star = int(ties[np.argmax(np.abs(a[ties]))])
    degenerate = ties.size > 1 or tstar <= _TIE_ABS
    return i_star, tstar, degenerate


def solve_from_basis(X, y, tau, h, max_pivots, feas_tol, canonical=True):
    """Re-optimize from basis h; h is modified in place.

    Parameters
    ----------
    X : (n, k) float64, C-contiguous
        Design matrix (the current window).
    y : (n,) float64
        Observations.
    tau : float
        Level in (0, 1).
    h : (k,) int64
        Row indices of the starting basis; overwritten with the final basis.
    max_pivots : int
        Pivot budget; exceeding it returns status CAP.
    feas_tol : float
        Residual magnitude treated as zero (interpolation tolerance).
    canonical : bool
        For k == 1, walk across cost-neutral vertices so that beta lands on
        the inf-based empirical quantile (lowest optimal vertex).

    Returns
    -------
    (beta, r, s, n_pivots, status)
        beta: (k,) coefficients; r: (n,) residuals (zero on the basis);
        s: (n,) int8 residual signs, 0 on the basis; status: OPT/CAP/
        SINGULAR/INCONSISTENT.  On SINGULAR the arrays are None.
    """
    n, k = X.shape
    binv = gj_inverse(X[h])
    if binv is None:
        return None, None, None, 0, SINGULAR
    beta = binv @ y[h]
    r = y - X @ beta
    r[h] = 0.0
    s = np.where(r >= 0.0, 1, -1).astype(np.int8)
    s[h] = 0
    pivots = 0
    since_refresh = 0
    bland = False
    status = None

    while True:
        nu_h = _duals(X, s, tau, binv)
        dplus = tau - nu_h
        dminus = (1.0 - tau) + nu_h
        opt_eps = _OPT_REL * max(1.0, float(np.max(np.abs(nu_h))))
        p = -1
        sigma = 0
        if bland:
            # least-index entering variable: row h[p] with + before -
            for p_ in np.argsort(h, kind="stable"):
                if dplus[p_] < -opt_eps:
                    p, sigma = int(p_), 1
                    break
                if dminus[p_] < -opt_eps:
                    p, sigma = int(p_), -1
                    break
        else:
            pp = int(np.argmin(dplus))
            pm = int(np.argmin(dminus))
            if dplus[pp] <= dminus[pm]:
                cand_p, cand_sigma, dval = pp, 1, dplus[pp]
            else:
                cand_p, cand_sigma, dval = pm, -1, dminus[pm]
            if dval < -opt_eps:
                p, sigma = cand_p, cand_sigma
        if p < 0:
            status = OPT
            break
        if pivots >= max_pivots:
            status = CAP
            break

        u = binv[:, p].copy()
        w = X @ u
        i_star, tstar, degen = _ratio_test(s, r, w, sigma, bland)
        if i_star < 0:
            status = INCONSISTENT
            break
        bland = degen

        # pivot: row h[p] leaves the basis with residual sign sigma, row
        # i_star enters with residual forced to zero
        j = int(h[p])
        step = sigma * tstar
        beta -= step * u
        r += step * w
        r[i_star] = 0.0
        s[j] = sigma
        s[i_star] = 0
        h[p] = i_star
        wi = w[i_star]
        g = binv.T @ X[i_star]
        g[p] -= 1.0
        binv -= np.outer(u, g) / wi
        pivots += 1
        since_refresh += 1
        if since_refresh >= _REFRESH_EVERY:
            binv = gj_inverse(X[h])
            if binv is None:
                return None, None, None, pivots, SINGULAR
            beta = binv @ y[h]
            r = y - X @ beta
            r[h] = 0.0
            since_refresh = 0

    if status != OPT:
        return beta, r, s, pivots, status

    # final refresh: recompute (binv, beta, r) from the optimal basis so the
    # returned solution is free of incremental-update drift; in particular a
    # K=1 basis returns the interpolated observation bit-exactly
    binv2 = gj_inverse(X[h])
    if binv2 is not None:
        binv = binv2
        beta = binv @ y[h]
        r = y - X @ beta
        r[h] = 0.0

    if canonical and k == 1:
        # Optimal faces can be edges: for the (scaled-)intercept design all
        # optima share one fitted value range and the inf-based quantile is
        # the lowest vertex.  Take cost-neutral downward pivots until the
        # reduced cost of the downward direction turns strictly positive.
        for _ in range(n):
            nu_h = _duals(X, s, tau, binv)
            if tau - nu_h[0] > _CANON_EPS:
                break
            u = binv[:, 0].copy()
            w = X @ u
            i_star, tstar, _ = _ratio_test(s, r, w, 1, False)
            if i_star < 0 or tstar <= 0.0:
                break
            j = int(h[0])
            beta -= tstar * u
            r += tstar * w
            r[i_star] = 0.0
            s[j] = 1
            s[i_star] = 0
            h[0] = i_star
            wi = w[i_star]
            g = binv.T @ X[i_star]
            g[0] -= 1.0
            binv -= np.outer(u, g) / wi
            pivots += 1
            binv2 = gj_inverse(X[h])
            if binv2 is not None:
                binv = binv2
                beta = binv @ y[h]
                r = y - X @ beta
                r[h] = 0.0

    return beta, r, s, pivots, OPT
