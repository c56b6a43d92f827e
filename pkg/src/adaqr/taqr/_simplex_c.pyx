# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled simplex kernel: semantic twin of _simplex_py.

Same vertex walk, same thresholds, same pivot rules, same status codes.
The only permitted difference is floating-point rounding inside reductions
(serial C sums here versus BLAS-blocked sums in the NumPy kernel), so
cross-backend runs agree on the optimum to solver tolerance while each
backend stays bit-for-bit deterministic with itself.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, isfinite

cnp.import_array()

OPT = 0
CAP = 1
SINGULAR = 2
INCONSISTENT = 3

cdef double _SING_REL = 1e-11
cdef double _PIV_REL = 1e-10
cdef double _TIE_ABS = 1e-10
cdef double _OPT_REL = 1e-10
cdef double _CANON_EPS = 1e-9
cdef int _REFRESH_EVERY = 50

cdef double _INF = float("inf")


cdef int _gj(double[:, ::1] src, double[:, ::1] aug, double[:, ::1] out) nogil:
    """Gauss-Jordan inverse of src into out using aug as (k, 2k) scratch.

    Returns 0 on success, 1 when singular by the shared threshold rule.
    """
    cdef Py_ssize_t k = src.shape[0]
    cdef Py_ssize_t i, j, col, piv
    cdef double scale = 0.0
    cdef double v, pval, factor

    for i in range(k):
        for j in range(k):
            v = fabs(src[i, j])
            if v > scale:
                scale = v
    if not isfinite(scale):
        return 1
    if scale < 1.0:
        scale = 1.0

    for i in range(k):
        for j in range(k):
            aug[i, j] = src[i, j]
        for j in range(k):
            aug[i, k + j] = 1.0 if i == j else 0.0

    for col in range(k):
        piv = col
        v = fabs(aug[col, col])
        for i in range(col + 1, k):
            if fabs(aug[i, col]) > v:
                v = fabs(aug[i, col])
                piv = i
        pval = aug[piv, col]
        if not isfinite(pval) or fabs(pval) <= _SING_REL * scale:
            return 1
        if piv != col:
            for j in range(2 * k):
                v = aug[col, j]
                aug[col, j] = aug[piv, j]
                aug[piv, j] = v
        for j in range(2 * k):
            aug[col, j] /= pval
        for i in range(k):
            if i == col:
                continue
            factor = aug[i, col]
            if fabs(factor) > 0.0:
                for j in range(2 * k):
                    aug[i, j] -= factor * aug[col, j]

    for i in range(k):
        for j in range(k):
            out[i, j] = aug[i, k + j]
    return 0


def gj_inverse(a):
    """Gauss-Jordan inverse with partial pivoting; None when singular."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t k = a.shape[0]
    if k == 0:
        return np.empty((0, 0))
    out = np.empty((k, k))
    aug = np.empty((k, 2 * k))
    if _gj(a, aug, out):
        return None
    return out


cdef void _gather(double[:, ::1] X, cnp.int64_t[::1] h, double[:, ::1] dst) nogil:
    cdef Py_ssize_t k = h.shape[0]
    cdef Py_ssize_t i, j
    for i in range(k):
        for j in range(k):
            dst[i, j] = X[h[i], j]


cdef void _beta_resid(double[:, ::1] X, double[::1] y, cnp.int64_t[::1] h,
                      double[:, ::1] binv, double[::1] beta,
                      double[::1] r) nogil:
    """beta = binv @ y[h]; r = y - X @ beta; r[h] = 0."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t k = h.shape[0]
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(k):
        acc = 0.0
        for j in range(k):
            acc += binv[i, j] * y[h[j]]
        beta[i] = acc
    for i in range(n):
        acc = 0.0
        for j in range(k):
            acc += X[i, j] * beta[j]
        r[i] = y[i] - acc
    for i in range(k):
        r[h[i]] = 0.0


cdef void _duals(double[:, ::1] X, cnp.int8_t[::1] s, double tau,
                 double[:, ::1] binv, double[::1] vwork,
                 double[::1] nu_h) nogil:
    """nu_h = -(binv.T @ (X.T @ nu)) with nu the nonbasic dual signs."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t k = binv.shape[0]
    cdef Py_ssize_t i, j
    cdef double nu_i, acc
    for j in range(k):
        vwork[j] = 0.0
    for i in range(n):
        if s[i] > 0:
            nu_i = tau
        elif s[i] < 0:
            nu_i = tau - 1.0
        else:
            continue
        for j in range(k):
            vwork[j] += X[i, j] * nu_i
    for j in range(k):
        acc = 0.0
        for i in range(k):
            acc += binv[i, j] * vwork[i]
        nu_h[j] = -acc


cdef Py_ssize_t _ratio_test(cnp.int8_t[::1] s, double[::1] r, double[::1] w,
                            int sigma, bint bland, double* tstar_out,
                            bint* degen_out) nogil:
    """Leaving row for direction sigma; -1 when nothing blocks."""
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t i, i_star
    cdef double winf = 0.0
    cdef double blk_tol, a_i, sr_i, t_i, tstar, best_a
    cdef Py_ssize_t n_ties

    for i in range(n):
        if fabs(w[i]) > winf:
            winf = fabs(w[i])
    blk_tol = _PIV_REL * (1.0 if winf < 1.0 else winf)

    tstar = _INF
    for i in range(n):
        a_i = sigma * (s[i] * w[i])
        if a_i < -blk_tol:
            sr_i = s[i] * r[i]
            if sr_i < 0.0:
                sr_i = 0.0
            t_i = sr_i / -a_i
            if t_i < tstar:
                tstar = t_i
    if tstar == _INF:
        return -1

    i_star = -1
    best_a = -1.0
    n_ties = 0
    for i in range(n):
        a_i = sigma * (s[i] * w[i])
        if a_i < -blk_tol:
            sr_i = s[i] * r[i]
            if sr_i < 0.0:
                sr_i = 0.0
            t_i = sr_i / -a_i
            if t_i <= tstar + _TIE_ABS:
                n_ties += 1
                if bland:
                    if i_star < 0:
                        i_star = i
                elif fabs(a_i) > best_a:
                    best_a = fabs(a_i)
                    i_star = i

    tstar_out[0] = tstar
    degen_out[0] = n_ties > 1 or tstar <= _TIE_ABS
    return i_star


cdef void _rank1_update(double[:, ::1] binv, double[::1] u, double[::1] g,
                        double wi) nogil:
    cdef Py_ssize_t k = binv.shape[0]
    cdef Py_ssize_t i, j
    for i in range(k):
        for j in range(k):
            binv[i, j] -= (u[i] * g[j]) / wi


def solve_from_basis(X, y, tau, h, max_pivots, feas_tol, canonical=True):
    """Re-optimize from basis h; h is modified in place.

    Same contract as the NumPy kernel: returns (beta, r, s, n_pivots,
    status) with arrays None on SINGULAR.
    """
    cdef double[:, ::1] Xv = X
    cdef double[::1] yv = y
    cdef cnp.int64_t[::1] hv = h
    cdef double tau_c = tau
    cdef long budget = max_pivots
    cdef bint canon = canonical

    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t k = Xv.shape[1]
    if k < 1:
        raise ValueError("basis kernel needs at least one column")

    beta_arr = np.empty(k)
    r_arr = np.empty(n)
    s_arr = np.empty(n, dtype=np.int8)
    binv_arr = np.empty((k, k))
    bsub = np.empty((k, k))
    aug = np.empty((k, 2 * k))
    u_arr = np.empty(k)
    g_arr = np.empty(k)
    w_arr = np.empty(n)
    v_arr = np.empty(k)
    nu_arr = np.empty(k)
    order_arr = np.empty(k, dtype=np.int64)

    cdef double[::1] beta = beta_arr
    cdef double[::1] r = r_arr
    cdef cnp.int8_t[::1] s = s_arr
    cdef double[:, ::1] binv = binv_arr
    cdef double[:, ::1] bsubv = bsub
    cdef double[:, ::1] augv = aug
    cdef double[::1] u = u_arr
    cdef double[::1] g = g_arr
    cdef double[::1] w = w_arr
    cdef double[::1] vwork = v_arr
    cdef double[::1] nu_h = nu_arr
    cdef cnp.int64_t[::1] order = order_arr

    cdef Py_ssize_t i, j, p, pp, pm, i_star, jrow, q
    cdef int sigma
    cdef long pivots = 0
    cdef int since_refresh = 0
    cdef bint bland = False
    cdef bint degen = False
    cdef int status = -1
    cdef double opt_eps, nmax, dp, dm, dbest_p, dbest_m, step, tstar, wi, acc
    cdef cnp.int64_t tmp

    _gather(Xv, hv, bsubv)
    if _gj(bsubv, augv, binv):
        return None, None, None, 0, SINGULAR
    _beta_resid(Xv, yv, hv, binv, beta, r)
    for i in range(n):
        s[i] = 1 if r[i] >= 0.0 else -1
    for i in range(k):
        s[hv[i]] = 0

    while True:
        _duals(Xv, s, tau_c, binv, vwork, nu_h)
        nmax = 0.0
        for i in range(k):
            if fabs(nu_h[i]) > nmax:
                nmax = fabs(nu_h[i])
        opt_eps = _OPT_REL * (1.0 if nmax < 1.0 else nmax)

        p = -1
        sigma = 0
        if bland:
            # positions sorted by their row index (insertion sort; k small)
            for i in range(k):
                order[i] = i
            for i in range(1, k):
                tmp = order[i]
                j = i - 1
                while j >= 0 and hv[order[j]] > hv[tmp]:
                    order[j + 1] = order[j]
                    j -= 1
                order[j + 1] = tmp
            for q in range(k):
                i = order[q]
                dp = tau_c - nu_h[i]
                dm = (1.0 - tau_c) + nu_h[i]
                if dp < -opt_eps:
                    p = i
                    sigma = 1
                    break
                if dm < -opt_eps:
                    p = i
                    sigma = -1
                    break
        else:
            pp = 0
            pm = 0
            dbest_p = tau_c - nu_h[0]
            dbest_m = (1.0 - tau_c) + nu_h[0]
            for i in range(1, k):
                dp = tau_c - nu_h[i]
                dm = (1.0 - tau_c) + nu_h[i]
                if dp < dbest_p:
                    dbest_p = dp
                    pp = i
                if dm < dbest_m:
                    dbest_m = dm
                    pm = i
            if dbest_p <= dbest_m:
                if dbest_p < -opt_eps:
                    p = pp
                    sigma = 1
            else:
                if dbest_m < -opt_eps:
                    p = pm
                    sigma = -1
        if p < 0:
            status = OPT
            break
        if pivots >= budget:
            status = CAP
            break

        for i in range(k):
            u[i] = binv[i, p]
        for i in range(n):
            acc = 0.0
            for j in range(k):
                acc += Xv[i, j] * u[j]
            w[i] = acc
        i_star = _ratio_test(s, r, w, sigma, bland, &tstar, &degen)
        if i_star < 0:
            status = INCONSISTENT
            break
        bland = degen

        jrow = hv[p]
        step = sigma * tstar
        for i in range(k):
            beta[i] -= step * u[i]
        for i in range(n):
            r[i] += step * w[i]
        r[i_star] = 0.0
        s[jrow] = <cnp.int8_t>sigma
        s[i_star] = 0
        hv[p] = i_star
        wi = w[i_star]
        for j in range(k):
            acc = 0.0
            for i in range(k):
                acc += binv[i, j] * Xv[i_star, i]
            g[j] = acc
        g[p] -= 1.0
        _rank1_update(binv, u, g, wi)
        pivots += 1
        since_refresh += 1
        if since_refresh >= _REFRESH_EVERY:
            _gather(Xv, hv, bsubv)
            if _gj(bsubv, augv, binv):
                return None, None, None, pivots, SINGULAR
            _beta_resid(Xv, yv, hv, binv, beta, r)
            since_refresh = 0

    if status != OPT:
        return beta_arr, r_arr, s_arr, pivots, status

    # final refresh from the optimal basis (drift-free returned solution)
    _gather(Xv, hv, bsubv)
    if not _gj(bsubv, augv, binv):
        _beta_resid(Xv, yv, hv, binv, beta, r)

    if canon and k == 1:
        # cost-neutral downward pivots to the lowest optimal vertex
        for q in range(n):
            _duals(Xv, s, tau_c, binv, vwork, nu_h)
            if tau_c - nu_h[0] > _CANON_EPS:
                break
            u[0] = binv[0, 0]
            for i in range(n):
                w[i] = Xv[i, 0] * u[0]
            i_star = _ratio_test(s, r, w, 1, False, &tstar, &degen)
            if i_star < 0 or tstar <= 0.0:
                break
            jrow = hv[0]
            beta[0] -= tstar * u[0]
            for i in range(n):
                r[i] += tstar * w[i]
            r[i_star] = 0.0
            s[jrow] = 1
            s[i_star] = 0
            hv[0] = i_star
            wi = w[i_star]
            g[0] = binv[0, 0] * Xv[i_star, 0] - 1.0
            _rank1_update(binv, u, g, wi)
            pivots += 1
            _gather(Xv, hv, bsubv)
            if not _gj(bsubv, augv, binv):
                _beta_resid(Xv, yv, hv, binv, beta, r)

    return beta_arr, r_arr, s_arr, pivots, OPT
