"""Time-adaptive quantile regression: batch solves, warm starts, sliding window.

The module drives the simplex kernel (see `backend`) through three layers:

* ``qr_batch_solve`` — one quantile regression solved from a fresh basis.
* ``warm_start`` / ``taqr_step`` — a persistent :class:`TaqrState` whose
  vertex is re-optimized after every window update, reusing the previous
  basis ("warm" pivoting, typically a handful of pivots per step).
* ``run_taqr`` — the full per-level loop over a basis matrix, rolling
  1-step or day-ahead (24-hour blocks issued 12 h before the first target
  hour).

Windows hold only valid (unmasked) observations; predictions are emitted
for every requested timestamp regardless of validity.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..core import check_loss
from ..exceptions import (
    ContractError,
    ConvergenceError,
    DomainError,
    RankError,
    UnboundedError,
)
from . import backend
from .backend import CAP, INCONSISTENT, OPT, SINGULAR

N_INIT_DEFAULT = 192      # warm-start sample size
N_WINDOW_DEFAULT = 5000   # sliding window capacity (hours)
DAY_OFFSET_DEFAULT = 12   # issue lead: first target hour minus issue hour

_COL_DROP_REL = 1e-10     # column-pivot threshold for rank handling
_EVICT_TRIES = 40         # basis-repair candidates examined at eviction
_STEP_PIVOT_FACTOR = 50   # warm-step pivot cap = factor * K


def _feas_tol(y):
    ymax = float(np.max(np.abs(y))) if y.size else 0.0
    return 1e-8 * (1.0 + ymax)


def _validate_xy(X, y, tau):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("design matrix must be 2-d")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ContractError("y must be 1-d and aligned with X rows")
    if not np.all(np.isfinite(X)):
        raise DomainError("design matrix contains non-finite values")
    if not np.all(np.isfinite(y)):
        raise DomainError("observations contain non-finite values")
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau={tau} outside (0, 1)")
    return X, y


def _active_columns(X):
    """Columns kept after dropping near-dependent ones (pivoted QR)."""
    r, piv = scipy.linalg.qr(X, mode="r", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise RankError("design matrix is all zeros")
    thr = _COL_DROP_REL * max(1.0, diag[0])
    rank = int(np.sum(diag > thr))
    if rank == 0:
        raise RankError("all design columns are numerically collinear")
    return np.sort(piv[:rank]).astype(np.int64)


def _initial_basis_rows(Xa):
    """K independent rows chosen by pivoted QR on the transpose."""
    k = Xa.shape[1]
    _, piv = scipy.linalg.qr(Xa.T, mode="r", pivoting=True)
    return np.sort(piv[:k]).astype(np.int64)


@dataclass
class BatchResult:
    beta: np.ndarray           # full-width coefficients (zeros on dropped cols)
    basis: np.ndarray          # row indices interpolated by the vertex
    objective: float
    active_cols: np.ndarray
    residuals: np.ndarray
    signs: np.ndarray
    n_pivots: int


def batch_solve_full(X, y, tau, max_pivots=None):
    """Cold quantile regression solve; returns the rich result object."""
    X, y = _validate_xy(X, y, tau)
    n, k_full = X.shape
    if k_full < 1:
        raise ContractError("need at least one design column")
    if n <= k_full:
        raise ContractError(f"underdetermined: n={n} rows but K={k_full} columns")
    active = _active_columns(X)
    Xa = np.ascontiguousarray(X[:, active])
    h = _initial_basis_rows(Xa)
    cap = max_pivots if max_pivots is not None else max(1000, 20 * n)
    beta_a, r, s, n_piv, status = backend.solve_from_basis(
        Xa, y, tau, h, cap, _feas_tol(y), canonical=True
    )
    if status == SINGULAR:
        raise RankError("basis factorization failed during batch solve")
    if status == CAP:
        raise ConvergenceError(f"simplex exceeded {cap} pivots in batch solve")
    if status == INCONSISTENT:
        raise UnboundedError("ratio test found no blocking row; inputs corrupt")
    beta = np.zeros(k_full)
    beta[active] = beta_a
    objective = float(np.sum(check_loss(r, tau)))
    return BatchResult(beta, h.copy(), objective, active, r, s, n_piv)


def qr_batch_solve(X, y, tau):
    """Quantile regression by simplex from scratch.

    Parameters
    ----------
    X : (n, K) array
        Design matrix, n > K.
    y : (n,) array
        Observations.
    tau : float
        Level in (0, 1).

    Returns
    -------
    (beta, basis, objective)
        Coefficients minimizing the check loss, the K row indices the
        solution interpolates, and the attained objective
        sum_i check_loss(y_i - X_i beta, tau).
    """
    res = batch_solve_full(X, y, tau)
    return res.beta, res.basis, res.objective


@dataclass
class TaqrState:
    """Sliding-window quantile regression state for one level.

    Single-owner mutable object: never advance one state from two threads.
    Ring buffers hold up to 2*n_full rows; `start:end` is the live window.
    `_bx` keeps full-width rows (so cold restarts can revisit dropped
    columns); `_bxa` mirrors the active-column subset contiguously for the
    kernel.
    """

    tau: float
    n_full: int
    k_full: int
    active_cols: np.ndarray
    beta_active: np.ndarray
    basis_pos: np.ndarray       # positions within the live window
    _bx: np.ndarray
    _bxa: np.ndarray
    _by: np.ndarray
    _r: np.ndarray
    _s: np.ndarray
    start: int
    end: int
    steps: int = 0
    total_pivots: int = 0
    last_pivots: int = 0
    cold_restarts: int = 0
    last_objective: float = float("nan")

    # -- construction ------------------------------------------------

    @classmethod
    def from_window(cls, X, y, tau, n_full):
        """Solve the given window cold and wrap it into a state."""
        res = batch_solve_full(X, y, tau)
        n, k_full = X.shape
        if n > n_full:
            raise ContractError(f"initial window {n} exceeds capacity {n_full}")
        cap = 2 * n_full
        k_act = res.active_cols.size
        bx = np.zeros((cap, k_full))
        bxa = np.zeros((cap, k_act))
        by = np.zeros(cap)
        rr = np.zeros(cap)
        ss = np.zeros(cap, dtype=np.int8)
        bx[:n] = X
        bxa[:n] = X[:, res.active_cols]
        by[:n] = y
        rr[:n] = res.residuals
        ss[:n] = res.signs
        state = cls(
            tau=float(tau),
            n_full=int(n_full),
            k_full=int(k_full),
            active_cols=res.active_cols,
            beta_active=res.beta[res.active_cols].copy(),
            basis_pos=res.basis.astype(np.int64),
            _bx=bx,
            _bxa=bxa,
            _by=by,
            _r=rr,
            _s=ss,
            start=0,
            end=n,
        )
        state.last_objective = res.objective
        state.last_pivots = res.n_pivots
        state.total_pivots = res.n_pivots
        return state

    # -- views and basic queries --------------------------------------

    @property
    def window_len(self):
        return self.end - self.start

    @property
    def beta(self):
        """Full-width coefficient vector (zeros on dropped columns)."""
        b = np.zeros(self.k_full)
        b[self.active_cols] = self.beta_active
        return b

    @property
    def objective(self):
        return self.last_objective

    def window(self):
        """Copies of the live window (X full-width, y)."""
        return (
            self._bx[self.start : self.end].copy(),
            self._by[self.start : self.end].copy(),
        )

    def predict(self, x_full):
        x = np.asarray(x_full, dtype=np.float64)
        if x.shape != (self.k_full,):
            raise ContractError(f"expected a {self.k_full}-vector")
        return float(x[self.active_cols] @ self.beta_active)

    # -- window maintenance -------------------------------------------

    def _append_row(self, x_full, y_val):
        if self.end == self._bx.shape[0]:
            ln = self.window_len
            self._bx[:ln] = self._bx[self.start : self.end]
            self._bxa[:ln] = self._bxa[self.start : self.end]
            self._by[:ln] = self._by[self.start : self.end]
            self._r[:ln] = self._r[self.start : self.end]
            self._s[:ln] = self._s[self.start : self.end]
            self.start = 0
            self.end = ln
        self._bx[self.end] = x_full
        self._bxa[self.end] = x_full[self.active_cols]
        self._by[self.end] = y_val
        self._r[self.end] = 0.0
        self._s[self.end] = 0
        self.end += 1

    def _evict_oldest(self):
        """Drop the oldest row; returns False when the basis cannot be repaired."""
        ok = True
        if np.any(self.basis_pos == 0):
            lo = self.start
            ln = self.window_len
            keep = self.basis_pos[self.basis_pos != 0]
            isbasic = np.zeros(ln, dtype=bool)
            isbasic[self.basis_pos] = True
            cand = np.nonzero(~isbasic)[0]
            cand = cand[cand > 0]
            # nearest-to-interpolating rows first: they are the likely next vertex
            cand = cand[np.argsort(np.abs(self._r[lo + cand]), kind="stable")]
            ok = False
            for c in cand[:_EVICT_TRIES]:
                trial = np.concatenate([keep, [c]])
                if backend.gj_inverse(self._bxa[lo + trial]) is not None:
                    self.basis_pos = trial
                    ok = True
                    break
        self.start += 1
        self.basis_pos = self.basis_pos - 1
        return ok

    def _reoptimize(self, max_pivots):
        X = self._bxa[self.start : self.end]
        yw = self._by[self.start : self.end]
        h = np.ascontiguousarray(self.basis_pos, dtype=np.int64)
        beta, r, s, n_piv, status = backend.solve_from_basis(
            X, yw, self.tau, h, max_pivots, _feas_tol(yw), canonical=True
        )
        if status == INCONSISTENT:
            raise UnboundedError("ratio test found no blocking row; state corrupt")
        if status != OPT:
            return False, n_piv
        self.basis_pos = h
        self.beta_active = beta
        self._r[self.start : self.end] = r
        self._s[self.start : self.end] = s
        self.last_objective = float(np.sum(check_loss(r, self.tau)))
        return True, n_piv

    def _cold_restart(self):
        X, yw = self._bx[self.start : self.end], self._by[self.start : self.end]
        res = batch_solve_full(X, yw, self.tau)
        k_act = res.active_cols.size
        if k_act != self.active_cols.size or np.any(res.active_cols != self.active_cols):
            self.active_cols = res.active_cols
            bxa = np.zeros((self._bx.shape[0], k_act))
            bxa[self.start : self.end] = X[:, res.active_cols]
            self._bxa = bxa
        self.beta_active = res.beta[res.active_cols].copy()
        self.basis_pos = res.basis.astype(np.int64)
        self._r[self.start : self.end] = res.residuals
        self._s[self.start : self.end] = res.signs
        self.last_objective = res.objective
        self.cold_restarts += 1
        return res.n_pivots

    def absorb(self, x_full, y_val):
        """Evict if full, append (x, y), re-optimize from the previous vertex."""
        x = np.asarray(x_full, dtype=np.float64)
        if x.shape != (self.k_full,):
            raise ContractError(f"expected a {self.k_full}-vector")
        if not np.all(np.isfinite(x)) or not np.isfinite(y_val):
            raise DomainError("non-finite inputs to window update")
        needs_cold = False
        if self.window_len >= self.n_full:
            needs_cold = not self._evict_oldest()
        self._append_row(x, float(y_val))
        n_piv = 0
        if not needs_cold:
            ok, n_piv = self._reoptimize(_STEP_PIVOT_FACTOR * self.active_cols.size)
            needs_cold = not ok
        if needs_cold:
            n_piv += self._cold_restart()
        self.steps += 1
        self.last_pivots = n_piv
        self.total_pivots += n_piv

    # -- persistence ---------------------------------------------------

    def to_arrays(self):
        """Deterministic array snapshot (compacted window) for serialization."""
        X, yw = self.window()
        return {
            "tau": np.float64(self.tau),
            "n_full": np.int64(self.n_full),
            "k_full": np.int64(self.k_full),
            "active_cols": self.active_cols.copy(),
            "beta_active": self.beta_active.copy(),
            "basis_pos": self.basis_pos.copy(),
            "window_x": X,
            "window_y": yw,
            "resid": self._r[self.start : self.end].copy(),
            "signs": self._s[self.start : self.end].copy(),
            "counters": np.array(
                [self.steps, self.total_pivots, self.last_pivots, self.cold_restarts],
                dtype=np.int64,
            ),
            "last_objective": np.float64(self.last_objective),
        }

    @classmethod
    def from_arrays(cls, d):
        X = np.asarray(d["window_x"], dtype=np.float64)
        n, k_full = X.shape
        n_full = int(d["n_full"])
        active = np.asarray(d["active_cols"], dtype=np.int64)
        cap = 2 * n_full
        bx = np.zeros((cap, k_full))
        bxa = np.zeros((cap, active.size))
        by = np.zeros(cap)
        rr = np.zeros(cap)
        ss = np.zeros(cap, dtype=np.int8)
        bx[:n] = X
        bxa[:n] = X[:, active]
        by[:n] = np.asarray(d["window_y"], dtype=np.float64)
        rr[:n] = np.asarray(d["resid"], dtype=np.float64)
        ss[:n] = np.asarray(d["signs"], dtype=np.int8)
        counters = np.asarray(d["counters"], dtype=np.int64)
        state = cls(
            tau=float(d["tau"]),
            n_full=n_full,
            k_full=int(d["k_full"]),
            active_cols=active,
            beta_active=np.asarray(d["beta_active"], dtype=np.float64).copy(),
            basis_pos=np.asarray(d["basis_pos"], dtype=np.int64).copy(),
            _bx=bx,
            _bxa=bxa,
            _by=by,
            _r=rr,
            _s=ss,
            start=0,
            end=n,
            steps=int(counters[0]),
            total_pivots=int(counters[1]),
            last_pivots=int(counters[2]),
            cold_restarts=int(counters[3]),
            last_objective=float(d["last_objective"]),
        )
        return state


def warm_start(X0, y0, tau, n_full=N_WINDOW_DEFAULT):
    """Solve a small initial problem (canonically 192 rows) into a TaqrState.

    The state's beta and basis solve the initial window exactly as
    qr_batch_solve would; subsequent taqr_step calls reuse the vertex.
    """
    X0, y0 = _validate_xy(X0, y0, tau)
    return TaqrState.from_window(X0, y0, tau, n_full)


def taqr_step(state, x_new, y_new):
    """One sliding-window update.

    Returns (prediction, state): the prediction is x_new . beta computed
    with the coefficients from BEFORE the update (out of sample), then the
    window absorbs (x_new, y_new) and re-optimizes.  The state object is
    mutated in place and returned for convenience.
    """
    x = np.asarray(x_new, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite design row")
    y_val = float(y_new)
    if not np.isfinite(y_val):
        raise DomainError("non-finite observation")
    pred = state.predict(x)
    state.absorb(x, y_val)
    return pred, state


@dataclass
class LevelDiagnostics:
    """Per-level bookkeeping from a run: one entry per absorbed row."""

    tau: float
    pivots: np.ndarray
    objectives: np.ndarray
    cold_restarts: int


@dataclass
class TaqrRunResult:
    values: np.ndarray          # (T, L) predictions, NaN before coverage starts
    levels: np.ndarray
    start_index: int            # first row with a real prediction
    diagnostics: list
    states: list = field(default_factory=list)


def _validate_run_levels(levels):
    lv = np.asarray(levels, dtype=np.float64).ravel()
    if lv.size == 0:
        raise DomainError("need at least one level")
    if not np.all(np.isfinite(lv)) or np.any(lv <= 0) or np.any(lv >= 1):
        raise DomainError("levels must lie strictly inside (0, 1)")
    if np.unique(lv).size != lv.size:
        raise DomainError("levels must be distinct")
    return lv


def run_taqr(
    X,
    y,
    levels,
    n_init=N_INIT_DEFAULT,
    n_full=N_WINDOW_DEFAULT,
    *,
    valid=None,
    mode="rolling",
    day_offset=DAY_OFFSET_DEFAULT,
    align=None,
    keep_states=False,
):
    """Time-adaptive quantile regression over a basis matrix.

    Parameters
    ----------
    X : (T, K) array
        Design (corrected-basis) matrix, finite everywhere.
    y : (T,) array
        Observations; NaN allowed at rows masked invalid.
    levels : sequence of floats
        Quantile levels in (0, 1); order is preserved in the output columns
        and each level runs as an independent LP.
    n_init : int
        Valid rows consumed by the warm start (default 192).
    n_full : int
        Sliding-window capacity (default 5000).
    valid : (T,) bool array, optional
        Row mask; defaults to finite(y).  Invalid rows never enter the
        window but still receive predictions.
    mode : "rolling" | "day_ahead"
        Rolling emits 1-step-ahead predictions.  Day-ahead issues 24-hour
        blocks whose coefficients are frozen `day_offset` hours before the
        first target hour (lead times day_offset .. day_offset+24).
    align : int, optional
        Day-ahead only: delay the first block so block starts land on
        indices congruent to `align` mod 24.  Rows between the warm start
        and the first block are absorbed before it is issued.
    keep_states : bool
        Also return the final per-level TaqrState objects.

    Returns
    -------
    TaqrRunResult
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("X must be 2-d")
    if not np.all(np.isfinite(X)):
        raise DomainError("X contains non-finite values")
    T = X.shape[0]
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (T,):
        raise ContractError("y must align with X rows")
    if valid is None:
        valid = np.isfinite(y)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (T,):
        raise ContractError("valid mask must align with X rows")
    if np.any(~np.isfinite(y[valid])):
        raise DomainError("non-finite observation at a row marked valid")
    lv = _validate_run_levels(levels)
    if mode not in ("rolling", "day_ahead"):
        raise ContractError(f"unknown mode {mode!r}")
    if n_init < 1:
        raise DomainError("n_init must be positive")

    valid_idx = np.nonzero(valid)[0]
    if valid_idx.size <= n_init:
        raise ContractError(
            f"need more than n_init={n_init} valid rows, have {valid_idx.size}"
        )
    init_idx = valid_idx[:n_init]
    t0 = int(init_idx[-1]) + 1
    t0_pred = t0
    if mode == "day_ahead" and align is not None:
        t0_pred = t0 + (int(align) - t0) % 24

    out = np.full((T, lv.size), np.nan)
    diags = []
    states = []
    for col, tau in enumerate(lv):
        state = warm_start(X[init_idx], y[init_idx], float(tau), n_full=n_full)
        pivots = []
        objectives = []
        if mode == "rolling":
            for t in range(t0, T):
                out[t, col] = state.predict(X[t])
                if valid[t]:
                    state.absorb(X[t], y[t])
                    pivots.append(state.last_pivots)
                    objectives.append(state.last_objective)
        else:
            cursor = t0
            bs = t0_pred
            while bs < T:
                be = min(bs + 24, T)
                limit = max(bs - day_offset, cursor)
                while cursor < limit:
                    if valid[cursor]:
                        state.absorb(X[cursor], y[cursor])
                        pivots.append(state.last_pivots)
                        objectives.append(state.last_objective)
                    cursor += 1
                out[bs:be, col] = X[bs:be] @ state.beta
                bs = be
        diags.append(
            LevelDiagnostics(
                tau=float(tau),
                pivots=np.asarray(pivots, dtype=np.int64),
                objectives=np.asarray(objectives),
                cold_restarts=state.cold_restarts,
            )
        )
        if keep_states:
            states.append(state)

    return TaqrRunResult(
        values=out,
        levels=lv,
        start_index=t0_pred,
        diagnostics=diags,
        states=states,
    )
