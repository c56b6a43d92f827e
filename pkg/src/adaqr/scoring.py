"""Scoring rules: MAE, CRPS, quantile score, reliability, relative score.

All scorers share one masking convention: a timestamp contributes if and
only if it is valid (per the mask) and carries a finite forecast row.
Scoring a masked series equals scoring the explicitly shortened series.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import QuantileLevels, check_loss, rows_sorted
from .exceptions import ContractError, DomainError


@dataclass
class QuantileForecast:
    """Predicted quantiles on a fixed level grid.

    ``levels`` keeps the caller's order (independent per-level models may
    be run on any permutation); strict monotonicity across a row is only
    meaningful (and only enforced) once ``crossing_repaired`` is set.
    Rows may be NaN where no prediction exists (e.g. before warm-up).
    """

    levels: np.ndarray
    values: np.ndarray
    timestamps: np.ndarray = None
    crossing_repaired: bool = False

    def __post_init__(self):
        if isinstance(self.levels, QuantileLevels):
            self.levels = self.levels.values
        self.levels = np.asarray(self.levels, dtype=np.float64).ravel()
        if self.levels.size == 0:
            raise DomainError("forecast needs at least one level")
        if np.any(self.levels <= 0) or np.any(self.levels >= 1):
            raise DomainError("levels must lie strictly inside (0, 1)")
        if np.unique(self.levels).size != self.levels.size:
            raise DomainError("levels must be distinct")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.levels.size:
            raise ContractError("values must be (T, n_levels)")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps)
            if self.timestamps.shape[0] != self.values.shape[0]:
                raise ContractError("timestamps must align with forecast rows")
        if self.crossing_repaired:
            if np.any(np.diff(self.levels) <= 0):
                raise ContractError("crossing repair requires increasing levels")
            finite = np.all(np.isfinite(self.values), axis=1)
            if not rows_sorted(self.values[finite]):
                raise ContractError("crossing_repaired set but rows cross")

    def __len__(self):
        return self.values.shape[0]

    def level_column(self, tau, tol=1e-12):
        hits = np.nonzero(np.abs(self.levels - tau) <= tol)[0]
        if hits.size == 0:
            raise ContractError(f"level {tau} not in forecast")
        return self.values[:, hits[0]]


@dataclass
class ScoreReport:
    """One method's scores over the evaluation slice."""

    mae: float
    crps: float
    qs_mean: float
    qs_per_level: dict
    reliability: dict
    n_scored: int
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mae": self.mae,
            "crps": self.crps,
            "qs_mean": self.qs_mean,
            "qs_per_level": {str(k): v for k, v in self.qs_per_level.items()},
            "reliability": {str(k): v for k, v in self.reliability.items()},
            "n_scored": self.n_scored,
            "extras": self.extras,
        }

    def to_csv_rows(self, method=""):
        """Flat rows (method, metric, level, value) for plotting tools."""
        rows = [
            (method, "mae", "", self.mae),
            (method, "crps", "", self.crps),
            (method, "qs_mean", "", self.qs_mean),
            (method, "n_scored", "", self.n_scored),
        ]
        for lv, v in self.qs_per_level.items():
            rows.append((method, "qs", f"{lv:g}", v))
        for lv, v in self.reliability.items():
            rows.append((method, "reliability", f"{lv:g}", v))
        return rows


def _aligned_valid(y, yhat_like, valid):
    y = np.asarray(y, dtype=np.float64)
    arr = np.asarray(yhat_like, dtype=np.float64)
    if arr.shape[0] != y.shape[0]:
        raise ContractError("series must be aligned")
    if valid is None:
        valid = np.isfinite(y)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != y.shape:
            raise ContractError("mask must align with observations")
        valid = valid & np.isfinite(y)
    if arr.ndim == 1:
        valid = valid & np.isfinite(arr)
    else:
        valid = valid & np.all(np.isfinite(arr), axis=1)
    return y, arr, valid


def mae(y, y_hat, valid=None):
    """Mean absolute error over valid timestamps.

    For ensemble forecasts pass the median member; for quantile forecasts
    the 0.5-level column.
    """
    y, y_hat, ok = _aligned_valid(y, y_hat, valid)
    if not np.any(ok):
        raise DomainError("no valid pairs to score")
    return float(np.mean(np.abs(y[ok] - y_hat[ok])))


def crps_ensemble(members, y):
    """CRPS of one observation against an empirical sample.

    Evaluates the integral of (F - 1[y <= x])^2 exactly, where F is the
    right-continuous step CDF with jumps 1/M at each sorted member: the
    squared-CDF segments below y plus squared-complement segments above y,
    in closed form.

    Parameters
    ----------
    members : array_like
        Finite sample values (sorted or not; sorted internally).
    y : float
        The verifying observation.

    Returns
    -------
    float
    """
    z = np.sort(np.asarray(members, dtype=np.float64).ravel())
    if z.size == 0:
        raise DomainError("empty ensemble")
    if not np.all(np.isfinite(z)) or not np.isfinite(y):
        raise DomainError("non-finite inputs")
    return float(_crps_rows(z[None, :], np.array([float(y)]))[0])


def _crps_rows(Z, y):
    """Vectorized CRPS over rows: Z (T, M) sorted rows, y (T,)."""
    T, M = Z.shape
    out = np.maximum(y - Z[:, -1], 0.0) + np.maximum(Z[:, 0] - y, 0.0)
    if M > 1:
        j = np.arange(1, M, dtype=np.float64)
        fsq = (j / M) ** 2
        gsq = (1.0 - j / M) ** 2
        lo = Z[:, :-1]
        hi = Z[:, 1:]
        yc = y[:, None]
        below = np.maximum(np.minimum(hi, yc) - lo, 0.0)
        above = np.maximum(hi - np.maximum(lo, yc), 0.0)
        out = out + below @ fsq + above @ gsq
    return out


def crps_mean(y, members_rows, valid=None):
    """Mean CRPS over valid timestamps; rows are per-hour samples."""
    y, rows, ok = _aligned_valid(y, members_rows, valid)
    if rows.ndim != 2:
        raise ContractError("expected a (T, M) sample matrix")
    if not np.any(ok):
        raise DomainError("no valid pairs to score")
    Z = np.sort(rows[ok], axis=1)
    return float(np.mean(_crps_rows(Z, y[ok])))


def quantile_score(y, forecast, valid=None):
    """Per-level mean check loss and its average across levels.

    Returns
    -------
    (qs_per_level, qs_mean)
        qs_per_level: dict level -> mean check loss; qs_mean: their mean.
    """
    if not isinstance(forecast, QuantileForecast):
        raise ContractError("forecast must be a QuantileForecast")
    y, vals, ok = _aligned_valid(y, forecast.values, valid)
    if not np.any(ok):
        raise DomainError("no valid pairs to score")
    per = {}
    for c, tau in enumerate(forecast.levels):
        margins = y[ok] - vals[ok, c]
        per[float(tau)] = float(np.mean(check_loss(margins, float(tau))))
    return per, float(np.mean(list(per.values())))


def reliability(y, forecast, valid=None):
    """Observed frequency of y <= predicted quantile, per level."""
    if not isinstance(forecast, QuantileForecast):
        raise ContractError("forecast must be a QuantileForecast")
    y, vals, ok = _aligned_valid(y, forecast.values, valid)
    if not np.any(ok):
        raise DomainError("no valid pairs to score")
    out = {}
    for c, tau in enumerate(forecast.levels):
        out[float(tau)] = float(np.mean(y[ok] <= vals[ok, c]))
    return out


def relative_score(s_model, s_baseline):
    """RS = model score / baseline score; below 1 means improvement."""
    if not np.isfinite(s_baseline) or s_baseline <= 0.0:
        raise DomainError("baseline score must be positive")
    if not np.isfinite(s_model):
        raise DomainError("model score must be finite")
    return float(s_model) / float(s_baseline)


def ensemble_level_assumption(m):
    """Nominal levels assigned to m sorted ensemble members: 0.05 .. 0.95."""
    if m < 2:
        raise DomainError("need at least two members for level assumption")
    return QuantileLevels(np.linspace(0.05, 0.95, int(m)))


def score_ensemble(y, ensembles, valid=None):
    """ScoreReport for an ensemble matrix treated as quantile forecasts."""
    if hasattr(ensembles, "members"):
        ensembles = ensembles.members
    rows = np.asarray(ensembles, dtype=np.float64)
    m = rows.shape[1]
    levels = ensemble_level_assumption(m)
    srt = np.sort(rows, axis=1)
    fc = QuantileForecast(levels=levels, values=srt, crossing_repaired=True)
    return score_forecast(y, fc, valid=valid, crps_rows=srt)


def score_forecast(y, forecast, valid=None, crps_rows=None):
    """ScoreReport for a QuantileForecast.

    CRPS treats the forecast's own quantile vector as the ensemble unless
    an explicit sample matrix is supplied via crps_rows.
    """
    if crps_rows is None:
        crps_rows = forecast.values
    med = forecast.level_column(0.5) if np.any(np.abs(forecast.levels - 0.5) <= 1e-12) else None
    if med is None:
        # median of the forecast row as fallback point forecast
        med = np.median(forecast.values, axis=1)
    y_arr, vals, ok = _aligned_valid(y, forecast.values, valid)
    qs_per, qs_m = quantile_score(y_arr, forecast, valid=ok)
    rep = ScoreReport(
        mae=mae(y_arr, med, valid=ok),
        crps=crps_mean(y_arr, crps_rows, valid=ok),
        qs_mean=qs_m,
        qs_per_level=qs_per,
        reliability=reliability(y_arr, forecast, valid=ok),
        n_scored=int(np.sum(ok)),
    )
    return rep


def median_member(ensembles):
    """Median across members per hour: mean of the two middle order statistics
    for even M, the middle one for odd M."""
    rows = np.sort(np.asarray(ensembles, dtype=np.float64), axis=1)
    m = rows.shape[1]
    if m % 2 == 1:
        return rows[:, m // 2]
    return 0.5 * (rows[:, m // 2 - 1] + rows[:, m // 2])
