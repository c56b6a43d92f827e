"""Core quantile primitives and container types.

Conventions used throughout the package:

* A quantile level tau always lies strictly inside (0, 1).
* The empirical quantile is the generalized inverse CDF
  ``Q(tau) = inf{x : F(x) >= tau}``, which for a sample of size n is the
  order statistic with (1-based) rank ``ceil(n * tau)``.
* The check (pinball) loss of a margin m = y - q at level tau is
  ``m * (tau - 1[m < 0])``.
* Time series are hourly and gap-free; invalid hours are masked, never
  dropped, so positional indices always agree with timestamps.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DomainError

# Evaluation levels used for scored forecasts: 0.05-0.95 with a denser
# middle, 13 levels in total.
DEFAULT_EVAL_LEVELS = (
    0.05, 0.10, 0.15, 0.25, 0.35, 0.45, 0.50,
    0.55, 0.65, 0.75, 0.85, 0.90, 0.95,
)

# Guard against float round-off in n * tau (e.g. 20 * 0.45 > 9 by 2 ulp):
# without it ceil() would jump to the next order statistic.
_RANK_EPS = 1e-9


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def validate_levels(levels):
    """Return levels as a float array, enforcing 0 < tau < 1 strictly increasing."""
    arr = np.asarray(levels, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError("levels must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(arr)):
        raise DomainError("levels contain non-finite values")
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("levels must lie strictly inside (0, 1)")
    if np.any(np.diff(arr) <= 0.0):
        raise DomainError("levels must be strictly increasing")
    return arr


@dataclass(frozen=True)
class QuantileLevels:
    """Validated, strictly increasing quantile levels in (0, 1)."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", validate_levels(self.values))

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    @classmethod
    def default_eval(cls):
        return cls(np.array(DEFAULT_EVAL_LEVELS))

    @classmethod
    def equidistant(cls, m):
        """m levels evenly spaced over [0.05, 0.95]."""
        if m < 1:
            raise DomainError("need at least one level")
        if m == 1:
            return cls(np.array([0.5]))
        return cls(np.linspace(0.05, 0.95, m))

    def index_of(self, tau, tol=1e-12):
        """Position of tau in the grid, or ContractError if absent."""
        hits = np.nonzero(np.abs(self.values - tau) <= tol)[0]
        if hits.size == 0:
            raise ContractError(f"level {tau} not on the grid")
        return int(hits[0])


def check_loss(margin, tau):
    """Check loss (pinball loss) of forecast margins at level tau.

    Parameters
    ----------
    margin : array_like
        Margins m = y - q (observation minus predicted quantile).
    tau : float
        Quantile level, strictly inside (0, 1).

    Returns
    -------
    ndarray or float
        ``m * (tau - 1[m < 0])`` elementwise; scalar input gives scalar.
    """
    if not (0.0 < tau < 1.0):
        raise DomainError(f"tau={tau} outside (0, 1)")
    m = np.asarray(margin, dtype=np.float64)
    out = m * (tau - (m < 0.0))
    return float(out) if np.isscalar(margin) or out.ndim == 0 else out


def quantile_rank(n, tau):
    """0-based index of the tau-quantile order statistic in a sorted size-n sample."""
    if n <= 0:
        raise DomainError("empty sample")
    if not (0.0 < tau < 1.0):
        raise DomainError(f"tau={tau} outside (0, 1)")
    idx = int(np.ceil(n * tau - _RANK_EPS)) - 1
    return min(max(idx, 0), n - 1)


def empirical_quantile(sample, tau):
    """Generalized-inverse empirical quantile of a finite sample.

    Parameters
    ----------
    sample : array_like
        Finite values; need not be sorted.
    tau : float
        Level in (0, 1).

    Returns
    -------
    float
        ``inf{x : (#{sample <= x} / n) >= tau}``, i.e. the order statistic
        of 1-based rank ``ceil(n * tau)``.
    """
    arr = _as_float_array(sample, "sample").ravel()
    if arr.size == 0:
        raise DomainError("empty sample")
    k = quantile_rank(arr.size, tau)
    return float(np.partition(arr, k)[k])


def empirical_quantiles(sample, levels):
    """Vector of empirical quantiles at several levels (single sort)."""
    arr = _as_float_array(sample, "sample").ravel()
    if arr.size == 0:
        raise DomainError("empty sample")
    lv = validate_levels(levels)
    srt = np.sort(arr)
    idx = np.ceil(arr.size * lv - _RANK_EPS).astype(np.int64) - 1
    np.clip(idx, 0, arr.size - 1, out=idx)
    return srt[idx]


def sort_rows(mat):
    """Sort each row ascending; returns a new array.

    Sorting rows of an ensemble matrix makes the columns order statistics,
    which is also how quantile crossing gets repaired.
    """
    arr = _as_float_array(mat, "matrix")
    if arr.ndim != 2:
        raise ContractError("expected a 2-d array")
    return np.sort(arr, axis=1)


def rows_sorted(mat):
    """True when every row is non-decreasing."""
    arr = np.asarray(mat, dtype=np.float64)
    if arr.shape[1] <= 1:
        return True
    return bool(np.all(np.diff(arr, axis=1) >= 0.0))


def hourly_contiguous(timestamps):
    """Validate an hourly, gap-free, strictly increasing datetime64 axis."""
    ts = np.asarray(timestamps)
    if not np.issubdtype(ts.dtype, np.datetime64):
        raise ContractError("timestamps must be datetime64")
    if ts.ndim != 1 or ts.size == 0:
        raise ContractError("timestamps must be a non-empty 1-d array")
    ts = ts.astype("datetime64[ns]")
    if ts.size > 1:
        deltas = np.diff(ts).astype("timedelta64[ns]")
        hour = np.timedelta64(3600_000_000_000, "ns")
        bad = np.nonzero(deltas != hour)[0]
        if bad.size:
            raise ContractError(
                f"time axis not hourly-contiguous at {ts[bad[0]]} -> {ts[bad[0] + 1]}"
            )
    return ts


@dataclass
class ObservationSeries:
    """Hourly observations with a validity mask.

    Invalid hours stay in place (mask False) so that positions on the hour
    grid are preserved; values there may be NaN.
    """

    timestamps: np.ndarray
    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.timestamps = hourly_contiguous(self.timestamps)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.timestamps.shape:
            raise ContractError("values and timestamps must align")
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ContractError("valid mask and values must align")
        if np.any(~np.isfinite(self.values[self.valid])):
            raise ContractError("non-finite value at an hour marked valid")

    def __len__(self):
        return self.values.size

    def slice(self, start, stop):
        return ObservationSeries(
            self.timestamps[start:stop],
            self.values[start:stop],
            self.valid[start:stop],
        )


@dataclass
class EnsembleMatrix:
    """Hourly ensemble forecasts, one row per hour, one column per member."""

    timestamps: np.ndarray
    members: np.ndarray
    is_sorted: bool = False

    def __post_init__(self):
        self.timestamps = hourly_contiguous(self.timestamps)
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 2:
            raise ContractError("members must be 2-d (hours x members)")
        if self.members.shape[0] != self.timestamps.size:
            raise ContractError("members and timestamps must align")
        if not np.all(np.isfinite(self.members)):
            raise ContractError("ensemble members must all be finite")
        if self.is_sorted and not rows_sorted(self.members):
            raise ContractError("is_sorted set but rows are not sorted")

    def __len__(self):
        return self.members.shape[0]

    @property
    def n_members(self):
        return self.members.shape[1]

    def sorted(self):
        """Row-sorted copy (order statistics per hour)."""
        return EnsembleMatrix(self.timestamps, sort_rows(self.members), True)

    def slice(self, start, stop):
        return EnsembleMatrix(
            self.timestamps[start:stop], self.members[start:stop], self.is_sorted
        )
