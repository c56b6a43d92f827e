"""Dataset ingestion, cleaning filters, chronological splits, and a
synthetic generator.

CSV schema: ``timestamp, actual, ens_00..ens_50`` plus optional ``spot``,
``countertrade`` and ``imbalance`` columns.  Timestamps are ISO-8601 on an
hourly grid with no gaps; hours with missing observations stay in place and
are masked invalid rather than dropped, so positional indices always agree
with timestamps.

Cleaning filters return boolean keep masks.  Masks compose by logical AND
(order-independent) and are applied by invalidating observations, never by
deleting rows, which preserves the hourly grid.
"""

import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import pandas as pd

from .core import EnsembleMatrix, ObservationSeries, hourly_contiguous
from .exceptions import ContractError, DataFormatError, DomainError

N_MEMBERS_DEFAULT = 51

TIMESTAMP_COL = "timestamp"
ACTUAL_COL = "actual"
SPOT_COL = "spot"
COUNTERTRADE_COL = "countertrade"
IMBALANCE_COL = "imbalance"

_MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})

# cleaning defaults, in MW / hours
COUNTERTRADE_HIGH = 1700.0
COUNTERTRADE_LOW = 25.0
FILTER_PAD = 2
FLANK_HORIZON = 24
GLITCH_LOW = 358.0
GLITCH_HIGH = 370.0
GLITCH_COUNT = 9


def member_columns(n_members=N_MEMBERS_DEFAULT):
    return [f"ens_{j:02d}" for j in range(n_members)]


@dataclass
class RawDataset:
    """One area's hourly observations, ensembles and market series."""

    observations: ObservationSeries
    ensembles: EnsembleMatrix
    spot_price: np.ndarray = None        # currency/MWh, NaN = missing
    countertrade: np.ndarray = None      # MW, NaN = missing
    imbalance_price: np.ndarray = None   # currency/MWh, NaN = missing
    area: str = "SIM"

    def __post_init__(self):
        t = self.n_hours
        if self.ensembles.members.shape[0] != t or not np.array_equal(
            self.observations.timestamps, self.ensembles.timestamps
        ):
            raise ContractError("observations and ensembles must share one grid")
        for name in ("spot_price", "countertrade", "imbalance_price"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (t,):
                raise ContractError(f"{name} must have one value per hour")
            setattr(self, name, arr)

    @property
    def n_hours(self):
        return self.observations.values.size

    @property
    def timestamps(self):
        return self.observations.timestamps

    def slice(self, start, stop):
        def cut(a):
            return None if a is None else a[start:stop]

        return RawDataset(
            self.observations.slice(start, stop),
            self.ensembles.slice(start, stop),
            cut(self.spot_price),
            cut(self.countertrade),
            cut(self.imbalance_price),
            self.area,
        )

    def apply_mask(self, keep):
        """New dataset with observations outside `keep` marked invalid.

        Rows are never dropped, so the hourly grid survives and repeated
        application of the same mask is a no-op.
        """
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (self.n_hours,):
            raise ContractError("mask must have one flag per hour")
        obs = ObservationSeries(
            self.observations.timestamps,
            self.observations.values,
            self.observations.valid & keep,
        )
        return replace(self, observations=obs)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological partition sizes, in hours, in dataset order.

    The default proportions follow the reference experimental layout
    (14040 / 192 / 4944 / 5112); `taqr_init` is pinned at 192 hours and is
    never scaled.
    """

    nn_train: int = 14040
    taqr_init: int = 192
    taqr_window: int = 4944
    test: int = 5112

    def __post_init__(self):
        for name in ("nn_train", "taqr_init", "taqr_window", "test"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")

    @property
    def total(self):
        return self.nn_train + self.taqr_init + self.taqr_window + self.test

    def scaled(self, factor):
        """Scale every part except the pinned taqr_init, flooring."""
        if factor <= 0:
            raise DomainError("scale factor must be positive")
        return SplitSpec(
            int(self.nn_train * factor),
            self.taqr_init,
            int(self.taqr_window * factor),
            int(self.test * factor),
        )

    def for_total(self, t_hours):
        """Proportional fit into `t_hours`, keeping taqr_init fixed."""
        free = self.total - self.taqr_init
        if t_hours <= self.taqr_init or free <= 0:
            raise DomainError(
                f"cannot fit split into {t_hours} hours with "
                f"{self.taqr_init} pinned"
            )
        return self.scaled((t_hours - self.taqr_init) / free)


class SplitViews(NamedTuple):
    nn_train: RawDataset
    taqr_init: RawDataset
    taqr_window: RawDataset
    test: RawDataset


def split(dataset, spec):
    """Cut the dataset into the four chronological parts of `spec`."""
    t = dataset.n_hours
    if spec.total > t:
        raise ContractError(
            f"split needs {spec.total} hours but dataset has {t}"
        )
    edges = np.cumsum([0, spec.nn_train, spec.taqr_init, spec.taqr_window, spec.test])
    return SplitViews(
        *(dataset.slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))
    )


# ---------------------------------------------------------------------------
# CSV input/output


def _parse_numeric(series, col, errors):
    """Numeric column; missing -> NaN, malformed cells recorded.

    Fast path: the CSV reader already produced correctly rounded floats
    (float_precision="round_trip").  Object dtype means some cells failed
    inference; those are parsed one by one with float(), which is also
    correctly rounded, so values survive a write/load cycle bit-exactly.
    """
    if series.dtype != object:
        vals = series.to_numpy(dtype=np.float64)
        return vals, np.isnan(vals)
    n = len(series)
    vals = np.full(n, np.nan)
    missing = np.zeros(n, dtype=bool)
    for i, cell in enumerate(series.to_list()):
        if isinstance(cell, float):
            vals[i] = cell
            missing[i] = np.isnan(cell)
            continue
        txt = str(cell).strip()
        if txt.lower() in _MISSING_TOKENS:
            missing[i] = True
            continue
        try:
            vals[i] = float(txt)
        except ValueError:
            if len(errors) < 200:  # enough detail; avoids huge reports
                errors.append({"row": i + 2, "column": col, "text": txt})
    return vals, missing


def load_csv(path, area=None):
    """Read a dataset CSV (see module docstring for the schema).

    Missing observation cells are masked invalid.  Missing ensemble cells
    are filled with the row median of the present members (an entirely
    missing row copies the nearest complete row) and the hour is masked
    invalid.  Unknown columns are ignored with a warning.

    Raises DataFormatError for missing required columns or malformed
    numerics (with row-level detail), ContractError for grid gaps.
    """
    df = pd.read_csv(path, keep_default_na=True, float_precision="round_trip")
    # members: whatever contiguous ens_00.. block the file carries (>= 2)
    n_present = 0
    while f"ens_{n_present:02d}" in df.columns:
        n_present += 1
    mem_cols = member_columns(n_present)
    required = [TIMESTAMP_COL, ACTUAL_COL] + mem_cols
    missing_cols = [c for c in required if c not in df.columns]
    if n_present < 2:
        missing_cols += member_columns(2)[n_present:]
    if missing_cols:
        raise DataFormatError(
            f"{path}: missing required column(s) {missing_cols[:5]}",
            details=missing_cols,
        )
    known = set(required) | {SPOT_COL, COUNTERTRADE_COL, IMBALANCE_COL}
    unknown = [c for c in df.columns if c not in known]
    if unknown:
        warnings.warn(f"{path}: ignoring unknown column(s) {unknown}")

    ts = pd.to_datetime(df[TIMESTAMP_COL], errors="coerce")
    bad_ts = ts.isna()
    if bad_ts.any():
        rows = [int(i) + 2 for i in np.flatnonzero(bad_ts.to_numpy())[:20]]
        raise DataFormatError(
            f"{path}: unparseable timestamp(s) at row(s) {rows}",
            details=rows,
        )
    timestamps = hourly_contiguous(ts.to_numpy(dtype="datetime64[ns]"))

    errors = []
    actual, act_missing = _parse_numeric(df[ACTUAL_COL], ACTUAL_COL, errors)
    members = np.empty((len(df), len(mem_cols)))
    mem_missing = np.zeros_like(members, dtype=bool)
    for j, col in enumerate(mem_cols):
        members[:, j], mem_missing[:, j] = _parse_numeric(df[col], col, errors)
    optional = {}
    for col in (SPOT_COL, COUNTERTRADE_COL, IMBALANCE_COL):
        if col in df.columns:
            vals, _ = _parse_numeric(df[col], col, errors)
            optional[col] = vals
    if errors:
        raise DataFormatError(
            f"{path}: {len(errors)} malformed numeric cell(s), "
            f"first at row {errors[0]['row']} column {errors[0]['column']!r}",
            details=errors,
        )

    valid = ~act_missing
    row_has_gap = mem_missing.any(axis=1)
    if row_has_gap.any():
        valid &= ~row_has_gap
        med = np.nanmedian(np.where(mem_missing, np.nan, members), axis=1)
        complete = np.flatnonzero(~row_has_gap)
        if complete.size == 0:
            raise DataFormatError(f"{path}: no complete ensemble row")
        for i in np.flatnonzero(row_has_gap):
            if np.isnan(med[i]):  # whole row missing: copy nearest complete
                j = complete[np.argmin(np.abs(complete - i))]
                members[i] = members[j]
            else:
                members[i] = np.where(mem_missing[i], med[i], members[i])

    obs = ObservationSeries(timestamps, actual, valid)
    ens = EnsembleMatrix(timestamps, members)
    return RawDataset(
        obs,
        ens,
        optional.get(SPOT_COL),
        optional.get(COUNTERTRADE_COL),
        optional.get(IMBALANCE_COL),
        area=area if area is not None else "unknown",
    )


def write_csv(dataset, path):
    """Inverse of load_csv; invalid observations serialize as empty cells.

    Floats use 17 significant digits so a load/write/load round trip is
    value-identical.
    """
    cols = {
        TIMESTAMP_COL: pd.Series(dataset.timestamps).dt.strftime(
            "%Y-%m-%dT%H:%M:%S"
        )
    }
    actual = dataset.observations.values.astype(np.float64).copy()
    actual[~dataset.observations.valid] = np.nan
    cols[ACTUAL_COL] = actual
    for j, name in enumerate(member_columns(dataset.ensembles.n_members)):
        cols[name] = dataset.ensembles.members[:, j]
    for name, arr in (
        (SPOT_COL, dataset.spot_price),
        (COUNTERTRADE_COL, dataset.countertrade),
        (IMBALANCE_COL, dataset.imbalance_price),
    ):
        if arr is not None:
            cols[name] = arr
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g", na_rep="")


# ---------------------------------------------------------------------------
# Cleaning filters


def _dilate(flag, pad):
    """Extend every flagged run by `pad` positions on each side."""
    if pad <= 0 or not flag.any():
        return flag.copy()
    out = flag.copy()
    n = flag.size
    for i in np.flatnonzero(flag):
        out[max(0, i - pad) : min(n, i + pad + 1)] = True
    return out


def countertrade_filter(
    dataset,
    high=COUNTERTRADE_HIGH,
    low=COUNTERTRADE_LOW,
    pad=FILTER_PAD,
    flank_horizon=FLANK_HORIZON,
    spot_window=None,
):
    """Keep mask dropping suspected curtailment hours and negative prices.

    Flags (i) every maximal run of hours with countertrade < `low` whose
    nearest nonzero-countertrade hour on each side (searched within
    `flank_horizon` hours) exceeds `high`, and (ii) every hour with spot
    price < 0, optionally restricted to the half-open timestamp range
    `spot_window=(start, stop)`.  Flagged runs are padded by `pad` hours per
    side.  Runs at the series edge have no flank and are kept.  Missing
    (NaN) market values never trigger a flag.

    Returns an all-keep mask with a warning when both market series are
    absent.
    """
    t = dataset.n_hours
    if dataset.countertrade is None and dataset.spot_price is None:
        warnings.warn("no countertrade or spot series; nothing filtered")
        return np.ones(t, dtype=bool)

    flag = np.zeros(t, dtype=bool)
    ct = dataset.countertrade
    if ct is not None:
        in_low = ct < low  # NaN compares False
        i = 0
        while i < t:
            if not in_low[i]:
                i += 1
                continue
            j = i
            while j + 1 < t and in_low[j + 1]:
                j += 1
            flanked = 0
            for step, stop in ((-1, max(-1, i - 1 - flank_horizon)),
                               (+1, min(t, j + 1 + flank_horizon))):
                k = i - 1 if step < 0 else j + 1
                while k != stop and (np.isnan(ct[k]) or ct[k] == 0.0):
                    k += step
                if k != stop and ct[k] > high:
                    flanked += 1
            if flanked == 2:
                flag[i : j + 1] = True
            i = j + 1
    spot = dataset.spot_price
    if spot is not None:
        neg = spot < 0.0
        if spot_window is not None:
            lo, hi = (np.datetime64(v) for v in spot_window)
            ts = dataset.timestamps
            neg &= (ts >= lo) & (ts < hi)
        flag |= neg
    return ~_dilate(flag, pad)


def glitch_filter(
    ensembles,
    low=GLITCH_LOW,
    high=GLITCH_HIGH,
    count=GLITCH_COUNT,
    pad=FILTER_PAD,
):
    """Keep mask dropping hours where members bunch inside (low, high).

    An hour is flagged when strictly more than `count` members lie strictly
    between `low` and `high`; flagged runs are padded by `pad` hours per
    side.
    """
    m = ensembles.members
    inside = (m > low) & (m < high)
    flag = inside.sum(axis=1) > count
    return ~_dilate(flag, pad)


# ---------------------------------------------------------------------------
# Synthetic data generator


def _ar1(rng, n, phi, sigma):
    eps = rng.normal(0.0, sigma, size=n)
    out = np.empty(n)
    acc = eps[0] / np.sqrt(1.0 - phi * phi)
    for i in range(n):
        acc = phi * acc + eps[i]
        out[i] = acc
    return out


def simulate(
    seed,
    t_hours,
    capacity=1000.0,
    n_members=N_MEMBERS_DEFAULT,
    underdispersion=1.0,
    bias=0.0,
    jitter=1,
    n_glitch_episodes=0,
    area="SIM1",
    start="2024-01-01T00:00:00",
):
    """Deterministic synthetic wind-power dataset with market series.

    A latent weather process (slow autoregression plus daily and annual
    harmonics) is mapped through a steep logistic power curve into
    [0, capacity].  Observations add latent-space noise before the curve,
    so they respect the capacity bound by construction.  Ensemble members
    redraw that same noise per member, which makes the raw ensemble
    calibrated at the defaults; `underdispersion` scales the member spread
    (0.5 halves it), `bias` shifts members by a fraction of capacity after
    the curve, and `jitter` time-shifts each member's latent view by up to
    that many hours.

    Spot prices dip negative in short episodes and the countertrade series
    contains curtailment episodes shaped to trip countertrade_filter.
    `n_glitch_episodes` optionally injects member bunching near 364 MW to
    trip glitch_filter (capacity permitting).
    """
    if t_hours < 1:
        raise DomainError("t_hours must be positive")
    if n_members < 2:
        raise DomainError("need at least two members")
    rng = np.random.default_rng(seed)
    jitter = int(jitter)
    margin = max(jitter, 0)
    n = t_hours + 2 * margin
    t_rel = np.arange(n) - margin

    z = (
        _ar1(rng, n, 0.995, 0.12)
        + 0.35 * np.sin(2 * np.pi * t_rel / 24.0 + rng.uniform(0, 2 * np.pi))
        + 0.55 * np.sin(2 * np.pi * t_rel / 8766.0 + rng.uniform(0, 2 * np.pi))
    )
    steepness = 1.3
    sigma_obs = 0.22

    def curve(latent):
        return capacity / (1.0 + np.exp(-steepness * latent))

    idx = np.arange(t_hours) + margin
    y = curve(z[idx] + rng.normal(0.0, sigma_obs, size=t_hours))

    offsets = (
        rng.integers(-jitter, jitter + 1, size=n_members)
        if jitter > 0
        else np.zeros(n_members, dtype=np.int64)
    )
    eta = rng.normal(0.0, sigma_obs, size=(t_hours, n_members))
    members = curve(z[idx[:, None] + offsets[None, :]] + underdispersion * eta)
    if bias:
        members = np.clip(members + bias * capacity, 0.0, capacity)

    # spot: diurnal shape, merit-order dip with wind, forced negative episodes
    spot = (
        45.0
        + 12.0 * np.sin(2 * np.pi * (t_rel[idx] % 24) / 24.0 - 2.5)
        + 8.0 * _ar1(rng, t_hours, 0.9, 1.0)
        - 18.0 * (y / capacity)
    )
    for _ in range(max(1, t_hours // 800)):
        s = int(rng.integers(0, max(1, t_hours - 3)))
        spot[s : s + int(rng.integers(1, 4))] = -rng.uniform(1.0, 30.0)

    ct = np.zeros(t_hours)
    sprinkle = rng.random(t_hours) < 0.03
    ct[sprinkle] = rng.uniform(30.0, 900.0, size=int(sprinkle.sum()))
    pos = 300
    while pos + 16 < t_hours:
        hi1 = int(rng.integers(2, 5))
        lo_len = int(rng.integers(2, 6))
        hi2 = int(rng.integers(2, 5))
        ct[pos : pos + hi1] = rng.uniform(1800.0, 2600.0, size=hi1)
        low_vals = rng.uniform(0.0, 20.0, size=lo_len)
        low_vals[rng.random(lo_len) < 0.5] = 0.0
        ct[pos + hi1 : pos + hi1 + lo_len] = low_vals
        ct[pos + hi1 + lo_len : pos + hi1 + lo_len + hi2] = rng.uniform(
            1800.0, 2600.0, size=hi2
        )
        pos += int(rng.integers(450, 700))

    if n_glitch_episodes and capacity > 370.0:
        for _ in range(n_glitch_episodes):
            s = int(rng.integers(0, t_hours))
            k = rng.choice(n_members, size=min(12, n_members), replace=False)
            members[s, k] = rng.uniform(359.0, 369.0, size=k.size)

    # imbalance follows spot, pushed by the ensemble's own error direction
    med = np.median(members, axis=1)
    imbalance = (
        spot
        - 40.0 * (med - y) / capacity
        + rng.normal(0.0, 4.0, size=t_hours)
    )

    timestamps = np.datetime64(start) + np.arange(t_hours) * np.timedelta64(
        1, "h"
    )
    obs = ObservationSeries(timestamps.astype("datetime64[ns]"), y)
    ens = EnsembleMatrix(obs.timestamps, members)
    return RawDataset(obs, ens, spot, ct, imbalance, area=area)
