"""Median-vs-median spot/imbalance trading backtest.

Each hour compares the corrected median forecast (minus a bias offset
estimated on training data) with the raw-ensemble median.  When the
corrected view is higher, the strategy sells spot and buys back at the
imbalance price; otherwise it buys spot and sells at imbalance.  PnL is
settled per hour at the given trade size.  The strategy trades every hour
unless an optional dead-band suppresses weak signals, and no transaction
costs are applied.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import ContractError, DomainError

SELL_SPOT = "sell_spot"
BUY_SPOT = "buy_spot"
NO_TRADE = "none"


def hour_of_day(timestamps):
    ts = np.asarray(timestamps)
    if not np.issubdtype(ts.dtype, np.datetime64):
        raise ContractError("timestamps must be datetime64")
    return (ts.astype("datetime64[h]").astype(np.int64)) % 24


def compute_offset(pred_median, actuals, train_idx, mode="scalar", timestamps=None):
    """Systematic forecast bias o = mean(pred - actual) on a training slice.

    mode="scalar" returns one float; mode="per-hour" returns a 24-vector
    indexed by hour of day (requires timestamps).  Non-finite pairs are
    ignored; an empty effective slice is an error.
    """
    pred = np.asarray(pred_median, dtype=np.float64)
    act = np.asarray(actuals, dtype=np.float64)
    idx = np.asarray(train_idx, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("offset training slice is empty")
    d = pred[idx] - act[idx]
    ok = np.isfinite(d)
    if not ok.any():
        raise ContractError("offset training slice has no finite pairs")
    if mode == "scalar":
        return float(np.mean(d[ok]))
    if mode != "per-hour":
        raise DomainError(f"unknown offset mode {mode!r}")
    if timestamps is None:
        raise ContractError("per-hour offset needs timestamps")
    hod = hour_of_day(timestamps)[idx]
    out = np.empty(24)
    overall = float(np.mean(d[ok]))
    for h in range(24):
        sel = (hod == h) & ok
        out[h] = np.mean(d[sel]) if sel.any() else overall
    return out


@dataclass
class TradeLedger:
    """Per-hour trade record; cum_pnl is the exact prefix sum of pnl."""

    index: np.ndarray          # positions traded (or skipped), ascending
    direction: list            # SELL_SPOT / BUY_SPOT / NO_TRADE per row
    spot: np.ndarray
    imbalance: np.ndarray
    pnl: np.ndarray
    cum_pnl: np.ndarray
    size: float
    skipped: list = field(default_factory=list)   # (position, reason)
    timestamps: np.ndarray = None

    @property
    def total_pnl(self):
        return float(self.pnl.sum())

    def to_frame(self):
        hour = (
            self.timestamps
            if self.timestamps is not None
            else self.index
        )
        return pd.DataFrame(
            {
                "hour": hour,
                "direction": self.direction,
                "spot": self.spot,
                "imbalance": self.imbalance,
                "pnl": self.pnl,
                "cum_pnl": self.cum_pnl,
            }
        )

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def backtest(
    pred_median,
    raw_median,
    offset,
    spot,
    imbalance,
    size=1.0,
    index=None,
    timestamps=None,
    dead_band=0.0,
):
    """Run the hourly strategy over `index` (default: every hour).

    offset may be a scalar, a 24-vector by hour of day (timestamps
    required), or a full per-hour array.  Hours with a missing price or
    signal are skipped and reported in ledger.skipped.
    """
    pred = np.asarray(pred_median, dtype=np.float64)
    raw = np.asarray(raw_median, dtype=np.float64)
    spot = np.asarray(spot, dtype=np.float64)
    imb = np.asarray(imbalance, dtype=np.float64)
    t = pred.size
    if not (raw.size == spot.size == imb.size == t):
        raise ContractError("all series must share one length")
    if size <= 0 or not np.isfinite(size):
        raise DomainError("trade size must be positive and finite")
    idx = (
        np.arange(t, dtype=np.int64)
        if index is None
        else np.asarray(index, dtype=np.int64)
    )
    off = np.asarray(offset, dtype=np.float64)
    if off.ndim == 0:
        off_at = np.full(idx.size, float(off))
    elif off.shape == (24,):
        if timestamps is None:
            raise ContractError("per-hour offset needs timestamps")
        off_at = off[hour_of_day(timestamps)[idx]]
    elif off.shape == (t,):
        off_at = off[idx]
    else:
        raise ContractError("offset must be scalar, (24,) or full-length")

    rows, skipped = [], []
    for k, i in enumerate(idx):
        sig = pred[i] - off_at[k] - raw[i]
        if not np.isfinite(sig):
            skipped.append((int(i), "missing signal"))
            continue
        if not (np.isfinite(spot[i]) and np.isfinite(imb[i])):
            skipped.append((int(i), "missing price"))
            continue
        if dead_band > 0.0 and abs(sig) <= dead_band:
            rows.append((i, NO_TRADE, spot[i], imb[i], 0.0))
        elif sig > 0.0:
            rows.append((i, SELL_SPOT, spot[i], imb[i], (spot[i] - imb[i]) * size))
        else:
            rows.append((i, BUY_SPOT, spot[i], imb[i], (imb[i] - spot[i]) * size))

    if rows:
        pos = np.array([r[0] for r in rows], dtype=np.int64)
        direction = [r[1] for r in rows]
        sp = np.array([r[2] for r in rows])
        ib = np.array([r[3] for r in rows])
        pnl = np.array([r[4] for r in rows])
    else:
        pos = np.empty(0, dtype=np.int64)
        direction = []
        sp = ib = pnl = np.empty(0)
    return TradeLedger(
        index=pos,
        direction=direction,
        spot=sp,
        imbalance=ib,
        pnl=pnl,
        cum_pnl=np.cumsum(pnl),
        size=float(size),
        skipped=skipped,
        timestamps=None if timestamps is None else np.asarray(timestamps)[pos],
    )
