"""End-to-end forecast pipeline and the online day-ahead loop.

Batch entry point: run_nabqr trains the ensemble corrector on the first
slice, runs time-adaptive quantile regression on the corrected basis, and
scores the result next to raw ensembles, the corrected-only model, TAQR on
the raw ensembles, and the forest/boosting baselines, all over one shared
test slice.

Day-ahead semantics: 24-hour blocks whose coefficients freeze `day_offset`
hours before the first target hour (lead times 12..36 at the default).  The
batch test sweep is driven by the same OnlineState machinery as online_step,
so a saved state bundle replayed day by day reproduces the batch forecasts
bitwise.  For that to hold exactly, corrected design rows over the test span
are computed in 24-row day-aligned chunks both offline and online: BLAS
results vary with gemm shape, so equal chunking is part of the contract.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .baselines import (
    BoostConfig,
    QrfConfig,
    qgb_fit,
    qgb_predict,
    qrf_fit,
    qrf_predict_levels,
)
from .core import QuantileLevels
from .dataio import SplitSpec, countertrade_filter, glitch_filter
from .exceptions import ContractError, DomainError, StageError
from .nncorrect import (
    LagSpec,
    TrainConfig,
    build_training_set,
    forward_windows,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .scoring import (
    QuantileForecast,
    ensemble_level_assumption,
    relative_score,
    score_ensemble,
    score_forecast,
)
from .taqr.backend import backend_name
from .taqr.solver import (
    DAY_OFFSET_DEFAULT,
    N_INIT_DEFAULT,
    N_WINDOW_DEFAULT,
    TaqrState,
    run_taqr,
    warm_start,
)

CONFIG_VERSION = 1
STATE_FORMAT_VERSION = 1
ALL_METHODS = ("raw", "qrnn", "taqr", "qrf", "qgb", "nabqr")


@dataclass
class PipelineConfig:
    """Everything a reproducible run needs besides the dataset."""

    lagspec: LagSpec = field(default_factory=LagSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = None              # None: default layout, shrunk to fit
    eval_levels: np.ndarray = None       # None: the 13 default levels
    taqr_init: int = N_INIT_DEFAULT
    taqr_capacity: int = N_WINDOW_DEFAULT
    horizon_mode: str = "day_ahead"      # or "rolling"
    day_offset: int = DAY_OFFSET_DEFAULT
    crossing_repair: bool = True
    correction: bool = True
    methods: tuple = ALL_METHODS
    qrf: QrfConfig = field(default_factory=QrfConfig)
    qgb: BoostConfig = field(default_factory=BoostConfig)
    apply_filters: bool = True
    retrain_every_days: int = None       # batch-path hook; off by default
    seed: int = 0

    def __post_init__(self):
        if self.eval_levels is None:
            self.eval_levels = QuantileLevels.default_eval().values
        # QuantileLevels enforces: distinct, finite, strictly inside (0, 1)
        self.eval_levels = QuantileLevels(self.eval_levels).values
        if self.horizon_mode not in ("day_ahead", "rolling"):
            raise DomainError(f"unknown horizon_mode {self.horizon_mode!r}")
        if not 0 <= self.day_offset <= 24:
            raise DomainError("day_offset must lie in [0, 24]")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise DomainError(f"unknown method(s) {bad}")
        methods = tuple(dict.fromkeys(("raw",) + tuple(self.methods)))
        self.methods = tuple(m for m in ALL_METHODS if m in methods)
        if self.retrain_every_days is not None:
            if self.retrain_every_days < 1:
                raise DomainError("retrain_every_days must be positive")
            if not self.correction:
                raise DomainError(
                    "retrain_every_days needs the corrector enabled"
                )
        if self.taqr_init < 1 or self.taqr_capacity <= self.taqr_init:
            raise DomainError("need taqr_capacity > taqr_init >= 1")


def config_to_dict(config):
    """JSON-serializable snapshot; inverse of config_from_dict."""
    return {
        "config_version": CONFIG_VERSION,
        "lags": list(config.lagspec.lags),
        "train": {
            "target_levels": config.train.target_levels.tolist(),
            "epochs": config.train.epochs,
            "batch_size": config.train.batch_size,
            "learning_rate": config.train.learning_rate,
            "seed": config.train.seed,
            "validation_fraction": config.train.validation_fraction,
            "target_mode": config.train.target_mode,
            "n_units": config.train.n_units,
            "n_outputs": config.train.n_outputs,
        },
        "split": None
        if config.split is None
        else {
            "nn_train": config.split.nn_train,
            "taqr_init": config.split.taqr_init,
            "taqr_window": config.split.taqr_window,
            "test": config.split.test,
        },
        "eval_levels": config.eval_levels.tolist(),
        "taqr_init": config.taqr_init,
        "taqr_capacity": config.taqr_capacity,
        "horizon_mode": config.horizon_mode,
        "day_offset": config.day_offset,
        "crossing_repair": config.crossing_repair,
        "correction": config.correction,
        "methods": list(config.methods),
        "qrf": {
            "n_trees": config.qrf.n_trees,
            "max_depth": config.qrf.max_depth,
            "min_leaf": config.qrf.min_leaf,
            "max_features": config.qrf.max_features,
            "seed": config.qrf.seed,
        },
        "qgb": {
            "n_stages": config.qgb.n_stages,
            "learning_rate": config.qgb.learning_rate,
            "max_depth": config.qgb.max_depth,
            "min_leaf": config.qgb.min_leaf,
            "seed": config.qgb.seed,
            "rho_max": config.qgb.rho_max,
            "leaf_update": config.qgb.leaf_update,
        },
        "apply_filters": config.apply_filters,
        "retrain_every_days": config.retrain_every_days,
        "seed": config.seed,
    }


def config_from_dict(d):
    version = d.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ContractError(f"unsupported config version {version}")
    kw = {}
    if "lags" in d:
        kw["lagspec"] = LagSpec(tuple(d["lags"]))
    if "train" in d:
        t = dict(d["train"])
        if t.get("target_levels") is not None:
            t["target_levels"] = np.asarray(t["target_levels"], dtype=np.float64)
        kw["train"] = TrainConfig(**t, lagspec=kw.get("lagspec", LagSpec()))
    if d.get("split") is not None:
        kw["split"] = SplitSpec(**d["split"])
    for name in (
        "eval_levels",
        "taqr_init",
        "taqr_capacity",
        "horizon_mode",
        "day_offset",
        "crossing_repair",
        "correction",
        "retrain_every_days",
        "seed",
        "apply_filters",
    ):
        if name in d and d[name] is not None:
            kw[name] = d[name]
    if "methods" in d:
        kw["methods"] = tuple(d["methods"])
    if "qrf" in d:
        kw["qrf"] = QrfConfig(**d["qrf"])
    if "qgb" in d:
        kw["qgb"] = BoostConfig(**d["qgb"])
    return PipelineConfig(**kw)


def repair_crossings(forecast, diagnostics=None):
    """Sort each row across levels so quantiles never cross; idempotent.

    Level columns are first reordered to ascending levels.  When given,
    `diagnostics` receives "repaired_rows" (bool per row) and "repair_rate"
    (fraction of rows that actually changed).
    """
    order = np.argsort(forecast.levels, kind="stable")
    lv = forecast.levels[order]
    vals = forecast.values[:, order]
    finite = np.all(np.isfinite(vals), axis=1)
    crossed = np.zeros(len(forecast), dtype=bool)
    if finite.any():
        crossed[finite] = np.any(np.diff(vals[finite], axis=1) < 0.0, axis=1)
    repaired = vals.copy()
    if finite.any():
        repaired[finite] = np.sort(vals[finite], axis=1)
    if diagnostics is not None:
        diagnostics["repaired_rows"] = crossed
        diagnostics["repair_rate"] = float(crossed.mean()) if crossed.size else 0.0
    return QuantileForecast(lv, repaired, forecast.timestamps, True)


# ---------------------------------------------------------------------------
# Online state


@dataclass
class OnlineState:
    """Everything the day-ahead loop needs between invocations.

    Index bookkeeping is in global dataset hours: `next_block` is the first
    hour of the next day to issue, `cursor` the first hour not yet absorbed
    into the regression windows, `obs_next` the first hour with no submitted
    observation.  Design rows for issued-but-unabsorbed hours wait in
    `pending_x`; observations wait in `y_vals`/`y_valid`.
    """

    levels: np.ndarray
    taqr_states: list
    k_design: int
    correction: bool
    params: object                  # LstmParams or None
    day_offset: int
    crossing_repair: bool
    base_ts: np.datetime64          # timestamp of global hour 0
    area: str
    n_members: int
    next_block: int
    cursor: int
    obs_next: int
    raw_tail: np.ndarray            # sorted raw rows, globals [tail_start, next_block)
    tail_start: int
    pending_x: dict = field(default_factory=dict)
    y_vals: dict = field(default_factory=dict)
    y_valid: dict = field(default_factory=dict)

    def expected_timestamps(self):
        """Target timestamps of the next day block."""
        return (
            self.base_ts
            + (self.next_block + np.arange(24)) * np.timedelta64(1, "h")
        ).astype("datetime64[ns]")

    def submit_observations(self, values, valid=None):
        """Append observed values for consecutive hours starting at obs_next.

        Hours at or beyond the next unissued block are rejected: an
        observation can only be submitted for an hour whose day has been
        issued, which also makes silent reordering impossible.
        """
        vals = np.asarray(values, dtype=np.float64).ravel()
        if valid is None:
            ok = np.isfinite(vals)
        else:
            ok = np.asarray(valid, dtype=bool).ravel() & np.isfinite(vals)
            if ok.shape != vals.shape:
                raise ContractError("valid mask must align with values")
        if self.obs_next + vals.size > self.next_block:
            raise ContractError(
                f"observations reach hour {self.obs_next + vals.size - 1} but "
                f"only hours below {self.next_block} have been issued"
            )
        for k in range(vals.size):
            i = self.obs_next + k
            self.y_vals[i] = float(vals[k])
            self.y_valid[i] = bool(ok[k])
        self.obs_next += vals.size

    def _absorb_to(self, limit):
        while self.cursor < limit:
            i = self.cursor
            if i >= self.obs_next:
                raise ContractError(
                    f"cannot issue: observations through hour {limit - 1} "
                    f"required, have them through hour {self.obs_next - 1}"
                )
            x = self.pending_x.pop(i, None)
            if x is None:
                raise ContractError(f"no pending design row for hour {i}")
            if self.y_valid.pop(i):
                y = self.y_vals.pop(i)
                for st in self.taqr_states:
                    st.absorb(x, y)
            else:
                self.y_vals.pop(i)
            self.cursor += 1

    def _design_block(self, sorted_rows):
        """Design rows for one day from sorted raw members (24 x k_design)."""
        if not self.correction:
            z = sorted_rows
        else:
            hist = np.vstack([self.raw_tail, sorted_rows])
            offs = np.array(self.params.lagspec.sequence_offsets(), dtype=np.int64)
            t_glob = self.next_block + np.arange(sorted_rows.shape[0])
            rel = t_glob[:, None] - offs[None, :] - self.tail_start
            z = np.sort(forward_windows(self.params, hist[rel]), axis=1)
        return np.hstack([np.ones((z.shape[0], 1)), z])

    def _issue_block(self, x_block):
        """Absorb due rows, predict the block, stash its design rows."""
        bs = self.next_block
        r = x_block.shape[0]
        self._absorb_to(max(bs - self.day_offset, self.cursor))
        preds = np.column_stack([x_block @ st.beta for st in self.taqr_states])
        for k in range(r):
            self.pending_x[bs + k] = x_block[k]
        self.next_block = bs + r
        return preds

    def issue_day(self, ensembles, observations=None, obs_valid=None, timestamps=None):
        """Issue the next 24-hour forecast block.

        ensembles: the day's 24 raw ensemble rows (members need not be
        sorted).  observations: optional chunk of newly available observed
        values for consecutive hours starting at obs_next.  timestamps,
        when given, must equal expected_timestamps() (out-of-order or
        duplicate day submissions are rejected).
        """
        if observations is not None:
            self.submit_observations(observations, obs_valid)
        ens = np.asarray(ensembles, dtype=np.float64)
        if ens.shape != (24, self.n_members):
            raise ContractError(
                f"expected (24, {self.n_members}) ensemble rows, got {ens.shape}"
            )
        if not np.all(np.isfinite(ens)):
            raise DomainError("ensemble rows must be finite")
        if timestamps is not None:
            exp = self.expected_timestamps()
            got = np.asarray(timestamps).astype("datetime64[ns]")
            if got.shape != exp.shape or np.any(got != exp):
                raise ContractError(
                    f"day out of order: expected block starting {exp[0]}, "
                    f"got {got[0] if got.size else 'empty'}"
                )
        bs = self.next_block
        sorted_rows = np.sort(ens, axis=1)
        x_block = self._design_block(sorted_rows)
        preds = self._issue_block(x_block)
        # maintain the raw history tail for the next day's lag windows
        hist = np.vstack([self.raw_tail, sorted_rows])
        keep = self.params.lagspec.max_lag if self.correction else 1
        self.raw_tail = hist[-keep:].copy()
        self.tail_start = self.next_block - keep
        ts = (
            self.base_ts + (bs + np.arange(24)) * np.timedelta64(1, "h")
        ).astype("datetime64[ns]")
        fc = QuantileForecast(self.levels, preds, ts)
        if self.crossing_repair:
            fc = repair_crossings(fc)
        fc.issue_time = self.base_ts + (bs - self.day_offset) * np.timedelta64(
            1, "h"
        )
        return fc


def online_step(state, ensembles, observations=None, obs_valid=None, timestamps=None):
    """One online update: submit fresh observations, issue the next day.

    Returns (forecast, state); the state is mutated in place.  See
    OnlineState.issue_day for the protocol.
    """
    fc = state.issue_day(ensembles, observations, obs_valid, timestamps)
    return fc, state


def save_state(state, dirpath):
    """Serialize an OnlineState bundle deterministically into a directory."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": STATE_FORMAT_VERSION,
        "levels": state.levels.tolist(),
        "k_design": state.k_design,
        "correction": state.correction,
        "day_offset": state.day_offset,
        "crossing_repair": state.crossing_repair,
        "base_ts": np.datetime_as_string(state.base_ts, unit="ns"),
        "area": state.area,
        "n_members": state.n_members,
        "next_block": state.next_block,
        "cursor": state.cursor,
        "obs_next": state.obs_next,
        "tail_start": state.tail_start,
    }
    (d / "state.json").write_text(json.dumps(manifest, indent=1))
    if state.correction:
        save_checkpoint(state.params, d / "corrector.npz")
    pend_idx = np.array(sorted(state.pending_x), dtype=np.int64)
    pend_rows = (
        np.stack([state.pending_x[i] for i in pend_idx])
        if pend_idx.size
        else np.zeros((0, state.k_design))
    )
    y_idx = np.array(sorted(state.y_vals), dtype=np.int64)
    np.savez(
        d / "buffers.npz",
        raw_tail=state.raw_tail,
        pending_idx=pend_idx,
        pending_rows=pend_rows,
        y_idx=y_idx,
        y_val=np.array([state.y_vals[i] for i in y_idx]),
        y_ok=np.array([state.y_valid[i] for i in y_idx], dtype=bool),
    )
    for j, st in enumerate(state.taqr_states):
        np.savez(d / f"taqr_{j:02d}.npz", **st.to_arrays())


def load_state(dirpath):
    """Inverse of save_state; the round trip is replay-exact."""
    d = Path(dirpath)
    manifest = json.loads((d / "state.json").read_text())
    if manifest.get("format_version") != STATE_FORMAT_VERSION:
        raise ContractError(
            f"unsupported state bundle version {manifest.get('format_version')}"
        )
    levels = np.asarray(manifest["levels"], dtype=np.float64)
    params = None
    if manifest["correction"]:
        params = load_checkpoint(d / "corrector.npz")
    with np.load(d / "buffers.npz") as z:
        raw_tail = z["raw_tail"]
        pending_x = {
            int(i): row for i, row in zip(z["pending_idx"], z["pending_rows"])
        }
        y_vals = {int(i): float(v) for i, v in zip(z["y_idx"], z["y_val"])}
        y_valid = {int(i): bool(v) for i, v in zip(z["y_idx"], z["y_ok"])}
    states = []
    for j in range(levels.size):
        with np.load(d / f"taqr_{j:02d}.npz") as z:
            states.append(TaqrState.from_arrays(dict(z.items())))
    return OnlineState(
        levels=levels,
        taqr_states=states,
        k_design=int(manifest["k_design"]),
        correction=bool(manifest["correction"]),
        params=params,
        day_offset=int(manifest["day_offset"]),
        crossing_repair=bool(manifest["crossing_repair"]),
        base_ts=np.datetime64(manifest["base_ts"]),
        area=manifest["area"],
        n_members=int(manifest["n_members"]),
        next_block=int(manifest["next_block"]),
        cursor=int(manifest["cursor"]),
        obs_next=int(manifest["obs_next"]),
        raw_tail=raw_tail,
        tail_start=int(manifest["tail_start"]),
        pending_x=pending_x,
        y_vals=y_vals,
        y_valid=y_valid,
    )


# ---------------------------------------------------------------------------
# Batch pipeline


@dataclass
class PipelineResult:
    forecasts: dict                # method -> QuantileForecast over test
    reports: dict                  # method -> ScoreReport
    relative: dict                 # method -> {metric: RS vs raw}
    diagnostics: dict
    split: SplitSpec
    test_range: tuple              # (start, stop) global hour indices
    state: object = None           # OnlineState after the sweep (day_ahead)
    manifest: dict = field(default_factory=dict)


def _digest(dataset):
    h = hashlib.sha256()
    h.update(dataset.timestamps.tobytes())
    h.update(dataset.observations.values.tobytes())
    h.update(dataset.observations.valid.tobytes())
    h.update(dataset.ensembles.members.tobytes())
    return h.hexdigest()


def _resolve_split(config, t_hours):
    spec = config.split
    if spec is None:
        spec = SplitSpec()
        if spec.total > t_hours:
            spec = spec.for_total(t_hours)
    if spec.total > t_hours:
        raise ContractError(
            f"split needs {spec.total} hours but dataset has {t_hours}"
        )
    return spec


def _corrected_span(params, members, lo, hi, anchor=None, chunk=4096, stats=None):
    """Corrected + sorted basis rows for global hours [lo, hi).

    anchor=None: fixed-size chunks.  anchor=k: 24-row chunks aligned to
    hours congruent to k mod 24 (the online issuance grid), so the same
    rows recomputed one day at a time match bitwise.  `stats`, when given,
    accumulates "rows" and "crossed" counts measured before sorting.
    """
    offs = np.array(params.lagspec.sequence_offsets(), dtype=np.int64)
    if lo < params.lagspec.max_lag:
        raise ContractError("corrected rows need full lag history")
    out = np.empty((hi - lo, params.n_outputs))
    edges = []
    a = lo
    if anchor is not None:
        first = lo + (int(anchor) - lo) % 24
        if first > lo:
            edges.append((lo, min(first, hi)))
            a = first
        step = 24
    else:
        step = chunk
    while a < hi:
        edges.append((a, min(a + step, hi)))
        a += step
    for a, b in edges:
        idx = np.arange(a, b)
        win = members[idx[:, None] - offs[None, :]]
        rows = forward_windows(params, win)
        if stats is not None:
            stats["rows"] = stats.get("rows", 0) + rows.shape[0]
            stats["crossed"] = stats.get("crossed", 0) + int(
                np.sum(np.any(np.diff(rows, axis=1) < 0, axis=1))
            )
        out[a - lo : b - lo] = np.sort(rows, axis=1)
    return out


def _spinup_states(x, y, valid, levels, n_init, n_full, day_offset, boundary, align):
    """Warm-start each level and absorb day-ahead-due rows up to `boundary`.

    Mirrors the day-ahead absorb order of run_taqr exactly: blocks start at
    indices congruent to `align` mod 24, and before each block every valid
    row older than block_start - day_offset enters the window.
    """
    valid_idx = np.nonzero(valid)[0]
    if valid_idx.size <= n_init:
        raise ContractError(
            f"need more than n_init={n_init} valid rows before the test slice"
        )
    init_idx = valid_idx[:n_init]
    t0 = int(init_idx[-1]) + 1
    t0_pred = t0 + (int(align) - t0) % 24
    if t0_pred > boundary:
        raise ContractError("test boundary precedes the first issuable block")
    states = []
    final_cursor = t0
    for tau in levels:
        st = warm_start(x[init_idx], y[init_idx], float(tau), n_full=n_full)
        cursor = t0
        bs = t0_pred
        while bs < boundary:
            limit = max(bs - day_offset, cursor)
            while cursor < limit:
                if valid[cursor]:
                    st.absorb(x[cursor], y[cursor])
                cursor += 1
            bs += 24
        states.append(st)
        final_cursor = cursor
    return states, final_cursor, t0_pred


def _make_retrainer(config, cfg_train, members, y, valid, c, d):
    """Periodic-refit callback: train on everything observable at issue time,
    then rebuild the not-yet-issued design rows under the new corrector."""

    def retrain(bs, online):
        cut = bs - config.day_offset
        w, tg, _ = build_training_set(
            members[:cut], y[:cut], valid[:cut], config.lagspec, cfg_train
        )
        online.params = train((w, tg), cfg_train)
        z = _corrected_span(online.params, members, bs, d, anchor=c)
        return np.hstack([np.ones((z.shape[0], 1)), z])

    return retrain


def _sweep_day_ahead(online, x_test, y, valid, c, d, retrain=None):
    """Drive the test span block by block through the online machinery.

    Observation chunks are submitted exactly as the online protocol allows:
    before issuing block bs, values through hour bs - day_offset arrive.

    `retrain`, when given, is a callback (block_start, online) -> new design
    rows for hours [block_start, d), invoked every configured number of days
    on the batch path only; a saved state bundle carries no training history,
    so replays must run with the hook off.
    """
    t_len = d - c
    out = np.full((t_len, online.levels.size), np.nan)
    bs = c
    day = 0
    while bs < d:
        be = min(bs + 24, d)
        if retrain is not None and day > 0 and day % retrain[0] == 0:
            x_test[bs - c :] = retrain[1](bs, online)
        hi = max(bs - online.day_offset, online.obs_next)
        if hi > online.obs_next:
            sl = slice(online.obs_next, hi)
            online.submit_observations(y[sl], valid[sl])
        out[bs - c : be - c] = online._issue_block(x_test[bs - c : be - c])
        bs = be
        day += 1
    return out


def run_nabqr(dataset, config=None, outdir=None, resume=False):
    """Train, correct, adapt, and score; optionally persist artifacts.

    Returns a PipelineResult whose forecasts all cover the test slice.  Any
    stage failure raises StageError tagged with the stage name; artifacts
    written before the failure stay on disk when `outdir` is given, and
    `resume=True` reuses a previously saved corrector checkpoint and
    corrected matrix instead of recomputing them.
    """
    config = config if config is not None else PipelineConfig()
    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    timings = {}
    stages_done = []
    current = "setup"

    def fail(err):
        if out is not None:
            (out / "failed_stage.json").write_text(
                json.dumps({"stage": current, "error": repr(err)}, indent=1)
            )
        raise StageError(current, err) from err

    try:
        return _run_nabqr_inner(
            dataset, config, out, resume, timings, stages_done.append
        )
    except StageError:
        raise
    except Exception as err:  # tag every failure with the stage it came from
        current = stages_done[-1] if stages_done else "setup"
        fail(err)


def _run_nabqr_inner(dataset, config, out, resume, timings, enter):
    t_all = time.perf_counter()

    # -- clean ----------------------------------------------------------
    enter("clean")
    t = time.perf_counter()
    diagnostics = {"backend": backend_name()}
    data = dataset
    if config.apply_filters:
        keep_ct = countertrade_filter(data)
        keep_gl = glitch_filter(data.ensembles)
        keep = keep_ct & keep_gl
        data = data.apply_mask(keep)
        diagnostics["filtered_hours"] = int((~keep).sum())
    timings["clean"] = time.perf_counter() - t

    # -- split ----------------------------------------------------------
    enter("split")
    t = time.perf_counter()
    t_hours = data.n_hours
    spec = _resolve_split(config, t_hours)
    a = spec.nn_train
    b = a + spec.taqr_init
    c = b + spec.taqr_window
    d = c + spec.test
    max_lag = config.lagspec.max_lag
    if config.correction and a <= max_lag + 16:
        raise ContractError(
            f"nn_train slice of {a} hours cannot feed lags up to {max_lag}"
        )
    y = data.observations.values
    valid = data.observations.valid
    ens_sorted = (
        data.ensembles if data.ensembles.is_sorted else data.ensembles.sorted()
    )
    members = ens_sorted.members
    n_members = members.shape[1]
    timings["split"] = time.perf_counter() - t

    # -- train ----------------------------------------------------------
    enter("train")
    t = time.perf_counter()
    params = None
    cfg_train = None
    if config.correction:
        cfg_train = config.train
        if cfg_train.lagspec.lags != config.lagspec.lags:
            cfg_train = replace(cfg_train, lagspec=config.lagspec)
        ck = out / "corrector.npz" if out is not None else None
        if resume and ck is not None and ck.exists():
            params = load_checkpoint(ck)
        else:
            windows, targets, _ = build_training_set(
                members[:a], y[:a], valid[:a], config.lagspec, cfg_train
            )
            params = train((windows, targets), cfg_train)
            if ck is not None:
                save_checkpoint(params, ck)
        diagnostics["train_history"] = params.train_history
    timings["train"] = time.perf_counter() - t

    # -- correct --------------------------------------------------------
    enter("correct")
    t = time.perf_counter()
    corrected = None          # sorted corrected rows for global hours [a, d)
    if config.correction:
        cache = out / "corrected.npy" if out is not None else None
        if resume and cache is not None and cache.exists():
            corrected = np.load(cache)
            if corrected.shape != (d - a, params.n_outputs):
                corrected = None
        if corrected is None:
            stats = {}
            head = _corrected_span(params, members, a, c, stats=stats)
            tail = _corrected_span(params, members, c, d, anchor=c, stats=stats)
            corrected = np.vstack([head, tail])
            if cache is not None:
                np.save(cache, corrected)
            diagnostics["corrector_pre_sort_crossing_rate"] = (
                stats["crossed"] / stats["rows"] if stats.get("rows") else 0.0
            )
    timings["correct"] = time.perf_counter() - t

    # -- taqr (adaptive runs for nabqr and taqr-on-raw) -------------------
    enter("taqr")
    t = time.perf_counter()
    lv = config.eval_levels
    forecasts = {}
    raw_values = {}
    boundary_state = None
    forecast_state = None
    for method in ("nabqr", "taqr"):
        if method not in config.methods:
            continue
        if method == "nabqr" and config.correction:
            z = corrected
        else:
            z = members[a:d]
        x_run = np.hstack([np.ones((z.shape[0], 1)), z])
        y_run = y[a:d]
        valid_run = valid[a:d]
        if config.horizon_mode == "rolling":
            res = run_taqr(
                x_run,
                y_run,
                lv,
                n_init=config.taqr_init,
                n_full=config.taqr_capacity,
                valid=valid_run,
                mode="rolling",
            )
            if res.start_index > c - a:
                raise ContractError("warm start extends past the test boundary")
            raw_values[method] = res.values[c - a : d - a]
            diagnostics[f"{method}_pivots_median"] = float(
                np.median(np.concatenate([dg.pivots for dg in res.diagnostics]))
            )
        else:
            states, cursor, t0p = _spinup_states(
                x_run,
                y_run,
                valid_run,
                lv,
                config.taqr_init,
                config.taqr_capacity,
                config.day_offset,
                boundary=c - a,
                align=c - a,
            )
            online = OnlineState(
                levels=lv.copy(),
                taqr_states=states,
                k_design=x_run.shape[1],
                correction=bool(config.correction and method == "nabqr"),
                params=params if method == "nabqr" else None,
                day_offset=config.day_offset,
                crossing_repair=config.crossing_repair,
                base_ts=data.timestamps[0],
                area=data.area,
                n_members=n_members,
                next_block=c,
                cursor=cursor + a,
                obs_next=max(c - config.day_offset, cursor + a),
                raw_tail=members[max(c - max_lag, 0) : c].copy(),
                tail_start=max(c - max_lag, 0),
                pending_x={
                    a + i: x_run[i] for i in range(cursor, c - a)
                },
            )
            for i in range(online.cursor, online.obs_next):
                online.y_vals[i] = float(y[i])
                online.y_valid[i] = bool(valid[i])
            if method == "nabqr" and out is not None:
                save_state(online, out / "state")
                boundary_state = str(out / "state")
            retrain = None
            if method == "nabqr" and config.retrain_every_days is not None:
                retrain = (
                    config.retrain_every_days,
                    _make_retrainer(
                        config, cfg_train, members, y, valid, c, d
                    ),
                )
            x_sweep = x_run[c - a : d - a]
            if retrain is not None:
                x_sweep = x_sweep.copy()
            vals = _sweep_day_ahead(online, x_sweep, y, valid, c, d, retrain)
            raw_values[method] = vals
            diagnostics[f"{method}_total_pivots"] = int(
                np.sum([st.total_pivots for st in states])
            )
            if method == "nabqr":
                forecast_state = online
    timings["taqr"] = time.perf_counter() - t

    # -- baselines --------------------------------------------------------
    enter("baselines")
    t = time.perf_counter()
    pre_ok = valid[:c].copy()
    x_base = members[:c][pre_ok]
    y_base = y[:c][pre_ok]
    x_test = members[c:d]
    if "qrf" in config.methods:
        forest = qrf_fit(x_base, y_base, config.qrf)
        raw_values["qrf"] = qrf_predict_levels(forest, x_test, lv)
    if "qgb" in config.methods:
        cols = []
        for tau in lv:
            model = qgb_fit(x_base, y_base, float(tau), config.qgb)
            cols.append(qgb_predict(model, x_test))
        raw_values["qgb"] = np.column_stack(cols)
    timings["baselines"] = time.perf_counter() - t

    # -- score ------------------------------------------------------------
    enter("score")
    t = time.perf_counter()
    ts_test = data.timestamps[c:d]
    y_test = y[c:d]
    valid_test = valid[c:d]
    issue = _issue_times(ts_test, c, config)
    reports = {}
    relative = {}
    rates = {}

    raw_fc = QuantileForecast(
        ensemble_level_assumption(n_members),
        members[c:d],
        ts_test,
        crossing_repaired=True,
    )
    raw_fc.issue_time = issue
    forecasts["raw"] = raw_fc
    reports["raw"] = score_ensemble(y_test, members[c:d], valid_test)

    if "qrnn" in config.methods and config.correction:
        qrnn_fc = QuantileForecast(
            ensemble_level_assumption(params.n_outputs),
            corrected[c - a : d - a],
            ts_test,
            crossing_repaired=True,
        )
        qrnn_fc.issue_time = issue
        forecasts["qrnn"] = qrnn_fc
        reports["qrnn"] = score_forecast(y_test, qrnn_fc, valid=valid_test)

    for method in ("taqr", "qrf", "qgb", "nabqr"):
        if method not in raw_values:
            continue
        fc = QuantileForecast(lv, raw_values[method], ts_test)
        diag = {}
        if config.crossing_repair:
            fc = repair_crossings(fc, diag)
            rates[method] = diag["repair_rate"]
        fc.issue_time = issue
        forecasts[method] = fc
        reports[method] = score_forecast(y_test, fc, valid=valid_test)

    base = reports["raw"]
    for method, rep in reports.items():
        if method == "raw":
            continue
        relative[method] = {
            "mae": relative_score(rep.mae, base.mae),
            "crps": relative_score(rep.crps, base.crps),
            "qs_mean": relative_score(rep.qs_mean, base.qs_mean),
        }
    diagnostics["pre_repair_crossing_rates"] = rates
    diagnostics["reliability_max_deviation"] = {
        m: max(abs(v - k) for k, v in rep.reliability.items())
        for m, rep in reports.items()
    }
    timings["score"] = time.perf_counter() - t

    # -- persist ----------------------------------------------------------
    enter("persist")
    t = time.perf_counter()
    manifest = {
        "config": config_to_dict(config),
        "split": {
            "nn_train": spec.nn_train,
            "taqr_init": spec.taqr_init,
            "taqr_window": spec.taqr_window,
            "test": spec.test,
        },
        "test_range": [int(c), int(d)],
        "area": data.area,
        "input_digest": _digest(dataset),
        "backend": backend_name(),
        "state_bundle": boundary_state,
        "timings": None,  # filled below
    }
    result = PipelineResult(
        forecasts=forecasts,
        reports=reports,
        relative=relative,
        diagnostics=diagnostics,
        split=spec,
        test_range=(int(c), int(d)),
        state=forecast_state,
        manifest=manifest,
    )
    artifacts = []
    if out is not None:
        for method, fc in forecasts.items():
            p = out / f"forecast_{method}.csv"
            write_forecast_csv(fc, p)
            artifacts.append(str(p))
        (out / "reports.json").write_text(
            json.dumps(
                {
                    "reports": {m: r.to_dict() for m, r in reports.items()},
                    "relative": relative,
                    "diagnostics": _jsonable(diagnostics),
                },
                indent=1,
            )
        )
        artifacts.append(str(out / "reports.json"))
        if boundary_state is not None:
            artifacts.append(boundary_state)
    timings["persist"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t_all
    manifest["timings"] = {k: round(v, 3) for k, v in timings.items()}
    manifest["artifacts"] = artifacts
    if out is not None:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
        failed = out / "failed_stage.json"
        if failed.exists():
            failed.unlink()
    return result


def _issue_times(ts_test, c, config):
    if config.horizon_mode == "rolling":
        return ts_test - np.timedelta64(1, "h")
    rel = (np.arange(ts_test.size) // 24) * 24
    return ts_test[0] + (rel - config.day_offset) * np.timedelta64(1, "h")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_forecast_csv(forecast, path):
    """Long-format forecast file: timestamp, level, value, issue_time."""
    t_len, n_lv = forecast.values.shape
    if forecast.timestamps is None:
        raise ContractError("forecast has no timestamps to serialize")
    issue = getattr(forecast, "issue_time", None)
    if issue is None:
        issue = forecast.timestamps
    issue = np.broadcast_to(np.asarray(issue), (t_len,))
    df = pd.DataFrame(
        {
            "timestamp": np.repeat(forecast.timestamps, n_lv),
            "level": np.tile(forecast.levels, t_len),
            "value": forecast.values.ravel(),
            "issue_time": np.repeat(issue, n_lv),
        }
    )
    df.to_csv(path, index=False, float_format="%.17g")


def read_forecast_csv(path):
    """Inverse of write_forecast_csv."""
    df = pd.read_csv(path, float_precision="round_trip")
    levels = np.unique(df["level"].to_numpy())
    ts = pd.to_datetime(df["timestamp"].unique()).to_numpy("datetime64[ns]")
    piv = df.pivot_table(index="timestamp", columns="level", values="value")
    piv = piv.reindex(sorted(piv.columns), axis=1)
    return QuantileForecast(levels, piv.to_numpy(), ts)
