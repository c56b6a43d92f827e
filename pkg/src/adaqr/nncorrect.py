"""LSTM + dense corrector mapping lagged sorted ensembles to a quantile basis.

Architecture (the production size): an LSTM layer with U=256 units reads a
sequence of |AR|=7 sorted 51-member ensemble rows (lags 48, 24, 12, 6, 3,
2, 1 hours, oldest first), its final hidden state passes through a dense
sigmoid layer to width 20 and a dense rectifier layer to the 20 output
basis values.  Input and hidden contributions carry separate bias vectors
(b_x and b_h per gate), giving 321,976 trainable parameters at full size.

Training minimizes the combined quantile (pinball) loss over 20 levels by
plain mini-batch gradient descent with global gradient-norm clipping,
backpropagation through time over the full 7-step window, all in float64
NumPy.  Everything is deterministic given the seed.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import QuantileLevels, empirical_quantiles, rows_sorted
from .exceptions import ContractError, ConvergenceError, DomainError

GATE_ORDER = ("i", "f", "c", "o")  # input, forget, candidate, output
CLIP_NORM = 1.0                    # global gradient-norm ceiling
CHECKPOINT_VERSION = 1

DEFAULT_LAGS = (1, 2, 3, 6, 12, 24, 48)
DEFAULT_UNITS = 256
DEFAULT_OUTPUT = 20


@dataclass(frozen=True)
class LagSpec:
    """Autoregressive hour offsets feeding the corrector, e.g. (1,...,48)."""

    lags: tuple = DEFAULT_LAGS

    def __post_init__(self):
        lags = tuple(int(v) for v in self.lags)
        if len(lags) == 0:
            raise DomainError("need at least one lag")
        if any(v <= 0 for v in lags):
            raise DomainError("lags must be positive hour offsets")
        if len(set(lags)) != len(lags):
            raise DomainError("lags must be distinct")
        object.__setattr__(self, "lags", lags)

    @property
    def depth(self):
        return len(self.lags)

    @property
    def max_lag(self):
        return max(self.lags)

    def sequence_offsets(self):
        """Offsets in feeding order: deepest lag first, most recent last."""
        return tuple(sorted(self.lags, reverse=True))


def _sigmoid(z):
    # numerically safe piecewise form
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmParams:
    """All trainable tensors plus the preprocessing constants.

    Stacked gate layout: columns of w_x/w_h and entries of b_x/b_h hold the
    four gates in order (input, forget, candidate, output), U columns each.
    """

    w_x: np.ndarray            # (F, 4U)
    w_h: np.ndarray            # (U, 4U)
    b_x: np.ndarray            # (4U,)
    b_h: np.ndarray            # (4U,)
    w_d1: np.ndarray           # (U, D)
    b_d1: np.ndarray           # (D,)
    w_d2: np.ndarray           # (D, D)
    b_d2: np.ndarray           # (D,)
    x_mean: np.ndarray         # (F,) standardization offset
    x_scale: np.ndarray        # (F,) standardization scale
    lagspec: LagSpec = field(default_factory=LagSpec)
    target_levels: np.ndarray = None
    seed: int = 0
    train_history: list = field(default_factory=list)

    def __post_init__(self):
        f, four_u = self.w_x.shape
        u = four_u // 4
        if four_u != 4 * u or self.w_h.shape != (u, four_u):
            raise ContractError("inconsistent gate tensor shapes")
        d = self.w_d1.shape[1]
        checks = [
            (self.b_x.shape, (four_u,)),
            (self.b_h.shape, (four_u,)),
            (self.w_d1.shape, (u, d)),
            (self.b_d1.shape, (d,)),
            (self.w_d2.shape, (d, d)),
            (self.b_d2.shape, (d,)),
            (self.x_mean.shape, (f,)),
            (self.x_scale.shape, (f,)),
        ]
        for got, want in checks:
            if got != want:
                raise ContractError(f"tensor shape {got} != expected {want}")
        if self.target_levels is None:
            self.target_levels = QuantileLevels.equidistant(d).values
        self.target_levels = np.asarray(self.target_levels, dtype=np.float64)
        if self.target_levels.size != d:
            raise ContractError("target levels must match output width")
        for t in self.tensors().values():
            if not np.all(np.isfinite(t)):
                raise ContractError("non-finite parameter tensor")

    @property
    def n_features(self):
        return self.w_x.shape[0]

    @property
    def n_units(self):
        return self.w_h.shape[0]

    @property
    def n_outputs(self):
        return self.w_d1.shape[1]

    def tensors(self):
        """Trainable tensors by name, in a fixed order."""
        return {
            "w_x": self.w_x,
            "w_h": self.w_h,
            "b_x": self.b_x,
            "b_h": self.b_h,
            "w_d1": self.w_d1,
            "b_d1": self.b_d1,
            "w_d2": self.w_d2,
            "b_d2": self.b_d2,
        }

    @property
    def n_params(self):
        return sum(t.size for t in self.tensors().values())

    def gate(self, name, tensor):
        """View of one gate's slice of a stacked tensor ('i','f','c','o')."""
        u = self.n_units
        k = GATE_ORDER.index(name)
        if tensor.ndim == 1:
            return tensor[k * u : (k + 1) * u]
        return tensor[:, k * u : (k + 1) * u]

    def copy(self):
        return LstmParams(
            **{k: v.copy() for k, v in self.tensors().items()},
            x_mean=self.x_mean.copy(),
            x_scale=self.x_scale.copy(),
            lagspec=self.lagspec,
            target_levels=self.target_levels.copy(),
            seed=self.seed,
            train_history=list(self.train_history),
        )


def init_params(
    n_features,
    n_units=DEFAULT_UNITS,
    n_outputs=DEFAULT_OUTPUT,
    lagspec=None,
    target_levels=None,
    seed=0,
):
    """Glorot-uniform weights, zero biases except forget-gate bias 1.0."""
    rng = np.random.default_rng(seed)

    def glorot(n_in, n_out, shape):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=shape)

    four_u = 4 * n_units
    w_x = glorot(n_features, four_u, (n_features, four_u))
    w_h = glorot(n_units, four_u, (n_units, four_u))
    b_x = np.zeros(four_u)
    b_h = np.zeros(four_u)
    b_x[n_units : 2 * n_units] = 1.0  # forget gate starts open
    w_d1 = glorot(n_units, n_outputs, (n_units, n_outputs))
    b_d1 = np.zeros(n_outputs)
    w_d2 = glorot(n_outputs, n_outputs, (n_outputs, n_outputs))
    b_d2 = np.zeros(n_outputs)
    if target_levels is None:
        target_levels = QuantileLevels.equidistant(n_outputs).values
    return LstmParams(
        w_x=w_x,
        w_h=w_h,
        b_x=b_x,
        b_h=b_h,
        w_d1=w_d1,
        b_d1=b_d1,
        w_d2=w_d2,
        b_d2=b_d2,
        x_mean=np.zeros(n_features),
        x_scale=np.ones(n_features),
        lagspec=lagspec if lagspec is not None else LagSpec(),
        target_levels=np.asarray(target_levels, dtype=np.float64),
        seed=int(seed),
    )


def lstm_cell(params, x_t, h_prev, c_prev):
    """One recurrent step on raw (already standardized) vectors.

    i = sigmoid(W_xi x + b_xi + W_hi h + b_hi), f and o analogous,
    candidate = tanh(...); c_t = f * c_prev + i * candidate;
    h_t = o * tanh(c_t).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    u = params.n_units
    if x_t.shape != (params.n_features,) or h_prev.shape != (u,) or c_prev.shape != (u,):
        raise ContractError("lstm_cell input shapes do not match params")
    z = x_t @ params.w_x + params.b_x + h_prev @ params.w_h + params.b_h
    i = _sigmoid(z[:u])
    f = _sigmoid(z[u : 2 * u])
    g = np.tanh(z[2 * u : 3 * u])
    o = _sigmoid(z[3 * u :])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def _forward_batch(params, xb, cache=False):
    """Batched forward pass. xb: (B, T, F) standardized windows."""
    b, t_steps, f = xb.shape
    u = params.n_units
    h = np.zeros((b, u))
    c = np.zeros((b, u))
    steps = []
    for t in range(t_steps):
        z = xb[:, t] @ params.w_x + params.b_x + h @ params.w_h + params.b_h
        i = _sigmoid(z[:, :u])
        fg = _sigmoid(z[:, u : 2 * u])
        g = np.tanh(z[:, 2 * u : 3 * u])
        o = _sigmoid(z[:, 3 * u :])
        c_new = fg * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if cache:
            steps.append((h, c, i, fg, g, o, tc))
        h, c = h_new, c_new
    pre1 = h @ params.w_d1 + params.b_d1
    a1 = _sigmoid(pre1)
    pre2 = a1 @ params.w_d2 + params.b_d2
    out = np.maximum(pre2, 0.0)
    if not cache:
        return out, None
    return out, {"steps": steps, "h_last": h, "a1": a1, "pre2": pre2, "xb": xb}


def _backward_batch(params, cache, d_out):
    """Gradients of a scalar loss w.r.t. every tensor, given dL/d_out."""
    xb = cache["xb"]
    b, t_steps, f = xb.shape
    u = params.n_units
    grads = {k: np.zeros_like(v) for k, v in params.tensors().items()}

    d_pre2 = d_out * (cache["pre2"] > 0.0)
    grads["w_d2"] += cache["a1"].T @ d_pre2
    grads["b_d2"] += d_pre2.sum(axis=0)
    d_a1 = d_pre2 @ params.w_d2.T
    a1 = cache["a1"]
    d_pre1 = d_a1 * a1 * (1.0 - a1)
    grads["w_d1"] += cache["h_last"].T @ d_pre1
    grads["b_d1"] += d_pre1.sum(axis=0)
    d_h = d_pre1 @ params.w_d1.T
    d_c = np.zeros((b, u))

    for t in range(t_steps - 1, -1, -1):
        h_prev, c_prev, i, fg, g, o, tc = cache["steps"][t]
        d_o = d_h * tc
        d_c = d_c + d_h * o * (1.0 - tc * tc)
        d_i = d_c * g
        d_g = d_c * i
        d_f = d_c * c_prev
        d_c_prev = d_c * fg
        d_z = np.empty((b, 4 * u))
        d_z[:, :u] = d_i * i * (1.0 - i)
        d_z[:, u : 2 * u] = d_f * fg * (1.0 - fg)
        d_z[:, 2 * u : 3 * u] = d_g * (1.0 - g * g)
        d_z[:, 3 * u :] = d_o * o * (1.0 - o)
        grads["w_x"] += xb[:, t].T @ d_z
        grads["w_h"] += h_prev.T @ d_z
        dbz = d_z.sum(axis=0)
        grads["b_x"] += dbz
        grads["b_h"] += dbz
        d_h = d_z @ params.w_h.T
        d_c = d_c_prev
    return grads


def _standardize(params, xb):
    return (xb - params.x_mean) / params.x_scale


def model_forward(params, window, strict=True):
    """Corrected 20-vector for one lagged window of sorted ensemble rows.

    Parameters
    ----------
    params : LstmParams
    window : (|AR|, F) array
        Sorted ensemble rows in feeding order (deepest lag first).
    strict : bool
        Reject windows whose rows are not nondecreasing.

    Returns
    -------
    (D,) ndarray, nonnegative (rectifier output).
    """
    win = np.asarray(window, dtype=np.float64)
    if win.ndim != 2 or win.shape != (params.lagspec.depth, params.n_features):
        raise ContractError(
            f"window must be ({params.lagspec.depth}, {params.n_features})"
        )
    if not np.all(np.isfinite(win)):
        raise DomainError("window contains non-finite values")
    if strict and not rows_sorted(win):
        raise ContractError("window rows must be sorted nondecreasing")
    xb = _standardize(params, win[None, :, :])
    out, _ = _forward_batch(params, xb)
    return out[0]


def forward_windows(params, windows):
    """Forward pass over a stack of raw windows; one output row per window.

    No internal chunking: the caller controls the batch shape, which pins
    the exact floating-point result (BLAS kernels vary with gemm shape).
    """
    xb = np.asarray(windows, dtype=np.float64)
    if xb.ndim != 3 or xb.shape[1:] != (params.lagspec.depth, params.n_features):
        raise ContractError("windows must be (N, |AR|, F) matching params")
    out, _ = _forward_batch(params, _standardize(params, xb))
    return out


def quantile_loss(y_target, y_hat, levels):
    """Combined pinball loss over the level grid.

    (1/Q) * sum_i max(q_i * d_i, (q_i - 1) * d_i) with d = y_target - y_hat.
    """
    yt = np.asarray(y_target, dtype=np.float64)
    yh = np.asarray(y_hat, dtype=np.float64)
    q = levels.values if isinstance(levels, QuantileLevels) else np.asarray(levels)
    if yt.shape != yh.shape or yt.shape[-1] != q.size:
        raise ContractError("targets, predictions and levels must align")
    d = yt - yh
    return float(np.mean(np.maximum(q * d, (q - 1.0) * d)))


def _loss_and_grad_out(yt, out, q):
    """Mean combined loss over the batch and dL/d_out."""
    d = yt - out
    loss = float(np.mean(np.maximum(q * d, (q - 1.0) * d)))
    # dL/d_out: -q where d > 0, (1 - q) where d <= 0, scaled by batch*Q mean
    g = np.where(d > 0.0, -q, 1.0 - q) / d.size
    return loss, g


def dataset_loss(params, windows_std, targets):
    """Full-dataset combined loss with pre-standardized windows (chunked)."""
    q = params.target_levels
    total = 0.0
    n = windows_std.shape[0]
    for lo in range(0, n, 4096):
        hi = min(lo + 4096, n)
        out, _ = _forward_batch(params, windows_std[lo:hi])
        d = targets[lo:hi] - out
        total += float(np.sum(np.maximum(q * d, (q - 1.0) * d)))
    return total / (n * q.size)


@dataclass
class TrainConfig:
    """Knobs for the corrector fit; the seed fixes init and batch order."""

    target_levels: np.ndarray = None
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.5
    seed: int = 0
    validation_fraction: float = 0.1
    target_mode: str = "observation"   # or "augmented-quantile"
    n_units: int = DEFAULT_UNITS
    n_outputs: int = DEFAULT_OUTPUT
    lagspec: LagSpec = field(default_factory=LagSpec)

    def __post_init__(self):
        if self.target_levels is None:
            self.target_levels = QuantileLevels.equidistant(self.n_outputs).values
        self.target_levels = np.asarray(self.target_levels, dtype=np.float64)
        if self.target_levels.size != self.n_outputs:
            raise ContractError("target levels must match output width")
        if self.target_mode not in ("observation", "augmented-quantile"):
            raise DomainError(f"unknown target_mode {self.target_mode!r}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise DomainError("validation fraction must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise DomainError("bad optimizer settings")


def build_training_set(sorted_members, y, valid, lagspec, config):
    """Assemble (windows, targets) from a sorted ensemble matrix and actuals.

    A timestamp t yields a sample when it has full lag history and a valid
    observation.  Windows are raw (unstandardized) and ordered deepest lag
    first; targets follow config.target_mode.
    """
    x = np.asarray(sorted_members, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    t_total = x.shape[0]
    offs = np.array(lagspec.sequence_offsets(), dtype=np.int64)
    t_idx = np.arange(lagspec.max_lag, t_total)
    t_idx = t_idx[valid[t_idx]]
    if t_idx.size == 0:
        raise ContractError("no usable training timestamps")
    windows = x[t_idx[:, None] - offs[None, :]]
    if config.target_mode == "observation":
        targets = np.tile(y[t_idx][:, None], (1, config.n_outputs))
    else:
        q = config.target_levels
        aug = np.concatenate([x[t_idx], y[t_idx][:, None]], axis=1)
        targets = np.empty((t_idx.size, q.size))
        for row in range(t_idx.size):
            targets[row] = empirical_quantiles(aug[row], q)
    return windows, targets, t_idx


def train(dataset, config):
    """Fit the corrector by mini-batch gradient descent on the combined loss.

    Parameters
    ----------
    dataset : (windows, targets)
        windows: (N, |AR|, F) raw lagged sorted-ensemble rows; targets:
        (N, D) per-level target values (see build_training_set).
    config : TrainConfig

    Returns
    -------
    LstmParams
        Trained parameters; params.train_history holds per-epoch losses
        ({"epoch", "train_loss", "val_loss"}), with epoch 0 the pre-update
        loss.  Training loss never increases from first to final entry by
        contract; divergence raises ConvergenceError.
    """
    windows, targets = dataset[0], dataset[1]
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if windows.ndim != 3 or targets.ndim != 2 or windows.shape[0] != targets.shape[0]:
        raise ContractError("dataset must be (N,|AR|,F) windows with (N,D) targets")
    if not (np.all(np.isfinite(windows)) and np.all(np.isfinite(targets))):
        raise DomainError("training data contains non-finite values")
    n, depth, f = windows.shape
    if targets.shape[1] != config.n_outputs:
        raise ContractError("target width must equal the configured output width")
    if depth != config.lagspec.depth:
        raise ContractError(
            f"windows have depth {depth} but lagspec expects {config.lagspec.depth}"
        )

    n_val = int(round(n * config.validation_fraction))
    n_tr = n - n_val
    if n_tr < 1:
        raise ContractError("validation split leaves no training data")

    # standardization constants from the training part only
    flat = windows[:n_tr].reshape(-1, f)
    x_mean = flat.mean(axis=0)
    x_scale = flat.std(axis=0)
    x_scale = np.where(x_scale < 1e-8, 1.0, x_scale)

    params = init_params(
        n_features=f,
        n_units=config.n_units,
        n_outputs=config.n_outputs,
        lagspec=config.lagspec,
        target_levels=config.target_levels,
        seed=config.seed,
    )
    params.x_mean = x_mean
    params.x_scale = x_scale

    xs = (windows - x_mean) / x_scale
    xs_tr, yt_tr = xs[:n_tr], targets[:n_tr]
    xs_val, yt_val = xs[n_tr:], targets[n_tr:]
    q = params.target_levels
    rng = np.random.default_rng(config.seed)

    def val_loss():
        if n_val == 0:
            return float("nan")
        return dataset_loss(params, xs_val, yt_val)

    history = [
        {
            "epoch": 0,
            "train_loss": dataset_loss(params, xs_tr, yt_tr),
            "val_loss": val_loss(),
            "full_pass": True,
        }
    ]
    lr = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n_tr)
        running = 0.0
        seen = 0
        for lo in range(0, n_tr, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            out, cache = _forward_batch(params, xs_tr[idx], cache=True)
            loss, d_out = _loss_and_grad_out(yt_tr[idx], out, q)
            if not np.isfinite(loss):
                raise ConvergenceError(
                    f"training diverged at epoch {epoch}: non-finite loss"
                )
            grads = _backward_batch(params, cache, d_out)
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = lr if gnorm <= CLIP_NORM else lr * (CLIP_NORM / gnorm)
            for name, tensor in params.tensors().items():
                tensor -= scale * grads[name]
            running += loss * idx.size
            seen += idx.size
        history.append(
            {"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss()}
        )

    # epoch entries hold running batch means; bracket them with two full
    # passes so the first/last history rows are directly comparable
    final = dataset_loss(params, xs_tr, yt_tr)
    history.append(
        {
            "epoch": config.epochs,
            "train_loss": final,
            "val_loss": val_loss(),
            "full_pass": True,
        }
    )
    if final > history[0]["train_loss"] + 1e-12 and config.epochs > 0:
        raise ConvergenceError(
            f"training loss rose from {history[0]['train_loss']:.6g} to {final:.6g}; "
            "lower the learning rate"
        )
    params.train_history = history
    return params


def correct_ensembles(params, raw, lagspec=None, diagnostics=None):
    """Corrected ensemble matrix over every timestamp with full lag history.

    Parameters
    ----------
    params : LstmParams
    raw : EnsembleMatrix
        Raw members; rows are sorted internally if needed.
    lagspec : LagSpec, optional
        Defaults to the spec stored in params.
    diagnostics : dict, optional
        When given, filled with {"pre_sort_crossing_rate", "zero_columns"}.

    Returns
    -------
    EnsembleMatrix
        (T - max_lag) x D corrected matrix starting at timestamp index
        max_lag; rows post-sorted nondecreasing.
    """
    from .core import EnsembleMatrix  # local import to avoid cycle at module load

    spec = lagspec if lagspec is not None else params.lagspec
    mat = raw if raw.is_sorted else raw.sorted()
    x = mat.members
    t_total = x.shape[0]
    if t_total <= spec.max_lag:
        raise ContractError(
            f"need more than {spec.max_lag} rows of history, have {t_total}"
        )
    offs = np.array(spec.sequence_offsets(), dtype=np.int64)
    t_idx = np.arange(spec.max_lag, t_total)
    xb = _standardize(params, x[t_idx[:, None] - offs[None, :]])
    outs = np.empty((t_idx.size, params.n_outputs))
    for lo in range(0, t_idx.size, 4096):
        hi = min(lo + 4096, t_idx.size)
        res, _ = _forward_batch(params, xb[lo:hi])
        outs[lo:hi] = res
    crossing = float(np.mean(np.any(np.diff(outs, axis=1) < 0.0, axis=1)))
    outs_sorted = np.sort(outs, axis=1)
    zero_cols = np.nonzero(np.all(outs_sorted == 0.0, axis=0))[0]
    if zero_cols.size:
        warnings.warn(
            f"corrected output column(s) {zero_cols.tolist()} are identically zero"
        )
    if diagnostics is not None:
        diagnostics["pre_sort_crossing_rate"] = crossing
        diagnostics["zero_columns"] = zero_cols.tolist()
    return EnsembleMatrix(mat.timestamps[spec.max_lag :], outs_sorted, True)


def save_checkpoint(params, path):
    """Write a versioned, bit-exact parameter container (.npz)."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "lags": list(params.lagspec.lags),
        "seed": int(params.seed),
        "train_history": params.train_history,
    }
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
        target_levels=params.target_levels,
        x_mean=params.x_mean,
        x_scale=params.x_scale,
        **params.tensors(),
    )


def load_checkpoint(path):
    """Inverse of save_checkpoint; round trip is bit-exact."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(
                f"unsupported checkpoint version {meta.get('format_version')}"
            )
        params = LstmParams(
            w_x=z["w_x"],
            w_h=z["w_h"],
            b_x=z["b_x"],
            b_h=z["b_h"],
            w_d1=z["w_d1"],
            b_d1=z["b_d1"],
            w_d2=z["w_d2"],
            b_d2=z["b_d2"],
            x_mean=z["x_mean"],
            x_scale=z["x_scale"],
            lagspec=LagSpec(tuple(meta["lags"])),
            target_levels=z["target_levels"],
            seed=meta["seed"],
            train_history=meta["train_history"],
        )
    return params
