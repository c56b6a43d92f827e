"""Quantile regression forest and quantile gradient boosting baselines.

Both models wrap scikit-learn regression trees (variance-reduction splits)
and add the quantile machinery on top:

* The forest keeps, per tree and leaf, the bootstrap-drawn training
  responses with multiplicity.  A query's weight on training point i is
  the average over trees of (draws of i in the query's leaf) / (all draws
  in that leaf), which sums to one by construction.  Quantiles come from
  the weighted empirical distribution, inf{y : F(y|x) >= tau}.

* Boosting starts from the empirical tau-quantile, fits shallow trees to
  the pinball pseudo-residuals (tau above the current fit, tau-1 at or
  below), and picks one global step size per stage by golden-section
  search on the training check loss before applying shrinkage.  The check
  loss is convex along the search ray and 0 is inside the bracket, so the
  training loss never increases stage over stage.
"""

import pickle
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .core import check_loss, empirical_quantile
from .exceptions import ContractError, DomainError

MODEL_FORMAT_VERSION = 1


def _as_2d(x, n_features=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ContractError("feature input must be 1-d or 2-d")
    if n_features is not None and x.shape[1] != n_features:
        raise ContractError(
            f"query has {x.shape[1]} features, model expects {n_features}"
        )
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite feature value")
    return x


def _check_xy(x, y):
    x = _as_2d(x)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise ContractError("y must have one value per row of X")
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite response value")
    if x.shape[0] < 2:
        raise ContractError("need at least two training rows")
    return x, y


# ---------------------------------------------------------------------------
# Quantile regression forest


@dataclass
class QrfConfig:
    n_trees: int = 100
    max_depth: int = None          # None = grow out
    min_leaf: int = 5
    max_features: int = None       # None = ceil(sqrt(F))
    seed: int = 0


@dataclass
class ForestModel:
    trees: list                    # fitted trees; None = single-leaf stump
    leaf_maps: list                # per tree: {leaf_id: (orig_idx, weights)}
    y: np.ndarray                  # training responses
    y_order: np.ndarray            # argsort(y)
    n_features: int
    seeds: list
    config: QrfConfig = field(default=None)


def qrf_fit(x, y, config=None):
    """Grow bootstrap trees whose leaves retain the drawn responses."""
    config = config if config is not None else QrfConfig()
    x, y = _check_xy(x, y)
    n, f = x.shape
    if config.n_trees < 1:
        raise DomainError("need at least one tree")
    max_features = (
        config.max_features
        if config.max_features is not None
        else int(np.ceil(np.sqrt(f)))
    )
    rng = np.random.default_rng(config.seed)
    trees, leaf_maps, seeds = [], [], []
    for _ in range(config.n_trees):
        tree_seed = int(rng.integers(2**31 - 1))
        seeds.append(tree_seed)
        idx = rng.integers(0, n, size=n)
        if config.max_depth is not None and config.max_depth == 0:
            tree = None
            leaf_ids = np.zeros(n, dtype=np.int64)
        else:
            tree = DecisionTreeRegressor(
                criterion="squared_error",
                max_depth=config.max_depth,
                min_samples_leaf=config.min_leaf,
                max_features=min(max_features, f),
                random_state=tree_seed,
            )
            tree.fit(x[idx], y[idx])
            leaf_ids = tree.apply(x[idx])
        lmap = {}
        order = np.argsort(leaf_ids, kind="stable")
        uniq, starts = np.unique(leaf_ids[order], return_index=True)
        bounds = np.append(starts, n)
        for leaf, a, b in zip(uniq, bounds[:-1], bounds[1:]):
            draws = idx[order[a:b]]
            orig, cnt = np.unique(draws, return_counts=True)
            lmap[int(leaf)] = (orig, cnt / cnt.sum())
        trees.append(tree)
        leaf_maps.append(lmap)
    return ForestModel(
        trees=trees,
        leaf_maps=leaf_maps,
        y=y,
        y_order=np.argsort(y, kind="stable"),
        n_features=f,
        seeds=seeds,
        config=config,
    )


def qrf_weights(model, x):
    """Training-point weight vectors for query rows; each row sums to 1."""
    xq = _as_2d(x, model.n_features)
    nq = xq.shape[0]
    n = model.y.size
    w = np.zeros((nq, n))
    for tree, lmap in zip(model.trees, model.leaf_maps):
        leafs = (
            tree.apply(xq) if tree is not None else np.zeros(nq, dtype=np.int64)
        )
        for r in range(nq):
            orig, ww = lmap[int(leafs[r])]
            w[r, orig] += ww
    w /= len(model.trees)
    return w


def _weighted_quantiles(model, w, taus):
    """inf{y : F(y|x) >= tau} from a weight row over training responses."""
    cw = np.cumsum(w[model.y_order])
    ys = model.y[model.y_order]
    out = np.empty(len(taus))
    for j, tau in enumerate(taus):
        k = int(np.searchsorted(cw, tau - 1e-12, side="left"))
        out[j] = ys[min(k, ys.size - 1)]
    return out


def qrf_predict(model, x, tau):
    """Quantile prediction for one query row (or a batch) at one level."""
    taus = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if np.any((taus <= 0) | (taus >= 1)):
        raise DomainError("tau must be in (0, 1)")
    w = qrf_weights(model, x)
    vals = np.stack([_weighted_quantiles(model, row, taus) for row in w])
    if np.isscalar(tau) or np.ndim(tau) == 0:
        vals = vals[:, 0]
    if np.asarray(x).ndim == 1:
        return float(vals[0]) if vals.ndim == 1 else vals[0]
    return vals


def qrf_predict_levels(model, x, levels):
    """(n_queries, n_levels) quantile matrix; levels need not be sorted."""
    lv = np.asarray(levels, dtype=np.float64)
    if np.any((lv <= 0) | (lv >= 1)):
        raise DomainError("levels must be in (0, 1)")
    w = qrf_weights(model, x)
    return np.stack([_weighted_quantiles(model, row, lv) for row in w])


# ---------------------------------------------------------------------------
# Quantile gradient boosting


@dataclass
class BoostConfig:
    n_stages: int = 50
    learning_rate: float = 0.1
    max_depth: int = 3
    min_leaf: int = 5
    seed: int = 0
    rho_max: float = 10.0
    leaf_update: bool = False      # per-leaf quantile steps instead of one rho


@dataclass
class BoostModel:
    f0: float
    tau: float
    stages: list                   # (tree, rho_effective) or (tree, leaf dict)
    n_features: int
    train_losses: list             # check loss after each stage, index 0 = F0
    config: BoostConfig = field(default=None)
    leaf_update: bool = False


def _check_loss_sum(residuals, tau):
    return float(np.sum(check_loss(residuals, tau)))


def _golden_rho(fun, lo, hi, iters=60):
    """Golden-section minimizer for a convex 1-d function on [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fun(d)
    mid = 0.5 * (a + b)
    return mid, fun(mid)


def qgb_fit(x, y, tau, config=None):
    """Stagewise quantile boosting; training loss is monotone nonincreasing."""
    config = config if config is not None else BoostConfig()
    x, y = _check_xy(x, y)
    if not 0.0 < tau < 1.0:
        raise DomainError("tau must be in (0, 1)")
    n, f = x.shape
    f0 = empirical_quantile(y, tau)
    fit = np.full(n, f0)
    losses = [_check_loss_sum(y - fit, tau)]
    stages = []
    for m in range(config.n_stages):
        g = np.where(y > fit, tau, tau - 1.0)
        tree = DecisionTreeRegressor(
            criterion="squared_error",
            max_depth=config.max_depth,
            min_samples_leaf=config.min_leaf,
            random_state=config.seed + m,
        )
        tree.fit(x, g)
        if config.leaf_update:
            # per-leaf tau-quantile of current residuals, then shrinkage
            leafs = tree.apply(x)
            values = {}
            for leaf in np.unique(leafs):
                sel = leafs == leaf
                values[int(leaf)] = empirical_quantile(y[sel] - fit[sel], tau)
            step = config.learning_rate * np.array(
                [values[int(l)] for l in leafs]
            )
            fit = fit + step
            stages.append((tree, values))
        else:
            h = tree.predict(x)

            def loss_at(rho):
                return _check_loss_sum(y - (fit + rho * h), tau)

            rho, _ = _golden_rho(loss_at, 0.0, config.rho_max)
            if loss_at(0.0) <= loss_at(rho):
                rho = 0.0
            if rho > config.rho_max * (1.0 - 1e-6):
                warnings.warn(
                    f"stage {m + 1}: line search hit the bracket edge "
                    f"rho={config.rho_max}; clamped"
                )
                rho = config.rho_max
            rho_eff = config.learning_rate * rho
            fit = fit + rho_eff * h
            stages.append((tree, rho_eff))
        losses.append(_check_loss_sum(y - fit, tau))
    return BoostModel(
        f0=float(f0),
        tau=float(tau),
        stages=stages,
        n_features=f,
        train_losses=losses,
        config=config,
        leaf_update=config.leaf_update,
    )


def qgb_predict(model, x):
    """Additive evaluation F_0 + sum of stage contributions."""
    single = np.asarray(x).ndim == 1
    xq = _as_2d(x, model.n_features)
    out = np.full(xq.shape[0], model.f0)
    for tree, step in model.stages:
        if model.leaf_update:
            leafs = tree.apply(xq)
            lr = model.config.learning_rate if model.config else 0.1
            out += lr * np.array([step[int(l)] for l in leafs])
        else:
            if step != 0.0:
                out += step * tree.predict(xq)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Versioned checkpoint files (pickle container; trees are sklearn objects)


def save_model(model, path):
    kind = "qrf" if isinstance(model, ForestModel) else "qgb"
    with open(path, "wb") as fh:
        pickle.dump(
            {"format_version": MODEL_FORMAT_VERSION, "kind": kind, "model": model},
            fh,
        )


def load_model(path):
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if blob.get("format_version") != MODEL_FORMAT_VERSION:
        raise ContractError(
            f"unsupported model checkpoint version {blob.get('format_version')}"
        )
    return blob["model"]
