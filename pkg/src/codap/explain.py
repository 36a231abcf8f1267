"""LIME-style local surrogate explanations for instrument scores.

Each feature is cut into training-set quantile bins. Perturbed samples keep
or resample every feature (resampled values come from a different bin), are
weighted by an exponential kernel on the binary keep-vector, and a weighted
ridge regression on that keep-vector gives one signed importance per
feature, attached to the instance's own bin category.
"""
from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigError, DataError, SingularSystemError
from .scoring import ScoringSpec, score_matrix

TARGETS = ("stai", "sds")


@dataclass(frozen=True)
class LimeConfig:
    n_perturbations: int = 5000
    kernel_width: float | None = None  # None means 0.75 * sqrt(d)
    n_bins: int = 4
    ridge_lambda: float = 1.0
    n_iterations: int = 10
    top_k: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError("n_bins: must be >= 2")
        if not self.ridge_lambda >= 0:
            raise ConfigError("ridge_lambda: must be >= 0")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ConfigError("kernel_width: must be positive")
        if self.n_iterations < 1 or self.top_k < 1:
            raise ConfigError("n_iterations and top_k must be >= 1")

    def width(self, d: int) -> float:
        return self.kernel_width if self.kernel_width is not None else 0.75 * math.sqrt(d)

    def check(self, d: int) -> None:
        if self.n_perturbations < d + 2:
            raise ConfigError(f"n_perturbations: need at least d + 2 = {d + 2}")

    def to_dict(self) -> dict:
        return {
            "n_perturbations": self.n_perturbations,
            "kernel_width": self.kernel_width,
            "n_bins": self.n_bins,
            "ridge_lambda": self.ridge_lambda,
            "n_iterations": self.n_iterations,
            "top_k": self.top_k,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LimeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"lime config: unknown field {sorted(unknown)[0]!r}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinnedFeature:
    feature: str
    feature_index: int
    bin_index: int
    label: str


def _format_edge(x):
    return f"{x:.2f}"


@dataclass(frozen=True)
class Binning:
    """Per-feature bin edges plus the training values that fall in each bin.

    Bin ``b`` of a feature with edges ``e`` is ``(e[b-1], e[b]]`` with open
    ends at both extremes, so every real maps to exactly one bin.
    """

    feature_names: tuple
    edges: tuple  # per feature: strictly increasing float array
    bin_values: tuple  # per feature: tuple of arrays, one per bin

    @property
    def n_features(self):
        return len(self.edges)

    def n_bins(self, j: int) -> int:
        return len(self.edges[j]) + 1

    def bin_of(self, j: int, x) -> np.ndarray:
        return np.searchsorted(self.edges[j], x, side="left")

    def assign(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.column_stack([self.bin_of(j, X[:, j]) for j in range(self.n_features)])

    def label(self, j: int, b: int) -> str:
        name, e = self.feature_names[j], self.edges[j]
        if len(e) == 0:
            return f"{name} (all values)"
        if b == 0:
            return f"{name} <= {_format_edge(e[0])}"
        if b == len(e):
            return f"{name} > {_format_edge(e[-1])}"
        return f"{_format_edge(e[b - 1])} < {name} <= {_format_edge(e[b])}"

    def category(self, j: int, b: int) -> BinnedFeature:
        return BinnedFeature(self.feature_names[j], j, int(b), self.label(j, b))


def _drop_empty_bins(col, edges):
    while True:
        counts = np.bincount(np.searchsorted(edges, col, side="left"), minlength=len(edges) + 1)
        empty = np.flatnonzero(counts == 0)
        if not len(empty):
            return edges
        b = empty[0]
        edges = np.delete(edges, b - 1 if b == len(edges) else b)


def discretize(X_train, n_bins: int = 4, feature_names=None) -> Binning:
    """Quantile bins at ``i / n_bins`` (linear interpolation) per feature.

    Duplicate edges are merged and edges leaving a bin without training
    values are removed, so a constant feature ends up with a single bin.
    """
    if hasattr(X_train, "feature_names"):
        feature_names = feature_names or X_train.feature_names
        X_train = X_train.values
    X = np.asarray(X_train, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("discretize needs a non-empty 2-D training matrix")
    if n_bins < 2:
        raise ConfigError("n_bins: must be >= 2")
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(X.shape[1])]
    qs = np.arange(1, n_bins) / n_bins
    edges, values = [], []
    for j in range(X.shape[1]):
        col = X[:, j]
        e = _drop_empty_bins(col, np.unique(np.quantile(col, qs)))
        assigned = np.searchsorted(e, col, side="left")
        edges.append(e)
        values.append(tuple(np.sort(col[assigned == b]) for b in range(len(e) + 1)))
    return Binning(tuple(feature_names), tuple(edges), tuple(values))


# ---------------------------------------------------------------------------
# Perturbation, kernel and surrogate
# ---------------------------------------------------------------------------


def perturb(instance, binning: Binning, n_perturbations: int, seed=0):
    """Sample ``(Z, X')`` around ``instance``.

    Row 0 is the instance itself. Elsewhere each feature is kept (``Z = 1``)
    with probability 1/2, otherwise replaced by a training value drawn
    uniformly from a uniformly chosen *other* bin. Features with a single
    bin have nothing to swap to and keep their value.
    """
    x = np.asarray(instance, dtype=float)
    d = binning.n_features
    if x.shape != (d,):
        raise DataError(f"instance has shape {x.shape}, expected ({d},)")
    rng = np.random.default_rng(seed)
    Z = (rng.random((n_perturbations, d)) < 0.5).astype(float)
    Z[0] = 1.0
    Xp = np.tile(x, (n_perturbations, 1))
    for j in range(d):
        nb = binning.n_bins(j)
        rows = np.flatnonzero(Z[:, j] == 0)
        if nb == 1 or not len(rows):
            continue
        own = int(binning.bin_of(j, x[j]))
        target_bins = (own + rng.integers(1, nb, size=len(rows))) % nb
        for b in range(nb):
            sel = rows[target_bins == b]
            if len(sel):
                pool = binning.bin_values[j][b]
                Xp[sel, j] = pool[rng.integers(0, len(pool), size=len(sel))]
    return Z, Xp


def kernel_weight(z_row, width: float) -> float:
    """``exp(-D^2 / width^2)`` with ``D`` the distance to the all-ones vector."""
    if not width > 0:
        raise ConfigError("kernel width must be positive")
    z = np.asarray(z_row, dtype=float)
    return float(np.exp(-np.sum((1.0 - z) ** 2) / width ** 2))


def kernel_weights(Z, width: float) -> np.ndarray:
    if not width > 0:
        raise ConfigError("kernel width must be positive")
    Z = np.asarray(Z, dtype=float)
    return np.exp(-np.sum((1.0 - Z) ** 2, axis=1) / width ** 2)


def fit_local_surrogate(Z, weights, y, ridge_lambda: float = 1.0):
    """Weighted ridge regression with an unpenalized intercept.

    Minimises ``sum_i w_i (y_i - b0 - beta.z_i)^2 + lambda |beta|^2`` through
    a Cholesky factorization of the normal equations. ``y`` may be a vector
    or an ``n x t`` matrix of targets sharing one factorization.

    Returns ``(coefficients, intercept)``.
    """
    Z = np.asarray(Z, dtype=float)
    w = np.asarray(weights, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = Z.shape
    if w.shape != (n,) or y.shape[0] != n:
        raise DataError("Z, weights and y must share the sample dimension")
    if np.any(w < 0) or not np.any(w > 0):
        raise DataError("weights must be non-negative and not all zero")
    if ridge_lambda < 0:
        raise ConfigError("ridge_lambda: must be >= 0")
    A = np.hstack([np.ones((n, 1)), Z])
    Aw = A * w[:, None]
    G = A.T @ Aw
    G[np.arange(1, d + 1), np.arange(1, d + 1)] += ridge_lambda
    rhs = Aw.T @ y
    try:
        factor = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError:
        raise SingularSystemError("surrogate normal equations are not positive definite") from None
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= np.sqrt(np.finfo(float).eps) * diag.max():
        raise SingularSystemError("surrogate normal equations are numerically singular")
    sol = linalg.cho_solve(factor, rhs)
    return sol[1:], sol[0]


@dataclass(frozen=True)
class Explanation:
    target: str
    features: tuple  # (BinnedFeature, weight) for every feature
    intercept: float
    local_fit_r2: float

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.features])


def _weighted_r2(y, pred, w):
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = np.sum(w * (y - ybar) ** 2)
    ss_res = np.sum(w * (y - pred) ** 2)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return float(1.0 - ss_res / ss_tot)


def _scoring_pair(scoring):
    if scoring is None:
        return ScoringSpec.default("STAI-S"), ScoringSpec.default("SDS")
    return tuple(scoring)


def _explain_targets(model, scoring, instance, binning, config, seed):
    d = binning.n_features
    config.check(d)
    stai_spec, sds_spec = _scoring_pair(scoring)
    Z, Xp = perturb(instance, binning, config.n_perturbations, seed)
    with np.errstate(over="ignore", invalid="ignore"):
        stai, sds = score_matrix(model(Xp), stai_spec, sds_spec)
    y = np.column_stack([stai, sds])
    w = kernel_weights(Z, config.width(d))
    coef, intercept = fit_local_surrogate(Z, w, y, config.ridge_lambda)
    pred = coef.T @ Z.T + intercept[:, None]
    x = np.asarray(instance, dtype=float)
    cats = [binning.category(j, binning.bin_of(j, x[j])) for j in range(d)]
    out = {}
    for t_i, target in enumerate(TARGETS):
        out[target] = Explanation(
            target,
            tuple((c, float(coef[j, t_i])) for j, c in enumerate(cats)),
            float(intercept[t_i]),
            _weighted_r2(y[:, t_i], pred[t_i], w),
        )
    return out


def explain_instance(model, scoring, instance, target: str, binning: Binning,
                     config: LimeConfig = LimeConfig(), seed=None) -> Explanation:
    """Explain one total score of one instance.

    ``model`` is any callable mapping an ``n x d`` matrix to ``n x 40`` item
    predictions (an :class:`~codap.nn.MlpModel` works directly); ``scoring``
    is a ``(stai_spec, sds_spec)`` pair or ``None`` for the defaults.
    """
    if target not in TARGETS:
        raise ConfigError(f"target: expected one of {TARGETS}, got {target!r}")
    seed = config.seed if seed is None else seed
    # both targets share one solve, exactly as in ``aggregate``
    return _explain_targets(model, scoring, instance, binning, config, seed)[target]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregateRow:
    rank: int
    feature: str
    bin_index: int
    bin_label: str
    color_group: str
    mean_importance: float
    sign: int
    n_observations: int


@dataclass(frozen=True)
class AggregateReport:
    """Top-``k`` (feature, bin) categories by absolute mean importance.

    ``iteration_weights[it, i, j]`` is the weight of feature ``j`` for instance
    ``i`` in iteration ``it``; ``instance_bins[i, j]`` is that instance's bin.
    Instances are stored in canonical (content-hash) order.
    """

    target: str
    rows: tuple
    iteration_weights: np.ndarray
    instance_bins: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "feature", "bin_label", "color_group", "mean_importance",
                        "sign", "n_observations"])
            for r in self.rows:
                w.writerow([r.rank, r.feature, r.bin_label, r.color_group,
                            repr(r.mean_importance), r.sign, r.n_observations])

    def write_dump(self, path, feature_names) -> None:
        """Long-form per-iteration weights, one row per (iteration, instance, feature)."""
        n_iter, n_inst, d = self.iteration_weights.shape
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "instance", "feature", "bin_index", "weight"])
            for it in range(n_iter):
                for i in range(n_inst):
                    for j in range(d):
                        w.writerow([it, i, feature_names[j], int(self.instance_bins[i, j]),
                                    repr(float(self.iteration_weights[it, i, j]))])


def instance_key(instance) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(instance, dtype=np.float64).tobytes()).digest()


def instance_seed(base_seed: int, iteration: int, key: bytes) -> np.random.SeedSequence:
    words = [int.from_bytes(key[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence([(base_seed ^ iteration) & 0xFFFFFFFFFFFFFFFF, *words])


_WORKER = {}


def _worker_init(model, scoring, binning, config):
    _WORKER.update(model=model, scoring=scoring, binning=binning, config=config)


def _worker_run(task):
    instance, seed = task
    w = _WORKER
    res = _explain_targets(w["model"], w["scoring"], instance, w["binning"], w["config"], seed)
    return tuple(res[t].weights for t in TARGETS)


def aggregate(model, scoring, X_test, binning: Binning, config: LimeConfig = LimeConfig(),
              jobs: int = 1):
    """Average importances over ``n_iterations`` passes over ``X_test``.

    Iteration ``it`` explains instance ``x`` with a seed derived from
    ``config.seed ^ it`` and a hash of ``x``, so results do not depend on
    instance order or worker count. Returns ``(stai_report, sds_report)``.
    """
    X = np.asarray(getattr(X_test, "values", X_test), dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("aggregate needs a non-empty test matrix")
    keys = [instance_key(x) for x in X]
    order = sorted(range(len(X)), key=lambda i: keys[i])
    X = X[order]
    keys = [keys[i] for i in order]
    bins = binning.assign(X)
    tasks = [(X[i], instance_seed(config.seed, it, keys[i]))
             for it in range(config.n_iterations) for i in range(len(X))]
    if jobs <= 1:
        _worker_init(model, scoring, binning, config)
        results = [_worker_run(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                                 initargs=(model, scoring, binning, config)) as pool:
            results = list(pool.map(_worker_run, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    reports = []
    for t_i, target in enumerate(TARGETS):
        weights = np.array([r[t_i] for r in results]).reshape(config.n_iterations, len(X), -1)
        reports.append(_build_report(target, weights, bins, binning, config.top_k))
    return tuple(reports)


def _build_report(target, weights, bins, binning, top_k):
    groups = {}
    n_iter, n_inst, d = weights.shape
    for i in range(n_inst):
        for j in range(d):
            groups.setdefault((j, int(bins[i, j])), []).extend(weights[:, i, j].tolist())
    stats = [(j, b, math.fsum(v) / len(v), len(v)) for (j, b), v in groups.items()]
    stats.sort(key=lambda s: (-abs(s[2]), s[0], s[1]))
    rows = []
    for rank, (j, b, mean, count) in enumerate(stats[:top_k], start=1):
        name = binning.feature_names[j]
        rows.append(AggregateRow(rank, name, b, binning.label(j, b), name, mean,
                                 int(np.sign(mean)), count))
    return AggregateReport(target, tuple(rows), weights, bins)
