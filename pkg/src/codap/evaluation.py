"""K-fold cross-validation, hyperparameter sweeps and held-out metrics."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, DivergenceError
from .nn import TrainConfig, forward, mse_loss, train
from .scoring import ScoringSpec, score_matrix

# Grids from the published learning-rate and width tables.
DEFAULT_LR_GRID = (0.1, 0.05, 0.01, 0.005, 0.001)
DEFAULT_WIDTH_GRID = (10, 50, 100, 150, 200)
AXES = ("learning_rate", "hidden_width")


@dataclass(frozen=True)
class CvConfig:
    k: int = 5
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 2:
            raise ConfigError("k: must be an integer >= 2")

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "train": self.train.to_dict()}


@dataclass(frozen=True)
class CvReport:
    fold_mse: tuple
    average_mse: float

    @classmethod
    def from_folds(cls, fold_mse) -> "CvReport":
        folds = tuple(float(v) for v in fold_mse)
        if not folds:
            raise DataError("need at least one fold value")
        return cls(folds, sum(folds) / len(folds))

    @property
    def k(self):
        return len(self.fold_mse)

    def to_dict(self) -> dict:
        return {"fold_mse": list(self.fold_mse), "average_mse": self.average_mse}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Round"] + [str(i + 1) for i in range(self.k)] + ["Average"])
            w.writerow(["MSE"] + [repr(v) for v in self.fold_mse] + [repr(self.average_mse)])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class SweepReport:
    axis: str
    grid: tuple
    average_mse: tuple
    fold_mse: tuple  # per grid point; empty tuple where training diverged
    argmin: object

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "grid": list(self.grid),
            "average_mse": [v if math.isfinite(v) else "inf" for v in self.average_mse],
            "fold_mse": [list(f) for f in self.fold_mse],
            "argmin": self.argmin,
        }

    def write_csv(self, path) -> None:
        k = max((len(f) for f in self.fold_mse), default=0)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.axis, "average_mse"] + [f"fold_{i + 1}" for i in range(k)]
                       + ["argmin"])
            for value, avg, folds in zip(self.grid, self.average_mse, self.fold_mse):
                cells = [repr(v) for v in folds] + ["inf"] * (k - len(folds))
                w.writerow([repr(value), repr(avg)] + cells + [int(value == self.argmin)])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def kfold_partition(n: int, k: int, seed: int = 0) -> list:
    """Seeded shuffle of ``0..n-1`` cut into ``k`` contiguous folds.

    The first ``n mod k`` folds hold one extra element.
    """
    if k < 2:
        raise ConfigError("k: must be >= 2")
    if k > n:
        raise ConfigError(f"k={k} exceeds the {n} available samples")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(np.sort(perm[start:start + size]))
        start += size
    return folds


def _run_fold(args):
    i, X, Y, train_idx, val_idx, config = args
    fold_config = replace(config, seed=config.seed ^ i)
    try:
        model, _ = train(X[train_idx], Y[train_idx], fold_config)
    except DivergenceError as exc:
        raise DivergenceError(exc.epoch, exc.loss, fold=i + 1) from None
    with np.errstate(over="ignore", invalid="ignore"):
        mse = mse_loss(forward(model, X[val_idx]), Y[val_idx])
    if not math.isfinite(mse):
        raise DivergenceError(config.epochs, mse, fold=i + 1)
    return mse


def _map(fn, jobs_args, jobs):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=min(jobs, len(jobs_args))) as pool:
        return list(pool.map(fn, jobs_args))


def cross_validate(X, Y, config: CvConfig = CvConfig(), jobs: int = 1) -> CvReport:
    """Train a fresh model per fold and report held-out item-level MSE.

    Fold ``i`` (0-based) trains with seed ``config.train.seed ^ i``, so the
    report does not depend on ``jobs``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise DataError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    folds = kfold_partition(X.shape[0], config.k, config.seed)
    tasks = []
    for i, val_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        tasks.append((i, X, Y, train_idx, val_idx, config.train))
    return CvReport.from_folds(_map(_run_fold, tasks, jobs))


def _grid_config(base: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "learning_rate":
        return replace(base, learning_rate=float(value))
    width = int(value)
    return replace(base, hidden=(width,) * len(base.hidden))


def sweep(X, Y, axis: str = "learning_rate", grid=None, base: CvConfig = CvConfig(),
          jobs: int = 1) -> SweepReport:
    """Cross-validate every grid point; diverged points score ``inf``."""
    if axis not in AXES:
        raise ConfigError(f"axis: expected one of {AXES}, got {axis!r}")
    if grid is None:
        grid = DEFAULT_LR_GRID if axis == "learning_rate" else DEFAULT_WIDTH_GRID
    grid = tuple(grid)
    if not grid:
        raise ConfigError("grid: must not be empty")
    averages, folds = [], []
    # Folds run in parallel inside each point; points stay sequential.
    for value in grid:
        cfg = replace(base, train=_grid_config(base.train, axis, value))
        try:
            report = cross_validate(X, Y, cfg, jobs=jobs)
        except DivergenceError:
            averages.append(math.inf)
            folds.append(())
            continue
        averages.append(report.average_mse)
        folds.append(report.fold_mse)
    finite = [i for i, v in enumerate(averages) if math.isfinite(v)]
    argmin = grid[min(finite, key=lambda i: averages[i])] if finite else None
    return SweepReport(axis, grid, tuple(averages), tuple(folds), argmin)


@dataclass(frozen=True)
class Evaluation:
    item_mse: float
    stai_score_mse: float
    sds_score_mse: float

    def to_dict(self) -> dict:
        return {"item_mse": self.item_mse, "stai_score_mse": self.stai_score_mse,
                "sds_score_mse": self.sds_score_mse}


def evaluate(model, X, Y, stai_spec: ScoringSpec | None = None,
             sds_spec: ScoringSpec | None = None) -> Evaluation:
    """Item-level MSE plus MSE of the derived instrument totals."""
    stai_spec = stai_spec or ScoringSpec.default("STAI-S")
    sds_spec = sds_spec or ScoringSpec.default("SDS")
    pred = model(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if pred.shape != Y.shape:
        raise DataError(f"prediction shape {pred.shape} does not match target {Y.shape}")
    p_stai, p_sds = score_matrix(pred, stai_spec, sds_spec)
    t_stai, t_sds = score_matrix(Y, stai_spec, sds_spec)
    return Evaluation(
        mse_loss(pred, Y),
        float(np.mean((p_stai - t_stai) ** 2)),
        float(np.mean((p_sds - t_sds) ** 2)),
    )


def correlation_matrix(X, columns=None) -> np.ndarray:
    """Pearson correlations between selected columns.

    ``X`` is a :class:`~codap.data.FeatureMatrix` (``columns`` are names) or
    a plain 2-D array (``columns`` are indices). Zero-variance columns get
    zero off-diagonal entries; the diagonal is exactly one.
    """
    if hasattr(X, "feature_names"):
        names = list(X.feature_names) if columns is None else list(columns)
        values = X.columns(names)
    else:
        values = np.asarray(X, dtype=float)
        if columns is not None:
            values = values[:, list(columns)]
    if values.ndim != 2 or values.shape[0] < 2:
        raise DataError("correlation needs at least two rows")
    constant = np.ptp(values, axis=0) == 0
    centered = values - values.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    unit = centered / np.where(constant, 1.0, norms)
    corr = unit.T @ unit
    corr = 0.5 * (corr + corr.T)
    corr[:, constant] = 0.0
    corr[constant, :] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr
