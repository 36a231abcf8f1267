"""Survey table ingestion, cleaning, splitting and synthetic data generation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .scoring import INSTRUMENTS, N_ITEMS, SDS, STAI, ScoringSpec

NUMERIC = "numeric"
CATEGORICAL = "categorical"
TARGET = "target-item"
DROP = "drop"
KINDS = (NUMERIC, CATEGORICAL, TARGET, DROP)

TARGET_COLUMNS = [f"STAI_{i}" for i in range(1, N_ITEMS + 1)] + [
    f"SDS_{i}" for i in range(1, N_ITEMS + 1)
]
MISSING_MARKERS = frozenset({"", "NA", "N/A", "NaN", "nan", "null", "NULL", "None"})
NAMED_FEATURES = ("su_crave10", "su_crave3", "Covid_emo3", "Covid_emo4")


# ---------------------------------------------------------------------------
# Raw tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawTable:
    header: list
    rows: list

    def __post_init__(self):
        if len(set(self.header)) != len(self.header):
            seen = set()
            dup = next(h for h in self.header if h in seen or seen.add(h))
            raise DataError(f"duplicate column name {dup!r}")
        width = len(self.header)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise DataError(f"row {i + 1} has {len(row)} cells, expected {width}")

    def column(self, name):
        j = self.header.index(name)
        return [row[j] for row in self.rows]


def ingest_csv(path, delimiter: str = ",") -> RawTable:
    """Read an RFC-4180 CSV with a header line into a :class:`RawTable`.

    Whitespace around cells is trimmed; empty cells are kept as ``""``.
    Ragged rows raise :class:`DataError` naming the 1-based data row.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for lineno, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(
                    f"{path}: row {lineno} has {len(record)} cells, expected {len(header)}"
                )
            rows.append([c.strip() for c in record])
    return RawTable(header, rows)


def export_csv(table: RawTable, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(table.header)
        writer.writerows(table.rows)


def write_matrix_csv(path, header, values) -> None:
    """Write a numeric matrix with a header row; floats use round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in np.asarray(values):
            writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    levels: tuple = ()
    instrument: str | None = None
    item_index: int | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == CATEGORICAL:
            d["levels"] = list(self.levels)
        if self.kind == TARGET:
            d["instrument"] = self.instrument
            d["item_index"] = self.item_index
        return d


@dataclass(frozen=True)
class SchemaSpec:
    columns: tuple
    week_count: int = 10

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError("schema: duplicate column names")
        items = {inst: [] for inst in INSTRUMENTS}
        for c in self.columns:
            if c.kind not in KINDS:
                raise ConfigError(f"schema column {c.name!r}: unknown kind {c.kind!r}")
            if c.kind == CATEGORICAL:
                if not c.levels:
                    raise ConfigError(f"schema column {c.name!r}: empty level list")
                if len(set(c.levels)) != len(c.levels):
                    raise ConfigError(f"schema column {c.name!r}: duplicate levels")
            if c.kind == TARGET:
                if c.instrument not in INSTRUMENTS:
                    raise ConfigError(
                        f"schema column {c.name!r}: unknown instrument {c.instrument!r}"
                    )
                items[c.instrument].append(c.item_index)
        for inst, idx in items.items():
            if sorted(idx) != list(range(1, N_ITEMS + 1)):
                raise ConfigError(
                    f"schema: instrument {inst} needs item indices 1..{N_ITEMS} exactly once"
                )
        if self.week_count < 1:
            raise ConfigError("schema: week_count must be positive")

    @property
    def feature_columns(self):
        return [c for c in self.columns if c.kind in (NUMERIC, CATEGORICAL)]

    def by_name(self):
        return {c.name: c for c in self.columns}

    def to_dict(self) -> dict:
        return {"week_count": self.week_count, "columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaSpec":
        if not isinstance(d, dict) or "columns" not in d:
            raise ConfigError("schema: missing field 'columns'")
        unknown = set(d) - {"columns", "week_count"}
        if unknown:
            raise ConfigError(f"schema: unknown field {sorted(unknown)[0]!r}")
        cols = []
        for i, c in enumerate(d["columns"]):
            if "name" not in c or "kind" not in c:
                raise ConfigError(f"schema: columns[{i}] needs 'name' and 'kind'")
            cols.append(
                ColumnSpec(
                    name=c["name"],
                    kind=c["kind"],
                    levels=tuple(c.get("levels", ())),
                    instrument=c.get("instrument"),
                    item_index=c.get("item_index"),
                )
            )
        return cls(tuple(cols), int(d.get("week_count", 10)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SchemaSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# Matrices and preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    feature_names: list
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    def subset(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.values[np.asarray(idx)], self.feature_names, self.mean, self.std)

    def columns(self, names) -> np.ndarray:
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise DataError(f"unknown feature column {missing[0]!r}")
        return self.values[:, [self.feature_names.index(n) for n in names]]


@dataclass(frozen=True)
class TargetMatrix:
    values: np.ndarray
    columns: tuple = tuple(TARGET_COLUMNS)

    def subset(self, idx) -> "TargetMatrix":
        return TargetMatrix(self.values[np.asarray(idx)])


def _parse_float(text, column, row):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"column {column!r}, row {row}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"column {column!r}, row {row}: non-finite value {text!r}")
    return value


def preprocess(raw: RawTable, schema: SchemaSpec):
    """Clean and encode a raw survey table.

    Rows with a missing cell in any retained column are dropped (listwise
    deletion). Categorical cells become their 0-based level index.

    Returns ``(FeatureMatrix, TargetMatrix, kept_row_ids)``.
    """
    specs = schema.by_name()
    uncovered = [h for h in raw.header if h not in specs]
    if uncovered:
        raise ConfigError(f"schema does not cover column {uncovered[0]!r}")
    absent = [c.name for c in schema.columns if c.kind != DROP and c.name not in raw.header]
    if absent:
        raise DataError(f"column {absent[0]!r} declared in schema but absent from table")

    pos = {h: j for j, h in enumerate(raw.header)}
    features = schema.feature_columns
    feat_pos = [pos[c.name] for c in features]
    target_pos = []
    for name in TARGET_COLUMNS:
        inst, item = (STAI, int(name[5:])) if name.startswith("STAI_") else (SDS, int(name[4:]))
        col = next(c for c in schema.columns if c.kind == TARGET and c.instrument == inst
                   and c.item_index == item)
        target_pos.append(pos[col.name])
    level_maps = {c.name: {lv: float(i) for i, lv in enumerate(c.levels)} for c in features
                  if c.kind == CATEGORICAL}

    X, Y, kept = [], [], []
    retained = feat_pos + target_pos
    for r, row in enumerate(raw.rows):
        if any(row[j] in MISSING_MARKERS for j in retained):
            continue
        xrow = []
        for c, j in zip(features, feat_pos):
            cell = row[j]
            if c.kind == CATEGORICAL:
                try:
                    xrow.append(level_maps[c.name][cell])
                except KeyError:
                    raise DataError(f"column {c.name!r}: unknown level {cell!r}") from None
            else:
                xrow.append(_parse_float(cell, c.name, r))
        yrow = []
        for name, j in zip(TARGET_COLUMNS, target_pos):
            value = _parse_float(row[j], name, r)
            if not 1.0 <= value <= 4.0:
                raise DataError(f"column {raw.header[j]!r}, row {r}: item {value} outside [1, 4]")
            yrow.append(value)
        X.append(xrow)
        Y.append(yrow)
        kept.append(r)
    if not kept:
        raise DataError("preprocessing dropped every row")
    fm = FeatureMatrix(np.array(X, dtype=float).reshape(len(kept), len(features)),
                       [c.name for c in features])
    return fm, TargetMatrix(np.array(Y, dtype=float)), kept


# ---------------------------------------------------------------------------
# Splitting and standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train_idx: np.ndarray
    test_idx: np.ndarray
    val_idx: np.ndarray
    seed: int


def split(n_samples: int, ratios=(0.7, 0.2, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffle ``0..n-1`` and cut it into train/test/val parts.

    Test and validation sizes are floored (minimum one each); the training
    part absorbs the rounding remainder.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("split ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n_test = max(1, math.floor(n_samples * ratios[1] + 1e-9))
    n_val = max(1, math.floor(n_samples * ratios[2] + 1e-9))
    n_train = n_samples - n_test - n_val
    if n_train < 1:
        raise DataError(f"{n_samples} samples cannot fill three non-empty partitions")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return DatasetSplit(
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_test]),
        np.sort(perm[n_train + n_test:]),
        seed,
    )


def standardize(X: FeatureMatrix) -> FeatureMatrix:
    """Z-score each column with the population std.

    Constant columns become zeros and record ``std = 1``.
    """
    values = np.asarray(X.values, dtype=float)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return FeatureMatrix((values - mean) / std, list(X.feature_names), mean, std)


def apply_standardization(X: FeatureMatrix, mean, std) -> FeatureMatrix:
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    return FeatureMatrix((X.values - mean) / std, list(X.feature_names), mean, std)


def destandardize(X: FeatureMatrix) -> FeatureMatrix:
    if X.mean is None or X.std is None:
        raise DataError("matrix carries no standardization statistics")
    return FeatureMatrix(X.values * X.std + X.mean, list(X.feature_names))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_SYNTH_FIELDS = {
    "n_samples", "n_features", "n_categorical", "missing_rate",
    "planted_coefficients", "noise_std", "coef_scale", "intercept",
}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic survey generator.

    Items of each instrument load on one latent factor that is affine in the
    standardized features; ``coef_scale`` is the factor's standard deviation
    and item loadings are drawn from ``U(0.5, 1.5)``, negated on
    reverse-scored items so the factor always raises the score.

    ``planted_coefficients`` maps a feature name to per-instrument effects,
    e.g. ``{"su_crave10": {"stai": 0.3}}``. A scalar sets that feature's
    weight on the instrument factor; a 20-list sets the item coefficients
    verbatim.
    """

    n_samples: int = 1000
    n_features: int = 287
    n_categorical: int = 40
    missing_rate: float = 0.0
    planted_coefficients: dict = field(default_factory=dict)
    noise_std: float = 0.2
    coef_scale: float = 0.5
    intercept: float = 2.5

    def __post_init__(self):
        if not isinstance(self.n_samples, int) or self.n_samples < 1:
            raise ConfigError("n_samples: must be a positive integer")
        if not isinstance(self.n_features, int) or self.n_features < 1:
            raise ConfigError("n_features: must be a positive integer")
        if not isinstance(self.n_categorical, int) or not 0 <= self.n_categorical <= self.n_features:
            raise ConfigError("n_categorical: must be an integer in [0, n_features]")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("missing_rate: must lie in [0, 1)")
        if not self.noise_std >= 0:
            raise ConfigError("noise_std: must be non-negative")
        if not self.coef_scale >= 0:
            raise ConfigError("coef_scale: must be non-negative")
        if not isinstance(self.planted_coefficients, dict):
            raise ConfigError("planted_coefficients: expected an object")
        for name, effects in self.planted_coefficients.items():
            if not isinstance(effects, dict) or set(effects) - {"stai", "sds"}:
                raise ConfigError(
                    f"planted_coefficients: {name!r} needs an object with keys 'stai'/'sds'"
                )
            for key, eff in effects.items():
                if isinstance(eff, list):
                    if len(eff) != N_ITEMS:
                        raise ConfigError(
                            f"planted_coefficients: {name}.{key} needs {N_ITEMS} values")
                elif not isinstance(eff, (int, float)):
                    raise ConfigError(f"planted_coefficients: {name}.{key} must be a number")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        if not isinstance(d, dict):
            raise ConfigError("synthetic spec: expected a JSON object")
        unknown = set(d) - _SYNTH_FIELDS
        if unknown:
            raise ConfigError(f"synthetic spec: unknown field {sorted(unknown)[0]!r}")
        for key in ("n_samples", "n_features", "n_categorical"):
            if key in d and (isinstance(d[key], bool) or not isinstance(d[key], int)):
                raise ConfigError(f"{key}: must be an integer")
        for key in ("missing_rate", "noise_std", "coef_scale", "intercept"):
            if key in d and (isinstance(d[key], bool) or not isinstance(d[key], (int, float))):
                raise ConfigError(f"{key}: must be a number")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_features": self.n_features,
            "n_categorical": self.n_categorical,
            "missing_rate": self.missing_rate,
            "planted_coefficients": self.planted_coefficients,
            "noise_std": self.noise_std,
            "coef_scale": self.coef_scale,
            "intercept": self.intercept,
        }


@dataclass(frozen=True)
class SynthDataset:
    """Output of :func:`synth_generate` with its ground truth.

    ``latent = encoded @ coefficients + intercepts`` holds exactly, and
    target cells are ``clip(latent + noise, 1, 4)``.
    """

    table: RawTable
    schema: SchemaSpec
    encoded: np.ndarray  # complete encoded features, before missingness
    coefficients: np.ndarray  # n_features x 40, on encoded features
    intercepts: np.ndarray  # 40
    latent: np.ndarray  # n_samples x 40, pre-noise pre-clamp
    targets: np.ndarray  # n_samples x 40
    missing_mask: np.ndarray  # n_samples x n_features, True where blanked

    def planted_items(self, encoded) -> np.ndarray:
        """Noise-free clamped item values for encoded feature rows."""
        return np.clip(np.asarray(encoded) @ self.coefficients + self.intercepts, 1.0, 4.0)


def _feature_names(n_features, n_categorical):
    n_numeric = n_features - n_categorical
    names = list(NAMED_FEATURES[:n_numeric])
    names += [f"num_{j:03d}" for j in range(len(names), n_numeric)]
    names += [f"cat_{j:03d}" for j in range(n_categorical)]
    return names


def synth_generate(spec: SynthSpec, seed: int = 0) -> SynthDataset:
    """Generate a schema-compatible survey table with a planted item model."""
    rng = np.random.default_rng(seed)
    n, d, n_cat = spec.n_samples, spec.n_features, spec.n_categorical
    n_num = d - n_cat
    names = _feature_names(d, n_cat)
    unknown = [k for k in spec.planted_coefficients if k not in names]
    if unknown:
        raise ConfigError(f"planted_coefficients: unknown feature {unknown[0]!r}")

    level_counts = rng.integers(2, 6, size=n_cat)
    levels = [tuple(f"L{i}" for i in range(k)) for k in level_counts]
    encoded = np.empty((n, d))
    encoded[:, :n_num] = np.round(rng.standard_normal((n, n_num)), 6)
    for j, k in enumerate(level_counts):
        encoded[:, n_num + j] = rng.integers(0, k, size=n)

    # Coefficients are drawn for standardized features, then folded back
    # onto the encoded scale so latent stays affine in the encoded values.
    loc = np.zeros(d)
    scale = np.ones(d)
    for j, k in enumerate(level_counts):
        loc[n_num + j] = (k - 1) / 2.0
        scale[n_num + j] = math.sqrt((k * k - 1) / 12.0)
    # One latent factor per instrument: item coefficient = feature weight
    # times a signed item loading (negative on reverse-scored items).
    factor = rng.standard_normal((d, 2)) * (spec.coef_scale / math.sqrt(d))
    loadings = {}
    for k, (key, inst) in enumerate((("stai", STAI), ("sds", SDS))):
        sign = np.where(ScoringSpec.default(inst).reverse_mask(), -1.0, 1.0)
        loadings[key] = sign * rng.uniform(0.5, 1.5, size=N_ITEMS)
    for name, effects in spec.planted_coefficients.items():
        j = names.index(name)
        for key, eff in effects.items():
            if not isinstance(eff, list):
                factor[j, 0 if key == "stai" else 1] = float(eff)
    std_coef = np.hstack([np.outer(factor[:, 0], loadings["stai"]),
                          np.outer(factor[:, 1], loadings["sds"])])
    for name, effects in spec.planted_coefficients.items():
        j = names.index(name)
        for key, eff in effects.items():
            if isinstance(eff, list):
                cols = slice(0, N_ITEMS) if key == "stai" else slice(N_ITEMS, 2 * N_ITEMS)
                std_coef[j, cols] = np.asarray(eff, dtype=float)
    coefficients = std_coef / scale[:, None]
    intercepts = spec.intercept - loc @ coefficients
    latent = encoded @ coefficients + intercepts
    noise = rng.standard_normal((n, 2 * N_ITEMS)) * spec.noise_std
    targets = np.clip(latent + noise, 1.0, 4.0)

    missing = rng.random((n, d)) < spec.missing_rate

    header = ["participant_id"] + names + TARGET_COLUMNS
    rows = []
    for i in range(n):
        row = [f"P{i:06d}"]
        for j in range(d):
            if missing[i, j]:
                row.append("")
            elif j < n_num:
                row.append(repr(float(encoded[i, j])))
            else:
                row.append(levels[j - n_num][int(encoded[i, j])])
        row.extend(repr(float(v)) for v in targets[i])
        rows.append(row)

    cols = [ColumnSpec("participant_id", DROP)]
    cols += [ColumnSpec(nm, NUMERIC) for nm in names[:n_num]]
    cols += [ColumnSpec(nm, CATEGORICAL, levels[j]) for j, nm in enumerate(names[n_num:])]
    for name in TARGET_COLUMNS:
        inst, item = (STAI, int(name[5:])) if name.startswith("STAI_") else (SDS, int(name[4:]))
        cols.append(ColumnSpec(name, TARGET, instrument=inst, item_index=item))
    return SynthDataset(
        table=RawTable(header, rows),
        schema=SchemaSpec(tuple(cols)),
        encoded=encoded,
        coefficients=coefficients,
        intercepts=intercepts,
        latent=latent,
        targets=targets,
        missing_mask=missing,
    )
