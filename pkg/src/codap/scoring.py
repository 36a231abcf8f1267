"""Instrument scoring for the STAI-S and SDS questionnaires.

Both instruments have 20 items answered on a 1-4 scale. Positively worded
items are reverse-scored as ``item_min + item_max - response`` before the
raw total is summed, so totals always lie in ``[20, 80]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

STAI = "STAI-S"
SDS = "SDS"
INSTRUMENTS = (STAI, SDS)
N_ITEMS = 20

# Published reverse-scored (positively worded) items.
DEFAULT_REVERSE_ITEMS = {
    STAI: frozenset({1, 2, 5, 8, 10, 11, 15, 16, 19, 20}),
    SDS: frozenset({2, 5, 6, 11, 12, 14, 16, 17, 18, 20}),
}


@dataclass(frozen=True)
class ScoringSpec:
    instrument: str
    reverse_items: frozenset = field(default_factory=frozenset)
    item_min: float = 1.0
    item_max: float = 4.0

    def __post_init__(self):
        if self.instrument not in INSTRUMENTS:
            raise ConfigError(f"instrument: unknown instrument {self.instrument!r}")
        items = frozenset(int(i) for i in self.reverse_items)
        bad = sorted(i for i in items if not 1 <= i <= N_ITEMS)
        if bad:
            raise ConfigError(f"reverse_items: indices {bad} outside 1..{N_ITEMS}")
        if not self.item_min < self.item_max:
            raise ConfigError("item_min must be below item_max")
        object.__setattr__(self, "reverse_items", items)

    @classmethod
    def default(cls, instrument: str) -> "ScoringSpec":
        return cls(instrument, DEFAULT_REVERSE_ITEMS[instrument])

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringSpec":
        unknown = set(d) - {"instrument", "reverse_items", "item_min", "item_max"}
        if unknown:
            raise ConfigError(f"scoring spec: unknown field {sorted(unknown)[0]!r}")
        if "instrument" not in d:
            raise ConfigError("scoring spec: missing field 'instrument'")
        reverse = d.get("reverse_items", DEFAULT_REVERSE_ITEMS.get(d["instrument"], ()))
        if not isinstance(reverse, (list, tuple, set, frozenset)):
            raise ConfigError("reverse_items: expected a list of item indices")
        return cls(
            d["instrument"],
            frozenset(reverse),
            float(d.get("item_min", 1.0)),
            float(d.get("item_max", 4.0)),
        )

    def to_dict(self) -> dict:
        return {
            "instrument": self.instrument,
            "reverse_items": sorted(self.reverse_items),
            "item_min": self.item_min,
            "item_max": self.item_max,
        }

    def reverse_mask(self) -> np.ndarray:
        """Boolean mask over the 20 item positions (0-based) that are reversed."""
        mask = np.zeros(N_ITEMS, dtype=bool)
        for i in self.reverse_items:
            mask[i - 1] = True
        return mask


@dataclass(frozen=True)
class InstrumentScore:
    raw_total: float
    instrument: str


def score_items(responses, spec: ScoringSpec) -> InstrumentScore:
    """Raw total of one 20-item response vector."""
    r = np.asarray(responses, dtype=float)
    if r.shape != (N_ITEMS,):
        raise DataError(f"expected {N_ITEMS} responses, got shape {r.shape}")
    for i, value in enumerate(r, start=1):
        if not spec.item_min <= value <= spec.item_max:
            raise DataError(
                f"{spec.instrument} item {i}: response {value} outside "
                f"[{spec.item_min}, {spec.item_max}]"
            )
    total = 0.0
    for i, value in enumerate(r, start=1):
        if i in spec.reverse_items:
            total += spec.item_min + spec.item_max - value
        else:
            total += value
    return InstrumentScore(total, spec.instrument)


def score_predictions(output, stai_spec: ScoringSpec, sds_spec: ScoringSpec):
    """Clamp a 40-vector of item predictions and score both instruments."""
    out = np.asarray(output, dtype=float)
    if out.shape != (2 * N_ITEMS,):
        raise DataError(f"expected {2 * N_ITEMS} outputs, got shape {out.shape}")
    stai = np.clip(out[:N_ITEMS], stai_spec.item_min, stai_spec.item_max)
    sds = np.clip(out[N_ITEMS:], sds_spec.item_min, sds_spec.item_max)
    return score_items(stai, stai_spec), score_items(sds, sds_spec)


def score_matrix(items, stai_spec: ScoringSpec, sds_spec: ScoringSpec):
    """Vectorised ``score_predictions`` over rows of an ``n x 40`` array.

    Returns two length-``n`` arrays of raw totals (STAI-S, SDS).
    """
    Y = np.asarray(items, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != 2 * N_ITEMS:
        raise DataError(f"expected n x {2 * N_ITEMS} item matrix, got shape {Y.shape}")
    totals = []
    for block, spec in ((Y[:, :N_ITEMS], stai_spec), (Y[:, N_ITEMS:], sds_spec)):
        clamped = np.clip(block, spec.item_min, spec.item_max)
        flipped = np.where(spec.reverse_mask(), spec.item_min + spec.item_max - clamped, clamped)
        totals.append(flipped.sum(axis=1))
    return totals[0], totals[1]
