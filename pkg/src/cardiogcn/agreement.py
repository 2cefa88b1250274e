"""Inter-model agreement gate: threshold classes, histograms, sampling and frame filtering.

Class boundaries are inclusive on the outside: a Dice at or below ``low`` is
Low, at or above ``high`` is High, anything strictly between is Mid.
"""
from dataclasses import dataclass, asdict

import numpy as np

from .errors import InsufficientRecords, OutOfRange

LOW, MID, HIGH = "Low", "Mid", "High"
_ORDER = {LOW: 0, MID: 1, HIGH: 2}


@dataclass(frozen=True)
class AgreementConfig:
    low_threshold: float = 0.8
    high_threshold: float = 0.9
    filter_threshold: float = 0.85
    bin_width: float = 0.01

    def __post_init__(self):
        if not 0 <= self.low_threshold <= self.filter_threshold <= self.high_threshold <= 1:
            raise ValueError("thresholds must satisfy 0 <= low <= filter <= high <= 1")
        if not 0 < self.bin_width <= 1:
            raise ValueError("bin width must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AgreementRecord:
    frame_id: str
    inter_model_dice: float
    cls: str
    retained: bool

    def to_dict(self):
        return {"frame_id": self.frame_id, "inter_model_dice": self.inter_model_dice,
                "class": self.cls, "retained": self.retained}


def classify(dice, cfg=None):
    cfg = cfg or AgreementConfig()
    if not 0.0 <= dice <= 1.0:
        raise OutOfRange(f"Dice {dice} outside [0, 1]")
    if dice <= cfg.low_threshold:
        return LOW
    if dice >= cfg.high_threshold:
        return HIGH
    return MID


def class_rank(cls):
    return _ORDER[cls]


def make_records(frame_ids, dices, cfg=None):
    cfg = cfg or AgreementConfig()
    return [AgreementRecord(str(f), float(d), classify(d, cfg), bool(d >= cfg.filter_threshold))
            for f, d in zip(frame_ids, dices)]


def histogram(dices, bin_width=0.01):
    """``(edges, counts)`` over [0, 1]; the value 1.0 falls in the last bin."""
    n_bins = int(round(1.0 / bin_width))
    edges = np.linspace(0.0, n_bins * bin_width, n_bins + 1)
    counts = np.zeros(n_bins, dtype=np.int64)
    d = np.asarray(dices, dtype=np.float64).ravel()
    if d.size:
        if d.min() < 0 or d.max() > 1:
            raise OutOfRange("histogram values must lie in [0, 1]")
        # the small guard keeps values such as 0.29 out of the bin below
        idx = np.clip(np.floor(d / bin_width + 1e-9).astype(np.int64), 0, n_bins - 1)
        np.add.at(counts, idx, 1)
    return edges, counts


def filter_records(records, threshold=None):
    """Records whose Dice reaches ``threshold`` (default: each record's own retained flag)."""
    if threshold is None:
        return [r for r in records if r.retained]
    return [r for r in records if r.inter_model_dice >= threshold]


def partition_sample(records, k_low, k_high, seed=0):
    """Seeded random draw of ``k_low`` Low and ``k_high`` High records, shuffled together."""
    low = [r for r in records if r.cls == LOW]
    high = [r for r in records if r.cls == HIGH]
    if len(low) < k_low:
        raise InsufficientRecords(len(low), k_low, LOW)
    if len(high) < k_high:
        raise InsufficientRecords(len(high), k_high, HIGH)
    rng = np.random.default_rng(seed)
    pick = ([low[i] for i in rng.choice(len(low), k_low, replace=False)]
            + [high[i] for i in rng.choice(len(high), k_high, replace=False)])
    return [pick[i] for i in rng.permutation(len(pick))]
