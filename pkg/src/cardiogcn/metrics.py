"""Segmentation metrics and the paired statistics used to compare methods."""
import itertools
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import AllZeroDifferences, DimensionMismatch, EmptyContour, LabelAbsent, LengthMismatch
from .imaging import LA, LV, MYO, PixelSpacing, region_contour

EXACT_MAX_N = 12


def _same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b, region=(LV,)):
    """Dice of the pixels whose code is in ``region``; 1 when both are empty."""
    a, b = _same_shape(a, b)
    region = list(np.atleast_1d(region))
    ra, rb = np.isin(a, region), np.isin(b, region)
    total = int(ra.sum()) + int(rb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ra & rb).sum()) / total


def combined_dice(a, b):
    """Mean of the endocardial (LV) and epicardial (LV + MYO) Dice."""
    return 0.5 * (dice(a, b, (LV,)) + dice(a, b, (LV, MYO)))


def structure_dice(a, b):
    return {"lv": dice(a, b, (LV,)), "myo": dice(a, b, (MYO,)), "la": dice(a, b, (LA,))}


def inter_model_dice(a, b, mode="mean"):
    """Agreement between two label masks.

    ``mean``: unweighted mean of the LV, MYO and LA Dice.  ``foreground``: Dice
    of the union of all three structures.  ``lv``: LV Dice only.
    """
    if mode == "mean":
        return float(np.mean(list(structure_dice(a, b).values())))
    if mode == "foreground":
        return dice(a, b, (LV, MYO, LA))
    if mode == "lv":
        return dice(a, b, (LV,))
    raise ValueError(f"unknown inter-model Dice mode {mode!r}")


def _spacing(spacing):
    if spacing is None:
        return np.ones(2)
    if isinstance(spacing, PixelSpacing):
        return spacing.as_array()
    return np.asarray(spacing, dtype=np.float64)


def hausdorff(a, b, spacing=None):
    """Symmetric Hausdorff distance between two (x, y) point sets, scaled to mm."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise EmptyContour("Hausdorff distance needs two non-empty contours")
    s = _spacing(spacing)
    d = cdist(a * s, b * s)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def _boundary(mask, labels):
    try:
        return region_contour(np.isin(mask, labels))
    except LabelAbsent:
        raise EmptyContour(f"no pixels with labels {list(labels)}") from None


def mask_hausdorff(a, b, spacing=None):
    """``{"endo", "epi", "combined"}`` Hausdorff distances between two label masks."""
    a, b = _same_shape(a, b)
    endo = hausdorff(_boundary(a, (LV,)), _boundary(b, (LV,)), spacing)
    epi = hausdorff(_boundary(a, (LV, MYO)), _boundary(b, (LV, MYO)), spacing)
    return {"endo": endo, "epi": epi, "combined": 0.5 * (endo + epi)}


@dataclass
class MetricReport:
    dice_lv: float
    dice_myo: float
    dice_la: float
    dice_combined: float
    hausdorff_endo: float
    hausdorff_epi: float
    hausdorff_combined: float
    inter_model_dice: float

    def to_dict(self):
        return asdict(self)


def metric_report(pred, ref, spacing=None, mode="mean"):
    """All metrics between a predicted and a reference mask.

    Hausdorff entries are ``None`` when either contour is empty.
    """
    sd = structure_dice(pred, ref)
    try:
        hd = mask_hausdorff(pred, ref, spacing)
    except EmptyContour:
        hd = {"endo": None, "epi": None, "combined": None}
    return MetricReport(
        dice_lv=sd["lv"], dice_myo=sd["myo"], dice_la=sd["la"], dice_combined=combined_dice(pred, ref),
        hausdorff_endo=hd["endo"], hausdorff_epi=hd["epi"], hausdorff_combined=hd["combined"],
        inter_model_dice=inter_model_dice(pred, ref, mode),
    )


# ---------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


def wilcoxon_signed_rank(diffs, exact_max_n=EXACT_MAX_N):
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped, tied magnitudes get midranks.  The statistic
    is ``min(W+, W-)``.  Up to ``exact_max_n`` differences the null distribution
    is enumerated over all sign patterns; above it a normal approximation with
    tie and continuity corrections is used.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise AllZeroDifferences("every paired difference is zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    stat = min(w_plus, total - w_plus)
    if n <= exact_max_n:
        signs = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
        null = signs @ ranks
        tol = 1e-9
        lower = np.mean(null <= w_plus + tol)
        upper = np.mean(null >= w_plus - tol)
        return WilcoxonResult(stat, float(min(1.0, 2.0 * min(lower, upper))), n, "exact")
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((counts ** 3) - counts).sum()) / 48.0
    if var <= 0:
        return WilcoxonResult(stat, 1.0, n, "normal")
    z = max(0.0, abs(w_plus - mean) - 0.5) / np.sqrt(var)
    return WilcoxonResult(stat, float(min(1.0, 2.0 * ndtr(-z))), n, "normal")


def _paired(auto, ref, minimum):
    auto = np.asarray(auto, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if auto.shape != ref.shape:
        raise LengthMismatch(f"{len(auto)} automatic vs {len(ref)} reference values")
    if len(auto) < minimum:
        raise LengthMismatch(f"need at least {minimum} pairs, got {len(auto)}")
    return auto, ref


def bland_altman(auto, ref):
    """``(bias, lower, upper)`` limits of agreement, bias +- 1.96 sample SD."""
    auto, ref = _paired(auto, ref, 2)
    d = auto - ref
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


def bland_altman_points(auto, ref):
    """Per-pair ``(mean, difference)`` plot data."""
    auto, ref = _paired(auto, ref, 1)
    return np.stack([(auto + ref) / 2.0, auto - ref], axis=1)


def mae(auto, ref):
    """Mean and sample SD of the absolute errors (SD is 0 for a single pair)."""
    auto, ref = _paired(auto, ref, 1)
    e = np.abs(auto - ref)
    return float(e.mean()), float(e.std(ddof=1)) if len(e) > 1 else 0.0
