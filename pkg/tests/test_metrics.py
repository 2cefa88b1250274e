import itertools

import numpy as np
import pytest

from cardiogcn.errors import AllZeroDifferences, DimensionMismatch, EmptyContour, LengthMismatch
from cardiogcn.imaging import LA, LV, MYO, PixelSpacing
from cardiogcn.metrics import (bland_altman, bland_altman_points, combined_dice, dice, hausdorff,
                               inter_model_dice, mae, mask_hausdorff, metric_report, structure_dice,
                               wilcoxon_signed_rank)


def brute_dice(a, b, labels):
    inter = na = nb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        ia, ib = x in labels, y in labels
        na += ia
        nb += ib
        inter += ia and ib
    return 1.0 if na + nb == 0 else 2 * inter / (na + nb)


def brute_hausdorff(p, q):
    def directed(u, v):
        return max(min(np.hypot(*(a - b)) for b in v) for a in u)

    return max(directed(p, q), directed(q, p))


def brute_wilcoxon_p(d):
    """Exact two-sided p by enumerating signs, midranks from pairwise comparisons."""
    d = [x for x in d if x != 0]
    mags = [abs(x) for x in d]
    ranks = [sum(1 for m in mags if m < x) + (sum(1 for m in mags if m == x) + 1) / 2 for x in mags]
    w = sum(r for r, x in zip(ranks, d) if x > 0)
    null = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    lo = sum(v <= w + 1e-9 for v in null) / len(null)
    hi = sum(v >= w - 1e-9 for v in null) / len(null)
    return min(1.0, 2 * min(lo, hi))


def test_dice_and_hausdorff_oracles(rng):
    for _ in range(200):
        a = rng.integers(0, 4, (16, 16))
        b = rng.integers(0, 4, (16, 16))
        for labels in ((LV,), (MYO,), (LV, MYO), (LA,)):
            assert dice(a, b, labels) == brute_dice(a, b, labels)
        p = rng.uniform(0, 16, (int(rng.integers(1, 12)), 2))
        q = rng.uniform(0, 16, (int(rng.integers(1, 12)), 2))
        assert hausdorff(p, q) == pytest.approx(brute_hausdorff(p, q), abs=1e-12)


def test_dice_edge_cases():
    z = np.zeros((4, 4))
    assert dice(z, z) == 1.0
    one = z.copy()
    one[0, 0] = LV
    assert dice(one, z) == 0.0
    with pytest.raises(DimensionMismatch):
        dice(z, np.zeros((4, 5)))


def test_combined_and_structure_dice(phantom):
    mask = phantom[1]
    assert combined_dice(mask, mask) == 1.0
    assert structure_dice(mask, mask) == {"lv": 1.0, "myo": 1.0, "la": 1.0}
    assert inter_model_dice(mask, mask, "foreground") == inter_model_dice(mask, mask, "lv") == 1.0
    with pytest.raises(ValueError):
        inter_model_dice(mask, mask, "max")


def test_hausdorff_spacing_and_empty():
    p = np.array([[0.0, 0.0]])
    q = np.array([[3.0, 4.0]])
    assert hausdorff(p, q) == 5.0
    assert hausdorff(p, q, PixelSpacing(2.0, 1.0)) == pytest.approx(np.hypot(6, 4))
    with pytest.raises(EmptyContour):
        hausdorff(np.zeros((0, 2)), q)


def test_mask_hausdorff_shift(phantom):
    mask = phantom[1]
    shifted = np.roll(mask, 3, axis=1)
    hd = mask_hausdorff(mask, shifted)
    assert hd["endo"] == pytest.approx(3.0) and hd["epi"] == pytest.approx(3.0)
    rep = metric_report(mask, np.zeros_like(mask))
    assert rep.hausdorff_endo is None and rep.dice_lv == 0.0


def test_wilcoxon_known_values():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5])
    assert r.method == "exact" and r.p_value == pytest.approx(0.0625, abs=1e-12)
    assert wilcoxon_signed_rank([-1, 1]).p_value == 1.0
    with pytest.raises(AllZeroDifferences):
        wilcoxon_signed_rank([0, 0])


def test_wilcoxon_exact_matches_enumeration(rng):
    for _ in range(30):
        n = int(rng.integers(2, 10))
        d = rng.integers(-4, 5, n).astype(float)
        if not d.any():
            continue
        assert wilcoxon_signed_rank(d).p_value == pytest.approx(brute_wilcoxon_p(d), abs=1e-12)


def test_wilcoxon_normal_close_to_exact(rng):
    for _ in range(10):
        d = rng.normal(0.3, 1.0, 12)
        exact = wilcoxon_signed_rank(d).p_value
        normal = wilcoxon_signed_rank(d, exact_max_n=0)
        assert normal.method == "normal" and abs(exact - normal.p_value) <= 0.05


def test_bland_altman():
    bias, lo, hi = bland_altman([1, 2, 3], [3, 2, 1])
    assert bias == 0.0 and lo == pytest.approx(-3.92) and hi == pytest.approx(3.92)
    pts = bland_altman_points([1, 2], [3, 2])
    assert pts.tolist() == [[2.0, -2.0], [2.0, 0.0]]
    with pytest.raises(LengthMismatch):
        bland_altman([1], [1])
    with pytest.raises(LengthMismatch):
        bland_altman([1, 2], [1])


def test_mae():
    assert mae([1, 2, 3], [2, 2, 5]) == pytest.approx((1.0, 1.0))
    assert mae([4], [1]) == (3.0, 0.0)
