"""Anatomical-correctness checks for label masks and keypoint sets.

Criteria (all must hold for ``overall``):

* each structure forms exactly one 4-connected component
* no structure encloses a background pocket (a hole)
* no background pocket is enclosed jointly by several structures
* the LV cavity never touches border-connected background, i.e. myocardium (with the atrium at
  the base) closes around it; vacuous when the myocardium is absent
* the atrium touches the LV; vacuous when the atrium is absent
* keypoint space only: every epicardial point lies strictly outside the
  endocardium along its normal, and the two contour polylines do not cross

A background pocket is a 4-connected background component that does not reach
the image border.  When a sector mask is supplied, background outside the
sector counts as reaching the border.
"""
from dataclasses import dataclass, asdict, fields

import numpy as np
from scipy import ndimage

from .imaging import BG, FOUR_CONNECTED, LA, LV, MYO, STRUCTURES, rasterize_keypoints, validate_mask
from .keypoints import outward_normals

NAMES = {LV: "lv", MYO: "myo", LA: "la"}


@dataclass
class AnatomyReport:
    single_component_lv: bool = True
    single_component_myo: bool = True
    single_component_la: bool = True
    no_holes_lv: bool = True
    no_holes_myo: bool = True
    no_holes_la: bool = True
    no_inter_structure_holes: bool = True
    myo_band_encloses_lv: bool = True
    la_adjacent_to_lv: bool = True
    ring_crossing_free: bool = True
    rings_intersect_free: bool = True

    @property
    def criteria(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def overall(self):
        return all(self.criteria.values())

    def failed(self):
        return [k for k, v in self.criteria.items() if not v]

    def to_dict(self):
        d = asdict(self)
        d["overall"] = self.overall
        return d


def _touches(binary, other):
    """True when some pixel of ``binary`` is 4-adjacent to a pixel of ``other``."""
    grown = ndimage.binary_dilation(binary, structure=FOUR_CONNECTED)
    return bool((grown & other).any())


def _background(mask, sector=None):
    """``(labelled background, count, per-component reaches-border flag)``."""
    bg = mask == BG
    labelled, count = ndimage.label(bg, structure=FOUR_CONNECTED)
    outer = np.zeros(count + 1, dtype=bool)
    edge = np.concatenate([labelled[0], labelled[-1], labelled[:, 0], labelled[:, -1]])
    outer[edge] = True
    if sector is not None:
        outer[np.unique(labelled[bg & ~np.asarray(sector, dtype=bool)])] = True
    return labelled, count, outer


def outer_background(mask, sector=None):
    labelled, _, outer = _background(np.asarray(mask), sector)
    outer = outer.copy()
    outer[0] = False
    return outer[labelled]


def background_pockets(mask, sector=None):
    """List of ``(pixels, enclosing labels)`` for every enclosed background component."""
    mask = np.asarray(mask)
    labelled, count, outer = _background(mask, sector)
    outer[0] = True
    pockets = []
    for k in np.flatnonzero(~outer):
        region = labelled == k
        ring = ndimage.binary_dilation(region, structure=FOUR_CONNECTED) & ~region
        pockets.append((region, set(int(v) for v in np.unique(mask[ring]))))
    return pockets


def check_mask(mask, sector=None):
    """Mask-space criteria; keypoint-only fields stay True."""
    mask = validate_mask(mask)
    rep = AnatomyReport()
    for s in STRUCTURES:
        n = ndimage.label(mask == s, structure=FOUR_CONNECTED)[1]
        setattr(rep, f"single_component_{NAMES[s]}", n == 1)
    for _, labels in background_pockets(mask, sector):
        if len(labels) == 1:
            setattr(rep, f"no_holes_{NAMES[next(iter(labels))]}", False)
        else:
            rep.no_inter_structure_holes = False
    lv, myo, la = mask == LV, mask == MYO, mask == LA
    if myo.any():
        on_border = lv[0].any() or lv[-1].any() or lv[:, 0].any() or lv[:, -1].any()
        rep.myo_band_encloses_lv = not (on_border or _touches(lv, outer_background(mask, sector)))
    if la.any():
        rep.la_adjacent_to_lv = _touches(la, lv)
    return rep


def _segments_cross(p, q):
    """True if any segment of polyline ``p`` meets any segment of polyline ``q``."""
    a, b = p[:-1], p[1:]
    c, d = q[:-1], q[1:]

    def orient(u, v, w):
        return ((v[..., 0] - u[..., 0]) * (w[..., 1] - u[..., 1])
                - (v[..., 1] - u[..., 1]) * (w[..., 0] - u[..., 0]))

    A, B = a[:, None], b[:, None]
    C, D = c[None, :], d[None, :]
    o1, o2 = orient(A, B, C), orient(A, B, D)
    o3, o4 = orient(C, D, A), orient(C, D, B)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    if proper.any():
        return True

    def on_segment(u, v, w, o):
        return ((o == 0) & (np.minimum(u[..., 0], v[..., 0]) <= w[..., 0])
                & (w[..., 0] <= np.maximum(u[..., 0], v[..., 0]))
                & (np.minimum(u[..., 1], v[..., 1]) <= w[..., 1])
                & (w[..., 1] <= np.maximum(u[..., 1], v[..., 1])))

    touch = (on_segment(A, B, C, o1) | on_segment(A, B, D, o2)
             | on_segment(C, D, A, o3) | on_segment(C, D, B, o4))
    return bool(touch.any())


def ring_crossing_free(kps):
    """Every epicardial point has strictly positive clearance along the endocardial normal."""
    n = outward_normals(kps.endo, fallback=True)
    clearance = np.einsum("ij,ij->i", kps.epi - kps.endo, n)
    return bool((clearance > 0).all())


def rings_intersect_free(kps):
    return not _segments_cross(kps.pixels(kps.endo), kps.pixels(kps.epi))


def check_keypoints(kps, sector=None):
    """Mask criteria on the rasterisation plus the two ring-ordering criteria."""
    rep = check_mask(rasterize_keypoints(kps), sector)
    rep.ring_crossing_free = ring_crossing_free(kps)
    rep.rings_intersect_free = rings_intersect_free(kps)
    return rep


def count_incorrect(reports):
    """Number of reports whose overall verdict fails."""
    return sum(0 if r.overall else 1 for r in reports)
