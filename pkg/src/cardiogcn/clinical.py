"""LV volumes and ejection fraction by the biplane method of disks.

Conventions: the long axis runs from the base midpoint M (halfway between the
annulus points A and B) to the apex E.  Disk i (0-based) sits at fractional
height (i + 0.5) / N along that axis and its diameter is the length of the
chord of the LV region perpendicular to the axis.  Lengths are in mm and
volumes in ml.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (EmptyChord, KeypointError, LabelAbsent, MissingLandmark, NonPositiveEDV,
                     NoUsableCycle, ViewMissing)
from .imaging import LV, PixelSpacing
from .keypoints import KeypointSet, extract_landmarks

N_DISKS = 20
VIEWS = ("A2C", "A4C")


@dataclass(frozen=True)
class Axis:
    base: np.ndarray  # M, pixel units
    apex: np.ndarray  # E, pixel units
    length_mm: float
    spacing: PixelSpacing


def _spacing(spacing):
    if spacing is None:
        return PixelSpacing(1.0, 1.0)
    if isinstance(spacing, PixelSpacing):
        return spacing
    return PixelSpacing(*spacing)


def _axis(a, b, e, spacing):
    spacing = _spacing(spacing)
    m = 0.5 * (np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64))
    e = np.asarray(e, dtype=np.float64)
    length = float(np.hypot(*((e - m) * spacing.as_array())))
    if length <= 0:
        raise MissingLandmark("apex coincides with the base midpoint")
    return Axis(base=m, apex=e, length_mm=length, spacing=spacing)


def lv_axis(source, spacing=None):
    """Long axis of a KeypointSet or a label mask (pixel-unit landmarks)."""
    if isinstance(source, KeypointSet):
        spacing = spacing if spacing is not None else source.spacing
        try:
            a, b, e = (source.pixels(source.landmark(k)) for k in "ABE")
        except (KeyError, IndexError) as exc:
            raise MissingLandmark(f"landmark {exc} missing") from None
        return _axis(a, b, e, spacing)
    try:
        lm = extract_landmarks(np.asarray(source))
    except (KeypointError, LabelAbsent) as exc:
        raise MissingLandmark(f"landmarks unavailable: {exc}") from None
    return _axis(lm.A, lm.B, lm.E, spacing)


def _stations(axis, n):
    """Disk centres in mm and the unit chord direction (perpendicular to the axis, in mm)."""
    sp = axis.spacing.as_array()
    base, apex = axis.base * sp, axis.apex * sp
    h = (np.arange(n) + 0.5) / n
    d = (apex - base) / np.hypot(*(apex - base))
    return base + h[:, None] * (apex - base), np.array([-d[1], d[0]])


def polygon_chords(poly, points, direction):
    """Length inside ``poly`` (even-odd) of the line through each point along ``direction``."""
    poly = np.asarray(poly, dtype=np.float64)
    p0, p1 = poly, np.roll(poly, -1, axis=0)
    nrm = np.array([-direction[1], direction[0]])
    out = np.zeros(len(points))
    for k, q in enumerate(points):
        # crossings where the vertex side of the line changes
        s0, s1 = (p0 - q) @ nrm, (p1 - q) @ nrm
        cross = (s0 <= 0) != (s1 <= 0)
        if not cross.any():
            continue
        t = s0[cross] / (s0[cross] - s1[cross])
        hits = p0[cross] + t[:, None] * (p1[cross] - p0[cross])
        along = np.sort((hits - q) @ direction)
        out[k] = float(np.sum(along[1::2] - along[0::2]))
    return out


def mask_chords(region, points, direction, cell=(1.0, 1.0)):
    """Length of each line inside the union of the region's pixel rectangles (``cell`` = pixel size)."""
    rows, cols = np.nonzero(region)
    cell = np.asarray(cell, dtype=np.float64)
    lo = np.stack([cols, rows], axis=1) * cell
    hi = lo + cell
    d = np.asarray(direction, dtype=np.float64)
    out = np.zeros(len(points))
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, q in enumerate(points):
            t_enter = np.full(len(lo), -np.inf)
            t_exit = np.full(len(lo), np.inf)
            ok = np.ones(len(lo), dtype=bool)
            for ax in range(2):
                if abs(d[ax]) < 1e-15:
                    ok &= (lo[:, ax] <= q[ax]) & (q[ax] < hi[:, ax])
                    continue
                ta = (lo[:, ax] - q[ax]) / d[ax]
                tb = (hi[:, ax] - q[ax]) / d[ax]
                t_enter = np.maximum(t_enter, np.minimum(ta, tb))
                t_exit = np.minimum(t_exit, np.maximum(ta, tb))
            out[k] = float(np.where(ok, np.clip(t_exit - t_enter, 0.0, None), 0.0).sum())
    return out


@dataclass
class Diameters:
    values: np.ndarray  # mm
    length_mm: float
    empty: list = field(default_factory=list)  # indices of slabs without LV


def disk_diameters(source, axis=None, n=N_DISKS, spacing=None, strict=False):
    """Chord diameters (mm) at the N disk stations.

    ``source`` is a KeypointSet (endocardial polygon), a label mask (union of LV
    pixels) or a float ``(K, 2)`` pixel-unit polygon, which needs an explicit
    ``axis``.  Slabs without LV get diameter 0 and are listed in ``empty``; with
    ``strict`` they raise EmptyChord.
    """
    is_kps = isinstance(source, KeypointSet)
    arr = None if is_kps else np.asarray(source)
    is_poly = arr is not None and arr.ndim == 2 and arr.shape[1] == 2 and np.issubdtype(arr.dtype, np.floating)
    if axis is None:
        if is_poly:
            raise ValueError("a polygon source needs an explicit axis")
        axis = lv_axis(source, spacing)
    sp = axis.spacing.as_array()
    pts, perp = _stations(axis, n)
    if is_kps:
        mm = polygon_chords(source.pixels(source.endo) * sp, pts, perp)
    elif is_poly:
        mm = polygon_chords(arr * sp, pts, perp)
    else:
        region = arr == LV
        if not region.any():
            raise EmptyChord("LV region is empty")
        mm = mask_chords(region, pts, perp, sp)
    empty = [int(i) for i in np.flatnonzero(mm <= 0)]
    if empty and strict:
        raise EmptyChord(f"slabs {empty} contain no LV")
    if len(empty) == n:
        raise EmptyChord("no slab intersects the LV")
    return Diameters(values=mm, length_mm=axis.length_mm, empty=empty)


@dataclass
class VolumeResult:
    volume_ml: float
    length_a2c: float
    length_a4c: float
    a4c: np.ndarray
    a2c: np.ndarray


def simpson_biplane(a4c, a2c):
    """Biplane method-of-disks volume from two :class:`Diameters` (or ``(values, L)`` pairs)."""
    if a4c is None or a2c is None:
        raise ViewMissing("both apical views are required")
    if not isinstance(a4c, Diameters):
        a4c = Diameters(np.asarray(a4c[0], dtype=np.float64), float(a4c[1]))
    if not isinstance(a2c, Diameters):
        a2c = Diameters(np.asarray(a2c[0], dtype=np.float64), float(a2c[1]))
    if len(a4c.values) != len(a2c.values):
        raise ValueError("both views need the same number of disks")
    n = len(a4c.values)
    length = max(a4c.length_mm, a2c.length_mm)
    v = np.pi / 4.0 * (length / n) * float(np.dot(a4c.values, a2c.values))
    return VolumeResult(v / 1000.0, a2c.length_mm, a4c.length_mm, a4c.values, a2c.values)


def ef(edv, esv):
    if not edv > 0:
        raise NonPositiveEDV(f"end-diastolic volume must be positive, got {edv}")
    return (edv - esv) / edv


def ensemble_ef(ef_a, ef_b):
    if not (np.isfinite(ef_a) and np.isfinite(ef_b)):
        raise ValueError("ensemble inputs must be finite")
    return 0.5 * (ef_a + ef_b)


def usable(segmentation):
    """Keypoints are always usable; a mask is usable when its landmarks can be extracted."""
    if isinstance(segmentation, KeypointSet):
        return True
    try:
        extract_landmarks(np.asarray(segmentation))
    except (KeypointError, LabelAbsent):
        return False
    return True


def volume(a4c_seg, a2c_seg, spacing_a4c=None, spacing_a2c=None, n=N_DISKS):
    d4 = disk_diameters(a4c_seg, n=n, spacing=spacing_a4c)
    d2 = disk_diameters(a2c_seg, n=n, spacing=spacing_a2c)
    return simpson_biplane(d4, d2)


# ---------------------------------------------------------------------------
# exams

@dataclass
class ViewRecording:
    frames: list  # frame identifiers (file names or indices)
    cycles: list  # [(ed, es), ...] indices into frames
    spacing: PixelSpacing

    def __post_init__(self):
        self.cycles = [tuple(int(v) for v in c) for c in self.cycles]
        for ed, es in self.cycles:
            if not (0 <= ed < es < len(self.frames)):
                raise ValueError(f"cycle ({ed}, {es}) needs 0 <= ED < ES < {len(self.frames)}")


@dataclass
class ExamManifest:
    patient_id: str
    views: dict  # "A2C"/"A4C" -> ViewRecording
    reference: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "version": 1,
            "patient_id": self.patient_id,
            "views": {
                k: {"frames": list(v.frames), "cycles": [{"ed": ed, "es": es} for ed, es in v.cycles],
                    "spacing": [v.spacing.sx, v.spacing.sy]}
                for k, v in sorted(self.views.items())
            },
            "reference": dict(self.reference),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != 1:
            raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
        views = {}
        for k, v in doc["views"].items():
            if k not in VIEWS:
                raise ValueError(f"unknown view {k!r}")
            views[k] = ViewRecording(frames=list(v["frames"]),
                                     cycles=[(c["ed"], c["es"]) for c in v["cycles"]],
                                     spacing=PixelSpacing(*v["spacing"]))
        return cls(patient_id=str(doc["patient_id"]), views=views, reference=dict(doc.get("reference", {})))


def save_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    with open(path) as fh:
        return ExamManifest.from_dict(json.load(fh))


@dataclass
class EFResult:
    patient_id: str
    cycle_ef: list
    cycle_edv: list
    cycle_esv: list
    mean_ef: float
    usable_cycles: int
    excluded: bool

    def to_dict(self):
        return dict(self.__dict__)


def exam_ef(manifest, segmentations, filter_threshold=None, agreement=None, n=N_DISKS):
    """Per-cycle and mean EF of one exam.

    ``segmentations[view][frame_index]`` is a mask or KeypointSet.  Cycles of
    the two views are paired by position.  With ``filter_threshold``, frames
    whose ``agreement[view][frame_index]`` is below it are dropped first; a
    cycle survives only if all four of its frames survive and are usable.  If
    no cycle survives, a filtered exam is flagged excluded while an unfiltered
    one raises NoUsableCycle.
    """
    for v in VIEWS:
        if v not in manifest.views:
            raise ViewMissing(f"{manifest.patient_id}: view {v} missing")
    rec2, rec4 = manifest.views["A2C"], manifest.views["A4C"]
    efs, edvs, esvs = [], [], []
    for (ed2, es2), (ed4, es4) in zip(rec2.cycles, rec4.cycles):
        frames = {("A2C", ed2), ("A2C", es2), ("A4C", ed4), ("A4C", es4)}
        if filter_threshold is not None:
            if any(agreement[v][i] < filter_threshold for v, i in frames):
                continue
        segs = {(v, i): segmentations[v].get(i) for v, i in frames}
        if any(s is None or not usable(s) for s in segs.values()):
            continue
        edv = volume(segs[("A4C", ed4)], segs[("A2C", ed2)], rec4.spacing, rec2.spacing, n).volume_ml
        esv = volume(segs[("A4C", es4)], segs[("A2C", es2)], rec4.spacing, rec2.spacing, n).volume_ml
        efs.append(ef(edv, esv))
        edvs.append(edv)
        esvs.append(esv)
    if not efs:
        if filter_threshold is None:
            raise NoUsableCycle(f"{manifest.patient_id}: no cycle has usable A2C and A4C ED/ES frames")
        return EFResult(manifest.patient_id, [], [], [], None, 0, True)
    return EFResult(manifest.patient_id, efs, edvs, esvs, float(np.mean(efs)), len(efs), False)
