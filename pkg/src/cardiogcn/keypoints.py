"""Landmark detection, standardised contour sampling and the displacement representation.

Array layout (defaults n_side=20, m_side=10)::

    endo  43 points  A, n samples, E, n samples, B
    epi   43 points  C, n samples, F, n samples, D
    la    21 points  m samples (A side), G, m samples (B side)

All KeypointSet coordinates are normalised to [0, 1] by (width, height).
"""
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContourTooShort, LayoutMismatch, MissingStructure, NoInterface, ZeroTangent
from .imaging import LA, LV, MYO, PixelSpacing, largest_component, polygon_area, region_contour

EPS_DISP = 1e-4
APEX_BAND = 1.0  # pixels
KEYPOINT_FILE_VERSION = 1


@dataclass(frozen=True)
class SamplingConfig:
    n_side: int = 20
    m_side: int = 10
    # "lv_la": annulus = extremes of the LV/LA interface (default)
    # "myo_la": annulus = LV pixels touching both MYO and LA
    annulus: str = "lv_la"
    # contours are pushed outward by this many pixels so polygons enclose whole pixels
    boundary_offset: float = 0.5

    def __post_init__(self):
        if self.n_side < 1 or self.m_side < 1:
            raise ValueError("n_side and m_side must be >= 1")
        if self.annulus not in ("lv_la", "myo_la"):
            raise ValueError(f"unknown annulus mode {self.annulus!r}")

    @property
    def ring_size(self):
        return 2 * self.n_side + 3

    @property
    def la_size(self):
        return 2 * self.m_side + 1


@dataclass(frozen=True)
class Landmarks:
    """Anatomical landmarks in pixel units ``(x, y)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray

    def as_dict(self):
        return {k: getattr(self, k) for k in "ABCDEFG"}


def default_landmark_index(n_side, m_side):
    mid = n_side + 1
    last = 2 * n_side + 2
    return {"A": 0, "E": mid, "B": last, "C": 0, "F": mid, "D": last, "G": m_side}


@dataclass
class KeypointSet:
    endo: np.ndarray
    epi: np.ndarray
    la: np.ndarray
    n_side: int = 20
    m_side: int = 10
    width: int = 256
    height: int = 256
    landmarks: dict = field(default=None)
    spacing: PixelSpacing = None

    def __post_init__(self):
        self.endo = np.asarray(self.endo, dtype=np.float64).reshape(-1, 2)
        self.epi = np.asarray(self.epi, dtype=np.float64).reshape(-1, 2)
        self.la = np.asarray(self.la, dtype=np.float64).reshape(-1, 2)
        if self.landmarks is None:
            self.landmarks = default_landmark_index(self.n_side, self.m_side)
        ring = 2 * self.n_side + 3
        if len(self.endo) != ring or len(self.epi) != ring or len(self.la) != 2 * self.m_side + 1:
            raise LayoutMismatch(
                f"expected ({ring}, {ring}, {2 * self.m_side + 1}) points, "
                f"got ({len(self.endo)}, {len(self.epi)}, {len(self.la)})"
            )

    @property
    def count(self):
        return len(self.endo) + len(self.epi) + len(self.la)

    def all_points(self):
        return np.vstack([self.endo, self.epi, self.la])

    def pixels(self, arr):
        return arr * np.array([self.width, self.height], dtype=np.float64)

    def landmark(self, name):
        arr = self.la if name == "G" else self.epi if name in "CDF" else self.endo
        return arr[self.landmarks[name]]

    def copy(self, **changes):
        kw = dict(
            endo=self.endo.copy(), epi=self.epi.copy(), la=self.la.copy(), n_side=self.n_side,
            m_side=self.m_side, width=self.width, height=self.height,
            landmarks=dict(self.landmarks), spacing=self.spacing,
        )
        kw.update(changes)
        return KeypointSet(**kw)


@dataclass
class DisplacementSet:
    endo: np.ndarray
    la: np.ndarray
    disp: np.ndarray
    n_side: int = 20
    m_side: int = 10
    width: int = 256
    height: int = 256
    landmarks: dict = None
    spacing: PixelSpacing = None

    def __post_init__(self):
        self.endo = np.asarray(self.endo, dtype=np.float64).reshape(-1, 2)
        self.la = np.asarray(self.la, dtype=np.float64).reshape(-1, 2)
        self.disp = np.asarray(self.disp, dtype=np.float64).reshape(-1)
        if self.landmarks is None:
            self.landmarks = default_landmark_index(self.n_side, self.m_side)
        if len(self.disp) != len(self.endo):
            raise LayoutMismatch("one displacement per endocardial keypoint is required")


# ---------------------------------------------------------------------------
# landmarks

def _pixel_centres(binary):
    rows, cols = np.nonzero(binary)
    return np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)


def _four_neighbours(binary):
    out = np.zeros_like(binary)
    out[1:, :] |= binary[:-1, :]
    out[:-1, :] |= binary[1:, :]
    out[:, 1:] |= binary[:, :-1]
    out[:, :-1] |= binary[:, 1:]
    return out


def _eight_neighbours(binary):
    out = _four_neighbours(binary)
    out[1:, 1:] |= binary[:-1, :-1]
    out[1:, :-1] |= binary[:-1, 1:]
    out[:-1, 1:] |= binary[1:, :-1]
    out[:-1, :-1] |= binary[1:, 1:]
    return out


def _extreme_pair(points):
    """Indices (i, j), i < j, of the farthest pair; ties resolved by row-major order."""
    if len(points) == 1:
        return 0, 0
    d = cdist(points, points)
    best = d.max()
    ii, jj = np.nonzero(np.triu(d >= best - 1e-9, k=1))
    # points come in row-major order, so the lexicographically smallest pair wins
    k = np.lexsort((jj, ii))[0]
    return int(ii[k]), int(jj[k])


def extract_landmarks(mask, annulus="lv_la"):
    """Landmarks A-G of a label mask (pixel units)."""
    mask = np.asarray(mask)
    regions = {}
    for label in (LV, MYO, LA):
        binary = mask == label
        if not binary.any():
            raise MissingStructure(label)
        regions[label] = largest_component(binary)
    lv, myo, la = regions[LV], regions[MYO], regions[LA]

    interface = lv & _four_neighbours(la)
    if annulus == "myo_la":
        corners = interface & _eight_neighbours(myo & _four_neighbours(la))
        if corners.sum() >= 2:
            interface = corners
    if not interface.any():
        raise NoInterface("no LV pixel is 4-adjacent to the LA")
    cand = _pixel_centres(interface)
    i, j = _extreme_pair(cand)
    p, q = cand[i], cand[j]
    if (q[0], q[1]) < (p[0], p[1]):
        p, q = q, p
    a, b = p, q  # A is the annulus point with the smaller x (then smaller y)

    base = b - a
    length = float(np.hypot(*base))
    if length == 0:
        u = np.array([1.0, 0.0])
    else:
        u = base / length
    normal = np.array([-u[1], u[0]])
    la_side = np.sign(np.dot(_pixel_centres(la).mean(axis=0) - a, normal)) or 1.0

    def signed_height(points):
        return (points - a) @ normal * (-la_side)

    myo_pts = _pixel_centres(myo)
    along = (myo_pts - a) @ u
    off = np.abs((myo_pts - a) @ normal)
    c = d = None
    tol = 1.0
    for _ in range(6):
        on_line = off <= tol
        left = on_line & (along < 0)
        right = on_line & (along > length)
        if left.any() and right.any():
            c = myo_pts[np.flatnonzero(left)[np.argmin(along[left])]]
            d = myo_pts[np.flatnonzero(right)[np.argmax(along[right])]]
            break
        tol += 0.5
    if c is None:
        raise MissingStructure(MYO)

    e = _apex(_pixel_centres(lv), signed_height)
    f = _apex(myo_pts, signed_height)
    g = _apex(_pixel_centres(la), lambda p: -signed_height(p))
    return Landmarks(A=a, B=b, C=c, D=d, E=e, F=f, G=g)


def _apex(points, height, band=APEX_BAND):
    """Centroid of the pixels within ``band`` of the greatest height.

    A single arg-max pixel wanders along a blunt cap as the shape rotates; the
    band centroid tracks the tangent point instead.
    """
    h = height(points)
    return points[h >= h.max() - band].mean(axis=0)


# ---------------------------------------------------------------------------
# contour sampling

def _offset_outward(contour, offset):
    if offset == 0 or len(contour) < 3:
        return contour.copy()
    k = 2 if len(contour) > 4 else 1
    t = np.roll(contour, -k, axis=0) - np.roll(contour, k, axis=0)
    norm = np.hypot(t[:, 0], t[:, 1])
    norm[norm == 0] = 1.0
    sign = np.sign(polygon_area(contour)) or 1.0
    n = sign * np.stack([t[:, 1], -t[:, 0]], axis=1) / norm[:, None]
    return contour + offset * n


def _arc_through(contour, i_start, i_mid, i_end):
    """Indices walking the cyclic contour from i_start to i_end via i_mid."""
    n = len(contour)
    fwd = [(i_start + k) % n for k in range((i_end - i_start) % n + 1)]
    if i_mid in fwd:
        return fwd
    return [(i_start - k) % n for k in range((i_start - i_end) % n + 1)]


def _resample(points, count):
    """``count`` interior points at equal arc-length fractions k/(count+1)."""
    seg = np.hypot(*np.diff(points, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = s[-1] * np.arange(1, count + 1) / (count + 1)
    x = np.interp(targets, s, points[:, 0])
    y = np.interp(targets, s, points[:, 1])
    return np.stack([x, y], axis=1)


def _sample_two_arcs(contour, shifted, i_a, i_mid, i_b, count, name):
    idx = _arc_through(contour, i_a, i_mid, i_b)
    k = idx.index(i_mid)
    first, second = idx[: k + 1], idx[k:]
    if len(first) - 2 < count or len(second) - 2 < count:
        raise ContourTooShort(
            f"{name} arc has {len(first) - 2}/{len(second) - 2} pixels, {count} samples requested"
        )
    return _resample(shifted[first], count), _resample(shifted[second], count)


def _nearest(contour, point):
    return int(np.argmin(np.hypot(*(contour - point).T)))


def extract_keypoints(mask, cfg=None, spacing=None):
    """Standardised 2n+3 / 2n+3 / 2m+1 keypoints of a label mask."""
    cfg = cfg or SamplingConfig()
    mask = np.asarray(mask)
    h, w = mask.shape
    lm = extract_landmarks(mask, cfg.annulus)
    n, m = cfg.n_side, cfg.m_side

    lv = largest_component(mask == LV)
    endo_c = region_contour(lv)
    endo_s = _offset_outward(endo_c, cfg.boundary_offset)
    ia, ie, ib = (_nearest(endo_c, lm.A), _nearest(endo_c, lm.E), _nearest(endo_c, lm.B))
    s1, s2 = _sample_two_arcs(endo_c, endo_s, ia, ie, ib, n, "endocardium")
    endo = np.vstack([endo_s[ia], s1, endo_s[ie], s2, endo_s[ib]])

    union = largest_component((mask == LV) | (mask == MYO))
    epi_c = region_contour(union)
    epi_s = _offset_outward(epi_c, cfg.boundary_offset)
    ic, if_, id_ = (_nearest(epi_c, lm.C), _nearest(epi_c, lm.F), _nearest(epi_c, lm.D))
    s1, s2 = _sample_two_arcs(epi_c, epi_s, ic, if_, id_, n, "epicardium")
    epi = np.vstack([epi_s[ic], s1, epi_s[if_], s2, epi_s[id_]])

    la_c = region_contour(largest_component(mask == LA))
    la_s = _offset_outward(la_c, cfg.boundary_offset)
    ja, jg, jb = (_nearest(la_c, lm.A), _nearest(la_c, lm.G), _nearest(la_c, lm.B))
    s1, s2 = _sample_two_arcs(la_c, la_s, ja, jg, jb, m, "atrium")
    la = np.vstack([s1, la_s[jg], s2])

    scale = np.array([w, h], dtype=np.float64)
    return KeypointSet(
        endo=np.clip(endo / scale, 0, 1), epi=np.clip(epi / scale, 0, 1), la=np.clip(la / scale, 0, 1),
        n_side=n, m_side=m, width=w, height=h, spacing=spacing,
    )


# ---------------------------------------------------------------------------
# normals and displacement

def outward_normals(ring, closed=False, fallback=False):
    """Unit normals of every ring point, oriented away from the ring centroid.

    The tangent at i is ring[i+1] - ring[i-1]; open rings use the one-sided
    neighbour at the ends.  With ``fallback`` a vanishing tangent falls back to
    the radial direction (then to -y) instead of raising ZeroTangent.
    """
    ring = np.asarray(ring, dtype=np.float64)
    if len(ring) < 3:
        raise ValueError("ring needs at least 3 points")
    if closed:
        t = np.roll(ring, -1, axis=0) - np.roll(ring, 1, axis=0)
    else:
        t = np.empty_like(ring)
        t[1:-1] = ring[2:] - ring[:-2]
        t[0] = ring[1] - ring[0]
        t[-1] = ring[-1] - ring[-2]
    norm = np.hypot(t[:, 0], t[:, 1])
    radial = ring - ring.mean(axis=0)
    bad = norm < 1e-12
    if bad.any() and not fallback:
        raise ZeroTangent(f"coincident neighbours at indices {np.flatnonzero(bad).tolist()}")
    n = np.stack([t[:, 1], -t[:, 0]], axis=1) / np.where(bad, 1.0, norm)[:, None]
    if bad.any():
        rn = np.hypot(radial[:, 0], radial[:, 1])
        rad = np.where(rn[:, None] > 1e-12, radial / np.where(rn > 1e-12, rn, 1.0)[:, None], [0.0, -1.0])
        n[bad] = rad[bad]
    flip = np.einsum("ij,ij->i", n, radial) < 0
    n[flip] *= -1
    return n


def outward_normal(ring, i, closed=False):
    return outward_normals(ring, closed=closed)[i]


def to_displacement(kps, eps=EPS_DISP):
    n = outward_normals(kps.endo)
    disp = np.maximum(eps, np.einsum("ij,ij->i", kps.epi - kps.endo, n))
    return DisplacementSet(
        endo=kps.endo.copy(), la=kps.la.copy(), disp=disp, n_side=kps.n_side, m_side=kps.m_side,
        width=kps.width, height=kps.height, landmarks=dict(kps.landmarks), spacing=kps.spacing,
    )


def from_displacement(ds, fallback=False):
    n = outward_normals(ds.endo, fallback=fallback)
    epi = np.clip(ds.endo + ds.disp[:, None] * n, 0.0, 1.0)
    return KeypointSet(
        endo=ds.endo.copy(), epi=epi, la=ds.la.copy(), n_side=ds.n_side, m_side=ds.m_side,
        width=ds.width, height=ds.height, landmarks=dict(ds.landmarks), spacing=ds.spacing,
    )


def mirror_keypoints(kps):
    """Horizontal flip that keeps the A -> E -> B ordering convention."""
    def flip(arr):
        out = arr[::-1].copy()
        out[:, 0] = 1.0 - out[:, 0]
        return out

    ring, la_n = len(kps.endo) - 1, len(kps.la) - 1
    lm = kps.landmarks
    new = {
        "A": ring - lm["B"], "B": ring - lm["A"], "E": ring - lm["E"],
        "C": ring - lm["D"], "D": ring - lm["C"], "F": ring - lm["F"],
        "G": la_n - lm["G"],
    }
    return kps.copy(endo=flip(kps.endo), epi=flip(kps.epi), la=flip(kps.la), landmarks=new)


# ---------------------------------------------------------------------------
# keypoint files

def keypoints_to_dict(kps):
    return {
        "version": KEYPOINT_FILE_VERSION,
        "n_side": kps.n_side,
        "m_side": kps.m_side,
        "width": kps.width,
        "height": kps.height,
        "endo": kps.endo.tolist(),
        "epi": kps.epi.tolist(),
        "la": kps.la.tolist(),
        "landmarks": {k: int(kps.landmarks[k]) for k in "ABCDEFG"},
        "spacing": None if kps.spacing is None else [kps.spacing.sx, kps.spacing.sy],
    }


def keypoints_from_dict(doc):
    if doc.get("version") != KEYPOINT_FILE_VERSION:
        raise LayoutMismatch(f"unsupported keypoint file version {doc.get('version')!r}")
    spacing = doc.get("spacing")
    return KeypointSet(
        endo=doc["endo"], epi=doc["epi"], la=doc["la"], n_side=doc["n_side"], m_side=doc["m_side"],
        width=doc.get("width", 256), height=doc.get("height", 256),
        landmarks={k: int(v) for k, v in doc["landmarks"].items()},
        spacing=None if spacing is None else PixelSpacing(*spacing),
    )


def save_keypoints(path, kps):
    with open(path, "w") as fh:
        json.dump(keypoints_to_dict(kps), fh, indent=1)
        fh.write("\n")


def load_keypoints(path):
    with open(path) as fh:
        return keypoints_from_dict(json.load(fh))
