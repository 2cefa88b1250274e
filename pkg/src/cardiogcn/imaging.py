"""Pixel-domain primitives: label masks, boundary tracing, polygon fill, components, resizing.

Coordinate convention used throughout the package: a point is ``(x, y)`` in
continuous pixel units, pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)``
and its centre sits at ``(col + 0.5, row + 0.5)``.  Normalised coordinates divide
by ``(width, height)``.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateGeometry, LabelAbsent

BG, LV, MYO, LA = 0, 1, 2, 3
LABELS = {"BG": BG, "LV": LV, "MYO": MYO, "LA": LA}
STRUCTURES = (LV, MYO, LA)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)

# Moore neighbourhood in clockwise screen order (rows grow downwards), starting west.
_MOORE = np.array([(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)])
_MOORE_INDEX = {tuple(d): i for i, d in enumerate(_MOORE)}


@dataclass(frozen=True)
class PixelSpacing:
    """Millimetres per pixel along x (columns) and y (rows)."""

    sx: float
    sy: float

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise ValueError(f"pixel spacing must be positive, got ({self.sx}, {self.sy})")

    def as_array(self):
        return np.array([self.sx, self.sy], dtype=np.float64)


def validate_image(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError("image must be floating point in [0, 1]")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return img


def validate_mask(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("label mask must be 2-D")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValueError("label mask must be integer typed")
    if mask.size and (mask.min() < 0 or mask.max() > LA):
        raise ValueError("label mask codes must be in {0, 1, 2, 3}")
    return mask


def component_labels(binary):
    """4-connected labelling with components renumbered 1..k by size (desc), ties by first pixel."""
    labelled, count = ndimage.label(binary, structure=FOUR_CONNECTED)
    if count == 0:
        return labelled, np.zeros(0, dtype=np.int64)
    sizes = np.bincount(labelled.ravel(), minlength=count + 1)[1:]
    # ndimage numbers components in raster order of their first pixel; a stable
    # sort on -size therefore breaks ties by first pixel.
    order = np.argsort(-sizes, kind="stable")
    remap = np.zeros(count + 1, dtype=labelled.dtype)
    remap[order + 1] = np.arange(1, count + 1)
    return remap[labelled], sizes[order]


def connected_components(mask, label):
    """Return ``(count, sizes)`` of the 4-connected components carrying ``label``."""
    _, sizes = component_labels(np.asarray(mask) == label)
    return len(sizes), [int(s) for s in sizes]


def largest_component(binary):
    labelled, sizes = component_labels(binary)
    if len(sizes) == 0:
        return np.zeros_like(binary, dtype=bool)
    return labelled == 1


def trace_boundary(region):
    """Moore-neighbour trace of a single 8-connected region.

    Returns integer ``(row, col)`` pairs in counter-clockwise screen order,
    starting at the topmost-then-leftmost pixel.
    """
    region = np.asarray(region, dtype=bool)
    rows, cols = np.nonzero(region)
    if rows.size == 0:
        raise LabelAbsent("empty region")
    h, w = region.shape
    start = (int(rows[0]), int(cols[0]))  # np.nonzero is row-major

    def inside(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and region[p]

    contour = [start]
    current = start
    back = 0  # west of the start pixel is outside by construction
    while True:
        nxt = None
        for k in range(1, 9):
            d = (back + k) % 8
            cand = (current[0] + _MOORE[d][0], current[1] + _MOORE[d][1])
            if inside(cand):
                prev = (back + k - 1) % 8
                bpix = (current[0] + _MOORE[prev][0], current[1] + _MOORE[prev][1])
                nxt = cand
                back = _MOORE_INDEX[(bpix[0] - cand[0], bpix[1] - cand[1])]
                break
        if nxt is None:
            return np.array(contour)  # isolated pixel
        if current == start and len(contour) > 1 and nxt == contour[1]:
            break
        contour.append(nxt)
        current = nxt
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    # the clockwise search yields a clockwise walk; flip to counter-clockwise
    ccw = [contour[0]] + contour[:0:-1]
    return np.array(ccw)


def extract_contour(mask, label, closed=True):
    """Outer boundary of the largest 4-connected component of ``label``.

    Points are pixel centres ``(x, y)`` in counter-clockwise screen order. With
    ``closed=False`` the start point is repeated at the end so the polyline
    closes explicitly.
    """
    mask = np.asarray(mask)
    binary = mask == label
    if not binary.any():
        raise LabelAbsent(f"no pixel carries label {label}")
    rc = trace_boundary(largest_component(binary))
    pts = np.stack([rc[:, 1] + 0.5, rc[:, 0] + 0.5], axis=1).astype(np.float64)
    if not closed:
        pts = np.vstack([pts, pts[:1]])
    return pts


def region_contour(region):
    """Boundary of the largest component of a boolean region, as pixel-centre ``(x, y)``."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise LabelAbsent("empty region")
    rc = trace_boundary(largest_component(region))
    return np.stack([rc[:, 1] + 0.5, rc[:, 0] + 0.5], axis=1).astype(np.float64)


def polygon_area(poly):
    poly = np.asarray(poly, dtype=np.float64)
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _check_polygon(poly, name):
    poly = np.asarray(poly, dtype=np.float64)
    if len(np.unique(np.round(poly, 12), axis=0)) < 3:
        raise DegenerateGeometry(f"{name} polygon has fewer than 3 distinct vertices")
    if abs(polygon_area(poly)) < 1e-9:
        raise DegenerateGeometry(f"{name} polygon has zero area")
    return poly


def fill_polygon(poly, width, height):
    """Even-odd scanline fill sampled at pixel centres (half-open crossing rule)."""
    poly = np.asarray(poly, dtype=np.float64)
    out = np.zeros((height, width), dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ylo, yhi = np.minimum(y0, y1), np.maximum(y0, y1)
    r_start = max(0, int(np.floor(ylo.min() - 0.5)))
    r_stop = min(height, int(np.ceil(yhi.max() + 0.5)))
    for r in range(r_start, r_stop):
        yc = r + 0.5
        active = (ylo <= yc) & (yc < yhi)
        if not active.any():
            continue
        t = (yc - y0[active]) / (y1[active] - y0[active])
        xs = np.sort(x0[active] + t * (x1[active] - x0[active]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            c0 = max(0, int(np.ceil(xa - 0.5)))
            c1 = min(width, int(np.ceil(xb - 0.5)))
            if c1 > c0:
                out[r, c0:c1] = True
    return out


def keypoint_polygons(kps, width=None, height=None):
    """Pixel-unit polygons ``(lv, myo, la, wedges)`` of a KeypointSet.

    The polygons share their base edges so that together they tile the region
    without slivers:

    * LV: endo ring, closed by the chord B -> A
    * MYO: epi ring C..D, then D -> B -> A -> C (LV removed afterwards)
    * LA: A, the LA points, B
    * wedges: convex corner patches between the myocardial base edges (A -> C,
      B -> D) and the LA chain, unioned into the LA region.  Each is the hull
      of the two corner points, a point one pixel above the outer corner and
      the LA points up to the second one lying past C (resp. D) along the
      base direction.
    """
    width = kps.width if width is None else width
    height = kps.height if height is None else height
    scale = np.array([width, height], dtype=np.float64)
    endo, epi, la = kps.endo * scale, kps.epi * scale, kps.la * scale
    lm = kps.landmarks
    a, b = endo[lm["A"]], endo[lm["B"]]
    c, d = epi[lm["C"]], epi[lm["D"]]
    myo = np.vstack([epi, b[None], a[None]])
    la_poly = np.vstack([a[None], la, b[None]])
    wedges = (_corner_wedge(a, c, la), _corner_wedge(b, d, la[::-1]))
    return endo, myo, la_poly, wedges


def _corner_wedge(inner, outer, chain):
    base = outer - inner
    length = float(np.hypot(*base))
    if length == 0:
        return None
    u = base / length
    # a point one pixel off the base line, away from the atrium, closes the
    # notch tip between the epicardial wall and the atrium
    up = np.array([-u[1], u[0]])
    if np.dot(chain.mean(axis=0) - inner, up) > 0:
        up = -up
    t = (chain - inner) @ u
    past = np.flatnonzero(t >= length)
    stop = int(past[0]) + 2 if past.size else len(chain)
    pts = np.vstack([inner[None], outer[None], (outer + up)[None], chain[:stop]])
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return None
    return pts[hull.vertices]


def rasterize_keypoints(kps, width=None, height=None):
    """Label mask from keypoints; overlaps resolved LV > MYO > LA."""
    width = kps.width if width is None else width
    height = kps.height if height is None else height
    for name, arr in (("endo", kps.endo), ("epi", kps.epi), ("la", kps.la)):
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError(f"{name} keypoints outside [0, 1]")
    endo, myo_poly, la_poly, wedges = keypoint_polygons(kps, width, height)
    _check_polygon(endo, "LV")
    _check_polygon(myo_poly, "myocardium")
    _check_polygon(la_poly, "LA")
    lv = fill_polygon(endo, width, height)
    myo = fill_polygon(myo_poly, width, height) & ~lv
    la_fill = fill_polygon(la_poly, width, height)
    for w in wedges:
        if w is not None:
            la_fill |= fill_polygon(w, width, height)
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[la_fill] = LA
    mask[myo] = MYO
    mask[lv] = LV
    return mask


def resize(arr, height=256, width=256, kind=None):
    """Bilinear resize for images, nearest-neighbour for label masks.

    ``kind`` is ``"image"`` or ``"mask"``; inferred from the dtype when omitted.
    Sample positions follow the pixel-centre convention, so equal sizes are an
    exact identity.
    """
    arr = np.asarray(arr)
    if arr.size == 0:
        raise ValueError("cannot resize an empty array")
    if kind is None:
        kind = "mask" if np.issubdtype(arr.dtype, np.integer) else "image"
    h, w = arr.shape
    if (h, w) == (height, width):
        return arr.copy()
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    if kind == "mask":
        ri = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
        ci = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
        return arr[np.ix_(ri, ci)]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = arr.astype(np.float64)
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32)
