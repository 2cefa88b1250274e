"""Deterministic synthetic apical-view phantoms and paired image/keypoint augmentation."""
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy import ndimage

from .errors import InfeasibleGeometry, RetriesExhausted
from .imaging import BG, LA, LV, MYO, STRUCTURES, largest_component
from .keypoints import mirror_keypoints


@dataclass(frozen=True)
class PhantomParams:
    """Sampling ranges, in pixels of a ``size`` x ``size`` frame, for one phantom.

    The LV is the upper part of an ellipse whose centre sits ``base_drop`` (as a
    fraction of the long axis) below the base line; the myocardium is the band
    between that ellipse and a larger concentric one; the LA is an ellipse
    truncated by the base line on the other side.
    """

    size: int = 256
    lv_half_width: tuple = (19.0, 25.0)
    lv_length: tuple = (72.0, 92.0)
    base_drop: tuple = (0.0, 0.12)
    myo_thickness: tuple = (8.0, 12.0)
    apex_thickness_ratio: tuple = (0.85, 1.2)
    la_half_width_extra: tuple = (4.0, 10.0)
    la_height: tuple = (30.0, 42.0)
    rotation_deg: tuple = (-10.0, 10.0)
    base_x: tuple = (122.0, 134.0)
    base_y: tuple = (158.0, 170.0)
    speckle: float = 0.3
    sector_half_angle_deg: float = 42.0
    sector_apex_y: float = 6.0
    sector_depth: float = 246.0

    def fixed(self, **values):
        """Copy with the given ranges collapsed to single values."""
        return replace(self, **{k: (float(v), float(v)) for k, v in values.items()})

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PhantomGeometry:
    size: int
    lv_half_width: float
    lv_length: float
    base_drop: float
    myo_thickness: float
    apex_thickness: float
    la_half_width: float
    la_height: float
    rotation_deg: float
    base_x: float
    base_y: float
    scale: float = 1.0

    @property
    def axes(self):
        th = np.deg2rad(self.rotation_deg)
        lateral = np.array([np.cos(th), np.sin(th)])
        apical = np.array([np.sin(th), -np.cos(th)])  # theta = 0 points up the screen
        return lateral, apical

    @property
    def base_mid(self):
        return np.array([self.base_x, self.base_y])

    def _scaled(self, v):
        return v * self.scale

    def local(self, x, y):
        lateral, apical = self.axes
        dx, dy = x - self.base_x, y - self.base_y
        return dx * lateral[0] + dy * lateral[1], dx * apical[0] + dy * apical[1]

    def to_screen(self, u, h):
        lateral, apical = self.axes
        return self.base_mid + u * lateral + h * apical

    def _ellipse(self):
        a = self._scaled(self.lv_half_width)
        length = self._scaled(self.lv_length)
        drop = self.base_drop * length
        # semi-axis b puts the apex ``length`` above the base line
        b = length + drop
        # stretch the horizontal semi-axis so the annulus half-width equals ``a``
        a_full = a / np.sqrt(1.0 - (drop / b) ** 2)
        return a_full, b, drop

    def labels(self, x, y):
        u, h = self.local(x, y)
        a, b, drop = self._ellipse()
        t = self._scaled(self.myo_thickness)
        ta = self._scaled(self.apex_thickness)
        ventricle_side = h >= 0
        lv = ventricle_side & ((u / a) ** 2 + ((h + drop) / b) ** 2 <= 1.0)
        outer = ventricle_side & ((u / (a + t)) ** 2 + ((h + drop) / (b + ta)) ** 2 <= 1.0)
        wl, hl = self._scaled(self.la_half_width), self._scaled(self.la_height)
        centre = 0.2 * hl
        la = (~ventricle_side) & ((u / wl) ** 2 + ((h - centre) / hl) ** 2 <= 1.0)
        out = np.zeros(np.broadcast(x, y).shape, dtype=np.uint8)
        out[la] = LA
        out[outer & ~lv] = MYO
        out[lv] = LV
        return out

    def designed_annulus(self):
        a = self._scaled(self.lv_half_width)
        return self.to_screen(-a, 0.0), self.to_screen(a, 0.0)

    def designed_apex(self):
        return self.to_screen(0.0, self._scaled(self.lv_length))

    def extent_points(self):
        a, b, drop = self._ellipse()
        t, ta = self._scaled(self.myo_thickness), self._scaled(self.apex_thickness)
        wl, hl = self._scaled(self.la_half_width), self._scaled(self.la_height)
        pts = [
            (0.0, b - drop + ta), (-(a + t), 0.0), (a + t, 0.0),
            (-wl, 0.0), (wl, 0.0), (0.0, 0.2 * hl - hl),
        ]
        return np.array([self.to_screen(u, h) for u, h in pts])


def sample_geometry(seed, params=None, scale=1.0):
    params = params or PhantomParams()
    rng = np.random.default_rng(seed)

    def draw(rng_range):
        lo, hi = rng_range
        return float(rng.uniform(lo, hi))

    half_width = draw(params.lv_half_width)
    thickness = draw(params.myo_thickness)
    geom = PhantomGeometry(
        size=params.size,
        lv_half_width=half_width,
        lv_length=draw(params.lv_length),
        base_drop=draw(params.base_drop),
        myo_thickness=thickness,
        apex_thickness=thickness * draw(params.apex_thickness_ratio),
        la_half_width=half_width + thickness + draw(params.la_half_width_extra),
        la_height=draw(params.la_height),
        rotation_deg=draw(params.rotation_deg),
        base_x=draw(params.base_x),
        base_y=draw(params.base_y),
        scale=scale,
    )
    if geom.myo_thickness <= 0 or geom.apex_thickness <= 0:
        raise InfeasibleGeometry("myocardial thickness must be positive")
    ext = geom.extent_points()
    if ext.min() < 3 or ext.max() > params.size - 3:
        raise InfeasibleGeometry(f"phantom for seed {seed} does not fit in the frame")
    return geom


def sector_mask(params):
    size = params.size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    apex = np.array([size / 2.0, params.sector_apex_y])
    dx, dy = xx - apex[0], yy - apex[1]
    r = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(dx, dy))
    return (dy > 0) & (np.abs(ang) <= params.sector_half_angle_deg) & (r <= params.sector_depth)


INTENSITY = {0: 0.32, LV: 0.06, MYO: 0.72, LA: 0.08}


def render(geom, params, seed):
    size = params.size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = geom.labels(xx, yy)
    # the base-line truncation can leave diagonal single-pixel slivers
    for s in STRUCTURES:
        region = mask == s
        mask[region & ~largest_component(region)] = BG
    rng = np.random.default_rng([seed, 1])
    mean = np.choose(mask, [INTENSITY[0], INTENSITY[LV], INTENSITY[MYO], INTENSITY[LA]])
    k = 1.0 / max(params.speckle, 1e-6) ** 2
    speckle = rng.gamma(k, 1.0 / k, size=mask.shape)
    img = ndimage.gaussian_filter(mean * speckle, 0.7)
    img = np.clip(img * sector_mask(params), 0.0, 1.0).astype(np.float32)
    return img, mask


def generate_phantom(seed, params=None, scale=1.0):
    """Return ``(image, mask)`` for ``seed``; bit-identical across calls."""
    params = params or PhantomParams()
    geom = sample_geometry(seed, params, scale)
    return render(geom, params, seed)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 10.0
    scale: tuple = (0.9, 1.1)
    crop: float = 0.1
    brightness: float = 0.1
    mirror_prob: float = 0.5
    max_retries: int = 20

    @classmethod
    def identity(cls):
        return cls(rotation_deg=0.0, scale=(1.0, 1.0), crop=0.0, brightness=0.0, mirror_prob=0.0)

    def to_dict(self):
        return asdict(self)


def affine_matrix(width, height, rotation_deg=0.0, scale=1.0, crop_frac=1.0, crop_offset=(0.0, 0.0)):
    """``(M, t)`` mapping source pixel coordinates to augmented ones: p' = M p + t.

    The rotation/scale act about the frame centre; the crop keeps a window of
    ``crop_frac`` times the frame starting at ``crop_offset`` (pixels) and
    stretches it back to full size.
    """
    th = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    c = np.array([width / 2.0, height / 2.0])
    m = scale * rot
    t = c - m @ c
    off = np.asarray(crop_offset, dtype=np.float64)
    return m / crop_frac, (t - off) / crop_frac


def warp_image(img, m, t):
    """Bilinear warp so that output(p') = input(M^-1 (p' - t)), pixel-centre convention."""
    minv = np.linalg.inv(m)
    # work in (row, col) index space: idx = cont - 0.5, with axes swapped
    swap = np.array([[0, 1], [1, 0]])
    mi = swap @ minv @ swap
    t_rc = swap @ t
    offset = mi @ (0.5 - t_rc) - 0.5
    return ndimage.affine_transform(img, mi, offset=offset, order=1, mode="constant", cval=0.0)


def transform_keypoints(kps, m, t):
    scale = np.array([kps.width, kps.height], dtype=np.float64)

    def tf(arr):
        return ((arr * scale) @ m.T + t) / scale

    return kps.copy(endo=tf(kps.endo), epi=tf(kps.epi), la=tf(kps.la))


def _in_frame(kps):
    return all(a.min() >= 0.0 and a.max() <= 1.0 for a in (kps.endo, kps.epi, kps.la))


def augment(img, kps, cfg=None, seed=0):
    """Apply one random geometric + brightness augmentation to an image/keypoint pair."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    h, w = img.shape
    for _ in range(max(1, cfg.max_retries)):
        mirror = rng.random() < cfg.mirror_prob
        rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if cfg.rotation_deg else 0.0
        sc = rng.uniform(*cfg.scale) if cfg.scale[0] != cfg.scale[1] else cfg.scale[0]
        frac = 1.0 - rng.uniform(0.0, cfg.crop) if cfg.crop else 1.0
        off = rng.uniform(0.0, 1.0 - frac, size=2) * np.array([w, h]) if cfg.crop else np.zeros(2)
        delta = rng.uniform(-cfg.brightness, cfg.brightness) if cfg.brightness else 0.0
        src_img, src_kps = (np.fliplr(img), mirror_keypoints(kps)) if mirror else (img, kps)
        m, t = affine_matrix(w, h, rot, sc, frac, off)
        out_kps = transform_keypoints(src_kps, m, t)
        if not _in_frame(out_kps):
            continue
        if np.allclose(m, np.eye(2)) and np.allclose(t, 0):
            out_img = np.array(src_img, copy=True)
        else:
            out_img = warp_image(np.asarray(src_img, dtype=np.float32), m, t)
        if delta:
            out_img = np.clip(out_img + delta, 0.0, 1.0)
        return out_img.astype(np.float32), out_kps
    raise RetriesExhausted(f"keypoints left the frame in {cfg.max_retries} attempts")


# ---------------------------------------------------------------------------
# second mask source and synthetic exams

def corrupt_mask(mask, kind="erode", amount=1, seed=0):
    """Controlled corruption of a label mask.

    ``erode`` peels ``amount`` pixels off every structure, ``shift`` translates
    the whole mask by ``amount`` pixels in a seed-chosen direction, ``none``
    returns a copy.
    """
    mask = np.asarray(mask)
    if kind == "none" or amount == 0:
        return mask.copy()
    if kind == "erode":
        out = np.zeros_like(mask)
        for s in STRUCTURES:
            region = ndimage.binary_erosion(mask == s, iterations=int(amount))
            out[region] = s
        return out
    if kind == "shift":
        rng = np.random.default_rng(seed)
        th = rng.uniform(0, 2 * np.pi)
        dr, dc = int(round(amount * np.sin(th))), int(round(amount * np.cos(th)))
        return ndimage.shift(mask, (dr, dc), order=0, mode="constant", cval=BG).astype(mask.dtype)
    raise ValueError(f"unknown corruption {kind!r}")


@dataclass(frozen=True)
class ExamConfig:
    n_cycles: int = 2
    es_scale: tuple = (0.72, 0.88)
    spacing: float = 0.9  # mm per pixel, both axes
    seed_offset: int = 100000

    def to_dict(self):
        return asdict(self)


def exam_frames(patient, cfg=None, params=None):
    """Frames of one synthetic exam.

    Returns ``(cycles, frames)`` where ``frames`` maps a frame id to
    ``(image, mask)`` and ``cycles[view]`` lists ``(ed_id, es_id)`` pairs.  Each
    view uses its own geometry; ES frames shrink the ED geometry about the base.
    """
    cfg = cfg or ExamConfig()
    params = params or PhantomParams()
    rng = np.random.default_rng(cfg.seed_offset + patient)
    cycles, frames = {}, {}
    for v, view in enumerate(("A2C", "A4C")):
        seed = cfg.seed_offset + 10 * patient + v
        cycles[view] = []
        for c in range(cfg.n_cycles):
            es = float(rng.uniform(*cfg.es_scale))
            ids = []
            for phase, scale in (("ED", 1.0), ("ES", es)):
                fid = f"P{patient:04d}_{view}_c{c}_{phase}"
                geom = sample_geometry(seed, params, scale)
                frames[fid] = render(geom, params, seed * 4 + 2 * c + (phase == "ES"))
                ids.append(fid)
            cycles[view].append(tuple(ids))
    return cycles, frames
