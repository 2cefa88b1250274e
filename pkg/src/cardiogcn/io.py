"""File formats: PNG rasters, JSON documents, CSV tables."""
import csv
import json
import os

import numpy as np
from PIL import Image


def save_image(path, img):
    """Float image in [0, 1] as a 16-bit grayscale PNG."""
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    return (arr.astype(np.float64) / scale).astype(np.float32)


def save_mask(path, mask):
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path)


def load_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.uint8)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, rows, columns=None):
    rows = [_clean(r) for r in rows]
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in columns})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def stems(directory, ext):
    """Sorted file stems with extension ``ext`` in ``directory``."""
    return sorted(f[: -len(ext)] for f in os.listdir(directory) if f.endswith(ext))
