"""File formats shared by the pipeline stages.

Covers RGB tiles, 16-bit label images, boundary GeoJSON, QC overlays,
deterministic JSON, and content hashing. Every writer here produces
byte-identical output for identical input, which the run manifest relies
on.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .cellfeatures import mask_outline
from .errors import MissingInputError

_OVERLAY_COLORS = {
    "tumor": (220, 40, 40),
    "stroma": (40, 160, 60),
}
_OVERLAY_FALLBACK = (60, 90, 220)


def save_rgb_png(path, pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8 pixels")
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def load_rgb_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError as exc:
        raise MissingInputError(str(exc)) from exc


def save_label_png(path, labels: np.ndarray) -> None:
    """Label image as 16-bit grayscale PNG; 0 is background."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ValueError("labels out of uint16 range")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def load_label_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img).astype(np.int32)
    except FileNotFoundError as exc:
        raise MissingInputError(str(exc)) from exc


def _ring_um(mask: np.ndarray, offset_rc, pixel_size: float):
    """Closed, counter-clockwise boundary ring of one mask, micrometers."""
    poly = mask_outline(mask)
    xs = (poly[:, 1] + offset_rc[1] + 0.5) * pixel_size
    ys = (poly[:, 0] + offset_rc[0] + 0.5) * pixel_size
    signed = 0.5 * float(np.sum(xs * np.roll(ys, -1) - np.roll(xs, -1) * ys))
    if signed < 0:
        xs = xs[::-1]
        ys = ys[::-1]
    ring = [[float(x), float(y)] for x, y in zip(xs, ys)]
    ring.append(ring[0])
    return ring


def cells_to_geojson(cells, properties=None) -> dict:
    """Nucleus and cell boundaries of segmented cells as GeoJSON.

    Each cell yields two Polygon features tagged with ``cell_id`` and
    ``kind`` (nucleus or cell); ``properties`` adds shared tags, and a
    per-cell dict in ``properties['per_cell']`` (keyed by id) adds
    cell-specific ones such as predicted labels.
    """
    shared = dict(properties or {})
    per_cell = shared.pop("per_cell", {})
    features = []
    for cell in cells:
        offset = (cell.bbox[0], cell.bbox[1])
        tags = {"cell_id": cell.id, **shared, **per_cell.get(cell.id, {})}
        for kind, mask in (("nucleus", cell.nucleus_mask),
                           ("cell", cell.cell_mask)):
            features.append({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [_ring_um(mask, offset, cell.pixel_size)],
                },
                "properties": {**tags, "kind": kind},
            })
    return {"type": "FeatureCollection", "features": features}


def render_overlay(rgb: np.ndarray, cells, predicted: dict) -> np.ndarray:
    """Paint nucleus boundaries onto a tile, colored by predicted label."""
    out = rgb.copy()
    for cell in cells:
        color = _OVERLAY_COLORS.get(predicted.get(cell.id), _OVERLAY_FALLBACK)
        nuc = cell.nucleus_mask
        boundary = nuc & ~ndi.binary_erosion(nuc)
        rows, cols = np.nonzero(boundary)
        out[rows + cell.bbox[0], cols + cell.bbox[1]] = color
    return out


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed layout, trailing newline."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=_jsonable)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise MissingInputError(str(exc)) from exc


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
