"""Seeded synthetic H&E cohort for end-to-end validation.

Each ROI is rendered in optical density space: tumor nuclei are circles
whose radius and hematoxylin uptake differ by histotype, stroma nuclei
are thin oriented ellipses, and the two stain planes are mixed through
the default stain basis and quantized to RGB. Ground truth (every
rendered nucleus plus region/point annotations) is emitted alongside, so
segmentation, labeling, and classification can be scored exactly.

Generation is deterministic per (seed, subject, roi): each ROI owns one
RNG stream and draws in a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .errors import PlacementOverflowError
from .stains import StainMatrix, od_to_rgb

CLASS_POSITIVE = "HGSOC"
CLASS_NEGATIVE = "SBOT"
CLASS_NAMES = (CLASS_POSITIVE, CLASS_NEGATIVE)

_PLACEMENT_ATTEMPTS = 100
_MIN_PLACED_FRACTION = 0.5
_HULL_PAD_PX = 8.0
_CLUSTER_CENTER_MARGIN_PX = 80.0


@dataclass(frozen=True)
class ClassParams:
    """Nucleus geometry and stain uptake for one histotype.

    Lengths are micrometers; densities are nuclei per mm^2. Tumor nuclei
    are circles with truncated-normal radii; stroma nuclei share fixed
    elliptical semi-axes with uniform orientation.
    """

    tumor_radius_mean: float
    tumor_radius_std: float
    tumor_radius_min: float = 2.0
    tumor_hema_mean: float = 0.9
    tumor_hema_std: float = 0.2
    tumor_eosin_mean: float = 0.2
    tumor_eosin_std: float = 0.05
    stroma_semi_axes: tuple = (4.0, 1.5)
    stroma_hema_mean: float = 0.6
    stroma_hema_std: float = 0.08
    stroma_eosin_mean: float = 0.3
    stroma_eosin_std: float = 0.05
    tumor_density_per_mm2: float = 1200.0
    stroma_density_per_mm2: float = 1200.0
    cluster_sigma: float = 15.0
    cells_per_cluster: int = 25
    tumor_outlier_fraction: float = 0.05

    def __post_init__(self):
        if not (self.tumor_radius_mean > 0 and self.tumor_radius_std > 0):
            raise ValueError("tumor radius parameters must be positive")
        if not (0 < self.tumor_radius_min <= self.tumor_radius_mean):
            raise ValueError("tumor_radius_min must be in (0, mean]")
        if min(self.stroma_semi_axes) <= 0:
            raise ValueError("stroma semi-axes must be positive")
        if min(self.tumor_density_per_mm2, self.stroma_density_per_mm2) <= 0:
            raise ValueError("densities must be positive")
        if not (0 <= self.tumor_outlier_fraction < 1):
            raise ValueError("tumor_outlier_fraction must be in [0, 1)")


def default_class_params() -> dict:
    """Histotype defaults: large variable HGSOC nuclei, small uniform SBOT."""
    return {
        CLASS_POSITIVE: ClassParams(tumor_radius_mean=4.0,
                                    tumor_radius_std=1.2,
                                    tumor_hema_mean=0.9, tumor_hema_std=0.2),
        CLASS_NEGATIVE: ClassParams(tumor_radius_mean=3.2,
                                    tumor_radius_std=0.4,
                                    tumor_hema_mean=0.7, tumor_hema_std=0.1),
    }


@dataclass(frozen=True)
class CohortSpec:
    """Size, resolution, and per-class parameters of a synthetic cohort."""

    n_subjects_per_class: int = 15
    rois_per_subject: int = 10
    roi_size_px: tuple = (1024, 1024)
    pixel_size: float = 0.25
    min_amplitude: float = 0.05
    seed: int = 7
    class_params: dict = field(default_factory=default_class_params)

    def __post_init__(self):
        if self.n_subjects_per_class < 1 or self.rois_per_subject < 1:
            raise ValueError("cohort dimensions must be at least 1")
        if min(self.roi_size_px) < 64:
            raise ValueError("roi_size_px must be at least 64 px")
        if not (self.pixel_size > 0):
            raise ValueError("pixel_size must be positive")
        missing = [c for c in CLASS_NAMES if c not in self.class_params]
        if missing:
            raise ValueError(f"class_params missing {missing}")

    def subject_ids(self, class_name: str) -> list:
        return [f"{class_name.lower()}_{i + 1:02d}"
                for i in range(self.n_subjects_per_class)]

    def roi_ids(self) -> list:
        return [f"roi_{r:02d}" for r in range(self.rois_per_subject)]

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["class_params"] = {k: asdict(v)
                               for k, v in self.class_params.items()}
        return doc


def _truncated_normal(rng, mean: float, std: float, minimum: float) -> float:
    for _ in range(1000):
        value = rng.normal(mean, std)
        if value >= minimum:
            return float(value)
    return minimum


def _ellipse_coverage(shape, cx, cy, a, b, theta, supersample: int = 4):
    """Sub-pixel area coverage of one ellipse.

    Pixel (r, c) spans [r, r+1) x [c, c+1); coverage is the fraction of
    its supersample grid falling inside the ellipse. Returns the window
    slices and the coverage patch.
    """
    h, w = shape
    reach = max(a, b) + 1.0
    r0 = max(int(math.floor(cy - reach)), 0)
    r1 = min(int(math.ceil(cy + reach)) + 1, h)
    c0 = max(int(math.floor(cx - reach)), 0)
    c1 = min(int(math.ceil(cx + reach)) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return None
    ss = supersample
    ys = r0 + (np.arange((r1 - r0) * ss) + 0.5) / ss
    xs = c0 + (np.arange((c1 - c0) * ss) + 0.5) / ss
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    u = (dx * cos_t + dy * sin_t) / a
    v = (-dx * sin_t + dy * cos_t) / b
    inside = (u * u + v * v) <= 1.0
    coverage = inside.reshape(r1 - r0, ss, c1 - c0, ss).mean(axis=(1, 3))
    return (slice(r0, r1), slice(c0, c1)), coverage


def _fits(cx, cy, max_semi, placed, w, h) -> bool:
    if not (max_semi + 2 <= cx <= w - max_semi - 2
            and max_semi + 2 <= cy <= h - max_semi - 2):
        return False
    for other in placed:
        min_gap = max_semi + other["max_semi"] + 2.0
        if (cx - other["cx"]) ** 2 + (cy - other["cy"]) ** 2 < min_gap ** 2:
            return False
    return True


def _cluster_hull_ring(members, pad_px: float) -> np.ndarray:
    """Convex hull around cluster members, padded beyond each nucleus."""
    pts = []
    angles = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
    for cell in members:
        reach = cell["max_semi"] + pad_px
        for ang in angles:
            pts.append((cell["cx"] + reach * math.cos(ang),
                        cell["cy"] + reach * math.sin(ang)))
    pts = np.asarray(pts)
    hull = ConvexHull(pts)
    return pts[hull.vertices]


def _point_in_ring(x, y, ring) -> bool:
    n = ring.shape[0]
    inside = False
    x0, y0 = ring[n - 1]
    for i in range(n):
        x1, y1 = ring[i]
        if (y1 > y) != (y0 > y):
            t = (y - y1) / (y0 - y1)
            if x < x1 + t * (x0 - x1):
                inside = not inside
        x0, y0 = x1, y1
    return inside


def generate_roi(spec: CohortSpec, class_name: str, subject_index: int,
                 roi_index: int):
    """Render one ROI and its ground truth.

    ``subject_index`` is the cohort-global subject number, so every
    (seed, subject, roi) triple owns an independent RNG stream.

    Returns
    -------
    rgb : (H, W, 3) uint8
    truth : dict
        Per-nucleus records (center px, semi-axes px, orientation, stain
        amplitudes, cluster) plus requested/placed counts.
    annotations : dict
        GeoJSON FeatureCollection: a whole-ROI stroma polygon, one padded
        convex hull per tumor cluster, stroma points for stroma nuclei
        inside a hull, and tumor points for off-cluster tumor nuclei.
    """
    params = spec.class_params[class_name]
    h, w = spec.roi_size_px
    ps = spec.pixel_size
    rng = np.random.default_rng((spec.seed, subject_index, roi_index))

    area_mm2 = (h * ps / 1000.0) * (w * ps / 1000.0)
    n_tumor = int(round(params.tumor_density_per_mm2 * area_mm2))
    n_stroma = int(round(params.stroma_density_per_mm2 * area_mm2))
    n_clusters = max(1, int(round(n_tumor / params.cells_per_cluster)))
    sigma_px = params.cluster_sigma / ps

    margin = min(_CLUSTER_CENTER_MARGIN_PX, w / 4, h / 4)
    centers = rng.uniform((margin, margin), (w - margin, h - margin),
                          size=(n_clusters, 2))

    placed = []
    for _ in range(n_tumor):
        radius_px = _truncated_normal(rng, params.tumor_radius_mean,
                                      params.tumor_radius_std,
                                      params.tumor_radius_min) / ps
        hema = max(rng.normal(params.tumor_hema_mean, params.tumor_hema_std),
                   spec.min_amplitude)
        eosin = max(rng.normal(params.tumor_eosin_mean,
                               params.tumor_eosin_std), spec.min_amplitude)
        outlier = rng.uniform() < params.tumor_outlier_fraction
        cluster = -1 if outlier else int(rng.integers(n_clusters))
        for _ in range(_PLACEMENT_ATTEMPTS):
            if outlier:
                cx, cy = rng.uniform((0.0, 0.0), (w, h))
            else:
                cx, cy = centers[cluster] + rng.normal(0.0, sigma_px, size=2)
            if _fits(cx, cy, radius_px, placed, w, h):
                placed.append({
                    "type": "tumor", "cx": float(cx), "cy": float(cy),
                    "a": float(radius_px), "b": float(radius_px),
                    "theta": 0.0, "max_semi": float(radius_px),
                    "hema": float(hema), "eosin": float(eosin),
                    "cluster": cluster,
                })
                break

    axes_px = (params.stroma_semi_axes[0] / ps,
               params.stroma_semi_axes[1] / ps)
    max_semi = max(axes_px)
    for _ in range(n_stroma):
        theta = float(rng.uniform(0.0, np.pi))
        hema = max(rng.normal(params.stroma_hema_mean,
                              params.stroma_hema_std), spec.min_amplitude)
        eosin = max(rng.normal(params.stroma_eosin_mean,
                               params.stroma_eosin_std), spec.min_amplitude)
        for _ in range(_PLACEMENT_ATTEMPTS):
            cx, cy = rng.uniform((0.0, 0.0), (w, h))
            if _fits(cx, cy, max_semi, placed, w, h):
                placed.append({
                    "type": "stroma", "cx": float(cx), "cy": float(cy),
                    "a": float(axes_px[0]), "b": float(axes_px[1]),
                    "theta": theta, "max_semi": float(max_semi),
                    "hema": float(hema), "eosin": float(eosin),
                    "cluster": -1,
                })
                break

    requested = n_tumor + n_stroma
    if len(placed) < _MIN_PLACED_FRACTION * requested:
        raise PlacementOverflowError(
            f"placed {len(placed)} of {requested} nuclei; densities too high")

    hema_plane = np.zeros((h, w))
    eosin_plane = np.zeros((h, w))
    for cell in placed:
        hit = _ellipse_coverage((h, w), cell["cx"], cell["cy"],
                                cell["a"], cell["b"], cell["theta"])
        if hit is None:
            continue
        window, coverage = hit
        hema_plane[window] += coverage * cell["hema"]
        eosin_plane[window] += coverage * cell["eosin"]

    stains = StainMatrix()
    od = (hema_plane[:, :, None] * stains.hematoxylin
          + eosin_plane[:, :, None] * stains.eosin)
    rgb = od_to_rgb(od)

    # annotations: base stroma rectangle, padded hulls over clusters,
    # points for every nucleus the polygons would mislabel
    rect = [[0.0, 0.0], [w * ps, 0.0], [w * ps, h * ps], [0.0, h * ps],
            [0.0, 0.0]]
    features = [{
        "type": "Feature",
        "geometry": {"type": "Polygon", "coordinates": [rect]},
        "properties": {"label": "stroma"},
    }]
    hull_rings = []
    for cluster in range(n_clusters):
        members = [c for c in placed if c["cluster"] == cluster]
        if not members:
            continue
        ring = _cluster_hull_ring(members, _HULL_PAD_PX)
        hull_rings.append(ring)
        ring_um = [[float(x * ps), float(y * ps)] for x, y in ring]
        ring_um.append(ring_um[0])
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring_um]},
            "properties": {"label": "tumor"},
        })
    for cell in placed:
        in_hull = any(_point_in_ring(cell["cx"], cell["cy"], ring)
                      for ring in hull_rings)
        point_label = None
        if cell["type"] == "stroma" and in_hull:
            point_label = "stroma"
        elif cell["type"] == "tumor" and not in_hull:
            point_label = "tumor"
        if point_label:
            features.append({
                "type": "Feature",
                "geometry": {"type": "Point",
                             "coordinates": [cell["cx"] * ps,
                                             cell["cy"] * ps]},
                "properties": {"label": point_label},
            })
    annotations = {"type": "FeatureCollection", "features": features}

    cells = [{k: cell[k] for k in ("type", "cx", "cy", "a", "b", "theta",
                                   "hema", "eosin", "cluster")}
             for cell in placed]
    truth = {
        "class": class_name,
        "subject_index": subject_index,
        "roi_index": roi_index,
        "requested": {"tumor": n_tumor, "stroma": n_stroma},
        "placed": {
            "tumor": sum(1 for c in placed if c["type"] == "tumor"),
            "stroma": sum(1 for c in placed if c["type"] == "stroma"),
        },
        "cells": cells,
    }
    return rgb, truth, annotations
