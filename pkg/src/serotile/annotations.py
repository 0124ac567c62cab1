"""Region and point annotations, and their transfer onto segmented cells.

Annotations arrive as GeoJSON in tile coordinates (micrometers): polygon
features delimit tumor or stroma regions, point features pin the class of
the single cell containing them. A cell takes the label of the innermost
polygon containing its nucleus centroid; points override polygons.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, UnknownLabelError
from .segmentation import CellObject

KNOWN_LABELS = ("tumor", "stroma")

LABEL_TUMOR = "tumor"
LABEL_STROMA = "stroma"
LABEL_NONE = "unlabeled"


@dataclass(frozen=True)
class PolygonAnnotation:
    """A labeled region; ``rings[0]`` is the exterior, the rest holes."""

    label: str
    rings: tuple

    @property
    def area(self) -> float:
        return abs(polygon_area(self.rings[0]))

    def contains(self, x: float, y: float) -> bool:
        """Even-odd containment across all rings (holes punch out)."""
        crossings = 0
        for ring in self.rings:
            crossings += _ray_crossings(ring, x, y)
        return crossings % 2 == 1

    def sort_key(self):
        # content-derived, so results cannot depend on document order
        return (self.area, self.label, self.rings[0].tobytes())


@dataclass(frozen=True)
class PointAnnotation:
    label: str
    x: float
    y: float


@dataclass(frozen=True)
class AnnotationSet:
    polygons: tuple = field(default_factory=tuple)
    points: tuple = field(default_factory=tuple)


@dataclass(frozen=True)
class LabeledCell:
    cell: CellObject
    label: str
    source: str  # polygon | point | none


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise rings."""
    v = np.asarray(vertices, dtype=np.float64)
    x = v[:, 0]
    y = v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _ray_crossings(ring: np.ndarray, x: float, y: float) -> int:
    """Crossings of the ray from (x, y) toward +x with the ring edges."""
    n = ring.shape[0]
    crossings = 0
    x0, y0 = ring[n - 1]
    for i in range(n):
        x1, y1 = ring[i]
        if (y1 > y) != (y0 > y):
            t = (y - y1) / (y0 - y1)
            if x < x1 + t * (x0 - x1):
                crossings += 1
        x0, y0 = x1, y1
    return crossings


def point_in_polygon(x: float, y: float, vertices) -> bool:
    """Even-odd test of one point against a single ring."""
    ring = np.asarray(vertices, dtype=np.float64)
    return _ray_crossings(ring, x, y) % 2 == 1


def _parse_ring(raw, what: str) -> np.ndarray:
    if not isinstance(raw, list) or len(raw) < 3:
        raise ParseError(f"{what}: ring must list at least 3 positions")
    pts = []
    for pos in raw:
        if (not isinstance(pos, (list, tuple)) or len(pos) < 2
                or not all(isinstance(c, (int, float)) for c in pos[:2])):
            raise ParseError(f"{what}: malformed position {pos!r}")
        pts.append((float(pos[0]), float(pos[1])))
    if pts[0] == pts[-1]:
        pts = pts[:-1]  # GeoJSON rings close explicitly; store open
    if len(pts) < 3:
        raise ParseError(f"{what}: ring has fewer than 3 distinct vertices")
    return np.asarray(pts, dtype=np.float64)


def parse_annotations(document) -> AnnotationSet:
    """Parse a GeoJSON FeatureCollection of labeled polygons and points.

    Accepts a parsed dict or a JSON string. Every feature must carry a
    ``label`` property drawn from KNOWN_LABELS.

    Raises
    ------
    ParseError
        Malformed JSON, geometry, or missing label.
    UnknownLabelError
        A label outside the known set.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ParseError("annotation document must be a JSON object")
    if document.get("type") != "FeatureCollection":
        raise ParseError("expected a GeoJSON FeatureCollection")
    features = document.get("features")
    if not isinstance(features, list):
        raise ParseError("FeatureCollection without a features list")

    polygons = []
    points = []
    for i, feat in enumerate(features):
        what = f"feature {i}"
        if not isinstance(feat, dict) or feat.get("type") != "Feature":
            raise ParseError(f"{what}: not a Feature")
        props = feat.get("properties") or {}
        label = props.get("label")
        if label is None:
            raise ParseError(f"{what}: missing label property")
        if label not in KNOWN_LABELS:
            raise UnknownLabelError(f"{what}: unknown label {label!r}")
        geom = feat.get("geometry")
        if not isinstance(geom, dict):
            raise ParseError(f"{what}: missing geometry")
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if gtype == "Polygon":
            if not isinstance(coords, list) or not coords:
                raise ParseError(f"{what}: polygon without rings")
            rings = tuple(_parse_ring(ring, what) for ring in coords)
            polygons.append(PolygonAnnotation(label=label, rings=rings))
        elif gtype == "Point":
            if (not isinstance(coords, (list, tuple)) or len(coords) < 2
                    or not all(isinstance(c, (int, float)) for c in coords[:2])):
                raise ParseError(f"{what}: malformed point coordinates")
            points.append(PointAnnotation(label=label, x=float(coords[0]),
                                          y=float(coords[1])))
        else:
            raise ParseError(f"{what}: unsupported geometry type {gtype!r}")
    return AnnotationSet(polygons=tuple(polygons), points=tuple(points))


def _cell_contains_um(cell: CellObject, x: float, y: float) -> bool:
    col = math.floor(x / cell.pixel_size)
    row = math.floor(y / cell.pixel_size)
    r0, c0, r1, c1 = cell.bbox
    if not (r0 <= row < r1 and c0 <= col < c1):
        return False
    return bool(cell.cell_mask[row - r0, col - c0])


def assign_labels(cells, annotations: AnnotationSet):
    """Transfer annotation labels onto segmented cells.

    A cell is labeled by the innermost (smallest-area) polygon containing
    its nucleus centroid. A point annotation overrides any polygon label
    of the cell whose cell mask contains it; when several points land in
    one cell, the one nearest the nucleus centroid wins. Both rules are
    independent of feature order in the document.

    Returns
    -------
    labeled : list of LabeledCell, in input cell order
    summary : dict
        Counts: by_polygon, by_point, unlabeled, orphan_points (points
        inside no cell mask).
    """
    labels = []
    sources = []
    for cell in cells:
        x, y = cell.centroid_um
        containing = [p for p in annotations.polygons if p.contains(x, y)]
        if containing:
            innermost = min(containing, key=lambda p: p.sort_key())
            labels.append(innermost.label)
            sources.append("polygon")
        else:
            labels.append(LABEL_NONE)
            sources.append("none")

    # point overrides: nearest point per cell wins
    best_dist = [math.inf] * len(labels)
    orphans = 0
    ordered_points = sorted(annotations.points,
                            key=lambda p: (p.x, p.y, p.label))
    for point in ordered_points:
        hit = False
        for i, cell in enumerate(cells):
            if _cell_contains_um(cell, point.x, point.y):
                hit = True
                cx, cy = cell.centroid_um
                d = math.hypot(point.x - cx, point.y - cy)
                if d < best_dist[i]:
                    best_dist[i] = d
                    labels[i] = point.label
                    sources[i] = "point"
        if not hit:
            orphans += 1

    labeled = [LabeledCell(cell=c, label=l, source=s)
               for c, l, s in zip(cells, labels, sources)]
    summary = {
        "by_polygon": sum(1 for s in sources if s == "polygon"),
        "by_point": sum(1 for s in sources if s == "point"),
        "unlabeled": sum(1 for s in sources if s == "none"),
        "orphan_points": orphans,
    }
    return labeled, summary
