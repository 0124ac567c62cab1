"""Patch-level descriptors: pooled cell-feature statistics plus
tumor-stroma spatial interaction scores.

A tile is cut into non-overlapping square patches (edge remainders are
dropped) and cells join the patch containing their nucleus centroid. An
eligible patch summarizes each cell feature over its tumor and stroma
cells with seven order statistics, and adds the same statistics of a
Gaussian interaction score at five bandwidths: for every stroma cell, the
kernel density of tumor cells around it.
"""

from __future__ import annotations

import csv

import numpy as np

from .cellfeatures import CELL_FEATURE_NAMES, N_CELL_FEATURES
from .errors import (DimensionMismatchError, IneligiblePatchError,
                     NoTumorCellsError, RoiTooSmallError, TooFewRowsError)

STAT_NAMES = ("mean", "median", "std", "Q1", "Q3", "min", "max")
DEFAULT_BANDWIDTHS_UM = (16.0, 20.0, 24.0, 30.0, 34.0)
DEFAULT_PATCH_SIZE_PX = 512
DEFAULT_MIN_CELLS = 10
CELL_TYPES = ("tumor", "stroma")


def seven_stats(values) -> np.ndarray:
    """(mean, median, std, Q1, Q3, min, max) of a non-empty sample.

    Population std; quantiles use linear interpolation at rank q*(n-1).
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise TooFewRowsError("statistics of an empty sample")
    q1, med, q3 = np.quantile(arr, (0.25, 0.5, 0.75))
    return np.array([float(arr.mean()), float(med), float(arr.std()),
                     float(q1), float(q3), float(arr.min()),
                     float(arr.max())])


def kde_scores(stroma_xy, tumor_xy, bandwidth: float) -> np.ndarray:
    """Gaussian kernel density of tumor cells at each stroma cell.

    score_i = (1/n_t) * sum_j exp(-||s_i - t_j||^2 / (2 h^2)) / (2 pi h^2)
    with coordinates and bandwidth in micrometers.
    """
    s = np.asarray(stroma_xy, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(tumor_xy, dtype=np.float64).reshape(-1, 2)
    if t.shape[0] == 0:
        raise NoTumorCellsError("interaction scores need tumor cells")
    if not (bandwidth > 0):
        raise ValueError("bandwidth must be positive")
    h2 = bandwidth * bandwidth
    d2 = ((s[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
    kernels = np.exp(-d2 / (2.0 * h2)) / (2.0 * np.pi * h2)
    return kernels.mean(axis=1)


def _feature_scope(name: str) -> tuple[str, str]:
    """Split a canonical cell feature into (compartment, measurement)."""
    if ": " in name:
        compartment, rest = name.split(": ", 1)
        return compartment, rest
    return "Cell", name  # the area ratio is a whole-cell property


def patch_feature_names(bandwidths=DEFAULT_BANDWIDTHS_UM) -> tuple:
    """The frozen descriptor column order.

    Per cell type (tumor, then stroma), per cell feature, the seven
    statistics; then per bandwidth the seven interaction statistics.
    2 * 41 * 7 + 5 * 7 = 609 for the defaults.
    """
    names = []
    for celltype in CELL_TYPES:
        for feature in CELL_FEATURE_NAMES:
            compartment, rest = _feature_scope(feature)
            for stat in STAT_NAMES:
                names.append(f"{celltype}_{compartment}:{rest}:{stat}")
    for h in bandwidths:
        for stat in STAT_NAMES:
            names.append(f"interaction:KDE_h{h:g}:{stat}")
    return tuple(names)


PATCH_FEATURE_NAMES = patch_feature_names()
N_PATCH_FEATURES = len(PATCH_FEATURE_NAMES)


def patch_grid(tile_shape_px: tuple, patch_size: int = DEFAULT_PATCH_SIZE_PX):
    """Number of (rows, cols) of full patches; remainders are dropped."""
    h, w = tile_shape_px
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    if h < patch_size or w < patch_size:
        raise RoiTooSmallError(
            f"tile {h}x{w} px is smaller than one {patch_size} px patch")
    return h // patch_size, w // patch_size


def assign_patch(centroid_px: tuple, tile_shape_px: tuple,
                 patch_size: int = DEFAULT_PATCH_SIZE_PX):
    """Grid cell of a centroid, or None when it falls in a dropped edge.

    Patches are half-open: x in [col*size, (col+1)*size).
    """
    rows, cols = patch_grid(tile_shape_px, patch_size)
    x, y = centroid_px
    col = int(np.floor(x / patch_size))
    row = int(np.floor(y / patch_size))
    if 0 <= row < rows and 0 <= col < cols:
        return row, col
    return None


def patch_descriptor(tumor_features, stroma_features, tumor_xy_um,
                     stroma_xy_um, bandwidths=DEFAULT_BANDWIDTHS_UM,
                     min_cells: int = DEFAULT_MIN_CELLS) -> np.ndarray:
    """Assemble the descriptor of one eligible patch.

    Parameters
    ----------
    tumor_features, stroma_features : (n, 41) cell-feature matrices
    tumor_xy_um, stroma_xy_um : (n, 2) nucleus centroids, micrometers
    min_cells : eligibility gate on both cell counts

    Raises
    ------
    IneligiblePatchError
        Fewer than ``min_cells`` tumor or stroma cells.
    """
    tf = np.asarray(tumor_features, dtype=np.float64).reshape(-1, N_CELL_FEATURES)
    sf = np.asarray(stroma_features, dtype=np.float64).reshape(-1, N_CELL_FEATURES)
    txy = np.asarray(tumor_xy_um, dtype=np.float64).reshape(-1, 2)
    sxy = np.asarray(stroma_xy_um, dtype=np.float64).reshape(-1, 2)
    if tf.shape[0] != txy.shape[0] or sf.shape[0] != sxy.shape[0]:
        raise DimensionMismatchError("feature and centroid counts differ")
    if tf.shape[0] < min_cells or sf.shape[0] < min_cells:
        raise IneligiblePatchError(
            f"{tf.shape[0]} tumor / {sf.shape[0]} stroma cells, "
            f"need {min_cells} of each")

    blocks = []
    for mat in (tf, sf):
        for j in range(N_CELL_FEATURES):
            blocks.append(seven_stats(mat[:, j]))
    for h in bandwidths:
        blocks.append(seven_stats(kde_scores(sxy, txy, h)))
    return np.concatenate(blocks)


def write_patch_csv(path, rows, bandwidths=DEFAULT_BANDWIDTHS_UM) -> None:
    """Write descriptor rows: (roi_id, grid_row, grid_col, label, vector)."""
    names = patch_feature_names(bandwidths)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("roi_id", "grid_row", "grid_col", "label") + names)
        for roi_id, grid_row, grid_col, label, vector in rows:
            if len(vector) != len(names):
                raise DimensionMismatchError(
                    f"descriptor of length {len(vector)}, expected {len(names)}")
            writer.writerow([roi_id, grid_row, grid_col, label]
                            + [format(v, ".10g") for v in vector])


def read_patch_csv(path, bandwidths=DEFAULT_BANDWIDTHS_UM):
    """Read descriptor rows; returns (keys, labels, matrix).

    ``keys`` is a list of (roi_id, grid_row, grid_col).
    """
    names = patch_feature_names(bandwidths)
    expected = ["roi_id", "grid_row", "grid_col", "label"] + list(names)
    keys = []
    labels = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DimensionMismatchError(f"unexpected patch CSV header in {path}")
        for row in reader:
            if len(row) != len(expected):
                raise DimensionMismatchError(
                    f"row with {len(row)} columns in {path}")
            keys.append((row[0], int(row[1]), int(row[2])))
            labels.append(row[3])
            rows.append([float(v) for v in row[4:]])
    matrix = (np.asarray(rows, dtype=np.float64)
              if rows else np.zeros((0, len(names))))
    return keys, labels, matrix
