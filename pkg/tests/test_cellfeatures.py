"""Cell descriptor tests: shape oracles, stat identities, CSV contract."""

import numpy as np
import pytest

from serotile.cellfeatures import (CELL_FEATURE_NAMES, N_CELL_FEATURES,
                                   cell_feature_vector, feature_matrix,
                                   mask_outline, read_feature_csv,
                                   shape_features, write_feature_csv)
from serotile.errors import DimensionMismatchError, EmptyMaskError
from serotile.segmentation import CellObject

# Canonical order, frozen. Any drift in the source tuple must fail here.
EXPECTED_NAMES = (
    "Nucleus: Area",
    "Nucleus: Perimeter",
    "Nucleus: Circularity",
    "Nucleus: Max caliper",
    "Nucleus: Min caliper",
    "Nucleus: Eccentricity",
    "Nucleus: Hematoxylin OD mean",
    "Nucleus: Hematoxylin OD sum",
    "Nucleus: Hematoxylin OD std dev",
    "Nucleus: Hematoxylin OD max",
    "Nucleus: Hematoxylin OD min",
    "Nucleus: Hematoxylin OD range",
    "Nucleus: Eosin OD mean",
    "Nucleus: Eosin OD sum",
    "Nucleus: Eosin OD std dev",
    "Nucleus: Eosin OD max",
    "Nucleus: Eosin OD min",
    "Nucleus: Eosin OD range",
    "Cell: Area",
    "Cell: Perimeter",
    "Cell: Circularity",
    "Cell: Max caliper",
    "Cell: Min caliper",
    "Cell: Eccentricity",
    "Cell: Hematoxylin OD mean",
    "Cell: Hematoxylin OD std dev",
    "Cell: Hematoxylin OD max",
    "Cell: Hematoxylin OD min",
    "Cell: Eosin OD mean",
    "Cell: Eosin OD std dev",
    "Cell: Eosin OD max",
    "Cell: Eosin OD min",
    "Cytoplasm: Hematoxylin OD mean",
    "Cytoplasm: Hematoxylin OD std dev",
    "Cytoplasm: Hematoxylin OD max",
    "Cytoplasm: Hematoxylin OD min",
    "Cytoplasm: Eosin OD mean",
    "Cytoplasm: Eosin OD std dev",
    "Cytoplasm: Eosin OD max",
    "Cytoplasm: Eosin OD min",
    "Nucleus/Cell area ratio",
)


def disk_mask(size, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    return (yy - c) ** 2 + (xx - c) ** 2 <= radius * radius


def make_cell(nucleus, cell=None, offset=(0, 0), cid=1, pixel_size=0.25):
    if cell is None:
        cell = nucleus
    rows, cols = np.nonzero(nucleus)
    r0, c0 = offset
    h, w = cell.shape
    return CellObject(
        id=cid, tile_id="t", bbox=(r0, c0, r0 + h, c0 + w),
        nucleus_mask=nucleus, cell_mask=cell,
        centroid_um=((cols.mean() + c0 + 0.5) * pixel_size,
                     (rows.mean() + r0 + 0.5) * pixel_size),
        pixel_size=pixel_size)


def test_feature_names_frozen():
    assert N_CELL_FEATURES == 41
    assert CELL_FEATURE_NAMES == EXPECTED_NAMES


def test_disk_circularity_near_one():
    for radius in (10, 20, 40):
        mask = disk_mask(2 * radius + 9, radius)
        feats = shape_features(mask, 0.25)
        assert 0.95 <= feats[2] <= 1.0
        # area matches pi r^2 within discretization
        assert feats[0] == pytest.approx(
            np.pi * (radius * 0.25) ** 2, rel=0.05)


def test_square_calipers_and_area():
    mask = np.zeros((16, 16), dtype=bool)
    mask[3:13, 3:13] = True  # 10 x 10 px
    feats = shape_features(mask, 0.25)
    assert feats[0] == pytest.approx(100 * 0.0625, abs=1e-12)
    # diagonal of the drawn outline: 10*sqrt(2) px
    assert feats[3] == pytest.approx(10 * np.sqrt(2) * 0.25, abs=1e-9)
    assert feats[4] == pytest.approx(10 * 0.25, abs=1e-9)
    # corner smoothing trims the perimeter slightly below 4 sides
    assert 9.0 < feats[1] <= 10.0
    assert feats[5] == pytest.approx(0.0, abs=1e-9)  # square is isotropic


def test_eccentricity_matches_moment_formula():
    mask = np.zeros((30, 30), dtype=bool)
    mask[5:11, 2:26] = True  # 6 x 24 px rectangle
    feats = shape_features(mask, 0.25)
    # uniform grid second moments: var = (n^2 - 1) / 12 per axis
    lam_max = (24 ** 2 - 1) / 12.0
    lam_min = (6 ** 2 - 1) / 12.0
    expect = np.sqrt(1.0 - lam_min / lam_max)
    assert feats[5] == pytest.approx(expect, abs=1e-12)


def test_mask_outline_rejects_empty():
    with pytest.raises(EmptyMaskError):
        mask_outline(np.zeros((5, 5), dtype=bool))
    with pytest.raises(EmptyMaskError):
        shape_features(np.zeros((5, 5), dtype=bool), 0.25)


def test_translation_invariance():
    rng = np.random.default_rng(23)
    for _ in range(8):
        nuc = disk_mask(21, rng.integers(4, 7))
        cell = disk_mask(21, rng.integers(7, 10))
        cell |= nuc
        local_h = rng.uniform(0.1, 1.2, size=(21, 21))
        local_e = rng.uniform(0.0, 0.6, size=(21, 21))
        planes = []
        for r0, c0 in ((0, 0), (17, 31)):
            hema = np.zeros((64, 64))
            eosin = np.zeros((64, 64))
            hema[r0:r0 + 21, c0:c0 + 21] = local_h
            eosin[r0:r0 + 21, c0:c0 + 21] = local_e
            cellobj = make_cell(nuc, cell, offset=(r0, c0))
            planes.append(cell_feature_vector(cellobj, hema, eosin)[0])
        assert np.allclose(planes[0], planes[1], atol=1e-12)


def test_intensity_stats_hand_computed():
    nuc = np.zeros((3, 3), dtype=bool)
    nuc[1, :] = True  # three pixels
    cell = np.ones((3, 3), dtype=bool)
    hema = np.zeros((3, 3))
    hema[1] = [1.0, 2.0, 3.0]
    eosin = np.full((3, 3), 0.5)
    vec, empty = cell_feature_vector(make_cell(nuc, cell), hema, eosin)
    assert not empty
    # nucleus hematoxylin block: mean, sum, pop std, max, min, range
    assert vec[6] == pytest.approx(2.0)
    assert vec[7] == pytest.approx(6.0)
    assert vec[8] == pytest.approx(np.sqrt(2.0 / 3.0))
    assert vec[9] == 3.0 and vec[10] == 1.0 and vec[11] == 2.0
    # nucleus eosin is constant 0.5
    assert vec[12] == 0.5 and vec[14] == pytest.approx(0.0)
    # area ratio: 3 nucleus px over 9 cell px
    assert vec[40] == pytest.approx(3.0 / 9.0)


def test_stain_scaling_scales_intensity_blocks_only():
    nuc = disk_mask(15, 4)
    cell = disk_mask(15, 6)
    rng = np.random.default_rng(4)
    hema = rng.uniform(0.1, 1.0, size=(15, 15))
    eosin = rng.uniform(0.1, 1.0, size=(15, 15))
    base, _ = cell_feature_vector(make_cell(nuc, cell), hema, eosin)
    scaled, _ = cell_feature_vector(make_cell(nuc, cell), 2.0 * hema, eosin)
    hema_idx = list(range(6, 12)) + list(range(24, 28)) + list(range(32, 36))
    for i in range(41):
        if i in hema_idx:
            assert scaled[i] == pytest.approx(2.0 * base[i], rel=1e-12)
        else:
            assert scaled[i] == pytest.approx(base[i], rel=1e-12)


def test_empty_cytoplasm_flags_and_zeros():
    nuc = disk_mask(11, 4)
    vec, empty = cell_feature_vector(make_cell(nuc, nuc),
                                     np.ones((11, 11)), np.ones((11, 11)))
    assert empty
    assert np.all(vec[32:40] == 0.0)
    assert vec[40] == 1.0


def test_feature_matrix_stacks_rows():
    nuc = disk_mask(11, 3)
    cell = disk_mask(11, 5)
    hema = np.full((11, 11), 0.8)
    eosin = np.full((11, 11), 0.2)
    cells = [make_cell(nuc, cell, cid=1), make_cell(nuc, cell, cid=2)]
    mat, flags = feature_matrix(cells, hema, eosin)
    assert mat.shape == (2, 41)
    assert np.array_equal(mat[0], mat[1])
    assert not flags.any()


def test_feature_csv_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    mat = rng.uniform(-2, 5, size=(7, 41))
    labels = ["tumor", "stroma", "tumor", "unlabeled", "stroma", "tumor",
              "stroma"]
    path = tmp_path / "cells.csv"
    write_feature_csv(path, labels, mat)
    header = path.read_text().splitlines()[0]
    assert header.split(",")[0] == "label"
    got_labels, got = read_feature_csv(path)
    assert got_labels == labels
    # six significant digits survive the round trip
    assert np.allclose(got, mat, rtol=1e-5, atol=1e-8)


def test_feature_csv_rejects_bad_shapes(tmp_path):
    with pytest.raises(DimensionMismatchError):
        write_feature_csv(tmp_path / "x.csv", ["a"], np.zeros((1, 40)))
    with pytest.raises(DimensionMismatchError):
        write_feature_csv(tmp_path / "x.csv", ["a", "b"], np.zeros((1, 41)))


def test_feature_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,Nucleus Area\n")
    with pytest.raises(DimensionMismatchError):
        read_feature_csv(path)
