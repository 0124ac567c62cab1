"""Color deconvolution of H&E tiles into stain density planes.

RGB intensities are converted to optical density (Beer-Lambert) and
unmixed against a two-vector stain basis by per-pixel least squares.
Densities are in OD units throughout; downstream morphometry consumes
the hematoxylin and eosin planes produced here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularStainMatrixError

# Default H&E absorption basis (unit-normalized on construction).
DEFAULT_HEMATOXYLIN = (0.650, 0.704, 0.286)
DEFAULT_EOSIN = (0.072, 0.990, 0.105)

_DET_EPS = 1e-12


@dataclass(frozen=True)
class RgbTile:
    """An RGB image tile with physical pixel size.

    Parameters
    ----------
    pixels : ndarray of uint8, shape (H, W, 3)
    pixel_size : float
        Edge length of one pixel in micrometers.
    """

    pixels: np.ndarray
    pixel_size: float = 0.25

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError("pixels must be (H, W, 3) uint8")
        if not (self.pixel_size > 0):
            raise ValueError("pixel_size must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class StainMatrix:
    """Two unit-norm absorption vectors, one per stain.

    Vectors are normalized on construction, so callers may pass raw
    literature values. Collinear vectors are rejected lazily by
    ``deconvolve`` (the 2x2 normal system becomes singular).
    """

    hematoxylin: np.ndarray = field(
        default_factory=lambda: np.asarray(DEFAULT_HEMATOXYLIN, dtype=np.float64)
    )
    eosin: np.ndarray = field(
        default_factory=lambda: np.asarray(DEFAULT_EOSIN, dtype=np.float64)
    )

    def __post_init__(self):
        for name in ("hematoxylin", "eosin"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            norm = float(np.linalg.norm(v))
            if norm == 0.0:
                raise ValueError(f"{name} vector has zero norm")
            object.__setattr__(self, name, v / norm)

    @property
    def basis(self) -> np.ndarray:
        """3x2 matrix with stain vectors as columns."""
        return np.stack([self.hematoxylin, self.eosin], axis=1)

    def to_json(self) -> dict:
        return {
            "hematoxylin": self.hematoxylin.tolist(),
            "eosin": self.eosin.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StainMatrix":
        return cls(
            hematoxylin=np.asarray(obj["hematoxylin"], dtype=np.float64),
            eosin=np.asarray(obj["eosin"], dtype=np.float64),
        )


@dataclass(frozen=True)
class OdTileSet:
    """Deconvolution output for one tile: OD image and per-stain planes.

    ``residual_norm`` is the euclidean norm of the least-squares residual
    per pixel, computed before the non-negativity clamp, so it measures
    how much of the observed color the two-stain model cannot explain.
    """

    od_rgb: np.ndarray
    hematoxylin: np.ndarray
    eosin: np.ndarray
    residual_norm: np.ndarray

    def __post_init__(self):
        h, w = self.hematoxylin.shape
        if self.od_rgb.shape != (h, w, 3):
            raise ValueError("od_rgb shape does not match stain planes")
        for plane in (self.hematoxylin, self.eosin, self.residual_norm):
            if plane.shape != (h, w):
                raise ValueError("stain planes must share one shape")
            if np.min(plane) < 0:
                raise ValueError("stain planes must be non-negative")


def rgb_to_od(pixels, white_point=255.0) -> np.ndarray:
    """Convert RGB intensities to optical density.

    OD = -log10(I / white) per channel. Zero intensities are lifted to 1
    to keep OD finite; with the default white point that caps OD at
    log10(255) ~ 2.41.

    Parameters
    ----------
    pixels : array-like, (..., 3) or scalar-channel array
    white_point : float or length-3 sequence
        Intensity of unstained background per channel.

    Returns
    -------
    od : ndarray of float64, same shape as ``pixels``
    """
    arr = np.asarray(pixels, dtype=np.float64)
    white = np.asarray(white_point, dtype=np.float64)
    if np.any(white <= 0) or np.any(white > 255):
        raise ValueError("white_point components must lie in (0, 255]")
    lifted = np.maximum(arr, 1.0)
    return -np.log10(lifted / white)


def od_to_rgb(od, white_point=255.0) -> np.ndarray:
    """Invert ``rgb_to_od``: I = round(white * 10**(-od)), clipped to [0, 255].

    Rounding is half-up so the mapping is exactly invertible for every
    integer intensity in 1..255.
    """
    arr = np.asarray(od, dtype=np.float64)
    white = np.asarray(white_point, dtype=np.float64)
    intensities = white * np.power(10.0, -arr)
    return np.clip(np.floor(intensities + 0.5), 0, 255).astype(np.uint8)


def deconvolve(od_rgb: np.ndarray, stains: StainMatrix | None = None):
    """Unmix an OD image into hematoxylin and eosin density planes.

    Solves the per-pixel least-squares problem od ~ M @ c with M the 3x2
    stain basis, via the 2x2 normal equations shared across all pixels.
    Negative concentrations are clamped to zero after the residual is
    taken, so the residual still reflects the unconstrained fit.

    Parameters
    ----------
    od_rgb : ndarray, (H, W, 3)
    stains : StainMatrix, optional

    Returns
    -------
    hematoxylin, eosin, residual_norm : ndarray of float64, (H, W)

    Raises
    ------
    SingularStainMatrixError
        If the stain vectors are collinear (|det(M^T M)| < 1e-12).
    """
    if stains is None:
        stains = StainMatrix()
    od = np.asarray(od_rgb, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise ValueError("od_rgb must have shape (H, W, 3)")

    m = stains.basis
    gram = m.T @ m
    det = float(np.linalg.det(gram))
    if abs(det) < _DET_EPS:
        raise SingularStainMatrixError(
            f"stain vectors are collinear (|det| = {abs(det):.3e})"
        )

    h, w = od.shape[:2]
    flat = od.reshape(-1, 3)
    # c = (M^T M)^-1 M^T od, vectorized over pixels
    conc = flat @ m @ np.linalg.inv(gram)
    residual = flat - conc @ m.T
    residual_norm = np.linalg.norm(residual, axis=1).reshape(h, w)
    conc = np.maximum(conc, 0.0)
    hema = conc[:, 0].reshape(h, w)
    eosin = conc[:, 1].reshape(h, w)
    return hema, eosin, residual_norm


def separate_stains(pixels, stains: StainMatrix | None = None,
                    white_point=255.0) -> OdTileSet:
    """Full RGB -> OD -> stain-plane conversion for one tile."""
    od = rgb_to_od(pixels, white_point)
    hema, eosin, residual = deconvolve(od, stains)
    return OdTileSet(od_rgb=od, hematoxylin=hema, eosin=eosin,
                     residual_norm=residual)
