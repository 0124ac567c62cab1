"""Exception taxonomy shared across the pipeline.

Stage code raises the specific class; the CLI maps broad categories to
process exit codes (config 2, missing input 3, stage failure 4).
"""


class SerotileError(Exception):
    """Base class for all package errors."""


class ConfigError(SerotileError):
    """Invalid, unknown, or missing configuration value."""


class MissingInputError(SerotileError):
    """A required input file or directory does not exist."""


class StageFailureError(SerotileError):
    """A pipeline stage failed for a non-config, non-input reason."""


class SingularStainMatrixError(SerotileError):
    """Stain vectors are collinear; the deconvolution system is singular."""


class EmptyMaskError(SerotileError):
    """A mask with no foreground pixels where one is required."""


class ParseError(SerotileError):
    """Malformed annotation document."""


class UnknownLabelError(ParseError):
    """Annotation feature carries a label outside the known set."""


class SingleClassError(SerotileError):
    """Training or evaluation data contains only one class."""


class ConvergenceError(SerotileError):
    """An iterative solver hit its iteration cap before converging."""


class LengthMismatchError(SerotileError):
    """Paired sequences of different lengths."""


class DimensionMismatchError(SerotileError):
    """Feature vector or matrix with an unexpected dimension."""


class TooFewRowsError(SerotileError):
    """Not enough observations for the requested computation."""


class RoiTooSmallError(SerotileError):
    """ROI smaller than a single patch."""


class IneligiblePatchError(SerotileError):
    """Descriptor requested for a patch that fails the cell-count gate."""


class NoTumorCellsError(SerotileError):
    """Interaction scores requested with zero tumor cells present."""


class NoEligiblePatchesError(SerotileError):
    """Subject-level call requested for a subject with no eligible patches."""


class PlacementOverflowError(SerotileError):
    """Synthetic tissue sampler failed to place the requested cells."""
