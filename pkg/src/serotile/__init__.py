"""Tile-level H&E image analysis for serous ovarian tumor classification.

The package implements a complete pipeline from RGB tiles to subject-level
calls: stain deconvolution, nucleus/cell segmentation, cell morphometry,
cell typing with a linear SVM, patch-level descriptors with spatial
interaction scores, sparse patch classification, and bootstrap consensus
over the patches of each subject.
"""

__version__ = "0.1.0"
