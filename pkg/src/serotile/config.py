"""Pipeline configuration: a single JSON document, strictly validated.

Unknown keys are rejected everywhere, so typos fail fast instead of
silently running with defaults. ``snapshot`` returns the fully resolved
configuration; the run manifest embeds it, which makes reruns
comparable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError, MissingInputError
from .imgio import read_json
from .patches import DEFAULT_BANDWIDTHS_UM
from .segmentation import SegmentationParams
from .stains import StainMatrix
from .synth import CLASS_NAMES, ClassParams, CohortSpec, default_class_params


def _require_keys(doc: dict, allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _positive(value, name: str):
    if not (isinstance(value, (int, float)) and value > 0):
        raise ConfigError(f"{name} must be a positive number")
    return value


_SEG_KEYS = ("gaussian_sigma_um", "background_radius_um", "od_threshold",
             "min_nucleus_area_px", "max_nucleus_area_px",
             "cell_expansion_px", "seed_merge_radius_px")
_LASSO_KEYS = ("n_lambdas", "lambda_min_ratio", "n_folds", "tol")
_SYNTH_KEYS = ("n_subjects_per_class", "rois_per_subject", "roi_size_px",
               "min_amplitude", "class_params")
_TOP_KEYS = ("cohort_dir", "output_dir", "seed", "workers", "pixel_size",
             "white_point", "stain_matrix_path", "segmentation", "svm_c",
             "svm_tol", "svm_max_epochs", "lasso", "patch_size_px",
             "min_cells_per_patch", "kde_bandwidths_um",
             "bootstrap_replicates", "train_subjects_per_class",
             "cell_train_rois_per_subject", "misclassified_clusters",
             "emit_overlays", "synth")


@dataclass
class PipelineConfig:
    cohort_dir: str
    output_dir: str
    seed: int = 7
    workers: int = 1
    pixel_size: float = 0.25
    white_point: tuple = (255.0, 255.0, 255.0)
    stain_matrix_path: str | None = None
    segmentation: dict = field(default_factory=dict)
    svm_c: float = 1.0
    svm_tol: float = 1e-3
    svm_max_epochs: int = 100000
    lasso: dict = field(default_factory=lambda: {
        "n_lambdas": 100, "lambda_min_ratio": 1e-3, "n_folds": 5,
        "tol": 1e-7})
    patch_size_px: int = 512
    min_cells_per_patch: int = 10
    kde_bandwidths_um: tuple = DEFAULT_BANDWIDTHS_UM
    bootstrap_replicates: int = 1000
    train_subjects_per_class: int = 5
    cell_train_rois_per_subject: int = 5
    misclassified_clusters: int = 10
    emit_overlays: bool = True
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _require_keys(doc, _TOP_KEYS, "config")
        for req in ("cohort_dir", "output_dir"):
            if not isinstance(doc.get(req), str) or not doc[req]:
                raise ConfigError(f"config requires a non-empty {req!r}")

        cfg = cls(cohort_dir=doc["cohort_dir"], output_dir=doc["output_dir"])
        for key in ("seed", "workers", "svm_max_epochs", "patch_size_px",
                    "min_cells_per_patch", "bootstrap_replicates",
                    "train_subjects_per_class",
                    "cell_train_rois_per_subject", "misclassified_clusters"):
            if key in doc:
                if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                    raise ConfigError(f"{key} must be an integer")
                setattr(cfg, key, doc[key])
        for key in ("pixel_size", "svm_c", "svm_tol"):
            if key in doc:
                setattr(cfg, key, float(_positive(doc[key], key)))
        if "emit_overlays" in doc:
            if not isinstance(doc["emit_overlays"], bool):
                raise ConfigError("emit_overlays must be a boolean")
            cfg.emit_overlays = doc["emit_overlays"]
        if "stain_matrix_path" in doc:
            value = doc["stain_matrix_path"]
            if value is not None and not isinstance(value, str):
                raise ConfigError("stain_matrix_path must be a string or null")
            cfg.stain_matrix_path = value
        if "white_point" in doc:
            wp = doc["white_point"]
            if isinstance(wp, (int, float)):
                wp = [wp, wp, wp]
            if not (isinstance(wp, list) and len(wp) == 3):
                raise ConfigError("white_point must be a number or 3 numbers")
            cfg.white_point = tuple(float(_positive(v, "white_point"))
                                    for v in wp)
        if "kde_bandwidths_um" in doc:
            bw = doc["kde_bandwidths_um"]
            if not (isinstance(bw, list) and bw):
                raise ConfigError("kde_bandwidths_um must be a non-empty list")
            cfg.kde_bandwidths_um = tuple(
                float(_positive(v, "kde_bandwidths_um")) for v in bw)
        if "segmentation" in doc:
            if not isinstance(doc["segmentation"], dict):
                raise ConfigError("segmentation must be an object")
            _require_keys(doc["segmentation"], _SEG_KEYS, "segmentation")
            cfg.segmentation = dict(doc["segmentation"])
        if "lasso" in doc:
            if not isinstance(doc["lasso"], dict):
                raise ConfigError("lasso must be an object")
            _require_keys(doc["lasso"], _LASSO_KEYS, "lasso")
            cfg.lasso = {**cfg.lasso, **doc["lasso"]}
        if "synth" in doc:
            if not isinstance(doc["synth"], dict):
                raise ConfigError("synth must be an object")
            _require_keys(doc["synth"], _SYNTH_KEYS, "synth")
            cfg.synth = dict(doc["synth"])

        for key in ("workers", "patch_size_px", "min_cells_per_patch",
                    "bootstrap_replicates", "train_subjects_per_class",
                    "cell_train_rois_per_subject", "misclassified_clusters",
                    "svm_max_epochs"):
            _positive(getattr(cfg, key), key)
        if cfg.seed < 0:
            raise ConfigError("seed must be non-negative")
        # force nested parameter objects now so typos fail at load time
        cfg.segmentation_params()
        cfg.cohort_spec()
        return cfg

    def segmentation_params(self) -> SegmentationParams:
        try:
            return SegmentationParams(pixel_size=self.pixel_size,
                                      **self.segmentation)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid segmentation parameters: {exc}") from exc

    def stain_matrix(self) -> StainMatrix:
        if self.stain_matrix_path is None:
            return StainMatrix()
        doc = read_json(self.stain_matrix_path)
        try:
            return StainMatrix.from_json(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(
                f"invalid stain matrix {self.stain_matrix_path}: {exc}") from exc

    def cohort_spec(self) -> CohortSpec:
        doc = dict(self.synth)
        class_doc = doc.pop("class_params", {})
        if not isinstance(class_doc, dict):
            raise ConfigError("synth.class_params must be an object")
        _require_keys(class_doc, CLASS_NAMES, "synth.class_params")
        class_params = default_class_params()
        for name, overrides in class_doc.items():
            if not isinstance(overrides, dict):
                raise ConfigError(f"synth.class_params.{name} must be an object")
            try:
                class_params[name] = dataclasses.replace(
                    class_params[name], **overrides)
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"invalid synth.class_params.{name}: {exc}") from exc
        if "roi_size_px" in doc:
            size = doc["roi_size_px"]
            if not (isinstance(size, list) and len(size) == 2):
                raise ConfigError("synth.roi_size_px must be [height, width]")
            doc["roi_size_px"] = tuple(int(v) for v in size)
        try:
            return CohortSpec(seed=self.seed, pixel_size=self.pixel_size,
                              class_params=class_params, **doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synth parameters: {exc}") from exc

    def snapshot(self) -> dict:
        """Fully resolved configuration for the run manifest."""
        doc = dataclasses.asdict(self)
        doc["white_point"] = list(self.white_point)
        doc["kde_bandwidths_um"] = list(self.kde_bandwidths_um)
        doc["segmentation"] = dataclasses.asdict(self.segmentation_params())
        doc["synth"] = self.cohort_spec().to_json()
        doc["stain_matrix"] = self.stain_matrix().to_json()
        return doc


def load_config(path) -> PipelineConfig:
    try:
        doc = read_json(path)
    except MissingInputError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return PipelineConfig.from_dict(doc)
