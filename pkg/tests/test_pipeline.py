"""Orchestration tests: config strictness, CLI exit codes, stage wiring."""

import json
import os

import numpy as np
import pytest

from serotile.cli import main
from serotile.config import PipelineConfig, load_config
from serotile.errors import ConfigError
from serotile.imgio import read_json, sha256_file
from serotile.pipeline import STAGE_NAMES, run_all, run_stage


def test_stage_names_cover_the_chain():
    assert STAGE_NAMES == ("synth", "deconvolve", "segment", "label",
                           "features", "train-cell", "predict-cell",
                           "patchify", "train-patch", "predict-patch",
                           "subjects", "report")


def test_config_rejects_unknown_keys():
    base = {"cohort_dir": "c", "output_dir": "o"}
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "typo_key": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "segmentation": {"sigma": 2}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "lasso": {"lambdas": 10}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "synth": {"n_rois": 3}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(
            {**base, "synth": {"class_params": {"OTHER": {}}}})


def test_config_type_and_range_checks():
    base = {"cohort_dir": "c", "output_dir": "o"}
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"output_dir": "o"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "seed": "7"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "seed": True})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "seed": -1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "workers": 0})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "pixel_size": -0.25})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "white_point": [255.0, 255.0]})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**base, "kde_bandwidths_um": []})
    cfg = PipelineConfig.from_dict({**base, "white_point": 250})
    assert cfg.white_point == (250.0, 250.0, 250.0)
    assert PipelineConfig.from_dict(base).lasso["n_lambdas"] == 100


def test_config_snapshot_resolves_everything(tmp_path):
    cfg = PipelineConfig.from_dict({
        "cohort_dir": str(tmp_path / "c"),
        "output_dir": str(tmp_path / "o"),
        "synth": {"n_subjects_per_class": 1, "rois_per_subject": 1},
    })
    snap = cfg.snapshot()
    assert snap["segmentation"]["pixel_size"] == 0.25
    assert snap["synth"]["seed"] == 7
    assert set(snap["synth"]["class_params"]) == {"HGSOC", "SBOT"}
    assert "hematoxylin" in snap["stain_matrix"]
    # resolved snapshots are stable across calls
    assert cfg.snapshot() == snap


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def micro_config(tmp_path, **overrides):
    dense = {"tumor_density_per_mm2": 1800.0,
             "stroma_density_per_mm2": 1800.0}
    doc = {
        "cohort_dir": str(tmp_path / "cohort"),
        "output_dir": str(tmp_path / "out"),
        "seed": 7,
        "workers": 1,
        "patch_size_px": 256,
        "min_cells_per_patch": 3,
        "bootstrap_replicates": 50,
        "train_subjects_per_class": 1,
        "cell_train_rois_per_subject": 2,
        "emit_overlays": False,
        "lasso": {"n_lambdas": 30, "n_folds": 2},
        "synth": {
            "n_subjects_per_class": 2,
            "rois_per_subject": 3,
            "roi_size_px": [512, 512],
            "class_params": {"HGSOC": dict(dense), "SBOT": dict(dense)},
        },
    }
    doc.update(overrides)
    return doc


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("micro")
    doc = micro_config(tmp_path)
    cfg = PipelineConfig.from_dict(doc)
    manifest = run_all(cfg)
    return tmp_path, doc, cfg, manifest


def test_run_all_produces_every_stage(micro_run):
    tmp_path, _, cfg, manifest = micro_run
    assert set(manifest["stages"]) == set(STAGE_NAMES)
    for name in STAGE_NAMES:
        assert manifest["stages"][name], f"stage {name} produced nothing"
    out = tmp_path / "out"
    assert (out / "manifest.json").exists()
    assert (out / "timings.json").exists()
    assert (out / "logs.jsonl").exists()
    timings = read_json(out / "timings.json")
    assert set(timings) == set(STAGE_NAMES)
    # timings and logs stay out of the manifest by design
    tracked = {rel for group in manifest["stages"].values() for rel in group}
    assert "timings.json" not in tracked
    assert "logs.jsonl" not in tracked

    summary = read_json(out / "report" / "summary.json")
    assert 0.0 <= summary["cells"]["overall"] <= 1.0
    assert summary["subjects"]["n_subjects"] == 4  # every subject is called
    for rel, digest in manifest["stages"]["report"].items():
        assert sha256_file(str(out / rel)) == digest


def test_subject_calls_are_labels(micro_run):
    tmp_path, _, _, _ = micro_run
    rows = (tmp_path / "out" / "subjects" / "calls.csv").read_text()
    header, *body = rows.strip().splitlines()
    assert header == "subject,label,n_patches,fraction_positive,predicted"
    assert len(body) == 4
    for line in body:
        assert line.split(",")[-1] in ("HGSOC", "SBOT")


def test_stage_rerun_is_byte_stable(micro_run):
    # re-deriving a mid-chain stage from on-disk inputs must reproduce
    # identical bytes, which is what makes stages safe to run in isolation
    tmp_path, _, cfg, manifest = micro_run
    out = tmp_path / "out"
    for stage in ("features", "patchify"):
        before = {rel: sha256_file(str(out / rel))
                  for rel in manifest["stages"][stage]}
        produced = run_stage(cfg, stage)
        after = {rel: sha256_file(str(out / rel)) for rel in produced}
        assert after == before


def test_run_stage_rejects_unknown_name(micro_run):
    _, _, cfg, _ = micro_run
    with pytest.raises(ConfigError):
        run_stage(cfg, "not-a-stage")


def test_cli_exit_codes(tmp_path, capsys):
    # 2: unreadable, invalid, or unknown-key configs
    assert main(["synth", "--config", str(tmp_path / "missing.json")]) == 2
    bad = write_config(tmp_path / "bad.json", {"cohort_dir": "c"})
    assert main(["synth", "--config", bad]) == 2
    unknown = write_config(tmp_path / "unknown.json",
                           {"cohort_dir": "c", "output_dir": "o",
                            "zzz": 1})
    assert main(["synth", "--config", unknown]) == 2
    ok_doc = micro_config(tmp_path)
    ok = write_config(tmp_path / "ok.json", ok_doc)
    assert main(["synth", "--config", ok, "--seed", "-1"]) == 2
    assert main(["synth", "--config", ok, "--workers", "0"]) == 2

    # 3: a stage whose inputs were never produced
    assert main(["deconvolve", "--config", ok]) == 3
    err = capsys.readouterr().err
    assert "MissingInput" in err

    # 4: a stage that starts and fails
    crowded = micro_config(
        tmp_path,
        synth={"n_subjects_per_class": 1, "rois_per_subject": 1,
               "roi_size_px": [64, 64],
               "class_params": {
                   "HGSOC": {"tumor_density_per_mm2": 400000.0},
                   "SBOT": {"tumor_density_per_mm2": 400000.0}}})
    crowded["cohort_dir"] = str(tmp_path / "crowded_cohort")
    crowded["output_dir"] = str(tmp_path / "crowded_out")
    crowded_path = write_config(tmp_path / "crowded.json", crowded)
    assert main(["synth", "--config", crowded_path]) == 4
    err = capsys.readouterr().err
    assert "PlacementOverflow" in err


def test_cli_runs_one_stage(tmp_path, capsys):
    doc = micro_config(tmp_path, synth={
        "n_subjects_per_class": 1, "rois_per_subject": 1,
        "roi_size_px": [512, 512]})
    path = write_config(tmp_path / "one.json", doc)
    assert main(["synth", "--config", path]) == 0
    cohort = tmp_path / "cohort"
    assert (cohort / "manifest.json").exists()
    pngs = list(cohort.rglob("*.png"))
    assert len(pngs) == 2  # one ROI per class
    capsys.readouterr()


def test_load_config_round_trip(tmp_path):
    doc = micro_config(tmp_path)
    path = write_config(tmp_path / "cfg.json", doc)
    cfg = load_config(path)
    assert cfg.patch_size_px == 256
    assert cfg.lasso["n_folds"] == 2
    assert cfg.lasso["n_lambdas"] == 30
    assert cfg.lasso["tol"] == 1e-7  # defaults merge under overrides
    spec = cfg.cohort_spec()
    assert spec.roi_size_px == (512, 512)
    hg = spec.class_params["HGSOC"]
    assert hg.tumor_density_per_mm2 == 1800.0
    assert hg.tumor_radius_mean == 4.0  # untouched default survives
