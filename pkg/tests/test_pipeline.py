import hashlib
import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from trajgeom import archive, pipeline
from trajgeom.archive import read_result_table
from trajgeom.pipeline import ConfigError, PipelineConfig, StageInputError


def test_every_stage_succeeds(small_bundle):
    _, _, prov = small_bundle
    assert set(prov["stages"]) == set(pipeline.STAGES)
    assert all(v == "ok" for v in prov["stages"].values())


def test_provenance_hashes_match_files(small_bundle):
    out, cfg, prov = small_bundle
    on_disk = json.loads((out / "provenance.json").read_text())
    assert on_disk == prov and prov["config_hash"] == cfg.config_hash()
    for name, digest in prov["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    table = read_result_table(out / "couplings.csv")
    assert table.provenance["config_hash"] == cfg.config_hash() and table.provenance["seed"] == 0


def test_config_hash_ignores_output_location():
    a = PipelineConfig(cohort="/x/cohort", out="a")
    assert a.config_hash() == replace(a, out="b", jobs=4).config_hash()
    assert a.config_hash() == replace(a, cohort="/elsewhere/cohort").config_hash()
    assert a.config_hash() != replace(a, seed=1).config_hash()
    assert a.config_hash() != replace(a, family="loglog").config_hash()


def test_config_validation(tmp_path):
    good = PipelineConfig(cohort=str(tmp_path))
    good.validate()
    for bad in (
        {"metrics": ("volume",)},
        {"stages": ("render",)},
        {"family": "cubic"},
        {"boundary_variant": "fixed_prefix"},
        {"calib_model": "3pl"},
        {"bootstrap_n": 0},
        {"prefix_fractions": (0.0, 1.0)},
        {"cohort": str(tmp_path / "missing")},
    ):
        with pytest.raises(ConfigError):
            replace(good, **bad).validate()
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"cohort": "x", "colour": "red"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"seed": 1})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(good.to_dict()))
    assert PipelineConfig.load(path) == good
    path.write_text("{")
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


def test_stage_needs_upstream_outputs(small_cohort, tmp_path):
    cfg = PipelineConfig(cohort=str(small_cohort), out=str(tmp_path / "empty"))
    with pytest.raises(StageInputError, match="segments.csv"):
        pipeline.run_stage(cfg, "geometry")


def test_single_stage_rerun_is_byte_identical(small_bundle, tmp_path):
    out, cfg, _ = small_bundle
    fresh = tmp_path / "fresh"
    shutil.copytree(out, fresh)
    for name in ("couplings.csv", "residuals.csv"):
        (fresh / name).unlink()
    rerun = replace(cfg, out=str(fresh))
    pipeline.run_stage(rerun, "correct")
    pipeline.run_stage(rerun, "couple")
    for name in ("couplings.csv", "residuals.csv"):
        assert (fresh / name).read_bytes() == (out / name).read_bytes()


def test_optional_stage_failure_is_isolated(small_cohort, tmp_path):
    cohort = tmp_path / "cohort"
    shutil.copytree(small_cohort, cohort)
    (cohort / "labels.csv").write_text("item_id,run_id\n")
    stages = ("segment", "geometry", "calib", "correct", "couple", "behave", "summary")
    cfg = PipelineConfig(cohort=str(cohort), out=str(tmp_path / "b"), bootstrap_n=50, stages=stages)
    prov = pipeline.run_pipeline(cfg)
    assert prov["stages"]["behave"].startswith("failed: ArchiveError")
    assert prov["stages"]["summary"] == "ok" and "summary.csv" in prov["outputs"]
    (cohort / "labels.csv").unlink()
    prov = pipeline.run_pipeline(replace(cfg, out=str(tmp_path / "c")))
    assert prov["stages"]["behave"] == "ok" and "behavior_rates.csv" not in prov["outputs"]


def test_fatal_stage_failure_writes_provenance(small_cohort, tmp_path):
    cohort = tmp_path / "cohort"
    shutil.copytree(small_cohort, cohort)
    (cohort / archive.RESPONSES_NAME).unlink()
    out = tmp_path / "b"
    with pytest.raises(OSError):
        pipeline.run_pipeline(PipelineConfig(cohort=str(cohort), out=str(out), stages=("segment", "calib", "correct")))
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["stages"]["segment"] == "ok" and prov["stages"]["calib"].startswith("failed")
    assert "correct" not in prov["stages"]


def test_external_difficulty_file(small_bundle, tmp_path):
    out, cfg, _ = small_bundle
    truth = [json.loads(line) for line in (Path(cfg.cohort) / "truth.jsonl").read_text().splitlines()]
    path = tmp_path / "difficulty.csv"
    archive.write_result_table(archive.ResultTable(["item_id", "difficulty"], [(t["item_id"], t["difficulty"]) for t in truth]), path)
    run = replace(cfg, out=str(tmp_path / "b"), difficulty_file=str(path))
    pipeline.run_stage(run, "calib")
    recs = read_result_table(tmp_path / "b" / "difficulty.csv").to_records()
    assert [r["value"] for r in recs] == [t["difficulty"] for t in truth]


def test_segments_and_geometry_tables(small_bundle):
    out, _, _ = small_bundle
    segs = read_result_table(out / "segments.csv").to_records()
    assert len(segs) == 60 * 3 * 2
    sources = {r["model_id"][:4]: r["boundary_source"] for r in segs}
    assert sources["reas"] == "think_delimiter"
    geo = read_result_table(out / "geometry.csv").to_records()
    assert all(r["directness"] is None or 0 <= r["directness"] <= 1 for r in geo)


def test_residuals_orthogonal_in_bundle(small_bundle):
    out, _, _ = small_bundle
    recs = read_result_table(out / "residuals.csv").to_records()
    cells = {}
    for r in recs:
        cells.setdefault((r["model_id"], r["metric"]), []).append((r["regressor"], r["residual"]))
    for pairs in cells.values():
        x, e = np.array(pairs).T
        assert abs(e @ (x - x.mean())) <= 1e-10 * np.abs(x).sum()


@pytest.mark.parametrize("kind", pipeline.PLOT_KINDS)
def test_plot_data(small_bundle, kind):
    out, _, _ = small_bundle
    table = pipeline.emit_plot_data(out, kind)
    assert len(table) > 0
    if kind == "stripe":
        recs = table.to_records()
        assert all(0 <= r["span_start_frac"] <= r["span_end_frac"] <= 1 for r in recs)


def test_plot_data_errors(tmp_path):
    with pytest.raises(pipeline.PlotDataError):
        pipeline.emit_plot_data(tmp_path, "heatmap")
    with pytest.raises(ValueError):
        pipeline.emit_plot_data(tmp_path, "pie")
