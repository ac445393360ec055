import csv
import json
import shutil
import subprocess
import sys

import pytest

from trajgeom import archive
from trajgeom.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


def test_synth_and_report_round_trip(tmp_path, capsys):
    cohort = tmp_path / "c"
    assert main(["synth", "--out", str(cohort), "--items", "30", "--runs", "2", "--hidden-dim", "8", "--layers", "2", "--seed", "1"]) == EXIT_OK
    assert archive.load_manifest(cohort).runs_per_item == 2
    bundle = tmp_path / "b"
    args = ["report", "--cohort", str(cohort), "--out", str(bundle), "--stages", "segment,geometry,calib,correct,couple,summary"]
    assert main(args) == EXIT_OK
    assert "report bundle written" in capsys.readouterr().out
    assert (bundle / "summary.csv").is_file()
    assert main(["plot", "dumbbell", "--bundle", str(bundle)]) == EXIT_OK
    assert (bundle / "plot_dumbbell.csv").is_file()


def test_stage_subcommands(small_bundle, tmp_path):
    _, cfg, _ = small_bundle
    out = tmp_path / "o"
    base = ["--cohort", cfg.cohort, "--out", str(out)]
    assert main(["segment", *base]) == EXIT_OK
    assert main(["geometry", *base, "--metrics", "directness"]) == EXIT_OK
    assert main(["calib", *base, "--model", "1pl"]) == EXIT_OK
    assert main(["correct", *base, "--family", "loglog", "--metric", "directness"]) == EXIT_OK
    assert main(["couple", *base, "--family", "loglog", "--metric", "directness", "--bootstrap-n", "50"]) == EXIT_OK
    with open(out / "couplings.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {r["family"] for r in rows} == {"loglog"}


def test_config_file_and_overrides(small_bundle, tmp_path):
    _, cfg, _ = small_bundle
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"cohort": cfg.cohort, "out": str(tmp_path / "o"), "seed": 5}))
    assert main(["segment", "--config", str(path)]) == EXIT_OK
    meta = json.loads((tmp_path / "o" / "segments.csv.meta.json").read_text())
    assert meta["provenance"]["seed"] == 5


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["segment"],
        ["segment", "--cohort", "/definitely/missing"],
        ["geometry", "--cohort", ".", "--metrics", "volume"],
        ["synth"],
        ["probe", "--cohort", ".", "--lambda-grid", "a,b"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_data_error_exit_3(tmp_path):
    assert main(["segment", "--cohort", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["plot", "heatmap", "--bundle", str(tmp_path)]) == EXIT_DATA


def test_numeric_error_exit_4(small_cohort, tmp_path):
    cohort = tmp_path / "c"
    shutil.copytree(small_cohort, cohort)
    recs = [r for r in archive.iter_responses_csv(cohort / archive.RESPONSES_NAME) if r[1] == "reason0"]
    archive.responses_to_csv(cohort / archive.RESPONSES_NAME, recs)
    assert main(["calib", "--cohort", str(cohort), "--out", str(tmp_path / "o"), "--model", "2pl"]) == EXIT_NUMERIC


def test_module_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "trajgeom.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("trajgeom ")
