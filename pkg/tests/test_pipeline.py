import json

import pandas as pd
import pytest
from click.testing import CliRunner

from app.cli import cli
from app.config import parse_config
from app.exceptions import FlowStabilityError, PipelineError
from app.pipeline import run_compare, run_pipeline
from app.utils.file_io import read_json
from tests.conftest import TINY_CONFIG

FULL_RUN_FILES = {
    "grid.vtk",
    "velocity.vtk",
    "convergence.csv",
    "particles_period_1.csv",
    "particles_period_1.vtk",
    "topology.csv",
    "saddles.csv",
    "apex.csv",
    "species.vtk",
    "fret_profile.csv",
    "report.csv",
    "meta.json",
}


def tiny_run(out, **overrides):
    return parse_config(TINY_CONFIG, overrides=dict(output_dir=str(out), **overrides))


def written(manifest):
    return {entry["path"] for entry in manifest["files"]}


def test_geometry_only(tmp_path):
    manifest = run_pipeline(tiny_run(tmp_path / "run", stages=["geometry"]))

    assert written(manifest) == {"grid.vtk", "meta.json"}
    assert {p.name for p in (tmp_path / "run").iterdir()} == {"grid.vtk", "meta.json"}
    meta = read_json(tmp_path / "run" / "meta.json")
    assert meta["stages"] == ["geometry"]
    assert meta["geometry"]["dims"] == [6, 20, 3]
    assert meta["config"]["grid_spacing"] == 10.0
    assert meta["config"]["flow_tol"] == 1e-3
    assert all(len(entry["sha256"]) == 64 for entry in manifest["files"])


def test_non_empty_output_needs_force(tmp_path):
    out = tmp_path / "run"
    run_pipeline(tiny_run(out, stages=["geometry"]))

    with pytest.raises(PipelineError, match="not empty"):
        run_pipeline(tiny_run(out, stages=["geometry"]))
    assert written(run_pipeline(tiny_run(out, stages=["geometry"], force=True))) == {"grid.vtk", "meta.json"}


def test_failed_stage_removes_partial_artifacts(tmp_path):
    out = tmp_path / "run"

    with pytest.raises(FlowStabilityError) as excinfo:
        run_pipeline(tiny_run(out, stages=["flow"], flow_rate_per_inlet_ul_per_min=100.0))

    assert str(excinfo.value).startswith("[flow]")
    assert list(out.iterdir()) == []


def test_full_run_is_reproducible(tmp_path):
    first = run_pipeline(tiny_run(tmp_path / "first"))
    second = run_pipeline(tiny_run(tmp_path / "second"))

    assert written(first) == FULL_RUN_FILES
    assert first["files"] == second["files"]

    meta = read_json(tmp_path / "first" / "meta.json")
    assert meta["report"]["periods"] == 1
    assert meta["trace"]["exited"] + meta["trace"]["stalled"] == 400
    assert meta["flow"]["reynolds"] > 0
    assert "hydraulic diameter" in meta["flow"]["reynolds_note"]
    assert meta["transport_params"]["diffusivity"] > 0
    assert meta["config"]["inlet_buffer"] == 50.0
    assert meta["flow"]["inlet_buffer_layers"] == 5
    assert meta["topology"]["projection"] == "transverse"
    assert meta["topology"]["apex"]["slices"] == 2
    assert meta["trace"]["rotation_planes"] == 1
    assert meta["trace"]["mean_rotation_rad"] is None
    report = (tmp_path / "first" / "report.csv").read_text().splitlines()
    assert report[0] == "variant,period,y_um,mixing_index,fret_factor"
    assert report[1].startswith("PLAIN,1,200,")


def test_cli_stage_command(tmp_path, tiny_config_file):
    out = tmp_path / "cli"

    result = CliRunner().invoke(cli, ["geometry", "--config", str(tiny_config_file), "--out", str(out)])

    assert result.exit_code == 0, result.output
    manifest = json.loads(result.stdout)
    assert written(manifest) == {"grid.vtk", "meta.json"}


def test_cli_reports_stage_tagged_errors(tmp_path, tiny_config_file):
    out = tmp_path / "cli"
    runner = CliRunner()
    runner.invoke(cli, ["geometry", "--config", str(tiny_config_file), "--out", str(out)])

    result = runner.invoke(cli, ["geometry", "--config", str(tiny_config_file), "--out", str(out)])

    assert result.exit_code == 1
    assert "[pipeline]" in result.output

    bad = tmp_path / "bad.yaml"
    bad.write_text("variant: XGM\n")
    result = runner.invoke(cli, ["geometry", "--config", str(bad), "--out", str(tmp_path / "other")])
    assert result.exit_code == 1
    assert "[config] variant:" in result.output


def test_cli_stokes_flag(tmp_path, tiny_config_file):
    out = tmp_path / "stokes"

    result = CliRunner().invoke(cli, ["flow", "--config", str(tiny_config_file), "--out", str(out), "--stokes"])

    assert result.exit_code == 0, result.output
    meta = read_json(out / "meta.json")
    assert meta["flow"]["stokes_mode"] is True
    assert meta["config"]["stokes_mode"] is True


def test_cli_compare(tmp_path, tiny_config_file):
    runner = CliRunner()
    for name in ("a", "b"):
        result = runner.invoke(cli, ["report", "--config", str(tiny_config_file), "--out", str(tmp_path / name)])
        assert result.exit_code == 0, result.output

    result = runner.invoke(cli, ["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "cmp")])

    assert result.exit_code == 0, result.output
    assert written(json.loads(result.stdout)) == {"comparison.csv"}
    lines = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("PLAIN,PLAIN#2,1,")


VARIANT_CONFIG = """
variant: {variant}
channel_length_um: 1700
n_periods: 2
grid_spacing_um: 10
flow_rate_per_inlet_ul_per_min: 5.0
flow_tol: 1.0e-4
n_particles: 2000
"""


@pytest.mark.slow
def test_variants_rank_cdm_over_sgm_over_plain(tmp_path):
    runs = []
    for variant in ("PLAIN", "SGM", "CDM"):
        out = tmp_path / variant
        run_pipeline(parse_config(VARIANT_CONFIG.format(variant=variant), overrides={"output_dir": str(out)}))
        runs.append(out)

    run_compare(runs, tmp_path / "cmp")

    targets = pd.read_csv(tmp_path / "cmp" / "targets.csv")
    ordering = targets[targets["target"].str.startswith("CDM > SGM > PLAIN")]
    assert list(ordering["target"]) == [
        "CDM > SGM > PLAIN fret_factor at period 2",
        "CDM > SGM > PLAIN mixing_index at period 2",
    ]
    assert ordering["met"].all()
    # soft target: reported with its sensitivity whether met or not
    split = targets[targets["target"].str.contains("split vortex")]
    assert len(split) == 1
    assert "slice_projection=transverse" in split["depends_on"].iloc[0]
    plain = read_json(runs[0] / "meta.json")
    report = pd.read_csv(runs[0] / "report.csv")
    assert report["mixing_index"].max() <= 0.02
    assert plain["trace"]["rotation_planes"] == 2
