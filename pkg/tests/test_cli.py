"""Tests for the command-line surface: artifacts, reuse and exit codes."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from metaforge import cli
from metaforge.config import DesignBounds, INNTrainConfig, PipeSpec
from metaforge.geometry import DesignVector
from metaforge.inn import build_inn

SMALL_CONFIG = """\
[grid]
n_points = 5
lateral_hi = 2000.0

[tmm]
decimal_digits = 30

[surrogate]
max_iterations = 3
batch_size = 4
hidden_units = 8

[pso]
population = 8
max_iterations = 3

[inverse]
band_widths = 500
centers_per_width = 2
"""


@pytest.fixture(autouse=True)
def _no_workspace_env(monkeypatch):
    monkeypatch.delenv("METAFORGE_WORKSPACE", raising=False)


@pytest.fixture
def global_args(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(SMALL_CONFIG)
    return ["--config", str(config), "--workspace", str(tmp_path / "ws")]


class TestSweep:
    def test_uniform_axial_sweep(self, global_args, capsys):
        code = cli.run_command([*global_args, "sweep", "--design", "uniform", "--mode", "axial"])
        assert code == 0
        out = Path(capsys.readouterr().out.strip())
        assert out.parent.name == "runs"
        rows = list(csv.DictReader((out / "curve_axial.csv").open()))
        assert len(rows) == 5
        assert set(rows[0]) == {"frequency_hz", "mode", "dof", "magnitude", "resonant_flag"}
        bands = json.loads((out / "bands.json").read_text())
        assert bands[0]["mode"] == "axial"
        assert len(bands[0]["peaks_hz"]) == 1
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "sweep"
        assert "curve_axial.csv" in manifest["outputs"]
        assert manifest["oracle"]["magnitudes"] == "tmm"

    def test_profile_export(self, global_args):
        out = cli.execute([*global_args, "sweep", "--mode", "torsional"])
        header = (out / "profile.csv").read_text().splitlines()[0]
        assert header == "x_start_m,x_end_m,outer_diameter_m"
        assert (out / "curve_torsional.csv").is_file()
        assert not (out / "curve_axial.csv").exists()


class TestExitCodes:
    def test_missing_config_is_config_error(self, tmp_path):
        assert cli.run_command(["--config", str(tmp_path / "none.ini"), "sweep"]) == 2

    def test_invalid_config_value(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[tmm]\ndecimal_digits = 8\n")
        assert cli.run_command(["--config", str(bad), "sweep"]) == 2

    def test_malformed_band(self, global_args):
        assert cli.run_command([*global_args, "verify", "--design", "uniform", "--band", "700:600"]) == 3

    def test_missing_design_file(self, global_args, tmp_path):
        code = cli.run_command(
            [*global_args, "verify", "--design", str(tmp_path / "nope.json"), "--band", "100:200"]
        )
        assert code == 1

    def test_band_outside_grid(self, global_args, tmp_path):
        assert cli.run_command([*global_args, "verify", "--design", "uniform", "--band", "5000:6000"]) == 3
        assert not list((tmp_path / "ws").glob("runs/*"))

    def test_retrieve_band_outside_lateral_grid(self, global_args, tmp_path):
        argv = [*global_args, "retrieve", "--band", "2500:3000", "--model", str(tmp_path / "none")]
        assert cli.run_command(argv) == 3

    def test_sweep_checks_design_bounds(self, global_args, tmp_path):
        design = DesignVector.uniform(PipeSpec(), DesignBounds())
        bad = DesignVector((0.5,) + design.d[1:], design.w_ring, design.w_gap)
        path = bad.save(tmp_path / "bad.json")
        assert cli.run_command([*global_args, "sweep", "--design", str(path), "--mode", "axial"]) == 3

    def test_bad_thread_count(self, global_args):
        assert cli.run_command([*global_args, "--threads", "0", "sweep"]) == 2


class TestVerify:
    def test_clear_band_passes(self, global_args):
        out = cli.execute(
            [*global_args, "verify", "--design", "uniform", "--band", "100:500", "--mode", "axial"]
        )
        report = json.loads((out / "report.json").read_text())
        assert report["feasible"]
        assert report["oracle"] == "tmm"

    def test_band_over_resonance_fails(self, global_args, tmp_path):
        argv = [*global_args, "verify", "--design", "uniform", "--band", "550:700", "--mode", "axial"]
        assert cli.run_command(argv) == 3
        reports = list((tmp_path / "ws" / "runs").glob("*/report.json"))
        assert len(reports) == 1
        assert json.loads(reports[0].read_text())["modes"]["axial"]["peaks_in_band"] == 1


class TestPipeline:
    def test_samples_are_reused(self, global_args, monkeypatch):
        first = cli.execute([*global_args, "gen-samples", "--n", "3"])
        assert (first / "targets.bin").is_file()

        def fail(*args, **kwargs):
            raise AssertionError("dataset should have been reused")

        monkeypatch.setattr(cli, "generate_dataset", fail)
        assert cli.execute([*global_args, "gen-samples", "--n", "3"]) == first

    def test_surrogates_then_designs(self, global_args):
        dataset = cli.execute([*global_args, "gen-samples", "--n", "6"])
        models = cli.execute([*global_args, "train-surrogates", "--dataset", str(dataset)])
        assert (models / "suite" / "manifest.json").is_file()
        manifest = json.loads((models / "manifest.json").read_text())
        assert manifest["results"]["n_models"] == 5

        forward = cli.execute([*global_args, "optimize-band", "--suite", str(models)])
        result = json.loads((forward / "result.json").read_text())
        assert result["verified_oracle"] == "tmm"
        trace = (forward / "trace.csv").read_text().splitlines()
        assert trace[0] == "iteration,best_value"
        assert len(trace) == 1 + 4

        inverse = cli.execute([*global_args, "gen-inverse-samples", "--suite", str(models), "--limit", "1"])
        header = (inverse / "inverse.csv").read_text().splitlines()[0].split(",")
        assert header[-4:] == ["omega_lo", "omega_hi", "mass_kg", "verified"]
        assert json.loads((inverse / "manifest.json").read_text())["results"]["planned"] == 1

    def test_retrieve_from_saved_model(self, global_args, tmp_path):
        model = build_inn(
            INNTrainConfig(), DesignBounds(), np.array([1000.0, 1250.0]), np.array([1500.0, 2000.0])
        )
        model.save(tmp_path / "inn")
        out = cli.execute(
            [
                *global_args,
                "retrieve",
                "--band",
                "1200:1500",
                "--model",
                str(tmp_path / "inn"),
                "--z-policy",
                "sample",
                "--k",
                "2",
            ]
        )
        report = json.loads((out / "report.json").read_text())
        assert len(report["candidates"]) == 2
        assert (out / "design.json").is_file()
        assert (out / "profile.csv").is_file()

    def test_sample_count_defaults_to_config(self, tmp_path):
        config = tmp_path / "run.ini"
        config.write_text(SMALL_CONFIG + "\n[inn]\nz_candidates = 3\n")
        model = build_inn(
            INNTrainConfig(), DesignBounds(), np.array([1000.0, 1250.0]), np.array([1500.0, 2000.0])
        )
        model.save(tmp_path / "inn")
        argv = ["--config", str(config), "--workspace", str(tmp_path / "ws"), "retrieve"]
        argv += ["--band", "1200:1500", "--model", str(tmp_path / "inn"), "--z-policy", "sample"]
        out = cli.execute(argv)
        assert len(json.loads((out / "report.json").read_text())["candidates"]) == 3


class TestParser:
    def test_every_command_registered(self):
        parser = cli.build_parser()
        for name in cli.COMMANDS:
            assert parser.parse_args([name, *_required(name)]).command == name

    def test_workspace_flag_overrides_config(self, global_args, tmp_path):
        args = cli.build_parser().parse_args([*global_args, "sweep"])
        assert cli.resolve_config(args).run.workspace == str(tmp_path / "ws")


def _required(name: str) -> list[str]:
    return {
        "train-surrogates": ["--dataset", "d"],
        "optimize-band": ["--suite", "s"],
        "gen-inverse-samples": ["--suite", "s"],
        "train-inn": ["--inverse", "i"],
        "retrieve": ["--band", "1:2", "--model", "m"],
        "verify": ["--design", "uniform", "--band", "1:2"],
    }.get(name, [])
