#!/usr/bin/env python3
"""
Experiment runners and the CLI: config layering, artifacts, manifests, exit codes
"""

import json

import numpy as np
import pytest

from qwalk_lab.artifacts import decode_pgm, read_manifest
from qwalk_lab.config import environment_overrides
from qwalk_lab.errors import ConfigError
from qwalk_lab.expcli import (
    COMMANDS,
    ExperimentConfig,
    cmd_focus,
    cmd_hom_scan,
    cmd_hom_source,
    cmd_measure_tm,
    cmd_phase_grid,
    cmd_ttm_matrix,
    config_from_values,
    load_experiment_config,
)
from qwalk_lab.main import EXIT_CONFIG, EXIT_IO, EXIT_OK, run

SMALL = {
    "n_in_h": "20",
    "n_in_v": "22",
    "n_out": "16",
    "seed": "13",
    "scan_width": "3",
    "grid_size": "4",
}


def small_config(out_dir, **extra) -> ExperimentConfig:
    values = dict(SMALL, output_dir=str(out_dir))
    values.update({k: str(v) for k, v in extra.items()})
    return config_from_values(values)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    for var in ("QWALK_SEED", "QWALK_NOISE", "QWALK_OUT_DIR", "QWALK_DEBUG"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    monkeypatch.chdir(tmp_path)


# --- Config ---
def test_default_targets_sit_on_the_grid_quarters():
    config = ExperimentConfig()
    assert config.resolved_targets() == (22, 77)
    assert config.resolved_f1() == [22, 24]
    assert config.resolved_f2() == [77, 79]


def test_small_grid_targets():
    config = small_config("out")
    assert config.fiber.grid_shape == (4, 4)
    assert config.resolved_targets() == (5, 15)
    assert config.resolved_f1() == [5, 7]
    assert config.resolved_f2() == [15, 13]


def test_flat_keys_route_into_parameter_sets():
    config = config_from_values(
        {
            "seed": "42",
            "noise": "poisson",
            "noise_seed": "8",
            "pair_rate": "1e4",
            "dark_rate": "50",
            "h_inputs": "0, 2",
            "hom_deltas": "-0.2,0,0.2",
            "matrix_duration": "60",
        }
    )
    assert config.fiber.seed == 42
    assert config.detector.noise_mode == "poisson"
    assert config.detector.seed == 8
    assert config.source.pair_rate == 1e4
    assert config.detector.dark_rate == 50.0
    assert config.h_inputs == [0, 2]
    assert config.hom_deltas == [-0.2, 0.0, 0.2]
    assert config.matrix_duration == 60.0


@pytest.mark.parametrize(
    "values",
    [
        {"colour": "blue"},
        {"noise": "gaussian"},
        {"h_inputs": "0,x"},
        {"target_x": "5", "target_y": "5"},
        {"target_x": "100"},
        {"h_inputs": "180"},
        {"scan_width": "11"},
        {"target_x": "22", "target_y": "24"},
    ],
)
def test_bad_settings_raise_config_error(values):
    with pytest.raises(ConfigError):
        config_from_values(values)


def test_layering_file_then_environment_then_flags(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# small run\nseed = 3\nnoise = poisson\npair_rate = 5000\n", encoding="utf-8")
    from_file = load_experiment_config(str(path), environ={})
    assert (from_file.fiber.seed, from_file.detector.noise_mode, from_file.source.pair_rate) == (3, "poisson", 5000.0)

    with_env = load_experiment_config(str(path), environ={"QWALK_SEED": "4", "QWALK_NOISE": "off"})
    assert (with_env.fiber.seed, with_env.detector.noise_mode) == (4, "noiseless")

    with_flags = load_experiment_config(str(path), {"seed": "5", "noise": None}, environ={"QWALK_SEED": "4"})
    assert with_flags.fiber.seed == 5
    assert with_flags.detector.noise_mode == "poisson"


def test_environment_overrides_skip_unknown_variables(capsys):
    overrides = environment_overrides({"QWALK_SEED": " 4 ", "QWALK_SEDE": "9", "QWALK_DEBUG": "1", "HOME": "/root"})
    assert overrides == {"seed": "4"}
    out = capsys.readouterr().out
    assert "QWALK_SEDE" in out and "QWALK_DEBUG" not in out


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(str(tmp_path / "nope.conf"), environ={})


# --- Runners ---
def manifest_names(out_dir):
    return [f["name"] for f in read_manifest(out_dir / "manifest.json")["files"]]


def test_measure_tm_run(tmp_path):
    out = tmp_path / "tm"
    report = cmd_measure_tm(small_config(out))
    assert report["fidelity"] > 0.999
    assert report["shape"] == [16, 42]
    assert manifest_names(out) == ["tm.qwtm", "tm_report.json"]


def test_ttm_matrix_run(tmp_path):
    out = tmp_path / "ttm"
    summary = cmd_ttm_matrix(small_config(out))
    assert summary["shape"] == [16, 4]
    lines = (out / "coincidences_near.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "input,X1Y2,X1Y1,X2Y2,X2Y1"
    assert lines[1].startswith("H0V0,")
    assert len(lines) == 17
    assert "\r" not in (out / "contrast.csv").read_text(encoding="utf-8")
    image = decode_pgm((out / "speckle_BOTH.pgm").read_bytes())
    assert image.shape == (4, 4)
    sidecar = json.loads((out / "speckle_BOTH.json").read_text(encoding="utf-8"))
    assert sidecar["maxval"] == 65535 and sidecar["counts_per_level"] > 0
    assert "manifest.json" not in manifest_names(out)


def test_ttm_matrix_contrast_stays_below_the_bound(tmp_path):
    summary = cmd_ttm_matrix(small_config(tmp_path / "ttm"))
    assert summary["undefined_entries"] == 0
    assert summary["max_abs_contrast"] <= 0.88


def test_focus_at_desk_scale(tmp_path):
    summary = cmd_focus(config_from_values({"output_dir": str(tmp_path / "desk")}))
    assert summary["target"] == [22, 77]
    independent, superposition = summary["independent"], summary["superposition"]
    assert independent["enhancement"] >= 50
    assert abs(independent["contrast"]) < 0.1
    assert 0.6 * 0.86 <= superposition["contrast"] <= 0.86
    for setup in (independent, superposition):
        assert setup["singles_near"] == setup["singles_far"]


def test_independent_focus_contrast_is_within_counting_noise(tmp_path):
    values = {"output_dir": str(tmp_path / "poisson"), "noise": "poisson", "noise_seed": "5", "pair_rate": "20"}
    independent = cmd_focus(config_from_values(values))["independent"]
    assert independent["target_counts_near"] == round(independent["target_counts_near"])
    assert abs(independent["contrast"]) < 3 * independent["contrast_sigma"]


def test_focus_run_separates_the_two_setups(tmp_path):
    out = tmp_path / "focus"
    summary = cmd_focus(small_config(out))
    assert summary["target"] == [5, 15]
    assert summary["superposition"]["contrast"] > 0.5
    assert abs(summary["superposition"]["contrast"]) > abs(summary["independent"]["contrast"])
    mask_lines = (out / "mask_superposition.csv").read_text(encoding="utf-8").splitlines()
    assert mask_lines[0] == "half,mode,phase,zero_amplitude"
    assert len(mask_lines) == 1 + 20 + 22
    near = (out / "focus_independent_near.csv").read_text(encoding="utf-8").splitlines()
    assert near[0] == "f1,Y1,Y2,Y3"


def test_phase_grid_run_follows_the_cosine_law(tmp_path):
    out = tmp_path / "grid"
    summary = cmd_phase_grid(small_config(out))
    assert summary["amplitude"] > 0.5
    assert summary["correlation"] > 0.9
    assert abs(np.angle(np.exp(1j * summary["phase_offset"]))) < 0.5
    rows = (out / "phase_grid.csv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 1 + 16


def test_hom_scan_run_shapes(tmp_path):
    summary = cmd_hom_scan(small_config(tmp_path / "hom", tm_source="oracle"))
    assert summary["phase_0_0"]["shape"] == "peak"
    assert summary["phase_0_pi"]["shape"] == "dip"
    assert summary["phase_0_pi2"]["shape"] == "flat"
    for setting in summary.values():
        assert setting["shape"] == setting["model_shape"]


def test_hom_source_visibility(tmp_path):
    config = small_config(tmp_path / "source")
    summary = cmd_hom_source(config)
    far = config.source.mutual_coherence(0.6)
    assert summary["shape"] == "dip"
    assert summary["visibility"] == pytest.approx((0.86 - far) / (1 - far), abs=1e-9)
    assert summary["accidental_counts"] > 0
    assert summary["raw_visibility"] < summary["visibility"]


def test_runs_are_byte_identical(tmp_path):
    for name in ("first", "second"):
        cmd_ttm_matrix(small_config(tmp_path / name, noise="poisson"))
    first = read_manifest(tmp_path / "first" / "manifest.json")
    second = read_manifest(tmp_path / "second" / "manifest.json")
    assert first["files"] == second["files"]
    assert first["created"] == second["created"] == "2023-11-14T22:13:20+00:00"


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_every_command_is_reproducible(tmp_path, command):
    for name in ("first", "second"):
        COMMANDS[command](small_config(tmp_path / name, noise="poisson", noise_seed=4))
    first = read_manifest(tmp_path / "first" / "manifest.json")
    second = read_manifest(tmp_path / "second" / "manifest.json")
    assert first["files"] and first["files"] == second["files"]


def test_noise_seed_changes_counts(tmp_path):
    cmd_ttm_matrix(small_config(tmp_path / "a", noise="poisson", noise_seed=1))
    cmd_ttm_matrix(small_config(tmp_path / "b", noise="poisson", noise_seed=2))
    a = (tmp_path / "a" / "coincidences_near.csv").read_bytes()
    b = (tmp_path / "b" / "coincidences_near.csv").read_bytes()
    assert a != b


def test_every_command_is_registered():
    assert sorted(COMMANDS) == ["focus", "hom-scan", "hom-source", "measure-tm", "phase-grid", "ttm-matrix"]


# --- CLI ---
def test_cli_success_and_verify(tmp_path):
    out = tmp_path / "cli"
    args = ["hom-source", "--out", str(out), "--noise", "poisson", "--seed", "7"]
    assert run(args) == EXIT_OK
    assert (out / "hom_source.csv").is_file()
    assert run(args + ["--verify"]) == EXIT_OK


def test_cli_verify_needs_a_manifest(tmp_path):
    assert run(["hom-source", "--out", str(tmp_path / "empty"), "--verify"]) == EXIT_IO


def test_cli_verify_detects_changed_output(tmp_path):
    out = tmp_path / "changed"
    assert run(["hom-source", "--out", str(out), "--noise", "poisson"]) == EXIT_OK
    conf = tmp_path / "other.conf"
    conf.write_text("noise_seed = 99\n", encoding="utf-8")
    assert run(["hom-source", "--config", str(conf), "--out", str(out), "--noise", "poisson", "--verify"]) == EXIT_IO


def test_cli_config_errors(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n", encoding="utf-8")
    assert run(["hom-source", "--config", str(conf), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    conf.write_text("n_out = -3\n", encoding="utf-8")
    assert run(["hom-source", "--config", str(conf)]) == EXIT_CONFIG


def test_cli_environment_overrides(tmp_path, monkeypatch):
    out = tmp_path / "env"
    monkeypatch.setenv("QWALK_OUT_DIR", str(out))
    assert run(["hom-source"]) == EXIT_OK
    assert (out / "manifest.json").is_file()


if __name__ == "__main__":
    print("Run with: pytest test_files/test_expcli.py (uses tmp_path and monkeypatch fixtures)")
