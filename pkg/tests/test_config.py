import os

import pytest

from spinelab import config
from spinelab.config import Thresholds


def test_env_overrides_pick_known_fields():
    environ = {"SPINELAB_Z_MAX": "5", "SPINELAB_THREADS": "3", "SPINELAB_NOPE": "1", "Z_MAX": "9"}
    assert config.env_overrides(environ) == {"z_max": "5"}


def test_overrides_coerce_types():
    th = Thresholds().replace({"event_cap": "1e6", "window": "0.25"})
    assert th.event_cap == 1_000_000
    assert isinstance(th.event_cap, int)
    assert th.window == 0.25


def test_override_rejects_non_numbers():
    with pytest.raises(ValueError, match="not a number"):
        Thresholds().replace({"z_max": "high"})


def test_parse_overrides_needs_key_value():
    with pytest.raises(ValueError, match="not key=value"):
        config.parse_overrides(["z_max"])


def test_command_line_beats_environment(monkeypatch):
    monkeypatch.setenv("SPINELAB_Z_MAX", "6")
    monkeypatch.setenv("SPINELAB_WINDOW", "0.3")
    monkeypatch.setattr(config, "ENV_FILES", ())
    th = config.resolve_thresholds(["z_max=5"])
    assert th.z_max == 5.0
    assert th.window == 0.3
    assert config.resolve_thresholds(["z_max=5"], use_env=False).window == Thresholds().window


def test_env_file_does_not_override_environment(tmp_path, monkeypatch):
    env_file = tmp_path / "spinelab.env"
    env_file.write_text("SPINELAB_MIN_BATCHES=40\nSPINELAB_Z_MAX=7\n")
    monkeypatch.setattr(os, "environ", {"SPINELAB_Z_MAX": "4.5"})
    config.load_env_files([tmp_path / "missing.env", env_file])
    overrides = config.env_overrides()
    assert overrides["z_max"] == "4.5"
    assert overrides["min_batches"] == "40"


def test_resolve_threads(monkeypatch):
    assert config.resolve_threads(2) == 2
    monkeypatch.setenv("SPINELAB_THREADS", "3")
    assert config.resolve_threads() == 3
    monkeypatch.setenv("SPINELAB_THREADS", "many")
    with pytest.raises(ValueError, match="not an integer"):
        config.resolve_threads()
    with pytest.raises(ValueError, match="positive"):
        config.resolve_threads(0)
