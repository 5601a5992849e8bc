import json
from pathlib import Path

import pytest

import config
from errors import ConfigError


def test_ini_accessors(loaded_config):
    assert config.get_path("PATHS", "LOG_PATH") == Path("logs")
    assert config.get_int("BEHAVIOR", "DEFAULT_SEED") == 7
    assert config.get_int("BEHAVIOR", "THREADS") == 1
    assert config.get_flag("BEHAVIOR", "DEBUG_MODE") is False
    assert config.get_path("PATHS", "OUTPUT_PATH") == Path("runs/default")


def test_ini_accessor_fallbacks(loaded_config):
    assert config.get_flag("BEHAVIOR", "NOT_THERE", default=True) is True
    assert config.get_int("BEHAVIOR", "NOT_THERE", default=3) == 3
    with pytest.raises(ConfigError):
        config.get_path("PATHS", "NOT_THERE")


def test_invalid_integer_falls_back(loaded_config, monkeypatch):
    monkeypatch.setitem(loaded_config["BEHAVIOR"], "THREADS", "many")
    assert config.get_int("BEHAVIOR", "THREADS", default=2) == 2


def test_missing_ini_file():
    with pytest.raises(ConfigError):
        config.load_config("no_such_file.ini")


def test_run_config_defaults():
    cfg = config.load_run_config(None)
    assert cfg.seed is None and cfg.threads is None
    assert cfg.scenario.canvas == 128
    assert cfg.harmonization.init_samples == 100
    assert cfg.harmonization.iterations == 100
    assert cfg.downstream.iterations == 500


def _write(tmp_path, data):
    path = tmp_path / "run.json"
    path.write_text(data if isinstance(data, str) else json.dumps(data), encoding="utf-8")
    return path


@pytest.mark.parametrize("data", [
    {"harmonisation": {}},
    {"harmonization": {"iterations": 0}},
    {"scenario": {"canvas": 32}},
    {"seed": -1},
    "[1, 2]",
    "{not json",
])
def test_bad_run_configs(tmp_path, data):
    with pytest.raises(ConfigError):
        config.load_run_config(_write(tmp_path, data))


def test_missing_run_config(tmp_path):
    with pytest.raises(ConfigError):
        config.load_run_config(tmp_path / "absent.json")


def test_noisy_source_is_a_config_error(tmp_path):
    source = config.ScenarioConfig().source.model_dump()
    source["base_style"]["noise_sigma"] = 0.04
    with pytest.raises(ConfigError, match="scenario"):
        config.load_run_config(_write(tmp_path, {"scenario": {"source": source}}))


def test_nested_settings_parse(tmp_path):
    cfg = config.load_run_config(_write(tmp_path, {
        "scenario": {"canvas": 64, "n_target_train": 2},
        "harmonization": {"acquisition": {"beta": 0.5}, "snapshot_iterations": [0, 3]},
    }))
    assert cfg.scenario.to_scenario().anatomy.canvas == 64
    assert cfg.harmonization.acquisition.beta == 0.5
    assert cfg.harmonization.snapshot_iterations == (0, 3)


def test_precedence_ini_json_flags(tmp_path, loaded_config):
    plain = config.resolve_run_config(config.load_run_config(None))
    assert plain.seed == 7
    assert plain.threads == 1
    assert plain.output.directory == str(Path("runs/default"))

    from_json = config.load_run_config(_write(tmp_path, {"seed": 11, "output": {"directory": "x"}}))
    resolved = config.resolve_run_config(from_json)
    assert resolved.seed == 11
    assert resolved.output.directory == "x"

    flagged = config.resolve_run_config(from_json, seed=3, out="y", threads=4, snapshots=False)
    assert (flagged.seed, flagged.output.directory, flagged.threads) == (3, "y", 4)
    assert flagged.output.snapshots is False


def test_threads_reach_harmonization(loaded_config):
    resolved = config.resolve_run_config(config.load_run_config(None), threads=3)
    assert resolved.harmonization.threads == 3


def test_search_seeds_follow_master_seed(loaded_config):
    a = config.resolve_run_config(config.load_run_config(None), seed=1)
    b = config.resolve_run_config(config.load_run_config(None), seed=2)
    assert (a.harmonization.seed, a.harmonization.noise_seed) == (1, 1)
    assert (b.harmonization.seed, b.harmonization.noise_seed) == (2, 2)
    # the default from config.ini counts as a master seed too
    assert config.resolve_run_config(config.load_run_config(None)).harmonization.seed == 7


def test_explicit_search_seed_wins(tmp_path, loaded_config):
    cfg = config.load_run_config(_write(tmp_path, {"harmonization": {"seed": 5}}))
    resolved = config.resolve_run_config(cfg, seed=9)
    assert resolved.harmonization.seed == 5
    assert resolved.harmonization.noise_seed == 9
    # resolving twice changes nothing
    assert config.resolve_run_config(resolved) == resolved


def test_resolve_needs_loaded_ini(monkeypatch):
    monkeypatch.setattr(config, "CONFIG", None)
    with pytest.raises(RuntimeError):
        config.resolve_run_config(config.RunConfig())
