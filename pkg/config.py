"""
config.py
---------
Two configuration layers:

* config.ini next to the modules: site defaults (log folder, default
  output folder, thread count, default seed, debug flag), read with
  configparser through load_config() and the get_* accessors.
* the JSON run config (--config PATH): experiment settings validated by
  the pydantic models below. Unknown keys are rejected.

Command-line flags override both; resolve_run_config() applies that
precedence and returns a fully explicit RunConfig.
"""

import configparser
import json
import logging
from pathlib import Path
from typing import Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

import phantom
from downstream import FeatureSpec
from errors import ConfigError, ContractError
from harmonizer import HarmonizationConfig
from style_manifold import StyleParams

CONFIG = None


def _get_base_path() -> Path:
    return Path(__file__).parent


def load_config(config_name="config.ini"):
    """Read config.ini from the package directory."""
    global CONFIG
    config_file = _get_base_path() / config_name

    if not config_file.exists():
        raise ConfigError(f"Missing configuration file: {config_file}")

    config = configparser.ConfigParser()
    try:
        config.read(config_file, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"Error reading config file {config_file}: {e}")

    CONFIG = config
    logging.debug(f"Config loaded from {config_file}")
    return config


def _require_loaded():
    if CONFIG is None:
        raise RuntimeError("Config not loaded. Call load_config() first.")


def get_path(section, key):
    """Return a Path object for a given config value."""
    _require_loaded()
    value = CONFIG.get(section, key, fallback=None)
    if not value:
        raise ConfigError(f"Missing path setting: [{section}] {key}")
    return Path(value)


def get_flag(section, key, default=False):
    """Return a boolean flag from config (case-insensitive)."""
    _require_loaded()
    val = CONFIG.get(section, key, fallback=str(default)).strip().lower()
    return val in ("true", "1", "yes", "on")


def get_int(section, key, default=0):
    """Return an integer value from config."""
    _require_loaded()
    try:
        return CONFIG.getint(section, key, fallback=default)
    except ValueError:
        logging.warning(f"Invalid integer for [{section}] {key}, using default: {default}")
        return default


# ============================================================================
# Run config schema
# ============================================================================

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProfileConfig(_Strict):
    name: str
    base_style: Dict[str, float]
    jitter: Dict[str, float] = {}
    render_seed: int = Field(ge=0)

    @classmethod
    def from_profile(cls, profile: phantom.ScannerProfile) -> "ProfileConfig":
        return cls(**profile.to_dict())

    def to_profile(self) -> phantom.ScannerProfile:
        return phantom.ScannerProfile(self.name, StyleParams.from_dict(self.base_style),
                                      dict(self.jitter), self.render_seed)


class ScenarioConfig(_Strict):
    target: ProfileConfig = ProfileConfig.from_profile(phantom.DEFAULT_TARGET_PROFILE)
    source: ProfileConfig = ProfileConfig.from_profile(phantom.DEFAULT_SOURCE_PROFILE)
    n_target_train: int = Field(6, ge=1)
    n_source_labeled: int = Field(1, ge=1)
    n_eval_travel_pairs: int = Field(4, ge=1)
    slices_per_subject: int = Field(3, ge=1)
    canvas: int = Field(128, ge=64)

    def to_scenario(self) -> phantom.Scenario:
        # head geometry scales with the canvas
        k = self.canvas / 128.0
        anatomy = phantom.AnatomySpec(
            canvas=self.canvas,
            head_axes=(50.0 * k, 58.0 * k),
            csf_rim=4.0 * k, gm_thickness=7.0 * k,
            ventricle_axes=(5.0 * k, 11.0 * k), ventricle_spacing=12.0 * k,
            wobble_amplitude=2.0 * k,
        )
        return phantom.Scenario(
            target=self.target.to_profile(), source=self.source.to_profile(),
            n_target_train=self.n_target_train, n_source_labeled=self.n_source_labeled,
            n_eval_travel_pairs=self.n_eval_travel_pairs,
            slices_per_subject=self.slices_per_subject, anatomy=anatomy,
        )


class TrainerConfig(_Strict):
    iterations: int = Field(500, ge=0)
    step: float = Field(0.5, gt=0.0)
    l2: float = Field(1e-4, ge=0.0)
    r1: int = Field(1, ge=1)
    r2: int = Field(3, ge=1)

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(r1=self.r1, r2=self.r2)


class OutputConfig(_Strict):
    directory: Optional[str] = None
    snapshots: bool = True


class RunConfig(_Strict):
    seed: Optional[int] = Field(None, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    scenario: ScenarioConfig = ScenarioConfig()
    downstream: TrainerConfig = TrainerConfig()
    harmonization: HarmonizationConfig = HarmonizationConfig()
    output: OutputConfig = OutputConfig()


def _validate(data: dict, source: str) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
        cfg.scenario.to_scenario().check()
    except ValidationError as e:
        raise ConfigError(f"invalid run config {source}: {e}")
    except ContractError as e:
        raise ConfigError(f"invalid scenario in {source}: {e}")
    return cfg


def load_run_config(path: Optional[Path]) -> RunConfig:
    """Parse and validate a JSON run config; None gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"run config not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"run config {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"run config {path} must be a JSON object")
    return _validate(data, str(path))


def resolve_run_config(cfg: RunConfig, seed: Optional[int] = None, out: Optional[str] = None,
                       threads: Optional[int] = None, snapshots: Optional[bool] = None) -> RunConfig:
    """
    Apply config.ini defaults under the run config and flags over it.
    Every optional field comes back filled in. The search and objective
    noise seeds follow the master seed unless the run config sets them.
    """
    _require_loaded()
    data = cfg.model_dump(mode="json")

    data["seed"] = seed if seed is not None else (cfg.seed if cfg.seed is not None
                                                  else get_int("BEHAVIOR", "DEFAULT_SEED", 7))
    data["threads"] = threads if threads is not None else (cfg.threads if cfg.threads is not None
                                                           else get_int("BEHAVIOR", "THREADS", 1))
    data["harmonization"]["threads"] = data["threads"]
    for key in ("seed", "noise_seed"):
        if key not in cfg.harmonization.model_fields_set:
            data["harmonization"][key] = data["seed"]

    directory = out if out is not None else (cfg.output.directory if cfg.output.directory is not None
                                             else str(get_path("PATHS", "OUTPUT_PATH")))
    data["output"]["directory"] = directory
    if snapshots is not None:
        data["output"]["snapshots"] = snapshots

    return _validate(data, "after applying command-line overrides")
