"""CLI configuration with documented precedence.

Values resolve as: command-line flags > environment variables > config
file > built-in defaults. The config file is YAML, located via --config
or VETGATE_CONFIG::

    fixtures_dir: /path/to/fixtures
    manifest: /path/to/manifest.txt
    report_url: http://collector:8097
    report_token: sekrit
    nodelist_var: SLURM_JOB_NODELIST
    jobid_var: SLURM_JOB_ID
    link_peak_gbps: 100.0
    min_scale_warning: 8
    policy:
      flexible: false
      min_nodes: null
      max_exclusion_fraction: 0.1
      deadline_s: 120
      treat_unknown_as: fail-if-strict
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import yaml

__all__ = ["CliConfig", "ConfigError", "load_config"]

_ENV_KEYS = {
    "fixtures_dir": "VETGATE_FIXTURES",
    "manifest": "VETGATE_MANIFEST",
    "report_url": "VETGATE_REPORT_URL",
    "report_token": "VETGATE_REPORT_TOKEN",
    "nodelist_var": "VETGATE_NODELIST_VAR",
    "jobid_var": "VETGATE_JOBID_VAR",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CliConfig:
    fixtures_dir: str | None = None
    manifest: str | None = None
    report_url: str | None = None
    report_token: str | None = None
    nodelist_var: str | None = None
    jobid_var: str | None = None
    flexible: bool = False
    min_nodes: int | None = None
    max_exclusion_fraction: float = 0.1
    deadline_s: float = 120.0
    treat_unknown_as: str = "fail-if-strict"
    link_peak_gbps: float = 100.0
    min_scale_warning: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.max_exclusion_fraction <= 1.0:
            raise ConfigError("max_exclusion_fraction must be in [0, 1]")
        if self.deadline_s <= 0:
            raise ConfigError("deadline_s must be positive")
        if self.treat_unknown_as not in ("fail", "pass", "fail-if-strict"):
            raise ConfigError(f"bad treat_unknown_as {self.treat_unknown_as!r}")


def _from_file(path: Path) -> dict:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    flat = {k: v for k, v in data.items() if k != "policy"}
    for key, value in (data.get("policy") or {}).items():
        flat[key] = value
    return flat


def load_config(environ: dict[str, str],
                config_path: str | None = None) -> CliConfig:
    """Merge config file and environment variables into a CliConfig.

    Flags are applied by the CLI on top of this (they win over both).
    """
    path = config_path or environ.get("VETGATE_CONFIG")
    values: dict = {}
    if path:
        file_path = Path(path)
        if not file_path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(_from_file(file_path))

    for attr, env_key in _ENV_KEYS.items():
        if environ.get(env_key):
            values[attr] = environ[env_key]

    known = set(CliConfig.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return replace(CliConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
