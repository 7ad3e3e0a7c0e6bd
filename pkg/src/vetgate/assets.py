"""Locations of the fixture and profile documents shipped with the package."""

from __future__ import annotations

from importlib.resources import files
from pathlib import Path

__all__ = ["fixtures_dir", "profiles_dir", "fixture_path", "profile_path",
           "protocol_path"]


def _data_dir() -> Path:
    return Path(str(files("vetgate") / "data"))


def fixtures_dir() -> Path:
    return _data_dir() / "fixtures"


def profiles_dir() -> Path:
    return _data_dir() / "profiles"


def fixture_path(name: str) -> Path:
    path = fixtures_dir() / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled fixture named {name!r}")
    return path


def profile_path(name: str) -> Path:
    path = profiles_dir() / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled profile named {name!r}")
    return path


def protocol_path(name: str) -> Path:
    path = _data_dir() / "protocols" / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled protocol named {name!r}")
    return path
