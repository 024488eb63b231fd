"""Bundled feeder data."""

from importlib import resources
from pathlib import Path


def _data_path(name: str) -> Path:
    with resources.as_file(resources.files(__package__).joinpath(name)) as p:
        return Path(p)


def ieee37_feeder_path() -> Path:
    """Modified IEEE-37 single-phase equivalent feeder (36 load nodes)."""
    return _data_path("ieee37_feeder.csv")


def ieee37_fleet_path() -> Path:
    """Default PV fleet for the IEEE-37 feeder."""
    return _data_path("ieee37_fleet.csv")
