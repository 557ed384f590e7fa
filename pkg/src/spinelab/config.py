"""Pass/fail thresholds and run settings, resolved from defaults, env files and overrides."""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import logging
import os
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import dotenv  # https://pypi.org/project/python-dotenv/

log = logging.getLogger("config")

ENV_PREFIX = "SPINELAB_"
ENV_FILES = (Path.cwd() / "spinelab.env", Path.home() / ".config" / "spinelab.env")


@dc.dataclass(frozen=True)
class Thresholds:
    """Constants every report is judged against; echoed into artifact headers."""

    z_max: float = 4.0
    median_nondegenerate: float = 0.05
    median_degenerate: float = 0.01
    degenerate_epsilon: float = 0.01
    extinction_final: float = 0.05
    assumption4_tol: float = 1e-3
    event_cap: int = 10_000_000
    window: float = 0.1
    min_batches: int = 30

    def replace(self, overrides: Mapping[str, Any]) -> "Thresholds":
        """Return a copy with `overrides` applied, coercing to each field's type.

        >>> Thresholds().replace({"z_max": "5"}).z_max
        5.0
        >>> Thresholds().replace({"zmax": 5})
        Traceback (most recent call last):
        ...
        ValueError: unknown threshold 'zmax'
        """
        types = {field.name: field.type for field in dc.fields(self)}
        changes = {}
        for key, value in overrides.items():
            if key not in types:
                raise ValueError(f"unknown threshold {key!r}")
            caster = int if types[key] in (int, "int") else float
            try:
                changes[key] = caster(float(value)) if caster is int else caster(value)
            except (TypeError, ValueError) as err:
                raise ValueError(f"threshold {key}={value!r} is not a number") from err
        return dc.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dc.asdict(self)


def load_env_files(paths: Iterable[Path] | None = None) -> None:
    """Load the first spinelab.env found; existing environment variables win."""
    for path in ENV_FILES if paths is None else paths:
        if path.is_file():
            dotenv.load_dotenv(dotenv_path=path, override=False)
            log.info(f"loaded settings from {path}")
            return


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """Collect SPINELAB_<FIELD> variables that name a threshold."""
    environ = os.environ if environ is None else environ
    names = {field.name for field in dc.fields(Thresholds)}
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX) and (name := key[len(ENV_PREFIX) :].lower()) in names:
            out[name] = value
    return out


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    """Split `key=value` strings.

    >>> parse_overrides(["z_max=5", "window=0.2"])
    {'z_max': '5', 'window': '0.2'}
    """
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"threshold override {pair!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def resolve_thresholds(cli_pairs: Iterable[str] = (), use_env: bool = True) -> Thresholds:
    """Defaults, then env file and environment, then command-line overrides."""
    thresholds = Thresholds()
    if use_env:
        load_env_files()
        thresholds = thresholds.replace(env_overrides())
    thresholds = thresholds.replace(parse_overrides(cli_pairs))
    log.debug(f"{thresholds=}")
    return thresholds


def resolve_threads(requested: int | None = None) -> int:
    """Explicit request, then SPINELAB_THREADS, then the CPU count."""
    if requested is not None:
        threads = requested
    elif (env := os.getenv(f"{ENV_PREFIX}THREADS")) is not None:
        try:
            threads = int(env)
        except ValueError as err:
            raise ValueError(f"{ENV_PREFIX}THREADS={env!r} is not an integer") from err
    else:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ValueError(f"thread count must be positive, got {threads}")
    return threads
