"""Python access to the FAR fine-tuning core."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import _core
from ._core import (
    ConfigError,
    FarError,
    FormatError,
    GenerationError,
    InputError,
    NumericError,
    StateError,
)

__all__ = [
    "CliResult",
    "ConfigError",
    "FarError",
    "FormatError",
    "GenerationError",
    "InputError",
    "NumericError",
    "StateError",
    "cli",
    "frozen_share",
    "parameter_counts",
    "select_count",
    "train",
    "verify",
]


@dataclass(frozen=True)
class CliResult:
    code: int
    stdout: str
    stderr: str


def cli(*args: str) -> CliResult:
    """Run the `far` command in-process."""
    code, out, err = _core.run_cli([str(a) for a in args])
    return CliResult(code, out, err)


def _overrides(values: dict) -> list[str]:
    # Keyword names use "__" for the dot in a config path: far__r=10.
    return [f"{k.replace('__', '.')}={json.dumps(v)}" for k, v in values.items()]


def train(config: str | Path, **overrides) -> dict:
    """Train every seed of a config file and return the run summary."""
    return json.loads(_core.train_summary(str(config), _overrides(overrides)))


def verify(fault: str = "none") -> list[dict]:
    """Run the invariant suite."""
    return [{"name": n, "passed": p, "detail": d} for n, p, d in _core.verify(fault)]


def select_count(retention_percent: float, nodes: int) -> int:
    return _core.select_count(retention_percent, nodes)


def parameter_counts(model: dict | None = None) -> dict:
    """Closed-form parameter counts; None selects the paper-scale model."""
    return _core.parameter_counts("" if model is None else json.dumps(model))


def frozen_share(retention_percent: float, model: dict | None = None) -> float:
    return _core.frozen_share("" if model is None else json.dumps(model), retention_percent)
