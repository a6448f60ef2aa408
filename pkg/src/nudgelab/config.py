"""Run configuration loaded from YAML.

Example::

    seed: 20241104
    population: 233
    calibration: paper          # paper | null
    cleaning: {iqr_k: 3.0, max_missing_share: 0.4}
    backend: template           # template | remote
    analyses: {hte: true, text: true}
    hte_trees: 200
    permutations: 1000
    out: runs/default
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .trial_sim import ConfigError, ResponseModel, SimConfig, null_response, paper_response, CleaningRules

ANALYSES = ("contrasts", "permutation", "panel_fe", "engagement", "survival", "trajectories",
            "hte", "archetypes", "text", "predictors")
CALIBRATIONS = ("paper", "null")
BACKENDS = ("template", "remote")
MAX_SEED = 2**64 - 1


@dataclass
class RunConfig:
    seed: int
    population: int = 233
    calibration: str = "paper"
    # optional per-resource, per-arm saving curves overriding the calibration
    arm_curves: dict[str, dict[str, list[float]]] | None = None
    cleaning: dict[str, float] = field(default_factory=lambda: {"iqr_k": 3.0, "max_missing_share": 0.4})
    backend: str = "template"
    analyses: dict[str, bool] = field(default_factory=lambda: {a: True for a in ANALYSES})
    hte_trees: int = 200
    permutations: int = 1000
    n_rounds: int = 5
    out: str = "runs/default"

    def __post_init__(self) -> None:
        self.analyses = {a: bool(self.analyses.get(a, True)) for a in ANALYSES} | {
            k: bool(v) for k, v in self.analyses.items()}
        self.validate()

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= int(self.seed) <= MAX_SEED:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if int(self.population) < 3:
            raise ConfigError(f"population must be at least 3, got {self.population}")
        if self.calibration not in CALIBRATIONS:
            raise ConfigError(f"calibration must be one of {CALIBRATIONS}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        unknown = set(self.analyses) - set(ANALYSES)
        if unknown:
            raise ConfigError(f"unknown analyses {sorted(unknown)}")
        unknown = set(self.cleaning) - {"iqr_k", "max_missing_share"}
        if unknown:
            raise ConfigError(f"unknown cleaning keys {sorted(unknown)}")
        if not 0 <= self.cleaning.get("max_missing_share", 0.4) <= 1:
            raise ConfigError("max_missing_share must be in [0, 1]")
        if self.cleaning.get("iqr_k", 3.0) <= 0:
            raise ConfigError("iqr_k must be positive")
        if self.hte_trees < 1 or self.permutations < 1:
            raise ConfigError("hte_trees and permutations must be positive")
        self.sim_config().validate()

    def response(self) -> ResponseModel:
        resp = paper_response(self.n_rounds) if self.calibration == "paper" else null_response(self.n_rounds)
        if self.arm_curves:
            for res, curves in self.arm_curves.items():
                if res not in resp.arm_curves:
                    raise ConfigError(f"unknown resource {res!r} in arm_curves")
                for arm, c in curves.items():
                    resp.arm_curves[res][arm] = [float(v) for v in c]
        return resp

    def sim_config(self) -> SimConfig:
        return SimConfig(response=self.response(), n_rounds=self.n_rounds)

    def cleaning_rules(self) -> CleaningRules:
        return CleaningRules(**self.cleaning)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Read YAML (if given) and apply non-None keyword overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    allowed = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "seed" not in data:
        raise ConfigError("seed is mandatory")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def stream_seed(seed: int, name: str) -> int:
    """Independent 64-bit seed for a named random stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, *name.encode("utf-8")])
    return int(ss.generate_state(2, dtype=np.uint64)[0] % (2**63))
