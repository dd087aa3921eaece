"""Flat run configuration, seed plumbing and resolved-config snapshots."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

GRID = ("tdex", "stacked", "shared", "raw", "pca", "sum_pooled", "shuffled", "torque",
        "image_only", "tactile_only", "task_only", "bc")
PLAY_FRACTIONS = (0.0, 0.125, 0.25, 0.5, 1.0)


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


@dataclass
class RunConfig:
    seed: int = 0
    env: str = "synth:lift"
    data_dir: str = "data"
    out_dir: str = "runs/ablate"
    variants: list = field(default_factory=lambda: list(GRID))
    play_fractions: list = field(default_factory=lambda: list(PLAY_FRACTIONS))
    sweep_replicates: int = 3  # encoder seeds averaged per sweep point
    n_demos: int = 6
    play_minutes: float = 5.0
    play_threshold: float = 0.01
    demo_threshold: float = 0.02
    byol_steps: int = 300
    batch: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-5
    ema_tau: float = 0.99
    epochs: int = 0  # 0 derives epochs from byol_steps
    episodes: int = 100
    reject_k: int = 10
    w_v: float = 1.0
    w_t: float = 1.0
    pca_k: int = 100
    bc_epochs: int = 200
    kp: float = 1.0
    kd: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        unknown = [v for v in self.variants if v not in GRID]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}; choose from {list(GRID)}")
        for f in self.play_fractions:
            if not 0.0 <= f <= 1.0:
                raise ConfigError(f"play fraction {f} outside [0, 1]")
        for name in ("n_demos", "byol_steps", "batch", "episodes", "pca_k", "sweep_replicates"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.reject_k < 0 or self.w_v < 0 or self.w_t < 0:
            raise ConfigError("reject_k and weights must be non-negative")
        if self.play_threshold <= 0 or self.demo_threshold <= 0:
            raise ConfigError("subsampling thresholds must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        clean = {}
        for k, v in d.items():
            default = getattr(_DEFAULTS, k)
            if isinstance(default, list):
                if not isinstance(v, list):
                    raise ConfigError(f"{k} must be a list")
            elif isinstance(default, str):
                if not isinstance(v, str):
                    raise ConfigError(f"{k} must be a string")
            elif isinstance(v, (bool, str, list, dict)) or v is None:
                raise ConfigError(f"{k} must be a number")
            elif isinstance(default, int):
                if isinstance(v, float) and not v.is_integer():
                    raise ConfigError(f"{k} must be an integer")
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            clean[k] = v
        return cls(**clean)

    def with_overrides(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(d)


_DEFAULTS = RunConfig()


def load_config(path=None, env=None) -> RunConfig:
    """Read a flat JSON object; ``TDEX_SEED`` in the environment overrides ``seed``."""
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a flat object")
    env = os.environ if env is None else env
    if env.get("TDEX_SEED"):
        try:
            d["seed"] = int(env["TDEX_SEED"])
        except ValueError as exc:
            raise ConfigError(f"TDEX_SEED must be an integer, got {env['TDEX_SEED']!r}") from exc
    return RunConfig.from_dict(d)


def write_snapshot(cfg: RunConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def stage_seed(seed: int, stage: str) -> int:
    """Stable 31-bit seed for a named pipeline stage."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF
