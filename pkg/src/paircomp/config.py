"""Run configuration: one flat dataclass, JSON file + key=value overrides.

Unknown keys are rejected so a typo in a config file or a ``--set``
override fails loudly instead of silently running defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class Config:
    # geometry / model
    width: int = 32
    height: int = 32
    d_model: int = 32
    patch_size: int = 4
    stack_depth: int = 5
    tau: float = 0.5
    bg_mode: str = "zero-residual"
    dtype: str = "f32"
    # diffusion
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50
    cfg_scale: float = 5.0
    # training
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    train_steps: int = 200
    cfg_drop_prob: float = 0.1
    # augmentations
    use_multiview: bool = False
    mv_views: int = 6
    use_rotation: bool = False
    rotation_prob: float = 0.5
    # data
    n_scenes: int = 200
    n_objects: int = 3
    area_threshold: int = 64
    heatmap_grid: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.bg_mode not in ("zero-residual", "identity-residual"):
            raise ValueError(f"bad bg_mode {self.bg_mode!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"bad dtype {self.dtype!r}; expected f32 or f64")
        if self.ddim_steps > self.timesteps:
            raise ValueError("ddim_steps cannot exceed timesteps")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2) + "\n"


_FIELDS = {f.name: f.type for f in dataclasses.fields(Config)}


def _coerce(name: str, raw):
    default = getattr(Config(), name)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("true", "1", "yes"):
            return True
        if str(raw).lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean for {name}: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    """Build a Config from an optional JSON file plus key=value overrides."""
    values: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config JSON must be an object")
        for key, val in raw.items():
            if key not in _FIELDS:
                raise ValueError(f"{path}: unknown config key {key!r}")
            values[key] = _coerce(key, val)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, val)
    return Config(**values)
