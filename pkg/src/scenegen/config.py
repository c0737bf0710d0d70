"""Run configuration: defaults per stage, JSON config files, CLI overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .context_wgan import Stage1Config
from .pose_transfer import Stage3Config
from .refine_net import Stage2Config

STAGES = ("stage1", "stage2", "stage3")
_STAGE_DEFAULTS = {"stage1": Stage1Config, "stage2": Stage2Config, "stage3": Stage3Config}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    stage: str
    steps: int
    batch: int
    seed: int
    lr: float
    data: str | None = None
    out: str | None = None
    tiny: bool = False
    noise: float | None = None

    def stage_config(self):
        """The stage's own config dataclass, with these values applied."""
        cls = _STAGE_DEFAULTS[self.stage]
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in asdict(self).items() if k in names and v is not None}
        return cls(**kw)


def defaults(stage: str) -> dict:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    d = _STAGE_DEFAULTS[stage]()
    out = {"stage": stage, "steps": d.steps, "batch": d.batch, "seed": d.seed, "lr": d.lr}
    if stage == "stage2":
        out["noise"] = d.noise
    return out


def read_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return doc


def resolve(stage: str, cli: dict | None = None, config_path=None) -> RunConfig:
    """Merge with precedence CLI flag > config file > stage defaults.

    ``cli`` values of ``None`` count as "not given".
    """
    merged = defaults(stage)
    if config_path is not None:
        file_vals = read_config_file(config_path)
        if file_vals.get("stage", stage) != stage:
            raise ConfigError(f"config file is for {file_vals['stage']}, not {stage}")
        merged.update(file_vals)
    known = {f.name for f in fields(RunConfig)}
    merged.update({k: v for k, v in (cli or {}).items() if v is not None and k in known})
    return RunConfig(**merged)
