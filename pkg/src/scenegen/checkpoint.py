"""Named-tensor checkpoint archives shared by all three stages.

An archive is a ``torch.save`` zip holding flat ``"<net>/<param>"`` tensor
entries, optimizer state dicts under ``"optimizer/<net>"`` and a JSON
metadata string (stage tag, architecture hash, step count, config
snapshot). Loading uses ``weights_only=True``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


@dataclass
class StageParams:
    """Base container: networks + optimizers + bookkeeping for one stage.

    Subclasses set ``stage`` and build their networks from ``arch``.
    """

    stage = "base"
    arch: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step: int = 0
    log: dict = field(default_factory=dict)

    def networks(self) -> dict[str, nn.Module]:
        raise NotImplementedError

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {}

    def architecture_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.stage.encode())
        h.update(json.dumps(self.arch, sort_keys=True).encode())
        for net_name, net in sorted(self.networks().items()):
            for name, t in net.state_dict().items():
                h.update(f"{net_name}/{name}:{tuple(t.shape)}:{t.dtype}".encode())
        return h.hexdigest()[:16]


def save_checkpoint(path, params: StageParams):
    archive = {}
    for net_name, net in params.networks().items():
        for name, t in net.state_dict().items():
            archive[f"{net_name}/{name}"] = t.detach().clone()
    for opt_name, opt in params.optimizers().items():
        archive[f"optimizer/{opt_name}"] = opt.state_dict()
    meta = {
        "format": FORMAT_VERSION,
        "stage": params.stage,
        "arch": params.arch,
        "arch_hash": params.architecture_hash(),
        "step": int(params.step),
        "config": params.config,
        "log": params.log,
    }
    archive["metadata"] = json.dumps(meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, path)
    return path


def read_archive(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
        meta = json.loads(archive["metadata"])
    except (RuntimeError, EOFError, KeyError, ValueError, TypeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint archive ({e})") from e
    return archive, meta


def load_checkpoint(path, params: StageParams) -> StageParams:
    """Restore tensors into ``params`` in place after checking compatibility."""
    archive, meta = read_archive(path)
    if meta.get("stage") != params.stage:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint is for stage {meta.get('stage')!r}, expected {params.stage!r}")
    if meta.get("arch_hash") != params.architecture_hash():
        raise IncompatibleCheckpointError(
            f"{path}: architecture hash {meta.get('arch_hash')} does not match "
            f"{params.architecture_hash()}")
    for net_name, net in params.networks().items():
        prefix = f"{net_name}/"
        state = {k[len(prefix):]: v for k, v in archive.items() if k.startswith(prefix)}
        net.load_state_dict(state, strict=True)
    for opt_name, opt in params.optimizers().items():
        key = f"optimizer/{opt_name}"
        if key in archive:
            opt.load_state_dict(archive[key])
    params.step = meta.get("step", 0)
    params.config = meta.get("config", {})
    params.log = meta.get("log", {})
    return params


def checkpoint_metadata(path) -> dict:
    return read_archive(path)[1]
