"""Stage 2: facial keypoint denoising in a nose-centred, span +-1 frame."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .checkpoint import StageParams, load_checkpoint, read_archive
from .pose_codec import JOINT_INDEX, PoseSkeleton
from .rng import numpy_rng, substream_seed

log = logging.getLogger(__name__)

FACE_JOINTS = ("nose", "r_eye", "l_eye", "r_ear", "l_ear")
FACE_INDEX = np.array([JOINT_INDEX[n] for n in FACE_JOINTS])
DEFAULT_NOISE = 0.05


class NormalizationError(ValueError):
    pass


@dataclass(eq=False)
class FacialVector:
    """Flattened (x, y) of nose, r-eye, l-eye, r-ear, l-ear plus visibility."""

    v: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).reshape(10).copy()
        self.mask = np.asarray(self.mask, dtype=bool).reshape(5).copy()

    @property
    def points(self) -> np.ndarray:
        return self.v.reshape(5, 2)

    @property
    def coord_mask(self) -> np.ndarray:
        """Per-coordinate weights: visible and not the nose."""
        m = np.repeat(self.mask, 2).astype(np.float64)
        m[:2] = 0.0
        return m


class NormContext(NamedTuple):
    nose: np.ndarray
    scale: float


def normalize_facial(skeleton: PoseSkeleton) -> tuple[FacialVector, NormContext]:
    if not skeleton.visible[JOINT_INDEX["nose"]]:
        raise NormalizationError("nose is occluded; facial keypoints cannot be normalized")
    pts = skeleton.xy[FACE_INDEX]
    mask = skeleton.visible[FACE_INDEX]
    nose = pts[0].copy()
    rel = np.where(mask[:, None], pts - nose, 0.0)
    scale = float(np.abs(rel).max())
    if scale == 0.0:
        scale = 1.0
    return FacialVector(rel / scale, mask), NormContext(nose, scale)


def denormalize_facial(fv: FacialVector, ctx: NormContext) -> np.ndarray:
    """(5, 2) keypoints in the original frame; occluded rows are zero."""
    pts = fv.points * ctx.scale + ctx.nose
    return np.where(fv.mask[:, None], pts, 0.0)


def perturb(fv: FacialVector, magnitude: float = DEFAULT_NOISE, seed=None, rng=None) -> FacialVector:
    """Uniform +-magnitude noise on visible non-nose coordinates, clamped to [-1, 1]."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if magnitude == 0:
        return FacialVector(fv.v, fv.mask)
    if rng is None:
        rng = np.random.default_rng(seed)
    noise = rng.uniform(-magnitude, magnitude, size=10) * fv.coord_mask
    return FacialVector(np.clip(fv.v + noise, -1.0, 1.0), fv.mask)


class RefineNet(nn.Module):
    def __init__(self, hidden=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(10, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 10), nn.Tanh(),
        )
        # He init keeps activation scale through the ReLU stack; with plain
        # SGD the default init trains several times slower here.
        for m in self.net:
            if isinstance(m, nn.Linear):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, v):
        return self.net(v)


@dataclass
class Stage2Config:
    steps: int = 100000
    batch: int = 64
    lr: float = 1e-2
    noise: float = DEFAULT_NOISE
    seed: int = 0


@dataclass
class RefineParams(StageParams):
    stage = "stage2"
    net: RefineNet = None
    opt: torch.optim.Optimizer = None

    @classmethod
    def create(cls, seed=0, lr=1e-2):
        torch.manual_seed(substream_seed(seed, "init"))
        net = RefineNet()
        return cls(arch={"hidden": 128}, net=net, opt=torch.optim.SGD(net.parameters(), lr=lr))

    def networks(self):
        return {"refine": self.net}

    def optimizers(self):
        return {"refine": self.opt}


def load_stage2(path) -> RefineParams:
    _, meta = read_archive(path)
    return load_checkpoint(path, RefineParams.create(lr=meta.get("config", {}).get("lr", 1e-2)))


def masked_mse(pred, target, weights):
    """MSE over coordinates with non-zero weight (visible, non-nose)."""
    return ((pred - target) ** 2 * weights).sum() / weights.sum().clamp_min(1.0)


@torch.no_grad()
def refine(params, fv: FacialVector) -> FacialVector:
    net = params.net if isinstance(params, RefineParams) else params
    x = torch.as_tensor(fv.v * np.repeat(fv.mask, 2), dtype=torch.float32)[None]
    out = net(x)[0].double().numpy()
    out = np.where(np.repeat(fv.mask, 2), out, 0.0)
    out[:2] = 0.0
    return FacialVector(out, fv.mask)


def refine_skeleton(params, skeleton: PoseSkeleton) -> PoseSkeleton:
    """Replace visible facial keypoints with refined ones; no-op without a nose."""
    if not skeleton.visible[JOINT_INDEX["nose"]]:
        return skeleton.copy()
    fv, ctx = normalize_facial(skeleton)
    pts = denormalize_facial(refine(params, fv), ctx)
    out = skeleton.copy()
    w, h = skeleton.frame
    rows = FACE_INDEX[fv.mask]
    out.xy[rows, 0] = np.clip(pts[fv.mask, 0], 0.0, np.nextafter(w, 0))
    out.xy[rows, 1] = np.clip(pts[fv.mask, 1], 0.0, np.nextafter(h, 0))
    return out


def facial_dataset(skeletons) -> list[FacialVector]:
    out = []
    for s in skeletons:
        if s.visible[JOINT_INDEX["nose"]] and s.visible[FACE_INDEX[1:]].any():
            out.append(normalize_facial(s)[0])
    return out


def train_stage2(dataset, config: Stage2Config | None = None,
                 params: RefineParams | None = None) -> RefineParams:
    """Plain SGD denoising: perturb clean vectors, regress back to them."""
    config = config or Stage2Config()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("train_stage2 needs a non-empty dataset")
    if isinstance(dataset[0], PoseSkeleton):
        dataset = facial_dataset(dataset)
    clean = torch.tensor(np.stack([f.v for f in dataset]), dtype=torch.float32)
    weights = torch.tensor(np.stack([f.coord_mask for f in dataset]), dtype=torch.float32)
    keep = torch.tensor(np.stack([np.repeat(f.mask, 2) for f in dataset]), dtype=torch.float32)
    if params is None:
        params = RefineParams.create(config.seed, config.lr)
    params.config = dict(vars(config))
    rng = numpy_rng(config.seed, "data")
    noise_rng = numpy_rng(config.seed, "noise")
    losses = params.log.setdefault("loss", [])
    net = params.net
    net.train()
    for _ in range(config.steps):
        idx = torch.from_numpy(rng.integers(0, len(clean), size=config.batch))
        v, w = clean[idx], weights[idx]
        noise = torch.from_numpy(noise_rng.uniform(-config.noise, config.noise, size=v.shape)).float()
        noisy = (v + noise * w).clamp(-1.0, 1.0) * keep[idx]
        params.opt.zero_grad(set_to_none=True)
        loss = masked_mse(net(noisy), v, w)
        loss.backward()
        params.opt.step()
        params.step += 1
        losses.append(loss.item())
        if params.step % 2000 == 0:
            log.info("stage2 step %d  loss %.6f", params.step, np.mean(losses[-200:]))
    net.eval()
    return params
