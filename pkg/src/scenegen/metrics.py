"""SSIM, PCKh and a registry for backbone-dependent scores (IS, DS, LPIPS)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .pose_codec import JOINT_INDEX, PoseSkeleton

LUMA = np.array([0.299, 0.587, 0.114])


class DegenerateSkeletonError(ValueError):
    pass


def _luminance(img) -> np.ndarray:
    """[3, H, W] or [H, W] in [-1, 1] -> [H, W] luminance in [0, 1]."""
    a = np.asarray(img.detach().cpu().numpy() if hasattr(img, "detach") else img, dtype=np.float64)
    a = (a + 1.0) / 2.0
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise ValueError(f"expected [3, H, W], got {a.shape}")
        a = np.tensordot(LUMA, a, axes=1)
    elif a.ndim != 2:
        raise ValueError(f"expected an image, got shape {a.shape}")
    return a


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(a, g):
    """Separable 'valid' correlation with a 1-D kernel along both axes."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(a, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, window=11, k1=0.01, k2=0.03, sigma=1.5) -> float:
    """Mean SSIM of the luminance of two images over a Gaussian window."""
    x, y = _luminance(a), _luminance(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def head_size(skeleton: PoseSkeleton) -> float:
    n, k = JOINT_INDEX["nose"], JOINT_INDEX["neck"]
    if not (skeleton.visible[n] and skeleton.visible[k]):
        raise DegenerateSkeletonError("PCKh needs a visible nose and neck in the reference skeleton")
    return 2.0 * float(np.linalg.norm(skeleton.xy[n] - skeleton.xy[k]))


def pckh(pred: PoseSkeleton, truth: PoseSkeleton, alpha=0.5, head=None) -> float:
    """Fraction of truth-visible joints predicted within ``alpha * head``.

    ``head`` defaults to twice the nose-neck distance of ``truth``. Joints
    the prediction marks occluded count as misses.
    """
    if pred.frame != truth.frame:
        raise ValueError("pred and truth must share a frame")
    if head is None:
        head = head_size(truth)
    if head <= 0:
        raise DegenerateSkeletonError("head size is zero")
    ref = truth.visible
    dist = np.linalg.norm(pred.xy - truth.xy, axis=1)
    hit = pred.visible & (dist <= alpha * head)
    return float(hit[ref].sum() / ref.sum())


BackboneFn = Callable[[list, list], float]
_BACKBONES: dict[str, tuple[str, BackboneFn]] = {}


def register_backbone(metric: str, backbone_id: str, fn: BackboneFn):
    """Register ``fn(generated_images, real_images) -> score`` for is/ds/lpips."""
    if metric not in ("is", "ds", "lpips"):
        raise ValueError(f"unknown backbone metric {metric!r}")
    _BACKBONES[metric] = (backbone_id, fn)


def unregister_backbone(metric: str):
    _BACKBONES.pop(metric, None)


@dataclass
class MetricReport:
    ssim: float
    pckh: float | None
    sample_count: int
    is_score: float | None = None
    ds: float | None = None
    lpips: float | None = None
    backbones: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["is"] = d.pop("is_score")
        return d


def batch_evaluate(pairs, keypoint_pairs, alpha=0.5) -> MetricReport:
    """Average SSIM over (generated, real) image pairs and PCKh over
    (pred, truth) skeleton pairs; backbone scores when registered.

    ``keypoint_pairs`` may be empty (PCKh is then ``None``).
    """
    pairs, keypoint_pairs = list(pairs), list(keypoint_pairs)
    if not pairs:
        raise ValueError("batch_evaluate needs at least one pair")
    s = float(np.mean([ssim(a, b) for a, b in pairs]))
    p = float(np.mean([pckh(pr, tr, alpha) for pr, tr in keypoint_pairs])) if keypoint_pairs else None
    report = MetricReport(ssim=s, pckh=p, sample_count=len(pairs))
    gen = [a for a, _ in pairs]
    real = [b for _, b in pairs]
    for metric, attr in (("is", "is_score"), ("ds", "ds"), ("lpips", "lpips")):
        if metric in _BACKBONES:
            backbone_id, fn = _BACKBONES[metric]
            setattr(report, attr, float(fn(gen, real)))
            report.backbones[metric] = backbone_id
    return report
