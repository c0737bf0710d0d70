"""Keypoint sets <-> heatmap tensors.

Coordinates follow the image convention: origin top-left, x to the right,
y downwards. Integer coordinates sit on pixel centres, so a keypoint at
(10, 10) in a 64x64 frame lands exactly on grid cell (row 10, col 10) of a
64x64 heatmap.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

JOINT_NAMES = (
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
)
NUM_JOINTS = len(JOINT_NAMES)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# limb pairs used for drawing stick figures
LIMBS = (
    (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

BINARY_ONEHOT = "binary_onehot"
BINARY_MANYHOT = "binary_manyhot"
GAUSSIAN = "gaussian"
MODES = (BINARY_ONEHOT, BINARY_MANYHOT, GAUSSIAN)

DEFAULT_SIGMA = 1.5
CONTEXT_SIZE = (64, 64)


class Keypoint(NamedTuple):
    name: str
    x: float
    y: float
    visible: bool


@dataclass(eq=False)
class PoseSkeleton:
    """18 keypoints with visibility flags inside a ``frame = (width, height)``.

    ``xy`` is a float64 ``(18, 2)`` array of (x, y); entries of occluded
    joints are kept at zero. ``meta`` carries free-form annotations (for
    example a flag set when a decoder produced no visible joint) and does not
    take part in equality.
    """

    xy: np.ndarray
    visible: np.ndarray
    frame: tuple[int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(NUM_JOINTS, 2).copy()
        self.visible = np.asarray(self.visible, dtype=bool).reshape(NUM_JOINTS).copy()
        self.xy[~self.visible] = 0.0
        self.frame = (int(self.frame[0]), int(self.frame[1]))
        if self.frame[0] <= 0 or self.frame[1] <= 0:
            raise ValueError(f"frame must be positive, got {self.frame}")

    @classmethod
    def empty(cls, frame):
        return cls(np.zeros((NUM_JOINTS, 2)), np.zeros(NUM_JOINTS, bool), frame)

    @classmethod
    def from_keypoints(cls, keypoints: Iterable[Keypoint], frame) -> "PoseSkeleton":
        keypoints = list(keypoints)
        names = [k.name for k in keypoints]
        if sorted(names) != sorted(JOINT_NAMES):
            raise ValueError("a skeleton needs exactly one keypoint per joint name")
        xy = np.zeros((NUM_JOINTS, 2))
        vis = np.zeros(NUM_JOINTS, bool)
        for k in keypoints:
            i = JOINT_INDEX[k.name]
            xy[i] = (k.x, k.y)
            vis[i] = k.visible
        return cls(xy, vis, frame)

    @classmethod
    def from_joints(cls, joints: dict, frame) -> "PoseSkeleton":
        """Build from the ``{"nose": [x, y] | None, ...}`` JSON mapping."""
        unknown = set(joints) - set(JOINT_NAMES)
        if unknown:
            raise ValueError(f"unknown joint names: {sorted(unknown)}")
        xy = np.zeros((NUM_JOINTS, 2))
        vis = np.zeros(NUM_JOINTS, bool)
        for name, value in joints.items():
            if value is None:
                continue
            xy[JOINT_INDEX[name]] = value
            vis[JOINT_INDEX[name]] = True
        return cls(xy, vis, frame)

    def to_joints(self) -> dict:
        return {
            name: ([float(self.xy[i, 0]), float(self.xy[i, 1])] if self.visible[i] else None)
            for i, name in enumerate(JOINT_NAMES)
        }

    @property
    def keypoints(self) -> list[Keypoint]:
        return [
            Keypoint(name, float(self.xy[i, 0]), float(self.xy[i, 1]), bool(self.visible[i]))
            for i, name in enumerate(JOINT_NAMES)
        ]

    def __getitem__(self, name: str) -> Keypoint:
        i = JOINT_INDEX[name]
        return Keypoint(name, float(self.xy[i, 0]), float(self.xy[i, 1]), bool(self.visible[i]))

    def __eq__(self, other):
        if not isinstance(other, PoseSkeleton):
            return NotImplemented
        return (
            self.frame == other.frame
            and np.array_equal(self.visible, other.visible)
            and np.array_equal(self.xy, other.xy)
        )

    def __repr__(self):
        return f"PoseSkeleton(frame={self.frame}, visible={int(self.visible.sum())}/18)"

    @property
    def num_visible(self) -> int:
        return int(self.visible.sum())

    def copy(self) -> "PoseSkeleton":
        return PoseSkeleton(self.xy, self.visible, self.frame, dict(self.meta))

    def validate(self):
        w, h = self.frame
        v = self.xy[self.visible]
        if np.any(v[:, 0] < 0) or np.any(v[:, 0] >= w) or np.any(v[:, 1] < 0) or np.any(v[:, 1] >= h):
            raise ValueError(f"visible keypoint outside frame {self.frame}")
        return self

    def rescale(self, frame) -> "PoseSkeleton":
        """Map coordinates linearly into another frame of the same scene."""
        sx = frame[0] / self.frame[0]
        sy = frame[1] / self.frame[1]
        return PoseSkeleton(self.xy * (sx, sy), self.visible, frame, dict(self.meta))

    def permuted(self, i: int, j: int) -> "PoseSkeleton":
        order = np.arange(NUM_JOINTS)
        order[[i, j]] = order[[j, i]]
        return PoseSkeleton(self.xy[order], self.visible[order], self.frame)


def _check_size(out_size):
    h, w = int(out_size[0]), int(out_size[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"out_size must be positive, got {out_size}")
    return h, w


def _round_half_down(v):
    return np.ceil(v - 0.5)


def grid_cells(skeleton: PoseSkeleton, out_size) -> np.ndarray:
    """Integer (col, row) heatmap cell of every joint, clipped to the grid."""
    h, w = _check_size(out_size)
    fw, fh = skeleton.frame
    cols = _round_half_down(skeleton.xy[:, 0] * (w / fw))
    rows = _round_half_down(skeleton.xy[:, 1] * (h / fh))
    cols = np.clip(cols, 0, w - 1).astype(np.int64)
    rows = np.clip(rows, 0, h - 1).astype(np.int64)
    return np.stack([cols, rows], axis=1)


@dataclass(eq=False)
class ContextHeatmap:
    tensor: np.ndarray
    mode: str
    sigma: float | None = None

    @property
    def shape(self):
        return self.tensor.shape


def encode_skeleton(skeleton: PoseSkeleton, out_size=CONTEXT_SIZE, mode=GAUSSIAN,
                    sigma=DEFAULT_SIGMA) -> ContextHeatmap:
    """Render one skeleton as an ``[18, H, W]`` heatmap.

    Gaussian mode places ``exp(-d^2 / 2 sigma^2)`` around the joint's grid
    cell, truncated to zero beyond ``3 sigma``; the peak value is exactly 1.
    """
    h, w = _check_size(out_size)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == GAUSSIAN and not sigma > 0:
        raise ValueError("sigma must be positive in gaussian mode")
    out = np.zeros((NUM_JOINTS, h, w), dtype=np.float32)
    cells = grid_cells(skeleton, (h, w))
    joints = np.flatnonzero(skeleton.visible)
    if mode != GAUSSIAN:
        out[joints, cells[joints, 1], cells[joints, 0]] = 1.0
        return ContextHeatmap(out, mode)

    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    cutoff = (3.0 * sigma) ** 2
    for j in joints:
        cx, cy = cells[j]
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > cutoff] = 0.0
        out[j] = g
    return ContextHeatmap(out, mode, float(sigma))


def encode_scene_context(skeletons: Sequence[PoseSkeleton], out_size=CONTEXT_SIZE,
                         sigma=DEFAULT_SIGMA) -> ContextHeatmap:
    """Many-hot Gaussian context: element-wise max over per-person heatmaps."""
    skeletons = list(skeletons)
    if not skeletons:
        raise ValueError("encode_scene_context needs at least one skeleton")
    frame = skeletons[0].frame
    if any(s.frame != frame for s in skeletons):
        raise ValueError("all skeletons of a scene must share a frame")
    out = encode_skeleton(skeletons[0], out_size, GAUSSIAN, sigma).tensor
    for s in skeletons[1:]:
        np.maximum(out, encode_skeleton(s, out_size, GAUSSIAN, sigma).tensor, out=out)
    return ContextHeatmap(out, GAUSSIAN, float(sigma))


def decode_heatmap(heatmap, threshold: float = 0.2, frame=None) -> PoseSkeleton:
    """Arg-max decoding with an occlusion threshold.

    A joint is visible iff its channel maximum is ``>= threshold``. Ties go to
    the first cell in row-major order. ``frame`` defaults to the heatmap grid.
    """
    t = heatmap.tensor if isinstance(heatmap, ContextHeatmap) else heatmap
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != NUM_JOINTS:
        raise ValueError(f"expected an [18, H, W] heatmap, got {t.shape}")
    _, h, w = t.shape
    if frame is None:
        frame = (w, h)
    flat = t.reshape(NUM_JOINTS, -1)
    idx = np.argmax(flat, axis=1)
    peak = flat[np.arange(NUM_JOINTS), idx]
    visible = peak >= threshold
    rows, cols = np.divmod(idx, w)
    xy = np.stack([cols * (frame[0] / w), rows * (frame[1] / h)], axis=1).astype(np.float64)
    return PoseSkeleton(xy, visible, frame)


def load_keypoint_json(path) -> tuple[tuple[int, int], list[PoseSkeleton], dict]:
    """Read ``{"frame": [W, H], "people": [{"joints": {...}}]}``.

    Returns (frame, people, raw document); extra top-level keys such as a
    held-out ``"target"`` stay available in the raw document.
    """
    doc = json.loads(Path(path).read_text())
    try:
        frame = (int(doc["frame"][0]), int(doc["frame"][1]))
        people = [PoseSkeleton.from_joints(p["joints"], frame) for p in doc["people"]]
    except (KeyError, TypeError, IndexError) as e:
        raise ValueError(f"{path}: malformed keypoint JSON ({e})") from e
    return frame, people, doc


def skeleton_doc(people: Sequence[PoseSkeleton], frame=None, **extra) -> dict:
    if frame is None:
        frame = people[0].frame
    doc = {"frame": [int(frame[0]), int(frame[1])],
           "people": [{"joints": p.to_joints()} for p in people]}
    doc.update(extra)
    return doc


def save_keypoint_json(path, people: Sequence[PoseSkeleton], frame=None, **extra):
    Path(path).write_text(json.dumps(skeleton_doc(people, frame, **extra), indent=1))
