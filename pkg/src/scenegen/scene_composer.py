"""Scene <-> person-canvas geometry and the end-to-end generation pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import context_wgan, pose_codec, pose_transfer, refine_net
from .data import tensor_to_image
from .pose_codec import PoseSkeleton

DEFAULT_MARGIN = 0.2


class InsufficientPoseError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: int, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PlacementBox:
    x: float
    y: float
    w: float
    h: float
    scale: float = 1.0  # canvas -> scene factor

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class CanvasMap:
    """Uniform scale + symmetric padding between a scene box and a square canvas."""

    box: PlacementBox
    canvas: int
    scale: float  # scene -> canvas
    pad_x: float
    pad_y: float

    @classmethod
    def for_box(cls, box: PlacementBox, canvas: int) -> "CanvasMap":
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"degenerate placement box {box}")
        s = canvas / max(box.w, box.h)
        return cls(box, canvas, s, (canvas - box.w * s) / 2.0, (canvas - box.h * s) / 2.0)

    def to_canvas(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - (self.box.x, self.box.y)) * self.scale + (self.pad_x, self.pad_y)

    def to_scene(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - (self.pad_x, self.pad_y)) / self.scale + (self.box.x, self.box.y)


def derive_box(skeleton: PoseSkeleton, margin: float = DEFAULT_MARGIN) -> PlacementBox:
    """Tight box around visible joints, grown by ``margin`` of its size per side
    and clipped to the frame."""
    if skeleton.num_visible < 2:
        raise InsufficientPoseError("need at least two visible keypoints to place a person")
    pts = skeleton.xy[skeleton.visible]
    x0, y0 = pts.min(0)
    x1, y1 = pts.max(0)
    # keep a 1 px extent for collinear keypoints
    if x1 - x0 < 1.0:
        cx = (x0 + x1) / 2.0
        x0, x1 = cx - 0.5, cx + 0.5
    if y1 - y0 < 1.0:
        cy = (y0 + y1) / 2.0
        y0, y1 = cy - 0.5, cy + 0.5
    w, h = x1 - x0, y1 - y0
    x0, x1 = x0 - margin * w, x1 + margin * w
    y0, y1 = y0 - margin * h, y1 + margin * h
    fw, fh = skeleton.frame
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, float(fw)), min(y1, float(fh))
    if x1 <= x0 or y1 <= y0:
        raise InsufficientPoseError("placement box lies outside the scene")
    return PlacementBox(x0, y0, x1 - x0, y1 - y0)


def skeleton_to_canvas(skeleton: PoseSkeleton, box: PlacementBox, canvas: int = 256):
    """Returns (canvas-frame skeleton, CanvasMap). The box gains its ``scale``."""
    cmap = CanvasMap.for_box(box, canvas)
    box = PlacementBox(box.x, box.y, box.w, box.h, 1.0 / cmap.scale)
    cmap = CanvasMap(box, canvas, cmap.scale, cmap.pad_x, cmap.pad_y)
    xy = np.clip(cmap.to_canvas(skeleton.xy), 0.0, np.nextafter(canvas, 0))
    out = PoseSkeleton(xy, skeleton.visible, (canvas, canvas), dict(skeleton.meta))
    return out, cmap


def canvas_to_scene(skeleton: PoseSkeleton, cmap: CanvasMap, frame) -> PoseSkeleton:
    return PoseSkeleton(cmap.to_scene(skeleton.xy), skeleton.visible, frame)


def _pixel_rect(box: PlacementBox):
    x0, y0 = int(round(box.x)), int(round(box.y))
    x1, y1 = int(round(box.x + box.w)), int(round(box.y + box.h))
    return x0, y0, x1, y1


def composite(scene_img: np.ndarray, person_img, box: PlacementBox) -> np.ndarray:
    """Paste the box-covering part of the canvas into the scene.

    The canvas padding is cropped away, the remainder is resized
    bilinearly to the box's pixel rectangle and pasted; parts beyond the
    scene border are dropped. Pixels outside the rectangle are untouched.
    """
    scene = np.asarray(scene_img, dtype=np.uint8)
    if hasattr(person_img, "detach"):
        person_img = tensor_to_image(person_img)
    person = np.asarray(person_img, dtype=np.uint8)
    canvas = person.shape[0]
    cmap = CanvasMap.for_box(box, canvas)
    x0, y0, x1, y1 = _pixel_rect(box)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate placement box {box}")
    H, W = scene.shape[:2]
    ix0, iy0, ix1, iy1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
    if ix1 <= ix0 or iy1 <= iy0:
        raise ValueError(f"placement box {box} lies outside the {W}x{H} scene")
    crop = (cmap.pad_x, cmap.pad_y, canvas - cmap.pad_x, canvas - cmap.pad_y)
    patch = Image.fromarray(person).resize((x1 - x0, y1 - y0), Image.BILINEAR, box=crop)
    patch = np.asarray(patch)
    out = scene.copy()
    out[iy0:iy1, ix0:ix1] = patch[iy0 - y0:iy1 - y0, ix0 - x0:ix1 - x0]
    return out


@dataclass(eq=False)
class GenerationResult:
    stage1_heatmap: np.ndarray
    stage1_skeleton: PoseSkeleton  # 64x64 context frame
    refined_skeleton: PoseSkeleton  # 64x64 context frame
    scene_skeleton: PoseSkeleton
    box: PlacementBox
    canvas_map: CanvasMap
    canvas_skeleton: PoseSkeleton
    person_image: np.ndarray  # uint8 canvas render
    scene_image: np.ndarray
    info: dict = field(default_factory=dict)


def _box_overlap(a: PlacementBox, b: PlacementBox) -> float:
    w = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    h = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    return max(w, 0.0) * max(h, 0.0)


def generate_scene(person_ref_img, person_ref_pose: PoseSkeleton, scene_record, stage1, stage2,
                   stage3, seed: int, margin: float = DEFAULT_MARGIN) -> GenerationResult:
    """Sample a placement and pose, refine the face, render and paste.

    ``scene_record`` needs ``people``, ``frame`` and ``image``. The reference
    pose must be given in the reference image's frame.
    """
    frame = tuple(scene_record.frame)
    heat = context_wgan.sample_heatmap(stage1, scene_record.people, seed)
    crude = pose_codec.decode_heatmap(heat, 0.2, pose_codec.CONTEXT_SIZE)
    if crude.num_visible < 2:
        raise PipelineError(1, f"sampled skeleton has {crude.num_visible} visible keypoints")
    refined = refine_net.refine_skeleton(stage2, crude) if stage2 is not None else crude.copy()
    scene_skel = refined.rescale(frame)
    try:
        box = derive_box(scene_skel, margin)
    except InsufficientPoseError as e:
        raise PipelineError(1, str(e)) from e
    canvas = stage3.size
    canvas_skel, cmap = skeleton_to_canvas(scene_skel, box, canvas)
    box = cmap.box

    ref = np.asarray(person_ref_img, dtype=np.uint8)
    ref_pose = person_ref_pose
    if ref.shape[0] != canvas or ref.shape[1] != canvas:
        ref = np.asarray(Image.fromarray(ref).resize((canvas, canvas), Image.BILINEAR))
        ref_pose = person_ref_pose.rescale((canvas, canvas))
    person = pose_transfer.transfer(stage3, ref, ref_pose, canvas_skel)
    person_u8 = tensor_to_image(person)

    scene_img = scene_record.image
    if scene_img is None:
        scene_img = np.full((frame[1], frame[0], 3), 255, np.uint8)
    out = composite(scene_img, person_u8, box)

    overlap = 0.0
    for p in scene_record.people:
        if p.num_visible >= 2:
            overlap += _box_overlap(box, derive_box(p, 0.0))
    info = {
        "seed": int(seed),
        "stage1_visible": crude.num_visible,
        "refined": stage2 is not None and bool(crude.visible[0]),
        "box": [box.x, box.y, box.w, box.h],
        "box_scale": box.scale,
        "overlap_area": overlap,
    }
    return GenerationResult(heat, crude, refined, scene_skel, box, cmap, canvas_skel,
                            person_u8, out, info)
