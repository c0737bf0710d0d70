"""Scene records, dataset manifests and procedural stick-figure data.

The procedural generators stand in for multi-person photo collections: each
scene places context figures at random and puts a held-out target figure
according to a named spatial rule, so a trained model can be checked
against the rule itself.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import pose_codec
from .pose_codec import JOINT_INDEX, LIMBS, NUM_JOINTS, PoseSkeleton
from .rng import numpy_rng

SCENE_FRAME = (256, 256)
RULES = ("right_of", "between", "scaled_row")
KINDS = ("scene_multi_person", "pair_source_target")

# Standing figure in body-height units: x to the figure's left-right axis,
# y from the top of the head (0) to the ankles (~0.96).
_TEMPLATE = np.array([
    [0.0, 0.10], [0.0, 0.20],
    [-0.12, 0.21], [-0.16, 0.38], [-0.18, 0.53],
    [0.12, 0.21], [0.16, 0.38], [0.18, 0.53],
    [-0.07, 0.52], [-0.08, 0.74], [-0.08, 0.96],
    [0.07, 0.52], [0.08, 0.74], [0.08, 0.96],
    [-0.025, 0.085], [0.025, 0.085], [-0.05, 0.095], [0.05, 0.095],
])
_FACE = [JOINT_INDEX[n] for n in ("nose", "r_eye", "l_eye", "r_ear", "l_ear")]
# azimuth, elevation of nose, eyes and ears on a unit head sphere
_FACE_SPHERE = np.array([[0.0, -0.15], [-0.35, 0.25], [0.35, 0.25], [-np.pi / 2, 0.1], [np.pi / 2, 0.1]])
_FACE_RADIUS = np.array([1.2, 1.0, 1.0, 1.0, 1.0])


class ManifestError(ValueError):
    pass


@dataclass(eq=False)
class SceneRecord:
    people: list
    frame: tuple
    target: PoseSkeleton | None = None
    image: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@dataclass(eq=False)
class PairRecord:
    source_image: np.ndarray
    source_pose: PoseSkeleton
    target_image: np.ndarray
    target_pose: PoseSkeleton


def face_points(yaw, roll, head_radius):
    """Projected nose/eyes/ears offsets from the head centre, plus visibility."""
    az = _FACE_SPHERE[:, 0] + yaw
    el = _FACE_SPHERE[:, 1]
    x = np.sin(az) * np.cos(el) * _FACE_RADIUS
    y = -np.sin(el) * _FACE_RADIUS
    visible = np.cos(az) > -0.2
    c, s = np.cos(roll), np.sin(roll)
    pts = np.stack([c * x - s * y, s * x + c * y], axis=1) * head_radius
    return pts, visible


def random_figure(rng, height, feet_x, feet_y, frame, facing=None):
    """A randomly articulated standing figure; feet at (feet_x, feet_y)."""
    pts = _TEMPLATE.copy()
    for shoulder, elbow, wrist in ((2, 3, 4), (5, 6, 7)):
        ang = rng.uniform(-0.6, 0.9) * (1 if shoulder == 2 else -1)
        c, s = np.cos(ang), np.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        pts[[elbow, wrist]] = (pts[[elbow, wrist]] - pts[shoulder]) @ rot.T + pts[shoulder]
        bend = rng.uniform(-0.5, 0.5)
        c, s = np.cos(bend), np.sin(bend)
        pts[wrist] = (pts[wrist] - pts[elbow]) @ np.array([[c, -s], [s, c]]).T + pts[elbow]
    spread = rng.uniform(-0.04, 0.06)
    pts[[9, 10], 0] -= spread
    pts[[12, 13], 0] += spread
    yaw = rng.uniform(-0.9, 0.9) if facing is None else facing
    roll = rng.uniform(-0.25, 0.25)
    head_c = np.array([0.0, 0.10])
    offs, vis = face_points(yaw, roll, 0.06)
    pts[_FACE] = head_c + offs
    visible = np.ones(NUM_JOINTS, bool)
    visible[_FACE] = vis
    xy = pts * height + np.array([feet_x, feet_y - 0.96 * height])
    w, h = frame
    inside = (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
    return PoseSkeleton(xy, visible & inside, frame)


def _scene_right_of(rng, frame):
    w, h = frame
    height = rng.uniform(0.35, 0.55) * h
    cx = rng.uniform(0.12, 0.45) * w
    fy = rng.uniform(0.75, 0.95) * h
    ctx = random_figure(rng, height, cx, fy, frame)
    dx = rng.uniform(0.15, 0.35) * w
    tgt = random_figure(rng, height * rng.uniform(0.9, 1.1), cx + dx, fy + rng.uniform(-0.03, 0.03) * h, frame)
    return [ctx], tgt, {"rule": "right_of", "dx": dx}


def _scene_between(rng, frame):
    w, h = frame
    height = rng.uniform(0.3, 0.45) * h
    fy = rng.uniform(0.75, 0.95) * h
    x0 = rng.uniform(0.08, 0.25) * w
    x1 = rng.uniform(0.75, 0.92) * w
    t = rng.uniform(0.3, 0.7)
    a = random_figure(rng, height, x0, fy, frame)
    b = random_figure(rng, height, x1, fy, frame)
    tgt = random_figure(rng, height, x0 + t * (x1 - x0), fy, frame)
    return [a, b], tgt, {"rule": "between", "t": t}


def _scene_scaled_row(rng, frame):
    w, h = frame
    # perspective row: figure height proportional to feet depth
    k = rng.uniform(0.45, 0.6)
    ys = np.sort(rng.uniform(0.6, 0.97, size=3)) * h
    xs = rng.permutation(np.linspace(0.18, 0.82, 3)) * w
    figs = [random_figure(rng, k * y, x, y, frame) for x, y in zip(xs, ys)]
    j = int(rng.integers(0, 3))
    tgt = figs.pop(j)
    return figs, tgt, {"rule": "scaled_row", "k": k}


_RULE_FNS = {"right_of": _scene_right_of, "between": _scene_between, "scaled_row": _scene_scaled_row}


def synth_scene_dataset(n: int, rule: str = "right_of", seed: int = 0, frame=SCENE_FRAME,
                        render: bool = False) -> list[SceneRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if rule not in _RULE_FNS:
        raise ValueError(f"unknown rule {rule!r}; choose from {RULES}")
    rng = numpy_rng(seed, f"data/scenes/{rule}")
    out = []
    for _ in range(n):
        people, target, meta = _RULE_FNS[rule](rng, frame)
        img = render_scene(people, frame, rng) if render else None
        out.append(SceneRecord(people, frame, target, img, meta))
    return out


def synth_faces(n: int, seed: int = 0, frame=(64, 64)) -> list[PoseSkeleton]:
    """Skeletons with clean faces (nose always visible), for the refiner."""
    rng = numpy_rng(seed, "data/faces")
    out = []
    for _ in range(n):
        height = rng.uniform(0.3, 0.9) * frame[1]
        fx = rng.uniform(0.3, 0.7) * frame[0]
        s = random_figure(rng, height, fx, 0.97 * frame[1], frame)
        if s.visible[0]:
            out.append(s)
    return out


def _palette(rng):
    return {
        "skin": tuple(int(v) for v in rng.integers(120, 256, 3)),
        "top": tuple(int(v) for v in rng.integers(0, 256, 3)),
        "bottom": tuple(int(v) for v in rng.integers(0, 256, 3)),
        "bg": tuple(int(v) for v in rng.integers(180, 256, 3)),
    }


def draw_figure(draw: ImageDraw.ImageDraw, skel: PoseSkeleton, colors, width):
    xy, vis = skel.xy, skel.visible
    for a, b in LIMBS:
        if not (vis[a] and vis[b]):
            continue
        if a in (8, 9, 11, 12) or b in (9, 10, 12, 13):
            col = colors["bottom"]
        elif a == 0 or b == 0 or a >= 14 or b >= 14:
            col = colors["skin"]
        else:
            col = colors["top"]
        draw.line([tuple(xy[a]), tuple(xy[b])], fill=col, width=max(1, int(width)))
    if vis[0]:
        r = max(1.0, width * 1.2)
        x, y = xy[0]
        draw.ellipse([x - r, y - r, x + r, y + r], fill=colors["skin"])


def render_scene(people, frame, rng) -> np.ndarray:
    img = Image.new("RGB", tuple(frame), _palette(rng)["bg"])
    d = ImageDraw.Draw(img)
    for p in people:
        height = np.ptp(p.xy[p.visible, 1]) if p.num_visible > 1 else 10.0
        draw_figure(d, p, _palette(rng), max(2, height / 25))
    return np.asarray(img)


def render_person(skel: PoseSkeleton, colors) -> np.ndarray:
    img = Image.new("RGB", tuple(skel.frame), colors["bg"])
    draw_figure(ImageDraw.Draw(img), skel, colors, max(2, skel.frame[1] / 20))
    return np.asarray(img)


def synth_pair_dataset(n: int, seed: int = 0, size: int = 256) -> list[PairRecord]:
    """Same-appearance source/target renders of one figure in two poses."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = numpy_rng(seed, "data/pairs")
    frame = (size, size)
    out = []
    for _ in range(n):
        colors = _palette(rng)
        poses = []
        for _ in range(2):
            height = rng.uniform(0.75, 0.9) * size
            poses.append(random_figure(rng, height, rng.uniform(0.4, 0.6) * size, 0.95 * size, frame))
        out.append(PairRecord(render_person(poses[0], colors), poses[0],
                              render_person(poses[1], colors), poses[1]))
    return out


def image_to_tensor(img: np.ndarray):
    """uint8 HxWx3 -> float32 [3, H, W] in [-1, 1]."""
    import torch

    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def tensor_to_image(t) -> np.ndarray:
    arr = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
    arr = np.clip((arr.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, img: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


# -- manifests -------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    split: str
    kind: str
    entries: list

    def scene_records(self) -> list[SceneRecord]:
        if self.kind != "scene_multi_person":
            raise ManifestError(f"manifest kind is {self.kind}, not scene_multi_person")
        out = []
        for e in self.entries:
            frame, people, doc = pose_codec.load_keypoint_json(self.root / e["keypoints"])
            target = None
            if doc.get("target") is not None:
                target = PoseSkeleton.from_joints(doc["target"]["joints"], frame)
            out.append(SceneRecord(people, frame, target, None, doc.get("meta", {})))
        return out

    def pair_records(self) -> list[PairRecord]:
        if self.kind != "pair_source_target":
            raise ManifestError(f"manifest kind is {self.kind}, not pair_source_target")
        out = []
        for e in self.entries:
            _, src, _ = pose_codec.load_keypoint_json(self.root / e["source_keypoints"])
            _, tgt, _ = pose_codec.load_keypoint_json(self.root / e["target_keypoints"])
            out.append(PairRecord(read_image(self.root / e["source_image"]), src[0],
                                  read_image(self.root / e["target_image"]), tgt[0]))
        return out

    def skeletons(self) -> list[PoseSkeleton]:
        out = []
        keys = ("keypoints", "source_keypoints", "target_keypoints")
        for e in self.entries:
            for k in keys:
                if k in e:
                    _, people, doc = pose_codec.load_keypoint_json(self.root / e[k])
                    out.extend(people)
                    if doc.get("target") is not None:
                        out.append(PoseSkeleton.from_joints(doc["target"]["joints"], people[0].frame))
        return out


_ENTRY_FILES = {
    "scene_multi_person": ("image", "keypoints"),
    "pair_source_target": ("source_image", "source_keypoints", "target_image", "target_keypoints"),
}


def load_manifest(path) -> DatasetManifest:
    """Validate ``manifest.json`` (or a directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed JSON ({e})") from e
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ManifestError(f"{path}: kind must be one of {KINDS}, got {kind!r}")
    split = doc.get("split", "train")
    if split not in ("train", "test"):
        raise ManifestError(f"{path}: split must be train or test")
    entries = doc.get("entries")
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    root = path.parent
    missing = []
    for i, e in enumerate(entries):
        for key in _ENTRY_FILES[kind]:
            if key not in e:
                raise ManifestError(f"{path}: entry {i} lacks {key!r}")
            if not (root / e[key]).is_file():
                missing.append(e[key])
    if missing:
        raise ManifestError(f"{path}: missing files: {', '.join(missing)}")
    return DatasetManifest(root, split, kind, entries)


def write_scene_dataset(out_dir, records: list[SceneRecord], split="train") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        img_name, kp_name = f"scene_{i:05d}.png", f"scene_{i:05d}.json"
        if rec.image is not None:
            write_image(out_dir / img_name, rec.image)
        extra = {"meta": _jsonable(rec.meta)}
        if rec.target is not None:
            extra["target"] = {"joints": rec.target.to_joints()}
        pose_codec.save_keypoint_json(out_dir / kp_name, rec.people, rec.frame, **extra)
        entries.append({"image": img_name, "keypoints": kp_name})
    manifest = {"kind": "scene_multi_person", "split": split, "entries": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir / "manifest.json"


def write_pair_dataset(out_dir, records: list[PairRecord], split="train") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        e = {}
        for side, img, pose in (("source", rec.source_image, rec.source_pose),
                                ("target", rec.target_image, rec.target_pose)):
            stem = f"pair_{i:05d}_{side}"
            write_image(out_dir / f"{stem}.png", img)
            pose_codec.save_keypoint_json(out_dir / f"{stem}.json", [pose])
            e[f"{side}_image"] = f"{stem}.png"
            e[f"{side}_keypoints"] = f"{stem}.json"
        entries.append(e)
    manifest = {"kind": "pair_source_target", "split": split, "entries": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir / "manifest.json"


def _jsonable(d):
    return {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v) for k, v in d.items()}
