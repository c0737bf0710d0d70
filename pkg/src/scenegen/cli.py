"""``scenegen`` command line: synthetic data, per-stage training, inference, evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import config as cfg
from . import context_wgan, data, metrics, pose_codec, pose_transfer, refine_net, scene_composer
from .checkpoint import CheckpointError, checkpoint_metadata, save_checkpoint

log = logging.getLogger("scenegen")

STAGE_FILES = {"stage1": "stage1.pt", "stage2": "stage2.pt", "stage3": "stage3.pt"}


class CommandError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------

def _progress(every):
    def report(p, stats=None):
        if every and p.step % every == 0:
            if stats is None:
                stats = {k: v[-1] for k, v in (p.log or {}).items() if v}
            log.info("step %d %s", p.step, {k: round(v, 4) for k, v in stats.items()})
    return report


def heatmap_grid(heat: np.ndarray, cols=6) -> np.ndarray:
    """[18, H, W] in [0, 1] -> uint8 grayscale mosaic with 1 px separators."""
    n, h, w = heat.shape
    rows = -(-n // cols)
    grid = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1), 64, np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = np.round(
            np.clip(heat[i], 0, 1) * 255).astype(np.uint8)
    return grid


def skeleton_overlay(img: np.ndarray, skeletons, box=None) -> np.ndarray:
    im = Image.fromarray(np.asarray(img, np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(im)
    colors = {"skin": (255, 0, 0), "top": (255, 128, 0), "bottom": (255, 0, 128)}
    for s in skeletons:
        data.draw_figure(draw, s, colors, 2)
    if box is not None:
        draw.rectangle([box.x, box.y, box.x + box.w, box.y + box.h], outline=(0, 160, 255))
    return np.asarray(im)


def _load_stage_checkpoints(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    loaders = {"stage1": context_wgan.load_stage1, "stage2": refine_net.load_stage2,
               "stage3": pose_transfer.load_stage3}
    out = {}
    for stage, fname in STAGE_FILES.items():
        path = ckpt_dir / fname
        if not path.is_file():
            raise CommandError(f"{stage}: checkpoint {path} not found")
        try:
            out[stage] = loaders[stage](path)
        except CheckpointError as e:
            raise CommandError(f"{stage}: {e}") from e
    return out


# -- subcommands -------------------------------------------------------------

def cmd_synth_data(args):
    if args.kind == "scenes":
        recs = data.synth_scene_dataset(args.n, args.rule, args.seed, render=True)
        path = data.write_scene_dataset(args.out, recs, args.split)
    else:
        recs = data.synth_pair_dataset(args.n, args.seed, args.size)
        path = data.write_pair_dataset(args.out, recs, args.split)
    print(f"wrote {len(recs)} records to {path}")
    return 0


def _train(stage, args):
    run = cfg.resolve(stage, {k: getattr(args, k, None) for k in
                              ("steps", "batch", "seed", "lr", "data", "out", "noise")}
                      | ({"tiny": True} if getattr(args, "tiny", False) else {}), args.config)
    if not run.data or not run.out:
        raise CommandError(f"{stage}: --data and --out are required (flag or config file)")
    manifest = data.load_manifest(run.data)
    sc = run.stage_config()
    prog = _progress(args.log_every)
    if stage == "stage1":
        params = context_wgan.train_stage1(manifest.scene_records(), sc, progress=prog)
    elif stage == "stage2":
        params = refine_net.train_stage2(manifest.skeletons(), sc)
    else:
        params = pose_transfer.train_stage3(manifest.pair_records(), sc, progress=prog)
    Path(run.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.out, params)
    print(f"{stage}: trained {params.step} steps, checkpoint {run.out}")
    return 0


def cmd_transfer(args):
    try:
        params = pose_transfer.load_stage3(args.ckpt)
    except CheckpointError as e:
        raise CommandError(f"stage3: {e}") from e
    src = data.read_image(args.source)
    _, src_pose, _ = pose_codec.load_keypoint_json(args.source_pose)
    _, tgt_pose, _ = pose_codec.load_keypoint_json(args.target_pose)
    out = pose_transfer.transfer(params, src, src_pose[0], tgt_pose[0])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data.write_image(args.out, data.tensor_to_image(out))
    print(f"wrote {args.out}")
    return 0


def cmd_generate(args):
    stages = _load_stage_checkpoints(args.ckpt_dir)
    frame, people, _ = pose_codec.load_keypoint_json(args.scene_poses)
    scene_img = data.read_image(args.scene)
    if (scene_img.shape[1], scene_img.shape[0]) != tuple(frame):
        raise CommandError(f"scene image is {scene_img.shape[1]}x{scene_img.shape[0]}, "
                           f"keypoints declare {frame[0]}x{frame[1]}")
    ref_img = data.read_image(args.ref)
    _, ref_pose, _ = pose_codec.load_keypoint_json(args.ref_pose)
    record = data.SceneRecord(people, tuple(frame), image=scene_img)
    res = scene_composer.generate_scene(ref_img, ref_pose[0], record, stages["stage1"],
                                        stages["stage2"], stages["stage3"], args.seed, args.margin)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_image(out / "composite.png", res.scene_image)
    Image.fromarray(heatmap_grid(res.stage1_heatmap)).save(out / "stage1_heatmaps.png")
    data.write_image(out / "skeleton_overlay.png",
                     skeleton_overlay(res.scene_image, [res.scene_skeleton], res.box))
    data.write_image(out / "canvas.png", res.person_image)
    prov = {
        "seed": args.seed,
        "inputs": {"scene": str(args.scene), "scene_poses": str(args.scene_poses),
                   "ref": str(args.ref), "ref_pose": str(args.ref_pose)},
        "checkpoints": {},
        "margin": args.margin,
        "box": list(res.box.as_tuple()),
        "stage1_skeleton": res.stage1_skeleton.to_joints(),
        "refined_skeleton": res.refined_skeleton.to_joints(),
        "scene_skeleton": res.scene_skeleton.to_joints(),
        **res.info,
    }
    for stage, fname in STAGE_FILES.items():
        meta = checkpoint_metadata(Path(args.ckpt_dir) / fname)
        prov["checkpoints"][stage] = {"path": str(Path(args.ckpt_dir) / fname),
                                      "arch_hash": meta["arch_hash"], "step": meta["step"]}
    (out / "provenance.json").write_text(json.dumps(prov, indent=1))
    print(f"wrote {out / 'composite.png'}")
    return 0


def cmd_evaluate(args):
    gen_dir, real_dir = Path(args.generated), Path(args.real)
    names = sorted(p.name for p in gen_dir.glob("*.png") if (real_dir / p.name).is_file())
    if not names:
        raise CommandError(f"no matching PNG names between {gen_dir} and {real_dir}")
    pairs, kps = [], []
    for n in names:
        pairs.append((data.image_to_tensor(data.read_image(gen_dir / n)),
                      data.image_to_tensor(data.read_image(real_dir / n))))
        stem = Path(n).stem + ".json"
        if (gen_dir / stem).is_file() and (real_dir / stem).is_file():
            kps.append((pose_codec.load_keypoint_json(gen_dir / stem)[1][0],
                        pose_codec.load_keypoint_json(real_dir / stem)[1][0]))
    report = metrics.batch_evaluate(pairs, kps, args.alpha).to_dict()
    report["alpha"] = args.alpha
    report["keypoint_count"] = len(kps)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenegen", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic stick-figure dataset")
    s.add_argument("--kind", choices=("scenes", "pairs"), default="scenes")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--rule", choices=data.RULES, default="right_of")
    s.add_argument("--size", type=int, default=256, help="pair canvas size")
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    for stage, helptext in (("stage1", "context WGAN-GP"), ("stage2", "facial keypoint refiner"),
                            ("stage3", "pose transfer GAN")):
        t = sub.add_parser(f"train-{stage}", help=f"train the {helptext}")
        t.add_argument("--data", help="dataset directory or manifest.json")
        t.add_argument("--out", help="checkpoint path")
        t.add_argument("--steps", type=int)
        t.add_argument("--batch", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--lr", type=float)
        if stage == "stage2":
            t.add_argument("--noise", type=float)
        if stage == "stage3":
            t.add_argument("--tiny", action="store_true", help="64x64, two levels (CI scale)")
        t.add_argument("--config", help="JSON file of RunConfig fields")
        t.add_argument("--log-every", type=int, default=100)
        t.set_defaults(func=lambda a, st=stage: _train(st, a))

    t = sub.add_parser("transfer", help="render a person in a new pose")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--source", required=True)
    t.add_argument("--source-pose", required=True)
    t.add_argument("--target-pose", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_transfer)

    g = sub.add_parser("generate", help="insert a new person into a scene")
    g.add_argument("--scene", required=True)
    g.add_argument("--scene-poses", required=True)
    g.add_argument("--ref", required=True)
    g.add_argument("--ref-pose", required=True)
    g.add_argument("--ckpt-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--margin", type=float, default=scene_composer.DEFAULT_MARGIN)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="SSIM / PCKh between generated and real images")
    e.add_argument("--generated", required=True, help="directory of generated PNGs (+ optional keypoint JSONs)")
    e.add_argument("--real", required=True, help="directory of real PNGs with matching names")
    e.add_argument("--alpha", type=float, default=0.5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except scene_composer.PipelineError as e:
        print(f"scenegen: pipeline failure at {e}", file=sys.stderr)
        return 3
    except (CommandError, cfg.ConfigError, data.ManifestError, CheckpointError, ValueError) as e:
        print(f"scenegen: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
