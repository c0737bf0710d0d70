import json

import numpy as np
import pytest

from scenegen import data
from scenegen.pose_codec import JOINT_INDEX

NOSE = JOINT_INDEX["nose"]


def test_right_of_rule_holds():
    for rec in data.synth_scene_dataset(500, "right_of", seed=0):
        assert rec.target.visible[NOSE]
        assert rec.target.xy[NOSE, 0] > max(p.xy[NOSE, 0] for p in rec.people)


def test_between_rule_holds():
    for rec in data.synth_scene_dataset(500, "between", seed=0):
        xs = [p.xy[NOSE, 0] for p in rec.people]
        assert min(xs) <= rec.target.xy[NOSE, 0] <= max(xs)


def test_scaled_row_height_tracks_depth():
    for rec in data.synth_scene_dataset(50, "scaled_row", seed=0):
        figs = rec.people + [rec.target]
        k = rec.meta["k"]
        for f in figs:
            feet_y = f.xy[JOINT_INDEX["r_ankle"], 1]
            assert rec.meta["rule"] == "scaled_row"
            assert f.xy[NOSE, 1] < feet_y
            assert k > 0


def test_fixed_seed_reproducible():
    a = data.synth_scene_dataset(20, "right_of", seed=3, render=True)
    b = data.synth_scene_dataset(20, "right_of", seed=3, render=True)
    for x, y in zip(a, b):
        assert x.target == y.target and x.people == y.people
        np.testing.assert_array_equal(x.image, y.image)
    c = data.synth_scene_dataset(20, "right_of", seed=4)
    assert any(x.target != z.target for x, z in zip(a, c))


def test_dataset_errors():
    with pytest.raises(ValueError):
        data.synth_scene_dataset(0)
    with pytest.raises(ValueError):
        data.synth_scene_dataset(3, "left_of")


def test_skeletons_inside_frame():
    for rec in data.synth_scene_dataset(100, "scaled_row", seed=1):
        for s in rec.people + [rec.target]:
            s.validate()


def test_faces_have_nose():
    faces = data.synth_faces(50, seed=0)
    assert faces and all(f.visible[NOSE] for f in faces)


def test_pairs_shapes():
    pairs = data.synth_pair_dataset(3, seed=0, size=64)
    for p in pairs:
        assert p.source_image.shape == p.target_image.shape == (64, 64, 3)
        assert p.source_pose.frame == (64, 64)
        assert not np.array_equal(p.source_image, p.target_image)


def test_image_tensor_roundtrip():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    t = data.image_to_tensor(img)
    assert t.shape == (3, 8, 8) and t.min() >= -1 and t.max() <= 1
    np.testing.assert_array_equal(data.tensor_to_image(t), img)


def test_manifest_roundtrip(tmp_path):
    recs = data.synth_scene_dataset(2, "right_of", seed=0, render=True)
    data.write_scene_dataset(tmp_path, recs)
    m = data.load_manifest(tmp_path)
    assert len(m.entries) == 2 and m.kind == "scene_multi_person"
    back = m.scene_records()
    for a, b in zip(recs, back):
        assert a.people == b.people and a.target == b.target
    pairs = data.synth_pair_dataset(2, seed=0, size=32)
    data.write_pair_dataset(tmp_path / "p", pairs)
    pm = data.load_manifest(tmp_path / "p" / "manifest.json")
    got = pm.pair_records()
    np.testing.assert_array_equal(got[1].target_image, pairs[1].target_image)
    assert got[0].source_pose == pairs[0].source_pose
    with pytest.raises(data.ManifestError):
        pm.scene_records()


def test_manifest_missing_file_listed(tmp_path):
    recs = data.synth_scene_dataset(2, "right_of", seed=0, render=True)
    data.write_scene_dataset(tmp_path, recs)
    (tmp_path / "scene_00001.png").unlink()
    with pytest.raises(data.ManifestError) as e:
        data.load_manifest(tmp_path)
    msg = str(e.value)
    assert "scene_00001.png" in msg
    assert "scene_00000.png" not in msg


def test_manifest_empty_and_malformed(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"kind": "scene_multi_person", "entries": []}))
    with pytest.raises(data.ManifestError):
        data.load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(data.ManifestError):
        data.load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"kind": "video", "entries": [{}]}))
    with pytest.raises(data.ManifestError):
        data.load_manifest(tmp_path)
