import json

import numpy as np
import pytest
import torch

from scenegen import cli, config, context_wgan as cw
from scenegen.checkpoint import save_checkpoint
from scenegen.data import read_image


def test_precedence_three_way(tmp_path):
    cfgfile = tmp_path / "run.json"
    cfgfile.write_text(json.dumps({"steps": 50, "batch": 3}))
    run = config.resolve("stage1", {"steps": 7, "batch": None}, cfgfile)
    assert run.steps == 7  # flag beats file
    assert run.batch == 3  # file beats default
    assert run.lr == 1e-4  # default survives
    sc = run.stage_config()
    assert isinstance(sc, cw.Stage1Config) and (sc.steps, sc.batch, sc.lr) == (7, 3, 1e-4)


def test_stage_defaults():
    assert config.resolve("stage2").lr == 1e-2
    assert config.resolve("stage3").lr == 1e-3
    assert config.resolve("stage3").batch == 4


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stepz": 3}))
    with pytest.raises(config.ConfigError):
        config.resolve("stage1", {}, bad)
    bad.write_text(json.dumps({"stage": "stage2"}))
    with pytest.raises(config.ConfigError):
        config.resolve("stage1", {}, bad)
    with pytest.raises(config.ConfigError):
        config.resolve("stage9")


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out
    with pytest.raises(SystemExit) as e:
        cli.main(["train-stage1", "--help"])
    assert e.value.code == 0


@pytest.mark.parametrize("argv", [["bogus"], ["train-stage1", "--nope"], []])
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    assert e.value.code == 2


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """synth-data -> train stage 1, 2, 3 (tiny) -> generate, via the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth-data", "--n", 6, "--seed", 1, "--out", d / "scenes"]) == 0
    assert run(["synth-data", "--kind", "pairs", "--size", 64, "--n", 4, "--out", d / "pairs"]) == 0
    ck = d / "ckpt"
    assert run(["train-stage1", "--data", d / "scenes", "--out", ck / "stage1.pt", "--steps", 5, "--batch", 2]) == 0
    p = cw.load_stage1(ck / "stage1.pt")
    with torch.no_grad():
        p.generator.head.bias.zero_()  # a few steps cannot learn peaks; keep every joint visible
    save_checkpoint(ck / "stage1.pt", p)
    assert run(["train-stage2", "--data", d / "scenes", "--out", ck / "stage2.pt", "--steps", 10, "--batch", 4]) == 0
    assert run(["train-stage3", "--data", d / "pairs", "--out", ck / "stage3.pt", "--steps", 2, "--batch", 2,
                "--tiny"]) == 0
    return d


def generate(d, out, seed=3):
    return run(["generate", "--scene", d / "scenes/scene_00000.png", "--scene-poses", d / "scenes/scene_00000.json",
                "--ref", d / "pairs/pair_00000_source.png", "--ref-pose", d / "pairs/pair_00000_source.json",
                "--ckpt-dir", d / "ckpt", "--seed", seed, "--out", out])


def test_toy_pipeline_generates(toy_run):
    out = toy_run / "gen"
    assert generate(toy_run, out) == 0
    for name in ("composite.png", "stage1_heatmaps.png", "skeleton_overlay.png", "canvas.png", "provenance.json"):
        assert (out / name).is_file()
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["seed"] == 3 and set(prov["checkpoints"]) == {"stage1", "stage2", "stage3"}
    assert read_image(out / "composite.png").shape == (256, 256, 3)


def test_generate_repeatable(toy_run):
    assert generate(toy_run, toy_run / "a") == 0
    assert generate(toy_run, toy_run / "b") == 0
    assert (toy_run / "a/composite.png").read_bytes() == (toy_run / "b/composite.png").read_bytes()


def test_generate_reports_stage_one_failure(toy_run, tmp_path, capsys):
    import shutil
    shutil.copytree(toy_run / "ckpt", tmp_path / "ckpt")
    p = cw.load_stage1(tmp_path / "ckpt/stage1.pt")
    with torch.no_grad():
        p.generator.head.bias.fill_(-50.0)
    save_checkpoint(tmp_path / "ckpt/stage1.pt", p)
    rc = run(["generate", "--scene", toy_run / "scenes/scene_00000.png",
              "--scene-poses", toy_run / "scenes/scene_00000.json", "--ref", toy_run / "pairs/pair_00000_source.png",
              "--ref-pose", toy_run / "pairs/pair_00000_source.json", "--ckpt-dir", tmp_path / "ckpt",
              "--out", tmp_path / "out"])
    assert rc != 0
    assert "stage 1" in capsys.readouterr().err


def test_generate_missing_checkpoint(toy_run, tmp_path, capsys):
    rc = run(["generate", "--scene", toy_run / "scenes/scene_00000.png",
              "--scene-poses", toy_run / "scenes/scene_00000.json", "--ref", toy_run / "pairs/pair_00000_source.png",
              "--ref-pose", toy_run / "pairs/pair_00000_source.json", "--ckpt-dir", tmp_path, "--out", tmp_path / "o"])
    assert rc == 1
    assert "stage1" in capsys.readouterr().err


def test_transfer_and_evaluate(toy_run, capsys):
    out = toy_run / "t/0.png"
    assert run(["transfer", "--ckpt", toy_run / "ckpt/stage3.pt", "--source", toy_run / "pairs/pair_00000_source.png",
                "--source-pose", toy_run / "pairs/pair_00000_source.json",
                "--target-pose", toy_run / "pairs/pair_00000_target.json", "--out", out]) == 0
    assert read_image(out).shape == (64, 64, 3)
    real = toy_run / "r"
    real.mkdir()
    (real / "0.png").write_bytes((toy_run / "pairs/pair_00000_target.png").read_bytes())
    capsys.readouterr()
    assert run(["evaluate", "--generated", toy_run / "t", "--real", real, "--out", toy_run / "rep.json"]) == 0
    rep = json.loads((toy_run / "rep.json").read_text())
    assert rep["sample_count"] == 1 and -1 <= rep["ssim"] <= 1 and rep["pckh"] is None


def test_wrong_stage_checkpoint_in_transfer(toy_run, capsys):
    rc = run(["transfer", "--ckpt", toy_run / "ckpt/stage2.pt", "--source", toy_run / "pairs/pair_00000_source.png",
              "--source-pose", toy_run / "pairs/pair_00000_source.json",
              "--target-pose", toy_run / "pairs/pair_00000_target.json", "--out", toy_run / "x.png"])
    assert rc == 1
    assert "stage3" in capsys.readouterr().err


def test_heatmap_grid_layout():
    heat = np.zeros((18, 4, 4))
    heat[7] = 1.0
    g = cli.heatmap_grid(heat, cols=6)
    assert g.shape == (3 * 5 - 1, 6 * 5 - 1)
    assert (g[5:9, 5:9] == 255).all()  # channel 7 -> row 1, col 1
