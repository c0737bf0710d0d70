import math

import numpy as np
import pytest
import torch
from torch import nn

from scenegen import data, pose_transfer as pt

TINY = dict(pt.TINY_ARCH)


@pytest.fixture(scope="module")
def tiny():
    p = pt.StageThreeParams.create(tiny=True, seed=0)
    p.generator.eval()
    p.discriminator.eval()
    return p


def rand_inputs(b=2, size=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(b, 3, size, size, generator=g) * 2 - 1
    poses = torch.rand(b, 36, size, size, generator=g)
    return img, poses


def test_full_arch_shape_ladder():
    torch.manual_seed(0)
    g = pt.PoseTransferGenerator(**pt.FULL_ARCH).eval()
    img, poses = rand_inputs(1, 256)
    with torch.no_grad():
        out, inter = g(img, poses, return_intermediates=True)
    assert out.shape == (1, 3, 256, 256)
    assert out.abs().max() <= 1.0
    for l, f in enumerate(inter["image"], start=1):
        assert f.shape[1:] == (64 * 2 ** l, 256 // 2 ** l, 256 // 2 ** l)
    assert len(inter["pose"]) == 4


def test_tiny_forward_bounds(tiny):
    img, poses = rand_inputs()
    with torch.no_grad():
        out, inter = pt.gr_forward(tiny, img, poses, return_intermediates=True)
    assert out.shape == (2, 3, 64, 64)
    assert out.abs().max() <= 1.0
    for i, h, gated in zip(inter["image"], inter["pose"], inter["gated"]):
        assert torch.all(gated.abs() <= i.abs())
        torch.testing.assert_close(gated, i * torch.sigmoid(h), rtol=0, atol=0)


def test_unbatched_forward(tiny):
    img, poses = rand_inputs(1)
    with torch.no_grad():
        out = pt.gr_forward(tiny, img[0], poses[0])
    assert out.shape == (3, 64, 64)


def test_shape_mismatch_raises(tiny):
    img, poses = rand_inputs()
    with pytest.raises(ValueError):
        pt.gr_forward(tiny, img, poses[:, :18])
    with pytest.raises(ValueError):
        pt.gr_forward(tiny, img[:, :, :32, :32], poses)
    with pytest.raises(ValueError):
        pt.dr_forward(tiny, img, img[:, :, :32])


def test_zero_pose_branch_halves_skips(tiny, monkeypatch):
    g = tiny.generator
    img, poses = rand_inputs()
    with torch.no_grad():
        img_feats = g.image_branch(img)
    zero = [torch.zeros_like(f) for f in img_feats]
    monkeypatch.setattr(g.pose_branch, "forward", lambda x: zero)
    with torch.no_grad():
        out, inter = g(img, poses, return_intermediates=True)
        for gated, f in zip(inter["gated"], img_feats):
            torch.testing.assert_close(gated, 0.5 * f, rtol=0, atol=0)
        # manual decode from halved features, following the skip-sum rule
        x = g.decoder[1](0.5 * img_feats[1])
        x = g.decoder[0](x + 0.5 * img_feats[0])
        manual = torch.tanh(g.to_rgb(g.tail(x)))
    torch.testing.assert_close(out, manual, rtol=0, atol=0)


def test_patch_discriminator_shape_and_range():
    torch.manual_seed(0)
    d = pt.PatchDiscriminator().eval()
    a, _ = rand_inputs(1, 256)
    b, _ = rand_inputs(1, 256, seed=1)
    with torch.no_grad():
        m = d(a, b)
        swapped = d(b, a)
    assert m.shape == (1, 1, 30, 30)
    assert torch.all((m > 0) & (m < 1))
    assert not torch.equal(m, swapped)


def _receptive_field(layers):
    r = 1
    for k, s in reversed(layers):
        r = (r - 1) * s + k
    return r


def test_patch_receptive_field_is_70():
    d = pt.PatchDiscriminator(base=8).eval()
    convs = [(m.kernel_size[0], m.stride[0]) for m in d.net if isinstance(m, nn.Conv2d)]
    assert _receptive_field(convs) == 70
    # empirical support of one output patch
    x = torch.zeros(1, 3, 256, 256, requires_grad=True)
    y = torch.zeros(1, 3, 256, 256)
    with torch.no_grad():
        for m in d.net:
            if isinstance(m, nn.Conv2d):
                m.weight.fill_(0.01)
    out = d.net(torch.cat([x, y], 1))
    out[0, 0, 15, 15].backward()
    rows = torch.nonzero(x.grad[0].abs().sum((0, 2)))
    cols = torch.nonzero(x.grad[0].abs().sum((0, 1)))
    assert int(rows.max() - rows.min() + 1) == 70
    assert int(cols.max() - cols.min() + 1) == 70


class ToyExtractor(nn.Module):
    """Two 'layers' of fixed, hand-chosen features."""

    depth = 2

    def forward(self, x, layers):
        f1 = x[:, :1, :2, :2]  # 1x2x2 crop
        f2 = torch.cat([x[:, :1, :2, :2] * 2, x[:, 1:2, :2, :2]], 1)  # 2x2x2
        feats = {1: f1, 2: f2}
        return [feats[l] for l in layers]


def test_perceptual_loss_hand_computed():
    gen = torch.zeros(1, 3, 4, 4)
    real = torch.zeros(1, 3, 4, 4)
    gen[0, 0, :2, :2] = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    real[0, 1, :2, :2] = torch.tensor([[1.0, 1.0], [1.0, 1.0]])
    # layer 1: |[1,2,3,4] - 0| summed = 10 over volume 4 -> 2.5
    # layer 2: channel 0 |2,4,6,8| = 20, channel 1 |0-1| * 4 = 4 -> 24 / 8 = 3.0
    loss = pt.perceptual_loss(ToyExtractor(), gen, real, layers=(1, 2))
    assert float(loss) == pytest.approx(5.5, abs=1e-12)
    with pytest.raises(ValueError):
        pt.perceptual_loss(ToyExtractor(), gen, real, layers=(1, 3))


def test_perceptual_loss_identity_and_sign():
    f = pt.VGGFeatures(9, seed=0, width=0.25)
    a, _ = rand_inputs(1)
    b, _ = rand_inputs(1, seed=1)
    assert float(pt.perceptual_loss(f, a, a)) == 0.0
    assert float(pt.perceptual_loss(f, a, b)) > 0.0
    with pytest.raises(ValueError):
        pt.perceptual_loss(f, a, b, layers=(4, 10))


def test_vgg_layer_indices_count_convs():
    f = pt.VGGFeatures(9, seed=0, width=0.25)
    x, _ = rand_inputs(1)
    f4, f9 = f(x, (4, 9))
    assert f4.shape[1:] == (32, 32, 32)  # conv2_2 at half resolution
    assert f9.shape[1:] == (128, 8, 8)  # conv4_1 at 1/8 resolution
    assert f4.min() >= 0 and f9.min() >= 0


def test_vgg_loads_torchvision_state_dict(tmp_path):
    torch.manual_seed(0)
    src = pt.VGGFeatures(9, seed=3)
    state = {f"features.{k}": v for k, v in src.features.state_dict().items()}
    state["classifier.0.weight"] = torch.zeros(2, 2)
    torch.save(state, tmp_path / "vgg19.pth")
    loaded = pt.VGGFeatures(9, weights_path=tmp_path / "vgg19.pth")
    x, _ = rand_inputs(1)
    for a, b in zip(src(x), loaded(x)):
        torch.testing.assert_close(a, b)
    assert loaded.source.startswith("pretrained")


def test_generator_objective_fixtures():
    assert pt.generator_objective(0.2, 0.7, 0.1) == pytest.approx(2.2, abs=1e-12)
    assert pt.generator_objective(0.0, 0.4, 0.0) == pytest.approx(0.4, abs=1e-12)
    zeros = -torch.ones(1, 3, 8, 8)
    ones = torch.ones(1, 3, 8, 8)
    l1 = pt.l1_loss(zeros, ones)
    assert float(l1) == 2.0
    assert float(pt.generator_objective(l1, 0.0, 0.0)) == 10.0


def test_discriminator_objective_fixtures():
    real = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    fake = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    assert float(pt.discriminator_objective(real, fake)) == pytest.approx(-math.log(1 - 1e-7), abs=1e-9)
    half = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
    assert float(pt.discriminator_objective(half, half)) == pytest.approx(math.log(2), abs=1e-12)
    r = torch.tensor([[[[0.9, 0.6]]]], dtype=torch.float64)
    f = torch.tensor([[[[0.2, 0.3]]]], dtype=torch.float64)
    expect = 0.5 * (-(math.log(0.9) + math.log(0.6)) / 2 - (math.log(0.8) + math.log(0.7)) / 2)
    assert float(pt.discriminator_objective(r, f)) == pytest.approx(expect, abs=1e-12)


def test_gan_term_is_bce_against_ones():
    p = torch.tensor([0.25, 0.5], dtype=torch.float64)
    assert float(pt.bce(p, 1.0)) == pytest.approx(-(math.log(0.25) + math.log(0.5)) / 2, abs=1e-12)


def test_default_hyperparameters():
    c = pt.Stage3Config()
    assert (c.lr, c.betas, c.eps) == (1e-3, (0.5, 0.999), 1e-8)
    assert (pt.LAMBDA_L1, pt.LAMBDA_GAN, pt.LAMBDA_PERCEPTUAL) == (5.0, 1.0, 5.0)
    assert pt.PERCEPTUAL_LAYERS == (4, 9)


def small_pairs(n=2, seed=0):
    return data.synth_pair_dataset(n, seed=seed, size=64)


def test_training_step_reaches_every_parameter():
    p = pt.StageThreeParams.create(tiny=True, seed=1)
    feats = pt.VGGFeatures(9, seed=0, width=0.25)
    before = [t.clone() for t in feats.parameters()]
    trainer = pt.Stage3Trainer(p, feats)
    ia, pp, ib = pt.prepare_pairs(small_pairs(2), 64)
    trainer.step(ia, pp, ib)
    for net in (p.generator, p.discriminator):
        for name, t in net.named_parameters():
            assert t.grad is not None and t.grad.abs().sum() > 0, name
    for a, b in zip(before, feats.parameters()):
        assert torch.equal(a, b)
        assert b.grad is None


def test_generator_objective_finite_difference():
    torch.manual_seed(0)
    p = pt.StageThreeParams.create(tiny=True, seed=2)
    g = p.generator.double().eval()
    d = p.discriminator.double().eval()
    feats = pt.VGGFeatures(9, seed=0, width=0.25).double()
    ia, pp, ib = (t.double() for t in pt.prepare_pairs(small_pairs(1), 64))

    def objective():
        fake = g(ia, pp)
        return pt.generator_objective(pt.l1_loss(fake, ib), pt.bce(d(ia, fake), 1.0),
                                      pt.perceptual_loss(feats, fake, ib))

    w = g.to_rgb.weight
    (grad,) = torch.autograd.grad(objective(), [w])
    h = 1e-3
    for idx in [(0, 3, 0, 0), (2, 10, 0, 0)]:
        with torch.no_grad():
            w[idx] += h
            up = float(objective())
            w[idx] -= 2 * h
            down = float(objective())
            w[idx] += h
        fd = (up - down) / (2 * h)
        assert abs(fd - float(grad[idx])) / abs(fd) < 1e-2


def test_train_logs_and_errors():
    p = pt.train_stage3(small_pairs(2), pt.Stage3Config(steps=3, batch=2, tiny=True))
    assert len(p.log["generator"]) == len(p.log["discriminator"]) == 3
    with pytest.raises(ValueError):
        pt.train_stage3([], pt.Stage3Config(steps=1, tiny=True))


def test_init_distribution():
    p = pt.StageThreeParams.create(tiny=True, seed=0)
    w = torch.cat([m.weight.flatten() for m in p.generator.modules()
                   if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))])
    assert float(w.std()) == pytest.approx(0.02, rel=0.02)


def test_pose_pair_tensor_range():
    rec = small_pairs(1)[0]
    t = pt.pose_pair_tensor(rec.source_pose, rec.target_pose, 64)
    assert t.shape == (36, 64, 64)
    assert t.min() >= 0 and t.max() <= 1
