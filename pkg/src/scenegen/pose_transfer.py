"""Stage 3: attention-gated dual-branch pose transfer with a patch discriminator.

The generator encodes the reference image and the stacked (source, target)
pose heatmaps in two parallel branches. At every resolution level the image
features are gated by the sigmoid of the pose features; the decoder starts
from the gated deepest level and adds each shallower gated skip to its
running output before the next up-sampling block.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import pose_codec
from .checkpoint import StageParams, load_checkpoint, read_archive
from .nn_init import init_gan_weights
from .pose_codec import NUM_JOINTS
from .rng import numpy_rng, substream_seed

log = logging.getLogger(__name__)

LAMBDA_L1 = 5.0
LAMBDA_GAN = 1.0
LAMBDA_PERCEPTUAL = 5.0
PERCEPTUAL_LAYERS = (4, 9)
BCE_EPS = 1e-7

FULL_ARCH = {"size": 256, "levels": 4, "base": 64, "tiny": False}
TINY_ARCH = {"size": 64, "levels": 2, "base": 16, "tiny": True}


class ResidualBlock(nn.Module):
    """Basic block: two 3x3 conv-BN with an identity shortcut."""

    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.BatchNorm2d(ch), nn.ReLU(True),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


def _stem(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(True))


def _enc_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(True), ResidualBlock(cout))


def _dec_block(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(True), ResidualBlock(cout))


class EncoderBranch(nn.Module):
    def __init__(self, cin, base, levels):
        super().__init__()
        self.stem = _stem(cin, base)
        self.blocks = nn.ModuleList(_enc_block(base * 2 ** l, base * 2 ** (l + 1)) for l in range(levels))

    def forward(self, x):
        feats = []
        x = self.stem(x)
        for blk in self.blocks:
            x = blk(x)
            feats.append(x)
        return feats


class PoseTransferGenerator(nn.Module):
    def __init__(self, size=256, levels=4, base=64, tiny=False):
        super().__init__()
        self.size, self.levels, self.base = size, levels, base
        self.image_branch = EncoderBranch(3, base, levels)
        self.pose_branch = EncoderBranch(2 * NUM_JOINTS, base, levels)
        # decoder[l-1] is the block that consumes level l
        self.decoder = nn.ModuleList(_dec_block(base * 2 ** l, base * 2 ** (l - 1))
                                     for l in range(1, levels + 1))
        self.tail = nn.Sequential(*[ResidualBlock(base) for _ in range(4)])
        self.to_rgb = nn.Conv2d(base, 3, 1, 1, 0, bias=False)

    def _check_inputs(self, image, poses):
        s = self.size
        if image.dim() != 4 or image.shape[1:] != (3, s, s):
            raise ValueError(f"image must be [B, 3, {s}, {s}], got {tuple(image.shape)}")
        if poses.dim() != 4 or poses.shape[1:] != (2 * NUM_JOINTS, s, s):
            raise ValueError(f"poses must be [B, 36, {s}, {s}], got {tuple(poses.shape)}")
        if image.shape[0] != poses.shape[0]:
            raise ValueError("image and pose batch sizes differ")

    def check_ladder(self, feats):
        for l, f in enumerate(feats, start=1):
            want = (self.base * 2 ** l, self.size // 2 ** l, self.size // 2 ** l)
            if tuple(f.shape[1:]) != want:
                raise AssertionError(f"level {l} features {tuple(f.shape[1:])} != {want}")

    @staticmethod
    def gate(image_feats, pose_feats):
        return [i * torch.sigmoid(h) for i, h in zip(image_feats, pose_feats)]

    def decode(self, gated):
        x = self.decoder[-1](gated[-1])
        for l in range(self.levels - 1, 0, -1):
            x = self.decoder[l - 1](x + gated[l - 1])
        return torch.tanh(self.to_rgb(self.tail(x)))

    def forward(self, image, poses, return_intermediates=False):
        self._check_inputs(image, poses)
        img_f = self.image_branch(image)
        pose_f = self.pose_branch(poses)
        self.check_ladder(img_f)
        self.check_ladder(pose_f)
        gated = self.gate(img_f, pose_f)
        out = self.decode(gated)
        if return_intermediates:
            return out, {"image": img_f, "pose": pose_f, "gated": gated}
        return out


class PatchDiscriminator(nn.Module):
    """70x70 receptive-field patch classifier over a channel-stacked image pair."""

    def __init__(self, in_ch=6, base=64):
        super().__init__()
        c = [base, base * 2, base * 4, base * 8]
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, c[0], 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[0], c[1], 4, 2, 1, bias=False), nn.BatchNorm2d(c[1]), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[1], c[2], 4, 2, 1, bias=False), nn.BatchNorm2d(c[2]), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[2], c[3], 4, 1, 1, bias=False), nn.BatchNorm2d(c[3]), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[3], 1, 4, 1, 1),
        )

    def forward(self, i_a, i_b):
        if i_a.shape != i_b.shape or i_a.dim() != 4 or i_a.shape[1] != 3:
            raise ValueError(f"patch discriminator needs two [B, 3, H, W] images, got "
                             f"{tuple(i_a.shape)} and {tuple(i_b.shape)}")
        return torch.sigmoid(self.net(torch.cat([i_a, i_b], dim=1)))


# -- perceptual features ---------------------------------------------------

VGG19_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
             512, 512, 512, 512, "M", 512, 512, 512, 512, "M")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class VGGFeatures(nn.Module):
    """Frozen VGG-19 style conv stack exposing post-ReLU conv-layer outputs.

    Layer indices count convolutions from 1. Weights come from a torchvision
    style ``vgg19`` state dict file when ``weights_path`` is given, otherwise
    from a fixed-seed random initialisation (``width`` scales the channel
    counts of the random clone).
    """

    def __init__(self, max_layer=9, weights_path=None, seed=0, width=1.0):
        super().__init__()
        if weights_path is not None:
            width = 1.0
        layers, cin, n_conv = [], 3, 0
        for v in VGG19_CFG:
            if n_conv == max_layer:
                break
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                cout = max(4, int(v * width))
                layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=False)]
                cin, n_conv = cout, n_conv + 1
        self.features = nn.Sequential(*layers)
        self.depth = n_conv
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            own = self.features.state_dict()
            self.features.load_state_dict({k: state[k] for k in own})
            self.source = f"pretrained:{Path(weights_path).name}"
        else:
            g = torch.Generator().manual_seed(substream_seed(seed, "vgg"))
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    with torch.no_grad():
                        m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                        m.bias.zero_()
            self.source = f"random:seed={seed}:width={width}"
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x, layers=PERCEPTUAL_LAYERS):
        if max(layers) > self.depth or min(layers) < 1:
            raise ValueError(f"layer indices {layers} outside 1..{self.depth}")
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        out, n_conv = {}, 0
        for m in self.features:
            x = m(x)
            if isinstance(m, nn.ReLU):
                n_conv += 1
                if n_conv in layers:
                    out[n_conv] = x
                if n_conv == max(layers):
                    break
        return [out[l] for l in layers]


def default_feature_extractor(tiny=False, seed=0) -> VGGFeatures:
    """Pretrained weights from ``$SCENE_SYNTH_CACHE/vgg19.pth`` when present."""
    cache = os.environ.get("SCENE_SYNTH_CACHE")
    if cache and not tiny:
        path = Path(cache) / "vgg19.pth"
        if path.is_file():
            return VGGFeatures(9, weights_path=path)
    return VGGFeatures(9, seed=seed, width=0.25 if tiny else 1.0)


def perceptual_loss(feat_extractor, gen, real, layers=PERCEPTUAL_LAYERS):
    """Sum over layers of the volume-normalized L1 feature distance.

    ``feat_extractor(x, layers)`` must return one ``[B, C, H, W]`` map per
    requested layer.
    """
    depth = getattr(feat_extractor, "depth", None)
    if depth is not None and max(layers) > depth:
        raise ValueError(f"layer {max(layers)} beyond extractor depth {depth}")
    fg = feat_extractor(gen, layers)
    with torch.no_grad():
        fr = feat_extractor(real, layers)
    total = 0.0
    for a, b in zip(fg, fr):
        total = total + (a - b).abs().mean()
    return total


# -- objectives --------------------------------------------------------------

def bce(p, target: float):
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    if target == 1.0:
        return -torch.log(p).mean()
    if target == 0.0:
        return -torch.log1p(-p).mean()
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def l1_loss(gen, real):
    return (gen - real).abs().mean()


def generator_objective(l1, gan, perceptual, weights=(LAMBDA_L1, LAMBDA_GAN, LAMBDA_PERCEPTUAL)):
    """Weighted sum; ``perceptual`` is the summed per-layer term."""
    return weights[0] * l1 + weights[1] * gan + weights[2] * perceptual


def discriminator_objective(d_real_map, d_fake_map):
    return 0.5 * (bce(d_real_map, 1.0) + bce(d_fake_map, 0.0))


# -- params / training -------------------------------------------------------

@dataclass
class Stage3Config:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-3
    betas: tuple = (0.5, 0.999)
    eps: float = 1e-8
    tiny: bool = False
    seed: int = 0


@dataclass
class StageThreeParams(StageParams):
    stage = "stage3"
    generator: PoseTransferGenerator = None
    discriminator: PatchDiscriminator = None
    opt_g: torch.optim.Optimizer = None
    opt_d: torch.optim.Optimizer = None

    @classmethod
    def create(cls, tiny=False, seed=0, lr=1e-3, betas=(0.5, 0.999), eps=1e-8, arch=None):
        arch = dict(arch or (TINY_ARCH if tiny else FULL_ARCH))
        torch.manual_seed(substream_seed(seed, "init"))
        g = init_gan_weights(PoseTransferGenerator(**arch))
        d = init_gan_weights(PatchDiscriminator(base=arch["base"]))
        p = cls(arch=arch, generator=g, discriminator=d)
        p.opt_g = torch.optim.Adam(g.parameters(), lr=lr, betas=tuple(betas), eps=eps, weight_decay=0)
        p.opt_d = torch.optim.Adam(d.parameters(), lr=lr, betas=tuple(betas), eps=eps, weight_decay=0)
        return p

    @property
    def size(self):
        return self.arch["size"]

    def networks(self):
        return {"g_r": self.generator, "d_r": self.discriminator}

    def optimizers(self):
        return {"g_r": self.opt_g, "d_r": self.opt_d}


def load_stage3(path) -> StageThreeParams:
    _, meta = read_archive(path)
    cfg = meta.get("config", {})
    arch = meta.get("arch")
    if not isinstance(arch, dict) or "size" not in arch:
        arch = None
    p = StageThreeParams.create(arch=arch, lr=cfg.get("lr", 1e-3), betas=cfg.get("betas", (0.5, 0.999)))
    return load_checkpoint(path, p)


def pose_sigma(size):
    return pose_codec.DEFAULT_SIGMA * size / 64


def pose_pair_tensor(source_pose, target_pose, size) -> torch.Tensor:
    """[36, size, size] gaussian heatmaps of (source, target) poses."""
    s = pose_sigma(size)
    a = pose_codec.encode_skeleton(source_pose, (size, size), pose_codec.GAUSSIAN, s).tensor
    b = pose_codec.encode_skeleton(target_pose, (size, size), pose_codec.GAUSSIAN, s).tensor
    return torch.from_numpy(np.concatenate([a, b], axis=0))


def gr_forward(params, i_a, poses, return_intermediates=False):
    g = params.generator if isinstance(params, StageThreeParams) else params
    squeeze = i_a.dim() == 3
    if squeeze:
        i_a, poses = i_a[None], poses[None]
    out = g(i_a, poses, return_intermediates)
    if squeeze:
        return (out[0][0], out[1]) if return_intermediates else out[0]
    return out


def dr_forward(params, i_a, i_b):
    d = params.discriminator if isinstance(params, StageThreeParams) else params
    if i_a.dim() == 3:
        return d(i_a[None], i_b[None])[0]
    return d(i_a, i_b)


def prepare_pairs(pairs, size):
    """Stack pair records into (I_A, poses, I_B) tensors at ``size``."""
    from .data import image_to_tensor
    from PIL import Image

    ia, pp, ib = [], [], []
    for rec in pairs:
        imgs = []
        for img in (rec.source_image, rec.target_image):
            if img.shape[0] != size or img.shape[1] != size:
                img = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
            imgs.append(image_to_tensor(img))
        ia.append(imgs[0])
        ib.append(imgs[1])
        pp.append(pose_pair_tensor(rec.source_pose.rescale((size, size)),
                                   rec.target_pose.rescale((size, size)), size))
    return torch.stack(ia), torch.stack(pp), torch.stack(ib)


class Stage3Trainer:
    """Alternating single discriminator / generator updates per batch.

    Gradients are cleared at the start of each update, so after :meth:`step`
    every parameter's ``.grad`` holds that step's gradient.
    """

    def __init__(self, params: StageThreeParams, feat_extractor=None, config: Stage3Config | None = None):
        self.p = params
        self.config = config or Stage3Config(tiny=params.arch.get("tiny", False))
        self.features = feat_extractor or default_feature_extractor(self.config.tiny, self.config.seed)
        self.log_g = params.log.setdefault("generator", [])
        self.log_d = params.log.setdefault("discriminator", [])
        self.log_l1 = params.log.setdefault("l1", [])

    def step(self, i_a, poses, i_b):
        g, d = self.p.generator, self.p.discriminator
        g.train()
        d.train()
        fake = g(i_a, poses)

        self.p.opt_d.zero_grad(set_to_none=True)
        loss_d = discriminator_objective(d(i_a, i_b), d(i_a, fake.detach()))
        loss_d.backward()
        self.p.opt_d.step()

        self.p.opt_g.zero_grad(set_to_none=True)
        l1 = l1_loss(fake, i_b)
        gan = bce(d(i_a, fake), 1.0)
        perc = perceptual_loss(self.features, fake, i_b)
        loss_g = generator_objective(l1, gan, perc)
        loss_g.backward()
        self.p.opt_g.step()

        self.p.step += 1
        self.log_d.append(loss_d.item())
        self.log_g.append(loss_g.item())
        self.log_l1.append(l1.item())
        return {"d": loss_d.item(), "g": loss_g.item(), "l1": l1.item(), "gan": gan.item(),
                "perceptual": perc.item()}


def train_stage3(dataset, config: Stage3Config | None = None, params: StageThreeParams | None = None,
                 feat_extractor=None, progress=None) -> StageThreeParams:
    config = config or Stage3Config()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("train_stage3 needs a non-empty dataset")
    if params is None:
        params = StageThreeParams.create(config.tiny, config.seed, config.lr, config.betas, config.eps)
    params.config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()}
    ia, pp, ib = prepare_pairs(dataset, params.size)
    trainer = Stage3Trainer(params, feat_extractor, config)
    rng = numpy_rng(config.seed, "data")
    n = len(ia)
    for _ in range(config.steps):
        if config.batch >= n:
            idx = torch.arange(n)
        else:
            idx = torch.from_numpy(rng.choice(n, size=config.batch, replace=False))
        out = trainer.step(ia[idx], pp[idx], ib[idx])
        if progress is not None:
            progress(params, out)
        if params.step % 100 == 0:
            log.info("stage3 step %d  d %.4f  g %.4f  l1 %.4f", params.step, out["d"], out["g"], out["l1"])
    params.generator.eval()
    params.discriminator.eval()
    return params


@torch.no_grad()
def transfer(params: StageThreeParams, source_image, source_pose, target_pose) -> torch.Tensor:
    """Render the source person in ``target_pose``; returns [3, S, S] in [-1, 1]."""
    from .data import PairRecord

    size = params.size
    rec = PairRecord(source_image, source_pose, source_image, target_pose)
    ia, pp, _ = prepare_pairs([rec], size)
    g = params.generator
    was = g.training
    g.eval()
    out = g(ia, pp)[0]
    g.train(was)
    return out
