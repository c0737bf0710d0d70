"""Stage 1: context-conditioned WGAN-GP over 18x64x64 pose heatmaps."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import pose_codec
from .checkpoint import StageParams, load_checkpoint, read_archive
from .nn_init import init_gan_weights
from .pose_codec import NUM_JOINTS, PoseSkeleton
from .rng import numpy_rng, torch_rng, substream_seed

log = logging.getLogger(__name__)

EMBED_DIM = 512
NOISE_DIM = 512
HEATMAP_SIZE = 64
GP_WEIGHT = 10.0
N_CRITIC = 5
# Output-layer bias init: tanh(-2) ~ -0.96 starts the generator near the
# empty-background level (-1) of the real targets instead of at 0.
HEAD_BIAS_INIT = -2.0


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2))


def _up(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 4, 2, 1),
        nn.BatchNorm2d(cout),
        nn.ReLU(True),
    )


class ContextEncoder(nn.Module):
    """18x64x64 context heatmap -> 512-d embedding."""

    def __init__(self, embed_dim=EMBED_DIM):
        super().__init__()
        self.convs = nn.Sequential(_down(NUM_JOINTS, 32), _down(32, 64), _down(64, 128), _down(128, 256))
        self.fc = nn.Linear(256 * 4 * 4, embed_dim)

    def forward(self, h):
        if h.dim() != 4 or h.shape[1:] != (NUM_JOINTS, HEATMAP_SIZE, HEATMAP_SIZE):
            raise ValueError(f"context heatmap must be [B, 18, 64, 64], got {tuple(h.shape)}")
        return self.fc(self.convs(h).flatten(1))


class PoseGenerator(nn.Module):
    def __init__(self, embed_dim=EMBED_DIM, noise_dim=NOISE_DIM):
        super().__init__()
        self.embed_dim = embed_dim
        self.noise_dim = noise_dim
        self.encoder = ContextEncoder(embed_dim)
        self.seed = nn.Linear(embed_dim + noise_dim, 512 * 2 * 2)
        self.ups = nn.Sequential(_up(512, 256), _up(256, 128), _up(128, 64), _up(64, 32))
        self.head = nn.ConvTranspose2d(32, NUM_JOINTS, 4, 2, 1)

    def generate(self, v_b, z):
        if v_b.shape[-1] != self.embed_dim or z.shape[-1] != self.noise_dim:
            raise ValueError("embedding/noise dimension mismatch")
        x = self.seed(torch.cat([v_b, z], dim=1)).view(-1, 512, 2, 2)
        return torch.tanh(self.head(self.ups(x)))

    def forward(self, h_multi, z):
        return self.generate(self.encoder(h_multi), z)


class PoseCritic(nn.Module):
    """Unbounded realness score D(x, v_B); no normalization layers."""

    def __init__(self, embed_dim=EMBED_DIM):
        super().__init__()
        self.cond = nn.Linear(embed_dim, HEATMAP_SIZE * HEATMAP_SIZE)
        self.convs = nn.Sequential(_down(NUM_JOINTS + 1, 32), _down(32, 64), _down(64, 128), _down(128, 256))
        self.head = nn.Conv2d(256, 1, 4, 4)

    def forward(self, x, v_b):
        if x.dim() != 4 or x.shape[1:] != (NUM_JOINTS, HEATMAP_SIZE, HEATMAP_SIZE):
            raise ValueError(f"critic input must be [B, 18, 64, 64], got {tuple(x.shape)}")
        if v_b.shape[0] != x.shape[0]:
            raise ValueError("heatmap and embedding batch sizes differ")
        cond = self.cond(v_b).view(-1, 1, HEATMAP_SIZE, HEATMAP_SIZE)
        return self.head(self.convs(torch.cat([x, cond], dim=1))).view(-1)


@dataclass
class Stage1Config:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-4
    betas: tuple = (0.0, 0.9)
    eps: float = 1e-8
    gp_weight: float = GP_WEIGHT
    n_critic: int = N_CRITIC
    sigma: float = pose_codec.DEFAULT_SIGMA
    seed: int = 0


@dataclass
class StageOneParams(StageParams):
    stage = "stage1"
    generator: PoseGenerator = None
    critic: PoseCritic = None
    opt_g: torch.optim.Optimizer = None
    opt_d: torch.optim.Optimizer = None

    @classmethod
    def create(cls, seed=0, lr=1e-4, betas=(0.0, 0.9), eps=1e-8):
        torch.manual_seed(substream_seed(seed, "init"))
        g = init_gan_weights(PoseGenerator())
        nn.init.constant_(g.head.bias, HEAD_BIAS_INIT)
        d = init_gan_weights(PoseCritic())
        p = cls(arch={"embed_dim": EMBED_DIM, "noise_dim": NOISE_DIM, "size": HEATMAP_SIZE},
                generator=g, critic=d)
        p.opt_g = torch.optim.Adam(g.parameters(), lr=lr, betas=tuple(betas), eps=eps, weight_decay=0)
        p.opt_d = torch.optim.Adam(d.parameters(), lr=lr, betas=tuple(betas), eps=eps, weight_decay=0)
        return p

    def networks(self):
        return {"g_t": self.generator, "d_t": self.critic}

    def optimizers(self):
        return {"g_t": self.opt_g, "d_t": self.opt_d}


def load_stage1(path) -> StageOneParams:
    _, meta = read_archive(path)
    cfg = meta.get("config", {})
    p = StageOneParams.create(lr=cfg.get("lr", 1e-4), betas=cfg.get("betas", (0.0, 0.9)))
    return load_checkpoint(path, p)


def _as_tensor(h):
    if isinstance(h, pose_codec.ContextHeatmap):
        h = h.tensor
    t = torch.as_tensor(np.asarray(h), dtype=torch.float32)
    return t.unsqueeze(0) if t.dim() == 3 else t


@torch.no_grad()
def encode_context(params, h_multi) -> torch.Tensor:
    """512-d embedding of a context heatmap (``[18,64,64]`` or batched)."""
    gen = params.generator if isinstance(params, StageOneParams) else params
    return gen.encoder(_as_tensor(h_multi))


def generate_pose(params, v_b, z) -> torch.Tensor:
    """Heatmap in [-1, 1]; map with ``(x + 1) / 2`` before decoding."""
    gen = params.generator if isinstance(params, StageOneParams) else params
    return gen.generate(torch.atleast_2d(v_b), torch.atleast_2d(z))


def critic_score(params, x, v_b) -> torch.Tensor:
    critic = params.critic if isinstance(params, StageOneParams) else params
    return critic(_as_tensor(x), torch.atleast_2d(v_b))


def critic_loss(real_scores, fake_scores):
    real_scores = torch.as_tensor(real_scores, dtype=torch.float64)
    fake_scores = torch.as_tensor(fake_scores, dtype=torch.float64)
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("critic_loss needs non-empty score batches")
    if real_scores.shape != fake_scores.shape:
        raise ValueError("real and fake batches must have equal size")
    return fake_scores.mean() - real_scores.mean()


def _critic_loss_t(real_scores, fake_scores):
    return fake_scores.mean() - real_scores.mean()


def gradient_penalty(critic, x_real, x_fake, v_b, alpha=None, generator=None, create_graph=True):
    """Mean of ``(||grad_{x~, v_B} D(x~, v_B)||_2 - 1)^2`` over the batch.

    ``x~ = alpha * x_fake + (1 - alpha) * x_real`` with one uniform ``alpha``
    per sample. ``critic`` is any callable ``(x, v_b) -> [B]`` scores, or a
    ``StageOneParams``.
    """
    if isinstance(critic, StageOneParams):
        critic = critic.critic
    if x_real.shape != x_fake.shape:
        raise ValueError("real and fake heatmaps must have matching shapes")
    b = x_real.shape[0]
    if alpha is None:
        alpha = torch.rand(b, generator=generator, dtype=x_real.dtype)
    alpha = torch.as_tensor(alpha, dtype=x_real.dtype).reshape(b, *([1] * (x_real.dim() - 1)))
    x_hat = (alpha * x_fake.detach() + (1 - alpha) * x_real.detach()).requires_grad_(True)
    v_hat = v_b.detach().clone().requires_grad_(True)
    scores = torch.as_tensor(critic(x_hat, v_hat))
    if scores.requires_grad:
        grads = torch.autograd.grad(scores.sum(), [x_hat, v_hat], create_graph=create_graph,
                                    allow_unused=True)
    else:
        grads = (None, None)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, (x_hat, v_hat))]
    sq = grads[0].flatten(1).pow(2).sum(1) + grads[1].flatten(1).pow(2).sum(1)
    # tiny floor keeps sqrt differentiable at a zero gradient
    norm = torch.sqrt(sq + 1e-16)
    return ((norm - 1.0) ** 2).mean()


def build_training_pairs(dataset, sigma=pose_codec.DEFAULT_SIGMA):
    """(context heatmap, target heatmap) arrays from scene records.

    A record with an explicit ``target`` contributes one pair; otherwise every
    person in turn is held out as the target with the rest as context.
    """
    ctx, tgt = [], []
    for rec in dataset:
        people = list(rec.people)
        if rec.target is not None:
            choices = [(people, rec.target)]
        else:
            choices = [(people[:i] + people[i + 1:], people[i]) for i in range(len(people))]
        for context, target in choices:
            if not context:
                continue
            ctx.append(pose_codec.encode_scene_context(context, pose_codec.CONTEXT_SIZE, sigma).tensor)
            tgt.append(pose_codec.encode_skeleton(target.rescale(context[0].frame),
                                                  pose_codec.CONTEXT_SIZE, pose_codec.GAUSSIAN,
                                                  sigma).tensor)
    if not ctx:
        raise ValueError("stage-1 dataset yields no (context, target) pair")
    return np.stack(ctx), np.stack(tgt)


def train_stage1(dataset, config: Stage1Config | None = None, params: StageOneParams | None = None,
                 progress=None) -> StageOneParams:
    """WGAN-GP training: one critic update per step, one generator update
    every ``n_critic`` steps."""
    config = config or Stage1Config()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("train_stage1 needs a non-empty dataset")
    ctx_np, tgt_np = build_training_pairs(dataset, config.sigma)
    ctx_all = torch.from_numpy(ctx_np)
    real_all = torch.from_numpy(tgt_np) * 2.0 - 1.0
    if params is None:
        params = StageOneParams.create(config.seed, config.lr, config.betas, config.eps)
    params.config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()}
    g, d = params.generator, params.critic
    g.train()
    d.train()
    data_rng = numpy_rng(config.seed, "data")
    noise = torch_rng(config.seed, "noise")
    log_d = params.log.setdefault("critic", [])
    log_g = params.log.setdefault("generator", [])
    log_gp = params.log.setdefault("gp", [])
    n = len(ctx_all)

    for _ in range(config.steps):
        idx = torch.from_numpy(data_rng.integers(0, n, size=config.batch))
        ctx, real = ctx_all[idx], real_all[idx]

        with torch.no_grad():
            v_b = g.encoder(ctx)
            fake = g.generate(v_b, torch.randn(len(idx), g.noise_dim, generator=noise))
        params.opt_d.zero_grad(set_to_none=True)
        w_loss = _critic_loss_t(d(real, v_b), d(fake, v_b))
        gp = gradient_penalty(d, real, fake, v_b, generator=noise)
        loss_d = w_loss + config.gp_weight * gp
        loss_d.backward()
        params.opt_d.step()
        params.step += 1
        log_d.append(loss_d.item())
        log_gp.append(gp.item())

        if params.step % config.n_critic == 0:
            params.opt_g.zero_grad(set_to_none=True)
            v_b = g.encoder(ctx)
            fake = g.generate(v_b, torch.randn(len(idx), g.noise_dim, generator=noise))
            loss_g = -d(fake, v_b.detach()).mean()
            loss_g.backward()
            params.opt_g.step()
            log_g.append(loss_g.item())
        if progress is not None:
            progress(params)
        if params.step % 200 == 0:
            log.info("stage1 step %d  critic %.4f  gp %.4f", params.step, log_d[-1], log_gp[-1])
    g.eval()
    d.eval()
    return params


@torch.no_grad()
def sample_heatmap(params: StageOneParams, scene, seed: int, sigma=pose_codec.DEFAULT_SIGMA):
    """Generated heatmap in [0, 1] for a scene (list of skeletons)."""
    g = params.generator
    was_training = g.training
    g.eval()
    h_multi = pose_codec.encode_scene_context(scene, pose_codec.CONTEXT_SIZE, sigma)
    v_b = g.encoder(_as_tensor(h_multi))
    z = torch.randn(1, g.noise_dim, generator=torch_rng(seed, "noise"))
    out = (g.generate(v_b, z)[0] + 1.0) / 2.0
    g.train(was_training)
    return out.numpy()


def sample_target(params: StageOneParams, scene, seed: int, threshold=0.2,
                  sigma=pose_codec.DEFAULT_SIGMA) -> PoseSkeleton:
    """Target skeleton in the 64x64 context frame.

    ``meta["all_occluded"]`` is set when no channel reaches the threshold.
    """
    heat = sample_heatmap(params, scene, seed, sigma)
    skel = pose_codec.decode_heatmap(heat, threshold, pose_codec.CONTEXT_SIZE)
    skel.meta["all_occluded"] = skel.num_visible == 0
    skel.meta["peak"] = heat.reshape(NUM_JOINTS, -1).max(1).tolist()
    return skel
