"""Class-conditional SAGAN-style generator/discriminator and the latent bridge."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .backbone import to_nchw, to_nhwc


class GanDivergence(FloatingPointError):
    pass


# ------------------------------------------------------------------ CBN


class ConditionalBatchNorm2d(nn.Module):
    """Batch norm whose affine (gamma, beta) rows are selected by class."""

    def __init__(self, num_features, num_classes, eps=1e-5, momentum=0.1, gamma_std=0.02):
        super().__init__()
        self.num_features = num_features
        self.num_classes = num_classes
        self.eps = eps
        self.momentum = momentum
        self.gamma = nn.Parameter(1.0 + gamma_std * torch.randn(num_classes, num_features))
        self.beta = nn.Parameter(torch.zeros(num_classes, num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, f, c):
        return cbn_forward(f, c, self, training=self.training)


def cbn_forward(f, c, layer, training=True):
    """f: B×C×H×W features, c: B class ids."""
    c = torch.as_tensor(c, dtype=torch.long)
    if c.numel() and (int(c.min()) < 0 or int(c.max()) >= layer.num_classes):
        raise ValueError(f"class ids must lie in [0, {layer.num_classes}), got {c.tolist()}")
    if training:
        if f.shape[0] < 2:
            raise ValueError("training-mode CBN needs a batch of at least 2")
        mean = f.mean(dim=(0, 2, 3))
        var = f.var(dim=(0, 2, 3), unbiased=False)
        with torch.no_grad():
            n = f.numel() / f.shape[1]
            m = layer.momentum
            layer.running_mean.mul_(1 - m).add_(m * mean.detach())
            layer.running_var.mul_(1 - m).add_(m * var.detach() * n / max(n - 1, 1))
    else:
        mean, var = layer.running_mean, layer.running_var
    normed = (f - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + layer.eps)
    return layer.gamma[c][:, :, None, None] * normed + layer.beta[c][:, :, None, None]


# ------------------------------------------------------------ attention


def _sn(module, enabled):
    return spectral_norm(module) if enabled else module


class SelfAttention(nn.Module):
    def __init__(self, channels, sn=True):
        super().__init__()
        qk = max(channels // 8, 1)
        v = max(channels // 2, 1)
        self.query = _sn(nn.Conv2d(channels, qk, 1), sn)
        self.key = _sn(nn.Conv2d(channels, qk, 1), sn)
        self.value = _sn(nn.Conv2d(channels, v, 1), sn)
        self.out = _sn(nn.Conv2d(v, channels, 1), sn)
        self.gate = nn.Parameter(torch.zeros(()))

    def attention(self, f):
        """Row i holds the distribution of query position i over key positions."""
        q = self.query(f).flatten(2)  # B×d×N
        k = self.key(f).flatten(2)
        return F.softmax(q.transpose(1, 2) @ k, dim=-1)  # B×N×N

    def forward(self, f):
        b, c, h, w = f.shape
        if h != w:
            raise ValueError(f"self-attention expects a square feature map, got {h}×{w}")
        attn = self.attention(f)
        v = self.value(f).flatten(2)  # B×dv×N
        agg = (v @ attn.transpose(1, 2)).view(b, -1, h, w)
        return f + self.gate * self.out(agg)


def self_attention(f, layer):
    return layer(f)


# -------------------------------------------------------------- networks


@dataclass
class GeneratorConfig:
    z_dim: int = 128
    num_classes: int = 8
    resolution: int = 64
    width: int = 128  # channels at 4×4, halved per upsampling (min 16)
    attention_res: int = 16

    def channels(self):
        n_up = int(round(math.log2(self.resolution / 4)))
        if 4 * 2 ** n_up != self.resolution:
            raise ValueError(f"resolution {self.resolution} must be 4·2^k")
        return [max(self.width // 2 ** i, 16) for i in range(n_up + 1)]


class GBlock(nn.Module):
    def __init__(self, cin, cout, num_classes):
        super().__init__()
        self.bn = ConditionalBatchNorm2d(cin, num_classes)
        self.conv = nn.Conv2d(cin, cout, 3, 1, 1)

    def forward(self, x, c):
        h = F.relu(self.bn(x, c))
        return self.conv(F.interpolate(h, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels()
        self.fc = nn.Linear(cfg.z_dim, chans[0] * 16)
        self.blocks = nn.ModuleList(GBlock(a, b, cfg.num_classes) for a, b in zip(chans[:-1], chans[1:]))
        self.attn_after = None
        for i in range(len(self.blocks)):
            if 4 * 2 ** (i + 1) == cfg.attention_res:
                self.attn_after = i
        self.attn = SelfAttention(chans[self.attn_after + 1], sn=False) if self.attn_after is not None else None
        self.out_bn = ConditionalBatchNorm2d(chans[-1], cfg.num_classes)
        self.out_conv = nn.Conv2d(chans[-1], 3, 3, 1, 1)

    def forward(self, z, c):
        if z.shape[-1] != self.cfg.z_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.cfg.z_dim}")
        c = torch.as_tensor(c, dtype=torch.long)
        h = self.fc(z).view(z.shape[0], -1, 4, 4)
        for i, block in enumerate(self.blocks):
            h = block(h, c)
            if i == self.attn_after:
                h = self.attn(h)
        h = F.relu(self.out_bn(h, c))
        return to_nhwc(torch.tanh(self.out_conv(h)))  # B×H×W×3


class Discriminator(nn.Module):
    """Spectral-normalised conv discriminator with a class-projection term."""

    def __init__(self, cfg):
        super().__init__()
        chans = cfg.channels()[::-1]  # high-res (few channels) → 4×4
        self.conv_in = spectral_norm(nn.Conv2d(3, chans[0], 3, 1, 1))
        downs = []
        for a, b in zip(chans[:-1], chans[1:]):
            downs.append(spectral_norm(nn.Conv2d(a, b, 4, 2, 1)))
        self.downs = nn.ModuleList(downs)
        self.attn_after = None
        for i in range(len(downs)):
            if cfg.resolution // 2 ** (i + 1) == cfg.attention_res:
                self.attn_after = i
        self.attn = SelfAttention(chans[self.attn_after + 1]) if self.attn_after is not None else None
        self.linear = spectral_norm(nn.Linear(chans[-1], 1))
        self.embed = spectral_norm(nn.Embedding(cfg.num_classes, chans[-1]))

    def forward(self, x, c):
        h = F.leaky_relu(self.conv_in(to_nchw(x)), 0.1)
        for i, down in enumerate(self.downs):
            h = F.leaky_relu(down(h), 0.1)
            if i == self.attn_after:
                h = self.attn(h)
        h = h.sum(dim=(2, 3))
        c = torch.as_tensor(c, dtype=torch.long)
        return self.linear(h).squeeze(-1) + (self.embed(c) * h).sum(-1)


# --------------------------------------------------------- latent bridge


@dataclass
class GeneratorLatent:
    z: torch.Tensor
    classes: torch.Tensor
    provenance: str  # "pure_noise" or "encoder_bridge"
    source_ids: list = None

    def __post_init__(self):
        if not torch.isfinite(self.z).all():
            raise ValueError("latent has non-finite entries")
        if self.provenance == "encoder_bridge" and self.source_ids is None:
            raise ValueError("encoder_bridge latents must record their source samples")


def make_latent(feature, c, sigma, generator=None, source_ids=None):
    """z = encoder feature + N(0, sigma^2) noise; class carried from the source."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        z = feature
    else:
        noise = torch.randn(feature.shape, generator=generator, dtype=feature.dtype)
        z = feature + sigma * noise
    if source_ids is None:
        source_ids = list(range(feature.shape[0]))
    return GeneratorLatent(z, torch.as_tensor(c, dtype=torch.long), "encoder_bridge", list(source_ids))


def pure_noise_latent(n, z_dim, classes, generator=None):
    z = torch.randn((n, z_dim), generator=generator)
    return GeneratorLatent(z, torch.as_tensor(classes, dtype=torch.long), "pure_noise")


def generator_forward(G, z, c):
    return G(z, c)


# ------------------------------------------------------------- training


def hinge_losses(real_scores, fake_scores):
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("score batches must be nonempty")
    loss_d = F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()
    loss_g = -fake_scores.mean()
    return loss_d, loss_g


@dataclass
class GanBundle:
    G: Generator
    D: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    n_d: int = 1
    steps_g: int = 0
    steps_d: int = 0
    events: list = field(default_factory=list)


def make_gan_bundle(cfg, lr_g=1e-4, lr_d=4e-4, betas=(0.0, 0.9), n_d=1, extra_g_groups=()):
    """``extra_g_groups`` are optimizer param groups trained by the generator loss
    (used to let the adversarial error reach the multi-task encoder)."""
    G, D = Generator(cfg), Discriminator(cfg)
    opt_g = torch.optim.Adam([{"params": G.parameters()}, *extra_g_groups], lr=lr_g, betas=betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=lr_d, betas=betas)
    return GanBundle(G, D, opt_g, opt_d, n_d=n_d)


def _check(value, what):
    if not math.isfinite(value):
        raise GanDivergence(f"non-finite {what}: {value}")


def gan_train_step(bundle, real, real_classes, latent):
    """n_d discriminator updates, then one generator update."""
    if real.shape[0] < 2 or latent.z.shape[0] < 2:
        raise ValueError("GAN step needs batches of at least 2")
    G, D = bundle.G, bundle.D
    record = {}
    for _ in range(bundle.n_d):
        with torch.no_grad():
            fake = G(latent.z.detach(), latent.classes)
        loss_d, _ = hinge_losses(D(real, real_classes), D(fake, latent.classes))
        _check(loss_d.item(), "discriminator loss")
        bundle.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        bundle.opt_d.step()
        bundle.steps_d += 1
        bundle.events.append("d_update")
        record["loss_d"] = loss_d.item()

    fake = G(latent.z, latent.classes)
    loss_g = -D(fake, latent.classes).mean()
    _check(loss_g.item(), "generator loss")
    bundle.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    bundle.opt_g.step()
    D.zero_grad(set_to_none=True)
    bundle.steps_g += 1
    bundle.events.append("g_update")
    record["loss_g"] = loss_g.item()
    return record


@torch.no_grad()
def write_sample_grid(G, out_dir, n=4, z_dim=None, seed=0):
    """One PNG per class holding an n×n tile of pure-noise samples."""
    from .raster import save_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z_dim = z_dim or G.cfg.z_dim
    gen = torch.Generator().manual_seed(seed)
    was_training = G.training
    G.eval()
    paths = []
    try:
        for c in range(G.cfg.num_classes):
            z = torch.randn((n * n, z_dim), generator=gen)
            imgs = G(z, torch.full((n * n,), c)).numpy()
            h, w = imgs.shape[1:3]
            tile = imgs.reshape(n, n, h, w, 3).transpose(0, 2, 1, 3, 4).reshape(n * h, n * w, 3)
            path = out_dir / f"samples_class{c}.png"
            save_png(path, tile)
            paths.append(path)
    finally:
        G.train(was_training)
    return paths
