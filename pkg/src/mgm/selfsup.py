"""Contrastive self-supervision (two augmented views, projection head, NT-Xent)
and the reconstruction alternative."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Decoder, to_nchw, to_nhwc


@dataclass
class AugmentationPolicy:
    crop_scale: tuple = (0.6, 1.0)
    flip_prob: float = 0.5
    jitter: float = 0.2  # brightness and contrast, ±
    blur_prob: float = 0.1

    @classmethod
    def identity(cls):
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0, jitter=0.0, blur_prob=0.0)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not (0 <= self.flip_prob <= 1 and 0 <= self.blur_prob <= 1 and 0 <= self.jitter < 1):
            raise ValueError(f"invalid augmentation policy {self}")


_BLUR = torch.tensor([1.0, 2.0, 1.0]) / 4


def _blur(img):
    k = (_BLUR[:, None] * _BLUR[None, :]).to(img.dtype)
    weight = k.expand(img.shape[1], 1, 3, 3).contiguous()
    return F.conv2d(F.pad(img, (1, 1, 1, 1), mode="replicate"), weight, groups=img.shape[1])


def augment(x, policy, rng):
    """One random view per image of a B×H×W×3 batch; ``rng`` is a numpy Generator."""
    b, h, w, _ = x.shape
    img = to_nchw(x)
    out = []
    for i in range(b):
        v = img[i:i + 1]
        # draws happen unconditionally so the stream layout is policy independent
        scale = rng.uniform(*policy.crop_scale)
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        u_cx, u_cy = rng.uniform(), rng.uniform()
        flip = rng.uniform() < policy.flip_prob
        bright = rng.uniform(-policy.jitter, policy.jitter)
        contrast = 1.0 + rng.uniform(-policy.jitter, policy.jitter)
        blur = rng.uniform() < policy.blur_prob
        if scale < 1.0:
            sx = min(1.0, math.sqrt(scale * aspect))
            sy = min(1.0, math.sqrt(scale / aspect))
            cx = (2 * u_cx - 1) * (1 - sx)
            cy = (2 * u_cy - 1) * (1 - sy)
            theta = torch.tensor([[[sx, 0.0, cx], [0.0, sy, cy]]], dtype=v.dtype)
            grid = F.affine_grid(theta, list(v.shape), align_corners=False)
            v = F.grid_sample(v, grid, mode="bilinear", padding_mode="border", align_corners=False)
        if flip:
            v = v.flip(-1)
        if bright != 0.0 or contrast != 1.0:
            mean = v.mean(dim=(1, 2, 3), keepdim=True)
            v = ((v - mean) * contrast + mean + bright).clamp(-1.0, 1.0)
        if blur:
            v = _blur(v)
        out.append(v)
    return to_nhwc(torch.cat(out)).contiguous()


def sample_views(x, policy, rng):
    """Two independent augmentations of ``x``, each from its own child stream."""
    rng_a, rng_b = rng.spawn(2)
    return augment(x, policy, rng_a), augment(x, policy, rng_b)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim=128, hidden=128, out_dim=64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, f):
        return self.net(f)


def embed(M, head, x):
    return F.normalize(head(M.encoder_feature(x)), dim=-1)


def pair_map(n):
    """partner[i] for views laid out as [a_0..a_{n-1}, b_0..b_{n-1}]."""
    return torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])


def nt_xent(z, partner=None, tau=0.5):
    """Mean NT-Xent over all 2N ordered positive pairs, cosine similarity."""
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ValueError(f"need 2N >= 2 embeddings, got shape {tuple(z.shape)}")
    n2 = z.shape[0]
    partner = pair_map(n2 // 2) if partner is None else torch.as_tensor(partner, dtype=torch.long)
    if not torch.equal(partner[partner], torch.arange(n2)) or (partner == torch.arange(n2)).any():
        raise ValueError("pair map must be an involution without fixed points")
    z = F.normalize(z, dim=-1)
    sim = z @ z.t() / tau
    eye = torch.eye(n2, dtype=torch.bool)
    logits = sim.masked_fill(eye, float("-inf"))
    return F.cross_entropy(logits, partner)


def contrastive_loss(M, head, x, policy, rng, tau=0.5):
    xa, xb = sample_views(x, policy, rng)
    z = embed(M, head, torch.cat([xa, xb]))
    return nt_xent(z, tau=tau)


class ReconDecoder(nn.Module):
    def __init__(self, stage_channels):
        super().__init__()
        self.dec = Decoder(stage_channels, 3)

    def forward(self, h):
        return to_nhwc(torch.tanh(self.dec(h)))


def reconstruction_mse(recon, x):
    return ((recon - x) ** 2).mean()


def recon_loss(M, recon_decoder, x):
    return reconstruction_mse(recon_decoder(M.encode(x)), x)
