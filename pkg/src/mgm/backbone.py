"""Multi-task network: shared residual encoder, one transposed decoder per task."""

from contextlib import contextmanager
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthdata import C_OBJ, DEPTH_RANGE

TASK_TABLE = {
    # name: (output channels, loss kind)
    "seg": (C_OBJ + 1, "cross_entropy"),
    "depth": (1, "l1"),
    "normal": (3, "cosine"),
    "edge": (1, "bce"),
}
NORMAL_EPS = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    feature_dim: int = 128

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 2:
            raise ConfigError("encoder needs at least 2 stages")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")

    def large(self):
        return replace(self, blocks_per_stage=2 * self.blocks_per_stage)


@dataclass
class TaskSpec:
    name: str
    output_channels: int = None
    loss_kind: str = None
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.name not in TASK_TABLE:
            raise ConfigError(f"unknown task {self.name!r}; expected one of {sorted(TASK_TABLE)}")
        channels, kind = TASK_TABLE[self.name]
        if self.output_channels is None:
            self.output_channels = channels
        if self.loss_kind is None:
            self.loss_kind = kind
        if (self.output_channels, self.loss_kind) != (channels, kind):
            raise ConfigError(f"task {self.name} requires {channels} channels and {kind} loss")


def make_tasks(names, weights=None):
    weights = weights or {}
    return [TaskSpec(n, loss_weight=weights.get(n, 1.0)) for n in names]


@dataclass
class MultiTaskPrediction:
    outputs: dict  # task name → B×H×W×C tensor
    feature: torch.Tensor = None  # B×feature_dim

    def __getitem__(self, key):
        return self.outputs[key]

    def detached(self):
        return MultiTaskPrediction({k: v.detach() for k, v in self.outputs.items()},
                                   None if self.feature is None else self.feature.detach())

    def for_metrics(self):
        out = dict(self.outputs)
        if "normal" in out:
            out["normal"] = F.normalize(out["normal"], dim=-1, eps=NORMAL_EPS)
        return out


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        chans = cfg.stage_channels
        self.stem = nn.Sequential(nn.Conv2d(3, chans[0], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(chans[0]), nn.ReLU())
        stages = []
        cin = chans[0]
        for cout in chans:
            blocks = [ResBlock(cin, cout, stride=2)]
            blocks += [ResBlock(cout, cout) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.out_channels = chans[-1]

    def forward(self, x):
        return self.stages(self.stem(x))


class Decoder(nn.Module):
    """Mirror of the encoder: one stride-2 transposed conv per encoder stage."""

    def __init__(self, stage_channels, out_channels):
        super().__init__()
        rev = list(stage_channels)[::-1] + [stage_channels[0]]
        layers = []
        for cin, cout in zip(rev[:-1], rev[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
        self.up = nn.Sequential(*layers)
        self.head = nn.Conv2d(rev[-1], out_channels, 3, 1, 1)

    def forward(self, h):
        return self.head(self.up(h))


def to_nchw(x):
    # contiguous: oneDNN's strided 1×1 conv backward corrupts memory on channels-last input
    return x.permute(0, 3, 1, 2).contiguous()


def to_nhwc(x):
    return x.permute(0, 2, 3, 1)


def check_images(x, n_down):
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected a B×H×W×3 image batch, got shape {tuple(x.shape)}")
    h, w = x.shape[1:3]
    if h % (2 ** n_down) or w % (2 ** n_down):
        raise ValueError(f"H, W must be divisible by {2 ** n_down}, got {h}×{w}")
    lo, hi = float(x.min()), float(x.max())
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"image values must lie in [-1, 1], got [{lo:.3f}, {hi:.3f}]")


class MultiTaskNet(nn.Module):
    def __init__(self, encoder_cfg, tasks, depth_range=DEPTH_RANGE):
        super().__init__()
        if not tasks:
            raise ConfigError("at least one task is required")
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate tasks in {names}")
        self.encoder_cfg = encoder_cfg
        self.tasks = list(tasks)
        self.depth_range = tuple(depth_range)
        self.encoder = Encoder(encoder_cfg)
        self.feature_proj = nn.Linear(self.encoder.out_channels, encoder_cfg.feature_dim)
        self.decoders = nn.ModuleDict(
            {t.name: Decoder(encoder_cfg.stage_channels, t.output_channels) for t in tasks})

    @property
    def task_names(self):
        return [t.name for t in self.tasks]

    def encoder_parameters(self):
        return list(self.encoder.parameters()) + list(self.feature_proj.parameters())

    def decoder_parameters(self):
        return list(self.decoders.parameters())

    def encode(self, x):
        check_images(x, len(self.encoder_cfg.stage_channels))
        return self.encoder(to_nchw(x))

    def pooled_feature(self, h):
        return self.feature_proj(h.mean(dim=(2, 3)))

    def encoder_feature(self, x):
        return self.pooled_feature(self.encode(x))

    def decode(self, h):
        outputs = {}
        for name, dec in self.decoders.items():
            y = to_nhwc(dec(h))
            if name == "depth":
                lo, hi = self.depth_range
                y = lo + (hi - lo) * (y + 0.5)
            outputs[name] = y
        return outputs

    def forward(self, x):
        h = self.encode(x)
        return MultiTaskPrediction(self.decode(h), self.pooled_feature(h))


def build_multitask(encoder_cfg, tasks, depth_range=DEPTH_RANGE):
    return MultiTaskNet(encoder_cfg, tasks, depth_range)


@contextmanager
def frozen_running_stats(*modules):
    """Batch norm keeps normalizing with batch statistics but stops updating its
    running averages (momentum 0)."""
    bns = [m for mod in modules if mod is not None for m in mod.modules()
           if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def _per_pixel_loss(kind, pred, target, depth_range):
    if kind == "cross_entropy":
        logp = F.log_softmax(pred, dim=-1)
        if target.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8):
            return -logp.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)
        return -(target * logp).sum(-1)
    if kind == "l1":
        lo, hi = depth_range
        return (pred - target).abs().sum(-1) / (hi - lo)
    if kind == "cosine":
        p = F.normalize(pred, dim=-1, eps=NORMAL_EPS)
        t = F.normalize(target, dim=-1, eps=NORMAL_EPS)
        return 1.0 - (p * t).sum(-1)
    if kind == "bce":
        return F.binary_cross_entropy_with_logits(pred, target, reduction="none").sum(-1)
    raise ConfigError(f"unknown loss kind {kind!r}")


def task_loss(spec, pred, target, valid_mask=None, depth_range=DEPTH_RANGE):
    """Mean per-pixel loss of one task over ``valid_mask`` pixels.

    ``pred`` is B×H×W×C. Targets may drop the trailing channel axis for
    single-channel tasks; seg targets are integer labels or soft
    probabilities (B×H×W×C).
    """
    if spec.loss_kind != "cross_entropy" and target.ndim == pred.ndim - 1:
        target = target.unsqueeze(-1)
    if spec.loss_kind != "cross_entropy" or target.is_floating_point():
        if target.shape != pred.shape:
            raise ValueError(f"{spec.name}: target shape {tuple(target.shape)} != pred {tuple(pred.shape)}")
    elif target.shape != pred.shape[:-1]:
        raise ValueError(f"{spec.name}: label shape {tuple(target.shape)} != pred {tuple(pred.shape[:-1])}")
    per_pixel = _per_pixel_loss(spec.loss_kind, pred, target.to(pred.dtype) if target.is_floating_point() else target,
                                depth_range)
    if valid_mask is None:
        return per_pixel.mean()
    mask = valid_mask.to(per_pixel.dtype)
    if mask.shape != per_pixel.shape:
        raise ValueError(f"valid_mask shape {tuple(mask.shape)} != {tuple(per_pixel.shape)}")
    count = mask.sum()
    if count == 0:
        raise ValueError("valid_mask is empty; skip this task instead")
    return (per_pixel * mask).sum() / count


def multitask_loss(tasks, pred, targets, valid_mask=None, depth_range=DEPTH_RANGE):
    losses = {t.name: task_loss(t, pred[t.name], targets[t.name], valid_mask, depth_range) for t in tasks}
    total = sum(t.loss_weight * losses[t.name] for t in tasks)
    return total, losses
