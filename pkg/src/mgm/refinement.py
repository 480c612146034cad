"""Scene-classification refinement network and the EM-style refinement of
synthesized (weakly labeled) images.

The E-step maximises, per sample,

    J(y) = log P(c | y; R) - lam * sum_i ||y_i - y_hat_i||^2 / (2 * n_pixels_i)

by backtracking gradient ascent starting at the network prediction y_hat;
the M-step regresses the multi-task outputs toward the resulting targets and
updates only the shared encoder.
"""

import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import NORMAL_EPS, TASK_TABLE, TaskSpec, task_loss, to_nchw
from .synthdata import DEPTH_RANGE


class EStepError(FloatingPointError):
    pass


def prediction_channels(pred, tasks, depth_range=DEPTH_RANGE):
    """Concatenate task outputs into R's input (B×C×H×W)."""
    parts = []
    for name in tasks:
        if name not in pred:
            raise ValueError(f"prediction is missing task channel {name!r}")
        y = pred[name]
        if name == "seg":
            y = F.softmax(y, dim=-1)
        elif name == "depth":
            lo, hi = depth_range
            y = (y - lo) / (hi - lo)
        elif name == "normal":
            y = F.normalize(y, dim=-1, eps=NORMAL_EPS)
        elif name == "edge":
            y = torch.sigmoid(y)
        parts.append(y)
    return to_nchw(torch.cat(parts, dim=-1))


class RefinementNet(nn.Module):
    def __init__(self, tasks, num_classes, widths=(16, 32, 64), depth_range=DEPTH_RANGE):
        super().__init__()
        self.tasks = [t.name if isinstance(t, TaskSpec) else t for t in tasks]
        self.depth_range = tuple(depth_range)
        self.in_channels = sum(TASK_TABLE[t][0] for t in self.tasks)
        layers, cin = [], self.in_channels
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, 2, 1), nn.ReLU()]
            cin = w
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(cin, num_classes)
        self.num_classes = num_classes

    def forward(self, pred):
        if hasattr(pred, "outputs"):
            pred = pred.outputs
        h = self.features(prediction_channels(pred, self.tasks, self.depth_range))
        return self.classifier(h.mean(dim=(2, 3)))


def refine_forward(R, pred):
    return R(pred)


def train_step_real(M, R, x, c, optimizer):
    """Scene CE through R(M(x)); ``optimizer`` holds R and the encoder only."""
    logits = R(M(x))
    loss = F.cross_entropy(logits, c)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {"loss": loss.item()}


@dataclass
class EMConfig:
    K: int = 5
    eta0: float = 0.1
    lam: float = 1.0
    max_halvings: int = 10

    def __post_init__(self):
        if self.K < 0 or self.eta0 <= 0 or self.lam < 0 or self.max_halvings < 0:
            raise ValueError(f"invalid EM config {self}")


@dataclass
class RefinedTargets:
    targets: dict
    trace: list  # batch-mean J after each inner iteration (index 0 = at y_hat)
    per_sample: torch.Tensor  # final J per sample
    halvings_used: int = 0
    sample_traces: list = field(default_factory=list)


def _n_pixels(y):
    return y.shape[1] * y.shape[2]


def em_objective(R, y, y_hat, c, lam):
    """Per-sample J(y)."""
    logp = F.log_softmax(R(y), dim=-1).gather(1, c[:, None]).squeeze(1)
    prior = 0.0
    for k, v in y.items():
        prior = prior + ((v - y_hat[k]) ** 2).flatten(1).sum(1) / (2 * _n_pixels(v))
    return logp - lam * prior


def e_step(R, c, y_hat, cfg):
    """Backtracking ascent on J from y_hat.

    The ascent direction is the gradient scaled by each task's pixel count,
    which is the inverse curvature of the proximity prior, so ``eta0`` is a
    resolution-independent step.
    """
    c = torch.as_tensor(c, dtype=torch.long)
    y_hat = {k: v.detach() for k, v in y_hat.items()}
    y = {k: v.clone() for k, v in y_hat.items()}
    with torch.no_grad():
        J = em_objective(R, y, y_hat, c, cfg.lam)
    if not torch.isfinite(J).all():
        raise EStepError(f"non-finite J at the starting point: {J.tolist()}")
    trace = [J.mean().item()]
    sample_traces = [J.clone()]
    halvings = 0
    batch = J.shape[0]
    for _ in range(cfg.K):
        leaves = {k: v.clone().requires_grad_(True) for k, v in y.items()}
        J_at = em_objective(R, leaves, y_hat, c, cfg.lam)
        grads = torch.autograd.grad(J_at.sum(), list(leaves.values()))
        direction = {k: g * _n_pixels(g) for k, g in zip(leaves, grads)}
        if not all(torch.isfinite(d).all() for d in direction.values()):
            raise EStepError("non-finite gradient of J")
        eta = torch.full((batch,), float(cfg.eta0))
        pending = torch.ones(batch, dtype=torch.bool)
        with torch.no_grad():
            for attempt in range(cfg.max_halvings + 1):
                step = eta.view(-1, 1, 1, 1)
                trial = {k: y[k] + step * direction[k] for k in y}
                J_trial = em_objective(R, trial, y_hat, c, cfg.lam)
                ok = pending & torch.isfinite(J_trial) & (J_trial >= J)
                for k in y:
                    y[k] = torch.where(ok.view(-1, 1, 1, 1), trial[k], y[k])
                J = torch.where(ok, J_trial, J)
                pending &= ~ok
                if not pending.any() or attempt == cfg.max_halvings:
                    break
                halvings += int(pending.sum())
                eta = torch.where(pending, eta / 2, eta)
        trace.append(J.mean().item())
        sample_traces.append(J.clone())
    return RefinedTargets(y, trace, J, halvings, sample_traces)


def _soft_targets(y_dagger):
    t = dict(y_dagger)
    if "seg" in t:
        t["seg"] = F.softmax(t["seg"], dim=-1)
    if "edge" in t:
        t["edge"] = torch.sigmoid(t["edge"])
    return t


def m_step(M, x, y_dagger, optimizer, depth_range=DEPTH_RANGE):
    """Regress M(x) toward y_dagger; ``optimizer`` holds the encoder only.

    When the targets equal the current prediction there is no error to
    propagate and the optimizer is not stepped.
    """
    pred = M(x)
    targets = _soft_targets({k: v.detach() for k, v in y_dagger.items()})
    losses = {t.name: task_loss(t, pred[t.name], targets[t.name], None, depth_range) for t in M.tasks}
    total = sum(t.loss_weight * losses[t.name] for t in M.tasks)
    unchanged = all(torch.equal(pred[k].detach(), y_dagger[k]) for k in y_dagger)
    record = {"loss": total.item(), **{f"loss_{k}": v.item() for k, v in losses.items()},
              "skipped": unchanged}
    optimizer.zero_grad(set_to_none=True)
    if not unchanged:
        total.backward()
        optimizer.step()
    return record


def refine_synthetic(M, R, x, c, cfg, optimizer, mode="em", depth_range=DEPTH_RANGE):
    """E-step then M-step on a weakly labeled batch (R stays frozen).

    ``mode="direct"`` instead back-propagates the scene CE of R(M(x)) into the
    encoder without estimating dense targets.
    """
    c = torch.as_tensor(c, dtype=torch.long)
    with torch.no_grad():
        y_hat = {k: v.detach() for k, v in M(x).outputs.items()}
        ce_before = F.cross_entropy(R(y_hat), c).item()
    if mode == "direct":
        loss = F.cross_entropy(R(M(x)), c)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        R.zero_grad(set_to_none=True)
        with torch.no_grad():
            ce_after = F.cross_entropy(R(M(x)), c).item()
        return {"loss": loss.item(), "scene_ce_before": ce_before, "scene_ce_after": ce_after,
                "J_trace": [], "halvings_used": 0}
    if mode != "em":
        raise ValueError(f"unknown refine mode {mode!r}")
    refined = e_step(R, c, y_hat, cfg)
    with torch.no_grad():
        ce_after = F.cross_entropy(R(refined.targets), c).item()
    record = m_step(M, x, refined.targets, optimizer, depth_range)
    record.update(J_trace=refined.trace, scene_ce_before=ce_before, scene_ce_after=ce_after,
                  halvings_used=refined.halvings_used)
    return record


def diagnostic_line(record):
    """JSONL diagnostic record for one refinement call."""
    keys = ("J_trace", "scene_ce_before", "scene_ce_after", "halvings_used")
    return json.dumps({k: record[k] for k in keys})
