"""Joint training loop and its variants."""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import build_multitask, frozen_running_stats, make_tasks, multitask_loss
from .config import ExperimentConfig, parse_ini_text
from .evalkit import evaluate
from .generation import (GanDivergence, Generator, gan_train_step, make_gan_bundle, make_latent,
                         pure_noise_latent)
from .refinement import EStepError, RefinementNet, diagnostic_line, refine_synthetic, train_step_real
from .selfsup import ProjectionHead, ReconDecoder, embed, nt_xent, recon_loss, sample_views
from .synthdata import ArraySplit, load_split

# parameter groups each event may modify
EVENT_SCOPE = {
    "multi_task": {"encoder", "decoders"},
    "multi_task_syn": {"encoder", "decoders"},
    "refine_real": {"encoder", "R"},
    "ntxent_real": {"encoder", "head"},
    "recon_real": {"encoder", "recon"},
    "gan": {"G", "D", "encoder"},
    "synthesize": set(),
    "sample_weak": set(),
    "refine_syn": {"encoder"},
    "ntxent_syn": {"encoder"},
    "recon_syn": {"encoder"},
}
# only these passes update batch-norm running averages (real, unaugmented images)
_BN_STAT_EVENTS = {"multi_task", "multi_task_syn"}
_PURPOSE = {"order": 0, "aug_real": 1, "aug_syn": 2, "latent_gan": 3, "latent_syn": 4,
            "weak_order": 5, "pretrain": 6, "pretrain_latent": 7}


class TrainingDiverged(FloatingPointError):
    pass


class ScopeViolation(AssertionError):
    pass


class WeakDataUnavailable(ValueError):
    pass


def np_rng(seed, epoch, step, purpose):
    return np.random.default_rng([int(seed), int(epoch) + 1, int(step), _PURPOSE[purpose]])


def torch_gen(seed, epoch, step, purpose):
    g = torch.Generator()
    g.manual_seed(int(np_rng(seed, epoch, step, purpose).integers(2 ** 62)))
    return g


def hash_params(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ data


@dataclass
class RunData:
    train: ArraySplit  # labeled subset
    test: ArraySplit
    val: ArraySplit = None
    weak_pool: ArraySplit = None  # weakly labeled real images (MGM_r)
    synthetic: ArraySplit = None  # oracle-labeled synthesized images (ST_G)
    n_train_total: int = 0
    num_classes: int = 8
    resolution: tuple = (64, 64)

    def weak_count(self, cfg):
        return int(round(cfg.resolved_weak_ratio * self.n_train_total))


def _concat(a, b):
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    return ArraySplit(np.concatenate([a.images, b.images]), np.concatenate([a.scene_class, b.scene_class]),
                      None, list(a.ids) + list(b.ids))


def labeled_prefix(n_full, n_labeled, data_seed):
    """Seeded shuffle prefix, so smaller ratios are nested in larger ones."""
    perm = np.random.default_rng([int(data_seed), 12345]).permutation(n_full)
    return perm[:n_labeled], perm[n_labeled:]


def prepare_data(manifest, cfg, with_val=False):
    full = load_split(manifest, "train", weak=False)
    weak = load_split(manifest, "train", weak=True)
    n_total = len(full) + len(weak)
    n_lab = min(len(full), max(2, int(round(cfg.data_ratio * n_total))))
    lab_idx, rest_idx = labeled_prefix(len(full), n_lab, manifest.seed)
    pool = _concat(weak.stripped(), full.subset(rest_idx).stripped())
    return RunData(train=full.subset(lab_idx), test=load_split(manifest, "test"),
                   val=load_split(manifest, "val") if with_val else None, weak_pool=pool,
                   n_train_total=n_total, num_classes=manifest.c_scene, resolution=tuple(manifest.resolution))


def _batch(split, idx):
    part = split.subset(idx)
    x = torch.from_numpy(part.images)
    c = torch.from_numpy(part.scene_class)
    targets = {k: torch.from_numpy(v) for k, v in part.dense.items()}
    return x, c, targets, part.ids


# ------------------------------------------------------------------ logs


class MetricsLog:
    """JSONL metrics, one record per (event, name); no wall-clock fields."""

    def __init__(self, path, run_id, seed, mode="a"):
        self.path = Path(path) if path else None
        self.run_id, self.seed = run_id, seed
        self.records = []
        self.events = []  # (epoch, step, event)
        self._fh = open(self.path, mode, encoding="utf-8") if self.path else None

    def log(self, epoch, step, event, values):
        self.events.append((epoch, step, event))
        for name, value in values.items():
            rec = {"run_id": self.run_id, "seed": self.seed, "epoch": epoch, "step": step,
                   "event": event, "name": name, "value": value}
            self.records.append(rec)
            if self._fh:
                self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def iteration_events(events):
    """Group (epoch, step, event) triples into per-iteration event tuples."""
    out = {}
    for epoch, step, event in events:
        if epoch < 0:
            continue
        seq = out.setdefault((epoch, step), [])
        if not seq or seq[-1] != event:
            seq.append(event)
    return {k: tuple(v) for k, v in out.items()}


@dataclass
class RunLog:
    run_id: str
    seed: int
    config: ExperimentConfig
    events: list = field(default_factory=list)
    records: list = field(default_factory=list)
    checkpoint: str = None
    metrics: dict = field(default_factory=dict)
    scope_checks: int = 0

    def losses(self):
        return [(r["epoch"], r["step"], r["event"], r["name"], r["value"]) for r in self.records]


# ------------------------------------------------------------------ model


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2))


def _finite(values, what):
    for k, v in values.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise TrainingDiverged(f"non-finite {k} in {what}: {v}")


def pretrain_gan(cfg, images, classes, num_classes, resolution, seed, steps, log=None):
    """Train a generator on pure-noise latents (no link to the multi-task net)."""
    gs = cfg.generation
    torch.manual_seed(int(np_rng(seed, -1, 0, "pretrain").integers(2 ** 62)))
    bundle = make_gan_bundle(gs.generator_config(num_classes, resolution[0]), gs.lr_g, gs.lr_d,
                             (gs.beta1, gs.beta2), gs.n_d)
    n = len(images)
    bs = min(cfg.batch_size, n)
    for step in range(steps):
        idx = np_rng(seed, -1, step, "pretrain").choice(n, bs, replace=False)
        x, c = torch.from_numpy(images[idx]), torch.from_numpy(classes[idx])
        latent = pure_noise_latent(bs, gs.z_dim, c, torch_gen(seed, -1, step, "pretrain_latent"))
        rec = gan_train_step(bundle, x, c, latent)
        if log is not None and (step % 50 == 0 or step == steps - 1):
            log.log(-1, step, "pretrain_gan", rec)
    for p in bundle.G.parameters():
        p.requires_grad_(False)
    return bundle.G


class Trainer:
    def __init__(self, cfg, data, seed, run_dir=None, run_id="run", frozen_generator=None, log_mode="w"):
        self.cfg, self.data, self.seed = cfg, data, int(seed)
        self.run_dir = Path(run_dir) if run_dir else None
        self.run_id = run_id
        self.events = cfg.events
        if cfg.variant == "ST_G" and data.synthetic is None:
            raise ValueError("ST_G needs oracle-labeled synthesized images (run it through the pilot)")
        if cfg.variant == "MGM_r":
            need = data.weak_count(cfg)
            have = 0 if data.weak_pool is None else len(data.weak_pool)
            if need > have:
                raise WeakDataUnavailable(f"MGM_r needs {need} weakly labeled real images, {have} available")
        torch.manual_seed(self.seed)
        self.tasks = make_tasks(cfg.tasks)
        self.M = build_multitask(cfg.encoder_config(), self.tasks)
        enc = self.M.encoder_parameters()
        self.R = self.head = self.recon = self.gan = self.G_frozen = None
        self.opt = {"M": _adam(self.M.parameters(), cfg), "E": _adam(enc, cfg)}
        ev = set(self.events)
        if ev & {"refine_real", "refine_syn"}:
            self.R = RefinementNet(self.tasks, data.num_classes)
            self.opt["RE"] = _adam(list(self.R.parameters()) + enc, cfg)
        if ev & {"ntxent_real", "ntxent_syn"}:
            s = cfg.selfsup
            self.head = ProjectionHead(cfg.encoder.feature_dim, s.head_hidden, s.head_out)
            self.opt["self"] = _adam(list(self.head.parameters()) + enc, cfg)
        if ev & {"recon_real", "recon_syn"}:
            self.recon = ReconDecoder(cfg.encoder_config().stage_channels)
            self.opt["recon"] = _adam(list(self.recon.parameters()) + enc, cfg)
        gs = cfg.generation
        if "gan" in ev:
            extra = [{"params": enc, "lr": gs.gan_encoder_lr}] if gs.gan_encoder_lr > 0 else []
            self.gan = make_gan_bundle(gs.generator_config(data.num_classes, data.resolution[0]), gs.lr_g,
                                       gs.lr_d, (gs.beta1, gs.beta2), gs.n_d, extra_g_groups=extra)
        elif "synthesize" in ev:
            if frozen_generator is None:
                frozen_generator = pretrain_gan(cfg, data.train.images, data.train.scene_class, data.num_classes,
                                                data.resolution, self.seed,
                                                gs.pretrain_steps or cfg.epochs * self.iters_per_epoch)
            self.G_frozen = frozen_generator
        self.policy = cfg.selfsup.policy()
        self.epoch = 0
        logs = self.run_dir / "logs.jsonl" if self.run_dir else None
        if logs:
            logs.parent.mkdir(parents=True, exist_ok=True)
        self.log = MetricsLog(logs, run_id, self.seed, mode=log_mode)
        self.diag = open(self.run_dir / "refine_diagnostics.jsonl", log_mode, encoding="utf-8") \
            if self.run_dir and ev & {"refine_syn"} else None
        self.scope_checks = 0

    # sizes ------------------------------------------------------------

    @property
    def batch_size(self):
        return min(self.cfg.batch_size, len(self.data.train))

    @property
    def iters_per_epoch(self):
        return max(1, len(self.data.train) // self.batch_size)

    @property
    def weak_batch(self):
        cfg = self.cfg
        return max(2, int(round(self.batch_size * cfg.resolved_weak_ratio / cfg.data_ratio)))

    # parameter groups -----------------------------------------------

    def groups(self):
        g = {"encoder": self.M.encoder_parameters(), "decoders": self.M.decoder_parameters()}
        for name, mod in (("R", self.R), ("head", self.head), ("recon", self.recon)):
            if mod is not None:
                g[name] = list(mod.parameters())
        if self.gan is not None:
            g["G"] = list(self.gan.G.parameters())
            g["D"] = list(self.gan.D.parameters())
        if self.G_frozen is not None:
            g["G"] = list(self.G_frozen.parameters())
        return g

    def hashes(self):
        return {k: hash_params(v) for k, v in self.groups().items()}

    def _zero_grads(self):
        for mod in (self.M, self.R, self.head, self.recon):
            if mod is not None:
                mod.zero_grad(set_to_none=True)
        if self.gan is not None:
            self.gan.G.zero_grad(set_to_none=True)
            self.gan.D.zero_grad(set_to_none=True)

    # state ------------------------------------------------------------

    def state_dict(self):
        st = {"M": self.M.state_dict(), "opt": {k: o.state_dict() for k, o in self.opt.items()},
              "epoch": self.epoch, "torch_rng": torch.get_rng_state()}
        for name in ("R", "head", "recon", "G_frozen"):
            mod = getattr(self, name)
            if mod is not None:
                st[name] = mod.state_dict()
        if self.gan is not None:
            st["gan"] = {"G": self.gan.G.state_dict(), "D": self.gan.D.state_dict(),
                         "opt_g": self.gan.opt_g.state_dict(), "opt_d": self.gan.opt_d.state_dict(),
                         "steps": (self.gan.steps_g, self.gan.steps_d)}
        return st

    def load_state_dict(self, st):
        self.M.load_state_dict(st["M"])
        for k, o in self.opt.items():
            o.load_state_dict(st["opt"][k])
        for name in ("R", "head", "recon", "G_frozen"):
            mod = getattr(self, name)
            if mod is not None:
                mod.load_state_dict(st[name])
        if self.gan is not None:
            g = st["gan"]
            self.gan.G.load_state_dict(g["G"])
            self.gan.D.load_state_dict(g["D"])
            self.gan.opt_g.load_state_dict(g["opt_g"])
            self.gan.opt_d.load_state_dict(g["opt_d"])
            self.gan.steps_g, self.gan.steps_d = g["steps"]
        self.epoch = st["epoch"]
        torch.set_rng_state(st["torch_rng"])

    def save(self, path):
        meta = {"config": self.cfg.to_ini(), "config_hash": self.cfg.digest(), "seed": self.seed,
                "epoch": self.epoch, "run_id": self.run_id}
        st = self.state_dict()
        meta["tensors"] = {k: [list(s), d] for k, (s, d) in ckpt.shapes_of(st).items()}
        return ckpt.save_checkpoint(path, st, meta)

    @classmethod
    def resume(cls, path, data, run_dir=None):
        st, meta = ckpt.load_checkpoint(path)
        cfg, errors = parse_ini_text(meta["config"])
        if errors:
            raise ckpt.CheckpointError(f"{path}: stored config invalid: {errors}")
        frozen = None
        if "G_frozen" in st:
            frozen = Generator(cfg.generation.generator_config(data.num_classes, data.resolution[0]))
            frozen.requires_grad_(False)
        t = cls(cfg, data, meta["seed"], run_dir, meta["run_id"], frozen_generator=frozen, log_mode="a")
        t.load_state_dict(st)
        return t

    # events -----------------------------------------------------------

    def _ev_multi_task(self, x, targets):
        total, losses = multitask_loss(self.tasks, self.M(x), targets)
        total.backward()
        self.opt["M"].step()
        return {"loss": total.item(), **{f"loss_{k}": v.item() for k, v in losses.items()}}

    def _ev_ntxent(self, x, opt, epoch, step, purpose):
        xa, xb = sample_views(x, self.policy, np_rng(self.seed, epoch, step, purpose))
        loss = nt_xent(embed(self.M, self.head, torch.cat([xa, xb])), tau=self.cfg.selfsup.tau)
        loss.backward()
        opt.step()
        return {"loss": loss.item()}

    def _ev_recon(self, x, opt):
        loss = recon_loss(self.M, self.recon, x)
        loss.backward()
        opt.step()
        return {"loss": loss.item()}

    def _ev_gan(self, x, c, ids, epoch, step):
        feat = self.M.encoder_feature(x)
        if self.cfg.generation.gan_encoder_lr <= 0:
            feat = feat.detach()
        latent = make_latent(feat, c, self.cfg.generation.sigma, torch_gen(self.seed, epoch, step, "latent_gan"), ids)
        return gan_train_step(self.gan, x, c, latent)

    @torch.no_grad()
    def _ev_synthesize(self, x, c, ids, epoch, step):
        n = self.weak_batch
        src = torch.arange(n) % x.shape[0]
        cs = c[src]
        gen = torch_gen(self.seed, epoch, step, "latent_syn")
        if self.gan is not None:
            latent = make_latent(self.M.encoder_feature(x[src]), cs, self.cfg.generation.sigma, gen,
                                 [ids[i] for i in src.tolist()])
            G = self.gan.G
        else:
            latent = pure_noise_latent(n, self.cfg.generation.z_dim, cs, gen)
            G = self.G_frozen
        xt = G(latent.z, latent.classes).clamp(-1.0, 1.0)
        return xt, cs, {"n": n}

    def _weak_batch_from(self, split, count, epoch, step):
        """Chunk ``step`` of a per-epoch shuffle of the first ``count`` pool items."""
        subset = np.random.default_rng([self.seed, 777]).permutation(len(split))[:count]
        order = subset[np_rng(self.seed, epoch, 0, "weak_order").permutation(len(subset))]
        n = self.weak_batch
        idx = np.take(order, np.arange(step * n, (step + 1) * n), mode="wrap")
        return split.subset(idx)

    def _ev_refine_syn(self, xt, ct):
        rec = refine_synthetic(self.M, self.R, xt, ct, self.cfg.em, self.opt["E"], mode=self.cfg.refine_mode)
        if self.diag:
            self.diag.write(diagnostic_line(rec) + "\n")
        out = {"loss": rec["loss"], "scene_ce_before": rec["scene_ce_before"],
               "scene_ce_after": rec["scene_ce_after"], "halvings_used": rec["halvings_used"]}
        if rec["J_trace"]:
            out["J_start"], out["J_end"] = rec["J_trace"][0], rec["J_trace"][-1]
        return out

    # loop -------------------------------------------------------------

    def _run_event(self, name, epoch, step, fn):
        self._zero_grads()
        before = self.hashes() if self.cfg.check_scope else None
        try:
            if name in _BN_STAT_EVENTS:
                out = fn()
            else:
                with frozen_running_stats(self.M):
                    out = fn()
        except (GanDivergence, EStepError, FloatingPointError) as e:
            self._abort(f"{name} at epoch {epoch} step {step}: {e}")
        values = out[-1] if isinstance(out, tuple) else out
        try:
            _finite(values, name)
        except TrainingDiverged as e:
            self._abort(f"epoch {epoch} step {step}: {e}")
        if before is not None:
            after = self.hashes()
            allowed = EVENT_SCOPE[name]
            if name == "gan" and self.cfg.generation.gan_encoder_lr <= 0:
                allowed = allowed - {"encoder"}
            changed = {k for k in after if after[k] != before[k]}
            if changed - allowed:
                raise ScopeViolation(f"{name} modified {sorted(changed - allowed)} (allowed {sorted(allowed)})")
            self.scope_checks += 1
        self.log.log(epoch, step, name, values)
        return out

    def _abort(self, msg):
        if self.run_dir:
            self.save(self.run_dir / "checkpoints" / "diverged.ckpt")
        raise TrainingDiverged(msg)

    def train_epoch(self, epoch):
        data, ev = self.data, self.events
        n, bs = len(data.train), self.batch_size
        order = np_rng(self.seed, epoch, 0, "order").permutation(n)
        syn_count = len(data.synthetic) if data.synthetic is not None else 0
        for step in range(self.iters_per_epoch):
            x, c, targets, ids = _batch(data.train, order[step * bs:(step + 1) * bs])
            xt = ct = None
            for name in ev:
                if name == "multi_task":
                    self._run_event(name, epoch, step, lambda: self._ev_multi_task(x, targets))
                elif name == "multi_task_syn":
                    part = self._weak_batch_from(data.synthetic, syn_count, epoch, step)
                    xs, _, ts, _ = _batch(part, np.arange(len(part)))
                    self._run_event(name, epoch, step, lambda: self._ev_multi_task(xs, ts))
                elif name == "refine_real":
                    self._run_event(name, epoch, step, lambda: train_step_real(self.M, self.R, x, c, self.opt["RE"]))
                elif name == "ntxent_real":
                    self._run_event(name, epoch, step,
                                    lambda: self._ev_ntxent(x, self.opt["self"], epoch, step, "aug_real"))
                elif name == "recon_real":
                    self._run_event(name, epoch, step, lambda: self._ev_recon(x, self.opt["recon"]))
                elif name == "gan":
                    self._run_event(name, epoch, step, lambda: self._ev_gan(x, c, ids, epoch, step))
                elif name == "synthesize":
                    xt, ct, _ = self._run_event(name, epoch, step, lambda: self._ev_synthesize(x, c, ids, epoch, step))
                elif name == "sample_weak":
                    part = self._weak_batch_from(data.weak_pool, data.weak_count(self.cfg), epoch, step)
                    xt, ct = torch.from_numpy(part.images), torch.from_numpy(part.scene_class)
                    self._run_event(name, epoch, step, lambda: {"n": len(part)})
                elif name == "refine_syn":
                    self._run_event(name, epoch, step, lambda: self._ev_refine_syn(xt, ct))
                elif name == "ntxent_syn":
                    self._run_event(name, epoch, step,
                                    lambda: self._ev_ntxent(xt, self.opt["E"], epoch, step, "aug_syn"))
                elif name == "recon_syn":
                    self._run_event(name, epoch, step, lambda: self._ev_recon(xt, self.opt["E"]))
                else:
                    raise ValueError(f"unknown event {name!r}")

    def fit(self, until_epoch=None):
        """Train from the current epoch to ``until_epoch`` (default: cfg.epochs)."""
        until = self.cfg.epochs if until_epoch is None else until_epoch
        threads = torch.get_num_threads()
        if self.cfg.deterministic:
            torch.set_num_threads(1)
        last = None
        try:
            while self.epoch < until:
                t0 = time.perf_counter()
                self.train_epoch(self.epoch)
                self.epoch += 1
                if self.run_dir:
                    last = self.save(self.run_dir / "checkpoints" / f"epoch_{self.epoch:03d}.ckpt")
                    with open(self.run_dir / "timing.jsonl", "a", encoding="utf-8") as fh:
                        fh.write(json.dumps({"seed": self.seed, "epoch": self.epoch,
                                             "seconds": round(time.perf_counter() - t0, 3)}) + "\n")
        finally:
            torch.set_num_threads(threads)
            if self.diag:
                self.diag.flush()
        return last

    def close(self):
        self.log.close()
        if self.diag:
            self.diag.close()
            self.diag = None

    def run_log(self, checkpoint=None, metrics=None):
        return RunLog(self.run_id, self.seed, self.cfg, list(self.log.events), list(self.log.records),
                      None if checkpoint is None else str(checkpoint), metrics or {}, self.scope_checks)


def train(cfg, data, seed=None, run_dir=None, run_id="run", evaluate_test=True, frozen_generator=None):
    """Train one seed; returns the RunLog with test metrics."""
    seed = cfg.seeds[0] if seed is None else seed
    t = Trainer(cfg, data, seed, run_dir, run_id, frozen_generator=frozen_generator)
    try:
        last = t.fit()
        metrics = evaluate(t.M, data.test) if evaluate_test and len(data.test) else {}
    finally:
        t.close()
    log = t.run_log(last, metrics)
    if run_dir:
        rep = Path(run_dir) / "reports"
        rep.mkdir(parents=True, exist_ok=True)
        (rep / f"metrics_seed{seed}.json").write_text(json.dumps(
            {"variant": cfg.variant, "data_ratio": cfg.data_ratio, "weak_ratio": cfg.resolved_weak_ratio,
             "seed": seed, **metrics}, indent=2))
    log.model = t.M
    return log


def latest_checkpoint(run_dir):
    found = sorted((Path(run_dir) / "checkpoints").glob("epoch_*.ckpt"))
    return found[-1] if found else None


def train_or_resume(cfg, data, seed, run_dir, run_id="run"):
    """Like ``train`` but continues from the newest epoch checkpoint in
    ``run_dir`` when one exists for the same config and seed."""
    last = latest_checkpoint(run_dir)
    if last is None:
        return train(cfg, data, seed, run_dir, run_id)
    _, meta = ckpt.load_checkpoint(last)
    if meta["config_hash"] != cfg.digest() or meta["seed"] != seed:
        raise ckpt.CheckpointError(f"{last} belongs to a different config or seed")
    t = Trainer.resume(last, data, run_dir)
    try:
        last = t.fit() or last
        metrics = evaluate(t.M, data.test) if len(data.test) else {}
    finally:
        t.close()
    rep = Path(run_dir) / "reports"
    rep.mkdir(parents=True, exist_ok=True)
    (rep / f"metrics_seed{seed}.json").write_text(json.dumps(
        {"variant": cfg.variant, "data_ratio": cfg.data_ratio, "weak_ratio": cfg.resolved_weak_ratio,
         "seed": seed, **metrics}, indent=2))
    log = t.run_log(last, metrics)
    log.model = t.M
    return log


def resume_training(path, data, run_dir=None, until_epoch=None):
    t = Trainer.resume(path, data, run_dir)
    try:
        last = t.fit(until_epoch)
    finally:
        t.close()
    return t, last
