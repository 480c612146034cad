"""Experiment configuration: nested dataclasses with an INI (configparser)
text form. ``validate_config`` returns either a resolved config or the list
of violated constraints, each prefixed with its key path."""

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import TASK_TABLE, EncoderConfig
from .generation import GeneratorConfig
from .refinement import EMConfig
from .selfsup import AugmentationPolicy

VARIANTS = ("ST", "MT", "MGM", "MGM_r", "MGM_/G", "MGM_/j", "MGM_/self", "MGM_/refine",
            "MGM_recon", "ST_G", "ST_l", "MT_l")

# per-iteration events, in order
EVENTS_MGM = ("multi_task", "refine_real", "ntxent_real", "gan", "synthesize", "refine_syn", "ntxent_syn")

VARIANT_EVENTS = {
    "ST": ("multi_task",),
    "MT": ("multi_task",),
    "ST_l": ("multi_task",),
    "MT_l": ("multi_task",),
    "ST_G": ("multi_task", "multi_task_syn"),
    "MGM": EVENTS_MGM,
    "MGM_/G": ("multi_task", "refine_real", "ntxent_real"),
    "MGM_/self": ("multi_task", "refine_real", "gan", "synthesize", "refine_syn"),
    "MGM_/refine": ("multi_task", "ntxent_real", "gan", "synthesize", "ntxent_syn"),
    "MGM_/j": ("multi_task", "refine_real", "ntxent_real", "synthesize", "refine_syn", "ntxent_syn"),
    "MGM_r": ("multi_task", "refine_real", "ntxent_real", "sample_weak", "refine_syn", "ntxent_syn"),
    "MGM_recon": ("multi_task", "refine_real", "recon_real", "gan", "synthesize", "refine_syn", "recon_syn"),
}


@dataclass
class GenerationSettings:
    z_dim: int = 128
    width: int = 128
    attention_res: int = 16
    sigma: float = 0.5  # latent-bridge noise std
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.9
    n_d: int = 1
    gan_encoder_lr: float = 1e-5  # step size of the generator loss on the encoder; 0 disables
    pretrain_steps: int = 0  # frozen-generator variants; 0 → the GAN steps a joint run would take

    def generator_config(self, num_classes, resolution):
        return GeneratorConfig(self.z_dim, num_classes, resolution, self.width, self.attention_res)


@dataclass
class SelfSupSettings:
    crop_lo: float = 0.6
    crop_hi: float = 1.0
    flip_prob: float = 0.5
    jitter: float = 0.2
    blur_prob: float = 0.1
    tau: float = 0.5
    head_hidden: int = 128
    head_out: int = 64

    def policy(self):
        return AugmentationPolicy((self.crop_lo, self.crop_hi), self.flip_prob, self.jitter, self.blur_prob)


@dataclass
class OptimSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class ExperimentConfig:
    variant: str = "MT"
    data_ratio: float = 1.0
    # weakly labeled images per epoch as a fraction of the full real training
    # split (same unit as data_ratio); None → equal to data_ratio
    weak_ratio: float = None
    tasks: tuple = ("seg", "depth", "normal")
    seeds: tuple = (0,)
    epochs: int = 50
    batch_size: int = 16
    refine_mode: str = "em"
    check_scope: bool = False
    deterministic: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    em: EMConfig = field(default_factory=EMConfig)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    selfsup: SelfSupSettings = field(default_factory=SelfSupSettings)
    optim: OptimSettings = field(default_factory=OptimSettings)

    @property
    def resolved_weak_ratio(self):
        return self.data_ratio if self.weak_ratio is None else self.weak_ratio

    @property
    def events(self):
        return VARIANT_EVENTS[self.variant]

    def encoder_config(self):
        return self.encoder.large() if self.variant in ("ST_l", "MT_l") else self.encoder

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_ini(self):
        return dump_ini(self)

    def digest(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


class ConfigValidationError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


_SECTIONS = {"encoder": EncoderConfig, "em": EMConfig, "generation": GenerationSettings,
             "selfsup": SelfSupSettings, "optim": OptimSettings}
_TOP = "experiment"


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parser():
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive (em.K)
    return cp


def dump_ini(cfg):
    cp = _parser()
    cp[_TOP] = {f.name: _fmt(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if f.name not in _SECTIONS}
    for name in _SECTIONS:
        sub = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _parse(raw, default, path):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{path}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        proto = default[0] if default else ""
        return tuple(_parse(x, proto, path) for x in items)
    if raw.lower() == "none":
        return None
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
    except ValueError:
        kind = "an integer" if isinstance(default, int) else "a number"
        raise ValueError(f"{path}: expected {kind}, got {raw!r}") from None
    return raw


def _build(cls, values, defaults, section, errors):
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in values.items():
        path = f"{section}.{key}"
        if key not in names:
            errors.append(f"{path}: unknown key")
            continue
        try:
            kwargs[key] = _parse(raw, getattr(defaults, key), path) if isinstance(raw, str) else raw
        except ValueError as e:
            errors.append(str(e))
    return kwargs


def config_from_mapping(sections, base=None):
    """Build a config from {section: {key: text or value}} over ``base`` defaults.

    Returns (config or None, errors).
    """
    base = base or ExperimentConfig()
    errors = []
    for name in sections:
        if name not in _SECTIONS and name != _TOP:
            errors.append(f"{name}: unknown section")
    subs = {}
    for name, cls in _SECTIONS.items():
        default = getattr(base, name)
        kwargs = _build(cls, sections.get(name, {}), default, name, errors)
        try:
            subs[name] = dataclasses.replace(default, **kwargs)
        except Exception as e:  # dataclass __post_init__ checks
            errors.append(f"{name}: {e}")
            subs[name] = default
    top = _build(ExperimentConfig, {k: v for k, v in sections.get(_TOP, {}).items() if k not in _SECTIONS},
                 base, _TOP, errors)
    if isinstance(top.get("tasks"), str):
        top["tasks"] = tuple(t.strip() for t in top["tasks"].split(",") if t.strip())
    cfg = dataclasses.replace(base, **top, **subs)
    errors += check_config(cfg)
    return (None if errors else cfg), errors


def check_config(cfg):
    e = []
    if cfg.variant not in VARIANTS:
        e.append(f"experiment.variant: unknown variant {cfg.variant!r}; expected one of {', '.join(VARIANTS)}")
    if not cfg.tasks:
        e.append("experiment.tasks: at least one task is required")
    for t in cfg.tasks:
        if t not in TASK_TABLE:
            e.append(f"experiment.tasks: unknown task {t!r}")
    if len(set(cfg.tasks)) != len(cfg.tasks):
        e.append("experiment.tasks: duplicate tasks")
    if cfg.variant in ("ST", "ST_l", "ST_G") and len(cfg.tasks) != 1:
        e.append(f"experiment.tasks: {cfg.variant.split('_')[0]} requires exactly one task")
    if not 0 < cfg.data_ratio <= 1:
        e.append("experiment.data_ratio: must lie in (0, 1]")
    if cfg.weak_ratio is not None and not 0 < cfg.weak_ratio <= 1.5:
        e.append("experiment.weak_ratio: must lie in (0, 1.5]")
    if not cfg.seeds:
        e.append("experiment.seeds: at least one seed is required")
    if cfg.epochs < 0:
        e.append("experiment.epochs: must be >= 0")
    if cfg.batch_size < 2:
        e.append("experiment.batch_size: must be >= 2 (batch statistics)")
    if cfg.refine_mode not in ("em", "direct"):
        e.append("experiment.refine_mode: must be 'em' or 'direct'")
    if cfg.generation.sigma < 0:
        e.append("generation.sigma: must be >= 0")
    if "gan" in VARIANT_EVENTS.get(cfg.variant, ()) and cfg.encoder.feature_dim != cfg.generation.z_dim:
        e.append(f"generation.z_dim: latent bridge needs z_dim == encoder.feature_dim "
                 f"({cfg.generation.z_dim} != {cfg.encoder.feature_dim})")
    if cfg.generation.n_d < 1:
        e.append("generation.n_d: must be >= 1")
    for name in ("lr_g", "lr_d"):
        if getattr(cfg.generation, name) <= 0:
            e.append(f"generation.{name}: must be > 0")
    if cfg.optim.lr < 0:
        e.append("optim.lr: must be >= 0")
    if cfg.selfsup.tau <= 0:
        e.append("selfsup.tau: must be > 0")
    try:
        cfg.selfsup.policy()
    except ValueError as err:
        e.append(f"selfsup: {err}")
    if cfg.selfsup.head_hidden < 1 or cfg.selfsup.head_out < 1:
        e.append("selfsup.head_*: must be >= 1")
    return e


def parse_ini_text(text, base=None):
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as err:
        return None, [f"<file>: {err}"]
    return config_from_mapping({s: dict(cp[s]) for s in cp.sections()}, base)


def validate_config(path):
    """Resolved ExperimentConfig for a file, or raise ConfigValidationError."""
    text = Path(path).read_text(encoding="utf-8") if path else ""
    cfg, errors = parse_ini_text(text)
    if errors:
        raise ConfigValidationError(errors)
    return cfg


def load_config(path=None, overrides=None):
    """Defaults < file < overrides ({section: {key: value}})."""
    text = Path(path).read_text(encoding="utf-8") if path else ""
    cfg, errors = parse_ini_text(text)
    if errors:
        raise ConfigValidationError(errors)
    if overrides:
        cfg, errors = config_from_mapping(overrides, cfg)
        if errors:
            raise ConfigValidationError(errors)
    return cfg


def tiny_config(**kw):
    """Small widths and few epochs for smoke tests and harness demos."""
    cfg = ExperimentConfig(
        epochs=2, batch_size=4,
        encoder=EncoderConfig((8, 16, 32, 64), 1, 32),
        em=EMConfig(K=2),
        generation=GenerationSettings(z_dim=32, width=32),
        selfsup=SelfSupSettings(head_hidden=32, head_out=16),
    )
    return dataclasses.replace(cfg, **kw)
