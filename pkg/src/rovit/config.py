"""Run configuration and its flat ``section.key = value`` text format.

    # comments and blank lines are ignored
    run.steps = 2000
    vit.pe_mode = cpe
    loss.kind = focal
    cpe.scale_range = 0.1, 1.0

Unknown sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .encoders import TextConfig, VitConfig, desk_cpe_config
from .losses import LossConfig
from .pe import CpeConfig
from .scoring import ScoreConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_steps: int = 50
    clip_norm: float = 1.0
    backbone_lr_mult: float = 1.0
    text_lr_mult: float = 1.0
    temperature_lr_mult: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("optim.lr must be > 0")
        if self.clip_norm < 0:
            raise ConfigError("optim.clip_norm must be >= 0 (0 disables clipping)")
        if min(self.backbone_lr_mult, self.text_lr_mult, self.temperature_lr_mult) < 0:
            raise ConfigError("learning-rate multipliers must be >= 0")


@dataclass
class FinetuneConfig:
    """Detector-head training used by region evaluation."""
    steps: int = 300
    lr: float = 0.05
    momentum: float = 0.9
    backbone_lr_mult: float = 0.1
    freeze_backbone: bool = True
    n_tasks: int = 64
    seed: int = 1000


@dataclass
class RegionEvalConfig:
    n_tasks: int = 50
    k: int = 3
    seed: int = 5_000_000
    samples: int = 2
    bins: int = 7
    use_detector: bool = True


@dataclass
class RunSection:
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    freeze_backbone: bool = False
    freeze_temperature: bool = False
    tau_init: float = 0.07
    pe_std: float = 0.1
    novel_fraction: float = 0.2
    split_seed: int = 0
    eval_pairs: int = 100
    eval_seed: int = 9_000_000
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("run.batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("run.steps must be >= 0")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    vit: VitConfig = field(default_factory=VitConfig)
    text: TextConfig = field(default_factory=TextConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    cpe: CpeConfig | None = None
    score: ScoreConfig = field(default_factory=ScoreConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    region: RegionEvalConfig = field(default_factory=RegionEvalConfig)

    def __post_init__(self):
        if self.cpe is None:
            self.cpe = desk_cpe_config(self.vit)

    def replace(self, **sections):
        """Copy with whole sections or ``section__key`` fields replaced."""
        new = dataclasses.replace(self)
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                setattr(new, sec, dataclasses.replace(getattr(new, sec), **{name: value}))
            else:
                setattr(new, key, value)
        return new


SECTIONS = {
    "run": RunSection, "vit": VitConfig, "text": TextConfig, "loss": LossConfig,
    "cpe": CpeConfig, "score": ScoreConfig, "optim": OptimConfig,
    "finetune": FinetuneConfig, "region": RegionEvalConfig,
}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    overrides: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        overrides.setdefault(section, {})[name] = (value, lineno)

    values = {}
    for section, cls in SECTIONS.items():
        current = getattr(base, section)
        known = {f.name: getattr(current, f.name) for f in fields(cls)}
        for name, (raw, lineno) in overrides.get(section, {}).items():
            if name not in known:
                raise ConfigError(f"line {lineno}: unknown key {section}.{name}")
            known[name] = _coerce(raw, known[name], f"{section}.{name}")
        try:
            values[section] = cls(**known)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section {section}: {exc}") from None
    if "cpe" not in overrides and (values["vit"].grid != base.vit.grid):
        values["cpe"] = desk_cpe_config(values["vit"])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
