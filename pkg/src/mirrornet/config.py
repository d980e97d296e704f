"""Run configuration: sectioned ``key = value`` text with strict keys.

Sections map onto dataclasses. Values are typed by the field defaults:
ints, floats, ``true``/``false``, comma-separated tuples, ``none`` for an
unset optional, and bare strings. Serialization is canonical, so
``parse(serialize(parse(text))) == parse(text)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .crf import CrfParams
from .dataset import SyntheticConfig
from .network import ConfigError, NetworkConfig
from .optim import OptimConfig

SEED_ENV = "MIRRORNET_SEED"

ABLATIONS = ("full", "bce_loss", "ccfe_no_contrast", "1B4C", "4B1C", "no_ccfe")
LOSS_KINDS = ("lovasz", "bce")


@dataclass
class RunSection:
    mode: str = "full"
    seed: int | None = None  # None: take MIRRORNET_SEED, else 0
    data_dir: str = "data"
    checkpoint: str = "mirrornet.ckpt"
    log: str = ""  # empty: log to stdout only


@dataclass
class TrainSection:
    loss: str = "lovasz"
    bce_warmup: int = 30  # epochs of BCE before switching to ``loss``
    augment: bool = True
    target_iou: float | None = None
    eval_every: int = 1
    threshold: float = 0.5


@dataclass
class DataSection:
    n_samples: int = 20
    test_fraction: float = 0.25
    area_bins: int = 10
    area_range: tuple = (0.05, 0.5)
    shapes: tuple = ("rect", "ellipse")
    frame_styles: int = 3
    frame_width: int = 1
    brightness_shift: tuple = (10, 30)
    noise: float = 6.0


# NetworkConfig.seed is driven by [run] seed, so it is not a config key.
_NETWORK_SKIP = {"seed"}
SECTIONS = {
    "run": RunSection,
    "network": NetworkConfig,
    "optim": OptimConfig,
    "train": TrainSection,
    "crf": CrfParams,
    "data": DataSection,
}
_OPTIONAL = {("run", "seed"), ("train", "target_iou")}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    # from-scratch desk runs need a larger step than the pretrained-backbone default
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(base_lr=0.01))
    train: TrainSection = field(default_factory=TrainSection)
    crf: CrfParams = field(default_factory=CrfParams)
    data: DataSection = field(default_factory=DataSection)

    def seed(self, override: int | None = None) -> int:
        """Flag beats config file beats environment beats 0."""
        if override is not None:
            return int(override)
        if self.run.seed is not None:
            return self.run.seed
        env = os.environ.get(SEED_ENV)
        if env is None or env == "":
            return 0
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None

    def network_config(self, seed: int = 0) -> NetworkConfig:
        """NetworkConfig with the ablation mode applied."""
        mode = self.run.mode
        net = replace(self.network, seed=seed)
        if mode == "bce_loss" or mode == "no_ccfe":
            net.use_ccfe = False
        elif mode == "ccfe_no_contrast":
            net.contrast = False
        elif mode == "1B4C":
            net.ccfe_blocks, net.ccfe_scales = 1, 4
        elif mode == "4B1C":
            net.ccfe_blocks, net.ccfe_scales = 4, 1
        return net

    def loss_kind(self) -> str:
        return "bce" if self.run.mode == "bce_loss" else self.train.loss

    def synthetic_config(self) -> SyntheticConfig:
        d = self.data
        return SyntheticConfig(d.area_range, d.shapes, d.frame_styles, d.frame_width,
                               d.brightness_shift, d.noise)

    def validate(self) -> None:
        if self.run.mode not in ABLATIONS:
            raise ConfigError(f"mode must be one of {', '.join(ABLATIONS)}, got {self.run.mode!r}")
        if self.train.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {', '.join(LOSS_KINDS)}, got {self.train.loss!r}")
        if not 0.0 < self.train.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.train.bce_warmup < 0:
            raise ConfigError("bce_warmup must be non-negative")
        if self.train.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")
        if not 0.0 < self.data.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        lo, hi = self.data.area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError("area_range must satisfy 0 < min <= max < 1")
        self.network_config().validate()
        for part in (self.optim, self.crf):
            try:
                part.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None


def _keys(section: str, cls) -> list:
    return [f for f in fields(cls) if not (section == "network" and f.name in _NETWORK_SKIP)]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(text: str, like, where: str):
    if isinstance(like, bool):
        if text not in ("true", "false"):
            raise ConfigError(f"{where}: expected true or false, got {text!r}")
        return text == "true"
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {type(like).__name__}") from None
    return text


def _parse_value(text: str, default, where: str, optional: bool, kind):
    if optional and text == "none":
        return None
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ConfigError(f"{where}: empty list")
        return tuple(_parse_scalar(t, default[0], where) for t in items)
    if default is None:
        default = kind()
    return _parse_scalar(text, default, where)


# optional fields default to None, so their scalar type is recorded here
_OPTIONAL_TYPES = {("run", "seed"): int, ("train", "target_iou"): float}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read config text over ``base`` (defaults if omitted). Unknown keys raise."""
    cfg = base if base is not None else RunConfig()
    values = {name: {} for name in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        known = {f.name for f in _keys(section, SECTIONS[section])}
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}]")
        values[section][key] = value
    out = {}
    for name, cls in SECTIONS.items():
        current = getattr(cfg, name)
        kwargs = {}
        for f in fields(cls):
            default = getattr(current, f.name)
            if f.name in values[name]:
                where = f"[{name}] {f.name}"
                opt = (name, f.name) in _OPTIONAL
                kwargs[f.name] = _parse_value(values[name][f.name], default, where, opt,
                                              _OPTIONAL_TYPES.get((name, f.name)))
            else:
                kwargs[f.name] = default
        out[name] = cls(**kwargs)
    return RunConfig(**out)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        part = getattr(cfg, name)
        for f in _keys(name, cls):
            lines.append(f"{f.name} = {_format(getattr(part, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def describe_keys() -> str:
    """Every section and key with its default, for ``--help``."""
    return serialize_config(RunConfig())
