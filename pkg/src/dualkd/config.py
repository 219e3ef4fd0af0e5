"""Experiment configuration.

Nested dataclasses serialize to a flat ``key = value`` text format with
dotted section keys (``optimizer.lr_encoder = 0.001``).  Unknown keys are
errors, every default is overridable, and round trips are lossless: floats
are written with repr, tuples as comma lists, optional fields as ``none``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import get_args, get_origin, get_type_hints

from .data import DatasetSpec
from .errors import ConfigError
from .nets import MID_LAYER_RANGE, BottleneckConfig, ViTConfig

SPLIT_MODES = ("single_class", "multi_class")

__all__ = ["LossConfig", "OptimizerConfig", "ExperimentConfig",
           "to_text", "from_text", "save_config", "load_config",
           "config_hash", "SPLIT_MODES"]


@dataclass
class LossConfig:
    """The four ablation toggles: which branch losses enter the objective,
    whether inference scores the last class token (vs the prefix mean), and
    whether branches fuse probabilistically or by plain sum."""

    use_encoder: bool = True
    use_decoder: bool = True
    use_last_token: bool = True
    use_noisy_or: bool = True


@dataclass
class OptimizerConfig:
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    max_second_moment: bool = True
    clamp_updates: bool = True


def _default_teacher():
    return ViTConfig(patch_size=8, embed_dim=16, mlp_ratio=2.0,
                     residual_scale=0.2, seed=0)


def _default_encoder():
    return ViTConfig(patch_size=8, embed_dim=16, mlp_ratio=2.0,
                     residual_scale=0.2, seed=1)


def _default_decoder():
    return ViTConfig(patch_size=8, embed_dim=16, mlp_ratio=2.0,
                     residual_scale=0.2, depth=8, has_class_token=False,
                     seed=2)


@dataclass
class ExperimentConfig:
    teacher: ViTConfig = field(default_factory=_default_teacher)
    encoder: ViTConfig = field(default_factory=_default_encoder)
    decoder: ViTConfig = field(default_factory=_default_decoder)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split_mode: str = "multi_class"
    iterations: int = 2000
    batch_size: int = 8
    checkpoint_every: int = 500
    shots: int | None = None
    seed: int = 0
    out_dir: str = "runs/exp"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.loss.use_encoder or self.loss.use_decoder):
            raise ConfigError("at least one branch loss must be enabled")
        if self.split_mode not in SPLIT_MODES:
            raise ConfigError(f"split_mode must be one of {SPLIT_MODES}")
        t, e, d = self.teacher, self.encoder, self.decoder
        for name, net in (("teacher", t), ("encoder", e)):
            if not net.has_class_token:
                raise ConfigError(f"{name} needs a class token")
        if d.has_class_token:
            raise ConfigError("decoder must not carry a class token")
        if (t.image_size, t.patch_size, t.in_channels) != \
                (e.image_size, e.patch_size, e.in_channels) or \
                (t.image_size, t.patch_size) != (d.image_size, d.patch_size):
            raise ConfigError("teacher/encoder/decoder geometry must agree")
        if t.embed_dim != e.embed_dim or t.embed_dim != d.embed_dim:
            raise ConfigError("all three networks must share embed_dim")
        if t.depth != e.depth:
            raise ConfigError("encoder depth must equal teacher depth")
        if t.depth < MID_LAYER_RANGE[1]:
            raise ConfigError(
                f"teacher depth must be >= {MID_LAYER_RANGE[1]} to cover the "
                "fused mid-layer range")
        if t == e:
            # identical init would give a student with zero loss everywhere,
            # i.e. no discrepancy signal on anomalies either
            raise ConfigError("encoder must not share the teacher's init seed")
        if d.depth != 8:
            raise ConfigError("decoder depth must be 8 (two groups of four)")
        if self.dataset.kind != "folder":
            if self.dataset.image_size != t.image_size:
                raise ConfigError("dataset image_size must match the networks")
            if self.dataset.channels != t.in_channels:
                raise ConfigError("dataset channels must match the networks")
        elif self.dataset.root is None:
            raise ConfigError("folder datasets need dataset.root")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        if self.shots is not None and self.shots < 1:
            raise ConfigError("shots must be positive when set")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")


# -- flat text format ---------------------------------------------------------


def _leaf_to_str(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, tuple):
        return ",".join(_leaf_to_str(v) for v in value)
    if isinstance(value, str):
        if "\n" in value or "=" in value:
            raise ConfigError(f"unserializable string value {value!r}")
        return value
    raise ConfigError(f"unserializable config value {value!r}")


def _flatten(obj, prefix=""):
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            yield from _flatten(value, key + ".")
        else:
            yield key, _leaf_to_str(value)


def to_text(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {v}" for k, v in _flatten(cfg)]
    return "\n".join(lines) + "\n"


def _strip_optional(tp):
    args = [a for a in get_args(tp) if a is not type(None)]
    if len(args) != 1:
        raise ConfigError(f"unsupported union annotation {tp}")
    return args[0], True


def _coerce(raw: str, tp, key: str):
    if get_origin(tp) is None and get_args(tp) == ():
        optional = False
    else:
        origin = get_origin(tp)
        if origin is tuple:
            args = get_args(tp)
            elem = args[0]
            parts = [] if raw.strip() in ("", "()") else raw.split(",")
            values = tuple(_coerce(p.strip(), elem, key) for p in parts)
            if Ellipsis not in args and len(values) != len(args):
                raise ConfigError(
                    f"{key}: expected {len(args)} values, got {len(values)}")
            return values
        tp, optional = _strip_optional(tp)
        if optional and raw.strip() == "none":
            return None
        return _coerce(raw, tp, key)
    if tp is bool:
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}") from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}") from None
    if tp is str:
        return raw
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, flat: dict, prefix: str):
    hints = get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        tp = hints[f.name]
        if is_dataclass(tp):
            kwargs[f.name] = _build(tp, flat, key + ".")
        else:
            kwargs[f.name] = _coerce(flat.pop(key), tp, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def from_text(text: str) -> ExperimentConfig:
    flat = dict(_flatten(ExperimentConfig()))
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in flat:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        flat[key] = value.strip()
    cfg = _build(ExperimentConfig, flat, "")
    assert not flat, f"unconsumed keys {sorted(flat)}"
    return cfg


def save_config(cfg: ExperimentConfig, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(cfg))


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return from_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the experiment content; out_dir is excluded so the same run
    relocated to another directory keeps its identity."""
    text = "\n".join(line for line in to_text(cfg).splitlines()
                     if line.split(" = ")[0] != "out_dir")
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def with_loss_flags(cfg: ExperimentConfig, **flags) -> ExperimentConfig:
    """Copy with some ablation toggles changed (revalidates)."""
    return replace(cfg, loss=replace(cfg.loss, **flags))
