"""Flat ``key = value`` configuration with a typed registry of dotted keys.

Precedence is defaults, then the config file, then command-line overrides.
Unknown keys, unparsable values and constraint violations raise
:class:`~dualmae.errors.ConfigError` naming the key. Empty values for the
optional model/geometry keys mean "take it from ``model.preset``".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | bool | str | optint
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple[str, ...] = ()


def _pos(x) -> bool:
    return x > 0


def _nonneg(x) -> bool:
    return x >= 0


def _prob(x) -> bool:
    return 0.0 <= x <= 1.0


def _opt_pos(x) -> bool:
    return x is None or x > 0


REGISTRY: dict[str, Key] = {
    "seed": Key("int", 0, _nonneg, ">= 0"),
    # data
    "data.channels": Key("int", 3, _pos, "> 0"),
    "data.frames": Key("optint", None, _opt_pos, "> 0"),
    "data.height": Key("optint", None, _opt_pos, "> 0"),
    "data.width": Key("optint", None, _opt_pos, "> 0"),
    "data.classes": Key("int", 4, lambda x: 1 <= x <= 4, "in 1..4"),
    "data.per_class": Key("int", 32, _pos, "> 0"),
    "data.manifest": Key("str", ""),
    "data.frame_policy": Key("str", "random", choices=("first", "middle", "random")),
    "data.n_frames": Key("int", 1, _pos, "> 0"),
    "data.frame_augment": Key("bool", True),
    "data.normalize": Key("bool", False),
    "data.norm_mean": Key("float", 0.5),
    "data.norm_std": Key("float", 0.25, _pos, "> 0"),
    # tubelet / patch geometry
    "patch.t": Key("optint", None, _opt_pos, "> 0"),
    "patch.h": Key("optint", None, _opt_pos, "> 0"),
    "patch.w": Key("optint", None, _opt_pos, "> 0"),
    # augmentation of the second video view
    "aug.crop": Key("bool", True),
    "aug.crop_scale_min": Key("float", 0.5, lambda x: 0 < x <= 1, "in (0, 1]"),
    "aug.crop_scale_max": Key("float", 1.0, lambda x: 0 < x <= 1, "in (0, 1]"),
    "aug.flip": Key("bool", True),
    "aug.flip_p": Key("float", 0.5, _prob, "in [0, 1]"),
    "aug.color_jitter": Key("bool", True),
    "aug.jitter_p": Key("float", 0.8, _prob, "in [0, 1]"),
    "aug.brightness": Key("float", 0.3, _nonneg, ">= 0"),
    "aug.contrast": Key("float", 0.3, _nonneg, ">= 0"),
    "aug.erase": Key("bool", False),
    "aug.erase_p": Key("float", 0.25, _prob, "in [0, 1]"),
    "aug.rotation": Key("bool", True),
    "aug.max_degrees": Key("float", 10.0, _nonneg, ">= 0"),
    "aug.scaling": Key("bool", True),
    "aug.translation": Key("bool", True),
    "aug.max_translate": Key("float", 0.1, _nonneg, ">= 0"),
    "aug.temporal_downsample": Key("bool", False),
    # model
    "model.preset": Key("str", "toy", choices=("toy", "base")),
    "model.dim": Key("optint", None, _opt_pos, "> 0"),
    "model.depth": Key("optint", None, _opt_pos, "> 0"),
    "model.heads": Key("optint", None, _opt_pos, "> 0"),
    "model.proj_dim": Key("optint", None, _opt_pos, "> 0"),
    "model.dec_dim": Key("optint", None, _opt_pos, "> 0"),
    "model.dec_depth": Key("optint", None, _opt_pos, "> 0"),
    "model.dec_heads": Key("optint", None, _opt_pos, "> 0"),
    "model.embed_dim": Key("optint", None, _opt_pos, "> 0"),
    # masking
    "mask.video.strategy": Key("str", "random", choices=("random", "tube", "frame")),
    "mask.video.ratio": Key("float", 0.9, _prob, "in [0, 1]"),
    "mask.image.strategy": Key("str", "random", choices=("random", "tube", "frame")),
    "mask.image.ratio": Key("float", 0.75, _prob, "in [0, 1]"),
    "mask.share_across_views": Key("bool", False),
    # losses
    "loss.tau": Key("float", 0.1, _pos, "> 0"),
    "loss.lambda_c": Key("float", 1.0, _nonneg, ">= 0"),
    "loss.recon_masked_only": Key("bool", False),
    "loss.reduction": Key("str", "mean", choices=("mean",)),
    # optimisation
    "train.base_lr": Key("float", 0.032, _pos, "> 0"),
    "train.weight_decay": Key("float", 0.05, _nonneg, ">= 0"),
    "train.beta1": Key("float", 0.9, lambda x: 0 <= x < 1, "in [0, 1)"),
    "train.beta2": Key("float", 0.95, lambda x: 0 <= x < 1, "in [0, 1)"),
    "train.warmup_frac": Key("float", 0.05, _prob, "in [0, 1]"),
    "train.batch_size": Key("int", 8, _pos, "> 0"),
    "train.steps": Key("int", 200, _pos, "> 0"),
    "train.clip_grad": Key("float", 1.0, _nonneg, ">= 0 (0 disables)"),
    "train.freeze_image_branch": Key("bool", False),
    "train.checkpoint_every": Key("int", 0, _nonneg, ">= 0 (0: final only)"),
    # test-time adaptation
    "tta.steps": Key("int", 20, _nonneg, ">= 0"),
    "tta.lr": Key("float", 1e-4, _pos, "> 0"),
    "tta.scope": Key("str", "all", choices=("all", "encoder")),
    "tta.persist": Key("bool", False),
    # evaluation
    "probe.steps": Key("int", 300, _pos, "> 0"),
    "probe.lr": Key("float", 0.1, _pos, "> 0"),
    "probe.momentum": Key("float", 0.9, lambda x: 0 <= x < 1, "in [0, 1)"),
    "probe.weight_decay": Key("float", 0.0, _nonneg, ">= 0"),
    "probe.train_frac": Key("float", 0.5, lambda x: 0 < x < 1, "in (0, 1)"),
    "eval.mask_ratio": Key("float", 0.0, _prob, "in [0, 1]"),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def defaults() -> dict[str, Any]:
    return {k: spec.default for k, spec in REGISTRY.items()}


def parse_value(key: str, text: str) -> Any:
    if key not in REGISTRY:
        raise ConfigError("unknown config key", key)
    spec = REGISTRY[key]
    raw = text.strip()
    try:
        if spec.kind == "bool":
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "optint":
            return None if raw == "" else int(raw)
        if spec.kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {spec.kind}", key) from None


def validate(cfg: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for key, value in cfg.items():
        if key not in REGISTRY:
            raise ConfigError("unknown config key", key)
        spec = REGISTRY[key]
        if spec.choices and value not in spec.choices:
            raise ConfigError(f"{value!r} not one of {spec.choices}", key)
        if spec.check is not None and not spec.check(value):
            raise ConfigError(f"value {value!r} violates constraint {spec.rule}", key)
        out[key] = value
    if out.get("aug.crop_scale_min", 0) > out.get("aug.crop_scale_max", 1):
        raise ConfigError("must not exceed aug.crop_scale_max", "aug.crop_scale_min")
    return out


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Defaults, then ``path`` (if given), then ``overrides``; later sources win."""
    cfg = defaults()
    if path is not None:
        cfg.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        cfg[key] = parse_value(key, value) if isinstance(value, str) and REGISTRY.get(key, Key("str", "")).kind != "str" else value
    return validate(cfg)


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: Mapping[str, Any]) -> str:
    return "".join(f"{key} = {_fmt(cfg[key])}\n" for key in REGISTRY if key in cfg)


__all__ = ["REGISTRY", "defaults", "dump_config", "load_config", "parse_text", "parse_value", "validate"]
