"""Flat ``key = value`` run configuration shared by all CLI commands.

Files are UTF-8 text; ``#`` starts a comment; unknown keys are errors. Every
key has a documented default, and the fully resolved configuration is echoed
into each run directory so results stay reproducible from their artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .dataio import SynthConfig
from .features import ConvConfig
from .model import ModelConfig
from .training import FIVE_SCALES, TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true/false, got {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _parse_sizes(text: str) -> tuple[tuple[int, int], ...] | None:
    text = text.strip()
    if not text:
        return None
    sizes = []
    for item in text.split(","):
        w, _, h = item.strip().partition("x")
        if not h:
            raise ConfigError(f"expected WxH, got {item!r}")
        sizes.append((int(w), int(h)))
    return tuple(sizes)


@dataclass(frozen=True)
class ConfigKey:
    default: Any
    parse: Callable[[str], Any]
    help: str


CONFIG_KEYS: dict[str, ConfigKey] = {
    # reproducibility / model
    "seed": ConfigKey(7, int, "master seed for all randomness"),
    "head": ConfigKey("contrastive_s", str, "baseline | additive | contrastive_a | contrastive_s"),
    "classes": ConfigKey(3, int, "number of object classes"),
    "grid_n": ConfigKey(6, int, "pooled grid side length"),
    "context_ratio": ConfigKey(1.8, float, "outer/inner side ratio for context and frame rings"),
    "min_proposal_side": ConfigKey(20.0, float, "proposals must be strictly larger than this"),
    "input_kind": ConfigKey("image", str, "image (runs the conv stack) | features (.cltf maps)"),
    "in_channels": ConfigKey(1, int, "image channels fed to the conv stack"),
    "conv_channels": ConfigKey((16, 32, 64, 64), _parse_ints, "conv stack output channels"),
    "conv_strides": ConfigKey((2, 2, 2, 1), _parse_ints, "conv stack strides (1 or 2 each)"),
    "feature_channels": ConfigKey(64, int, "feature-map channels when input_kind = features"),
    "feature_stride": ConfigKey(8, int, "feature-map stride when input_kind = features"),
    "trunk_dim": ConfigKey(256, int, "width of the two shared adaptation layers"),
    # training
    "epochs": ConfigKey(30, int, "training epochs"),
    "lr_initial": ConfigKey(1e-5, float, "learning rate for the first epochs"),
    "lr_reduced": ConfigKey(1e-6, float, "learning rate after lr_drop_epoch"),
    "lr_drop_epoch": ConfigKey(10, int, "last epoch trained at lr_initial"),
    "lr_scale": ConfigKey(1.0, float, "global factor on both learning rates (desk runs)"),
    "momentum": ConfigKey(0.9, float, "SGD momentum"),
    "dampening": ConfigKey(0.0, float, "SGD dampening"),
    "jitter_scales": ConfigKey(FIVE_SCALES, _parse_floats, "training rescale factors"),
    "jitter_sizes": ConfigKey(None, _parse_sizes, "absolute WxH rescale targets (overrides factors)"),
    "flip_prob": ConfigKey(0.5, float, "probability of a horizontal flip per step"),
    "checkpoint_every": ConfigKey(0, int, "epochs between extra checkpoints (0 = final only)"),
    "train_manifest": ConfigKey("", str, "manifest used by `train` unless --manifest is given"),
    # detection / evaluation
    "eval_scales": ConfigKey((), _parse_floats, "test-time scales (empty = jitter_scales)"),
    "eval_flips": ConfigKey(True, _parse_bool, "average over horizontal flips at test time"),
    "score_min": ConfigKey(1e-4, float, "minimum detection score before NMS"),
    "nms_iou": ConfigKey(0.4, float, "NMS overlap threshold"),
    "ap_mode": ConfigKey("continuous", str, "continuous | eleven_point"),
    "ap_iou": ConfigKey(0.5, float, "IoU threshold for detection AP"),
    "corloc_iou": ConfigKey(0.5, float, "IoU threshold for CorLoc"),
    # synthetic corpus
    "synth_image_size": ConfigKey(128, int, "side length of generated images"),
    "synth_train_images": ConfigKey(200, int, "training images to generate"),
    "synth_test_images": ConfigKey(100, int, "test images to generate"),
    "synth_objects_min": ConfigKey(1, int, "minimum objects per image"),
    "synth_objects_max": ConfigKey(2, int, "maximum objects per image"),
    "synth_parts": ConfigKey(True, _parse_bool, "draw a discriminative part on each object"),
    "synth_noise": ConfigKey(0.05, float, "background noise sigma"),
    "synth_proposals_per_gt": ConfigKey(8, int, "jittered proposals per ground-truth box"),
    "synth_random_proposals": ConfigKey(8, int, "random proposals per image"),
    "synth_grid_sizes": ConfigKey((26, 48, 88), _parse_ints, "sliding-window proposal sizes"),
}


def parse_config_file(path) -> dict[str, Any]:
    values: dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = CONFIG_KEYS[key].parse(value.strip())
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from None
    return values


def resolve_config(path=None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Defaults, then file values, then explicit overrides."""
    cfg = {key: ck.default for key, ck in CONFIG_KEYS.items()}
    if path is not None:
        cfg.update(parse_config_file(path))
    if overrides:
        for key in overrides:
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
        cfg.update(overrides)
    return cfg


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        parts = []
        for v in value:
            if isinstance(v, tuple):  # WxH size pair
                parts.append(f"{v[0]}x{v[1]}")
            else:
                parts.append(_format_value(v))
        return ",".join(parts)
    return str(value)


def format_config(cfg: dict[str, Any]) -> str:
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def write_effective_config(cfg: dict[str, Any], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.txt"
    path.write_text(format_config(cfg), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Builders wiring the flat config into module dataclasses
# ---------------------------------------------------------------------------


def model_config_from(cfg: dict[str, Any]) -> ModelConfig:
    if cfg["input_kind"] == "image":
        conv = ConvConfig(
            in_channels=cfg["in_channels"],
            channels=tuple(cfg["conv_channels"]),
            strides=tuple(cfg["conv_strides"]),
        )
        feature_channels = conv.out_channels
        feature_stride = conv.total_stride
    elif cfg["input_kind"] == "features":
        conv = None
        feature_channels = cfg["feature_channels"]
        feature_stride = cfg["feature_stride"]
    else:
        raise ConfigError(f"input_kind must be image or features, got {cfg['input_kind']!r}")
    return ModelConfig(
        num_classes=cfg["classes"],
        head=cfg["head"],
        grid_n=cfg["grid_n"],
        context_ratio=cfg["context_ratio"],
        trunk_dim=cfg["trunk_dim"],
        feature_channels=feature_channels,
        feature_stride=feature_stride,
        conv=conv,
    )


def train_config_from(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        lr_initial=cfg["lr_initial"],
        lr_reduced=cfg["lr_reduced"],
        lr_drop_epoch=cfg["lr_drop_epoch"],
        lr_scale=cfg["lr_scale"],
        momentum=cfg["momentum"],
        dampening=cfg["dampening"],
        jitter_scales=tuple(cfg["jitter_scales"]),
        jitter_sizes=cfg["jitter_sizes"],
        flip_prob=cfg["flip_prob"],
        min_proposal_side=cfg["min_proposal_side"],
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
    )


def synth_config_from(cfg: dict[str, Any]) -> SynthConfig:
    return SynthConfig(
        image_size=cfg["synth_image_size"],
        num_classes=cfg["classes"],
        train_images=cfg["synth_train_images"],
        test_images=cfg["synth_test_images"],
        objects_min=cfg["synth_objects_min"],
        objects_max=cfg["synth_objects_max"],
        with_parts=cfg["synth_parts"],
        noise=cfg["synth_noise"],
        proposals_per_gt=cfg["synth_proposals_per_gt"],
        random_proposals=cfg["synth_random_proposals"],
        grid_sizes=tuple(cfg["synth_grid_sizes"]),
        seed=cfg["seed"],
    )


def eval_scales_from(cfg: dict[str, Any]) -> tuple[float, ...]:
    return tuple(cfg["eval_scales"]) or tuple(cfg["jitter_scales"])
