"""Backbone registry, model configuration and the ``key = value`` config format."""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Dict, Tuple

VARIANTS = ("A", "B", "C")
UPSAMPLE_MODES = ("bilinear", "nearest")
CONFIG_KEYS = ("backbone", "stem", "up", "seg", "stride1", "mode", "classes",
               "input_h", "input_w")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class BackboneConfig:
    """Residual backbone layout.

    For bottleneck blocks ``stage_channels`` holds the expanded output width;
    the inner 3x3 convolution runs at a quarter of it. ``stage_strides`` of a
    4-stage backbone carries the default first-stage stride, which a
    ModelConfig overrides.
    """

    name: str
    block_type: str
    num_blocks: Tuple[int, ...]
    stage_channels: Tuple[int, ...]
    stage_strides: Tuple[int, ...]
    display_name: str = ""

    def __post_init__(self):
        for attr in ("num_blocks", "stage_channels", "stage_strides"):
            object.__setattr__(self, attr, tuple(int(v) for v in getattr(self, attr)))
        if self.block_type not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block type {self.block_type!r}")
        n = len(self.num_blocks)
        if n not in (3, 4):
            raise ConfigError(f"backbone must have 3 or 4 stages, got {n}")
        if len(self.stage_channels) != n or len(self.stage_strides) != n:
            raise ConfigError("num_blocks, stage_channels and stage_strides must have equal length")
        if min(self.num_blocks + self.stage_channels + self.stage_strides) < 1:
            raise ConfigError("backbone entries must be positive")
        if self.block_type == "bottleneck" and any(c % 4 for c in self.stage_channels):
            raise ConfigError("bottleneck stage channels must be divisible by 4")

    @property
    def num_stages(self) -> int:
        return len(self.num_blocks)


def normalize_name(name: str) -> str:
    return re.sub(r"[\s_\-]+", "", name).lower()


def _row(display, block, blocks, channels, strides):
    return BackboneConfig(normalize_name(display), block, blocks, channels, strides, display)


_WIDE = (64, 128, 256, 512)
_SLIM = (64, 128, 192, 320)
_BOTTLE = (256, 512, 1024, 2048)
_FOUR = (1, 2, 2, 2)
_THREE = (2, 2, 2)

BACKBONES: Dict[str, BackboneConfig] = {b.name: b for b in (
    _row("ResNet 150", "basic", (16, 18, 28, 12), _WIDE, _FOUR),
    _row("ResNet 134", "basic", (8, 18, 28, 12), _WIDE, _FOUR),
    _row("ResNet 101", "bottleneck", (3, 4, 23, 3), _BOTTLE, _FOUR),
    _row("ResNet 86", "basic", (8, 12, 16, 6), _WIDE, _FOUR),
    _row("ResNet 56", "basic", (4, 8, 12, 3), _WIDE, _FOUR),
    _row("ResNet 50", "bottleneck", (3, 4, 6, 3), _BOTTLE, _FOUR),
    _row("ResNet 34", "basic", (3, 4, 6, 3), _WIDE, _FOUR),
    _row("ResNet 18", "basic", (2, 2, 2, 2), _WIDE, _FOUR),
    _row("ResNet 150 S", "basic", (16, 18, 28, 12), _SLIM, _FOUR),
    _row("ResNet 86 S", "basic", (8, 12, 16, 6), _SLIM, _FOUR),
    _row("ResNet 78 S", "basic", (6, 12, 12, 8), _SLIM, _FOUR),
    _row("ResNet 54 S", "basic", (5, 8, 8, 5), _SLIM, _FOUR),
    _row("ResNet 40 S", "basic", (4, 5, 6, 4), _SLIM, _FOUR),
    _row("ResNet 30 S", "basic", (3, 4, 4, 3), _SLIM, _FOUR),
    _row("ResNet 22 S", "basic", (2, 3, 3, 2), _SLIM, _FOUR),
    _row("ResNet 122 N", "basic", (16, 24, 20), (96, 160, 320), _THREE),
    _row("ResNet 74 N", "basic", (8, 12, 16), (96, 160, 320), _THREE),
    _row("ResNet 46 N", "basic", (6, 8, 8), (96, 160, 320), _THREE),
    _row("ResNet 122 NS", "basic", (16, 24, 20), (64, 128, 256), _THREE),
    _row("ResNet 74 NS", "basic", (8, 12, 16), (64, 128, 256), _THREE),
    _row("ResNet 46 NS", "basic", (6, 8, 8), (64, 128, 256), _THREE),
)}


def get_backbone(name: str) -> BackboneConfig:
    try:
        return BACKBONES[normalize_name(name)]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    stem: str = "A"
    up: str = "A"
    seg: str = "A"
    first_stage_stride: int = 1
    upsample_mode: str = "bilinear"
    num_classes: int = 19
    input_hw: Tuple[int, int] = (1024, 2048)

    def __post_init__(self):
        if isinstance(self.backbone, str):
            object.__setattr__(self, "backbone", get_backbone(self.backbone))
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        for label in ("stem", "up", "seg"):
            v = getattr(self, label)
            if v not in VARIANTS:
                raise ConfigError(f"{label} variant must be one of A/B/C, got {v!r}")
        if self.first_stage_stride not in (1, 2):
            raise ConfigError(f"stride1 must be 1 or 2, got {self.first_stage_stride}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"mode must be bilinear or nearest, got {self.upsample_mode!r}")
        if self.num_classes < 1:
            raise ConfigError("classes must be >= 1")
        if len(self.input_hw) != 2 or min(self.input_hw) < 1:
            raise ConfigError(f"invalid input size {self.input_hw}")
        if self.backbone.num_stages == 3 and self.stem != "C":
            raise ConfigError(
                f"3-stage backbone {self.backbone.name} requires stem C, got {self.stem}")

    @property
    def variants(self) -> str:
        return f"{self.stem}-{self.up}-{self.seg}"

    @property
    def name(self) -> str:
        label = self.backbone.display_name or self.backbone.name
        return f"{label} {self.variants}"

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _int(value: str, key: str, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}", line) from None


_PAIR = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([^\s=#]+)\s*")


def parse_config(text: str) -> ModelConfig:
    """Parse the line-oriented config format.

    Lines hold one or more ``key = value`` pairs; ``#`` starts a comment.
    Unknown or repeated keys are errors reported with their line number.
    """
    values: Dict[str, Tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        pos = 0
        while pos < len(line):
            m = _PAIR.match(line, pos)
            if not m or m.end() == pos:
                raise ConfigError(f"expected 'key = value', got {line[pos:]!r}", lineno)
            key, value = m.group(1), m.group(2)
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown key {key!r}", lineno)
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", lineno)
            values[key] = (value, lineno)
            pos = m.end()
    if "backbone" not in values:
        raise ConfigError("missing required key 'backbone'")

    def get(key, default):
        return values[key] if key in values else (default, None)

    name, line = values["backbone"]
    try:
        backbone = get_backbone(name)
    except ConfigError as exc:
        raise ConfigError(str(exc), line) from None
    three_stage = backbone.num_stages == 3
    kwargs = {"backbone": backbone}
    for key in ("stem", "up", "seg"):
        default = "C" if (key == "stem" and three_stage) else "A"
        v, _ = get(key, default)
        kwargs[key] = v.upper()
    v, line = get("stride1", "1")
    kwargs["first_stage_stride"] = _int(v, "stride1", line)
    v, _ = get("mode", "bilinear")
    kwargs["upsample_mode"] = v.lower()
    v, line = get("classes", "19")
    kwargs["num_classes"] = _int(v, "classes", line)
    vh, lh = get("input_h", "1024")
    vw, lw = get("input_w", "2048")
    kwargs["input_hw"] = (_int(vh, "input_h", lh), _int(vw, "input_w", lw))
    try:
        return ModelConfig(**kwargs)
    except ConfigError as exc:
        keys = ("stem", "seg", "stride1", "mode", "classes", "up")
        line = next((values[k][1] for k in keys if k in values and k in str(exc)), None)
        raise ConfigError(str(exc), line) from None


def render_config(cfg: ModelConfig) -> str:
    """Canonical text form; ``parse_config(render_config(c)) == c``."""
    lines = [
        f"backbone = {cfg.backbone.name}",
        f"stem = {cfg.stem}",
        f"up = {cfg.up}",
        f"seg = {cfg.seg}",
        f"stride1 = {cfg.first_stage_stride}",
        f"mode = {cfg.upsample_mode}",
        f"classes = {cfg.num_classes}",
        f"input_h = {cfg.input_hw[0]}",
        f"input_w = {cfg.input_hw[1]}",
    ]
    return "\n".join(lines) + "\n"


def normalize_config_text(text: str) -> str:
    return render_config(parse_config(text))


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
