"""
FFNet graph construction: stem -> residual backbone -> Up-head -> Seg-head.

Layouts of the stem and head variants:

    Stem A  7x7/2 c64, maxpool 3x3/2
    Stem B  3x3/2 c32, 3x3/1 c48, 3x3/2 c64
    Stem C  3x3/2 c32, 3x3/2 c64, 3x3/1 c64
    Up-head width     A=256  B=128  C=64
    Seg-head width    A=256  B=128  C=64

All convolutions except the classifier are followed by batch norm, and all
batch norms except those closing a residual branch, a skip projection or an
Up-head lateral are followed by relu.
"""
from __future__ import annotations

from typing import List, Sequence

from .config import BackboneConfig, ModelConfig
from .graph import GraphBuilder, GraphError, LayerGraph

STEM_CHANNELS = 64
UP_WIDTHS = {"A": 256, "B": 128, "C": 64}
SEG_WIDTHS = {"A": 256, "B": 128, "C": 64}

_STEM_LAYOUTS = {
    "B": ((32, 2), (48, 1), (64, 2)),
    "C": ((32, 2), (64, 2), (64, 1)),
}


def build_stem(g: GraphBuilder, variant: str, x: str, prefix: str = "stem") -> str:
    """Reduce the input to 1/4 resolution with STEM_CHANNELS output channels."""
    if variant == "A":
        y = g.conv_bn(f"{prefix}.layer1", x, STEM_CHANNELS, 7, stride=2)
        return g.maxpool(f"{prefix}.pool", y, 3, 2, 1)
    try:
        layout = _STEM_LAYOUTS[variant]
    except KeyError:
        raise GraphError(f"unknown stem variant {variant!r}") from None
    y = x
    for i, (cout, stride) in enumerate(layout, start=1):
        y = g.conv_bn(f"{prefix}.layer{i}", y, cout, 3, stride=stride)
    return y


def basic_block(g: GraphBuilder, name: str, x: str, cout: int, stride: int) -> str:
    y = g.conv_bn(f"{name}.conv1", x, cout, 3, stride)
    y = g.conv_bn(f"{name}.conv2", y, cout, 3, 1, act=False)
    skip = _skip(g, name, x, cout, stride)
    return g.relu(f"{name}.relu", g.add(f"{name}.add", y, skip))


def bottleneck_block(g: GraphBuilder, name: str, x: str, cout: int, stride: int) -> str:
    inner = cout // 4
    y = g.conv_bn(f"{name}.conv1", x, inner, 1)
    y = g.conv_bn(f"{name}.conv2", y, inner, 3, stride)
    y = g.conv_bn(f"{name}.conv3", y, cout, 1, act=False)
    skip = _skip(g, name, x, cout, stride)
    return g.relu(f"{name}.relu", g.add(f"{name}.add", y, skip))


def _skip(g: GraphBuilder, name: str, x: str, cout: int, stride: int) -> str:
    if stride == 1 and g.channels[x] == cout:
        return x
    return g.conv_bn(f"{name}.downsample", x, cout, 1, stride, act=False)


BLOCKS = {"basic": basic_block, "bottleneck": bottleneck_block}


def stage_strides(cfg: BackboneConfig, first_stage_stride: int = 1) -> List[int]:
    strides = list(cfg.stage_strides)
    if cfg.num_stages == 4:
        strides[0] = first_stage_stride
    return strides


def build_backbone(g: GraphBuilder, cfg: BackboneConfig, x: str,
                   first_stage_stride: int = 1, max_blocks: int | None = None) -> List[str]:
    """Append the residual stages and return the per-stage output ids.

    ``max_blocks`` truncates the backbone after that many blocks in total;
    stages that receive no blocks are omitted from the result.
    """
    block = BLOCKS[cfg.block_type]
    taps = []
    built = 0
    for s, (n, cout, stride) in enumerate(
            zip(cfg.num_blocks, cfg.stage_channels, stage_strides(cfg, first_stage_stride)), 1):
        for b in range(n):
            if max_blocks is not None and built >= max_blocks:
                return taps
            x = block(g, f"layer{s}.{b}", x, cout, stride if b == 0 else 1)
            built += 1
        taps.append(x)
    return taps


def build_up_head(g: GraphBuilder, taps_coarse_to_fine: Sequence[str], variant: str,
                  mode: str, prefix: str = "up") -> List[str]:
    """FPN-style top-down decoder; returns smoothed features coarse-to-fine."""
    if len(taps_coarse_to_fine) != 4:
        raise GraphError(f"Up-head needs 4 taps, got {len(taps_coarse_to_fine)}")
    width = UP_WIDTHS[variant]
    outputs = []
    merged = None
    for level, tap in zip(range(3, -1, -1), taps_coarse_to_fine):
        lateral = g.conv_bn(f"{prefix}.lateral{level}", tap, width, 1, act=False)
        if merged is None:
            merged = lateral
        else:
            up = g.upsample(f"{prefix}.upsample{level}", merged, 2, mode)
            merged = g.add(f"{prefix}.merge{level}", lateral, up)
        outputs.append(g.conv_bn(f"{prefix}.smooth{level}", merged, width, 3))
    return outputs


def build_seg_head(g: GraphBuilder, pyramid_fine_to_coarse: Sequence[str], variant: str,
                   num_classes: int, mode: str, prefix: str = "seg") -> str:
    """Fuse all pyramid levels at the finest resolution and classify."""
    widths = {g.channels[p] for p in pyramid_fine_to_coarse}
    if len(widths) != 1:
        raise GraphError(f"Seg-head inputs must share one width, got {sorted(widths)}")
    feats = [pyramid_fine_to_coarse[0]]
    for level, p in enumerate(pyramid_fine_to_coarse[1:], start=1):
        feats.append(g.upsample(f"{prefix}.upsample{level}", p, 2 ** level, mode))
    fused = g.concat(f"{prefix}.concat", feats)
    y = g.conv_bn(f"{prefix}.fuse", fused, SEG_WIDTHS[variant], 3)
    return g.conv(f"{prefix}.classifier", y, num_classes, 1, bias=True)


def build_model(cfg: ModelConfig) -> LayerGraph:
    g = GraphBuilder(cfg.name)
    stem = build_stem(g, cfg.stem, g.input)
    stages = build_backbone(g, cfg.backbone, stem, cfg.first_stage_stride)
    if cfg.backbone.num_stages == 3:
        taps = [("stem", stem)] + [(f"layer{i}", t) for i, t in enumerate(stages, 1)]
    else:
        taps = [(f"layer{i}", t) for i, t in enumerate(stages, 1)]
    pyramid = build_up_head(g, [t for _, t in reversed(taps)], cfg.up, cfg.upsample_mode)
    pyramid = pyramid[::-1]
    logits = build_seg_head(g, pyramid, cfg.seg, cfg.num_classes, cfg.upsample_mode)
    return g.finish(logits, taps=taps, pyramid=pyramid)


def stem_graph(variant: str, in_channels: int = 3) -> LayerGraph:
    g = GraphBuilder(f"stem {variant}", in_channels)
    return g.finish(build_stem(g, variant, g.input))


def backbone_graph(cfg: ModelConfig, max_blocks: int | None = None) -> LayerGraph:
    """Stem plus (optionally truncated) backbone, with each stage output as a tap."""
    g = GraphBuilder(f"{cfg.backbone.name} backbone", 3)
    stem = build_stem(g, cfg.stem, g.input)
    stages = build_backbone(g, cfg.backbone, stem, cfg.first_stage_stride, max_blocks)
    taps = [("stem", stem)] + [(f"layer{i}", t) for i, t in enumerate(stages, 1)]
    last = g.nodes[-1].id
    return g.finish(last, taps=taps)
