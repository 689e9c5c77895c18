import re
from collections import defaultdict

import numpy as np
import pytest

from ffnet import (GraphBuilder, ModelConfig, backbone_graph, build_model, build_seg_head,
                   build_up_head, count_params, infer_shapes, init_random, stem_graph)
from ffnet.graph import GraphError, LayerGraph, Node
from ffnet.kernels import ShapeError
from ffnet.runtime import execute

import reference_models as ref

FULL = (1, 3, 1024, 2048)


@pytest.mark.parametrize("variant", ["A", "B", "C"])
def test_stem_quarter_resolution(variant):
    g = stem_graph(variant)
    assert infer_shapes(g, FULL)[g.output_id] == (1, 64, 256, 512)


def test_stem_c_layout():
    g = stem_graph("C")
    convs = [n for n in g.nodes if n.kind == "conv"]
    assert len(convs) == 3 and g.count("maxpool") == 0
    assert [c.params["kernel"] for c in convs] == [(3, 3)] * 3


def test_stem_b_params_closed_form():
    # 3x3 convs 3->32, 32->48, 48->64, each followed by BN (gamma, beta)
    conv = 3 * 32 * 9 + 32 * 48 * 9 + 48 * 64 * 9
    bn = 2 * (32 + 48 + 64)
    assert count_params(stem_graph("B")).params == conv + bn == 42624


def test_unknown_stem():
    with pytest.raises(GraphError):
        stem_graph("D")


def test_resnet18_stride2_taps():
    g = build_model(ModelConfig("resnet18", first_stage_stride=2))
    shapes = infer_shapes(g, FULL)
    dims = [shapes[t] for _, t in g.taps]
    assert [d[1] for d in dims] == [64, 128, 256, 512]
    assert [1024 // d[2] for d in dims] == [8, 16, 32, 64]
    assert [2048 // d[3] for d in dims] == [8, 16, 32, 64]


def test_resnet50_first_stage():
    g = build_model(ModelConfig("resnet50"))
    blocks = {m.group(1) for n in g.nodes if (m := re.match(r"(layer1\.\d+)\.", n.id))}
    assert len(blocks) == 3
    conv = g.node("layer1.0.conv2.conv").params
    assert conv["cout"] == 64 and conv["kernel"] == (3, 3)
    assert g.node("layer1.0.conv3.conv").params["cout"] == 256
    assert infer_shapes(g, FULL)[dict(g.taps)["layer1"]][1] == 256


def test_resnet46ns_three_stage_taps():
    g = build_model(ModelConfig("resnet46ns", "C", "B", "B"))
    shapes = infer_shapes(g, FULL)
    stage_taps = [t for name, t in g.taps if name != "stem"]
    assert [name for name, _ in g.taps] == ["stem", "layer1", "layer2", "layer3"]
    assert [shapes[t][1] for t in stage_taps] == [64, 128, 256]
    assert [1024 // shapes[t][2] for t in stage_taps] == [8, 16, 32]
    assert shapes[dict(g.taps)["stem"]][2:] == (256, 512)


@pytest.mark.parametrize("name", ["resnet18", "resnet50", "resnet22s", "resnet46n"])
def test_block_conv_counts(name):
    cfg = ModelConfig(name, stem="C")
    g = build_model(cfg)
    per_block = defaultdict(lambda: {1: 0, 3: 0})
    for n in g.nodes:
        m = re.match(r"(layer\d+\.\d+)\.(conv\d)\.conv$", n.id)
        if m:
            per_block[m.group(1)][n.params["kernel"][0]] += 1
    assert len(per_block) == sum(cfg.backbone.num_blocks)
    expected = {1: 0, 3: 2} if cfg.backbone.block_type == "basic" else {1: 2, 3: 1}
    assert all(v == expected for v in per_block.values())


def test_projection_skips_only_when_needed():
    g = build_model(ModelConfig("resnet18", first_stage_stride=1))
    ids = {n.id for n in g.nodes}
    # stage 1 keeps 64 channels at stride 1, so no projection
    assert "layer1.0.downsample.conv" not in ids
    assert {"layer2.0.downsample.conv", "layer3.0.downsample.conv",
            "layer4.0.downsample.conv"} <= ids
    assert "layer2.1.downsample.conv" not in ids
    g2 = build_model(ModelConfig("resnet18", first_stage_stride=2))
    assert g2.node("layer1.0.downsample.conv").params["stride"] == (2, 2)


def _head_graph(variant, mode, taps=(64, 128, 256, 512)):
    g = GraphBuilder("head", 3)
    x = g.input
    feats = []
    for i, c in enumerate(taps):
        x = g.conv(f"t{i}", x, c, 3, stride=2 if i else 1)
        feats.append(x)
    outs = build_up_head(g, feats[::-1], variant, mode)
    return g, outs


@pytest.mark.parametrize("variant,width", [("A", 256), ("B", 128), ("C", 64)])
def test_up_head_widths(variant, width):
    g, outs = _head_graph(variant, "bilinear")
    graph = g.finish(outs[-1])
    shapes = infer_shapes(graph, (1, 3, 64, 64))
    assert len(outs) == 4
    assert [shapes[o][1] for o in outs] == [width] * 4
    assert [shapes[o][2] for o in outs] == [8, 16, 32, 64]


def test_up_head_nearest_same_shapes():
    ga, oa = _head_graph("B", "bilinear")
    gn, on = _head_graph("B", "nearest")
    sa = infer_shapes(ga.finish(oa[-1]), (1, 3, 32, 32))
    sn = infer_shapes(gn.finish(on[-1]), (1, 3, 32, 32))
    assert [sa[o] for o in oa] == [sn[o] for o in on]


def test_up_head_needs_four_taps():
    g = GraphBuilder("x", 3)
    with pytest.raises(GraphError):
        build_up_head(g, [g.input] * 3, "A", "bilinear")


def test_seg_head_unequal_widths():
    g = GraphBuilder("x", 3)
    a = g.conv("a", g.input, 8, 1)
    b = g.conv("b", g.input, 16, 1)
    with pytest.raises(GraphError, match="width"):
        build_seg_head(g, [a, b, a, a], "A", 19, "bilinear")


@pytest.mark.parametrize("row", ref.ALL, ids=ref.row_id)
def test_published_output_resolution(row):
    cfg = ref.make_config(row)
    g = build_model(cfg)
    h, w = row[4]
    assert infer_shapes(g, (1, 3, h, w))[g.output_id] == (1, 19) + row[5]


def test_single_class_head():
    g = build_model(ModelConfig("resnet22s", "C", "C", "C", num_classes=1))
    assert infer_shapes(g, (1, 3, 256, 512))[g.output_id] == (1, 1, 64, 128)


def test_build_is_deterministic():
    cfg = ModelConfig("resnet34", "A", "B", "B")
    a, b = build_model(cfg), build_model(cfg)
    assert [n.id for n in a.nodes] == [n.id for n in b.nodes]
    assert list(a.weight_shapes().items()) == list(b.weight_shapes().items())
    assert a == b


def test_tap_counts():
    assert len(build_model(ModelConfig("resnet74n", "C")).taps) == 4
    g4 = build_model(ModelConfig("resnet34"))
    assert [n for n, _ in g4.taps] == ["layer1", "layer2", "layer3", "layer4"]
    assert len(g4.pyramid) == 4


def test_infer_shapes_matches_execution():
    g = build_model(ModelConfig("resnet18", "C", "C", "C", first_stage_stride=2))
    store = init_random(g, seed=1)
    dims = (1, 3, 64, 128)
    shapes = infer_shapes(g, dims)
    assert set(shapes) == {n.id for n in g.nodes}
    seen = {}
    x = np.random.default_rng(0).standard_normal(dims).astype(np.float32)
    execute(g, store, x, hook=lambda node, ins, out: seen.__setitem__(node.id, out.shape))
    assert all(seen[k] == shapes[k] for k in seen)
    assert len(seen) == len(g.nodes) - 1


def test_min_input_for_stride64_model():
    g = build_model(ModelConfig("resnet18", first_stage_stride=2))
    assert infer_shapes(g, (1, 3, 64, 128))[g.output_id] == (1, 19, 8, 16)
    with pytest.raises(ShapeError):
        infer_shapes(g, (1, 3, 32, 64))


def test_infer_shapes_rejects_bad_dims():
    g = stem_graph("A")
    with pytest.raises(ShapeError):
        infer_shapes(g, (1, 3, 0, 8))
    with pytest.raises(ShapeError):
        infer_shapes(g, (1, 1, 8, 8))


def test_layer_graph_validation():
    inp = Node("input", "input", params={"channels": 3})
    with pytest.raises(GraphError, match="before"):
        LayerGraph("g", (inp, Node("r", "relu", ("missing",))), "r")
    with pytest.raises(GraphError, match="duplicate"):
        LayerGraph("g", (inp, Node("r", "relu", ("input",)), Node("r", "relu", ("input",))), "r")
    with pytest.raises(GraphError, match="kind"):
        LayerGraph("g", (inp, Node("r", "softmax", ("input",))), "r")
    with pytest.raises(GraphError, match="unknown node"):
        LayerGraph("g", (inp,), "nope")


def test_backbone_graph_truncation():
    cfg = ModelConfig("resnet86")
    g = backbone_graph(cfg, max_blocks=10)
    assert [n for n, _ in g.taps] == ["stem", "layer1"]
    assert g.output_id == "layer2.1.relu"
