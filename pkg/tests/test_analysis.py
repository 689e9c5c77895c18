import numpy as np
import pytest

from ffnet import (GraphBuilder, ModelConfig, backbone_graph, build_model, count_flops,
                   count_params, fold_batchnorm, impulse_support_oracle, infer_shapes,
                   init_random, memory_traffic_estimate, profile, receptive_field,
                   receptive_fields, stem_graph)
from ffnet.analysis import ReceptiveFieldError
from ffnet.builder import basic_block, bottleneck_block


def chain(*layers, cin=1):
    """layers: (kind, k, s) tuples, built as a straight chain."""
    g = GraphBuilder("chain", cin)
    x = g.input
    for i, (kind, k, s) in enumerate(layers):
        if kind == "conv":
            x = g.conv(f"c{i}", x, 2, k, s)
        elif kind == "pool":
            x = g.maxpool(f"p{i}", x, k, s, k // 2)
        else:
            x = g.relu(f"r{i}", x)
    return g.finish(x)


def backbone_rf_oracle(name, stem_r, stem_j, stride1):
    """Hand recurrence: a basic block adds 2j (+2j after its stride), a bottleneck 2j."""
    from ffnet.config import get_backbone

    b = get_backbone(name)
    r, j = stem_r, stem_j
    strides = list(b.stage_strides)
    if b.num_stages == 4:
        strides[0] = stride1
    for n, s in zip(b.num_blocks, strides):
        for i in range(n):
            r += 2 * j
            j *= s if i == 0 else 1
            if b.block_type == "basic":
                r += 2 * j
    return r, j


# -- receptive field ---------------------------------------------------------

def test_single_conv():
    rf = receptive_field(chain(("conv", 3, 1)))
    assert (rf.r, rf.j) == (3, 1)


@pytest.mark.parametrize("variant,r", [("A", 11), ("B", 11), ("C", 15)])
def test_stem_fields(variant, r):
    rf = receptive_field(stem_graph(variant))
    assert (rf.r, rf.j) == (r, 4)


@pytest.mark.parametrize("pre_stride", [1, 2, 4])
@pytest.mark.parametrize("block,delta", [(basic_block, 4), (bottleneck_block, 2)])
def test_block_increments(block, delta, pre_stride):
    g = GraphBuilder("b", 8)
    x = g.conv("pre", g.input, 8, 1, stride=pre_stride, padding=0)
    y = block(g, "blk", x, 8, 1)
    rfs = receptive_fields(g.finish(y))
    assert rfs[y].r - rfs[x].r == delta * pre_stride
    assert rfs[y].j == pre_stride


@pytest.mark.parametrize("name", ["resnet86", "resnet101", "resnet56", "resnet50",
                                  "resnet150", "resnet18", "resnet22s", "resnet46n"])
@pytest.mark.parametrize("stride1", [1, 2])
def test_backbone_field_matches_recurrence(name, stride1):
    stem = "C" if name.endswith("n") else "A"
    g = backbone_graph(ModelConfig(name, stem, first_stage_stride=stride1))
    stem_r = 15 if stem == "C" else 11
    rf = receptive_field(g)
    assert (rf.r, rf.j) == backbone_rf_oracle(name, stem_r, 4, stride1)


def test_frozen_backbone_fields():
    # stride1=1, stem A
    expected = {"resnet86": 2259, "resnet101": 971, "resnet56": 1427, "resnet50": 427}
    for name, r in expected.items():
        rf = receptive_field(backbone_graph(ModelConfig(name)))
        assert (rf.r, rf.j) == (r, 32), name


@pytest.mark.parametrize("stride1", [1, 2])
def test_basic_exceeds_bottleneck(stride1):
    def r(name):
        return receptive_field(backbone_graph(ModelConfig(name, first_stage_stride=stride1))).r

    assert r("resnet86") > r("resnet101")
    assert r("resnet56") > r("resnet50")


def test_monotone_and_jump_equals_stride_product():
    g = backbone_graph(ModelConfig("resnet34", "B", first_stage_stride=2))
    rfs = receptive_fields(g)
    shapes = infer_shapes(g, (1, 3, 256, 256))
    for node in g.nodes:
        for i in node.inputs:
            assert rfs[node.id].r >= rfs[i].r
        assert rfs[node.id].j == 256 // shapes[node.id][2]


def test_upsample_divides_jump():
    g = GraphBuilder("u", 1)
    x = g.conv("c", g.input, 1, 3, stride=4)
    g.finish(x)
    yb = g.upsample("ub", x, 2, "bilinear")
    yn = g.upsample("un", x, 2, "nearest")
    rfs = receptive_fields(g.finish(yb))
    assert rfs[yb].j == 2 and rfs[yn].j == 2
    assert rfs[yn].r == rfs[x].r
    assert rfs[yb].r == rfs[x].r + 4


def test_full_model_field_is_computable():
    g = build_model(ModelConfig("resnet18", "A", "B", "B", first_stage_stride=2))
    rf = receptive_field(g)
    assert rf.j == 8
    assert rf.r > receptive_field(g, dict(g.taps)["layer4"]).r


def test_join_with_mismatched_jumps():
    g = GraphBuilder("bad", 1)
    a = g.conv("a", g.input, 1, 1, stride=2, padding=0)
    b = g.conv("b", g.input, 1, 1)
    y = g.add("add", a, b)
    with pytest.raises(ReceptiveFieldError, match="jumps"):
        receptive_fields(g.finish(y))


# -- impulse oracle ----------------------------------------------------------

def test_two_stacked_3x3():
    g = chain(("conv", 3, 1), ("conv", 3, 1))
    m = impulse_support_oracle(g, (1, 1, 15, 15))[g.output_id]
    assert m.size == (5, 5) and m.fits


@pytest.mark.parametrize("variant", ["A", "B", "C"])
def test_stems_against_oracle(variant):
    g = stem_graph(variant)
    m = impulse_support_oracle(g, (1, 3, 65, 65))[g.output_id]
    r = receptive_field(g).r
    assert m.fits and m.size == (r, r)


def random_graph(rng, idx):
    g = GraphBuilder(f"rand{idx}", 2)
    x = g.input
    jump = 1
    for i in range(int(rng.integers(2, 6))):
        op = rng.choice(["conv", "convbn", "pool", "basic", "bottleneck"])
        s = int(rng.choice([1, 2])) if jump < 8 else 1
        jump *= s
        if op == "conv":
            # kernels smaller than their stride leave holes in the support
            k = int(rng.choice([1, 3, 5] if s == 1 else [3, 5]))
            x = g.conv(f"c{i}", x, int(rng.integers(1, 4)), k, s)
        elif op == "convbn":
            x = g.conv_bn(f"cb{i}", x, 3, int(rng.choice([3, 5, 7])), s)
        elif op == "pool":
            k = int(rng.choice([2, 3]))
            x = g.maxpool(f"p{i}", x, k, s, k // 2 if k == 3 else 0)
        elif op == "basic":
            x = basic_block(g, f"b{i}", x, 4, s)
        else:
            x = bottleneck_block(g, f"n{i}", x, 4, s)
    return g.finish(x)


@pytest.mark.parametrize("idx", range(12))
def test_random_graphs_against_oracle(idx):
    g = random_graph(np.random.default_rng(100 + idx), idx)
    r = receptive_field(g).r
    rw = receptive_field(g, axis=1).r
    size = 2 * max(r, 16) + 1
    m = impulse_support_oracle(g, (1, 2, size, size + 6))[g.output_id]
    assert m.fits
    assert m.size == (r, rw)


def test_relu_does_not_change_support():
    linear = chain(("conv", 3, 2), ("conv", 5, 1), ("conv", 3, 1))
    relu = chain(("conv", 3, 2), ("relu", 0, 0), ("conv", 5, 1), ("relu", 0, 0), ("conv", 3, 1))
    a = impulse_support_oracle(linear, (1, 1, 41, 41))[linear.output_id]
    b = impulse_support_oracle(relu, (1, 1, 41, 41))[relu.output_id]
    assert a.size == b.size == (15, 15)


def test_oracle_reports_clipping():
    g = chain(("conv", 7, 1), ("conv", 7, 1))
    m = impulse_support_oracle(g, (1, 1, 9, 9))[g.output_id]
    assert not m.fits and m.size == (9, 9)


# -- params / flops / memory -------------------------------------------------

def test_conv_param_example():
    g = GraphBuilder("c", 64)
    g.conv("c", g.input, 64, 3)
    assert count_params(g.finish("c")).params == 36864


def resnet18_ffnet_closed_form(num_classes=19, up=256, seg=256):
    """Conv and BN parameter counts for resnet18 with stem A and stride1=2."""
    stem = 3 * 64 * 49
    widths = [64, 128, 256, 512]
    backbone = 0
    cin = 64
    for c in widths:
        # two basic blocks; first has a projection because every stage strides
        backbone += 9 * (cin * c + c * c) + 9 * (2 * c * c) + cin * c
        cin = c
    laterals = up * sum(widths)
    smooth = 4 * 9 * up * up
    fuse = 9 * 4 * up * seg
    classifier = seg * num_classes + num_classes
    conv = stem + backbone + laterals + smooth + fuse + classifier
    bn_channels = 64 + sum(5 * c for c in widths) + 4 * up + 4 * up + seg
    return conv, bn_channels


def test_resnet18_params_closed_form():
    conv, bn = resnet18_ffnet_closed_form()
    assert (conv, bn) == (16140243, 7168)  # frozen from the summation above
    rep = count_params(build_model(ModelConfig("resnet18", first_stage_stride=2)))
    assert rep.params == conv + 2 * bn
    assert rep.stats == 2 * bn
    assert sum(n.params for n in rep.by_kind("conv")) == conv


def test_resnet18_backbone_conv_params():
    rep = count_params(backbone_graph(ModelConfig("resnet18", first_stage_stride=2)))
    assert sum(n.params for n in rep.by_kind("conv")) == 9408 + 11161600


def test_conv_macs_example():
    g = GraphBuilder("c", 4)
    g.conv("c", g.input, 8, 1)
    rep = count_flops(g.finish("c"), (1, 4, 2, 2))
    node = rep.by_kind("conv")[0]
    assert node.macs == 128 and node.flops == 256


def test_concat_and_upsample_costs():
    g = GraphBuilder("j", 3)
    a = g.conv("a", g.input, 5, 1)
    up = g.upsample("up", a, 2, "nearest")
    b = g.conv("b", g.input, 2, 3, stride=1)
    cat = g.concat("cat", [g.maxpool("p", up, 2, 2), b])
    rep = count_flops(g.finish(cat), (1, 3, 8, 8))
    by_id = {n.id: n for n in rep.nodes}
    assert by_id["cat"].macs == 0
    assert by_id["cat"].mem_bytes == 4 * ((5 * 64 + 2 * 64) + 7 * 64)
    assert by_id["up"].macs == 0 and by_id["up"].flops == 0
    assert by_id["up"].mem_bytes == 4 * (5 * 64 + 4 * 5 * 64)


def test_relu_memory_example():
    g = GraphBuilder("r", 64)
    g.relu("r", g.input)
    rep = memory_traffic_estimate(g.finish("r"), (1, 64, 128, 256))
    assert rep.mem_bytes == 4 * 2 * 64 * 128 * 256
    assert rep.macs == 0


def test_totals_match_second_pass():
    g = build_model(ModelConfig("resnet34", "A", "B", "B"))
    dims = (1, 3, 256, 512)
    rep = count_flops(g, dims)
    shapes = infer_shapes(g, dims)
    macs = 0
    for n in g.nodes:
        if n.kind == "conv":
            kh, kw = n.params["kernel"]
            macs += int(np.prod(shapes[n.id])) * n.params["cin"] * kh * kw
    assert rep.macs == macs
    for attr in ("params", "stats", "macs", "flops", "mem_bytes"):
        assert rep.total(attr) == sum(getattr(n, attr) for n in rep.nodes)
    assert rep.flops == 2 * rep.macs + sum(n.flops for n in rep.nodes if n.kind != "conv")


def test_narrow_heads_reduce_traffic():
    dims = (1, 3, 512, 1024)
    aaa = memory_traffic_estimate(build_model(ModelConfig("resnet34", "A", "A", "A")), dims)
    abb = memory_traffic_estimate(build_model(ModelConfig("resnet34", "A", "B", "B")), dims)
    assert abb.mem_bytes < aaa.mem_bytes


def test_flops_invariant_under_folding():
    g = build_model(ModelConfig("resnet22s", "C", "C", "C"))
    dims = (1, 3, 128, 256)
    before = count_flops(g, dims)
    fg, _ = fold_batchnorm(g, init_random(g))
    after = count_flops(fg, dims)
    assert after.macs == before.macs
    assert after.flops == before.flops - sum(n.flops for n in before.by_kind("bn"))
    # folding moves each BN's shift into a conv bias; conv kernels are untouched
    kernels_before = sum(n.params for n in before.by_kind("conv"))
    kernels_after = sum(n.params for n in after.by_kind("conv"))
    bn_channels = before.stats // 2
    assert kernels_after == kernels_before + bn_channels
    assert after.stats == 0 and after.params == before.params - bn_channels


def test_profile_rows_and_csv():
    g = stem_graph("A")
    rep = profile(g, (1, 3, 64, 64))
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "id,kind,params,macs,flops,mem_bytes,r,j"
    assert len(rows) == len(g.nodes) + 2
    assert rows[-1].startswith("total,")
    last = dict(zip(rows[0].split(","), rows[-2].split(",")))
    assert last["id"] == "stem.pool" and (last["r"], last["j"]) == ("11", "4")
    assert "stem.pool" in rep.to_text()
