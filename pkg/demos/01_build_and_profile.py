"""
Building FFNets and reading their cost profiles
===============================================

A model is a backbone name plus three head letters (stem, Up-head,
Seg-head). Nothing here runs a forward pass; shapes, parameter counts and
FLOPs all come from the graph.
"""
from ffnet import ModelConfig, build_model, count_flops, infer_shapes, parse_config

# configs can be written as text, one or more key=value pairs per line
cfg = parse_config("""
backbone = resnet34
stem = A  up = A  seg = A
stride1 = 1
""")
graph = build_model(cfg)
print(graph.summary())

shapes = infer_shapes(graph, (1, 3, 1024, 2048))
for name, node in graph.taps:
    print(f"{name:8s} {shapes[node]}")
print("logits  ", shapes[graph.output_id])

# narrower heads: same backbone, same output size, much less compute
dims = (1, 3, 1024, 2048)
print(f"\n{'model':24s} {'params':>10s} {'GMAC':>8s} {'traffic MiB':>12s}")
for variants in ("A-A-A", "A-B-B", "A-C-C"):
    stem, up, seg = variants.split("-")
    g = build_model(cfg.with_(stem=stem, up=up, seg=seg))
    rep = count_flops(g, dims)
    print(f"{g.name:24s} {rep.params:10,d} {rep.macs / 1e9:8.1f} {rep.mem_bytes / 2**20:12.0f}")

# where does the time go?  group macs by the part of the network
rep = count_flops(graph, dims)
parts = {}
for n in rep.nodes:
    part = n.id.split(".")[0]
    part = "backbone" if part.startswith("layer") else part
    parts[part] = parts.get(part, 0) + n.macs
total = sum(parts.values())
for part, macs in parts.items():
    if macs:
        print(f"{part:10s} {100 * macs / total:5.1f}% of macs")

# a 3-stage model feeds its stem output straight into the Up-head
small = build_model(ModelConfig("resnet46ns", "C", "B", "B", upsample_mode="nearest"))
shapes = infer_shapes(small, (1, 3, 512, 1024))
print("\n", small.name, [name for name, _ in small.taps], shapes[small.output_id])
