"""
Receptive fields: basic blocks versus bottlenecks
=================================================

A basic block stacks two 3x3 convolutions, a bottleneck only one, so at
equal depth a basic-block backbone sees a much larger part of the image.
"""
from ffnet import ModelConfig, backbone_graph, impulse_support_oracle, receptive_field

for basic, bottleneck in (("resnet86", "resnet101"), ("resnet56", "resnet50")):
    rb = receptive_field(backbone_graph(ModelConfig(basic)))
    rn = receptive_field(backbone_graph(ModelConfig(bottleneck)))
    print(f"{basic:10s} r={rb.r:5d}   {bottleneck:10s} r={rn.r:5d}   (jump {rb.j})")

# the recurrence is checked by pushing single-pixel impulses through a
# network with strictly positive weights and watching which inputs reach
# the center output unit
g = backbone_graph(ModelConfig("resnet56"), max_blocks=5)
analytic = receptive_field(g)
measured = impulse_support_oracle(g, (1, 3, 161, 161))[g.output_id]
print(f"\nfirst 5 blocks of resnet56: analytic {analytic.r}, measured {measured.size}, "
      f"{measured.evaluations} forward passes")

# field growth block by block
cfg = ModelConfig("resnet18")
print("\nblocks  r    j")
for m in range(1, 9):
    rf = receptive_field(backbone_graph(cfg, max_blocks=m))
    print(f"{m:6d} {rf.r:4d} {rf.j:4d}")
